mod common;

use std::path::Path;

use plaindet::checkpoint::{load_checkpoint, save_checkpoint, BLOB};
use plaindet::config::{registry_from_specs, EncoderConfig, OptimizerConfig, OptimizerKind, TrainConfig};
use plaindet::data::{generate_family, render, FamilyConfig, Registry};
use plaindet::engine::{read_metrics_csv, single_dataset_baseline, train_registry, Trainer, METRICS_HEADER};
use plaindet::eval::{zeroshot_swap, EvalOptions};
use plaindet::model::{Detector, ModelConfig};
use plaindet::sampler::SamplerState;
use plaindet::Error;

fn model() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        num_queries: 6,
        encoder_layers: 1,
        decoder_layers: 1,
        heads: 2,
        ffn_dim: 32,
        embed_dim: 16,
        ..ModelConfig::default()
    }
}

fn config(steps: usize) -> TrainConfig {
    let mut cfg = TrainConfig {
        model: model(),
        steps,
        batch_size: 2,
        eval_every: 0,
        seed: 3,
        ..TrainConfig::default()
    };
    cfg.sampler.window = 5;
    cfg.sampler.recompute_every = 20;
    cfg
}

fn family_cfg() -> FamilyConfig {
    FamilyConfig {
        scenes: 12,
        val_scenes: 4,
        canvas: 32,
        min_extent: 3,
        max_extent: 8,
        max_objects: 3,
        ..FamilyConfig::default()
    }
}

fn registry() -> Registry {
    registry_from_specs(generate_family(&family_cfg(), 1).unwrap(), &EncoderConfig::default(), 16).unwrap()
}

#[test]
fn training_reduces_loss_on_a_fixed_fixture() {
    let mut cfg = config(500);
    cfg.optimizer = OptimizerConfig {
        kind: OptimizerKind::Adam,
        ..OptimizerConfig::default()
    };
    let reg = registry().subset(&["A"]).unwrap();
    let (spec, head) = reg.lookup("A").unwrap();
    let fixture: Vec<_> = spec.train[..4].iter().map(|r| (render(&r.recipe).0, r.annotations.clone())).collect();
    let head = head.clone();
    let fixture_loss = |det: &Detector| {
        fixture
            .iter()
            .map(|(img, gt)| det.loss(img, gt, &head, &cfg.loss).unwrap().total)
            .sum::<f64>()
    };
    let before = fixture_loss(&Detector::new(cfg.model.clone(), cfg.seed).unwrap());
    let out = train_registry(&cfg, reg.clone()).unwrap();
    let after = fixture_loss(&out.detector);
    assert!(after < before, "{before} -> {after}");
    assert!(out.metrics.rows.iter().all(|r| r.dataset_id == "A"));
}

#[test]
fn symmetric_datasets_are_drawn_equally() {
    let mut s = SamplerState::new(&[("a", 100), ("b", 100)], 50, 1e-6, 17).unwrap();
    let mut counts = [0usize; 2];
    for step in 1..=10_000 {
        let i = s.sample_index();
        counts[i] += 1;
        s.record_box_loss(if i == 0 { "a" } else { "b" }, 1.5).unwrap();
        if step % 200 == 0 {
            s.compute_weights();
        }
    }
    let ratio = counts[0] as f64 / counts[1] as f64;
    assert!((ratio - 1.0).abs() <= 0.05, "{counts:?}");
}

#[test]
fn zero_steps_return_the_initialisation() {
    let cfg = config(0);
    let out = train_registry(&cfg, registry()).unwrap();
    assert_eq!(out.detector, Detector::new(cfg.model.clone(), cfg.seed).unwrap());
    assert!(out.metrics.rows.is_empty());
    assert_eq!(out.checkpoint.step, 0);
}

#[test]
fn baseline_is_reproducible_and_swappable() {
    let cfg = config(6);
    let reg = registry();
    let a = single_dataset_baseline(&cfg, &reg, "A").unwrap();
    let b = single_dataset_baseline(&cfg, &reg, "A").unwrap();
    assert_eq!(a.checkpoint, b.checkpoint);
    let (target, head) = reg.lookup("B").unwrap();
    zeroshot_swap(&a.detector, "A", target, head, &EvalOptions::default()).unwrap();
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let mut cfg = config(5);
    cfg.optimizer.kind = OptimizerKind::Adam;
    let out = train_registry(&cfg, registry()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&out.checkpoint, dir.path()).unwrap();
    let back = load_checkpoint(dir.path()).unwrap();
    assert_eq!(back, out.checkpoint);

    let again = tempfile::tempdir().unwrap();
    save_checkpoint(&back, again.path()).unwrap();
    let blob = std::fs::read(dir.path().join(BLOB)).unwrap();
    assert_eq!(blob, std::fs::read(again.path().join(BLOB)).unwrap());

    std::fs::write(dir.path().join(BLOB), &blob[..blob.len() - 6]).unwrap();
    assert!(matches!(load_checkpoint(dir.path()), Err(Error::CorruptCheckpoint(_))));
    let empty = tempfile::tempdir().unwrap();
    assert!(matches!(load_checkpoint(empty.path()), Err(Error::MissingFile(_))));
}

#[test]
fn resumed_run_continues_identically() {
    for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
        let mut cfg = config(150);
        cfg.optimizer.kind = kind;
        let full = train_registry(&cfg, registry()).unwrap();

        let mut first = Trainer::new(cfg.clone(), registry()).unwrap();
        first.run_until(100).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&first.checkpoint(), dir.path()).unwrap();
        let resumed = plaindet::engine::resume(&cfg, registry(), dir.path()).unwrap();
        assert_eq!(resumed.metrics.rows, full.metrics.rows[100..]);
        assert_eq!(resumed.metrics.rows[0].step, 101);
        assert_eq!(resumed.checkpoint, full.checkpoint);
    }
}

fn csv_bytes(cfg: &TrainConfig, dir: &Path) -> Vec<u8> {
    let out = train_registry(cfg, registry()).unwrap();
    let path = dir.join("metrics.csv");
    out.metrics.write_csv(&path).unwrap();
    std::fs::read(path).unwrap()
}

#[test]
fn identical_seeds_identical_metrics() {
    let cfg = config(30);
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let a = csv_bytes(&cfg, d1.path());
    assert_eq!(a, csv_bytes(&cfg, d2.path()));
    let header = String::from_utf8(a.clone()).unwrap().lines().next().unwrap().to_string();
    assert_eq!(header, METRICS_HEADER.join(","));
    let other = TrainConfig { seed: 4, ..cfg };
    assert_ne!(a, csv_bytes(&other, d1.path()));
}

#[test]
fn bookkeeping_invariants() {
    let mut cfg = config(40);
    cfg.sampler.recompute_every = 10;
    let reg = registry();
    let heads_before: Vec<_> = reg.iter().map(|(_, c)| c.matrix.clone()).collect();
    let mut trainer = Trainer::new(cfg.clone(), reg).unwrap();
    trainer.run().unwrap();
    for ((_, c), before) in trainer.registry().iter().zip(&heads_before) {
        let a: Vec<u64> = c.matrix.iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = before.iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }
    assert_eq!(trainer.step(), 40);
    assert_eq!(trainer.optimizer.t, 40);
    let rows = &trainer.metrics.rows;
    assert_eq!(rows.len(), 40);
    assert!(rows.windows(2).all(|w| w[1].step == w[0].step + 1));
    let w = cfg.loss;
    for r in rows {
        assert!((r.total - (w.cls * r.cls + w.l1 * r.l1 + w.giou * r.giou)).abs() < 1e-9);
    }
    let counts = trainer.metrics.counts();
    assert_eq!(counts.values().sum::<usize>(), 40);
    assert_eq!(trainer.metrics.sampler.len(), 4 * 2);

    let dir = tempfile::tempdir().unwrap();
    trainer.write_outputs(dir.path()).unwrap();
    assert_eq!(read_metrics_csv(&dir.path().join("metrics.csv")).unwrap(), *rows);
    assert!(matches!(read_metrics_csv(&dir.path().join("nope.csv")), Err(Error::MissingFile(_))));
}

// ---- command line ----

fn cli(args: &[&str]) -> i32 {
    let mut argv = vec!["plaindet".to_string()];
    argv.extend(args.iter().map(|s| s.to_string()));
    plaindet::cli::run(argv)
}

fn write_json(path: &Path, value: &impl serde::Serialize) {
    std::fs::write(path, serde_json::to_string_pretty(value).unwrap()).unwrap();
}

#[test]
fn cli_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).display().to_string();
    write_json(&dir.path().join("family.json"), &family_cfg());
    assert_eq!(
        cli(&["gen-data", "--config", &p("family.json"), "--out", &p("data"), "--seed", "2", "--embeddings", "--embed-dim", "16"]),
        0
    );

    let mut cfg = config(4);
    cfg.datasets = vec!["data/A".into(), "data/B".into()];
    write_json(&dir.path().join("train.json"), &cfg);
    assert_eq!(cli(&["train", "--config", &p("train.json"), "--out", &p("run")]), 0);
    for f in ["metrics.csv", "sampler.csv", "run_info.json", "checkpoint/manifest.json"] {
        assert!(dir.path().join("run").join(f).exists(), "{f}");
    }
    assert_eq!(
        cli(&["train", "--config", &p("train.json"), "--out", &p("run2"), "--resume", &p("run/checkpoint"), "--steps", "6"]),
        0
    );
    assert_eq!(read_metrics_csv(&dir.path().join("run2/metrics.csv")).unwrap()[0].step, 5);
    assert_eq!(
        cli(&["train", "--config", &p("train.json"), "--out", &p("run3"), "--query-mode", "topk-pixel", "--steps", "2"]),
        0
    );

    assert_eq!(
        cli(&["eval", "--ckpt", &p("run/checkpoint"), "--data", &p("data/A"), &p("data/B"), "--report", &p("ap.json")]),
        0
    );
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("ap.json")).unwrap()).unwrap();
    assert!(report["mAP"].is_number() && report["A"]["n_images"] == 4);

    assert_eq!(
        cli(&["zeroshot", "--ckpt", &p("run/checkpoint"), "--source", "B", "--target", &p("data/A"), "--report", &p("zs.json")]),
        0
    );
    assert_eq!(cli(&["plot-sampler", "--metrics", &p("run/metrics.csv"), "--out", &p("replay.csv")]), 0);
    assert_eq!(
        std::fs::read_to_string(dir.path().join("replay.csv")).unwrap().lines().next().unwrap(),
        "step,dataset_id,L_m,S_m,w_m,p_m"
    );
    assert_eq!(
        cli(&["calibrate", "--embeddings", &p("data/B/embeddings.json"), "--out", &p("cal.json"), "--report-similarity", &p("sim.csv")]),
        0
    );

    assert_eq!(cli(&["eval", "--ckpt", &p("missing"), "--data", &p("data/A")]), 2);
}

#[test]
fn cli_usage_errors() {
    assert_eq!(cli(&["bogus"]), 1);
    assert_eq!(cli(&["train", "--config", "x.json", "--frobnicate"]), 1);
    assert_eq!(cli(&[]), 1);
    assert_eq!(cli(&["train", "--config", "x.json", "--query-mode", "dense"]), 1);
    for sub in ["gen-data", "calibrate", "train", "eval", "zeroshot", "plot-sampler"] {
        assert_eq!(cli(&[sub, "--help"]), 0, "{sub}");
    }
}

#[test]
fn cli_reports_divergence() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).display().to_string();
    write_json(&dir.path().join("family.json"), &family_cfg());
    assert_eq!(cli(&["gen-data", "--config", &p("family.json"), "--out", &p("data")]), 0);
    let mut cfg = config(20);
    cfg.datasets = vec![dir.path().join("data/A")];
    cfg.optimizer.lr = 1e300;
    cfg.model.embed_dim = 64;
    write_json(&dir.path().join("train.json"), &cfg);
    assert_eq!(cli(&["train", "--config", &p("train.json"), "--out", &p("run")]), 2);

    let mut trainer = Trainer::new(
        TrainConfig {
            datasets: vec![],
            ..cfg.clone()
        },
        registry_from_specs(generate_family(&family_cfg(), 1).unwrap(), &EncoderConfig::default(), 64).unwrap(),
    )
    .unwrap();
    assert!(matches!(trainer.run(), Err(Error::Diverged { .. })));
}
