//! `plaindet` command line. Exit codes: 0 success, 1 usage error, 2 runtime error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::checkpoint::load_checkpoint;
use crate::compositor::QueryMode;
use crate::config::{dataset_classifier, load_registry, EncoderConfig, TrainConfig};
use crate::data::{generate_family, load_dataset, save_dataset, FamilyConfig, EMBEDDINGS_FILE};
use crate::engine::{read_metrics_csv, write_sampler_csv, write_sampler_rows, RunInfo, Trainer};
use crate::error::{Error, Result};
use crate::eval::{evaluate, zeroshot_swap, ApReport, EvalOptions};
use crate::sampler::replay_snapshots;
use crate::semantic::{
    calibrate, load_embeddings, mean_abs_off_diagonal, save_embeddings, similarity_matrix, EmbeddingTable,
};

#[derive(Debug, Parser)]
#[command(name = "plaindet", version, about = "Multi-dataset query-based detection on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset family.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write embeddings.json for each dataset from the synthetic encoder.
        #[arg(long)]
        embeddings: bool,
        #[arg(long, default_value_t = 64)]
        embed_dim: usize,
        #[arg(long, default_value_t = 0)]
        encoder_seed: u64,
    },
    /// Calibrate an embedding table against its NULL embedding.
    Calibrate {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Long-format CSV of raw and calibrated pairwise cosines.
        #[arg(long)]
        report_similarity: Option<PathBuf>,
    },
    /// Train on one or more datasets.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        query_mode: Option<QueryMode>,
        #[arg(long)]
        steps: Option<usize>,
        /// Output directory; overrides `out_dir` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Checkpoint directory to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Per-dataset AP and mAP of a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, num_args = 1.., required = true)]
        data: Vec<PathBuf>,
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
        /// Also report AP averaged over IoU 0.5:0.95.
        #[arg(long)]
        coco: bool,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a new label space by swapping in its classifier.
    Zeroshot {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        source: String,
        #[arg(long)]
        target: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Replay sampler weights from a metrics CSV.
    PlotSampler {
        #[arg(long)]
        metrics: PathBuf,
        /// Defaults to run_info.json next to the metrics file.
        #[arg(long)]
        run_info: Option<PathBuf>,
        /// Dataset sizes as `id=size,...`; replaces run_info.
        #[arg(long, value_delimiter = ',')]
        sizes: Vec<String>,
        #[arg(long, default_value_t = 50)]
        window: usize,
        #[arg(long, default_value_t = 200)]
        recompute_every: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Parses `argv` (including the program name), runs, and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData {
            config,
            out,
            seed,
            embeddings,
            embed_dim,
            encoder_seed,
        } => gen_data(&config, &out, seed, embeddings.then_some((embed_dim, encoder_seed))),
        Command::Calibrate {
            embeddings,
            out,
            report_similarity,
        } => calibrate_cmd(&embeddings, &out, report_similarity.as_deref()),
        Command::Train {
            config,
            query_mode,
            steps,
            out,
            resume,
        } => train_cmd(&config, query_mode, steps, out, resume.as_deref()),
        Command::Eval {
            ckpt,
            data,
            iou,
            coco,
            report,
        } => eval_cmd(&ckpt, &data, iou, coco, report.as_deref()),
        Command::Zeroshot {
            ckpt,
            source,
            target,
            iou,
            report,
        } => zeroshot_cmd(&ckpt, &source, &target, iou, report.as_deref()),
        Command::PlotSampler {
            metrics,
            run_info,
            sizes,
            window,
            recompute_every,
            out,
        } => plot_sampler(&metrics, run_info, &sizes, window, recompute_every, out.as_deref()),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    serde_json::from_str(&text).map_err(|e| Error::from_json(path, e))
}

fn gen_data(config: &Path, out: &Path, seed: u64, embeddings: Option<(usize, u64)>) -> Result<()> {
    let cfg: FamilyConfig = read_json(config)?;
    let specs = generate_family(&cfg, seed)?;
    for spec in &specs {
        let dir = out.join(&spec.dataset_id);
        save_dataset(spec, &dir)?;
        if let Some((dim, encoder_seed)) = embeddings {
            let enc = EncoderConfig {
                seed: encoder_seed,
                ..EncoderConfig::default()
            };
            save_embeddings(&enc.embed(spec, dim)?, &dir.join(EMBEDDINGS_FILE))?;
        }
        println!(
            "{}: {} classes, {} train / {} val images -> {}",
            spec.dataset_id,
            spec.label_space.len(),
            spec.train.len(),
            spec.val.len(),
            dir.display()
        );
    }
    Ok(())
}

fn calibrate_cmd(embeddings: &Path, out: &Path, report: Option<&Path>) -> Result<()> {
    let table = load_embeddings(embeddings)?;
    let id = embeddings
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "embeddings".into());
    let head = calibrate(&id, &table)?;
    let raw_sim = similarity_matrix(table.vectors.view())?;
    let cal_sim = head.similarity();
    let calibrated = EmbeddingTable::new(
        head.labels.clone(),
        head.matrix.clone(),
        ndarray::Array1::zeros(head.dim()),
    )?;
    save_embeddings(&calibrated, out)?;
    println!(
        "mean |off-diagonal cosine|: raw {:.6}, calibrated {:.6}",
        mean_abs_off_diagonal(&raw_sim),
        mean_abs_off_diagonal(&cal_sim)
    );
    if let Some(path) = report {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["stage", "row", "col", "cosine"])?;
        for (stage, sim) in [("raw", &raw_sim), ("calibrated", &cal_sim)] {
            for (i, a) in head.labels.iter().enumerate() {
                for (j, b) in head.labels.iter().enumerate() {
                    w.write_record([stage, a, b, &sim[[i, j]].to_string()])?;
                }
            }
        }
        w.flush()?;
    }
    Ok(())
}

fn train_cmd(
    config: &Path,
    query_mode: Option<QueryMode>,
    steps: Option<usize>,
    out: Option<PathBuf>,
    resume: Option<&Path>,
) -> Result<()> {
    let mut cfg = TrainConfig::load(config)?;
    if let Some(m) = query_mode {
        cfg.model.query_mode = m;
    }
    if let Some(s) = steps {
        cfg.steps = s;
    }
    if out.is_some() {
        cfg.out_dir = out;
    }
    // relative dataset paths are resolved against the config file
    let base = config.parent().unwrap_or(Path::new("."));
    cfg.datasets = cfg
        .datasets
        .iter()
        .map(|d| if d.is_relative() { base.join(d) } else { d.clone() })
        .collect();
    let out_dir = cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("plaindet-run"));
    cfg.validate()?;
    let registry = load_registry(&cfg.datasets, &cfg.encoder, cfg.model.embed_dim)?;
    let mut trainer = match resume {
        Some(dir) => Trainer::resume(cfg.clone(), registry, load_checkpoint(dir)?)?,
        None => Trainer::new(cfg.clone(), registry)?,
    };
    let start = trainer.step();
    trainer.run()?;
    trainer.write_outputs(&out_dir)?;
    let mut counts: Vec<_> = trainer.metrics.counts().into_iter().collect();
    counts.sort();
    println!("trained steps {}..{} ({:?})", start + 1, trainer.step(), counts);
    if let Some(last) = trainer.metrics.rows.last() {
        println!(
            "last step {} on {}: cls {:.4} l1 {:.4} giou {:.4} total {:.4}",
            last.step, last.dataset_id, last.cls, last.l1, last.giou, last.total
        );
    }
    println!("outputs in {}", out_dir.display());
    Ok(())
}

fn write_report(report: &ApReport, path: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(&report.to_json()).expect("report serializes");
    println!("{text}");
    if let Some(p) = path {
        std::fs::write(p, text)?;
    }
    Ok(())
}

fn eval_cmd(ckpt: &Path, data: &[PathBuf], iou: f64, coco: bool, report: Option<&Path>) -> Result<()> {
    if !(iou > 0.0 && iou <= 1.0) {
        return Err(Error::Config(format!("IoU threshold {iou} must be in (0, 1]")));
    }
    let ckpt = load_checkpoint(ckpt)?;
    let detector = ckpt.detector()?;
    let registry = load_registry(data, &ckpt.encoder, ckpt.model.embed_dim)?;
    let opts = EvalOptions {
        iou,
        coco_range: coco,
        ..EvalOptions::default()
    };
    write_report(&evaluate(&detector, &registry, &opts)?, report)
}

fn zeroshot_cmd(ckpt: &Path, source: &str, target: &Path, iou: f64, report: Option<&Path>) -> Result<()> {
    let ckpt = load_checkpoint(ckpt)?;
    if !ckpt.sampler.slots().iter().any(|s| s.dataset_id == source) {
        return Err(Error::UnknownDataset(source.to_string()));
    }
    let detector = ckpt.detector()?;
    let spec = load_dataset(target)?;
    let head = dataset_classifier(&spec, Some(target), &ckpt.encoder, ckpt.model.embed_dim)?;
    let opts = EvalOptions {
        iou,
        ..EvalOptions::default()
    };
    let entry = zeroshot_swap(&detector, source, &spec, &head, &opts)?;
    write_report(&ApReport::from_entries(vec![entry]), report)
}

fn plot_sampler(
    metrics: &Path,
    run_info: Option<PathBuf>,
    sizes: &[String],
    window: usize,
    recompute_every: usize,
    out: Option<&Path>,
) -> Result<()> {
    let rows = read_metrics_csv(metrics)?;
    let (sizes, window, recompute_every, floor, weights) = if sizes.is_empty() {
        let path = run_info.unwrap_or_else(|| metrics.with_file_name("run_info.json"));
        let info = RunInfo::load(&path)?;
        (info.datasets, info.window, info.recompute_every, info.loss_floor, info.loss)
    } else {
        let parsed = sizes
            .iter()
            .map(|s| {
                let (id, n) = s
                    .split_once('=')
                    .ok_or_else(|| Error::Config(format!("size `{s}` is not of the form id=count")))?;
                let n: usize = n
                    .parse()
                    .map_err(|_| Error::Config(format!("size `{s}` has a non-integer count")))?;
                Ok((id.to_string(), n))
            })
            .collect::<Result<Vec<_>>>()?;
        (parsed, window, recompute_every, 1e-6, Default::default())
    };
    let steps: Vec<(usize, String, f64)> = rows
        .iter()
        .map(|r| (r.step, r.dataset_id.clone(), weights.box_loss(r.l1, r.giou)))
        .collect();
    let size_refs: Vec<(&str, usize)> = sizes.iter().map(|(id, n)| (id.as_str(), *n)).collect();
    let snaps = replay_snapshots(&steps, &size_refs, window, recompute_every, floor)?;
    match out {
        Some(p) => write_sampler_csv(p, &snaps)?,
        None => write_sampler_rows(std::io::stdout().lock(), &snaps)?,
    }
    Ok(())
}
