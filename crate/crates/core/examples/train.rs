//! Joint training on two datasets with the hardness sampler, compared with a
//! single-dataset run on the same step budget.

use plaindet::config::{registry_from_specs, OptimizerKind, TrainConfig};
use plaindet::data::{generate_family, FamilyConfig};
use plaindet::engine::{single_dataset_baseline, train_registry, validation_report};
use plaindet::model::ModelConfig;

fn main() -> plaindet::Result<()> {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(400);
    let mut cfg = TrainConfig {
        model: ModelConfig {
            d_model: 32,
            heads: 2,
            ffn_dim: 64,
            num_queries: 10,
            encoder_layers: 1,
            ..ModelConfig::default()
        },
        steps,
        eval_every: 0,
        ..TrainConfig::default()
    };
    cfg.optimizer.kind = OptimizerKind::Adam;
    cfg.sampler.recompute_every = 100;

    let family = FamilyConfig {
        max_objects: 3,
        min_extent: 6,
        max_extent: 14,
        ..FamilyConfig::default()
    };
    let registry = registry_from_specs(generate_family(&family, 0)?, &cfg.encoder, cfg.model.embed_dim)?;

    let joint = train_registry(&cfg, registry.clone())?;
    for s in joint.metrics.sampler.iter().rev().take(2) {
        println!("step {} {}: L={:.3} p={:.3}", s.step, s.dataset_id, s.box_loss.unwrap_or(f64::NAN), s.probability);
    }
    let counts = joint.metrics.counts();
    println!("steps per dataset: {counts:?}");
    let report = validation_report(&joint.detector, &registry)?;
    println!("joint   {}", report.to_json());

    let single = single_dataset_baseline(&cfg, &registry, "A")?;
    let a = registry.subset(&["A"])?;
    println!("single  {}", validation_report(&single.detector, &a)?.to_json());
    Ok(())
}
