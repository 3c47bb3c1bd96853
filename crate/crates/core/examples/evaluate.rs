//! Average precision from a hand-built ranking, then a full report for an
//! untrained detector against the random-detector floor.

use plaindet::config::{registry_from_specs, EncoderConfig};
use plaindet::data::{generate_family, FamilyConfig};
use plaindet::eval::{class_average_precision, evaluate, random_detector_ap, EvalOptions, ScoredBox};
use plaindet::model::{Detector, ModelConfig};

fn main() -> plaindet::Result<()> {
    let g1 = [0.3, 0.3, 0.2, 0.2];
    let g2 = [0.7, 0.6, 0.2, 0.3];
    let dets = [
        ScoredBox { image: 0, score: 0.9, bbox: g1 },
        ScoredBox { image: 0, score: 0.8, bbox: [0.9, 0.1, 0.05, 0.05] },
        ScoredBox { image: 0, score: 0.7, bbox: g2 },
    ];
    println!("TP, FP, TP over two objects: AP = {:.4}", class_average_precision(&dets, &[vec![g1, g2]], 0.5));

    let family = FamilyConfig {
        scenes: 10,
        val_scenes: 40,
        ..FamilyConfig::default()
    };
    let registry = registry_from_specs(generate_family(&family, 0)?, &EncoderConfig::default(), 64)?;
    let det = Detector::new(ModelConfig::default(), 0)?;
    let opts = EvalOptions {
        coco_range: true,
        ..EvalOptions::default()
    };
    println!("untrained detector: {}", evaluate(&det, &registry, &opts)?.to_json());
    for (spec, _) in registry.iter() {
        let floor: f64 = (0..10).map(|s| random_detector_ap(spec, 20, &opts, s)).sum::<plaindet::Result<f64>>()? / 10.0;
        println!("random floor on {}: {floor:.4}", spec.dataset_id);
    }
    Ok(())
}
