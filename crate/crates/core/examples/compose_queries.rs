//! Class-aware queries: a per-dataset basis from the calibrated classifier,
//! mixed by weights regressed from the pooled image feature.

use plaindet::compositor::{compose, QueryMode};
use plaindet::config::{registry_from_specs, EncoderConfig};
use plaindet::data::{generate_family, FamilyConfig, Split};
use plaindet::model::{Detector, ModelConfig};

fn main() -> plaindet::Result<()> {
    let family = FamilyConfig {
        scenes: 2,
        val_scenes: 1,
        ..FamilyConfig::default()
    };
    let registry = registry_from_specs(generate_family(&family, 3)?, &EncoderConfig::default(), 64)?;
    let det = Detector::new(ModelConfig::default(), 1)?;

    for (spec, head) in registry.iter() {
        let tokens = det.encode_image(&spec.batch(Split::Train, &[0]))?.tokens.remove(0);
        let basis = det.query_basis(head)?;
        let mix = det.image_mix_weights(&tokens, head.num_classes())?;
        let queries = compose(&basis, &mix)?;
        println!(
            "{}: basis {:?} x mix {:?} -> queries {:?}",
            spec.dataset_id,
            basis.basis.dim(),
            mix.weights.dim(),
            queries.queries.dim()
        );
        for mode in [QueryMode::Learnable, QueryMode::TopkPixel] {
            let q = det.make_queries(mode, &tokens, head)?;
            println!("  {mode} baseline -> {:?}", q.queries.dim());
        }
    }
    Ok(())
}
