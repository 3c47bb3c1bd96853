//! One shared detector, two dataset heads: boxes are class-agnostic, scores
//! follow whichever frozen classifier is plugged in.

use std::collections::HashMap;

use plaindet::compositor::QueryMode;
use plaindet::config::{registry_from_specs, EncoderConfig};
use plaindet::data::{generate_family, FamilyConfig, Split};
use plaindet::model::{Detector, ModelConfig};

fn main() -> plaindet::Result<()> {
    let family = FamilyConfig {
        scenes: 4,
        val_scenes: 1,
        ..FamilyConfig::default()
    };
    let registry = registry_from_specs(generate_family(&family, 0)?, &EncoderConfig::default(), 64)?;
    let heads: HashMap<_, _> = registry.iter().map(|(d, c)| (d.dataset_id.clone(), c.clone())).collect();

    for mode in QueryMode::ALL {
        let det = Detector::new(ModelConfig { query_mode: mode, ..ModelConfig::default() }, 0)?;
        println!("{mode}: {} parameters", det.params.num_scalars());
        for id in ["A", "B"] {
            let batch = registry.dataset(id)?.batch(Split::Train, &[0, 1]);
            let fm = det.encode_image(&batch)?;
            let out = det.forward(&batch, &heads)?;
            let best = out[0].class_scores.iter().cloned().fold(0.0, f64::max);
            println!(
                "  head {id}: {} tokens on a {:?} grid, scores {:?}, first box {:?}, best score {best:.3}",
                fm.tokens[0].nrows(),
                fm.grid,
                out[0].class_scores.dim(),
                out[0].box_at(0).map(|v| (v * 1000.0).round() / 1000.0),
            );
        }
    }
    Ok(())
}
