//! Hardness-indicated dataset sampling: harder and smaller datasets are
//! drawn more often. Repeat-factor sampling inside a long-tailed dataset.

use plaindet::data::{generate_family, master_taxonomy, DatasetEntry, FamilyConfig, FamilyMode};
use plaindet::sampler::{repeat_factors, SamplerState};

fn main() -> plaindet::Result<()> {
    let mut state = SamplerState::new(&[("coco", 400), ("lvis", 100), ("obj365", 1600)], 50, 1e-6, 0)?;
    println!("warm-up probabilities {:.3?}", state.probabilities());

    for (id, loss) in [("coco", 1.0), ("lvis", 2.5), ("obj365", 1.2)] {
        state.record_box_loss(id, loss)?;
    }
    state.compute_weights();
    for s in state.snapshot(200) {
        println!("  {:7} L={:.2} S={:5} w={:.3} p={:.3}", s.dataset_id, s.box_loss.unwrap(), s.size, s.weight, s.probability);
    }
    let plan = state.plan_epoch(1000);
    for id in ["coco", "lvis", "obj365"] {
        println!("  {id}: {} of 1000 draws", plan.draws.iter().filter(|(d, _)| d == id).count());
    }

    let tail = FamilyConfig {
        mode: FamilyMode::LongTail,
        scenes: 500,
        val_scenes: 1,
        datasets: vec![DatasetEntry {
            id: "tail".into(),
            classes: master_taxonomy(),
            scenes: None,
        }],
        ..FamilyConfig::default()
    };
    let ds = generate_family(&tail, 0)?.remove(0);
    let factors = repeat_factors(&ds, 0.3)?;
    let repeated = factors.iter().filter(|&&f| f > 1.0).count();
    let max = factors.iter().cloned().fold(1.0, f64::max);
    println!("repeat factors: {repeated}/{} images above 1, largest {max:.2}", factors.len());
    Ok(())
}
