//! Generate a shared-image family (A annotates 4 of B's 8 classes on the
//! same scenes), write it to disk and read it back.

use plaindet::data::{generate_family, load_dataset, render, save_dataset, FamilyConfig};

fn main() -> plaindet::Result<()> {
    let out = std::env::args().nth(1).map(std::path::PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("plaindet-family"));
    let family = generate_family(&FamilyConfig::default(), 0)?;
    for ds in &family {
        let objects: usize = ds.train.iter().map(|r| r.annotations.len()).sum();
        println!(
            "{}: {} classes {:?}, {} train / {} val images, {objects} train objects",
            ds.dataset_id,
            ds.label_space.len(),
            ds.label_space.names(),
            ds.train.len(),
            ds.val.len()
        );
        let dir = out.join(&ds.dataset_id);
        save_dataset(ds, &dir)?;
        assert_eq!(&load_dataset(&dir)?, ds);
    }
    let (img, boxes) = render(&family[1].train[0].recipe);
    println!("first scene: {:?} pixels, {} objects in B, {} in A", img.dim(), boxes.len(), family[0].train[0].annotations.len());
    println!("written to {}", out.display());
    Ok(())
}
