//! Encode a label space, remove the shared NULL direction, and compare the
//! class-similarity structure before and after.

use plaindet::semantic::{
    build_prompts, calibrate, encode_labels, mean_abs_off_diagonal, LabelSpace, SyntheticEncoder,
};

fn main() -> plaindet::Result<()> {
    let names = ["person", "bicycle", "car", "dog", "umbrella", "kite"];
    let space = LabelSpace::new("demo", names.iter().map(|s| s.to_string()).collect())?;
    println!("prompts: {:?}", build_prompts(&space)?);

    // "person" leans much harder on the bias direction than the rest
    let encoder = SyntheticEncoder::new(7).with_beta("person", 3.0);
    let table = encode_labels(&space, &encoder)?;
    let head = calibrate("demo", &table)?;

    let raw = table.similarity()?;
    let cal = head.similarity();
    println!("mean |off-diagonal cosine|  raw {:.3}  calibrated {:.3}", mean_abs_off_diagonal(&raw), mean_abs_off_diagonal(&cal));
    println!("{:>10} {:>8} {:>8}", "vs person", "raw", "cal");
    for (i, n) in names.iter().enumerate().skip(1) {
        println!("{n:>10} {:>8.3} {:>8.3}", raw[[0, i]], cal[[0, i]]);
    }
    Ok(())
}
