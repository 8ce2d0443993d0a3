//! Long-tailed synthetic features: class profile, a stratified split and a
//! CSV round trip.
//!
//! cargo run --example generate_data -- [out.csv]

use selmix::data::{generate_longtail, load_dataset, save_dataset, split, LtSpec, SplitFractions};

fn main() -> selmix::Result<()> {
    let spec = LtSpec::default();
    println!("class counts {:?}", spec.class_counts());
    let ds = generate_longtail(&spec)?;
    let (train, val, unlabeled) = split(&ds, SplitFractions::new(0.6, 0.2, 0.2), 0)?;
    println!(
        "train {:?}\nval   {:?}\nunl   {} rows (labels hidden)",
        train.class_counts(),
        val.class_counts(),
        unlabeled.len()
    );

    let path = std::env::args().nth(1).unwrap_or_else(|| {
        std::env::temp_dir()
            .join("selmix_lt.csv")
            .display()
            .to_string()
    });
    save_dataset(&ds, &path)?;
    let back = load_dataset(&path, Some(spec.num_classes))?;
    assert_eq!(back, ds);
    println!("wrote and reloaded {path}");
    Ok(())
}
