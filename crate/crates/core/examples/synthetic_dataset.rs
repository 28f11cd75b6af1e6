//! Writes a small synthetic paired dataset and reads its manifest back.
//!
//! Usage: `cargo run --example synthetic_dataset -- [DIR] [COUNT] [SIZE]`

use calflow::dataset::{load_manifest, synthetic_pairs, write_dataset, LowLightModel, Spectrum, Split};

fn main() -> calflow::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = args.next().unwrap_or_else(|| "synthetic_pairs".into());
    let count: usize = args.next().map_or(8, |s| s.parse().expect("COUNT must be an integer"));
    let size: usize = args.next().map_or(64, |s| s.parse().expect("SIZE must be an integer"));

    let model = LowLightModel::default();
    let pairs = synthetic_pairs(count, size, size, &model, 7)?;
    std::fs::create_dir_all(&dir).map_err(|e| calflow::Error::Io { path: dir.clone().into(), source: e })?;
    let manifest_path = write_dataset(&dir, &pairs, Split::Train, Spectrum::IrRgb)?;

    let manifest = load_manifest(&manifest_path)?;
    println!("wrote {} pairs to {}", manifest.len(), manifest_path.display());
    for (i, e) in manifest.entries.iter().enumerate().take(3) {
        println!("  {i}: {} <- {}", e.reference.display(), e.low.display());
    }
    let mean = |img: &calflow::Image, c: usize| img.channel(c).iter().sum::<f64>() / img.plane_len() as f64;
    let p = &pairs[0];
    println!("channel means of pair 0 (low / ref):");
    for (c, name) in ["r", "g", "b"].iter().enumerate() {
        println!("  {name}: {:.3} / {:.3}", mean(&p.low, c), mean(&p.reference, c));
    }
    Ok(())
}
