//! PNG round trip through the planar float image type.
//!
//! Usage: `cargo run --example image_io -- [IN.png] [OUT.png]`

use calflow::dataset::synthetic_scene;
use calflow::image::{load_png, save_png};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> calflow::Result<()> {
    let mut args = std::env::args().skip(1);
    let img = match args.next() {
        Some(path) => load_png(path)?,
        None => synthetic_scene(32, 48, &mut ChaCha8Rng::seed_from_u64(1)),
    };
    let (c, h, w) = img.shape();
    println!("{c} channels, {h}x{w}, value range [{:.3}, {:.3}]",
        img.data().iter().copied().fold(f64::INFINITY, f64::min),
        img.data().iter().copied().fold(f64::NEG_INFINITY, f64::max));

    let out = args.next().unwrap_or_else(|| std::env::temp_dir().join("calflow_image_io.png").display().to_string());
    save_png(&img, &out)?;
    let back = load_png(&out)?;
    let err = back.data().iter().zip(img.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    println!("wrote {out}; 8-bit round trip max error {err:.5} (half a level is {:.5})", 0.5 / 255.0);

    let crop = img.crop(h / 4, w / 4, h / 2, w / 2)?;
    println!("center crop {:?}", crop.shape());
    Ok(())
}
