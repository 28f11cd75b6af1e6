//! Soft per-channel histograms of a synthetic scene, and how the kernel
//! sharpness trades smoothness against resolution.

use calflow::dataset::synthetic_scene;
use calflow::histogram::soft_hist;
use calflow::{HistogramGrid, KernelConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> calflow::Result<()> {
    let img = synthetic_scene(48, 48, &mut ChaCha8Rng::seed_from_u64(4));
    let grid = HistogramGrid::unit_64();
    let auto = KernelConfig::auto(&grid);
    println!("64 bins on [0, 1], step {:.5}, auto delta {}", grid.step(), auto.delta());

    for (c, name) in ["red", "green", "blue"].iter().enumerate() {
        let h = soft_hist(img.channel(c), &grid, &auto)?;
        let (peak, mass) = h
            .mass()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .expect("nonempty");
        println!(
            "{name:>5}: sum {:.12}, peak {:.4} at node {:.3}",
            h.mass().iter().sum::<f64>(),
            mass,
            grid.nodes()[peak]
        );
    }

    // A single pixel spreads over more bins as delta falls.
    println!("\nmass of one pixel at 0.5 on the nearest bins:");
    for delta in [auto.delta() * 4.0, auto.delta(), auto.delta() / 16.0] {
        let h = soft_hist(&[0.5], &grid, &KernelConfig::new(delta)?)?;
        let mid = &h.mass()[29..35];
        let row: Vec<String> = mid.iter().map(|m| format!("{m:.3}")).collect();
        println!("  delta {delta:>8.0}: {}", row.join(" "));
    }
    Ok(())
}
