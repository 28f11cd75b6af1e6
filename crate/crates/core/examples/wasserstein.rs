//! Three routes to the 1D Wasserstein distance between two histograms: the
//! CDF identity, quantile sampling, and an exact transport plan.

use calflow::transport::{ot_oracle, w1_cdf, wp_quantile};
use calflow::{HistogramGrid, SoftHistogram};

fn bump(grid: &HistogramGrid, center: f64, width: f64) -> calflow::Result<SoftHistogram> {
    let mass = grid
        .nodes()
        .iter()
        .map(|t| (-((t - center) / width).powi(2)).exp())
        .collect();
    SoftHistogram::from_mass(grid.clone(), mass)?.normalize()
}

fn main() -> calflow::Result<()> {
    let grid = HistogramGrid::unit_64();
    let a = bump(&grid, 0.3, 0.08)?;
    for shift in [0.0, 0.05, 0.2, 0.4] {
        let b = bump(&grid, 0.3 + shift, 0.08)?;
        let cdf = w1_cdf(&a, &b)?.distance;
        let quantile = wp_quantile(&a, &b, 1.0, 10_000)?;
        let exact = ot_oracle(&a, &b, 1.0)?;
        let w2 = ot_oracle(&a, &b, 2.0)?;
        println!("shift {shift:.2}: W1 cdf {cdf:.6}  quantile {quantile:.6}  transport {exact:.6}  |  W2 {w2:.6}");
    }

    // The gradient with respect to the first histogram's masses.
    let b = bump(&grid, 0.5, 0.08)?;
    let r = w1_cdf(&a, &b)?;
    println!("\nd W1 / d mass_a, every 8th bin:");
    for (i, g) in r.grad_first.iter().enumerate().step_by(8) {
        println!("  bin {i:>2} (t = {:.3}): {g:+.5}", grid.nodes()[i]);
    }
    Ok(())
}
