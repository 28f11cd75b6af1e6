//! Central-difference checks of the analytic gradients, on a custom function
//! and on the built-in probes.

use calflow::optim::gradcheck::{run_suite, Module, DEFAULT_EPS};
use calflow::optim::grad_check;

fn main() -> calflow::Result<()> {
    // f(x) = sum sin(x_i) x_{i+1}
    let f = |x: &[f64]| Ok(x.windows(2).map(|w| w[0].sin() * w[1]).sum::<f64>());
    let x: Vec<f64> = (0..6).map(|i| 0.3 + 0.2 * i as f64).collect();
    let mut g = vec![0.0; x.len()];
    for i in 0..x.len() - 1 {
        g[i] += x[i].cos() * x[i + 1];
        g[i + 1] += x[i].sin();
    }
    let good = grad_check(f, &x, &g, DEFAULT_EPS)?;
    println!("correct gradient: max rel error {:.2e}", good.max_rel_error);
    g[2] *= 1.01;
    let bad = grad_check(f, &x, &g, DEFAULT_EPS)?;
    println!("1% error in coordinate 2: max rel error {:.2e} at {:?}", bad.max_rel_error, bad.worst_index);

    let seed = std::env::args().nth(1).map_or(0, |s| s.parse().expect("seed must be an integer"));
    for probe in run_suite(Module::All, seed)? {
        println!(
            "{:<34} {:.2e} over {} coordinates ({} skipped), threshold {:e}: {}",
            probe.name,
            probe.report.max_rel_error,
            probe.report.checked,
            probe.report.skipped,
            probe.tolerance,
            if probe.passed() { "ok" } else { "FAILED" }
        );
    }
    Ok(())
}
