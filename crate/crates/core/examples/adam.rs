//! The Adam optimizer on the Rosenbrock function, next to plain SGD.

use calflow::flow::ParamBlock;
use calflow::optim::{adam_step, OptimizerState};

fn rosenbrock(p: &[f64]) -> (f64, Vec<f64>) {
    let (x, y) = (p[0], p[1]);
    let f = (1.0 - x).powi(2) + 100.0 * (y - x * x).powi(2);
    let g = vec![-2.0 * (1.0 - x) - 400.0 * x * (y - x * x), 200.0 * (y - x * x)];
    (f, g)
}

fn main() -> calflow::Result<()> {
    let blocks = [ParamBlock {
        name: "xy".into(),
        offset: 0,
        len: 2,
    }];
    for (name, mut state) in [("adam", OptimizerState::adam(2e-2, 2)), ("sgd", OptimizerState::sgd(1e-3, 2))] {
        let mut p = vec![-1.2, 1.0];
        for step in 0..=5000 {
            let (f, g) = rosenbrock(&p);
            if step % 1000 == 0 {
                println!("{name:>4} step {step:>4}: f {f:.3e} at ({:+.4}, {:+.4})", p[0], p[1]);
            }
            adam_step(&mut p, &g, &mut state, &blocks)?;
        }
    }
    Ok(())
}
