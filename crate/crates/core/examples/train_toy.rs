//! Trains the toy conditional flow on synthetic pairs and prints the curve.
//!
//! Usage: `cargo run --release --example train_toy -- [STEPS] [LAMBDA]`

use calflow::dataset::{synthetic_pairs, LowLightModel};
use calflow::flow::{ConditionalFlow, FlowConfig};
use calflow::optim::{train_flow, write_curve_csv, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> calflow::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().map_or(50, |s| s.parse().expect("STEPS must be an integer"));
    let lambda: f64 = args.next().map_or(0.01, |s| s.parse().expect("LAMBDA must be a number"));

    let pairs = synthetic_pairs(8, 64, 64, &LowLightModel::default(), 1)?;
    let mut flow = ConditionalFlow::new(FlowConfig::default(), &mut ChaCha8Rng::seed_from_u64(0))?;
    let cfg = TrainConfig {
        max_steps: steps,
        lambda,
        lr: 1e-3,
        log_every: (steps / 10).max(1),
        ..TrainConfig::default()
    };
    println!("{} parameters, {} steps, lambda {}", flow.param_count(), steps, lambda);
    let t = std::time::Instant::now();
    let curve = train_flow(&pairs, &mut flow, &cfg)?;
    write_curve_csv(&curve, std::io::stdout().lock()).expect("stdout");
    println!("{:.2?} ({:.1} ms/step)", t.elapsed(), t.elapsed().as_secs_f64() * 1e3 / steps.max(1) as f64);
    Ok(())
}
