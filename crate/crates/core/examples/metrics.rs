//! PSNR and SSIM between a reference and progressively degraded copies.

use calflow::dataset::synthetic_scene;
use calflow::metrics::MetricReport;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> calflow::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let reference = synthetic_scene(64, 64, &mut rng);
    println!("identical: {}", MetricReport::compute(&reference, &reference)?.to_json());

    let offset = reference.map(|v| (v + 0.1).min(1.0));
    println!("+0.1 offset: {}", MetricReport::compute(&offset, &reference)?.to_json());

    for amp in [0.01, 0.05, 0.1] {
        let mut noisy = reference.clone();
        for v in noisy.data_mut() {
            *v += rng.random_range(-amp..amp);
        }
        let r = MetricReport::compute(&noisy, &reference)?;
        println!("uniform noise +-{amp}: psnr {:.2} dB, ssim {:.4}", r.psnr.value().unwrap_or(f64::INFINITY), r.ssim);
    }

    let inverted = reference.map(|v| 1.0 - v);
    println!("inverted: {}", MetricReport::compute(&inverted, &reference)?.to_json());
    Ok(())
}
