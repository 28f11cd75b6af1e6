use super::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_image(rng: &mut impl Rng, h: usize, w: usize) -> Image {
    Image::from_fn(3, h, w, |_, _, _| rng.random::<f64>())
}

/// A flow with actnorm initialized on random data so every layer is far
/// from the identity.
fn initialized_flow(steps: usize, seed: u64, h: usize, w: usize) -> ConditionalFlow {
    let mut r = rng(seed);
    let mut flow = ConditionalFlow::new(FlowConfig::with_steps(steps), &mut r).unwrap();
    // Larger coupling outputs than the default so the couplings matter.
    for n in 0..steps {
        for v in flow.block_mut(&format!("step{n}.coupling.conv2.weight")).unwrap() {
            *v *= 8.0;
        }
    }
    let batch: Vec<(Image, Image)> = (0..4)
        .map(|_| (random_image(&mut r, h, w), random_image(&mut r, h, w)))
        .collect();
    flow.init_actnorm(&batch).unwrap();
    flow
}

/// `log|det J|` of the numerically assembled Jacobian of `f` at `x`.
fn numerical_log_det(f: impl Fn(&[f64]) -> Vec<f64>, x: &[f64]) -> f64 {
    let n = x.len();
    let eps = 1e-6;
    let mut jac = nalgebra::DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut hi = x.to_vec();
        let mut lo = x.to_vec();
        hi[j] += eps;
        lo[j] -= eps;
        let (fh, fl) = (f(&hi), f(&lo));
        assert_eq!(fh.len(), n);
        for i in 0..n {
            jac[(i, j)] = (fh[i] - fl[i]) / (2.0 * eps);
        }
    }
    jac.lu().determinant().abs().ln()
}

#[test]
fn empty_flow_is_squeeze() {
    let mut r = rng(0);
    let flow = ConditionalFlow::new(FlowConfig::with_steps(0), &mut r).unwrap();
    assert!(flow.is_initialized());
    let y = random_image(&mut r, 4, 6);
    let x = random_image(&mut r, 4, 6);
    let out = flow.forward(&y, &x).unwrap();
    assert_eq!(out.z, squeeze(&y).unwrap());
    assert_eq!(out.log_det, 0.0);
    assert_eq!(flow.inverse(&out.z, &x).unwrap(), y);

    let d = y.len() as f64;
    let zeros = Image::zeros(3, 4, 6);
    let nll0 = flow.nll(&zeros, &x).unwrap();
    assert!((nll0 - d * 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-9);
    let closed = y.data().iter().map(|v| v * v / 2.0).sum::<f64>() + d * 0.5 * (2.0 * std::f64::consts::PI).ln();
    assert!((flow.nll(&y, &x).unwrap() - closed).abs() < 1e-9);

    let restored = flow.enhance(&x, 0.0, &mut r).unwrap();
    assert!(restored.data().iter().all(|&v| v == 0.0));
}

#[test]
fn actnorm_only_log_det() {
    let mut r = rng(1);
    let mut flow = ConditionalFlow::new(FlowConfig::with_steps(1), &mut r).unwrap();
    flow.block_mut("step0.coupling.conv2.weight").unwrap().fill(0.0);
    flow.block_mut("step0.coupling.conv2.bias").unwrap().fill(0.0);
    flow.block_mut("step0.actnorm.log_scale").unwrap().fill(2f64.ln());
    flow.mark_initialized();
    let y = random_image(&mut r, 8, 8);
    let x = random_image(&mut r, 8, 8);
    let out = flow.forward(&y, &x).unwrap();
    let expect = 16.0 * 12.0 * 2f64.ln();
    assert!((out.log_det - expect).abs() < 1e-9, "{} vs {expect}", out.log_det);
    // Coupling is the identity, so z is the reversed, doubled squeeze of y.
    let ys = squeeze(&y).unwrap();
    assert!((out.z.get(11, 2, 3) - 2.0 * ys.get(0, 2, 3)).abs() < 1e-12);
}

#[test]
fn lifecycle_and_shape_errors() {
    let mut r = rng(2);
    let mut flow = ConditionalFlow::new(FlowConfig::with_steps(2), &mut r).unwrap();
    let y = random_image(&mut r, 4, 4);
    assert!(matches!(flow.forward(&y, &y), Err(Error::NotInitialized)));
    assert!(matches!(flow.init_actnorm(&[]), Err(Error::Empty(_))));
    flow.init_actnorm(&[(y.clone(), y.clone())]).unwrap();
    assert!(matches!(flow.init_actnorm(&[(y.clone(), y.clone())]), Err(Error::AlreadyInitialized)));

    let odd = random_image(&mut r, 5, 4);
    assert!(matches!(flow.forward(&odd, &odd), Err(Error::ShapeMismatch(_))));
    let other = random_image(&mut r, 4, 6);
    assert!(flow.forward(&y, &other).is_err());
    let bad_z = Image::zeros(12, 3, 3);
    assert!(flow.inverse(&bad_z, &y).is_err());
}

#[test]
fn actnorm_init_statistics() {
    let mut r = rng(3);
    let mut flow = ConditionalFlow::new(FlowConfig::with_steps(2), &mut r).unwrap();
    let batch: Vec<(Image, Image)> = (0..3)
        .map(|_| {
            let y = random_image(&mut r, 6, 8).map(|v| 0.3 + 0.5 * v);
            (y, random_image(&mut r, 6, 8))
        })
        .collect();
    flow.init_actnorm(&batch).unwrap();

    let cond = flow.condition(&batch[0].1).unwrap();
    let mut per_channel: Vec<Vec<f64>> = vec![Vec::new(); 12];
    for (y, _) in &batch {
        let (a, _) = flow.apply_layer(LayerId::ActNorm(0), &squeeze(y).unwrap(), &cond).unwrap();
        for (c, bucket) in per_channel.iter_mut().enumerate() {
            bucket.extend_from_slice(a.channel(c));
        }
    }
    for bucket in per_channel {
        let n = bucket.len() as f64;
        let mean = bucket.iter().sum::<f64>() / n;
        let std = (bucket.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 1e-6, "mean {mean}");
        assert!((std - 1.0).abs() < 1e-6, "std {std}");
    }
}

#[test]
fn actnorm_init_constant_channel() {
    let mut r = rng(4);
    let mut flow = ConditionalFlow::new(FlowConfig::with_steps(1), &mut r).unwrap();
    let y = Image::filled(3, 4, 4, 0.25);
    flow.init_actnorm(&[(y.clone(), random_image(&mut r, 4, 4))]).unwrap();
    let shift = flow.block("step0.actnorm.shift").unwrap();
    let log_scale = flow.block("step0.actnorm.log_scale").unwrap();
    assert!(shift.iter().all(|&s| (s + 0.25).abs() < 1e-15));
    let floored = -(ACTNORM_STD_FLOOR.ln());
    assert!(log_scale.iter().all(|&l| (l - floored).abs() < 1e-12));
}

#[test]
fn round_trip_for_all_depths() {
    for steps in [0, 1, 2, 4] {
        let flow = initialized_flow(steps, 10 + steps as u64, 8, 8);
        let mut r = rng(100 + steps as u64);
        let mut worst: f64 = 0.0;
        for _ in 0..20 {
            let y = random_image(&mut r, 8, 8);
            let x = random_image(&mut r, 8, 8);
            let z = flow.forward(&y, &x).unwrap().z;
            assert_eq!(z.len(), y.len());
            let back = flow.inverse(&z, &x).unwrap();
            for (a, b) in back.data().iter().zip(y.data()) {
                worst = worst.max((a - b).abs());
            }
        }
        assert!(worst < 1e-10, "N={steps}: {worst}");
    }
}

#[test]
fn condition_changes_the_output() {
    let flow = initialized_flow(2, 20, 4, 4);
    let mut r = rng(21);
    let y = random_image(&mut r, 4, 4);
    let x = random_image(&mut r, 4, 4);
    let z = flow.forward(&y, &x).unwrap().z;
    let other = random_image(&mut r, 4, 4);
    let wrong = flow.inverse(&z, &other).unwrap();
    let diff: f64 = wrong.data().iter().zip(y.data()).map(|(a, b)| (a - b).abs()).sum();
    assert!(diff > 1e-3);
}

#[test]
fn log_det_matches_numerical_jacobian() {
    for steps in [1, 2, 4] {
        let flow = initialized_flow(steps, 30 + steps as u64, 2, 2);
        let mut r = rng(40);
        let y = random_image(&mut r, 2, 2);
        let x = random_image(&mut r, 2, 2);
        let out = flow.forward(&y, &x).unwrap();
        let f = |v: &[f64]| {
            let img = Image::from_vec(3, 2, 2, v.to_vec()).unwrap();
            flow.forward(&img, &x).unwrap().z.into_vec()
        };
        let numeric = numerical_log_det(f, y.data());
        let rel = (numeric - out.log_det).abs() / out.log_det.abs().max(1e-12);
        assert!(rel < 1e-3, "N={steps}: analytic {} numeric {numeric}", out.log_det);
        let sum: f64 = out.layer_log_dets.iter().map(|(_, v)| v).sum();
        assert!((sum - out.log_det).abs() < 1e-12);
    }
}

#[test]
fn each_layer_log_det_matches_numerical_jacobian() {
    let flow = initialized_flow(2, 50, 2, 2);
    let mut r = rng(51);
    let x = random_image(&mut r, 2, 2);
    let cond = flow.condition(&x).unwrap();
    let h = Image::from_fn(12, 1, 1, |_, _, _| r.random_range(-1.0..1.0));
    for n in 0..2 {
        for layer in [LayerId::ActNorm(n), LayerId::Reverse(n), LayerId::Coupling(n)] {
            let (_, analytic) = flow.apply_layer(layer, &h, &cond).unwrap();
            let f = |v: &[f64]| {
                let img = Image::from_vec(12, 1, 1, v.to_vec()).unwrap();
                flow.apply_layer(layer, &img, &cond).unwrap().0.into_vec()
            };
            let numeric = numerical_log_det(f, h.data());
            let err = (numeric - analytic).abs();
            assert!(
                err <= 1e-3 * analytic.abs() || err < 1e-8,
                "{layer:?}: analytic {analytic} numeric {numeric}"
            );
        }
    }
}

/// Two-channel widths and a unit-gain coupling output: every parameter moves
/// the loss by far more than the finite-difference noise floor.
fn tiny_flow(steps: usize, seed: u64) -> ConditionalFlow {
    let mut r = rng(seed);
    let config = FlowConfig {
        steps,
        encoder_width: 2,
        cond_channels: 2,
        coupling_width: 2,
        ..FlowConfig::default()
    };
    let mut flow = ConditionalFlow::new(config, &mut r).unwrap();
    for n in 0..steps {
        for v in flow.block_mut(&format!("step{n}.coupling.conv2.weight")).unwrap() {
            *v *= 10.0;
        }
    }
    let batch: Vec<(Image, Image)> = (0..4)
        .map(|_| (random_image(&mut r, 4, 4), random_image(&mut r, 4, 4)))
        .collect();
    flow.init_actnorm(&batch).unwrap();
    flow
}

fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(1e-12))
        .fold(0.0, f64::max)
}

#[test]
fn nll_parameter_gradient_matches_finite_differences() {
    let mut flow = tiny_flow(1, 60);
    let mut r = rng(61);
    let y = random_image(&mut r, 4, 4);
    let x = random_image(&mut r, 4, 4);
    let (_, analytic) = flow.nll_grad(&y, &x).unwrap();
    let eps = 1e-6;
    let mut numeric = vec![0.0; flow.param_count()];
    for k in 0..flow.param_count() {
        let orig = flow.params()[k];
        flow.params_mut()[k] = orig + eps;
        let hi = flow.nll(&y, &x).unwrap();
        flow.params_mut()[k] = orig - eps;
        let lo = flow.nll(&y, &x).unwrap();
        flow.params_mut()[k] = orig;
        numeric[k] = (hi - lo) / (2.0 * eps);
    }
    let err = max_rel_error(&analytic, &numeric);
    assert!(err < 1e-3, "max relative error {err}");
}

#[test]
fn inverse_path_gradient_matches_finite_differences() {
    let mut flow = tiny_flow(2, 70);
    let mut r = rng(71);
    let x = random_image(&mut r, 4, 4);
    let target = random_image(&mut r, 4, 4);
    // L(y) = sum(w * y) + sum(y^2) / 2 on the zero-temperature output.
    let w: Vec<f64> = (0..48).map(|_| r.random_range(-1.0..1.0)).collect();
    let loss = |y: &Image| -> Result<(f64, Image)> {
        let v = y
            .data()
            .iter()
            .zip(&w)
            .zip(target.data())
            .map(|((a, wi), t)| wi * a + 0.5 * (a - t) * (a - t))
            .sum();
        let mut g = y.clone();
        g.data_mut()
            .iter_mut()
            .zip(&w)
            .zip(target.data())
            .for_each(|((gv, wi), t)| *gv = wi + (*gv - t));
        Ok((v, g))
    };
    let mut analytic = vec![0.0; flow.param_count()];
    let z = Image::zeros(12, 2, 2);
    flow.accumulate_inverse_grad(&z, &x, 1.0, &mut analytic, loss).unwrap();
    let eval = |f: &ConditionalFlow| loss(&f.enhance_mode(&x).unwrap()).unwrap().0;
    let eps = 1e-6;
    let mut numeric = vec![0.0; flow.param_count()];
    for k in 0..flow.param_count() {
        let orig = flow.params()[k];
        flow.params_mut()[k] = orig + eps;
        let hi = eval(&flow);
        flow.params_mut()[k] = orig - eps;
        let lo = eval(&flow);
        flow.params_mut()[k] = orig;
        numeric[k] = (hi - lo) / (2.0 * eps);
    }
    let err = max_rel_error(&analytic, &numeric);
    assert!(err < 1e-3, "max relative error {err}");
}

#[test]
fn joint_gradient_is_the_sum_of_parts() {
    let flow = initialized_flow(2, 80, 4, 4);
    let mut r = rng(81);
    let y = random_image(&mut r, 4, 4);
    let x = random_image(&mut r, 4, 4);
    let loss = |img: &Image| -> Result<(f64, Image)> { Ok((img.data().iter().sum(), img.map(|_| 1.0))) };
    let mut joint = vec![0.0; flow.param_count()];
    let (nll, l) = flow.accumulate_joint_grad(&y, &x, 0.5, &mut joint, loss).unwrap();
    let (nll_alone, mut parts) = flow.nll_grad(&y, &x).unwrap();
    let z = Image::zeros(12, 2, 2);
    let l_alone = flow.accumulate_inverse_grad(&z, &x, 0.5, &mut parts, loss).unwrap();
    assert_eq!(nll, nll_alone);
    assert_eq!(l, l_alone);
    for (a, b) in joint.iter().zip(&parts) {
        assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }
}

#[test]
fn seeded_sampling_is_reproducible() {
    let flow = initialized_flow(2, 90, 4, 4);
    let x = random_image(&mut rng(91), 4, 4);
    let a = flow.enhance(&x, 0.8, &mut rng(5)).unwrap();
    let b = flow.enhance(&x, 0.8, &mut rng(5)).unwrap();
    assert_eq!(a, b);
    assert_eq!(flow.enhance_mode(&x).unwrap(), flow.enhance_mode(&x).unwrap());
    assert_ne!(a, flow.enhance_mode(&x).unwrap());
    assert!(flow.enhance(&x, -1.0, &mut rng(5)).is_err());
}

#[test]
fn squeeze_round_trip_and_layout() {
    let img = Image::from_fn(3, 4, 6, |c, y, x| (c * 100 + y * 10 + x) as f64);
    let s = squeeze(&img).unwrap();
    assert_eq!(s.shape(), (12, 2, 3));
    // channel 4c + 2dy + dx at (i, j) is pixel (2i + dy, 2j + dx)
    assert_eq!(s.get(4 + 2 + 1, 1, 2), img.get(1, 3, 5));
    assert_eq!(unsqueeze(&s).unwrap(), img);
    assert!(squeeze(&Image::zeros(3, 3, 4)).is_err());
}

#[test]
fn checkpoint_round_trip() {
    let flow = initialized_flow(2, 95, 4, 4);
    let text = flow.to_checkpoint_json();
    let back = ConditionalFlow::from_checkpoint_json(&text).unwrap();
    assert_eq!(back.params(), flow.params());
    assert!(back.is_initialized());
    assert_eq!(back.config(), flow.config());

    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["params"].as_array_mut().unwrap().pop();
    assert!(ConditionalFlow::from_checkpoint_json(&v.to_string()).is_err());
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["version"] = serde_json::json!(99);
    assert!(ConditionalFlow::from_checkpoint_json(&v.to_string()).is_err());
}

