use dmd_core::diffusion::standard_normal;
use dmd_core::schedule::{diffuse_at, eps_to_mean, mean_to_eps};
use dmd_core::{NoiseLevel, NoiseSchedule, PredictionType, ScheduleKind, TensorBuf};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn schedule(kind: ScheduleKind) -> NoiseSchedule {
    NoiseSchedule::new(kind, 1000, 0.002, 80.0).unwrap()
}

fn level(alpha: f64, sigma: f64) -> NoiseLevel {
    NoiseLevel {
        tau: 0.5,
        alpha,
        sigma,
    }
}

#[test]
fn edm_sigma_spans_the_configured_range() {
    let s = schedule(ScheduleKind::Edm);
    assert!((s.sigmas()[0] - 0.002).abs() < 1e-15);
    assert!((s.sigmas()[999] - 80.0).abs() < 1e-12);
    assert!(s.alphas().iter().all(|&a| a == 1.0));
    assert!(s.sigmas().windows(2).all(|w| w[1] > w[0]));
}

#[test]
fn vp_levels_preserve_variance_everywhere() {
    let s = schedule(ScheduleKind::Vp);
    for t in 0..s.bins() {
        let l = s.level(t).unwrap();
        assert!(
            (l.alpha * l.alpha + l.sigma * l.sigma - 1.0).abs() < 1e-12,
            "bin {t}"
        );
    }
    assert!(s.sigmas().windows(2).all(|w| w[1] > w[0]));
}

#[test]
fn default_window_is_twenty_to_nine_eighty() {
    for kind in [ScheduleKind::Vp, ScheduleKind::Edm] {
        let s = schedule(kind);
        assert_eq!((s.t_min(), s.t_max()), (20, 980));
    }
}

#[test]
fn diffuse_worked_example() {
    let x = TensorBuf::from_rows(&[[1.0]]).unwrap();
    let eps = TensorBuf::from_rows(&[[1.0]]).unwrap();
    let y = diffuse_at(&level(0.8, 0.6), &x, &eps).unwrap();
    assert!((y.data()[0] - 1.4).abs() < 1e-15);
}

#[test]
fn diffused_moments_match_the_schedule() {
    let s = schedule(ScheduleKind::Vp);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 200_000;
    let bin = 500;
    let x = TensorBuf::filled(&[n, 1], 2.0);
    let eps = standard_normal(&[n, 1], &mut rng);
    let y = s.diffuse(&x, bin, &eps).unwrap();
    let l = s.level(bin).unwrap();
    let mean = y.sum() / n as f64;
    let var = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    // Five standard errors of the mean and of the variance estimate.
    assert!((mean - 2.0 * l.alpha).abs() < 5.0 * l.sigma / (n as f64).sqrt());
    let var_se = l.sigma * l.sigma * (2.0 / (n - 1) as f64).sqrt();
    assert!((var - l.sigma * l.sigma).abs() < 5.0 * var_se);
}

proptest! {
    #[test]
    fn diffusion_is_linear_in_signal_and_noise(
        bin in 0usize..1000,
        x in proptest::collection::vec(-5.0f64..5.0, 2),
        e1 in proptest::collection::vec(-3.0f64..3.0, 2),
        e2 in proptest::collection::vec(-3.0f64..3.0, 2),
        a in -2.0f64..2.0,
    ) {
        let s = schedule(ScheduleKind::Edm);
        let x = TensorBuf::new(vec![1, 2], x).unwrap();
        let e1 = TensorBuf::new(vec![1, 2], e1).unwrap();
        let e2 = TensorBuf::new(vec![1, 2], e2).unwrap();
        let mix = e1.zip_map(&e2, "mix", |p, q| p + a * q).unwrap();
        let lhs = s.diffuse(&x, bin, &mix).unwrap();
        let d1 = s.diffuse(&x, bin, &e1).unwrap();
        let d2 = s.diffuse(&TensorBuf::zeros(&[1, 2]), bin, &e2).unwrap();
        let rhs = d1.zip_map(&d2, "sum", |p, q| p + a * q).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-9 * (1.0 + s.sigmas()[bin]));
    }

    #[test]
    fn conversion_round_trips(bin in 0usize..1000, x in -4.0f64..4.0, v in -4.0f64..4.0, vp in any::<bool>()) {
        let s = schedule(if vp { ScheduleKind::Vp } else { ScheduleKind::Edm });
        let x_t = TensorBuf::from_rows(&[[x]]).unwrap();
        let value = TensorBuf::from_rows(&[[v]]).unwrap();
        let mean = s.convert_prediction(bin, &x_t, &value, PredictionType::Epsilon).unwrap();
        let back = s.convert_prediction(bin, &x_t, &mean, PredictionType::Mean).unwrap();
        prop_assert!(back.max_abs_diff(&value) <= 1e-12);
    }
}

#[test]
fn conversion_examples() {
    let x_t = TensorBuf::from_rows(&[[1.0]]).unwrap();
    let zero = TensorBuf::from_rows(&[[0.0]]).unwrap();
    let l = level(0.6, 0.8);
    let mu = eps_to_mean(&l, &x_t, &zero).unwrap();
    assert!((mu.data()[0] - 1.0 / 0.6).abs() < 1e-15);
    let half = TensorBuf::from_rows(&[[0.5]]).unwrap();
    let mu = eps_to_mean(&l, &x_t, &half).unwrap();
    assert!((mu.data()[0] - 1.0).abs() < 1e-15);
    let eps = mean_to_eps(&l, &x_t, &mu).unwrap();
    assert!((eps.data()[0] - 0.5).abs() < 1e-15);
}

#[test]
fn sampled_timesteps_stay_in_window() {
    let s = schedule(ScheduleKind::Vp);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let draws: Vec<usize> = (0..20_000).map(|_| s.sample_timestep(&mut rng)).collect();
    assert!(draws.iter().all(|&t| (20..=980).contains(&t)));
    assert!(draws.contains(&20) && draws.contains(&980));
}

#[test]
fn degenerate_window_always_returns_its_bin() {
    let s = schedule(ScheduleKind::Vp).with_bounds(400, 400).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    assert!((0..1000).all(|_| s.sample_timestep(&mut rng) == 400));
}

#[test]
fn sampled_timesteps_are_uniform() {
    let s = schedule(ScheduleKind::Vp);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let k = s.t_max() - s.t_min() + 1;
    let n = 200 * k;
    let mut counts = vec![0usize; k];
    for _ in 0..n {
        counts[s.sample_timestep(&mut rng) - s.t_min()] += 1;
    }
    let expected = n as f64 / k as f64;
    let chi2: f64 = counts
        .iter()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum();
    // Chi-square with k - 1 degrees of freedom: mean k - 1, sd sqrt(2 (k - 1)).
    let dof = (k - 1) as f64;
    assert!(
        chi2 < dof + 5.0 * (2.0 * dof).sqrt(),
        "chi2 {chi2} with {dof} dof"
    );
}
