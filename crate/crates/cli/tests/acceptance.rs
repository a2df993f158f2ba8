//! End-to-end acceptance run: one PASS/FAIL line per criterion, non-zero exit
//! status if any fails.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use dmd_cli::commands::{percentile, FIDELITY_BINS};
use dmd_core::autodiff::TensorBuf;
use dmd_core::diffusion::standard_normal;
use dmd_core::dmd::{dm_gradient, dm_gradient_with};
use dmd_core::eval::{class_recall, default_registry, grad_check_report, score_relative_error};
use dmd_core::sampler::sample_teacher;
use dmd_core::{
    distill_affine_analytic, dmd_train, two_mode_benchmark, generate_pairs, init_generator, mmd_rbf,
    mode_recall, sample_flow, train_teacher, AffineConfig, Bandwidth, Denoiser, DenoiserSpec,
    DmdConfig, GaussianMixture, Generator, NoiseSchedule, PredictionType, ScheduleKind,
    ScheduleSpec, Solver, TeacherConfig, Weighting,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

const GRAD_TOLERANCE: f64 = 1e-4;
const EVAL_N: usize = 4096;
const SEEDS: u64 = 5;
const HEUN_STEPS: usize = 18;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let checks = default_registry(0).map_err(|e| e.to_string())?;
    let results = grad_check_report(&checks, GRAD_TOLERANCE).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let worst = results
        .iter()
        .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
        .expect("non-empty registry");
    let failed: Vec<&str> = results
        .iter()
        .filter(|r| !r.passed)
        .map(|r| r.name.as_str())
        .collect();
    check(
        failed.is_empty() && elapsed <= Duration::from_secs(30),
        format!(
            "{} checks, worst {:.2e} ({}), failed {:?}, {:.1}s",
            results.len(),
            worst.rel_error,
            worst.name,
            failed,
            secs(elapsed)
        ),
    )
}

fn prediction_equivalence() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut r = rng(2);
    for kind in [ScheduleKind::Vp, ScheduleKind::Edm] {
        let s = NoiseSchedule::new(kind, 1000, 0.002, 80.0).map_err(|e| e.to_string())?;
        for bin in 0..s.bins() {
            let scale = s.level(bin).map_err(|e| e.to_string())?.sigma.max(1.0);
            let x_t = standard_normal(&[8, 2], &mut r).map(|v| v * scale);
            let value = standard_normal(&[8, 2], &mut r);
            for from in [PredictionType::Epsilon, PredictionType::Mean] {
                let other = if from == PredictionType::Mean {
                    PredictionType::Epsilon
                } else {
                    PredictionType::Mean
                };
                let there = s
                    .convert_prediction(bin, &x_t, &value, from)
                    .map_err(|e| e.to_string())?;
                let back = s
                    .convert_prediction(bin, &x_t, &there, other)
                    .map_err(|e| e.to_string())?;
                worst = worst.max(back.max_abs_diff(&value));
            }
        }
    }
    check(
        worst <= 1e-12,
        format!("worst round-trip error {worst:.2e} over 1000 bins x 2 schedules"),
    )
}

fn flow_oracles() -> Outcome {
    let vp = NoiseSchedule::new(ScheduleKind::Vp, 1000, 0.002, 80.0).map_err(|e| e.to_string())?;
    let z = standard_normal(&[512, 2], &mut rng(3));
    let unit = GaussianMixture::gaussian(vec![0.0, 0.0], 1.0).map_err(|e| e.to_string())?;
    let x = sample_flow(&unit, &vp, &z, Solver::Heun, 100, None).map_err(|e| e.to_string())?;
    let identity = x.max_abs_diff(&z);
    let c = 2.0;
    let wide = GaussianMixture::gaussian(vec![0.0, 0.0], c).map_err(|e| e.to_string())?;
    let y = sample_flow(&wide, &vp, &z, Solver::Euler, 1000, None).map_err(|e| e.to_string())?;
    let scaled = y.max_abs_diff(&z.map(|v| c * v));
    check(
        identity <= 1e-3 && scaled <= 1e-2,
        format!("identity max error {identity:.2e} (Heun 100), scaled max error {scaled:.2e} (Euler 1000)"),
    )
}

fn teacher_fidelity(teacher: &Denoiser, mix: &GaussianMixture, took: Duration) -> Outcome {
    let mut errs = Vec::new();
    for bin in FIDELITY_BINS {
        errs.push(
            score_relative_error(teacher, mix, teacher.schedule(), bin, 41)
                .map_err(|e| e.to_string())?,
        );
    }
    let ok = errs.iter().all(|&e| e <= 0.05) && took <= Duration::from_secs(120);
    check(
        ok,
        format!(
            "relative L2 at bins {FIDELITY_BINS:?}: {:.4} / {:.4} / {:.4}; training {:.1}s",
            errs[0],
            errs[1],
            errs[2],
            secs(took)
        ),
    )
}

fn zero_fixed_point(teacher: &Denoiser) -> Outcome {
    let fake = teacher.fake_copy();
    let schedule = teacher
        .schedule()
        .clone()
        .with_fractions(0.02, 0.98)
        .map_err(|e| e.to_string())?;
    let mut gen = init_generator(teacher).map_err(|e| e.to_string())?;
    gen.shift_output(&[1.5, -0.5]).map_err(|e| e.to_string())?;
    let mut r = rng(5);
    let mut max_abs: f64 = 0.0;
    for weighting in [Weighting::ResidualNormalized, Weighting::ScoreScaled] {
        for _ in 0..10 {
            let z = standard_normal(&[64, 2], &mut r);
            let out = dm_gradient(&gen, teacher, &fake, &schedule, &z, None, weighting, &mut r)
                .map_err(|e| e.to_string())?;
            max_abs = out.grads.iter().fold(max_abs, |m, g| m.max(g.abs()));
        }
    }
    check(
        max_abs == 0.0,
        format!("max |gradient| {max_abs:e} over 20 batches"),
    )
}

/// The DM gradient for `x = z + b` against `N(0, 1)` under vp, written out by
/// hand: the real posterior mean is `alpha x_t`, the fake one `alpha x_t +
/// sigma^2 b`, so each sample contributes `sigma^2 b / |x - alpha x_t|`.
fn shift_gradient_oracle(b: f64, z: &[f64], eps: &[f64], alpha: f64, sigma: f64) -> f64 {
    let n = z.len() as f64;
    z.iter()
        .zip(eps)
        .map(|(&z, &e)| {
            let x = z + b;
            let x_t = alpha * x + sigma * e;
            sigma * sigma * b / (x - alpha * x_t).abs().max(1e-8)
        })
        .sum::<f64>()
        / n
}

fn affine_convergence() -> Outcome {
    let start = Instant::now();
    let target = GaussianMixture::gaussian(vec![0.0], 1.0).map_err(|e| e.to_string())?;
    let vp = ScheduleSpec::default().build().map_err(|e| e.to_string())?;
    let cfg = AffineConfig::default();
    let path =
        distill_affine_analytic(&target, &vp, (0.5, 1.5), &cfg).map_err(|e| e.to_string())?;
    let (a, b) = *path.last().expect("path includes the start");
    let took = start.elapsed();

    let window = vp
        .clone()
        .with_fractions(0.02, 0.98)
        .map_err(|e| e.to_string())?;
    let shift = 0.5;
    let gen = Generator::affine(1.0, &[shift]).map_err(|e| e.to_string())?;
    let fake = GaussianMixture::affine_pushforward(1.0, vec![shift]).map_err(|e| e.to_string())?;
    let mut r = rng(6);
    let (mut sign_ok, mut worst_rel, mut bins) = (true, 0.0f64, 0);
    for bin in window.t_min()..=window.t_max() {
        let z = standard_normal(&[32, 1], &mut r);
        let eps = standard_normal(&[32, 1], &mut r);
        let out = dm_gradient_with(
            &gen,
            &target,
            &fake,
            &window,
            &z,
            None,
            &[bin; 32],
            &eps,
            Weighting::ResidualNormalized,
        )
        .map_err(|e| e.to_string())?;
        let l = window.level(bin).map_err(|e| e.to_string())?;
        let oracle = shift_gradient_oracle(shift, z.data(), eps.data(), l.alpha, l.sigma);
        let got = out.grads[1];
        sign_ok &= got > 0.0 && oracle > 0.0;
        worst_rel = worst_rel.max((got - oracle).abs() / oracle.abs());
        bins += 1;
    }
    let ok = (a - 1.0).abs() <= 0.05
        && b.abs() <= 0.05
        && took <= Duration::from_secs(60)
        && sign_ok
        && worst_rel <= 1e-6;
    check(
        ok,
        format!(
            "a = {a:.4}, b = {b:.2e} after {} steps in {:.2}s; shift-gradient sign matches on {bins} bins: {sign_ok}, worst relative deviation from oracle {worst_rel:.1e}",
            cfg.iterations,
            secs(took)
        ),
    )
}

struct AblationStats {
    full_recall: Vec<f64>,
    noreg_recall: Vec<f64>,
    mmd: [Vec<f64>; 3],
    floor_p95: f64,
    runtime: Duration,
}

fn run_ablation(teacher: &Denoiser, teacher_time: Duration) -> Result<AblationStats, String> {
    let start = Instant::now();
    let f3 = two_mode_benchmark();
    let mut r = rng(7);
    let pairs = generate_pairs(teacher, 2000, Solver::Heun, HEUN_STEPS, &mut r, None, 1.0)
        .map_err(|e| e.to_string())?;
    let sample = |r: &mut ChaCha8Rng| -> Result<TensorBuf, String> {
        let z = standard_normal(&[EVAL_N, 2], r);
        sample_teacher(teacher, &z, Solver::Heun, HEUN_STEPS, None, 1.0).map_err(|e| e.to_string())
    };
    let reference = sample(&mut r)?;
    let mut floor = Vec::new();
    for _ in 0..20 {
        floor.push(
            mmd_rbf(&sample(&mut r)?, &reference, Bandwidth::Median).map_err(|e| e.to_string())?,
        );
    }
    let mut stats = AblationStats {
        full_recall: Vec::new(),
        noreg_recall: Vec::new(),
        mmd: Default::default(),
        floor_p95: percentile(&floor, 0.95),
        runtime: Duration::ZERO,
    };
    for seed in 0..SEEDS {
        let z = standard_normal(&[EVAL_N, 2], &mut rng(1000 + seed));
        for (k, (name, base)) in f3.runs().into_iter().enumerate() {
            let cfg = DmdConfig {
                seed,
                ..base.clone()
            };
            let pairs = (cfg.lambda_reg > 0.0).then_some(&pairs);
            let run =
                dmd_train(teacher, pairs, &cfg).map_err(|e| format!("{name} seed {seed}: {e}"))?;
            let x = run.generator.forward(&z, None).map_err(|e| e.to_string())?;
            let recall = mode_recall(&x, &f3.mixture, 3.0, 0.2).map_err(|e| e.to_string())?;
            let mmd = mmd_rbf(&x, &reference, Bandwidth::Median).map_err(|e| e.to_string())?;
            println!(
                "    {name:<13} seed {seed}: recall {} shares {:.3?} mmd {mmd:.4}",
                recall.recall, recall.shares
            );
            match k {
                0 => stats.full_recall.push(recall.recall),
                1 => stats.noreg_recall.push(recall.recall),
                _ => {}
            }
            stats.mmd[k].push(mmd);
        }
    }
    stats.runtime = teacher_time + start.elapsed();
    Ok(stats)
}

fn two_mode_split(stats: &AblationStats) -> Outcome {
    let full_ok = stats.full_recall.iter().filter(|&&r| r == 1.0).count();
    let dropped = stats.noreg_recall.iter().filter(|&&r| r < 1.0).count();
    check(
        full_ok >= 4 && dropped >= 3 && stats.runtime <= Duration::from_secs(15 * 60),
        format!(
            "full recovers both modes in {full_ok}/{SEEDS} seeds, w/o regression drops a mode in {dropped}/{SEEDS}; {:.0}s total",
            secs(stats.runtime)
        ),
    )
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

fn mmd_ordering(stats: &AblationStats) -> Outcome {
    let [full, noreg, nodm] = [
        median(&stats.mmd[0]),
        median(&stats.mmd[1]),
        median(&stats.mmd[2]),
    ];
    check(
        full < noreg && full < nodm && full <= 2.0 * stats.floor_p95,
        format!(
            "median MMD full {full:.4} < w/o regression {noreg:.4}, < w/o DM {nodm:.4}; full vs 2x floor {:.4}",
            2.0 * stats.floor_p95
        ),
    )
}

fn cfg_distillation() -> Outcome {
    let mix = two_mode_benchmark().mixture;
    let spec = DenoiserSpec {
        classes: Some(mix.len()),
        ..DenoiserSpec::default()
    };
    let schedule = ScheduleSpec::default().build().map_err(|e| e.to_string())?;
    let (teacher, _) = train_teacher(&mix, spec, schedule, &TeacherConfig::default())
        .map_err(|e| e.to_string())?;
    let omega = 3.0;
    let n_pairs = 2000;
    let labels: Vec<usize> = (0..n_pairs).map(|i| i % mix.len()).collect();
    let pairs = generate_pairs(
        &teacher,
        n_pairs,
        Solver::Heun,
        HEUN_STEPS,
        &mut rng(9),
        Some(labels),
        omega,
    )
    .map_err(|e| e.to_string())?;
    let cfg = DmdConfig {
        omega,
        ..DmdConfig::two_mode()
    };
    let run = dmd_train(&teacher, Some(&pairs), &cfg).map_err(|e| e.to_string())?;
    let labels: Vec<usize> = (0..EVAL_N).map(|i| i % mix.len()).collect();
    let z = standard_normal(&[EVAL_N, 2], &mut rng(10));
    let x = run
        .generator
        .forward(&z, Some(&labels))
        .map_err(|e| e.to_string())?;
    let c = class_recall(&x, &labels, &mix, 3.0, 0.2).map_err(|e| e.to_string())?;
    check(
        c.recall == 1.0 && c.leakage < 0.05,
        format!(
            "class recall {}, worst cross-class leakage {:.4} at guidance {omega}",
            c.recall, c.leakage
        ),
    )
}

const SCRIPT_CONFIG: &str = r#"
seed = 3

[[target]]
weight = 0.5
mean = [-4.0, 0.0]
std = 0.5

[[target]]
weight = 0.5
mean = [4.0, 0.0]
std = 0.5

[teacher]
steps = 300

[pairs]
count = 256

[distill]
iterations = 100

[sample]
n = 512

[eval]
n_reference = 512
floor_resamples = 5
"#;

const SCRIPT_OUTPUTS: [&str; 9] = [
    "teacher.ckpt",
    "teacher_loss.csv",
    "pairs.bin",
    "generator.ckpt",
    "fake.ckpt",
    "distill_log.csv",
    "metrics.csv",
    "noise_floor.csv",
    "config.toml",
];

fn scripted_run(config: &Path, out: &Path) -> Result<(), String> {
    for verb in ["train-teacher", "gen-pairs", "distill", "eval"] {
        let status = Command::new(env!("CARGO_BIN_EXE_dmd"))
            .arg(verb)
            .arg("--config")
            .arg(config)
            .arg("--out")
            .arg(out)
            .env("DMD_LOG_LEVEL", "error")
            .output()
            .map_err(|e| e.to_string())?;
        if !status.status.success() {
            return Err(format!(
                "{verb} failed: {}",
                String::from_utf8_lossy(&status.stderr)
            ));
        }
    }
    Ok(())
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = dir.path().join("run.toml");
    std::fs::write(&config, SCRIPT_CONFIG).map_err(|e| e.to_string())?;
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    scripted_run(&config, &a)?;
    scripted_run(&config, &b)?;
    let mut differing = Vec::new();
    for name in SCRIPT_OUTPUTS {
        let x = std::fs::read(a.join(name)).map_err(|e| format!("{name}: {e}"))?;
        let y = std::fs::read(b.join(name)).map_err(|e| format!("{name}: {e}"))?;
        if x != y {
            differing.push(name);
        }
    }
    check(
        differing.is_empty(),
        format!(
            "{} artifacts compared byte for byte, differing: {differing:?}",
            SCRIPT_OUTPUTS.len()
        ),
    )
}

fn report(n: usize, name: &str, outcome: Outcome) -> bool {
    let (tag, detail, ok) = match outcome {
        Ok(d) => ("PASS", d, true),
        Err(d) => ("FAIL", d, false),
    };
    println!("criterion {n:>2} {tag}  {name}: {detail}");
    ok
}

fn main() {
    let mut all = true;
    all &= report(1, "gradient suite", gradient_suite());
    all &= report(2, "prediction equivalence", prediction_equivalence());
    all &= report(3, "flow oracles", flow_oracles());

    let f3 = two_mode_benchmark();
    let start = Instant::now();
    let trained = ScheduleSpec::default().build().and_then(|s| {
        train_teacher(
            &f3.mixture,
            DenoiserSpec::default(),
            s,
            &TeacherConfig::default(),
        )
    });
    let teacher_time = start.elapsed();
    let teacher = match trained {
        Ok((t, _)) => Some(t),
        Err(e) => {
            all &= report(4, "teacher fidelity", Err(format!("training failed: {e}")));
            None
        }
    };
    if let Some(t) = &teacher {
        all &= report(
            4,
            "teacher fidelity",
            teacher_fidelity(t, &f3.mixture, teacher_time),
        );
        all &= report(5, "zero fixed point", zero_fixed_point(t));
    } else {
        all &= report(5, "zero fixed point", Err("no teacher".into()));
    }
    all &= report(6, "1-D affine convergence", affine_convergence());
    let stats = match &teacher {
        Some(t) => run_ablation(t, teacher_time),
        None => Err("no teacher".to_string()),
    };
    match stats {
        Ok(stats) => {
            all &= report(7, "two-mode ablation", two_mode_split(&stats));
            all &= report(8, "MMD ordering", mmd_ordering(&stats));
        }
        Err(e) => {
            all &= report(7, "two-mode ablation", Err(e.clone()));
            all &= report(8, "MMD ordering", Err(e));
        }
    }
    all &= report(9, "guided conditional distillation", cfg_distillation());
    all &= report(10, "end-to-end determinism", determinism());
    if !all {
        std::process::exit(1);
    }
}
