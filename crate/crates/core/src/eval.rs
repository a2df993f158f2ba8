//! Two-sample metrics, mode coverage, finite-difference gradient checks, and
//! SVG scatter plots.

use std::fmt::Write as _;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Mlp, Tape, TensorBuf};
use crate::diffusion::{
    score_at_bin, standard_normal, Denoiser, DenoiserSpec, MeanPredictor, Role,
};
use crate::dmd::{
    dm_gradient_with, regression_loss, surrogate_value, Distance, Generator, Weighting,
};
use crate::error::{invalid, Error, Result};
use crate::schedule::{NoiseLevel, NoiseSchedule, PredictionType, ScheduleKind};
use crate::toyworld::GaussianMixture;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Bandwidth {
    Fixed(f64),
    /// Median pairwise distance of the pooled samples.
    Median,
}

const MEDIAN_SUBSAMPLE: usize = 512;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn strided(x: &TensorBuf, max: usize) -> Vec<&[f64]> {
    let n = x.rows();
    let step = n.div_ceil(max).max(1);
    (0..n).step_by(step).map(|i| x.row(i)).collect()
}

/// Median heuristic bandwidth over at most 512 strided rows from each set.
pub fn median_bandwidth(x: &TensorBuf, y: &TensorBuf) -> f64 {
    let mut pool = strided(x, MEDIAN_SUBSAMPLE);
    pool.extend(strided(y, MEDIAN_SUBSAMPLE));
    let mut d = Vec::with_capacity(pool.len() * pool.len() / 2);
    for i in 0..pool.len() {
        for j in i + 1..pool.len() {
            d.push(sq_dist(pool[i], pool[j]).sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let m = d[d.len() / 2];
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

fn check_pair(x: &TensorBuf, y: &TensorBuf, context: &str) -> Result<()> {
    if x.rows() == 0 || y.rows() == 0 || x.is_empty() || y.is_empty() {
        return Err(Error::EmptyBatch("two-sample metric"));
    }
    if x.cols() != y.cols() {
        return Err(Error::ShapeMismatch {
            context: context.to_string(),
            expected: vec![x.cols()],
            got: vec![y.cols()],
        });
    }
    Ok(())
}

const BLOCK: usize = 64;

/// Mean RBF kernel value between all row pairs, accumulated block by block.
fn mean_kernel(a: &TensorBuf, b: &TensorBuf, gamma: f64) -> f64 {
    let mut total = 0.0;
    for ib in (0..a.rows()).step_by(BLOCK) {
        for jb in (0..b.rows()).step_by(BLOCK) {
            let mut block = 0.0;
            for i in ib..(ib + BLOCK).min(a.rows()) {
                let ra = a.row(i);
                for j in jb..(jb + BLOCK).min(b.rows()) {
                    block += (-gamma * sq_dist(ra, b.row(j))).exp();
                }
            }
            total += block;
        }
    }
    total / (a.rows() * b.rows()) as f64
}

/// Biased RBF-kernel MMD, `sqrt(E k(x,x') + E k(y,y') - 2 E k(x,y))`.
pub fn mmd_rbf(x: &TensorBuf, y: &TensorBuf, bandwidth: Bandwidth) -> Result<f64> {
    check_pair(x, y, "mmd_rbf")?;
    let h = match bandwidth {
        Bandwidth::Fixed(h) if h > 0.0 && h.is_finite() => h,
        Bandwidth::Fixed(h) => {
            return Err(invalid("bandwidth", format!("must be positive, got {h}")))
        }
        Bandwidth::Median => median_bandwidth(x, y),
    };
    let gamma = 1.0 / (2.0 * h * h);
    let m2 = mean_kernel(x, x, gamma) + mean_kernel(y, y, gamma) - 2.0 * mean_kernel(x, y, gamma);
    Ok(m2.max(0.0).sqrt())
}

/// `n` unit directions, grouped into random orthonormal frames of size `dim`.
pub fn projection_directions<R: Rng + ?Sized>(dim: usize, n: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(n);
    while dirs.len() < n {
        let frame_start = dirs.len();
        while dirs.len() - frame_start < dim && dirs.len() < n {
            let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            for u in &dirs[frame_start..] {
                let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm > 1e-8 {
                dirs.push(v.into_iter().map(|a| a / norm).collect());
            }
        }
    }
    dirs
}

/// Squared 1-D W2 between sorted samples, via quantile matching on the larger grid.
fn w2_sq_sorted(a: &[f64], b: &[f64]) -> f64 {
    let m = a.len().max(b.len());
    let q = |s: &[f64], k: usize| s[((k as f64 + 0.5) / m as f64 * s.len() as f64) as usize];
    (0..m).map(|k| (q(a, k) - q(b, k)).powi(2)).sum::<f64>() / m as f64
}

/// Sliced W2, normalized as `sqrt(dim * mean_u W2(u)^2)` so that two equal
/// isotropic Gaussians give the distance between their means.
pub fn sliced_wasserstein<R: Rng + ?Sized>(
    x: &TensorBuf,
    y: &TensorBuf,
    n_projections: usize,
    rng: &mut R,
) -> Result<f64> {
    check_pair(x, y, "sliced_wasserstein")?;
    if n_projections == 0 {
        return Err(invalid("n_projections", "need at least one"));
    }
    let d = x.cols();
    let dirs = projection_directions(d, n_projections, rng);
    let project = |t: &TensorBuf, u: &[f64]| {
        let mut p: Vec<f64> = t
            .iter_rows()
            .map(|r| r.iter().zip(u).map(|(a, b)| a * b).sum())
            .collect();
        p.sort_by(f64::total_cmp);
        p
    };
    let mean_sq = dirs
        .iter()
        .map(|u| w2_sq_sorted(&project(x, u), &project(y, u)))
        .sum::<f64>()
        / dirs.len() as f64;
    Ok((d as f64 * mean_sq).sqrt())
}

/// Mass assigned to each mixture component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeRecall {
    pub recall: f64,
    pub shares: Vec<f64>,
}

/// Assigns each sample to its nearest component when within
/// `radius_in_stds` of that component's std; a mode is recovered when its
/// share of all samples is at least `min_share`.
pub fn mode_recall(
    x: &TensorBuf,
    mix: &GaussianMixture,
    radius_in_stds: f64,
    min_share: f64,
) -> Result<ModeRecall> {
    if !(radius_in_stds > 0.0) {
        return Err(invalid("radius_in_stds", "must be positive"));
    }
    if x.cols() != mix.dim() {
        return Err(Error::ShapeMismatch {
            context: "mode_recall".into(),
            expected: vec![mix.dim()],
            got: vec![x.cols()],
        });
    }
    let counts = assign_modes(x, mix, radius_in_stds);
    let n = x.rows().max(1) as f64;
    let shares: Vec<f64> = counts.iter().map(|&c| c as f64 / n).collect();
    let recovered = shares.iter().filter(|&&s| s >= min_share).count();
    Ok(ModeRecall {
        recall: recovered as f64 / mix.len() as f64,
        shares,
    })
}

fn assign_modes(x: &TensorBuf, mix: &GaussianMixture, radius_in_stds: f64) -> Vec<usize> {
    let mut counts = vec![0usize; mix.len()];
    for row in x.iter_rows() {
        let (k, dist) = mix.nearest_component(row);
        if dist <= radius_in_stds * mix.components()[k].std {
            counts[k] += 1;
        }
    }
    counts
}

/// Per-class coverage for class-conditional samples.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassRecall {
    /// Fraction of classes whose own mode holds at least `min_share` of that class's samples.
    pub recall: f64,
    /// Largest fraction of one class's samples assigned to another class's mode.
    pub leakage: f64,
}

pub fn class_recall(
    x: &TensorBuf,
    labels: &[usize],
    mix: &GaussianMixture,
    radius_in_stds: f64,
    min_share: f64,
) -> Result<ClassRecall> {
    if labels.len() != x.rows() {
        return Err(Error::MissingLabel);
    }
    let k = mix.len();
    let mut recovered = 0;
    let mut leakage: f64 = 0.0;
    for c in 0..k {
        let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if idx.is_empty() {
            continue;
        }
        let counts = assign_modes(&x.gather_rows(&idx), mix, radius_in_stds);
        let n = idx.len() as f64;
        if counts[c] as f64 / n >= min_share {
            recovered += 1;
        }
        let other: usize = counts
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != c)
            .map(|(_, &v)| v)
            .sum();
        leakage = leakage.max(other as f64 / n);
    }
    Ok(ClassRecall {
        recall: recovered as f64 / k as f64,
        leakage,
    })
}

/// Regular grid with `n` points per axis over the diffused components' means
/// plus or minus three of their stds.
pub fn diffused_grid(mix: &GaussianMixture, level: &NoiseLevel, n: usize) -> Result<TensorBuf> {
    let d = mix.dim();
    if n < 2 || d > 3 {
        return Err(invalid(
            "grid",
            format!("need n >= 2 and dim <= 3, got n = {n}, dim = {d}"),
        ));
    }
    let diffused = mix.diffused(level);
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for c in diffused.components() {
        for j in 0..d {
            lo[j] = lo[j].min(c.mean[j] - 3.0 * c.std);
            hi[j] = hi[j].max(c.mean[j] + 3.0 * c.std);
        }
    }
    let total = n.pow(d as u32);
    let mut data = Vec::with_capacity(total * d);
    for idx in 0..total {
        let mut rem = idx;
        for j in 0..d {
            let k = rem % n;
            rem /= n;
            data.push(lo[j] + (hi[j] - lo[j]) * k as f64 / (n - 1) as f64);
        }
    }
    TensorBuf::matrix(total, d, data)
}

/// Density-weighted relative L2 error of a predictor's score against the
/// exact diffused score of `mix` at bin `t`, on [`diffused_grid`].
pub fn score_relative_error<P: MeanPredictor + ?Sized>(
    p: &P,
    mix: &GaussianMixture,
    schedule: &NoiseSchedule,
    bin: usize,
    n: usize,
) -> Result<f64> {
    let level = schedule.level(bin)?;
    let grid = diffused_grid(mix, &level, n)?;
    let exact = mix.score_at(&level, &grid)?;
    let approx = score_at_bin(p, schedule, &grid, bin, None)?;
    let logp = mix.diffused(&level).log_density(&grid)?;
    let (mut num, mut den) = (0.0, 0.0);
    for (i, lp) in logp.iter().enumerate() {
        let w = lp.exp();
        num += w * sq_dist(exact.row(i), approx.row(i));
        den += w * exact.row(i).iter().map(|v| v * v).sum::<f64>();
    }
    Ok((num / den.max(1e-300)).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mmd: f64,
    pub sliced_wasserstein: f64,
    pub mode_recall: f64,
    pub mode_shares: Vec<f64>,
    pub n_samples: usize,
    pub n_reference: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub bandwidth: Bandwidth,
    pub projections: usize,
    pub radius_in_stds: f64,
    pub min_share: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            bandwidth: Bandwidth::Median,
            projections: 128,
            radius_in_stds: 3.0,
            min_share: 0.2,
        }
    }
}

pub fn evaluate(
    samples: &TensorBuf,
    reference: &TensorBuf,
    mix: &GaussianMixture,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<MetricsReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mr = mode_recall(samples, mix, cfg.radius_in_stds, cfg.min_share)?;
    let report = MetricsReport {
        mmd: mmd_rbf(samples, reference, cfg.bandwidth)?,
        sliced_wasserstein: sliced_wasserstein(samples, reference, cfg.projections, &mut rng)?,
        mode_recall: mr.recall,
        mode_shares: mr.shares,
        n_samples: samples.rows(),
        n_reference: reference.rows(),
        seed,
    };
    if !(report.mmd.is_finite() && report.sliced_wasserstein.is_finite()) {
        return Err(Error::NonFinite {
            context: "metrics report".into(),
            index: None,
        });
    }
    Ok(report)
}

impl MetricsReport {
    pub const CSV_HEADER: [&'static str; 7] = [
        "mmd",
        "sliced_wasserstein",
        "mode_recall",
        "mode_shares",
        "n_samples",
        "n_reference",
        "seed",
    ];

    pub fn csv_record(&self) -> Vec<String> {
        vec![
            self.mmd.to_string(),
            self.sliced_wasserstein.to_string(),
            self.mode_recall.to_string(),
            self.mode_shares
                .iter()
                .map(|s| s.to_string())
                .collect::<Vec<_>>()
                .join(";"),
            self.n_samples.to_string(),
            self.n_reference.to_string(),
            self.seed.to_string(),
        ]
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(Self::CSV_HEADER)
            .map_err(|e| Error::Io(e.to_string()))?;
        out.write_record(self.csv_record())
            .map_err(|e| Error::Io(e.to_string()))?;
        out.flush()?;
        Ok(())
    }
}

type ValueFn = Box<dyn Fn(&[f64]) -> Result<f64>>;
type GradFn = Box<dyn Fn(&[f64]) -> Result<Vec<f64>>>;

/// A scalar function with a claimed analytic gradient, checked at `point`.
pub struct GradCheck {
    pub name: String,
    pub point: Vec<f64>,
    pub value: ValueFn,
    pub grad: GradFn,
}

impl GradCheck {
    pub fn new(
        name: impl Into<String>,
        point: Vec<f64>,
        value: impl Fn(&[f64]) -> Result<f64> + 'static,
        grad: impl Fn(&[f64]) -> Result<Vec<f64>> + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            point,
            value: Box::new(value),
            grad: Box::new(grad),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub params: usize,
    /// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-12)` over the whole gradient.
    pub rel_error: f64,
    pub passed: bool,
}

pub const FD_STEP: f64 = 1e-5;
pub const REPORT_TOLERANCE: f64 = 1e-3;

/// Central-difference gradient of `f` at `x`.
pub fn numeric_gradient(f: &dyn Fn(&[f64]) -> Result<f64>, x: &[f64], h: f64) -> Result<Vec<f64>> {
    let mut p = x.to_vec();
    let mut g = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = p[i];
        p[i] = orig + h;
        let up = f(&p)?;
        p[i] = orig - h;
        let down = f(&p)?;
        p[i] = orig;
        g.push((up - down) / (2.0 * h));
    }
    Ok(g)
}

pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

pub fn run_check(check: &GradCheck, tolerance: f64) -> Result<CheckResult> {
    let analytic = (check.grad)(&check.point)?;
    if analytic.len() != check.point.len() {
        return Err(Error::ShapeMismatch {
            context: format!("gradient of {}", check.name),
            expected: vec![check.point.len()],
            got: vec![analytic.len()],
        });
    }
    let numeric = numeric_gradient(&*check.value, &check.point, FD_STEP)?;
    let rel_error = relative_error(&analytic, &numeric);
    Ok(CheckResult {
        name: check.name.clone(),
        params: check.point.len(),
        rel_error,
        passed: rel_error <= tolerance,
    })
}

pub fn grad_check_report(checks: &[GradCheck], tolerance: f64) -> Result<Vec<CheckResult>> {
    checks.iter().map(|c| run_check(c, tolerance)).collect()
}

pub fn write_check_csv<W: Write>(results: &[CheckResult], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in results {
        out.serialize(r).map_err(|e| Error::Io(e.to_string()))?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug)]
enum BinaryOp {
    MatMul,
    AddBias,
    Add,
    Sub,
    Mul,
    Mse,
}

#[derive(Clone, Copy, Debug)]
enum UnaryOp {
    Scale,
    Tanh,
    Silu,
    Square,
}

fn rand_buf(shape: &[usize], rng: &mut ChaCha8Rng) -> TensorBuf {
    standard_normal(shape, rng)
}

/// Scalar `sum(op(a, b) * r)` with both operands taken from the flat point.
fn binary_check(op: BinaryOp, rng: &mut ChaCha8Rng) -> GradCheck {
    let (sa, sb): (Vec<usize>, Vec<usize>) = match op {
        BinaryOp::MatMul => (vec![3, 4], vec![4, 2]),
        BinaryOp::AddBias => (vec![3, 4], vec![4]),
        _ => (vec![3, 4], vec![3, 4]),
    };
    let na: usize = sa.iter().product();
    let nb: usize = sb.iter().product();
    let out_shape = match op {
        BinaryOp::MatMul => vec![3, 2],
        BinaryOp::Mse => vec![1],
        _ => vec![3, 4],
    };
    let r = rand_buf(&out_shape, rng);
    let point: Vec<f64> = rand_buf(&[na + nb], rng).into_data();
    let build = move |p: &[f64]| -> Result<(Tape, crate::autodiff::NodeId)> {
        let mut t = Tape::new();
        let a = t.param(0, TensorBuf::new(sa.clone(), p[..na].to_vec())?);
        let b = t.param(na, TensorBuf::new(sb.clone(), p[na..].to_vec())?);
        let y = match op {
            BinaryOp::MatMul => t.matmul(a, b)?,
            BinaryOp::AddBias => t.add_bias(a, b)?,
            BinaryOp::Add => t.add(a, b)?,
            BinaryOp::Sub => t.sub(a, b)?,
            BinaryOp::Mul => t.mul(a, b)?,
            BinaryOp::Mse => t.mse(a, b)?,
        };
        let rl = t.leaf(r.clone());
        let m = t.mul(y, rl)?;
        let s = t.sum(m)?;
        Ok((t, s))
    };
    let build2 = build.clone();
    let n = na + nb;
    GradCheck::new(
        format!("tape_{}", format!("{op:?}").to_lowercase()),
        point,
        move |p| {
            let (t, s) = build(p)?;
            Ok(t.value(s).data()[0])
        },
        move |p| {
            let (mut t, s) = build2(p)?;
            Ok(t.backward(&[(s, &TensorBuf::scalar(1.0))], n)?
                .into_params())
        },
    )
}

fn unary_check(op: UnaryOp, rng: &mut ChaCha8Rng) -> GradCheck {
    let r = rand_buf(&[2, 5], rng);
    let point = rand_buf(&[10], rng).into_data();
    let build = move |p: &[f64]| -> Result<(Tape, crate::autodiff::NodeId)> {
        let mut t = Tape::new();
        let a = t.param(0, TensorBuf::matrix(2, 5, p.to_vec())?);
        let y = match op {
            UnaryOp::Scale => t.scale(a, -1.7)?,
            UnaryOp::Tanh => t.activation(a, Activation::Tanh)?,
            UnaryOp::Silu => t.activation(a, Activation::Silu)?,
            UnaryOp::Square => t.square(a)?,
        };
        let rl = t.leaf(r.clone());
        let m = t.mul(y, rl)?;
        let s = t.sum(m)?;
        Ok((t, s))
    };
    let build2 = build.clone();
    GradCheck::new(
        format!("tape_{}", format!("{op:?}").to_lowercase()),
        point,
        move |p| {
            let (t, s) = build(p)?;
            Ok(t.value(s).data()[0])
        },
        move |p| {
            let (mut t, s) = build2(p)?;
            Ok(t.backward(&[(s, &TensorBuf::scalar(1.0))], 10)?
                .into_params())
        },
    )
}

/// A tanh check whose backward uses `1 - x^2` in place of `1 - tanh(x)^2`.
/// Exists to show that the report flags a wrong rule.
pub fn corrupted_tanh_check(seed: u64) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = rand_buf(&[6], &mut rng).into_data();
    let point = rand_buf(&[6], &mut rng).into_data();
    let r2 = r.clone();
    GradCheck::new(
        "corrupted_tanh",
        point,
        move |p| Ok(p.iter().zip(&r).map(|(x, w)| w * x.tanh()).sum()),
        move |p| Ok(p.iter().zip(&r2).map(|(x, w)| w * (1.0 - x * x)).collect()),
    )
}

fn mlp_check(act: Activation, rng: &mut ChaCha8Rng) -> Result<GradCheck> {
    let net = Mlp::init(vec![3, 6, 5, 2], act, rng)?;
    let x = rand_buf(&[4, 3], rng);
    let r = rand_buf(&[4, 2], rng);
    let widths = net.widths().to_vec();
    let (w2, x2, r2) = (widths.clone(), x.clone(), r.clone());
    Ok(GradCheck::new(
        format!("mlp_{}", format!("{act:?}").to_lowercase()),
        net.params().to_vec(),
        move |p| {
            let net = Mlp::from_params(widths.clone(), act, p.to_vec())?;
            let y = net.forward(&x)?;
            Ok(y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum())
        },
        move |p| {
            let net = Mlp::from_params(w2.clone(), act, p.to_vec())?;
            let mut t = Tape::new();
            crate::autodiff::mlp_forward(&net, &x2, &mut t)?;
            crate::autodiff::backprop(&mut t, &r2, net.num_params())
        },
    ))
}

fn small_denoiser(
    kind: ScheduleKind,
    prediction: PredictionType,
    classes: Option<usize>,
    rng: &mut ChaCha8Rng,
) -> Result<Denoiser> {
    let schedule = NoiseSchedule::new(kind, 1000, 0.002, 80.0)?;
    let spec = DenoiserSpec {
        dim: 2,
        hidden: vec![8, 8],
        activation: Activation::Silu,
        prediction,
        classes,
        sigma_data: 0.5,
    };
    Denoiser::new(spec, schedule, Role::Fake, rng)
}

fn denoising_check(
    kind: ScheduleKind,
    prediction: PredictionType,
    classes: Option<usize>,
    rng: &mut ChaCha8Rng,
) -> Result<GradCheck> {
    let d = small_denoiser(kind, prediction, classes, rng)?;
    let x0 = rand_buf(&[6, 2], rng);
    let eps = rand_buf(&[6, 2], rng);
    // Spread the bins over the whole schedule, including both ends.
    let bins = vec![0, 150, 400, 650, 900, 999];
    let labels: Option<Vec<usize>> = classes.map(|k| (0..6).map(|i| i % (k + 1)).collect());
    let point = d.net().params().to_vec();
    let (d2, x2, e2, b2, l2) = (
        d.clone(),
        x0.clone(),
        eps.clone(),
        bins.clone(),
        labels.clone(),
    );
    let with = move |d: &Denoiser, p: &[f64]| -> Result<Denoiser> {
        let net = Mlp::from_params(d.net().widths().to_vec(), d.net().activation(), p.to_vec())?;
        Denoiser::from_parts(d.spec().clone(), d.schedule().clone(), Role::Fake, net)
    };
    let with2 = with;
    let name = format!(
        "denoising_loss_{}_{}{}",
        format!("{kind:?}").to_lowercase(),
        format!("{prediction:?}").to_lowercase(),
        if classes.is_some() {
            "_conditional"
        } else {
            ""
        }
    );
    Ok(GradCheck::new(
        name,
        point,
        move |p| {
            Ok(with(&d, p)?
                .denoising_loss_with(&x0, labels.as_deref(), &bins, &eps)?
                .0)
        },
        move |p| {
            Ok(with2(&d2, p)?
                .denoising_loss_with(&x2, l2.as_deref(), &b2, &e2)?
                .1)
        },
    ))
}

fn small_generator(rng: &mut ChaCha8Rng) -> Result<Generator> {
    let net = Mlp::init(vec![2, 8, 8, 2], Activation::Silu, rng)?;
    Generator::from_parts(
        2,
        None,
        crate::dmd::GenScales {
            input: 0.9,
            skip: 0.3,
            out: 1.2,
        },
        net,
    )
}

fn with_params(g: &Generator, p: &[f64]) -> Result<Generator> {
    let net = Mlp::from_params(g.net().widths().to_vec(), g.net().activation(), p.to_vec())?;
    Generator::from_parts(g.dim(), g.classes(), g.scales(), net)
}

fn regression_check(distance: Distance, rng: &mut ChaCha8Rng) -> Result<GradCheck> {
    let g = small_generator(rng)?;
    let z = rand_buf(&[5, 2], rng);
    let y = rand_buf(&[5, 2], rng);
    let name = match distance {
        Distance::SquaredL2 => "regression_loss_squared_l2",
        Distance::RandomFeature { .. } => "regression_loss_random_feature",
    };
    let (g2, z2, y2) = (g.clone(), z.clone(), y.clone());
    Ok(GradCheck::new(
        name,
        g.params().to_vec(),
        move |p| Ok(regression_loss(&with_params(&g, p)?, &z, &y, None, &distance, 0.25)?.0),
        move |p| Ok(regression_loss(&with_params(&g2, p)?, &z2, &y2, None, &distance, 0.25)?.1),
    ))
}

/// Surrogate check: the stop-gradient target is frozen at the check point and
/// the surrogate's finite differences are compared to the backpropagated direction.
fn surrogate_check(weighting: Weighting, rng: &mut ChaCha8Rng) -> Result<GradCheck> {
    let g = small_generator(rng)?;
    let real = crate::toyworld::two_mode_mixture();
    let fake = GaussianMixture::gaussian(vec![0.5, -0.3], 1.5)?;
    let schedule = NoiseSchedule::new(ScheduleKind::Vp, 1000, 0.002, 80.0)?;
    let z = rand_buf(&[6, 2], rng);
    let eps = rand_buf(&[6, 2], rng);
    let bins: Vec<usize> = (0..6).map(|_| schedule.sample_timestep(rng)).collect();
    let out = dm_gradient_with(
        &g, &real, &fake, &schedule, &z, None, &bins, &eps, weighting,
    )?;
    let target = out
        .x
        .zip_map(&out.direction, "surrogate target", |x, d| x - d)?;
    let grads = out.grads;
    let name = match weighting {
        Weighting::ResidualNormalized => "dm_surrogate_residual_normalized",
        Weighting::ScoreScaled => "dm_surrogate_score_scaled",
    };
    let point = g.params().to_vec();
    Ok(GradCheck::new(
        name,
        point.clone(),
        move |p| surrogate_value(&with_params(&g, p)?, &z, None, &target),
        move |p| {
            if p != point.as_slice() {
                return Err(invalid(
                    "point",
                    "surrogate gradient is only defined at its check point",
                ));
            }
            Ok(grads.clone())
        },
    ))
}

/// Every backward rule and loss gradient in the crate, with fixed random inputs.
pub fn default_registry(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = Vec::new();
    for op in [
        BinaryOp::MatMul,
        BinaryOp::AddBias,
        BinaryOp::Add,
        BinaryOp::Sub,
        BinaryOp::Mul,
        BinaryOp::Mse,
    ] {
        checks.push(binary_check(op, &mut rng));
    }
    for op in [
        UnaryOp::Scale,
        UnaryOp::Tanh,
        UnaryOp::Silu,
        UnaryOp::Square,
    ] {
        checks.push(unary_check(op, &mut rng));
    }
    checks.push(mlp_check(Activation::Tanh, &mut rng)?);
    checks.push(mlp_check(Activation::Silu, &mut rng)?);
    for kind in [ScheduleKind::Vp, ScheduleKind::Edm] {
        for pred in [PredictionType::Mean, PredictionType::Epsilon] {
            checks.push(denoising_check(kind, pred, None, &mut rng)?);
        }
    }
    checks.push(denoising_check(
        ScheduleKind::Vp,
        PredictionType::Mean,
        Some(2),
        &mut rng,
    )?);
    checks.push(regression_check(Distance::SquaredL2, &mut rng)?);
    checks.push(regression_check(
        Distance::RandomFeature {
            features: 8,
            seed: 11,
        },
        &mut rng,
    )?);
    checks.push(surrogate_check(Weighting::ResidualNormalized, &mut rng)?);
    checks.push(surrogate_check(Weighting::ScoreScaled, &mut rng)?);
    Ok(checks)
}

/// Axis-aligned plotting window.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlotBounds {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

const PANEL: f64 = 300.0;
const MARGIN: f64 = 20.0;

/// Side-by-side scatter panels of 2-D points in one standalone SVG document.
pub fn scatter_svg(panels: &[(&str, &TensorBuf)], bounds: PlotBounds) -> Result<String> {
    if let Some((name, _)) = panels.iter().find(|(_, p)| p.cols() < 2) {
        return Err(invalid("panels", format!("panel {name} needs 2-D points")));
    }
    let width = panels.len() as f64 * (PANEL + MARGIN) + MARGIN;
    let height = PANEL + 2.0 * MARGIN + 20.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {width} {height}" width="{width}" height="{height}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (k, (name, pts)) in panels.iter().enumerate() {
        let ox = MARGIN + k as f64 * (PANEL + MARGIN);
        let oy = MARGIN + 20.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="14" text-anchor="middle">{}</text>"#,
            ox + PANEL / 2.0,
            MARGIN + 8.0,
            xml_escape(name)
        );
        let _ = writeln!(
            s,
            r#"<rect x="{ox:.1}" y="{oy:.1}" width="{PANEL}" height="{PANEL}" fill="none" stroke="black"/>"#
        );
        let _ = writeln!(s, r##"<g fill="#1f77b4" fill-opacity="0.35">"##);
        for r in pts.iter_rows() {
            let u = (r[0] - bounds.x_min) / (bounds.x_max - bounds.x_min);
            let v = (r[1] - bounds.y_min) / (bounds.y_max - bounds.y_min);
            if !(0.0..=1.0).contains(&u) || !(0.0..=1.0).contains(&v) {
                continue;
            }
            let _ = writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="1.2"/>"#,
                ox + u * PANEL,
                oy + (1.0 - v) * PANEL
            );
        }
        let _ = writeln!(s, "</g>");
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}
