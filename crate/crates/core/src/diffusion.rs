//! Time-conditioned denoisers, score extraction, the weighted denoising
//! loss, teacher training, and classifier-free guidance.

use std::hash::Hasher;

use fnv::FnvHasher;
use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, AdamW, AdamWConfig, Mlp, Tape, TensorBuf};
use crate::error::{invalid, Error, Result};
use crate::schedule::{NoiseLevel, NoiseSchedule, PredictionType, ScheduleKind};
use crate::toyworld::GaussianMixture;

/// Anything that maps a noisy batch to a clean-sample estimate.
///
/// `levels` holds one entry per row, or a single entry shared by all rows.
pub trait MeanPredictor {
    fn dim(&self) -> usize;

    /// Number of real classes when conditional; the null class is index `classes`.
    fn classes(&self) -> Option<usize> {
        None
    }

    fn predict_mean(
        &self,
        x_t: &TensorBuf,
        levels: &[NoiseLevel],
        labels: Option<&[usize]>,
    ) -> Result<TensorBuf>;
}

impl<P: MeanPredictor + ?Sized> MeanPredictor for &P {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn classes(&self) -> Option<usize> {
        (**self).classes()
    }

    fn predict_mean(
        &self,
        x_t: &TensorBuf,
        levels: &[NoiseLevel],
        labels: Option<&[usize]>,
    ) -> Result<TensorBuf> {
        (**self).predict_mean(x_t, levels, labels)
    }
}

fn level_for(levels: &[NoiseLevel], i: usize) -> &NoiseLevel {
    if levels.len() == 1 {
        &levels[0]
    } else {
        &levels[i]
    }
}

fn check_levels(levels: &[NoiseLevel], rows: usize, context: &str) -> Result<()> {
    if levels.len() != 1 && levels.len() != rows {
        return Err(Error::ShapeMismatch {
            context: context.to_string(),
            expected: vec![rows],
            got: vec![levels.len()],
        });
    }
    Ok(())
}

/// Score `-(x_t - alpha mu) / sigma^2` implied by a mean prediction.
pub fn score_from_mean(
    schedule: &NoiseSchedule,
    levels: &[NoiseLevel],
    x_t: &TensorBuf,
    mu: &TensorBuf,
) -> Result<TensorBuf> {
    mu.expect_shape(x_t.shape(), "score mean prediction")?;
    check_levels(levels, x_t.rows(), "score levels")?;
    let mut out = x_t.clone();
    for i in 0..x_t.rows() {
        let l = level_for(levels, i);
        if l.sigma == 0.0 {
            return Err(Error::DegenerateBin {
                bin: schedule.bin_of(l.tau),
                which: "sigma",
            });
        }
        let v = l.sigma * l.sigma;
        for (o, &m) in out.row_mut(i).iter_mut().zip(mu.row(i)) {
            *o = -(*o - l.alpha * m) / v;
        }
    }
    Ok(out)
}

/// Score of a predictor at bin `t`.
pub fn score_at_bin<P: MeanPredictor + ?Sized>(
    p: &P,
    schedule: &NoiseSchedule,
    x_t: &TensorBuf,
    bin: usize,
    labels: Option<&[usize]>,
) -> Result<TensorBuf> {
    let level = schedule.level(bin)?;
    if level.sigma == 0.0 {
        return Err(Error::DegenerateBin {
            bin,
            which: "sigma",
        });
    }
    let mu = p.predict_mean(x_t, &[level], labels)?;
    score_from_mean(schedule, &[level], x_t, &mu)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Base,
    Fake,
}

/// Architecture and parameterization of a denoiser.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserSpec {
    pub dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub prediction: PredictionType,
    /// Real class count for conditional models.
    #[serde(default)]
    pub classes: Option<usize>,
    /// Data scale used by the input/skip/output preconditioning.
    pub sigma_data: f64,
}

impl Default for DenoiserSpec {
    fn default() -> Self {
        Self {
            dim: 2,
            hidden: vec![64, 64, 64],
            activation: Activation::Silu,
            prediction: PredictionType::Mean,
            classes: None,
            sigma_data: 0.5,
        }
    }
}

/// Number of time features appended after the scaled input.
pub const TIME_FEATURES: usize = 2;

impl DenoiserSpec {
    pub fn input_width(&self) -> usize {
        self.dim + TIME_FEATURES + self.classes.map_or(0, |k| k + 1)
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden.len() + 2);
        w.push(self.input_width());
        w.extend_from_slice(&self.hidden);
        w.push(self.dim);
        w
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(invalid("dim", "must be positive"));
        }
        if self.hidden.contains(&0) {
            return Err(invalid("hidden", "widths must be positive"));
        }
        if self.classes == Some(0) {
            return Err(invalid("classes", "must be positive when set"));
        }
        if !(self.sigma_data > 0.0) {
            return Err(invalid("sigma_data", "must be positive"));
        }
        Ok(())
    }

    /// Affine map from network input/output to a mean prediction at `level`.
    pub fn precond(&self, level: &NoiseLevel) -> Precond {
        let sd2 = self.sigma_data * self.sigma_data;
        let st = level.sigma_tilde();
        let norm = (st * st + sd2).sqrt();
        let input = 1.0 / (norm * level.alpha);
        match self.prediction {
            PredictionType::Mean => Precond {
                input,
                skip: sd2 / (st * st + sd2) / level.alpha,
                out: st * self.sigma_data / norm,
            },
            PredictionType::Epsilon => Precond {
                input,
                skip: 1.0 / level.alpha,
                out: -level.sigma / level.alpha,
            },
        }
    }

    /// Time features for `level`.
    pub fn time_features(level: &NoiseLevel) -> [f64; TIME_FEATURES] {
        [level.tau, 0.25 * level.sigma_tilde().ln()]
    }
}

/// `mu = skip * x_t + out * F(input * x_t, ...)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Precond {
    pub input: f64,
    pub skip: f64,
    pub out: f64,
}

/// A time-conditioned MLP denoiser that always reports mean predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser {
    spec: DenoiserSpec,
    schedule: NoiseSchedule,
    net: Mlp,
    role: Role,
}

impl Denoiser {
    pub fn new<R: Rng + ?Sized>(
        spec: DenoiserSpec,
        schedule: NoiseSchedule,
        role: Role,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        let net = Mlp::init(spec.widths(), spec.activation, rng)?;
        Ok(Self {
            spec,
            schedule,
            net,
            role,
        })
    }

    pub fn from_parts(
        spec: DenoiserSpec,
        schedule: NoiseSchedule,
        role: Role,
        net: Mlp,
    ) -> Result<Self> {
        spec.validate()?;
        if net.widths() != spec.widths().as_slice() || net.activation() != spec.activation {
            return Err(Error::Architecture(format!(
                "network widths {:?} do not match denoiser spec {:?}",
                net.widths(),
                spec.widths()
            )));
        }
        Ok(Self {
            spec,
            schedule,
            net,
            role,
        })
    }

    pub fn spec(&self) -> &DenoiserSpec {
        &self.spec
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn role(&self) -> Role {
        self.role
    }

    /// Mutable parameters; base-role denoisers are frozen.
    pub fn params_mut(&mut self) -> Result<&mut [f64]> {
        match self.role {
            Role::Fake => Ok(self.net.params_mut()),
            Role::Base => Err(invalid("role", "base denoisers are frozen")),
        }
    }

    /// Exact parameter copy with the fake role, the starting point of the fake score.
    pub fn fake_copy(&self) -> Self {
        Self {
            role: Role::Fake,
            ..self.clone()
        }
    }

    /// Same parameters re-tagged as the frozen base model.
    pub fn into_base(self) -> Self {
        Self {
            role: Role::Base,
            ..self
        }
    }

    /// FNV-1a over the little-endian bytes of every parameter.
    pub fn param_hash(&self) -> u64 {
        param_hash(self.net.params())
    }

    /// Network input rows and per-row preconditioning.
    fn features(
        &self,
        x_t: &TensorBuf,
        levels: &[NoiseLevel],
        labels: Option<&[usize]>,
    ) -> Result<(TensorBuf, Vec<Precond>)> {
        let n = x_t.rows();
        let d = self.spec.dim;
        if x_t.shape().len() != 2 || x_t.cols() != d {
            return Err(Error::ShapeMismatch {
                context: "denoiser input".into(),
                expected: vec![n, d],
                got: x_t.shape().to_vec(),
            });
        }
        check_levels(levels, n, "denoiser levels")?;
        let onehot = match (self.spec.classes, labels) {
            (Some(k), Some(l)) => {
                if l.len() != n {
                    return Err(Error::MissingLabel);
                }
                if let Some(&bad) = l.iter().find(|&&c| c > k) {
                    return Err(Error::LabelOutOfRange {
                        label: bad,
                        classes: k,
                    });
                }
                Some((k + 1, l))
            }
            (Some(_), None) => return Err(Error::MissingLabel),
            (None, _) => None,
        };
        let width = self.spec.input_width();
        let mut input = Vec::with_capacity(n * width);
        let mut pre = Vec::with_capacity(n);
        for i in 0..n {
            let l = level_for(levels, i);
            let p = self.spec.precond(l);
            input.extend(x_t.row(i).iter().map(|&x| p.input * x));
            input.extend_from_slice(&DenoiserSpec::time_features(l));
            if let Some((width, labels)) = onehot {
                input.extend((0..width).map(|c| if c == labels[i] { 1.0 } else { 0.0 }));
            }
            pre.push(p);
        }
        Ok((TensorBuf::matrix(n, width, input)?, pre))
    }

    fn combine(x_t: &TensorBuf, raw: &TensorBuf, pre: &[Precond]) -> TensorBuf {
        let mut mu = raw.clone();
        for (i, p) in pre.iter().enumerate() {
            for (m, &x) in mu.row_mut(i).iter_mut().zip(x_t.row(i)) {
                *m = p.skip * x + p.out * *m;
            }
        }
        mu
    }

    /// Mean prediction at bin `t`.
    pub fn denoise(
        &self,
        x_t: &TensorBuf,
        bin: usize,
        labels: Option<&[usize]>,
    ) -> Result<TensorBuf> {
        let level = self.schedule.level(bin)?;
        self.predict_mean(x_t, &[level], labels)
    }

    /// Score at bin `t` implied by the mean prediction.
    pub fn score(
        &self,
        x_t: &TensorBuf,
        bin: usize,
        labels: Option<&[usize]>,
    ) -> Result<TensorBuf> {
        score_at_bin(self, &self.schedule, x_t, bin, labels)
    }

    /// Per-bin weight of the denoising loss.
    pub fn loss_weight(&self, level: &NoiseLevel) -> f64 {
        match self.schedule.kind() {
            ScheduleKind::Vp => level.snr(),
            ScheduleKind::Edm => level.snr() + 1.0 / (0.5 * 0.5),
        }
    }

    /// Weighted denoising loss for explicit bins and noise, with its parameter gradient.
    pub fn denoising_loss_with(
        &self,
        x0: &TensorBuf,
        labels: Option<&[usize]>,
        bins: &[usize],
        eps: &TensorBuf,
    ) -> Result<(f64, Vec<f64>)> {
        let n = x0.rows();
        if n == 0 || x0.is_empty() {
            return Err(Error::EmptyBatch("denoising loss"));
        }
        eps.expect_shape(x0.shape(), "denoising loss noise")?;
        if bins.len() != n {
            return Err(Error::ShapeMismatch {
                context: "denoising loss bins".into(),
                expected: vec![n],
                got: vec![bins.len()],
            });
        }
        let levels = bins
            .iter()
            .map(|&b| self.schedule.level(b))
            .collect::<Result<Vec<_>>>()?;
        let mut x_t = x0.clone();
        for (i, l) in levels.iter().enumerate() {
            for ((x, &c), &e) in x_t.row_mut(i).iter_mut().zip(x0.row(i)).zip(eps.row(i)) {
                *x = l.alpha * c + l.sigma * e;
            }
        }
        let (input, pre) = self.features(&x_t, &levels, labels)?;
        let mut tape = Tape::new();
        let inp = tape.leaf(input);
        let out = self.net.forward_tape(&mut tape, inp, 0)?;
        let raw = tape.value(out).clone();
        let mu = Self::combine(&x_t, &raw, &pre);

        let scale = 1.0 / x0.len() as f64;
        let mut loss = 0.0;
        let mut seed = raw;
        for i in 0..n {
            let w = self.loss_weight(&levels[i]);
            let p = pre[i];
            for ((s, &m), &c) in seed.row_mut(i).iter_mut().zip(mu.row(i)).zip(x0.row(i)) {
                let r = m - c;
                loss += w * r * r;
                *s = 2.0 * scale * w * p.out * r;
            }
        }
        loss *= scale;
        let grads = tape
            .backward(&[(out, &seed)], self.net.num_params())?
            .into_params();
        Ok((loss, grads))
    }

    /// Weighted denoising loss with bins uniform over the schedule and fresh Gaussian noise.
    pub fn denoising_loss<R: Rng + ?Sized>(
        &self,
        x0: &TensorBuf,
        labels: Option<&[usize]>,
        rng: &mut R,
    ) -> Result<(f64, Vec<f64>)> {
        if x0.is_empty() {
            return Err(Error::EmptyBatch("denoising loss"));
        }
        let bins = self.schedule.stratified_bins(x0.rows(), rng);
        let eps = standard_normal(x0.shape(), rng);
        self.denoising_loss_with(x0, labels, &bins, &eps)
    }

    /// One optimizer step of the denoising loss; returns the loss before the update.
    pub fn train_step<R: Rng + ?Sized>(
        &mut self,
        opt: &mut AdamW,
        x0: &TensorBuf,
        labels: Option<&[usize]>,
        rng: &mut R,
    ) -> Result<f64> {
        let (loss, grads) = self.denoising_loss(x0, labels, rng)?;
        opt.step(self.params_mut()?, &grads)?;
        Ok(loss)
    }
}

impl MeanPredictor for Denoiser {
    fn dim(&self) -> usize {
        self.spec.dim
    }

    fn classes(&self) -> Option<usize> {
        self.spec.classes
    }

    fn predict_mean(
        &self,
        x_t: &TensorBuf,
        levels: &[NoiseLevel],
        labels: Option<&[usize]>,
    ) -> Result<TensorBuf> {
        let (input, pre) = self.features(x_t, levels, labels)?;
        let raw = self.net.forward(&input)?;
        Ok(Self::combine(x_t, &raw, &pre))
    }
}

pub fn param_hash(params: &[f64]) -> u64 {
    let mut h = FnvHasher::default();
    for p in params {
        h.write(&p.to_le_bytes());
    }
    h.finish()
}

pub fn standard_normal<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> TensorBuf {
    let mut t = TensorBuf::zeros(shape);
    for v in t.data_mut() {
        *v = rng.sample(StandardNormal);
    }
    t
}

/// Classifier-free guidance over a conditional predictor:
/// `eps = eps_null + omega (eps_cond - eps_null)`, reported as a mean prediction.
#[derive(Clone, Copy, Debug)]
pub struct Guided<P> {
    inner: P,
    omega: f64,
}

impl<P: MeanPredictor> Guided<P> {
    pub fn new(inner: P, omega: f64) -> Result<Self> {
        if !(omega >= 0.0) || !omega.is_finite() {
            return Err(invalid(
                "omega",
                format!("guidance scale must be finite and >= 0, got {omega}"),
            ));
        }
        if inner.classes().is_none() {
            return Err(invalid("omega", "guidance needs a conditional model"));
        }
        Ok(Self { inner, omega })
    }

    pub fn omega(&self) -> f64 {
        self.omega
    }

    pub fn inner(&self) -> &P {
        &self.inner
    }
}

impl<P: MeanPredictor> MeanPredictor for Guided<P> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn classes(&self) -> Option<usize> {
        self.inner.classes()
    }

    fn predict_mean(
        &self,
        x_t: &TensorBuf,
        levels: &[NoiseLevel],
        labels: Option<&[usize]>,
    ) -> Result<TensorBuf> {
        let labels = labels.ok_or(Error::MissingLabel)?;
        let null = vec![self.inner.classes().expect("checked in new"); labels.len()];
        let mu_c = self.inner.predict_mean(x_t, levels, Some(labels))?;
        let mu_u = self.inner.predict_mean(x_t, levels, Some(&null))?;
        check_levels(levels, x_t.rows(), "guided levels")?;
        let mut out = x_t.clone();
        for i in 0..x_t.rows() {
            let l = level_for(levels, i);
            for (j, o) in out.row_mut(i).iter_mut().enumerate() {
                let x = x_t.row(i)[j];
                let e_c = (x - l.alpha * mu_c.row(i)[j]) / l.sigma;
                let e_u = (x - l.alpha * mu_u.row(i)[j]) / l.sigma;
                let e = e_u + self.omega * (e_c - e_u);
                *o = (x - l.sigma * e) / l.alpha;
            }
        }
        Ok(out)
    }
}

/// Teacher optimization settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    pub steps: usize,
    pub batch: usize,
    pub optimizer: AdamWConfig,
    /// Learning rate at the last step as a fraction of the initial rate (cosine decay).
    pub final_lr_frac: f64,
    /// Probability of replacing a label by the null class.
    pub label_dropout: f64,
    pub log_every: usize,
    pub seed: u64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            steps: 40_000,
            batch: 256,
            optimizer: AdamWConfig {
                lr: 3e-3,
                weight_decay: 0.0,
                clip_norm: Some(10.0),
                ..AdamWConfig::default()
            },
            final_lr_frac: 0.0,
            label_dropout: 0.1,
            log_every: 100,
            seed: 0,
        }
    }
}

pub fn cosine_lr(base: f64, final_frac: f64, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return base;
    }
    let progress = step as f64 / (total - 1) as f64;
    let c = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
    base * (final_frac + (1.0 - final_frac) * c)
}

/// Trains a denoiser from scratch on samples of `target` and freezes it.
///
/// Conditional specs learn class `k` as mixture component `k`, with labels
/// dropped to the null class at the configured rate. The log holds
/// `(step, loss)` every `log_every` steps and at the final step.
pub fn train_teacher(
    target: &GaussianMixture,
    spec: DenoiserSpec,
    schedule: NoiseSchedule,
    cfg: &TeacherConfig,
) -> Result<(Denoiser, Vec<(usize, f64)>)> {
    if cfg.batch == 0 || cfg.steps == 0 {
        return Err(invalid("teacher", "steps and batch must be positive"));
    }
    if spec.dim != target.dim() {
        return Err(Error::Architecture(format!(
            "denoiser dim {} does not match target dim {}",
            spec.dim,
            target.dim()
        )));
    }
    if let Some(k) = spec.classes {
        if k != target.len() {
            return Err(Error::Architecture(format!(
                "{k} classes for a {}-component target",
                target.len()
            )));
        }
    }
    if !(0.0..=1.0).contains(&cfg.label_dropout) {
        return Err(invalid("label_dropout", "must lie in [0, 1]"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = Denoiser::new(spec, schedule, Role::Fake, &mut rng)?;
    let mut opt = AdamW::new(cfg.optimizer.clone(), model.net.num_params())?;
    let mut log = Vec::new();
    for step in 0..cfg.steps {
        opt.set_lr(cosine_lr(
            cfg.optimizer.lr,
            cfg.final_lr_frac,
            step,
            cfg.steps,
        ));
        let (x0, mut labels) = target.sample_labeled(cfg.batch, &mut rng);
        let labels = match model.spec.classes {
            Some(k) => {
                for l in labels.iter_mut() {
                    if rng.random::<f64>() < cfg.label_dropout {
                        *l = k;
                    }
                }
                Some(labels)
            }
            None => None,
        };
        let loss = match model.train_step(&mut opt, &x0, labels.as_deref(), &mut rng) {
            Ok(l) if l.is_finite() => l,
            Ok(_) | Err(Error::NonFinite { .. }) => return Err(Error::Diverged { step }),
            Err(e) => return Err(e),
        };
        if step % cfg.log_every.max(1) == 0 || step + 1 == cfg.steps {
            debug!("teacher step {step} loss {loss:.6}");
            log.push((step, loss));
        }
    }
    info!(
        "teacher trained for {} steps, final loss {:.6}",
        cfg.steps,
        log.last().map_or(0.0, |l| l.1)
    );
    Ok((model.into_base(), log))
}
