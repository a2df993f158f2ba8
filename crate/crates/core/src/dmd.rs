//! One-step generator distillation: the score-difference gradient, the
//! paired regression loss, fake-score updates, and the training loop.

use std::io::Write;

use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamW, AdamWConfig, Mlp, NodeId, Tape, TensorBuf};
use crate::diffusion::{
    cosine_lr, standard_normal, Denoiser, Guided, MeanPredictor, TIME_FEATURES,
};
use crate::error::{invalid, Error, Result};
use crate::sampler::PairedDataset;
use crate::schedule::{NoiseLevel, NoiseSchedule};
use crate::toyworld::GaussianMixture;

/// Affine wrapping of the generator network: `G(z) = skip z + out F(input z, onehot)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenScales {
    pub input: f64,
    pub skip: f64,
    pub out: f64,
}

/// Time-free one-step generator.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    dim: usize,
    classes: Option<usize>,
    scales: GenScales,
    net: Mlp,
}

impl Generator {
    pub fn from_parts(
        dim: usize,
        classes: Option<usize>,
        scales: GenScales,
        net: Mlp,
    ) -> Result<Self> {
        let expected_in = dim + classes.map_or(0, |k| k + 1);
        if net.input_dim() != expected_in || net.output_dim() != dim {
            return Err(Error::Architecture(format!(
                "generator network {:?} needs input {expected_in} and output {dim}",
                net.widths()
            )));
        }
        Ok(Self {
            dim,
            classes,
            scales,
            net,
        })
    }

    /// `x = scale z + shift` on a single linear layer.
    pub fn affine(scale: f64, shift: &[f64]) -> Result<Self> {
        let d = shift.len();
        let mut params = vec![0.0; d * d + d];
        for i in 0..d {
            params[i * d + i] = scale;
        }
        params[d * d..].copy_from_slice(shift);
        let net = Mlp::from_params(vec![d, d], crate::autodiff::Activation::Silu, params)?;
        Self::from_parts(
            d,
            None,
            GenScales {
                input: 1.0,
                skip: 0.0,
                out: 1.0,
            },
            net,
        )
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> Option<usize> {
        self.classes
    }

    pub fn scales(&self) -> GenScales {
        self.scales
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn params(&self) -> &[f64] {
        self.net.params()
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        self.net.params_mut()
    }

    /// Adds `offset` to every output by moving the last-layer bias.
    pub fn shift_output(&mut self, offset: &[f64]) -> Result<()> {
        if offset.iter().all(|&o| o == 0.0) {
            return Ok(());
        }
        if offset.len() != self.dim {
            return Err(invalid(
                "init_offset",
                format!("needs {} entries, got {}", self.dim, offset.len()),
            ));
        }
        if self.scales.out == 0.0 {
            return Err(invalid("init_offset", "generator output scale is zero"));
        }
        let (_, b) = self.net.layer_offsets(self.net.layers() - 1);
        let out = self.scales.out;
        for (p, o) in self.net.params_mut()[b..b + offset.len()]
            .iter_mut()
            .zip(offset)
        {
            *p += o / out;
        }
        Ok(())
    }

    fn input(&self, z: &TensorBuf, labels: Option<&[usize]>) -> Result<TensorBuf> {
        if z.shape().len() != 2 || z.cols() != self.dim {
            return Err(Error::ShapeMismatch {
                context: "generator noise".into(),
                expected: vec![z.rows(), self.dim],
                got: z.shape().to_vec(),
            });
        }
        let scaled = z.map(|v| self.scales.input * v);
        match self.classes {
            None => Ok(scaled),
            Some(k) => {
                let labels = labels.ok_or(Error::MissingLabel)?;
                if labels.len() != z.rows() {
                    return Err(Error::MissingLabel);
                }
                let mut onehot = TensorBuf::zeros(&[z.rows(), k + 1]);
                for (i, &l) in labels.iter().enumerate() {
                    if l > k {
                        return Err(Error::LabelOutOfRange {
                            label: l,
                            classes: k,
                        });
                    }
                    onehot.row_mut(i)[l] = 1.0;
                }
                TensorBuf::hstack(&[&scaled, &onehot])
            }
        }
    }

    fn combine(&self, z: &TensorBuf, raw: &TensorBuf) -> Result<TensorBuf> {
        let GenScales { skip, out, .. } = self.scales;
        z.zip_map(raw, "generator output", |z, f| skip * z + out * f)
    }

    pub fn forward(&self, z: &TensorBuf, labels: Option<&[usize]>) -> Result<TensorBuf> {
        let raw = self.net.forward(&self.input(z, labels)?)?;
        self.combine(z, &raw)
    }

    /// Forward pass recorded for a later [`Generator::backward`].
    pub fn record(&self, z: &TensorBuf, labels: Option<&[usize]>) -> Result<Recorded> {
        let mut tape = Tape::new();
        let inp = tape.leaf(self.input(z, labels)?);
        let raw = self.net.forward_tape(&mut tape, inp, 0)?;
        let x = self.combine(z, tape.value(raw))?;
        Ok(Recorded { tape, raw, x })
    }

    /// Parameter gradient given `dL/dx` for a recorded forward pass.
    pub fn backward(&self, rec: Recorded, grad_x: &TensorBuf) -> Result<Vec<f64>> {
        let Recorded { mut tape, raw, x } = rec;
        grad_x.expect_shape(x.shape(), "generator output gradient")?;
        let seed = grad_x.map(|g| self.scales.out * g);
        Ok(tape
            .backward(&[(raw, &seed)], self.net.num_params())?
            .into_params())
    }
}

/// A recorded generator forward pass and its output.
#[derive(Debug)]
pub struct Recorded {
    tape: Tape,
    raw: NodeId,
    x: TensorBuf,
}

impl Recorded {
    pub fn output(&self) -> &TensorBuf {
        &self.x
    }
}

/// Builds the generator `G(z) = mu_base(prior_scale z, T - 1)` from the teacher.
///
/// The last-bin time features are folded into the first-layer bias, so the
/// copy takes only noise (and the one-hot label for conditional teachers).
pub fn init_generator(teacher: &Denoiser) -> Result<Generator> {
    let spec = teacher.spec();
    let schedule = teacher.schedule();
    let src = teacher.net();
    let d = spec.dim;
    if src.input_dim() != spec.input_width() || src.output_dim() != d {
        return Err(Error::Architecture(format!(
            "teacher network {:?} does not match its spec",
            src.widths()
        )));
    }
    let level = schedule.level(schedule.last_bin())?;
    let pre = spec.precond(&level);
    let feats = crate::diffusion::DenoiserSpec::time_features(&level);
    let ps = schedule.prior_scale();

    let mut widths = src.widths().to_vec();
    widths[0] -= TIME_FEATURES;
    let h = widths[1];
    let mut params = Vec::with_capacity(src.num_params() - TIME_FEATURES * h);
    let (_, b0) = src.layer_offsets(0);
    let w0 = &src.params()[..b0];
    let rows: Vec<&[f64]> = w0.chunks_exact(h).collect();
    for (r, row) in rows.iter().enumerate() {
        if r < d || r >= d + TIME_FEATURES {
            params.extend_from_slice(row);
        }
    }
    let mut bias = src.params()[b0..b0 + h].to_vec();
    for (j, &f) in feats.iter().enumerate() {
        for (b, &w) in bias.iter_mut().zip(rows[d + j]) {
            *b += f * w;
        }
    }
    params.extend_from_slice(&bias);
    params.extend_from_slice(&src.params()[b0 + h..]);
    let net = Mlp::from_params(widths, src.activation(), params)?;
    Generator::from_parts(
        d,
        spec.classes,
        GenScales {
            input: pre.input * ps,
            skip: pre.skip * ps,
            out: pre.out,
        },
        net,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Weighting {
    /// Divide by the mean absolute residual of the real prediction.
    #[serde(rename = "residual-normalized")]
    ResidualNormalized,
    /// Multiply the score difference by `(sigma^2 / alpha)` times that residual.
    #[serde(rename = "score-scaled")]
    ScoreScaled,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Distance {
    SquaredL2,
    /// Squared L2 after a fixed Gaussian projection to `features` dimensions.
    RandomFeature {
        features: usize,
        seed: u64,
    },
}

impl Distance {
    /// Row-major `[features, dim]` projection, or `None` for plain squared L2.
    fn projection(&self, dim: usize) -> Result<Option<Vec<f64>>> {
        match *self {
            Distance::SquaredL2 => Ok(None),
            Distance::RandomFeature { features, seed } => {
                if features == 0 {
                    return Err(invalid(
                        "distance",
                        "random-feature needs at least one feature",
                    ));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let s = 1.0 / (features as f64).sqrt();
                let p = standard_normal(&[features, dim], &mut rng);
                Ok(Some(p.data().iter().map(|v| v * s).collect()))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DmdConfig {
    pub lambda_reg: f64,
    /// Guidance scale for the real score; 1 disables guidance.
    pub omega: f64,
    pub t_min_frac: f64,
    pub t_max_frac: f64,
    pub dm_batch: usize,
    pub reg_batch: usize,
    pub gen_optimizer: AdamWConfig,
    pub fake_optimizer: AdamWConfig,
    pub iterations: usize,
    pub weighting: Weighting,
    pub distance: Distance,
    pub seed: u64,
    /// Multiplier on the distribution-matching term; 0 leaves only regression.
    pub dm_weight: f64,
    pub fake_steps_per_gen: usize,
    /// Added to the generator output at initialization.
    pub init_offset: Vec<f64>,
    /// Generator learning rate at the last iteration as a fraction of the
    /// initial rate, reached by cosine decay; 1 keeps it constant.
    pub gen_final_lr_frac: f64,
}

impl Default for DmdConfig {
    fn default() -> Self {
        Self {
            lambda_reg: 0.25,
            omega: 1.0,
            t_min_frac: 0.02,
            t_max_frac: 0.98,
            dm_batch: 128,
            reg_batch: 64,
            gen_optimizer: AdamWConfig::default().with_lr(1e-3),
            fake_optimizer: AdamWConfig::default().with_lr(1e-3),
            iterations: 1000,
            weighting: Weighting::ResidualNormalized,
            distance: Distance::SquaredL2,
            seed: 0,
            dm_weight: 1.0,
            fake_steps_per_gen: 1,
            init_offset: Vec::new(),
            gen_final_lr_frac: 1.0,
        }
    }
}

impl DmdConfig {
    /// Settings for the two-mode benchmark.
    ///
    /// The generator starts shifted onto one mode and its learning rate
    /// decays to 2% by cosine; the fake score learns at a quarter of the
    /// generator rate. Under these settings the distribution-matching term
    /// alone keeps the generator on the mode it starts next to.
    pub fn two_mode() -> Self {
        Self {
            dm_batch: 128,
            reg_batch: 64,
            gen_optimizer: AdamWConfig {
                lr: 1e-3,
                weight_decay: 0.0,
                ..AdamWConfig::default()
            },
            fake_optimizer: AdamWConfig {
                lr: 2.5e-4,
                weight_decay: 0.0,
                ..AdamWConfig::default()
            },
            iterations: 1500,
            init_offset: vec![4.0, 0.0],
            gen_final_lr_frac: 0.02,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_reg >= 0.0) || !self.lambda_reg.is_finite() {
            return Err(invalid("lambda_reg", "must be finite and >= 0"));
        }
        if !(self.dm_weight >= 0.0) || !self.dm_weight.is_finite() {
            return Err(invalid("dm_weight", "must be finite and >= 0"));
        }
        if !(self.omega >= 0.0) {
            return Err(invalid("omega", "must be >= 0"));
        }
        if self.dm_batch == 0 || self.reg_batch == 0 {
            return Err(invalid("batch", "dm_batch and reg_batch must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.gen_final_lr_frac) {
            return Err(invalid("gen_final_lr_frac", "must lie in [0, 1]"));
        }
        if self.fake_steps_per_gen == 0 {
            return Err(invalid("fake_steps_per_gen", "must be >= 1"));
        }
        self.gen_optimizer.validate()?;
        self.fake_optimizer.validate()?;
        self.distance.projection(1)?;
        Ok(())
    }
}

/// Per-sample weight. In `ScoreScaled` mode this is `(sigma^2 / alpha) mean|x - mu_real|`;
/// in `ResidualNormalized` mode it is the divisor `max(mean|x - mu_real|, 1e-8)`.
pub fn compute_weight(level: &NoiseLevel, x: &[f64], mu_real: &[f64], mode: Weighting) -> f64 {
    let m = x
        .iter()
        .zip(mu_real)
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / x.len() as f64;
    match mode {
        Weighting::ScoreScaled => level.sigma * level.sigma / level.alpha * m,
        Weighting::ResidualNormalized => m.max(1e-8),
    }
}

/// Output of one distribution-matching evaluation.
#[derive(Clone, Debug)]
pub struct DmOutput {
    /// Surrogate value `0.5 / B * sum_i |g_i|^2`.
    pub loss: f64,
    pub grads: Vec<f64>,
    /// Generator samples, detached.
    pub x: TensorBuf,
    /// Per-sample direction `g_i` applied at `x`.
    pub direction: TensorBuf,
}

/// Per-sample update direction at generator samples `x` for given bins and noise.
pub fn dm_direction<R: MeanPredictor + ?Sized, F: MeanPredictor + ?Sized>(
    real: &R,
    fake: &F,
    schedule: &NoiseSchedule,
    x: &TensorBuf,
    labels: Option<&[usize]>,
    bins: &[usize],
    eps: &TensorBuf,
    mode: Weighting,
) -> Result<TensorBuf> {
    let n = x.rows();
    if bins.len() != n {
        return Err(Error::ShapeMismatch {
            context: "dm bins".into(),
            expected: vec![n],
            got: vec![bins.len()],
        });
    }
    eps.expect_shape(x.shape(), "dm noise")?;
    let levels = bins
        .iter()
        .map(|&b| schedule.level(b))
        .collect::<Result<Vec<_>>>()?;
    let mut x_t = x.clone();
    for (i, l) in levels.iter().enumerate() {
        for ((o, &v), &e) in x_t.row_mut(i).iter_mut().zip(x.row(i)).zip(eps.row(i)) {
            *o = l.alpha * v + l.sigma * e;
        }
    }
    let mu_real = real.predict_mean(&x_t, &levels, labels)?;
    let mu_fake = fake.predict_mean(&x_t, &levels, labels)?;
    let mut g = TensorBuf::zeros(x.shape());
    for (i, l) in levels.iter().enumerate() {
        let w = compute_weight(l, x.row(i), mu_real.row(i), mode);
        let row = g.row_mut(i);
        for ((o, &f), &r) in row.iter_mut().zip(mu_fake.row(i)).zip(mu_real.row(i)) {
            *o = match mode {
                Weighting::ResidualNormalized => (f - r) / w,
                // w alpha (s_fake - s_real) with s_fake - s_real = alpha (mu_fake - mu_real) / sigma^2
                Weighting::ScoreScaled => w * l.alpha * (l.alpha * (f - r) / (l.sigma * l.sigma)),
            };
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "distribution matching gradient".into(),
                index: Some(i),
            });
        }
    }
    Ok(g)
}

/// Distribution-matching gradient for explicit bins and noise.
#[allow(clippy::too_many_arguments)]
pub fn dm_gradient_with<R: MeanPredictor + ?Sized, F: MeanPredictor + ?Sized>(
    gen: &Generator,
    real: &R,
    fake: &F,
    schedule: &NoiseSchedule,
    z: &TensorBuf,
    labels: Option<&[usize]>,
    bins: &[usize],
    eps: &TensorBuf,
    mode: Weighting,
) -> Result<DmOutput> {
    if z.is_empty() {
        return Err(Error::EmptyBatch("dm_gradient"));
    }
    let rec = gen.record(z, labels)?;
    let x = rec.output().clone();
    let g = dm_direction(real, fake, schedule, &x, labels, bins, eps, mode)?;
    let b = z.rows() as f64;
    let loss = 0.5 * g.data().iter().map(|v| v * v).sum::<f64>() / b;
    // d/dx of 0.5/B sum |x - stopgrad(x - g)|^2 is g / B.
    let seed = g.map(|v| v / b);
    let grads = gen.backward(rec, &seed)?;
    Ok(DmOutput {
        loss,
        grads,
        x,
        direction: g,
    })
}

/// Distribution-matching gradient with bins from the schedule's window and fresh noise.
#[allow(clippy::too_many_arguments)]
pub fn dm_gradient<R: MeanPredictor + ?Sized, F: MeanPredictor + ?Sized, G: Rng + ?Sized>(
    gen: &Generator,
    real: &R,
    fake: &F,
    schedule: &NoiseSchedule,
    z: &TensorBuf,
    labels: Option<&[usize]>,
    mode: Weighting,
    rng: &mut G,
) -> Result<DmOutput> {
    let bins: Vec<usize> = (0..z.rows())
        .map(|_| schedule.sample_timestep(rng))
        .collect();
    let eps = standard_normal(z.shape(), rng);
    dm_gradient_with(gen, real, fake, schedule, z, labels, &bins, &eps, mode)
}

/// Value of `0.5 / B * sum_i |G(z_i) - target_i|^2`, the surrogate with its
/// stop-gradient target held fixed.
pub fn surrogate_value(
    gen: &Generator,
    z: &TensorBuf,
    labels: Option<&[usize]>,
    target: &TensorBuf,
) -> Result<f64> {
    let x = gen.forward(z, labels)?;
    x.expect_shape(target.shape(), "surrogate target")?;
    let s: f64 = x
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(0.5 * s / z.rows() as f64)
}

/// `lambda * mean_i l(G(z_i), y_i)` and its parameter gradient.
pub fn regression_loss(
    gen: &Generator,
    z: &TensorBuf,
    y: &TensorBuf,
    labels: Option<&[usize]>,
    distance: &Distance,
    lambda: f64,
) -> Result<(f64, Vec<f64>)> {
    if z.is_empty() || z.rows() == 0 {
        return Err(Error::EmptyBatch("regression_loss"));
    }
    let rec = gen.record(z, labels)?;
    let x = rec.output();
    y.expect_shape(x.shape(), "regression targets")?;
    let n = z.rows() as f64;
    let d = x.cols();
    let diff = x.zip_map(y, "regression residual", |a, b| a - b)?;
    let proj = distance.projection(d)?;
    let mut loss = 0.0;
    let mut seed = TensorBuf::zeros(x.shape());
    for i in 0..z.rows() {
        let r = diff.row(i);
        let s = seed.row_mut(i);
        match &proj {
            None => {
                for (o, &v) in s.iter_mut().zip(r) {
                    loss += v * v;
                    *o = 2.0 * lambda * v / n;
                }
            }
            Some(p) => {
                for prow in p.chunks_exact(d) {
                    let f: f64 = prow.iter().zip(r).map(|(a, b)| a * b).sum();
                    loss += f * f;
                    for (o, &pv) in s.iter_mut().zip(prow) {
                        *o += 2.0 * lambda * f * pv / n;
                    }
                }
            }
        }
    }
    let grads = gen.backward(rec, &seed)?;
    Ok((lambda * loss / n, grads))
}

/// One denoising step of the fake score on detached generator samples.
/// Returns the loss before the update.
pub fn fake_score_step<R: Rng + ?Sized>(
    fake: &mut Denoiser,
    opt: &mut AdamW,
    x: &TensorBuf,
    labels: Option<&[usize]>,
    rng: &mut R,
) -> Result<f64> {
    fake.train_step(opt, x, labels, rng)
}

/// One row of the distillation metrics log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iter: usize,
    pub kl_surrogate: f64,
    pub reg_loss: f64,
    pub fake_denoise_loss: f64,
    pub grad_norm: f64,
}

pub fn write_log_csv<W: Write>(rows: &[LogRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r).map_err(|e| Error::Io(e.to_string()))?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct DmdRun {
    pub generator: Generator,
    pub fake: Denoiser,
    pub log: Vec<LogRow>,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Distills `teacher` into a one-step generator.
///
/// Each iteration takes a generator step on the weighted distribution-matching
/// term plus the regression loss on a pair batch, then trains the fake score
/// on the detached pre-update samples. `pairs` may be omitted only when
/// `lambda_reg` is zero.
pub fn dmd_train(
    teacher: &Denoiser,
    pairs: Option<&PairedDataset>,
    cfg: &DmdConfig,
) -> Result<DmdRun> {
    cfg.validate()?;
    if let Some(p) = pairs {
        let hash = teacher.param_hash();
        if p.meta().teacher_hash != hash {
            return Err(Error::LineageMismatch {
                expected: p.meta().teacher_hash,
                got: hash,
            });
        }
        if p.dim() != teacher.spec().dim {
            return Err(Error::Architecture(
                "paired dataset dim differs from teacher".into(),
            ));
        }
    } else if cfg.lambda_reg > 0.0 {
        return Err(invalid("lambda_reg", "regression needs a paired dataset"));
    }
    let schedule = teacher
        .schedule()
        .clone()
        .with_fractions(cfg.t_min_frac, cfg.t_max_frac)?;
    let classes = teacher.spec().classes;
    let guided = match classes {
        Some(_) if cfg.omega != 1.0 => Some(Guided::new(teacher, cfg.omega)?),
        _ => None,
    };
    let real: &dyn MeanPredictor = match &guided {
        Some(g) => g,
        None => teacher,
    };

    let mut gen = init_generator(teacher)?;
    gen.shift_output(&cfg.init_offset)?;
    let mut fake = teacher.fake_copy();
    let mut gen_opt = AdamW::new(cfg.gen_optimizer.clone(), gen.params().len())?;
    let mut fake_opt = AdamW::new(cfg.fake_optimizer.clone(), fake.net().num_params())?;
    let mut rng_dm = stream_rng(cfg.seed, 1);
    let mut rng_reg = stream_rng(cfg.seed, 2);
    let mut rng_fake = stream_rng(cfg.seed, 3);
    let dim = gen.dim();
    let mut log = Vec::with_capacity(cfg.iterations);

    for iter in 0..cfg.iterations {
        let z = standard_normal(&[cfg.dm_batch, dim], &mut rng_dm);
        let labels: Option<Vec<usize>> = classes.map(|k| {
            (0..cfg.dm_batch)
                .map(|_| rng_dm.random_range(0..k))
                .collect()
        });
        let dm = dm_gradient(
            &gen,
            real,
            &fake,
            &schedule,
            &z,
            labels.as_deref(),
            cfg.weighting,
            &mut rng_dm,
        )?;
        let mut grads: Vec<f64> = dm.grads.iter().map(|g| cfg.dm_weight * g).collect();

        let mut reg_loss = 0.0;
        if cfg.lambda_reg > 0.0 {
            let p = pairs.expect("checked above");
            let idx: Vec<usize> = (0..cfg.reg_batch)
                .map(|_| rng_reg.random_range(0..p.len()))
                .collect();
            let (zr, yr, lr) = p.batch(&idx);
            let (l, g) =
                regression_loss(&gen, &zr, &yr, lr.as_deref(), &cfg.distance, cfg.lambda_reg)?;
            reg_loss = l;
            for (a, b) in grads.iter_mut().zip(g) {
                *a += b;
            }
        }
        if !(dm.loss.is_finite() && reg_loss.is_finite()) {
            return Err(Error::Diverged { step: iter });
        }
        gen_opt.set_lr(cosine_lr(
            cfg.gen_optimizer.lr,
            cfg.gen_final_lr_frac,
            iter,
            cfg.iterations,
        ));
        let grad_norm = gen_opt.step(gen.params_mut(), &grads)?;

        let mut fake_loss = 0.0;
        for _ in 0..cfg.fake_steps_per_gen {
            fake_loss = fake_score_step(
                &mut fake,
                &mut fake_opt,
                &dm.x,
                labels.as_deref(),
                &mut rng_fake,
            )?;
        }
        if !fake_loss.is_finite() {
            return Err(Error::Diverged { step: iter });
        }
        let row = LogRow {
            iter,
            kl_surrogate: dm.loss,
            reg_loss,
            fake_denoise_loss: fake_loss,
            grad_norm,
        };
        if iter % 100 == 0 {
            debug!("dmd iter {iter}: {row:?}");
        }
        log.push(row);
    }
    info!("distillation finished after {} iterations", cfg.iterations);
    Ok(DmdRun {
        generator: gen,
        fake,
        log,
    })
}

/// Settings for [`distill_affine_analytic`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AffineConfig {
    pub iterations: usize,
    pub batch: usize,
    pub optimizer: AdamWConfig,
    pub weighting: Weighting,
    pub t_min_frac: f64,
    pub t_max_frac: f64,
    pub seed: u64,
}

impl Default for AffineConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            batch: 256,
            optimizer: AdamWConfig {
                lr: 1e-2,
                weight_decay: 0.0,
                ..AdamWConfig::default()
            },
            weighting: Weighting::ResidualNormalized,
            t_min_frac: 0.02,
            t_max_frac: 0.98,
            seed: 0,
        }
    }
}

/// Distills a 1-D affine generator `x = a z + b` toward a Gaussian `target`
/// with both scores in closed form: the real one from `target` and the fake
/// one from the generator's current pushforward `N(b, a^2)`, so no fake
/// network is trained. Returns `(a, b)` after every step, starting with the
/// initial values.
pub fn distill_affine_analytic(
    target: &GaussianMixture,
    schedule: &NoiseSchedule,
    init: (f64, f64),
    cfg: &AffineConfig,
) -> Result<Vec<(f64, f64)>> {
    if target.dim() != 1 {
        return Err(invalid("target", "affine distillation is one-dimensional"));
    }
    if cfg.batch == 0 {
        return Err(Error::EmptyBatch("distill_affine_analytic"));
    }
    let schedule = schedule
        .clone()
        .with_fractions(cfg.t_min_frac, cfg.t_max_frac)?;
    let mut gen = Generator::affine(init.0, &[init.1])?;
    let mut opt = AdamW::new(cfg.optimizer.clone(), 2)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut path = vec![init];
    for iter in 0..cfg.iterations {
        let (a, b) = (gen.params()[0], gen.params()[1]);
        if a == 0.0 {
            return Err(Error::Diverged { step: iter });
        }
        let fake = GaussianMixture::affine_pushforward(a, vec![b])?;
        let z = standard_normal(&[cfg.batch, 1], &mut rng);
        let dm = dm_gradient(
            &gen,
            target,
            &fake,
            &schedule,
            &z,
            None,
            cfg.weighting,
            &mut rng,
        )?;
        opt.step(gen.params_mut(), &dm.grads)?;
        let p = gen.params();
        if !(p[0].is_finite() && p[1].is_finite()) {
            return Err(Error::Diverged { step: iter });
        }
        path.push((p[0], p[1]));
    }
    Ok(path)
}
