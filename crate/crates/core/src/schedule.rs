//! Noise schedules over a fixed number of timestep bins.
//!
//! Bin `t` sits at continuous time `tau = t / (T - 1)`. Samplers work in
//! continuous time; training and timestep sampling use bins.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::TensorBuf;
use crate::error::{invalid, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    /// Variance preserving: `alpha^2 + sigma^2 = 1`.
    Vp,
    /// Variance exploding with `alpha = 1` and log-linear sigma.
    Edm,
}

/// What a denoiser network's raw output represents.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictionType {
    Mean,
    Epsilon,
}

/// Signal and noise scale at one point in time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseLevel {
    pub tau: f64,
    pub alpha: f64,
    pub sigma: f64,
}

impl NoiseLevel {
    pub fn snr(&self) -> f64 {
        (self.alpha * self.alpha) / (self.sigma * self.sigma)
    }

    /// Noise scale of `x_t / alpha`.
    pub fn sigma_tilde(&self) -> f64 {
        self.sigma / self.alpha
    }
}

/// Serializable description from which a schedule is rebuilt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub bins: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub t_min_frac: f64,
    pub t_max_frac: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Vp,
            bins: 1000,
            sigma_min: 0.002,
            sigma_max: 80.0,
            t_min_frac: 0.02,
            t_max_frac: 0.98,
        }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule> {
        let s = NoiseSchedule::new(self.kind, self.bins, self.sigma_min, self.sigma_max)?;
        s.with_fractions(self.t_min_frac, self.t_max_frac)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    bins: usize,
    sigma_min: f64,
    sigma_max: f64,
    alphas: Vec<f64>,
    sigmas: Vec<f64>,
    t_min: usize,
    t_max: usize,
}

impl NoiseSchedule {
    /// Discretizes `kind` into `bins` levels with the default timestep window
    /// `[round(0.02 T), round(0.98 T)]`.
    pub fn new(kind: ScheduleKind, bins: usize, sigma_min: f64, sigma_max: f64) -> Result<Self> {
        if bins < 2 {
            return Err(invalid("bins", format!("need at least 2, got {bins}")));
        }
        if !(sigma_min > 0.0 && sigma_min < sigma_max && sigma_max.is_finite()) {
            return Err(invalid(
                "sigma_min/sigma_max",
                format!("need 0 < sigma_min < sigma_max, got {sigma_min} and {sigma_max}"),
            ));
        }
        let mut s = Self {
            kind,
            bins,
            sigma_min,
            sigma_max,
            alphas: Vec::with_capacity(bins),
            sigmas: Vec::with_capacity(bins),
            t_min: 0,
            t_max: bins - 1,
        };
        for t in 0..bins {
            let level = s.level_at(s.tau_of(t));
            s.alphas.push(level.alpha);
            s.sigmas.push(level.sigma);
        }
        s.with_fractions(0.02, 0.98)
    }

    pub fn from_spec(spec: &ScheduleSpec) -> Result<Self> {
        spec.build()
    }

    pub fn spec(&self) -> ScheduleSpec {
        ScheduleSpec {
            kind: self.kind,
            bins: self.bins,
            sigma_min: self.sigma_min,
            sigma_max: self.sigma_max,
            t_min_frac: self.t_min as f64 / self.bins as f64,
            t_max_frac: self.t_max as f64 / self.bins as f64,
        }
    }

    /// Sets the timestep window to `[round(lo T), round(hi T)]`, clamped to the last bin.
    pub fn with_fractions(self, lo: f64, hi: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
            return Err(invalid(
                "t_min_frac/t_max_frac",
                format!("need 0 <= lo <= hi <= 1, got {lo}, {hi}"),
            ));
        }
        let last = self.bins - 1;
        let t_min = ((lo * self.bins as f64).round() as usize).min(last);
        let t_max = ((hi * self.bins as f64).round() as usize).min(last);
        self.with_bounds(t_min, t_max)
    }

    pub fn with_bounds(mut self, t_min: usize, t_max: usize) -> Result<Self> {
        if t_min > t_max || t_max >= self.bins {
            return Err(invalid(
                "t_min/t_max",
                format!(
                    "need t_min <= t_max <= {}, got {t_min}, {t_max}",
                    self.bins - 1
                ),
            ));
        }
        self.t_min = t_min;
        self.t_max = t_max;
        Ok(self)
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn last_bin(&self) -> usize {
        self.bins - 1
    }

    pub fn sigma_min(&self) -> f64 {
        self.sigma_min
    }

    pub fn sigma_max(&self) -> f64 {
        self.sigma_max
    }

    pub fn t_min(&self) -> usize {
        self.t_min
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn tau_of(&self, bin: usize) -> f64 {
        bin as f64 / (self.bins - 1) as f64
    }

    /// Nearest bin to continuous time `tau`.
    pub fn bin_of(&self, tau: f64) -> usize {
        ((tau.clamp(0.0, 1.0) * (self.bins - 1) as f64).round()) as usize
    }

    fn check_bin(&self, bin: usize) -> Result<()> {
        if bin >= self.bins {
            return Err(Error::BinOutOfRange {
                bin,
                max: self.bins - 1,
            });
        }
        Ok(())
    }

    pub fn level(&self, bin: usize) -> Result<NoiseLevel> {
        self.check_bin(bin)?;
        Ok(NoiseLevel {
            tau: self.tau_of(bin),
            alpha: self.alphas[bin],
            sigma: self.sigmas[bin],
        })
    }

    fn log_ratio(&self) -> f64 {
        (self.sigma_max / self.sigma_min).ln()
    }

    fn theta_range(&self) -> (f64, f64) {
        (self.sigma_min.atan(), self.sigma_max.atan())
    }

    /// Continuous-time level; `sigma / alpha` runs from `sigma_min` at
    /// `tau = 0` to `sigma_max` at `tau = 1`.
    pub fn level_at(&self, tau: f64) -> NoiseLevel {
        match self.kind {
            ScheduleKind::Edm => {
                let sigma = if tau <= 0.0 {
                    self.sigma_min
                } else if tau >= 1.0 {
                    self.sigma_max
                } else {
                    self.sigma_min * (tau * self.log_ratio()).exp()
                };
                NoiseLevel {
                    tau,
                    alpha: 1.0,
                    sigma,
                }
            }
            ScheduleKind::Vp => {
                let (lo, hi) = self.theta_range();
                let theta = lo + tau * (hi - lo);
                NoiseLevel {
                    tau,
                    alpha: theta.cos(),
                    sigma: theta.sin(),
                }
            }
        }
    }

    /// Coefficients `(c_x, c_mu)` of the probability-flow velocity
    /// `dx/dtau = c_x x + c_mu mu(x, tau)`.
    pub fn flow_coeffs(&self, tau: f64) -> (f64, f64) {
        match self.kind {
            ScheduleKind::Edm => {
                let r = self.log_ratio();
                (r, -r)
            }
            ScheduleKind::Vp => {
                let (lo, hi) = self.theta_range();
                let rate = hi - lo;
                let theta = lo + tau * rate;
                let (s, c) = theta.sin_cos();
                (rate * c / s, -rate / s)
            }
        }
    }

    /// Scale of the starting state for samplers and one-step generators.
    pub fn prior_scale(&self) -> f64 {
        match self.kind {
            ScheduleKind::Vp => 1.0,
            ScheduleKind::Edm => self.sigma_max,
        }
    }

    /// Forward diffusion `alpha_t x + sigma_t eps`.
    pub fn diffuse(&self, x: &TensorBuf, bin: usize, eps: &TensorBuf) -> Result<TensorBuf> {
        let l = self.level(bin)?;
        diffuse_at(&l, x, eps)
    }

    /// Converts `value` at bin `t` from the `from` parameterization to the other one.
    pub fn convert_prediction(
        &self,
        bin: usize,
        x_t: &TensorBuf,
        value: &TensorBuf,
        from: PredictionType,
    ) -> Result<TensorBuf> {
        let l = self.level(bin)?;
        match from {
            PredictionType::Epsilon if l.alpha == 0.0 => Err(Error::DegenerateBin {
                bin,
                which: "alpha",
            }),
            PredictionType::Mean if l.sigma == 0.0 => Err(Error::DegenerateBin {
                bin,
                which: "sigma",
            }),
            PredictionType::Epsilon => eps_to_mean(&l, x_t, value),
            PredictionType::Mean => mean_to_eps(&l, x_t, value),
        }
    }

    /// Uniform bin in `[t_min, t_max]`.
    pub fn sample_timestep<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        rng.random_range(self.t_min..=self.t_max)
    }

    /// Uniform bin over the whole schedule.
    pub fn sample_any_bin<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        rng.random_range(0..self.bins)
    }

    /// `n` jittered-stratified bins: row `i` lands uniformly inside the `i`-th of
    /// `n` equal slices of `[0, 1)`. Each row is still uniform over the schedule
    /// once rows are exchangeable, but a batch covers every noise range.
    pub fn stratified_bins<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<usize> {
        (0..n)
            .map(|i| {
                let u = (i as f64 + rng.random::<f64>()) / n as f64;
                ((u * self.bins as f64) as usize).min(self.last_bin())
            })
            .collect()
    }
}

pub fn diffuse_at(l: &NoiseLevel, x: &TensorBuf, eps: &TensorBuf) -> Result<TensorBuf> {
    x.zip_map(eps, "diffuse noise", |x, e| l.alpha * x + l.sigma * e)
}

/// `mu = (x_t - sigma eps) / alpha`
pub fn eps_to_mean(l: &NoiseLevel, x_t: &TensorBuf, eps: &TensorBuf) -> Result<TensorBuf> {
    x_t.zip_map(eps, "eps to mean", |x, e| (x - l.sigma * e) / l.alpha)
}

/// `eps = (x_t - alpha mu) / sigma`
pub fn mean_to_eps(l: &NoiseLevel, x_t: &TensorBuf, mean: &TensorBuf) -> Result<TensorBuf> {
    x_t.zip_map(mean, "mean to eps", |x, m| (x - l.alpha * m) / l.sigma)
}
