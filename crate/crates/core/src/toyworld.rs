//! Analytic toy targets: isotropic Gaussian mixtures with closed-form
//! diffused scores, posterior means, and Gaussian KL.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::TensorBuf;
use crate::diffusion::MeanPredictor;
use crate::dmd::DmdConfig;
use crate::error::{invalid, Error, Result};
use crate::schedule::{NoiseLevel, NoiseSchedule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Component {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Component>", into = "Vec<Component>")]
pub struct GaussianMixture {
    dim: usize,
    components: Vec<Component>,
}

impl TryFrom<Vec<Component>> for GaussianMixture {
    type Error = Error;
    fn try_from(c: Vec<Component>) -> Result<Self> {
        Self::new(c)
    }
}

impl From<GaussianMixture> for Vec<Component> {
    fn from(m: GaussianMixture) -> Self {
        m.components
    }
}

impl GaussianMixture {
    pub fn new(components: Vec<Component>) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| invalid("components", "need at least one"))?;
        let dim = first.mean.len();
        if dim == 0 {
            return Err(invalid("components", "means must be non-empty"));
        }
        for (k, c) in components.iter().enumerate() {
            if c.mean.len() != dim {
                return Err(invalid(
                    "components",
                    format!("component {k} has dim {}, expected {dim}", c.mean.len()),
                ));
            }
            if !(c.std > 0.0) || !c.std.is_finite() {
                return Err(invalid(
                    "components",
                    format!("component {k} needs std > 0, got {}", c.std),
                ));
            }
            if !(c.weight >= 0.0) || c.mean.iter().any(|m| !m.is_finite()) {
                return Err(invalid(
                    "components",
                    format!("component {k} has a negative weight or non-finite mean"),
                ));
            }
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(invalid(
                "components",
                format!("weights sum to {total}, expected 1"),
            ));
        }
        Ok(Self { dim, components })
    }

    /// Single isotropic Gaussian `N(mean, std^2 I)`.
    pub fn gaussian(mean: Vec<f64>, std: f64) -> Result<Self> {
        Self::new(vec![Component {
            weight: 1.0,
            mean,
            std,
        }])
    }

    /// Pushforward of `N(0, I)` under `z -> scale z + shift`.
    pub fn affine_pushforward(scale: f64, shift: Vec<f64>) -> Result<Self> {
        Self::gaussian(shift, scale.abs())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    /// The mixture restricted to component `k`, used as a class-conditional target.
    pub fn component(&self, k: usize) -> Result<Self> {
        let c = self.components.get(k).ok_or(Error::LabelOutOfRange {
            label: k,
            classes: self.len(),
        })?;
        Self::gaussian(c.mean.clone(), c.std)
    }

    /// Marginal of `alpha x + sigma eps` for `x` drawn from this mixture.
    pub fn diffused(&self, level: &NoiseLevel) -> Self {
        let components = self
            .components
            .iter()
            .map(|c| Component {
                weight: c.weight,
                mean: c.mean.iter().map(|m| level.alpha * m).collect(),
                std: (level.alpha * level.alpha * c.std * c.std + level.sigma * level.sigma).sqrt(),
            })
            .collect();
        Self {
            dim: self.dim,
            components,
        }
    }

    /// Draws `n` points and the component each came from.
    pub fn sample_labeled<R: Rng + ?Sized>(
        &self,
        n: usize,
        rng: &mut R,
    ) -> (TensorBuf, Vec<usize>) {
        let pick = WeightedIndex::new(self.components.iter().map(|c| c.weight))
            .expect("weights validated");
        let mut data = Vec::with_capacity(n * self.dim);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let k = pick.sample(rng);
            let c = &self.components[k];
            for &m in &c.mean {
                let e: f64 = rng.sample(StandardNormal);
                data.push(m + c.std * e);
            }
            labels.push(k);
        }
        let x = if n == 0 {
            TensorBuf::zeros(&[0, self.dim])
        } else {
            TensorBuf::matrix(n, self.dim, data).expect("sized above")
        };
        (x, labels)
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> TensorBuf {
        self.sample_labeled(n, rng).0
    }

    fn check_points(&self, x: &TensorBuf, context: &str) -> Result<()> {
        if x.cols() != self.dim {
            return Err(Error::ShapeMismatch {
                context: context.to_string(),
                expected: vec![x.rows(), self.dim],
                got: x.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Per-component log terms `ln w_k + ln N(x; m_k, s_k^2 I)` for one point.
    fn log_terms(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        let d = self.dim as f64;
        for c in &self.components {
            let v = c.std * c.std;
            let r2: f64 = x.iter().zip(&c.mean).map(|(a, m)| (a - m) * (a - m)).sum();
            out.push(
                c.weight.ln() - 0.5 * d * (2.0 * std::f64::consts::PI * v).ln() - 0.5 * r2 / v,
            );
        }
    }

    /// Log density of every row of `x`.
    pub fn log_density(&self, x: &TensorBuf) -> Result<Vec<f64>> {
        self.check_points(x, "log_density points")?;
        let mut terms = Vec::with_capacity(self.len());
        Ok(x.iter_rows()
            .map(|row| {
                self.log_terms(row, &mut terms);
                log_sum_exp(&terms)
            })
            .collect())
    }

    /// Score `grad ln p(x)` of every row of `x`.
    pub fn score(&self, x: &TensorBuf) -> Result<TensorBuf> {
        self.check_points(x, "score points")?;
        let mut out = TensorBuf::zeros(x.shape());
        let mut terms = Vec::with_capacity(self.len());
        for (i, row) in x.iter_rows().enumerate() {
            self.log_terms(row, &mut terms);
            let lse = log_sum_exp(&terms);
            let o = out.row_mut(i);
            for (c, &lt) in self.components.iter().zip(&terms) {
                let r = (lt - lse).exp();
                if r == 0.0 {
                    continue;
                }
                let v = c.std * c.std;
                for ((o, &a), &m) in o.iter_mut().zip(row).zip(&c.mean) {
                    *o -= r * (a - m) / v;
                }
            }
        }
        Ok(out)
    }

    /// Exact score of the diffused marginal at bin `t`.
    pub fn diffused_score(
        &self,
        schedule: &NoiseSchedule,
        x: &TensorBuf,
        bin: usize,
    ) -> Result<TensorBuf> {
        self.score_at(&schedule.level(bin)?, x)
    }

    pub fn score_at(&self, level: &NoiseLevel, x: &TensorBuf) -> Result<TensorBuf> {
        self.diffused(level).score(x)
    }

    /// `E[x_0 | x_t]` via `(x_t + sigma^2 score) / alpha`.
    pub fn posterior_mean_at(&self, level: &NoiseLevel, x_t: &TensorBuf) -> Result<TensorBuf> {
        let s = self.score_at(level, x_t)?;
        let v = level.sigma * level.sigma;
        x_t.zip_map(&s, "posterior mean", |x, s| (x + v * s) / level.alpha)
    }

    /// Index of the nearest component mean for one point.
    pub fn nearest_component(&self, x: &[f64]) -> (usize, f64) {
        self.components
            .iter()
            .enumerate()
            .map(|(k, c)| {
                let d2: f64 = x.iter().zip(&c.mean).map(|(a, m)| (a - m) * (a - m)).sum();
                (k, d2.sqrt())
            })
            .fold(
                (0, f64::INFINITY),
                |best, cur| if cur.1 < best.1 { cur } else { best },
            )
    }
}

/// Label `k` selects component `k`; label `len()` (the null class) or no
/// labels use the full mixture.
impl MeanPredictor for GaussianMixture {
    fn dim(&self) -> usize {
        self.dim
    }

    fn classes(&self) -> Option<usize> {
        Some(self.len())
    }

    fn predict_mean(
        &self,
        x_t: &TensorBuf,
        levels: &[NoiseLevel],
        labels: Option<&[usize]>,
    ) -> Result<TensorBuf> {
        self.check_points(x_t, "mixture predictor input")?;
        let n = x_t.rows();
        if levels.len() != 1 && levels.len() != n {
            return Err(Error::ShapeMismatch {
                context: "mixture predictor levels".into(),
                expected: vec![n],
                got: vec![levels.len()],
            });
        }
        if let Some(l) = labels {
            if l.len() != n {
                return Err(Error::MissingLabel);
            }
        }
        let single = levels.len() == 1 && labels.is_none();
        if single {
            return self.posterior_mean_at(&levels[0], x_t);
        }
        let mut out = TensorBuf::zeros(x_t.shape());
        for i in 0..n {
            let level = levels[if levels.len() == 1 { 0 } else { i }];
            let row = TensorBuf::matrix(1, self.dim, x_t.row(i).to_vec())?;
            let mu = match labels {
                Some(l) if l[i] < self.len() => {
                    self.component(l[i])?.posterior_mean_at(&level, &row)?
                }
                Some(l) if l[i] > self.len() => {
                    return Err(Error::LabelOutOfRange {
                        label: l[i],
                        classes: self.len(),
                    })
                }
                _ => self.posterior_mean_at(&level, &row)?,
            };
            out.row_mut(i).copy_from_slice(mu.data());
        }
        Ok(out)
    }
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// KL divergence between diagonal Gaussians `N(mean_a, diag var_a) || N(mean_b, diag var_b)`.
pub fn kl_gaussian(mean_a: &[f64], var_a: &[f64], mean_b: &[f64], var_b: &[f64]) -> Result<f64> {
    let d = mean_a.len();
    if [var_a.len(), mean_b.len(), var_b.len()]
        .iter()
        .any(|&l| l != d)
    {
        return Err(Error::ShapeMismatch {
            context: "kl_gaussian".into(),
            expected: vec![d; 4],
            got: vec![mean_a.len(), var_a.len(), mean_b.len(), var_b.len()],
        });
    }
    if var_a
        .iter()
        .chain(var_b)
        .any(|&v| !(v > 0.0) || !v.is_finite())
    {
        return Err(invalid(
            "covariance",
            "diagonal entries must be positive and finite",
        ));
    }
    let mut kl = 0.0;
    for i in 0..d {
        let dm = mean_b[i] - mean_a[i];
        kl += var_a[i] / var_b[i] + dm * dm / var_b[i] - 1.0 + (var_b[i] / var_a[i]).ln();
    }
    Ok(0.5 * kl)
}

/// The two-mode benchmark and its three objectives.
#[derive(Clone, Debug, PartialEq)]
pub struct TwoModeBenchmark {
    pub mixture: GaussianMixture,
    pub full: DmdConfig,
    pub no_regression: DmdConfig,
    pub no_dm: DmdConfig,
}

impl TwoModeBenchmark {
    pub fn runs(&self) -> [(&'static str, &DmdConfig); 3] {
        [
            ("full", &self.full),
            ("no_regression", &self.no_regression),
            ("no_dm", &self.no_dm),
        ]
    }
}

/// Modes at `(+-4, 0)` with std 0.5 and equal weights.
pub fn two_mode_mixture() -> GaussianMixture {
    GaussianMixture::new(vec![
        Component {
            weight: 0.5,
            mean: vec![-4.0, 0.0],
            std: 0.5,
        },
        Component {
            weight: 0.5,
            mean: vec![4.0, 0.0],
            std: 0.5,
        },
    ])
    .expect("static mixture is valid")
}

pub fn two_mode_benchmark() -> TwoModeBenchmark {
    let full = DmdConfig::two_mode();
    let no_regression = DmdConfig {
        lambda_reg: 0.0,
        ..full.clone()
    };
    let no_dm = DmdConfig {
        dm_weight: 0.0,
        ..full.clone()
    };
    TwoModeBenchmark {
        mixture: two_mode_mixture(),
        full,
        no_regression,
        no_dm,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_mixtures() {
        assert!(GaussianMixture::gaussian(vec![0.0], 0.0).is_err());
        let c = |w: f64| Component {
            weight: w,
            mean: vec![0.0],
            std: 1.0,
        };
        assert!(GaussianMixture::new(vec![c(0.5), c(0.4)]).is_err());
        assert!(GaussianMixture::new(vec![]).is_err());
    }

    #[test]
    fn symmetric_score_vanishes_at_origin() {
        let m = two_mode_mixture();
        let s = m
            .score(&TensorBuf::from_rows(&[[0.0, 0.0]]).unwrap())
            .unwrap();
        assert_eq!(s.data(), &[0.0, 0.0]);
    }

    #[test]
    fn single_component_score() {
        let m = GaussianMixture::gaussian(vec![1.0, -2.0], 0.7).unwrap();
        let l = NoiseLevel {
            tau: 0.3,
            alpha: 0.8,
            sigma: 0.6,
        };
        let x = TensorBuf::from_rows(&[[0.3, 0.4]]).unwrap();
        let s = m.score_at(&l, &x).unwrap();
        let v = 0.64 * 0.49 + 0.36;
        assert!((s.data()[0] + (0.3 - 0.8) / v).abs() < 1e-14);
        assert!((s.data()[1] + (0.4 + 1.6) / v).abs() < 1e-14);
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_gaussian(&[0.3], &[2.0], &[0.3], &[2.0]).unwrap(), 0.0);
        assert!((kl_gaussian(&[0.0], &[1.0], &[1.0], &[1.0]).unwrap() - 0.5).abs() < 1e-15);
        let k = kl_gaussian(&[0.0], &[4.0], &[0.0], &[1.0]).unwrap();
        assert!((k - 0.5 * (4.0 - 1.0 - 4f64.ln())).abs() < 1e-15);
        assert!(kl_gaussian(&[0.0], &[0.0], &[0.0], &[1.0]).is_err());
    }

    #[test]
    fn two_mode_shape() {
        let f = two_mode_benchmark();
        assert_eq!(f.mixture.len(), 2);
        assert_eq!(f.full.lambda_reg, 0.25);
        assert_eq!(
            f.no_regression,
            DmdConfig {
                lambda_reg: 0.0,
                ..f.full.clone()
            }
        );
        assert_eq!(
            f.no_dm,
            DmdConfig {
                dm_weight: 0.0,
                ..f.full.clone()
            }
        );
    }

    #[test]
    fn weight_zero_component_never_sampled() {
        use rand::SeedableRng;
        let m = GaussianMixture::new(vec![
            Component {
                weight: 1.0,
                mean: vec![0.0],
                std: 1.0,
            },
            Component {
                weight: 0.0,
                mean: vec![10.0],
                std: 1.0,
            },
        ])
        .unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let (_, labels) = m.sample_labeled(1000, &mut rng);
        assert!(labels.iter().all(|&k| k == 0));
    }
}
