//! Deterministic probability-flow samplers and the paired noise/sample
//! dataset they produce.
//!
//! Integration runs backwards over a uniform grid in continuous time from
//! `tau = 1` to `tau = 0`, starting at `prior_scale * z`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::TensorBuf;
use crate::diffusion::{standard_normal, Denoiser, Guided, MeanPredictor};
use crate::error::{invalid, Error, Result};
use crate::schedule::NoiseSchedule;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Solver {
    Euler,
    Heun,
}

impl Solver {
    fn code(self) -> u8 {
        match self {
            Solver::Euler => 0,
            Solver::Heun => 1,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Solver::Euler),
            1 => Ok(Solver::Heun),
            other => Err(Error::Format(format!("unknown solver code {other}"))),
        }
    }
}

fn velocity<P: MeanPredictor + ?Sized>(
    p: &P,
    schedule: &NoiseSchedule,
    x: &TensorBuf,
    tau: f64,
    labels: Option<&[usize]>,
) -> Result<TensorBuf> {
    let level = schedule.level_at(tau);
    let mu = p.predict_mean(x, &[level], labels)?;
    let (cx, cmu) = schedule.flow_coeffs(tau);
    x.zip_map(&mu, "flow velocity", |x, m| cx * x + cmu * m)
}

/// Integrates the probability-flow ODE from noise `z` to a clean sample.
pub fn sample_flow<P: MeanPredictor + ?Sized>(
    p: &P,
    schedule: &NoiseSchedule,
    z: &TensorBuf,
    solver: Solver,
    steps: usize,
    labels: Option<&[usize]>,
) -> Result<TensorBuf> {
    if steps == 0 {
        return Err(invalid("steps", "need at least one step"));
    }
    let scale = schedule.prior_scale();
    let mut x = z.map(|v| scale * v);
    let h = -1.0 / steps as f64;
    for i in 0..steps {
        let tau = 1.0 - i as f64 / steps as f64;
        let tau_next = 1.0 - (i + 1) as f64 / steps as f64;
        let v = velocity(p, schedule, &x, tau, labels)?;
        let euler = x.zip_map(&v, "euler step", |x, v| x + h * v)?;
        x = match solver {
            Solver::Euler => euler,
            Solver::Heun => {
                let v2 = velocity(p, schedule, &euler, tau_next, labels)?;
                let mut out = x;
                for ((o, &a), &b) in out.data_mut().iter_mut().zip(v.data()).zip(v2.data()) {
                    *o += 0.5 * h * (a + b);
                }
                out
            }
        };
        if x.first_non_finite().is_some() {
            return Err(Error::NonFinite {
                context: "sampler state".into(),
                index: Some(i),
            });
        }
    }
    Ok(x)
}

pub fn euler_sample<P: MeanPredictor + ?Sized>(
    p: &P,
    schedule: &NoiseSchedule,
    z: &TensorBuf,
    steps: usize,
    labels: Option<&[usize]>,
) -> Result<TensorBuf> {
    sample_flow(p, schedule, z, Solver::Euler, steps, labels)
}

pub fn heun_sample<P: MeanPredictor + ?Sized>(
    p: &P,
    schedule: &NoiseSchedule,
    z: &TensorBuf,
    steps: usize,
    labels: Option<&[usize]>,
) -> Result<TensorBuf> {
    sample_flow(p, schedule, z, Solver::Heun, steps, labels)
}

/// Samples the teacher, under guidance scale `omega` when `labels` are given
/// and `omega != 1`.
pub fn sample_teacher(
    teacher: &Denoiser,
    z: &TensorBuf,
    solver: Solver,
    steps: usize,
    labels: Option<&[usize]>,
    omega: f64,
) -> Result<TensorBuf> {
    let schedule = teacher.schedule();
    match labels {
        Some(l) if omega != 1.0 => sample_flow(
            &Guided::new(teacher, omega)?,
            schedule,
            z,
            solver,
            steps,
            Some(l),
        ),
        _ => sample_flow(teacher, schedule, z, solver, steps, labels),
    }
}

/// How a paired dataset was produced.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairMeta {
    pub solver: Solver,
    pub steps: usize,
    pub omega: f64,
    pub teacher_hash: u64,
}

/// Frozen `(z, y[, label])` records, where `y` is the teacher's sample from noise `z`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedDataset {
    meta: PairMeta,
    z: TensorBuf,
    y: TensorBuf,
    labels: Option<Vec<usize>>,
}

const MAGIC: &[u8; 8] = b"DMDPAIRS";
const VERSION: u32 = 1;

impl PairedDataset {
    pub fn meta(&self) -> &PairMeta {
        &self.meta
    }

    pub fn len(&self) -> usize {
        self.z.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.z.cols()
    }

    pub fn z(&self) -> &TensorBuf {
        &self.z
    }

    pub fn y(&self) -> &TensorBuf {
        &self.y
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    /// Rows `idx` as `(z, y, labels)`.
    pub fn batch(&self, idx: &[usize]) -> (TensorBuf, TensorBuf, Option<Vec<usize>>) {
        (
            self.z.gather_rows(idx),
            self.y.gather_rows(idx),
            self.labels
                .as_ref()
                .map(|l| idx.iter().map(|&i| l[i]).collect()),
        )
    }

    /// Re-runs the sampler on every stored `z` and checks `y` bit for bit.
    pub fn verify(&self, teacher: &Denoiser) -> Result<()> {
        let hash = teacher.param_hash();
        if hash != self.meta.teacher_hash {
            return Err(Error::LineageMismatch {
                expected: self.meta.teacher_hash,
                got: hash,
            });
        }
        let y = sample_teacher(
            teacher,
            &self.z,
            self.meta.solver,
            self.meta.steps,
            self.labels(),
            self.meta.omega,
        )?;
        if let Some(i) = y
            .data()
            .iter()
            .zip(self.y.data())
            .position(|(a, b)| a.to_bits() != b.to_bits())
        {
            return Err(Error::Format(format!(
                "record {} does not regenerate",
                i / self.dim()
            )));
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        w.write_all(&(self.dim() as u32).to_le_bytes())?;
        w.write_all(&[self.meta.solver.code()])?;
        w.write_all(&(self.meta.steps as u32).to_le_bytes())?;
        w.write_all(&self.meta.omega.to_le_bytes())?;
        w.write_all(&self.meta.teacher_hash.to_le_bytes())?;
        w.write_all(&[self.labels.is_some() as u8])?;
        for i in 0..self.len() {
            for v in self.z.row(i).iter().chain(self.y.row(i)) {
                w.write_all(&v.to_le_bytes())?;
            }
            if let Some(l) = &self.labels {
                w.write_all(&(l[i] as f64).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        read_exact(r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a paired dataset file".into()));
        }
        let version = u32::from_le_bytes(read_array(r)?);
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported dataset version {version}"
            )));
        }
        let count = u64::from_le_bytes(read_array(r)?) as usize;
        let dim = u32::from_le_bytes(read_array(r)?) as usize;
        let solver = Solver::from_code(read_array::<1, _>(r)?[0])?;
        let steps = u32::from_le_bytes(read_array(r)?) as usize;
        let omega = f64::from_le_bytes(read_array(r)?);
        let teacher_hash = u64::from_le_bytes(read_array(r)?);
        let has_labels = match read_array::<1, _>(r)?[0] {
            0 => false,
            1 => true,
            other => return Err(Error::Format(format!("bad label flag {other}"))),
        };
        if count == 0 || dim == 0 {
            return Err(Error::Format("dataset header declares no records".into()));
        }
        let mut z = Vec::with_capacity(count * dim);
        let mut y = Vec::with_capacity(count * dim);
        let mut labels = has_labels.then(|| Vec::with_capacity(count));
        for _ in 0..count {
            for _ in 0..dim {
                z.push(f64::from_le_bytes(read_array(r)?));
            }
            for _ in 0..dim {
                y.push(f64::from_le_bytes(read_array(r)?));
            }
            if let Some(l) = labels.as_mut() {
                let v = f64::from_le_bytes(read_array(r)?);
                if !(v >= 0.0 && v.fract() == 0.0) {
                    return Err(Error::Format(format!("bad label {v}")));
                }
                l.push(v as usize);
            }
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Format("trailing bytes after last record".into()));
        }
        Ok(Self {
            meta: PairMeta {
                solver,
                steps,
                omega,
                teacher_hash,
            },
            z: TensorBuf::matrix(count, dim, z)?,
            y: TensorBuf::matrix(count, dim, y)?,
            labels,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }

    /// CSV rows `z0..,y0..[,label]` with a header.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let d = self.dim();
        let mut header: Vec<String> = (0..d).map(|j| format!("z{j}")).collect();
        header.extend((0..d).map(|j| format!("y{j}")));
        if self.labels.is_some() {
            header.push("label".into());
        }
        out.write_record(&header).map_err(csv_err)?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self
                .z
                .row(i)
                .iter()
                .chain(self.y.row(i))
                .map(|v| v.to_string())
                .collect();
            if let Some(l) = &self.labels {
                rec.push(l[i].to_string());
            }
            out.write_record(&rec).map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(e.to_string())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("truncated dataset file".into()),
        _ => e.into(),
    })
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    read_exact(r, &mut b)?;
    Ok(b)
}

/// Draws `n` noise vectors and records the teacher's deterministic samples.
pub fn generate_pairs<R: Rng + ?Sized>(
    teacher: &Denoiser,
    n: usize,
    solver: Solver,
    steps: usize,
    rng: &mut R,
    labels: Option<Vec<usize>>,
    omega: f64,
) -> Result<PairedDataset> {
    if n == 0 {
        return Err(Error::EmptyBatch("generate_pairs"));
    }
    if let Some(l) = &labels {
        if l.len() != n {
            return Err(Error::MissingLabel);
        }
    }
    let z = standard_normal(&[n, teacher.spec().dim], rng);
    let y = sample_teacher(teacher, &z, solver, steps, labels.as_deref(), omega)?;
    Ok(PairedDataset {
        meta: PairMeta {
            solver,
            steps,
            omega,
            teacher_hash: teacher.param_hash(),
        },
        z,
        y,
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::ScheduleKind;
    use crate::toyworld::GaussianMixture;

    fn vp() -> NoiseSchedule {
        NoiseSchedule::new(ScheduleKind::Vp, 1000, 0.002, 80.0).unwrap()
    }

    #[test]
    fn single_euler_step_is_explicit_update() {
        let s = vp();
        let target = GaussianMixture::gaussian(vec![1.0], 0.5).unwrap();
        let z = TensorBuf::from_rows(&[[0.7]]).unwrap();
        let x = euler_sample(&target, &s, &z, 1, None).unwrap();
        let l = s.level_at(1.0);
        let mu = target.predict_mean(&z, &[l], None).unwrap().data()[0];
        let (cx, cm) = s.flow_coeffs(1.0);
        assert_eq!(x.data()[0], 0.7 - (cx * 0.7 + cm * mu));
    }

    #[test]
    fn zero_steps_rejected() {
        let target = GaussianMixture::gaussian(vec![0.0], 1.0).unwrap();
        let z = TensorBuf::from_rows(&[[0.1]]).unwrap();
        assert!(heun_sample(&target, &vp(), &z, 0, None).is_err());
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&VERSION.to_le_bytes());
        let err = PairedDataset::read_from(&mut bytes.as_slice()).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "{err}");
        let err = PairedDataset::read_from(&mut &b"NOTPAIRS"[..]).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
    }
}
