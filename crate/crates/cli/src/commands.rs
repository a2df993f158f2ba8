//! Pipeline stages behind the CLI verbs.
//!
//! Every stage reads and writes fixed file names inside one output directory,
//! so a later stage finds its prerequisites without extra flags. Random draws
//! come from ChaCha streams keyed by the run seed and a per-purpose stream id,
//! which keeps stages independent of one another's consumption.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use dmd_core::autodiff::TensorBuf;
use dmd_core::diffusion::standard_normal;
use dmd_core::eval::{
    class_recall, corrupted_tanh_check, default_registry, grad_check_report, scatter_svg,
    score_relative_error, write_check_csv, PlotBounds, REPORT_TOLERANCE,
};
use dmd_core::sampler::sample_teacher;
use dmd_core::{
    dmd_train, evaluate, generate_pairs, mmd_rbf, train_teacher, Denoiser, DmdConfig,
    GaussianMixture, Generator, MetricsReport, PairedDataset,
};
use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, CheckpointRole, Lineage};
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub const TEACHER_CKPT: &str = "teacher.ckpt";
pub const TEACHER_LOSS: &str = "teacher_loss.csv";
pub const PAIRS: &str = "pairs.bin";
pub const GENERATOR_CKPT: &str = "generator.ckpt";
pub const FAKE_CKPT: &str = "fake.ckpt";
pub const DISTILL_LOG: &str = "distill_log.csv";
pub const METRICS: &str = "metrics.csv";
pub const NOISE_FLOOR: &str = "noise_floor.csv";
pub const ABLATION: &str = "ablation.csv";
pub const ABLATION_SVG: &str = "ablation.svg";
pub const GRAD_CHECK: &str = "grad_check.csv";
pub const RESOLVED_CONFIG: &str = "config.toml";

/// Bins at which train-teacher reports the score error against the analytic mixture.
pub const FIDELITY_BINS: [usize; 3] = [100, 500, 900];
const FIDELITY_GRID: usize = 41;

// ChaCha stream ids, one per purpose.
const STREAM_PAIRS: u64 = 10;
const STREAM_SAMPLES: u64 = 11;
const STREAM_REFERENCE: u64 = 12;
const STREAM_FLOOR: u64 = 13;

/// Which model a sampling or evaluation command draws from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Source {
    Generator,
    Teacher,
}

impl Source {
    fn name(self) -> &'static str {
        match self {
            Source::Generator => "generator",
            Source::Teacher => "teacher",
        }
    }
}

/// A loaded configuration bound to its output directory.
#[derive(Clone, Debug)]
pub struct Run {
    pub cfg: RunConfig,
    pub out: PathBuf,
}

impl Run {
    pub fn new(cfg: RunConfig, out: Option<PathBuf>) -> Self {
        let out = out.unwrap_or_else(|| cfg.out_dir.clone());
        Self { cfg, out }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn prepare_out(&self) -> CliResult<()> {
        std::fs::create_dir_all(&self.out).map_err(|e| {
            CliError::Other(format!(
                "cannot create output directory {}: {e}",
                self.out.display()
            ))
        })?;
        std::fs::write(self.path(RESOLVED_CONFIG), self.cfg.to_toml())
            .map_err(|e| write_err(&self.path(RESOLVED_CONFIG), e))
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        r.set_stream(stream);
        r
    }

    fn lineage(&self, teacher_hash: u64) -> Lineage {
        Lineage {
            config_hash: self.cfg.hash(),
            target_hash: self.cfg.target_hash(),
            teacher_hash,
        }
    }

    /// Loads the teacher and rejects one trained for another target,
    /// architecture or schedule.
    pub fn load_teacher(&self) -> CliResult<Denoiser> {
        let path = self.path(TEACHER_CKPT);
        if !path.exists() {
            return Err(CliError::missing(
                &path,
                "teacher checkpoint (run train-teacher first)",
            ));
        }
        let ckpt = Checkpoint::load(&path).map_err(|e| CliError::artifact(&path, e))?;
        if ckpt.meta.role != CheckpointRole::Teacher {
            return Err(CliError::artifact(
                &path,
                format!("holds a {:?} checkpoint, not a teacher", ckpt.meta.role),
            ));
        }
        if ckpt.meta.target_hash != self.cfg.target_hash() {
            return Err(CliError::artifact(
                &path,
                "stale teacher: trained on a different target mixture",
            ));
        }
        let teacher = ckpt
            .to_denoiser()
            .map_err(|e| CliError::artifact(&path, e))?;
        if teacher.spec() != &self.cfg.denoiser || teacher.schedule().spec() != self.cfg.schedule {
            return Err(CliError::artifact(
                &path,
                "stale teacher: architecture or schedule differs from the config",
            ));
        }
        if ckpt.meta.teacher_hash != teacher.param_hash() {
            return Err(CliError::artifact(
                &path,
                "parameter hash does not match its metadata",
            ));
        }
        Ok(teacher)
    }

    fn load_pairs(&self, teacher: &Denoiser) -> CliResult<PairedDataset> {
        let path = self.path(PAIRS);
        if !path.exists() {
            return Err(CliError::missing(
                &path,
                "paired dataset (run gen-pairs first)",
            ));
        }
        let pairs = PairedDataset::load(&path).map_err(|e| CliError::artifact(&path, e))?;
        pairs
            .verify(teacher)
            .map_err(|e| CliError::artifact(&path, format!("stale pairs: {e}")))?;
        Ok(pairs)
    }

    /// Loads the generator and checks it was distilled from `teacher`.
    fn load_generator(&self, teacher: &Denoiser) -> CliResult<Generator> {
        let path = self.path(GENERATOR_CKPT);
        if !path.exists() {
            return Err(CliError::missing(
                &path,
                "generator checkpoint (run distill first)",
            ));
        }
        let ckpt = Checkpoint::load(&path).map_err(|e| CliError::artifact(&path, e))?;
        if ckpt.meta.teacher_hash != teacher.param_hash() {
            return Err(CliError::artifact(
                &path,
                format!(
                    "stale generator: distilled from teacher {:016x}, current teacher is {:016x}",
                    ckpt.meta.teacher_hash,
                    teacher.param_hash()
                ),
            ));
        }
        ckpt.to_generator()
            .map_err(|e| CliError::artifact(&path, e))
    }

    /// Balanced labels `0, 1, .., k-1, 0, ..` for conditional models.
    fn labels(&self, classes: Option<usize>, n: usize) -> Option<Vec<usize>> {
        classes.map(|k| (0..n).map(|i| i % k).collect())
    }

    fn teacher_samples(
        &self,
        teacher: &Denoiser,
        n: usize,
        stream: u64,
    ) -> CliResult<(TensorBuf, Option<Vec<usize>>)> {
        let z = standard_normal(&[n, teacher.spec().dim], &mut self.rng(stream));
        let labels = self.labels(teacher.spec().classes, n);
        let p = &self.cfg.pairs;
        let x = sample_teacher(teacher, &z, p.solver, p.steps, labels.as_deref(), p.omega)?;
        Ok((x, labels))
    }

    fn generator_samples(
        &self,
        gen: &Generator,
        n: usize,
    ) -> CliResult<(TensorBuf, Option<Vec<usize>>)> {
        let z = standard_normal(&[n, gen.dim()], &mut self.rng(STREAM_SAMPLES));
        let labels = self.labels(gen.classes(), n);
        Ok((gen.forward(&z, labels.as_deref())?, labels))
    }

    fn samples(
        &self,
        teacher: &Denoiser,
        from: Source,
        n: usize,
    ) -> CliResult<(TensorBuf, Option<Vec<usize>>)> {
        match from {
            Source::Teacher => self.teacher_samples(teacher, n, STREAM_SAMPLES),
            Source::Generator => self.generator_samples(&self.load_generator(teacher)?, n),
        }
    }
}

fn write_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Other(format!("cannot write {}: {e}", path.display()))
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| write_err(path, e))
}

fn csv_writer(path: &Path) -> CliResult<csv::Writer<BufWriter<File>>> {
    Ok(csv::Writer::from_writer(create(path)?))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> CliError + '_ {
    move |e| write_err(path, e)
}

/// Trains the teacher, writes its checkpoint and loss log, and returns the
/// score error against the analytic target at [`FIDELITY_BINS`].
pub fn train_teacher_cmd(run: &Run) -> CliResult<Vec<(usize, f64)>> {
    run.prepare_out()?;
    let cfg = &run.cfg;
    let schedule = cfg.schedule.build()?;
    let tcfg = cfg.teacher_config();
    let (teacher, log) = train_teacher(&cfg.target, cfg.denoiser.clone(), schedule, &tcfg)?;

    let loss_path = run.path(TEACHER_LOSS);
    let mut w = csv_writer(&loss_path)?;
    w.write_record(["step", "loss"])
        .map_err(csv_err(&loss_path))?;
    for (step, loss) in &log {
        w.write_record([step.to_string(), loss.to_string()])
            .map_err(csv_err(&loss_path))?;
    }
    w.flush().map_err(|e| write_err(&loss_path, e))?;

    let ckpt = Checkpoint::from_denoiser(
        &teacher,
        CheckpointRole::Teacher,
        tcfg.steps,
        run.lineage(teacher.param_hash()),
    );
    let path = run.path(TEACHER_CKPT);
    ckpt.save(&path).map_err(|e| write_err(&path, e))?;

    let mut errors = Vec::new();
    if cfg.denoiser.classes.is_none() {
        for bin in FIDELITY_BINS
            .into_iter()
            .filter(|&b| b < teacher.schedule().bins())
        {
            let e = score_relative_error(
                &teacher,
                &cfg.target,
                teacher.schedule(),
                bin,
                FIDELITY_GRID,
            )?;
            println!("score relative L2 error at bin {bin}: {e:.4}");
            errors.push((bin, e));
        }
    }
    info!("teacher written to {}", path.display());
    Ok(errors)
}

pub fn gen_pairs_cmd(run: &Run) -> CliResult<PairedDataset> {
    run.prepare_out()?;
    let teacher = run.load_teacher()?;
    let p = &run.cfg.pairs;
    let labels = run.labels(teacher.spec().classes, p.count);
    let pairs = generate_pairs(
        &teacher,
        p.count,
        p.solver,
        p.steps,
        &mut run.rng(STREAM_PAIRS),
        labels,
        p.omega,
    )?;
    let path = run.path(PAIRS);
    pairs.save(&path).map_err(|e| write_err(&path, e))?;
    println!("wrote {} pairs to {}", pairs.len(), path.display());
    Ok(pairs)
}

fn pairs_if_needed(
    run: &Run,
    teacher: &Denoiser,
    cfg: &DmdConfig,
) -> CliResult<Option<PairedDataset>> {
    if cfg.lambda_reg > 0.0 {
        run.load_pairs(teacher).map(Some)
    } else {
        Ok(None)
    }
}

pub fn distill_cmd(run: &Run) -> CliResult<()> {
    run.prepare_out()?;
    let teacher = run.load_teacher()?;
    let cfg = run.cfg.distill_config();
    let pairs = pairs_if_needed(run, &teacher, &cfg)?;
    let result = dmd_train(&teacher, pairs.as_ref(), &cfg)?;
    let lineage = run.lineage(teacher.param_hash());

    let gen_path = run.path(GENERATOR_CKPT);
    Checkpoint::from_generator(&result.generator, cfg.iterations, lineage)
        .save(&gen_path)
        .map_err(|e| write_err(&gen_path, e))?;
    let fake_path = run.path(FAKE_CKPT);
    Checkpoint::from_denoiser(&result.fake, CheckpointRole::Fake, cfg.iterations, lineage)
        .save(&fake_path)
        .map_err(|e| write_err(&fake_path, e))?;
    let log_path = run.path(DISTILL_LOG);
    dmd_core::dmd::write_log_csv(&result.log, create(&log_path)?)?;
    if let Some(last) = result.log.last() {
        println!(
            "distilled {} iterations: surrogate {:.4}, regression {:.4}, fake loss {:.4}",
            cfg.iterations, last.kl_surrogate, last.reg_loss, last.fake_denoise_loss
        );
    }
    Ok(())
}

/// Writes `n` samples as CSV with one point per line and returns the file path.
pub fn sample_cmd(run: &Run, from: Source, n: Option<usize>) -> CliResult<PathBuf> {
    let n = n.unwrap_or(run.cfg.sample.n);
    if n == 0 {
        return Err(CliError::Config("--n must be positive".into()));
    }
    run.prepare_out()?;
    let teacher = run.load_teacher()?;
    let (x, labels) = run.samples(&teacher, from, n)?;
    let path = run.path(&format!("samples_{}.csv", from.name()));
    write_points(&path, &x, labels.as_deref())?;
    println!("wrote {n} {} samples to {}", from.name(), path.display());
    Ok(path)
}

fn write_points(path: &Path, x: &TensorBuf, labels: Option<&[usize]>) -> CliResult<()> {
    let mut w = csv_writer(path)?;
    let mut header: Vec<String> = (0..x.cols()).map(|j| format!("x{j}")).collect();
    if labels.is_some() {
        header.push("label".into());
    }
    w.write_record(&header).map_err(csv_err(path))?;
    for (i, row) in x.iter_rows().enumerate() {
        let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        if let Some(l) = labels {
            rec.push(l[i].to_string());
        }
        w.write_record(&rec).map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| write_err(path, e))
}

/// Same-distribution MMD values: fresh teacher sample sets against one reference.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseFloor {
    pub mmds: Vec<f64>,
}

impl NoiseFloor {
    /// Nearest-rank 95th percentile.
    pub fn p95(&self) -> f64 {
        percentile(&self.mmds, 0.95)
    }
}

pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len().max(1));
    v.get(rank - 1).copied().unwrap_or(f64::NAN)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOutcome {
    pub report: MetricsReport,
    pub floor: NoiseFloor,
    /// Class recall and leakage, for conditional models.
    pub classes: Option<(f64, f64)>,
}

fn noise_floor(run: &Run, teacher: &Denoiser, reference: &TensorBuf) -> CliResult<NoiseFloor> {
    let mut rng = run.rng(STREAM_FLOOR);
    let (n, dim) = (run.cfg.eval.n_reference, teacher.spec().dim);
    let labels = run.labels(teacher.spec().classes, n);
    let p = &run.cfg.pairs;
    let mut mmds = Vec::with_capacity(run.cfg.eval.floor_resamples);
    for _ in 0..run.cfg.eval.floor_resamples {
        let z = standard_normal(&[n, dim], &mut rng);
        let x = sample_teacher(teacher, &z, p.solver, p.steps, labels.as_deref(), p.omega)?;
        mmds.push(mmd_rbf(&x, reference, run.cfg.eval.bandwidth)?);
    }
    Ok(NoiseFloor { mmds })
}

/// Scores samples from `from` against a teacher reference set and writes
/// `metrics.csv` and `noise_floor.csv`.
pub fn eval_cmd(run: &Run, from: Source) -> CliResult<EvalOutcome> {
    run.prepare_out()?;
    let teacher = run.load_teacher()?;
    let (x, labels) = run.samples(&teacher, from, run.cfg.sample.n)?;
    let (reference, _) =
        run.teacher_samples(&teacher, run.cfg.eval.n_reference, STREAM_REFERENCE)?;
    let report = evaluate(
        &x,
        &reference,
        &run.cfg.target,
        &run.cfg.eval.metrics(),
        run.cfg.seed,
    )?;
    let classes = match &labels {
        Some(l) => {
            let c = class_recall(
                &x,
                l,
                &run.cfg.target,
                run.cfg.eval.radius_in_stds,
                run.cfg.eval.min_share,
            )?;
            Some((c.recall, c.leakage))
        }
        None => None,
    };
    let floor = noise_floor(run, &teacher, &reference)?;

    let floor_path = run.path(NOISE_FLOOR);
    let mut w = csv_writer(&floor_path)?;
    w.write_record(["resample", "mmd"])
        .map_err(csv_err(&floor_path))?;
    for (i, m) in floor.mmds.iter().enumerate() {
        w.write_record([i.to_string(), m.to_string()])
            .map_err(csv_err(&floor_path))?;
    }
    w.flush().map_err(|e| write_err(&floor_path, e))?;

    let path = run.path(METRICS);
    let mut w = csv_writer(&path)?;
    let mut header = vec!["source"];
    header.extend(MetricsReport::CSV_HEADER);
    header.extend(["floor_p95", "class_recall", "class_leakage"]);
    w.write_record(&header).map_err(csv_err(&path))?;
    let mut rec = vec![from.name().to_string()];
    rec.extend(report.csv_record());
    rec.push(floor.p95().to_string());
    match classes {
        Some((r, l)) => rec.extend([r.to_string(), l.to_string()]),
        None => rec.extend([String::new(), String::new()]),
    }
    w.write_record(&rec).map_err(csv_err(&path))?;
    w.flush().map_err(|e| write_err(&path, e))?;

    println!(
        "{}: mmd {:.4} (noise floor p95 {:.4}), sliced W {:.4}, mode recall {}",
        from.name(),
        report.mmd,
        floor.p95(),
        report.sliced_wasserstein,
        report.mode_recall
    );
    Ok(EvalOutcome {
        report,
        floor,
        classes,
    })
}

/// One row of the ablation table.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub run: &'static str,
    pub report: MetricsReport,
}

/// The distillation objective with each of its two terms removed in turn.
pub fn ablation_configs(full: &DmdConfig) -> [(&'static str, DmdConfig); 3] {
    [
        ("full", full.clone()),
        (
            "no_regression",
            DmdConfig {
                lambda_reg: 0.0,
                ..full.clone()
            },
        ),
        (
            "no_dm",
            DmdConfig {
                dm_weight: 0.0,
                ..full.clone()
            },
        ),
    ]
}

/// Distills the full objective and both ablations from the same teacher and
/// pairs, then writes `ablation.csv` and a side-by-side scatter plot.
pub fn ablate_cmd(run: &Run) -> CliResult<Vec<AblationRow>> {
    run.prepare_out()?;
    let teacher = run.load_teacher()?;
    let full = run.cfg.distill_config();
    let pairs = pairs_if_needed(run, &teacher, &full)?;
    let (reference, _) =
        run.teacher_samples(&teacher, run.cfg.eval.n_reference, STREAM_REFERENCE)?;
    let metrics = run.cfg.eval.metrics();

    let mut rows = Vec::new();
    let mut clouds = Vec::new();
    for (name, cfg) in ablation_configs(&full) {
        let pairs = if cfg.lambda_reg > 0.0 {
            pairs.as_ref()
        } else {
            None
        };
        let result = dmd_train(&teacher, pairs, &cfg)?;
        let (x, _) = run.generator_samples(&result.generator, run.cfg.sample.n)?;
        let report = evaluate(&x, &reference, &run.cfg.target, &metrics, run.cfg.seed)?;
        println!(
            "{name}: mmd {:.4}, mode recall {}, shares {:?}",
            report.mmd, report.mode_recall, report.mode_shares
        );
        rows.push(AblationRow { run: name, report });
        clouds.push((name, x));
    }

    let path = run.path(ABLATION);
    let mut w = csv_writer(&path)?;
    let mut header = vec!["run"];
    header.extend(MetricsReport::CSV_HEADER);
    w.write_record(&header).map_err(csv_err(&path))?;
    for r in &rows {
        let mut rec = vec![r.run.to_string()];
        rec.extend(r.report.csv_record());
        w.write_record(&rec).map_err(csv_err(&path))?;
    }
    w.flush().map_err(|e| write_err(&path, e))?;

    if run.cfg.target.dim() >= 2 {
        let mut panels: Vec<(&str, &TensorBuf)> = vec![("teacher", &reference)];
        panels.extend(clouds.iter().map(|(n, x)| (*n, x)));
        let svg = scatter_svg(&panels, plot_bounds(&run.cfg.target))?;
        let svg_path = run.path(ABLATION_SVG);
        std::fs::write(&svg_path, svg).map_err(|e| write_err(&svg_path, e))?;
    } else {
        warn!("target is 1-D; skipping the scatter plot");
    }
    Ok(rows)
}

/// Square window around the first two coordinates of every mode.
pub fn plot_bounds(mix: &GaussianMixture) -> PlotBounds {
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for c in mix.components() {
        for j in 0..2 {
            lo[j] = lo[j].min(c.mean[j] - 4.0 * c.std);
            hi[j] = hi[j].max(c.mean[j] + 4.0 * c.std);
        }
    }
    let half = (0..2).map(|j| 0.5 * (hi[j] - lo[j])).fold(0.0, f64::max);
    let mid = [0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1])];
    PlotBounds {
        x_min: mid[0] - half,
        x_max: mid[0] + half,
        y_min: mid[1] - half,
        y_max: mid[1] + half,
    }
}

/// Runs every registered gradient check; any failure is a numeric error.
/// `corrupt` adds a deliberately wrong rule to exercise the failure path.
pub fn grad_check_cmd(run: &Run, corrupt: bool) -> CliResult<()> {
    run.prepare_out()?;
    let mut checks = default_registry(run.cfg.seed)?;
    if corrupt {
        checks.push(corrupted_tanh_check(run.cfg.seed));
    }
    let results = grad_check_report(&checks, REPORT_TOLERANCE)?;
    let path = run.path(GRAD_CHECK);
    write_check_csv(&results, create(&path)?)?;
    let failed: Vec<&str> = results
        .iter()
        .filter(|r| !r.passed)
        .map(|r| r.name.as_str())
        .collect();
    let worst = results.iter().map(|r| r.rel_error).fold(0.0, f64::max);
    println!("{} checks, worst relative error {worst:.2e}", results.len());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Numeric(format!(
            "gradient checks failed: {}",
            failed.join(", ")
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank_percentile() {
        let v: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(percentile(&v, 0.95), 19.0);
        assert_eq!(percentile(&v, 1.0), 20.0);
        assert_eq!(percentile(&[3.0], 0.95), 3.0);
    }

    #[test]
    fn ablation_removes_one_term_each() {
        let [full, noreg, nodm] = ablation_configs(&DmdConfig::two_mode());
        assert_eq!(
            (full.0, noreg.0, nodm.0),
            ("full", "no_regression", "no_dm")
        );
        assert!(full.1.lambda_reg > 0.0 && full.1.dm_weight > 0.0);
        assert_eq!(noreg.1.lambda_reg, 0.0);
        assert_eq!(nodm.1.dm_weight, 0.0);
    }
}
