use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dmd_cli::commands::{
    ablate_cmd, eval_cmd, gen_pairs_cmd, sample_cmd, train_teacher_cmd, Source, ABLATION,
    GENERATOR_CKPT, PAIRS, TEACHER_CKPT,
};
use dmd_cli::{Checkpoint, CliError, Run, RunConfig};
use dmd_core::diffusion::standard_normal;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The benchmark shrunk so every stage finishes in seconds.
fn small_config() -> RunConfig {
    let mut cfg = RunConfig::two_mode();
    cfg.seed = 5;
    cfg.teacher.steps = 200;
    cfg.pairs.count = 64;
    cfg.distill.iterations = 30;
    cfg.sample.n = 128;
    cfg.eval.n_reference = 128;
    cfg.eval.floor_resamples = 20;
    cfg
}

fn write_config(dir: &Path, cfg: &RunConfig) -> PathBuf {
    let path = dir.join("run.toml");
    std::fs::write(&path, cfg.to_toml()).unwrap();
    path
}

fn dmd(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dmd"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .env("DMD_LOG_LEVEL", "error")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn config_round_trips_through_toml() {
    for cfg in [small_config(), RunConfig::two_class(3.0)] {
        assert_eq!(RunConfig::parse(&cfg.to_toml()).unwrap(), cfg);
    }
}

#[test]
fn unknown_keys_are_rejected() {
    let text = format!("{}\nlearning_rate = 0.1\n", small_config().to_toml());
    assert!(matches!(RunConfig::parse(&text), Err(CliError::Config(_))));
    let nested = small_config()
        .to_toml()
        .replace("[teacher]", "[teacher]\nwarmup = 3");
    assert!(matches!(
        RunConfig::parse(&nested),
        Err(CliError::Config(_))
    ));
}

#[test]
fn shipped_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let two_mode = RunConfig::load(&root.join("two_mode.toml")).unwrap();
    assert_eq!(two_mode, RunConfig::two_mode());
    let two_class = RunConfig::load(&root.join("two_class.toml")).unwrap();
    assert_eq!(two_class.denoiser.classes, Some(two_class.target.len()));
    RunConfig::load(&root.join("smoke.toml")).unwrap();
}

#[test]
fn missing_required_field_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    std::fs::write(&config, "[teacher]\nsteps = 10\n").unwrap();
    let o = dmd(&["train-teacher"], &config, &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("seed"), "{}", stderr(&o));
}

#[test]
fn invalid_value_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg.denoiser.dim = 3;
    let config = write_config(dir.path(), &cfg);
    let o = dmd(&["train-teacher"], &config, &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("denoiser.dim"), "{}", stderr(&o));
}

#[test]
fn missing_prerequisite_names_the_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &small_config());
    let out = dir.path().join("out");
    for verb in ["gen-pairs", "distill", "eval"] {
        let o = dmd(&[verb], &config, &out);
        assert_eq!(o.status.code(), Some(3), "{verb}: {}", stderr(&o));
        assert!(stderr(&o).contains(TEACHER_CKPT), "{verb}: {}", stderr(&o));
    }
}

#[test]
fn pipeline_detects_stale_artifacts_and_samples() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config();
    let config = write_config(dir.path(), &cfg);
    let out = dir.path().join("out");
    for verb in ["train-teacher", "gen-pairs", "distill"] {
        let o = dmd(&[verb], &config, &out);
        assert!(o.status.success(), "{verb}: {}", stderr(&o));
    }
    for name in [TEACHER_CKPT, PAIRS, GENERATOR_CKPT] {
        assert!(out.join(name).exists(), "{name}");
    }

    let o = dmd(&["sample", "--n", "1"], &config, &out);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(out.join("samples_generator.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2, "{text}");
    assert_eq!(lines[1].split(',').count(), 2);
    assert!(lines[1]
        .split(',')
        .all(|v| v.parse::<f64>().unwrap().is_finite()));

    // Retraining the teacher under another seed leaves the generator stale.
    let o = dmd(&["train-teacher", "--seed", "6"], &config, &out);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = dmd(&["sample"], &config, &out);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("stale generator"), "{}", stderr(&o));

    // A teacher trained on a different target is stale for this config.
    let mut moved = cfg.clone();
    moved.target = dmd_core::GaussianMixture::gaussian(vec![1.0, 1.0], 0.5).unwrap();
    let moved_config = dir.path().join("moved.toml");
    std::fs::write(&moved_config, moved.to_toml()).unwrap();
    let o = dmd(&["gen-pairs"], &moved_config, &out);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("stale teacher"), "{}", stderr(&o));
}

#[test]
fn same_config_trains_identical_teachers() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &small_config());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = dmd(&["train-teacher"], &config, out);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_eq!(
        std::fs::read(a.join(TEACHER_CKPT)).unwrap(),
        std::fs::read(b.join(TEACHER_CKPT)).unwrap()
    );
}

#[test]
fn reloaded_teacher_denoises_identically() {
    let dir = tempfile::tempdir().unwrap();
    let run = Run::new(small_config(), Some(dir.path().to_path_buf()));
    train_teacher_cmd(&run).unwrap();
    let a = run.load_teacher().unwrap();
    let b = Checkpoint::load(&run.path(TEACHER_CKPT))
        .unwrap()
        .to_denoiser()
        .unwrap();
    let x = standard_normal(&[16, 2], &mut ChaCha8Rng::seed_from_u64(1));
    for bin in [20, 300, 700, 980] {
        assert_eq!(
            a.denoise(&x, bin, None).unwrap(),
            b.denoise(&x, bin, None).unwrap()
        );
    }
    assert_eq!(a.param_hash(), b.param_hash());
}

#[test]
fn teacher_against_itself_sits_within_the_noise_floor() {
    let dir = tempfile::tempdir().unwrap();
    let run = Run::new(small_config(), Some(dir.path().to_path_buf()));
    train_teacher_cmd(&run).unwrap();
    let outcome = eval_cmd(&run, Source::Teacher).unwrap();
    let max = outcome.floor.mmds.iter().copied().fold(0.0, f64::max);
    assert!(
        outcome.report.mmd <= max,
        "mmd {} vs floor max {max}",
        outcome.report.mmd
    );
    assert!(outcome.classes.is_none());
    sample_cmd(&run, Source::Teacher, Some(3)).unwrap();
}

#[test]
fn ablation_writes_three_rows() {
    let dir = tempfile::tempdir().unwrap();
    let run = Run::new(small_config(), Some(dir.path().to_path_buf()));
    train_teacher_cmd(&run).unwrap();
    gen_pairs_cmd(&run).unwrap();
    let rows = ablate_cmd(&run).unwrap();
    assert_eq!(rows.len(), 3);
    let text = std::fs::read_to_string(run.path(ABLATION)).unwrap();
    assert_eq!(text.lines().count(), 4, "{text}");
}

#[test]
fn corrupted_gradient_check_exits_with_numeric_code() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &small_config());
    let out = dir.path().join("out");
    let ok = dmd(&["grad-check"], &config, &out);
    assert!(ok.status.success(), "{}", stderr(&ok));
    let bad = dmd(&["grad-check", "--corrupt"], &config, &out);
    assert_eq!(bad.status.code(), Some(4), "{}", stderr(&bad));
}
