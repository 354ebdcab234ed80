//! End-to-end stage chaining on a tiny configuration: artifacts, manifest
//! hashes, phase enforcement, determinism, and the ablation sweep.

use toklen_core::config::PipelineConfig;
use toklen_core::encoder::{Checkpoint, Phase};
use toklen_core::pipeline::{
    distill, expand, file_sha256, generate, make_teacher, run_full, run_sweep, sweep_csv, SweepAxis, SweepData,
    SWEEP_HEADER,
};
use toklen_core::Error;

const TINY: &str = r#"
seed = 5

[data]
count = 24
eval_count = 8

[text]
d_model = 8
n_heads = 2
n_layers = 1
projection_dim = 8

[image]
d_model = 8
n_heads = 2
n_layers = 1
projection_dim = 8

[teacher]
epochs = 1
batch_size = 8

[distill]
epochs = 1
batch_size = 8

[expand]
t_g = 154
batch_size = 8

[eval]
ks = [1, 5]
"#;

fn tiny() -> PipelineConfig {
    PipelineConfig::from_toml(TINY).unwrap()
}

#[test]
fn full_run_writes_hashed_artifacts_deterministically() {
    let config = tiny();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let first = run_full(&config, a.path()).unwrap();
    let second = run_full(&config, b.path()).unwrap();
    assert_eq!(first.artifacts.len(), 9);
    for (path, hash) in &first.artifacts {
        assert_eq!(&file_sha256(path).unwrap(), hash);
    }
    assert_eq!(first.hashes_by_name(), second.hashes_by_name());
    assert!(first.finished_unix >= first.started_unix);

    let expanded = Checkpoint::load(a.path().join("expanded.ckpt")).unwrap();
    assert_eq!(expanded.phase, Phase::Expanded);
    assert_eq!(expanded.model.text_config.context, 154);
    let csv = std::fs::read_to_string(a.path().join("retrieval.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 2);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 5);
}

#[test]
fn stages_enforce_phases() {
    let config = tiny();
    let (train, _) = generate(&config).unwrap();
    let (teacher, history) = make_teacher(&config, &train).unwrap();
    assert_eq!(history.len(), 3);
    let err = expand(&config, &teacher, &train, false).unwrap_err();
    assert!(matches!(err, Error::PhaseMismatch { .. }), "{err}");
    let (student, _) = distill(&config, &teacher, &train).unwrap();
    assert!(matches!(distill(&config, &student, &train), Err(Error::PhaseMismatch { .. })));

    // Forcing lets the absolute baseline expand its teacher; it keeps its window.
    let mut baseline = config.clone();
    baseline.expand.scheme = toklen_core::posenc::SchemeKind::Absolute;
    let (expanded, _) = expand(&baseline, &teacher, &train, true).unwrap();
    assert_eq!(expanded.model.text_config.context, 77);
}

#[test]
fn sweep_emits_one_row_per_metric() {
    let config = tiny();
    let (train, held_out) = generate(&config).unwrap();
    let (teacher, _) = make_teacher(&config, &train).unwrap();
    let data = SweepData {
        distill: &train,
        expand: &train,
        eval: &held_out,
    };
    let values = vec!["cosine".to_string(), "mse".to_string()];
    let rows = run_sweep(&config, &teacher, &data, SweepAxis::DistillLoss, &values).unwrap();
    assert_eq!(rows.len(), 2 * 3);
    assert!(rows.iter().all(|r| r.axis == SweepAxis::DistillLoss));
    let csv = sweep_csv(&rows);
    assert!(csv.starts_with(SWEEP_HEADER));
    assert_eq!(csv.lines().count(), 7);

    let schemes = SweepAxis::Scheme.default_values();
    let rows = run_sweep(&config, &teacher, &data, SweepAxis::Scheme, &schemes).unwrap();
    assert_eq!(rows.len(), 4 * 2);
    assert!(run_sweep(&config, &teacher, &data, SweepAxis::Lambda, &["2".to_string()]).is_err());
    assert!("bogus".parse::<SweepAxis>().is_err());
}
