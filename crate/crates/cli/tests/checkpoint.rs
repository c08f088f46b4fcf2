use std::fs;
use std::path::Path;

use dualflow::commands::{self, CHECKPOINT_DIR};
use dualflow::{exit_code, Checkpoint, RunConfig};

fn quick(objective: &str) -> RunConfig {
    RunConfig::from_toml(&format!(
        r#"
objective = "{objective}"
seed = 5
[model]
hidden = [8]
[train]
steps = 5
batch_size = 16
[data]
source = "telemetry"
length = 400
channels = 2
window = 3
"#
    ))
    .unwrap()
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    out.sort();
    out
}

/// Parameter values only: gradients are not part of a checkpoint.
fn values(ck: &Checkpoint) -> Vec<(String, Vec<u64>)> {
    let mut out = Vec::new();
    let fields = std::iter::once(("theta", &ck.theta)).chain(ck.lambda.iter().map(|l| ("lambda", l)));
    for (prefix, f) in fields {
        for (n, v) in f.named_parameters() {
            out.push((format!("{prefix}.{n}"), v.value().data().iter().map(|x| x.to_bits()).collect()));
        }
    }
    for (n, v) in [("prior.mean", &ck.prior.mean), ("prior.log_std", &ck.prior.log_std)] {
        out.push((n.into(), v.value().data().iter().map(|x| x.to_bits()).collect()));
    }
    out
}

#[test]
fn save_load_save_is_byte_identical() {
    for objective in ["dfm", "icfm", "mle"] {
        let tmp = tempfile::tempdir().unwrap();
        let run = commands::run_train(&quick(objective), tmp.path(), |_, _| {}).unwrap();
        let first = tmp.path().join(CHECKPOINT_DIR);
        let loaded = Checkpoint::load(&first).unwrap();
        assert_eq!(values(&loaded), values(&run.checkpoint));
        assert_eq!(loaded.config, run.checkpoint.config);
        assert_eq!(loaded.rng, run.checkpoint.rng);
        let second = tmp.path().join("again");
        loaded.save(&second).unwrap();
        assert_eq!(files(&first), files(&second), "{objective}");
    }
}

#[test]
fn dual_checkpoints_carry_the_reverse_model() {
    let tmp = tempfile::tempdir().unwrap();
    commands::run_train(&quick("dfm"), tmp.path(), |_, _| {}).unwrap();
    let ck = Checkpoint::load(&tmp.path().join(CHECKPOINT_DIR)).unwrap();
    assert!(ck.lambda.is_some());
    let names: Vec<String> = files(&tmp.path().join(CHECKPOINT_DIR)).into_iter().map(|f| f.0).collect();
    assert!(names.iter().any(|n| n.starts_with("lambda.")));

    let tmp = tempfile::tempdir().unwrap();
    commands::run_train(&quick("icfm"), tmp.path(), |_, _| {}).unwrap();
    let ck = Checkpoint::load(&tmp.path().join(CHECKPOINT_DIR)).unwrap();
    assert!(ck.lambda.is_none());
}

#[test]
fn shape_mismatch_names_the_tensor() {
    let tmp = tempfile::tempdir().unwrap();
    commands::run_train(&quick("icfm"), tmp.path(), |_, _| {}).unwrap();
    let dir = tmp.path().join(CHECKPOINT_DIR);
    let manifest = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest).unwrap();
    // Claim a wider hidden layer than the weights on disk hold.
    fs::write(&manifest, text.replacen("\"hidden\": [\n        8\n      ]", "\"hidden\": [\n        9\n      ]", 1))
        .unwrap();
    let err = Checkpoint::load(&dir).unwrap_err();
    let msg = err.to_string();
    assert!(
        msg.contains("checkpoint tensor theta.layers.0.weight has shape [14, 8] but the model expects [14, 9]"),
        "{msg}"
    );
    assert_eq!(exit_code(&err), 3);
}

#[test]
fn truncated_blob_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    commands::run_train(&quick("icfm"), tmp.path(), |_, _| {}).unwrap();
    let dir = tmp.path().join(CHECKPOINT_DIR);
    let blob = dir.join("prior.mean.bin");
    let bytes = fs::read(&blob).unwrap();
    fs::write(&blob, &bytes[..bytes.len() - 8]).unwrap();
    let err = Checkpoint::load(&dir).unwrap_err();
    assert_eq!(exit_code(&err), 3, "{err}");
}

#[test]
fn unknown_format_version_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    commands::run_train(&quick("icfm"), tmp.path(), |_, _| {}).unwrap();
    let dir = tmp.path().join(CHECKPOINT_DIR);
    let manifest = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest).unwrap();
    fs::write(&manifest, text.replacen("\"format_version\": 1", "\"format_version\": 2", 1)).unwrap();
    let msg = Checkpoint::load(&dir).unwrap_err().to_string();
    assert!(msg.contains("version 2"), "{msg}");
}
