//! End-to-end runner tests on small synthetic datasets: artifact layout,
//! byte-level determinism, the resolved-config closure property, checkpoint
//! loading across run kinds, and embedding export.

use std::path::{Path, PathBuf};
use tourbillon_core::config::RunConfig;
use tourbillon_core::experiment::{export_embeddings, run_config};
use tourbillon_core::{MetricsLog, Rng};

/// Write a small IDX dataset (8x8 images) the loaders accept.
fn write_idx_fixture(dir: &Path, n: usize, seed: u64) -> (PathBuf, PathBuf) {
    let mut rng = Rng::new(seed);
    let img_path = dir.join(format!("imgs-{seed}"));
    let lbl_path = dir.join(format!("lbls-{seed}"));
    let mut img = Vec::new();
    img.extend_from_slice(&0x0000_0803u32.to_be_bytes());
    img.extend_from_slice(&(n as u32).to_be_bytes());
    img.extend_from_slice(&8u32.to_be_bytes());
    img.extend_from_slice(&8u32.to_be_bytes());
    for _ in 0..n * 64 {
        img.push((rng.next_u64() % 256) as u8);
    }
    std::fs::write(&img_path, img).unwrap();
    let mut lbl = Vec::new();
    lbl.extend_from_slice(&0x0000_0801u32.to_be_bytes());
    lbl.extend_from_slice(&(n as u32).to_be_bytes());
    for _ in 0..n {
        lbl.push((rng.next_u64() % 10) as u8);
    }
    std::fs::write(&lbl_path, lbl).unwrap();
    (img_path, lbl_path)
}

fn cae_config(dir: &Path, out: &str, epochs: usize, seed: u64) -> RunConfig {
    let (img, lbl) = write_idx_fixture(dir, 48, 1000 + seed);
    let (timg, tlbl) = write_idx_fixture(dir, 16, 2000 + seed);
    let toml = format!(
        r#"
kind = "train-cae"
seed = {seed}
out_dir = "{}"

[data]
format = "idx"
train_images = "{}"
train_labels = "{}"
test_images = "{}"
test_labels = "{}"
flatten = true

[model]
arch = "dense-cae"
hinge = 6

[train]
rule = "recirc"
epochs = {epochs}
batch_size = 16
rates = [0.05, 0.01]
"#,
        dir.join(out).display(),
        img.display(),
        lbl.display(),
        timg.display(),
        tlbl.display()
    );
    RunConfig::from_toml_str(&toml).unwrap()
}

#[test]
fn train_cae_writes_expected_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = cae_config(dir.path(), "run", 3, 7);
    let artifacts = run_config(&cfg).unwrap();
    let metrics_path = artifacts.out_dir.join("metrics.csv");
    assert!(metrics_path.exists());
    let log = MetricsLog::read_csv(&metrics_path).unwrap();
    // 3 epochs x 2 splits of mse rows
    assert_eq!(log.rows.len(), 6);
    assert!(artifacts.out_dir.join("config.resolved.toml").exists());
    let ckpt = artifacts.checkpoint_dir.unwrap();
    assert!(ckpt.join("manifest.json").exists());
}

#[test]
fn same_config_same_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let a = cae_config(dir.path(), "run-a", 3, 9);
    let b = {
        let mut c = cae_config(dir.path(), "run-a", 3, 9);
        c.out_dir = dir.path().join("run-b");
        c
    };
    // reuse the same fixture files for both runs
    let mut b = b;
    b.data = a.data.clone();
    run_config(&a).unwrap();
    run_config(&b).unwrap();
    let bytes_a = std::fs::read(dir.path().join("run-a/metrics.csv")).unwrap();
    let bytes_b = std::fs::read(dir.path().join("run-b/metrics.csv")).unwrap();
    assert_eq!(bytes_a, bytes_b);
}

#[test]
fn resolved_config_echo_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = cae_config(dir.path(), "orig", 2, 11);
    run_config(&cfg).unwrap();
    let echoed = std::fs::read_to_string(dir.path().join("orig/config.resolved.toml")).unwrap();
    let mut cfg2 = RunConfig::from_toml_str(&echoed).unwrap();
    cfg2.out_dir = dir.path().join("echoed");
    run_config(&cfg2).unwrap();
    let a = std::fs::read(dir.path().join("orig/metrics.csv")).unwrap();
    let b = std::fs::read(dir.path().join("echoed/metrics.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn missing_data_is_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = cae_config(dir.path(), "run", 1, 13);
    cfg.data.train_images = Some(dir.path().join("nonexistent"));
    let err = run_config(&cfg).unwrap_err();
    assert_eq!(err.exit_code(), 2, "{err}");
}

#[test]
fn tourbillon_pipeline_checkpoint_eval_and_export() {
    let dir = tempfile::tempdir().unwrap();
    let (img, lbl) = write_idx_fixture(dir.path(), 64, 31);
    let toml = format!(
        r#"
kind = "train-tourbillon"
seed = 3
out_dir = "{}"

[data]
format = "idx"
train_images = "{}"
train_labels = "{}"
flatten = true

[model]
arch = "dense-stack"
hinges = [10, 6]
classes = 10

[train]
rule = "recirc"
epochs = 2
batch_size = 16
rates = [0.05, 0.01]
head_epochs = 3
"#,
        dir.path().join("stack").display(),
        img.display(),
        lbl.display()
    );
    let cfg = RunConfig::from_toml_str(&toml).unwrap();
    let artifacts = run_config(&cfg).unwrap();
    assert!(dir.path().join("stack/metrics_level0.csv").exists());
    assert!(dir.path().join("stack/metrics_level1.csv").exists());
    let head_log = MetricsLog::read_csv(&dir.path().join("stack/metrics.csv")).unwrap();
    assert_eq!(head_log.rows.len(), 6); // 3 epochs x (accuracy, xent), train only
    let ckpt = artifacts.checkpoint_dir.unwrap();

    // eval the checkpoint through a config
    let eval_toml = format!(
        r#"
kind = "eval"
seed = 0
out_dir = "{}"
checkpoint = "{}"

[data]
format = "idx"
train_images = "{}"
train_labels = "{}"
flatten = true
"#,
        dir.path().join("eval").display(),
        ckpt.display(),
        img.display(),
        lbl.display()
    );
    let eval_cfg = RunConfig::from_toml_str(&eval_toml).unwrap();
    let eval_art = run_config(&eval_cfg).unwrap();
    let eval_log = eval_art.primary_metrics.unwrap();
    let acc = eval_log
        .get(0, tourbillon_core::Split::Train, tourbillon_core::Metric::Accuracy)
        .unwrap();
    assert!((0.0..=1.0).contains(&acc));

    // embeddings: level 0 codes + label column
    let ds = tourbillon_core::load_idx(&img, &lbl).unwrap().flattened();
    let out_csv = dir.path().join("embeddings.csv");
    export_embeddings(&ckpt, &ds, 0, 20, 5, &out_csv).unwrap();
    let text = std::fs::read_to_string(&out_csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 21); // header + 20 rows
    assert_eq!(lines[0].split(',').count(), 11); // 10 code dims + label
    // deterministic under the same seed
    let out_csv2 = dir.path().join("embeddings2.csv");
    export_embeddings(&ckpt, &ds, 0, 20, 5, &out_csv2).unwrap();
    assert_eq!(std::fs::read(&out_csv).unwrap(), std::fs::read(&out_csv2).unwrap());
    // sample_count > N and bad level are errors
    assert!(export_embeddings(&ckpt, &ds, 0, 1000, 5, &out_csv).is_err());
    assert!(export_embeddings(&ckpt, &ds, 7, 10, 5, &out_csv).is_err());
}

#[test]
fn tourbillonize_and_fine_tune_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let (img, lbl) = write_idx_fixture(dir.path(), 48, 41);
    let toml = format!(
        r#"
kind = "tourbillonize"
seed = 5
out_dir = "{}"

[data]
format = "idx"
train_images = "{}"
train_labels = "{}"
flatten = true

[model]
arch = "dense-unet"
sizes = [12, 6, 12]

[train]
epochs = 2
batch_size = 16
rates = [0.05, 0.01]
fine_tune_epochs = 3
"#,
        dir.path().join("twin").display(),
        img.display(),
        lbl.display()
    );
    let cfg = RunConfig::from_toml_str(&toml).unwrap();
    let artifacts = run_config(&cfg).unwrap();
    // one metrics file per trained autoencoder (4 dense layers) + fine-tune
    for i in 0..4 {
        assert!(dir.path().join(format!("twin/metrics_level{i}.csv")).exists());
    }
    assert!(dir.path().join("twin/metrics_finetune.csv").exists());
    let ckpt = artifacts.checkpoint_dir.unwrap();
    assert_eq!(tourbillon_core::checkpoint::peek_kind(&ckpt).unwrap(), "twin");

    // fine-tune again from the checkpoint through the fine-tune run kind
    let ft_toml = format!(
        r#"
kind = "fine-tune"
seed = 6
out_dir = "{}"
checkpoint = "{}"

[data]
format = "idx"
train_images = "{}"
train_labels = "{}"
flatten = true

[train]
epochs = 2
batch_size = 16
"#,
        dir.path().join("ft").display(),
        ckpt.display(),
        img.display(),
        lbl.display()
    );
    let ft_cfg = RunConfig::from_toml_str(&ft_toml).unwrap();
    let ft_art = run_config(&ft_cfg).unwrap();
    let log = ft_art.primary_metrics.unwrap();
    assert_eq!(log.rows.len(), 2); // 2 epochs of train mse (headless twin)
}

#[test]
fn config_error_exit_code_is_one() {
    let err = RunConfig::from_toml_str("kind = \"train-cae\"").unwrap_err();
    assert_eq!(err.exit_code(), 1);
}
