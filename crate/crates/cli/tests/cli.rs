//! Black-box tests over the `seamless` binary: exit codes, dry runs,
//! report formats and the digest contract.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use seamless_core::synth;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_seamless"))
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_toy_config(path: &Path, data: &Path, run_dir: &Path, mode: &str, extra: &str) {
    let text = format!(
        r#"
[train]
mode = "{mode}"
lr = 0.05
batch_size = 2
epochs = 1
seed = 3
image_size = 64
run_name = "run"
runs_dir = "{runs}"

[backbone]
profile = "toy"

[pseudo]
store_dir = "{store}"
{extra}

[[datasets]]
name = "syn"
images_dir = "{images}"
{masks}
role = "train"
"#,
        runs = run_dir.display(),
        store = run_dir.join("pseudo_masks").display(),
        images = data.join("images").display(),
        masks = if mode == "supervised" {
            format!("masks_dir = \"{}\"", data.join("masks").display())
        } else {
            String::new()
        },
    );
    std::fs::write(path, text).unwrap();
}

fn digest_line(text: &str) -> Option<String> {
    text.lines()
        .find(|l| l.starts_with("config digest: "))
        .map(|l| l.trim_start_matches("config digest: ").to_string())
}

#[test]
fn missing_config_exits_2_and_names_the_path() {
    let out = bin()
        .args(["train", "--config", "/definitely/missing.toml"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("missing.toml"), "{}", stderr(&out));
}

#[test]
fn unknown_flag_exits_2_with_usage() {
    let out = bin()
        .args(["evaluate", "--pred-dir", "x", "--gt-dir", "y", "--frobnicate"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).to_lowercase().contains("usage"), "{}", stderr(&out));
}

#[test]
fn train_dry_run_validates_without_side_effects() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth::write_dataset(&data, 4, 64, 1).unwrap();
    let cfg_path = tmp.path().join("cfg.toml");
    let run_dir = tmp.path().join("runs");
    write_toy_config(&cfg_path, &data, &run_dir, "supervised", "");
    let out = bin()
        .args(["train", "--config"])
        .arg(&cfg_path)
        .arg("--dry-run")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert!(digest_line(&text).is_some(), "prints the digest: {text}");
    assert!(text.contains("4 images"), "prints manifest counts: {text}");
    assert!(!run_dir.exists(), "no run directory created");
}

#[test]
fn seed_env_var_changes_the_digest() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth::write_dataset(&data, 2, 64, 2).unwrap();
    let cfg_path = tmp.path().join("cfg.toml");
    write_toy_config(&cfg_path, &data, &tmp.path().join("runs"), "supervised", "");
    let run = |seed: &str| {
        let out = bin()
            .args(["train", "--config"])
            .arg(&cfg_path)
            .arg("--dry-run")
            .env("SEAMLESS_SEED", seed)
            .output()
            .unwrap();
        assert_eq!(out.status.code(), Some(0));
        digest_line(&stdout(&out)).unwrap()
    };
    assert_ne!(run("1"), run("2"), "seed override reaches the resolved config");
}

#[test]
fn train_then_infer_and_digest_matches_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth::write_dataset(&data, 4, 64, 3).unwrap();
    let cfg_path = tmp.path().join("cfg.toml");
    let run_dir = tmp.path().join("runs");
    write_toy_config(&cfg_path, &data, &run_dir, "supervised", "");

    let out = bin().args(["train", "--config"]).arg(&cfg_path).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    let printed = digest_line(&stdout(&out)).unwrap();
    let ckpt = run_dir.join("run").join("ckpt_1.bin");
    assert!(ckpt.is_file());
    let stored = seamless_core::engine::checkpoint::load(&ckpt).unwrap().config_digest;
    assert_eq!(printed, stored, "printed digest matches the checkpoint's");
    assert!(run_dir.join("run").join("history.csv").is_file());

    let out_dir = tmp.path().join("preds");
    let out = bin()
        .args(["infer", "--config"])
        .arg(&cfg_path)
        .arg("--checkpoint")
        .arg(&ckpt)
        .arg("--images-dir")
        .arg(data.join("images"))
        .arg("--out-dir")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    assert_eq!(std::fs::read_dir(&out_dir).unwrap().count(), 4);
}

fn make_eval_dirs(tmp: &Path) -> (PathBuf, PathBuf) {
    let pred = tmp.join("pred");
    let gt = tmp.join("gt");
    std::fs::create_dir_all(&pred).unwrap();
    std::fs::create_dir_all(&gt).unwrap();
    for k in 0..3 {
        let (_, mask) = synth::synth_sample(32, 40 + k);
        seamless_core::io::save_mask_png8(&gt.join(format!("s{k}.png")), &mask).unwrap();
        // Predictions: blurred-ish copy of the mask.
        let soft = mask.mapv(|v| 0.8 * v + 0.1);
        seamless_core::io::save_mask_png8(&pred.join(format!("s{k}.png")), &soft).unwrap();
    }
    (pred, gt)
}

#[test]
fn evaluate_emits_exact_json_keys_and_mean_row() {
    let tmp = tempfile::tempdir().unwrap();
    let (pred, gt) = make_eval_dirs(tmp.path());
    let out = bin()
        .args(["evaluate", "--pred-dir"])
        .arg(&pred)
        .arg("--gt-dir")
        .arg(&gt)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    let json_start = text.find('[').unwrap();
    let rows: serde_json::Value = serde_json::from_str(&text[json_start..]).unwrap();
    let rows = rows.as_array().unwrap();
    assert_eq!(rows.len(), 4, "3 images + mean row");
    for row in rows {
        let obj = row.as_object().unwrap();
        let mut keys: Vec<_> = obj.keys().map(String::as_str).collect();
        keys.sort_unstable();
        assert_eq!(keys, vec!["e_measure", "f_beta", "id", "mae", "s_measure"]);
    }
    assert_eq!(rows.last().unwrap()["id"], "mean");
}

#[test]
fn evaluate_csv_subset_and_pr_out() {
    let tmp = tempfile::tempdir().unwrap();
    let (pred, gt) = make_eval_dirs(tmp.path());
    let pr_path = tmp.path().join("pr.csv");
    let out = bin()
        .args(["evaluate", "--pred-dir"])
        .arg(&pred)
        .arg("--gt-dir")
        .arg(&gt)
        .args(["--metrics", "mae", "--report", "csv", "--fbeta-variant", "adaptive", "--jobs", "2", "--pr-out"])
        .arg(&pr_path)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    let csv_start = text.find("id,").unwrap();
    let mut lines = text[csv_start..].lines();
    assert_eq!(lines.next().unwrap(), "id,mae");
    assert_eq!(lines.clone().count(), 4);
    assert!(lines.all(|l| l.split(',').count() == 2));
    let pr = std::fs::read_to_string(&pr_path).unwrap();
    assert!(pr.starts_with("threshold,precision,recall"));
    assert_eq!(pr.lines().count(), 257);
}

#[test]
fn evaluate_rejects_unknown_metric_or_variant() {
    let out = bin()
        .args(["evaluate", "--pred-dir", "p", "--gt-dir", "g", "--metrics", "mae,bogus"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = bin()
        .args(["evaluate", "--pred-dir", "p", "--gt-dir", "g", "--fbeta-variant", "median"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn pseudo_init_from_files_then_update_with_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth::write_dataset(&data, 3, 64, 9).unwrap();
    // External initializer masks: dilated, salted ground truths.
    let noisy = tmp.path().join("noisy");
    std::fs::create_dir_all(&noisy).unwrap();
    for entry in std::fs::read_dir(data.join("masks")).unwrap() {
        let path = entry.unwrap().path();
        let gt = seamless_core::io::load_mask_gray::<f64>(&path).unwrap();
        let corrupted = synth::salt(&synth::dilate(&gt, 2), 0.2, 5);
        seamless_core::io::save_mask_png8(&noisy.join(path.file_name().unwrap()), &corrupted).unwrap();
    }
    let run_dir = tmp.path().join("runs");
    let cfg_path = tmp.path().join("cfg.toml");
    write_toy_config(
        &cfg_path,
        &data,
        &run_dir,
        "unsupervised",
        &format!("source = \"file\"\nfeatures_path = \"{}\"", noisy.display()),
    );

    let out = bin().args(["pseudo-init", "--config"]).arg(&cfg_path).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    let store_dir = run_dir.join("pseudo_masks");
    assert!(store_dir.join("manifest.json").is_file());
    assert_eq!(std::fs::read_dir(store_dir.join("epoch_0")).unwrap().count(), 3);

    // Train one unsupervised epoch, then apply a standalone epoch-3 update.
    let out = bin().args(["train", "--config"]).arg(&cfg_path).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    let ckpt = run_dir.join("run").join("ckpt_1.bin");
    let out = bin()
        .args(["pseudo-update", "--config"])
        .arg(&cfg_path)
        .arg("--checkpoint")
        .arg(&ckpt)
        .args(["--epoch", "3"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    assert!(stdout(&out).contains("updated 3 masks"));
    assert_eq!(std::fs::read_dir(store_dir.join("epoch_3")).unwrap().count(), 3);
}

#[test]
fn bench_prints_json_report() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth::write_dataset(&data, 2, 64, 10).unwrap();
    let cfg_path = tmp.path().join("cfg.toml");
    write_toy_config(&cfg_path, &data, &tmp.path().join("runs"), "supervised", "");
    let out = bin()
        .args(["bench", "--config"])
        .arg(&cfg_path)
        .args(["--n-images", "2", "--size", "64"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    let json_start = text.find('{').unwrap();
    let report: serde_json::Value = serde_json::from_str(&text[json_start..]).unwrap();
    assert!(report["parameters"].as_u64().unwrap() > 0);
    assert!(report["macs_per_image"].as_u64().unwrap() > 0);
    assert!(report["images_per_sec"].as_f64().unwrap() > 0.0);
}
