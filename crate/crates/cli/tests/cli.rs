//! End-to-end tests of the `dhia` binary: artifact layout, determinism,
//! exit codes, and the run.json reproduction contract.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::tempdir;

fn dhia(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dhia"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = dhia(args);
    assert!(
        out.status.success(),
        "command {:?} failed: {}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn tiny_train_config() -> serde_json::Value {
    serde_json::json!({
        "k": 2,
        "latent_dim": 3,
        "encoder_hidden": [6],
        "predictor_hidden": [4],
        "energy_hidden": [4],
        "lr": 2e-3,
        "pretrain_epochs": 4,
        "finetune_epochs": 5,
        "batch_size": 8,
        "seed": 7
    })
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("config.json");
    fs::write(&path, tiny_train_config().to_string()).unwrap();
    path.to_str().unwrap().to_owned()
}

fn generate_tiny(dir: &Path, eta: &str) -> String {
    let data = dir.join("data");
    ok(&[
        "generate",
        "--out",
        data.to_str().unwrap(),
        "--n",
        "24",
        "--views",
        "2",
        "--k",
        "2",
        "--latent-dim",
        "3",
        "--view-dims",
        "4,5",
        "--separation",
        "5",
        "--noise",
        "0.05",
        "--eta",
        eta,
        "--seed",
        "3",
    ]);
    data.to_str().unwrap().to_owned()
}

#[test]
fn generate_with_zero_eta_writes_an_all_ones_mask() {
    let dir = tempdir().unwrap();
    let data = generate_tiny(dir.path(), "0");
    let mask = fs::read_to_string(Path::new(&data).join("mask.csv")).unwrap();
    for line in mask.lines() {
        assert_eq!(line, "1,1");
    }
    for name in ["view_0.csv", "view_1.csv", "labels.txt", "dataset.json", "run.json"] {
        assert!(Path::new(&data).join(name).is_file(), "{name} missing");
    }
}

#[test]
fn generate_is_deterministic_across_invocations() {
    let dir = tempdir().unwrap();
    let a = generate_tiny(&dir.path().join("a"), "0.3");
    let b = generate_tiny(&dir.path().join("b"), "0.3");
    for name in ["view_0.csv", "view_1.csv", "mask.csv", "labels.txt"] {
        let fa = fs::read(Path::new(&a).join(name)).unwrap();
        let fb = fs::read(Path::new(&b).join(name)).unwrap();
        assert_eq!(fa, fb, "{name} differs");
    }
}

#[test]
fn generate_honors_the_per_view_missing_ratio() {
    let dir = tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&[
        "generate", "--out", data.to_str().unwrap(), "--n", "300", "--views", "2",
        "--k", "3", "--eta", "0.5", "--seed", "11",
    ]);
    let mask = fs::read_to_string(data.join("mask.csv")).unwrap();
    let mut zeros = [0usize; 2];
    for line in mask.lines() {
        for (v, cell) in line.split(',').enumerate() {
            if cell == "0" {
                zeros[v] += 1;
            }
        }
    }
    assert_eq!(zeros, [150, 150]);
}

#[test]
fn generate_rejects_infeasible_eta() {
    let dir = tempdir().unwrap();
    let out = dhia(&[
        "generate", "--out", dir.path().join("d").to_str().unwrap(),
        "--n", "10", "--views", "2", "--eta", "1.5",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_writes_artifacts_metrics_and_a_config_echo() {
    let dir = tempdir().unwrap();
    let data = generate_tiny(dir.path(), "0.3");
    let cfg = write_config(dir.path());
    let out = dir.path().join("run");
    ok(&["train", "--config", &cfg, "--data", &data, "--out", out.to_str().unwrap()]);
    for name in [
        "checkpoint.dhia",
        "checkpoint.manifest.json",
        "losses.csv",
        "pretrain.csv",
        "labels.txt",
        "metrics.json",
        "run.json",
    ] {
        assert!(out.join(name).is_file(), "{name} missing");
    }
    let record: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("run.json")).unwrap()).unwrap();
    assert_eq!(record["command"], "train");
    assert_eq!(record["config"]["seed"], 7);
    assert_eq!(record["config"]["toggles"]["use_caa"], true);
    let losses = fs::read_to_string(out.join("losses.csv")).unwrap();
    assert_eq!(losses.lines().count(), 6);
    let pretrain = fs::read_to_string(out.join("pretrain.csv")).unwrap();
    assert_eq!(pretrain.lines().count(), 5);
    let metrics: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert!(metrics["acc"].as_f64().unwrap() >= 0.0);
}

#[test]
fn identical_train_invocations_produce_byte_identical_labels() {
    let dir = tempdir().unwrap();
    let data = generate_tiny(dir.path(), "0.3");
    let cfg = write_config(dir.path());
    let out1 = dir.path().join("r1");
    let out2 = dir.path().join("r2");
    ok(&["train", "--config", &cfg, "--data", &data, "--out", out1.to_str().unwrap()]);
    ok(&["train", "--config", &cfg, "--data", &data, "--out", out2.to_str().unwrap()]);
    for name in ["labels.txt", "checkpoint.dhia", "losses.csv"] {
        let a = fs::read(out1.join(name)).unwrap();
        let b = fs::read(out2.join(name)).unwrap();
        assert_eq!(a, b, "{name} differs");
    }
}

#[test]
fn rerunning_from_run_json_reproduces_labels() {
    let dir = tempdir().unwrap();
    let data = generate_tiny(dir.path(), "0.3");
    let cfg = write_config(dir.path());
    let out1 = dir.path().join("r1");
    ok(&["train", "--config", &cfg, "--data", &data, "--out", out1.to_str().unwrap()]);
    let out2 = dir.path().join("r2");
    ok(&[
        "train",
        "--config",
        out1.join("run.json").to_str().unwrap(),
        "--out",
        out2.to_str().unwrap(),
    ]);
    assert_eq!(fs::read(out1.join("labels.txt")).unwrap(), fs::read(out2.join("labels.txt")).unwrap());
}

#[test]
fn ablation_flag_lands_in_the_config_echo() {
    let dir = tempdir().unwrap();
    let data = generate_tiny(dir.path(), "0.3");
    let cfg = write_config(dir.path());
    let out = dir.path().join("run");
    ok(&[
        "train", "--config", &cfg, "--data", &data, "--out", out.to_str().unwrap(),
        "--ablate", "caa",
    ]);
    let record: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("run.json")).unwrap()).unwrap();
    assert_eq!(record["config"]["toggles"]["use_caa"], false);
    assert_eq!(record["config"]["toggles"]["use_ebm"], true);
}

#[test]
fn train_with_a_missing_data_directory_exits_3_and_writes_nothing() {
    let dir = tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("fresh");
    let res = dhia(&[
        "train", "--config", &cfg, "--data",
        dir.path().join("nope").to_str().unwrap(), "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(3));
    assert!(!out.exists(), "no partial artifacts on failure");
}

#[test]
fn unknown_config_keys_are_rejected_with_exit_2() {
    let dir = tempdir().unwrap();
    let data = generate_tiny(dir.path(), "0");
    let path = dir.path().join("bad.json");
    fs::write(&path, r#"{"k": 2, "learning_rate": 0.1}"#).unwrap();
    let out = dhia(&[
        "train", "--config", path.to_str().unwrap(), "--data", &data,
        "--out", dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn pretrain_saves_a_snapshot_and_loss_curve() {
    let dir = tempdir().unwrap();
    let data = generate_tiny(dir.path(), "0");
    let cfg = write_config(dir.path());
    let out = dir.path().join("pre");
    ok(&["pretrain", "--config", &cfg, "--data", &data, "--out", out.to_str().unwrap()]);
    for name in ["snapshot/model.bin", "snapshot/state.json", "pretrain.csv", "run.json"] {
        assert!(out.join(name).is_file(), "{name} missing");
    }
}

#[test]
fn evaluate_scores_identical_and_permuted_labelings_perfectly() {
    let dir = tempdir().unwrap();
    let truth = dir.path().join("truth.txt");
    fs::write(&truth, "0\n0\n1\n1\n2\n2\n").unwrap();
    let same = dir.path().join("same.txt");
    fs::write(&same, "0\n0\n1\n1\n2\n2\n").unwrap();
    let permuted = dir.path().join("perm.txt");
    fs::write(&permuted, "2\n2\n0\n0\n1\n1\n").unwrap();
    for pred in [&same, &permuted] {
        let out = dir.path().join("eval");
        ok(&[
            "evaluate", "--pred", pred.to_str().unwrap(), "--truth",
            truth.to_str().unwrap(), "--out", out.to_str().unwrap(),
        ]);
        let m: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
        assert_eq!(m["acc"], 1.0);
        assert_eq!(m["nmi"], 1.0);
        assert_eq!(m["pur"], 1.0);
    }
}

#[test]
fn evaluate_matches_the_hand_contingency_oracle() {
    // Contingency [[3,1],[0,4]]: acc 0.875, nmi 0.561590, pur 0.875.
    let dir = tempdir().unwrap();
    let pred = dir.path().join("pred.txt");
    fs::write(&pred, "0\n0\n0\n0\n1\n1\n1\n1\n").unwrap();
    let truth = dir.path().join("truth.txt");
    fs::write(&truth, "0\n0\n0\n1\n1\n1\n1\n1\n").unwrap();
    let out = dir.path().join("eval");
    ok(&[
        "evaluate", "--pred", pred.to_str().unwrap(), "--truth",
        truth.to_str().unwrap(), "--out", out.to_str().unwrap(),
    ]);
    let m: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(m["acc"], 0.875);
    assert_eq!(m["pur"], 0.875);
    assert_eq!(m["nmi"], 0.56159);
    assert_eq!(m["contingency"][0][0], 3);
}

#[test]
fn evaluate_with_mismatched_lengths_exits_3() {
    let dir = tempdir().unwrap();
    let pred = dir.path().join("pred.txt");
    fs::write(&pred, "0\n1\n").unwrap();
    let truth = dir.path().join("truth.txt");
    fs::write(&truth, "0\n1\n0\n").unwrap();
    let out = dhia(&[
        "evaluate", "--pred", pred.to_str().unwrap(), "--truth",
        truth.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn sweep_tabulates_every_grid_cell() {
    let dir = tempdir().unwrap();
    let data = generate_tiny(dir.path(), "0.3");
    let path = dir.path().join("config.json");
    let mut cfg = tiny_train_config();
    cfg["pretrain_epochs"] = 2.into();
    cfg["finetune_epochs"] = 2.into();
    fs::write(&path, cfg.to_string()).unwrap();
    let out = dir.path().join("sweep");
    ok(&[
        "sweep", "--config", path.to_str().unwrap(), "--data", &data,
        "--out", out.to_str().unwrap(),
        "--alphas", "0.05,0.1", "--betas", "0.01",
    ]);
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "alpha,beta,acc,nmi,pur");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("0.05,0.01,"));
    assert!(lines[2].starts_with("0.1,0.01,"));
    assert!(out.join("alpha0.05_beta0.01/labels.txt").is_file());
    assert!(out.join("alpha0.1_beta0.01/labels.txt").is_file());
}

#[test]
fn export_embeddings_writes_latents_and_a_projection() {
    let dir = tempdir().unwrap();
    let data = generate_tiny(dir.path(), "0.3");
    let cfg = write_config(dir.path());
    let run = dir.path().join("run");
    ok(&["train", "--config", &cfg, "--data", &data, "--out", run.to_str().unwrap()]);
    let out = dir.path().join("emb");
    ok(&[
        "export-embeddings", "--checkpoint", run.to_str().unwrap(),
        "--data", &data, "--out", out.to_str().unwrap(),
    ]);
    let h0 = fs::read_to_string(out.join("h_star_view_0.csv")).unwrap();
    assert_eq!(h0.lines().count(), 24);
    let proj = fs::read_to_string(out.join("embedding_2d.csv")).unwrap();
    let lines: Vec<&str> = proj.lines().collect();
    assert_eq!(lines[0], "x,y,label,truth");
    assert_eq!(lines.len(), 25);
    for line in &lines[1..] {
        assert_eq!(line.split(',').count(), 4);
    }
}

#[test]
fn export_embeddings_preserves_distances_for_two_dimensional_latents() {
    // One view with latent width 2: the projection is a centered rotation
    // of the completed latents, so pairwise distances carry over.
    let dir = tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&[
        "generate", "--out", data.to_str().unwrap(), "--n", "16", "--views", "1",
        "--k", "2", "--latent-dim", "2", "--view-dims", "4", "--separation", "5",
        "--noise", "0.05", "--seed", "5",
    ]);
    let path = dir.path().join("config.json");
    let mut cfg = tiny_train_config();
    cfg["latent_dim"] = 2.into();
    fs::write(&path, cfg.to_string()).unwrap();
    let run = dir.path().join("run");
    ok(&[
        "train", "--config", path.to_str().unwrap(), "--data", data.to_str().unwrap(),
        "--out", run.to_str().unwrap(),
    ]);
    let out = dir.path().join("emb");
    ok(&[
        "export-embeddings", "--checkpoint", run.to_str().unwrap(),
        "--data", data.to_str().unwrap(), "--out", out.to_str().unwrap(),
    ]);
    let parse = |text: &str, cols: std::ops::Range<usize>, skip: usize| -> Vec<Vec<f64>> {
        text.lines()
            .skip(skip)
            .map(|l| {
                l.split(',')
                    .map(|x| x.parse::<f64>().unwrap_or(f64::NAN))
                    .collect::<Vec<f64>>()[cols.clone()]
                    .to_vec()
            })
            .collect()
    };
    let h = parse(&fs::read_to_string(out.join("h_star_view_0.csv")).unwrap(), 0..2, 0);
    let p = parse(&fs::read_to_string(out.join("embedding_2d.csv")).unwrap(), 0..2, 1);
    assert_eq!(h.len(), p.len());
    let dist = |a: &[f64], b: &[f64]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
    for i in 0..h.len() {
        for j in (i + 1)..h.len() {
            let dh = dist(&h[i], &h[j]);
            let dp = dist(&p[i], &p[j]);
            assert!((dh - dp).abs() < 1e-9, "distance {i},{j}: {dh} vs {dp}");
        }
    }
}

#[test]
fn export_embeddings_rejects_width_mismatched_data() {
    let dir = tempdir().unwrap();
    let data = generate_tiny(dir.path(), "0");
    let cfg = write_config(dir.path());
    let run = dir.path().join("run");
    ok(&["train", "--config", &cfg, "--data", &data, "--out", run.to_str().unwrap()]);
    let other = dir.path().join("other");
    ok(&[
        "generate", "--out", other.to_str().unwrap(), "--n", "10", "--views", "2",
        "--k", "2", "--latent-dim", "3", "--view-dims", "7,5", "--seed", "1",
    ]);
    let res = dhia(&[
        "export-embeddings", "--checkpoint", run.to_str().unwrap(),
        "--data", other.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(3));
}

#[test]
fn unknown_flags_are_rejected() {
    let out = dhia(&["train", "--bogus", "1"]);
    assert_eq!(out.status.code(), Some(2));
}
