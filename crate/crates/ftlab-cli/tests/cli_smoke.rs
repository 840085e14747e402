//! End-to-end command-line behavior: artifact generation, idempotence,
//! report rendering and the documented exit codes.

use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ftlab"))
}

fn write_config(dir: &Path) -> PathBuf {
    let path = dir.join("test.config");
    std::fs::write(
        &path,
        format!(
            "[grammar]\ntxt_len = 44\ncontext_len = 56\n\
             [train]\niterations = 3\nbatch_size = 4\neval_every = 3\neval_size = 8\nseed = 5\n\
             [analysis]\nprune_ks = 0 1\nprobe_samples = 300\neval_n = 24\n\
             [output]\ndir = {}\n",
            dir.join("run").display()
        ),
    )
    .unwrap();
    path
}

fn temp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("ftlab_cli_{tag}_{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn gen_data_is_idempotent_and_audited() {
    let dir = temp_dir("gendata");
    let cfg = write_config(&dir);
    let out = bin().args(["gen-data", "--config"]).arg(&cfg).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout).to_string();
    assert!(text.contains("correlated fraction 1.0000"), "{text}");
    let first = std::fs::read(dir.join("run/finetune.ftds")).unwrap();
    // Second invocation reproduces the same bytes.
    assert!(bin().args(["gen-data", "--config"]).arg(&cfg).output().unwrap().status.success());
    let second = std::fs::read(dir.join("run/finetune.ftds")).unwrap();
    assert_eq!(first, second, "gen-data must be idempotent");
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn compile_counter_produces_loadable_checkpoints() {
    let dir = temp_dir("compile");
    let cfg = write_config(&dir);
    let out = bin()
        .args(["compile", "counter", "--max-len", "12", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for name in ["compiled.ftck", "densified.ftck"] {
        let model = ftlab::checkpoint::load_model(&dir.join("run").join(name)).unwrap();
        assert_eq!(model.config.n_blocks, 3);
    }
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn train_analyze_report_round_trip() {
    let dir = temp_dir("pipeline");
    let cfg = write_config(&dir);
    let run = dir.join("run");
    assert!(bin().args(["pretrain", "--config"]).arg(&cfg).output().unwrap().status.success());
    let base = run.join("pretrain.ftck");
    assert!(bin()
        .args(["finetune", "--base"])
        .arg(&base)
        .arg("--config")
        .arg(&cfg)
        .output()
        .unwrap()
        .status
        .success());
    assert!(bin()
        .args(["prune", "--base"])
        .arg(run.join("finetune.ftck"))
        .arg("--config")
        .arg(&cfg)
        .output()
        .unwrap()
        .status
        .success());
    let report = bin().arg("report").arg(&run).output().unwrap();
    assert!(report.status.success(), "{}", String::from_utf8_lossy(&report.stderr));
    assert!(run.join("finetune.svg").exists());
    assert!(run.join("prune_curve.svg").exists());
    assert!(run.join("summary.txt").exists());
    let svg = std::fs::read_to_string(run.join("finetune.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("polyline"));
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn exit_codes_distinguish_failure_classes() {
    let dir = temp_dir("exitcodes");
    // Unknown command / bad config -> 2.
    let out = bin().arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let bad_cfg = dir.join("bad.config");
    std::fs::write(&bad_cfg, "[warp]\nspeed = 9\n").unwrap();
    let out = bin().args(["pretrain", "--config"]).arg(&bad_cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    // Missing artifact -> 3.
    let cfg = write_config(&dir);
    let out = bin()
        .args(["finetune", "--base", "/nonexistent/model.ftck", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    // Version mismatch -> 4.
    let stale = dir.join("stale.ftck");
    let mut bytes = b"FTCK".to_vec();
    bytes.extend(99u32.to_le_bytes());
    std::fs::write(&stale, &bytes).unwrap();
    let out = bin()
        .args(["finetune", "--base"])
        .arg(&stale)
        .arg("--config")
        .arg(&cfg)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(4));
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn report_refuses_mixed_config_hashes() {
    let dir = temp_dir("mixed");
    let run = dir.join("run");
    std::fs::create_dir_all(run.join("a")).unwrap();
    std::fs::create_dir_all(run.join("b")).unwrap();
    std::fs::write(run.join("a/config.hash"), "aaaa\n").unwrap();
    std::fs::write(run.join("b/config.hash"), "bbbb\n").unwrap();
    std::fs::write(run.join("a/x.csv"), "iteration,acc_pt_c0\n0,1.0\n").unwrap();
    let out = bin().arg("report").arg(&run).output().unwrap();
    assert_eq!(out.status.code(), Some(2), "mixed hashes must be refused");
    let out = bin().arg("report").arg(&run).arg("--force").output().unwrap();
    assert!(out.status.success(), "--force must override");
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn sweep_enumerates_the_full_grid() {
    let dir = temp_dir("sweep");
    let cfg_path = dir.join("sweep.config");
    std::fs::write(
        &cfg_path,
        format!(
            "[grammar]\ntxt_len = 44\ncontext_len = 56\n\
             [train]\niterations = 1\nbatch_size = 2\neval_every = 1\neval_size = 4\n\
             [sweep]\npriors = P_L P_H\nlrs = eta_S\nc_tr = 0 1\nprotocols = pretrain\nseeds = 0\n\
             [output]\ndir = {}\n",
            dir.join("run").display()
        ),
    )
    .unwrap();
    let out = bin().args(["sweep", "--config"]).arg(&cfg_path).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let cells: Vec<_> = std::fs::read_dir(dir.join("run"))
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .collect();
    assert_eq!(cells.len(), 4, "2 priors x 1 lr x 2 c_tr x 1 protocol x 1 seed");
    for cell in cells {
        assert!(cell.path().join("pretrain.csv").exists());
    }
    std::fs::remove_dir_all(&dir).ok();
}
