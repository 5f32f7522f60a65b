//! The command-line surface, driven through the built binary.

use std::process::Command;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_latentrl"));
    c.env_remove("LATENTRL_OUTPUT_DIR");
    c
}

#[test]
fn inspect_config_matches_golden() {
    let out = bin().arg("inspect-config").output().unwrap();
    assert!(out.status.success());
    let golden = include_str!("golden/default_config.toml");
    assert_eq!(String::from_utf8(out.stdout).unwrap(), golden);
}

#[test]
fn flags_override_file_and_env_sets_only_output_dir() {
    let tmp = tempfile::tempdir().unwrap();
    let file = tmp.path().join("c.toml");
    std::fs::write(&file, "seed = 5\noutput_dir = \"from-file\"\n[grpo]\nm = 4\n").unwrap();
    let out = bin()
        .env("LATENTRL_OUTPUT_DIR", "from-env")
        .args(["inspect-config", "--config"])
        .arg(&file)
        .args(["--seed", "9", "--set", "grpo.n=8"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("seed = 9\n"));
    assert!(text.contains("output_dir = \"from-env\"\n"));
    assert!(text.contains("n = 8\n"));
    assert!(text.contains("m = 4\n"));

    let out = bin()
        .env("LATENTRL_OUTPUT_DIR", "from-env")
        .args(["inspect-config", "--output-dir", "from-flag"])
        .output()
        .unwrap();
    assert!(String::from_utf8(out.stdout).unwrap().contains("output_dir = \"from-flag\"\n"));
}

#[test]
fn bad_config_exits_nonzero_with_message() {
    let out = bin().args(["inspect-config", "--set", "grpo.nn=3"]).output().unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("unknown field `nn`"), "{err}");
}

#[test]
fn run_export_and_inspect() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("run");
    let status = bin()
        .args(["run", "--stages", "sft,rl", "--rl-steps", "2", "--output-dir"])
        .arg(&dir)
        .args([
            "--set", "sft.recon_epochs=1",
            "--set", "sft.flow_epochs=1",
            "--set", "sft.per_target=2",
            "--set", "model.velocity_hidden=[8]",
            "--set", "grpo.n=3",
            "--set", "grpo.m=2",
            "--set", "rl.questions_per_step=1",
            "--set", "eval.samples_per_question=2",
        ])
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    let out = bin().args(["export", "--run-dir"]).arg(&dir).output().unwrap();
    assert!(out.status.success());
    assert!(dir.join("plots/ladi_series.csv").exists());
    let out = bin().arg("inspect-checkpoint").arg(dir.join("rl/checkpoint.ckpt")).output().unwrap();
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("policy: ladi"));
    assert!(text.contains("step: 2"));

    let out = bin()
        .args(["eval", "--checkpoint"])
        .arg(dir.join("rl/checkpoint.ckpt"))
        .args(["--output-dir"])
        .arg(tmp.path().join("ev"))
        .args(["--set", "model.velocity_hidden=[8]", "--set", "eval.samples_per_question=2"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8(out.stdout).unwrap().contains("\"stage\":\"eval\""));
}
