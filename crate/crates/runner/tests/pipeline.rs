//! End-to-end runs of the staged pipeline on tiny settings.

use std::path::Path;

use latentrl::numcore::Checkpoint;
use latentrl::reasoner::{infer, LatentReasoner};
use latentrl::textpol::SamplingOptions;
use latentrl_runner::export::{pass_table_from_log, series_from_log};
use latentrl_runner::pipeline::{latent_model, read_summaries};
use latentrl_runner::{export_plot_data, run, ExperimentConfig, RunError, Stage};

fn tiny(dir: &Path) -> ExperimentConfig {
    let text = format!(
        r#"
seed = 3
output_dir = "{}"
[model]
velocity_hidden = [16]
text_hidden = 16
encoder_hidden = 16
[sft]
recon_epochs = 2
flow_epochs = 2
per_target = 4
[grpo]
n = 4
m = 2
[rl]
steps = 3
questions_per_step = 2
[baseline]
group_size = 8
sft_epochs = 2
steps = 3
questions_per_step = 2
[eval]
samples_per_question = 4
every = 2
"#,
        dir.display()
    );
    ExperimentConfig::from_toml(&text).unwrap()
}

fn quiet() -> impl FnMut(&str) {
    |_| {}
}

#[test]
fn identical_seed_gives_identical_logs() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tiny(&tmp.path().join("a"));
    let b = tiny(&tmp.path().join("b"));
    run(&a, &mut quiet()).unwrap();
    run(&b, &mut quiet()).unwrap();
    for stage in ["sft", "rl", "rl-baseline"] {
        for file in ["metrics.jsonl", "eval.jsonl", "checkpoint.ckpt"] {
            let x = std::fs::read(a.output_dir.join(stage).join(file)).unwrap();
            let y = std::fs::read(b.output_dir.join(stage).join(file)).unwrap();
            assert!(!x.is_empty(), "{stage}/{file} empty");
            assert_eq!(x, y, "{stage}/{file} differs");
        }
    }
}

#[test]
fn run_directory_records_config_and_version() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(tmp.path());
    let outcome = run(&cfg, &mut quiet()).unwrap();
    let saved = ExperimentConfig::load(&tmp.path().join("config.toml")).unwrap();
    assert_eq!(saved, cfg);
    let info: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("run.json")).unwrap()).unwrap();
    assert!(info["code_version"].as_str().unwrap().contains(env!("CARGO_PKG_VERSION")));
    assert_eq!(outcome.summaries.len(), 5);
    for stage in ["sft", "rl", "rl-baseline", "eval"] {
        let s = read_summaries(&tmp.path().join(stage).join("summary.json")).unwrap();
        assert!(!s.is_empty());
        for x in &s {
            assert!(x.pass_at_1 >= 0.0 && x.pass_at_1 <= 1.0);
            assert!(x.entropy_start.is_finite() && x.entropy_end.is_finite());
        }
    }
}

#[test]
fn checkpoint_round_trip_preserves_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny(tmp.path());
    cfg.stages = vec![Stage::Sft];
    run(&cfg, &mut quiet()).unwrap();
    let ckpt = Checkpoint::load(&tmp.path().join("sft/checkpoint.ckpt")).unwrap();
    let again = {
        let p = tmp.path().join("copy.ckpt");
        ckpt.save(&p).unwrap();
        Checkpoint::load(&p).unwrap()
    };
    assert_eq!(ckpt, again);
    let model: LatentReasoner = latent_model(&cfg).unwrap();
    let q = cfg.env.conditions();
    let opts = SamplingOptions::default();
    for c in &q {
        let mut r1 = latentrl::numcore::seeded_rng(c.id as u64);
        let mut r2 = latentrl::numcore::seeded_rng(c.id as u64);
        let a = infer(&model, &ckpt.params.values, c, &cfg.sampler.eval, &opts, &mut r1).unwrap();
        let b = infer(&model, &again.params.values, c, &cfg.sampler.eval, &opts, &mut r2).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn eval_only_from_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(&tmp.path().join("train"));
    run(&cfg, &mut quiet()).unwrap();
    let mut ev = tiny(&tmp.path().join("eval"));
    ev.stages = vec![Stage::Eval];
    ev.init_checkpoint = Some(cfg.output_dir.join("rl/checkpoint.ckpt"));
    ev.baseline.init_checkpoint = Some(cfg.output_dir.join("rl-baseline/checkpoint.ckpt"));
    let out = run(&ev, &mut quiet()).unwrap();
    assert!(!ev.output_dir.join("sft").exists());
    // Same evaluation stream, same parameters: same report as the training
    // run's own eval stage.
    let trained = read_summaries(&cfg.output_dir.join("eval/summary.json")).unwrap();
    assert_eq!(out.summaries.len(), 2);
    for (a, b) in out.summaries.iter().zip(&trained) {
        assert_eq!(a.policy, b.policy);
        assert_eq!(a.eval, b.eval);
    }
}

#[test]
fn failing_stage_keeps_earlier_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny(tmp.path());
    cfg.stages = vec![Stage::Sft, Stage::RlBaseline];
    cfg.baseline.init_checkpoint = Some(tmp.path().join("missing.ckpt"));
    let err = run(&cfg, &mut quiet()).unwrap_err();
    assert!(matches!(err, RunError::Stage { stage: "rl-baseline", .. }), "{err}");
    assert!(tmp.path().join("sft/checkpoint.ckpt").exists());
    assert!(tmp.path().join("sft/summary.json").exists());
}

#[test]
fn invalid_config_does_no_work() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny(&tmp.path().join("out"));
    cfg.grpo.m = 1;
    assert!(matches!(run(&cfg, &mut quiet()), Err(RunError::Config(_)) | Err(RunError::Core(_))));
    assert!(!cfg.output_dir.exists());
}

#[test]
fn exported_tables_match_the_raw_logs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(tmp.path());
    run(&cfg, &mut quiet()).unwrap();
    let out = tmp.path().join("plots");
    let files = export_plot_data(tmp.path(), &out).unwrap();
    assert_eq!(files.len(), 4);

    // Recompute the series straight from the JSON lines.
    let raw = std::fs::read_to_string(tmp.path().join("rl/metrics.jsonl")).unwrap();
    let mut rdr = csv::Reader::from_path(out.join("ladi_series.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    let lines: Vec<serde_json::Value> = raw.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), lines.len());
    for (r, v) in rows.iter().zip(&lines) {
        assert_eq!(r[0].parse::<u64>().unwrap(), v["step"].as_u64().unwrap());
        assert_eq!(r[1].parse::<f64>().unwrap(), v["mean_reward"].as_f64().unwrap());
        assert_eq!(r[2].parse::<f64>().unwrap(), v["reward_std"].as_f64().unwrap());
        assert_eq!(r[3].parse::<f64>().unwrap(), v["text_entropy"].as_f64().unwrap());
    }
    assert_eq!(series_from_log(&tmp.path().join("rl/metrics.jsonl")).unwrap().len(), 3);

    // pass@k is monotone in k at every evaluated step.
    for method in ["rl", "rl-baseline"] {
        let rows = pass_table_from_log(&tmp.path().join(method).join("eval.jsonl")).unwrap();
        assert!(!rows.is_empty());
        for w in rows.windows(2) {
            if w[0].step == w[1].step {
                assert!(w[1].k > w[0].k);
                assert!(w[1].pass_at_k >= w[0].pass_at_k - 1e-12);
            }
        }
    }
}

#[test]
fn mixture_pipeline_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let text = format!(
        r#"
output_dir = "{}"
stages = ["sft", "rl", "eval"]
[env]
kind = "mixture"
centers = [[1.5, 0.0], [-1.5, 0.0]]
radius = 0.3
[model]
latent_rows = 1
latent_cols = 2
velocity_hidden = [16]
[data]
points_per_center = 16
[sft]
flow_epochs = 3
[grpo]
n = 4
[rl]
steps = 2
[eval]
samples_per_question = 8
"#,
        tmp.path().display()
    );
    let cfg = ExperimentConfig::from_toml(&text).unwrap();
    let out = run(&cfg, &mut quiet()).unwrap();
    assert_eq!(out.summaries.len(), 3);
    assert_eq!(out.summaries[2].entropy_end, 0.0);
}
