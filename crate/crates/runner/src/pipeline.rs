//! Staged experiment pipeline.
//!
//! Layout of a run directory:
//!
//! ```text
//! config.toml          resolved configuration
//! run.json             code version, seed, stage list
//! <stage>/checkpoint.ckpt
//! <stage>/metrics.jsonl   one record per training step (or SFT epoch)
//! <stage>/eval.jsonl      periodic evaluations
//! <stage>/summary.json
//! ```
//!
//! Every stage draws from its own seeded stream, and evaluations reuse one
//! fixed stream so checkpoints are compared on common random numbers.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use latentrl::arbaseline::{train_ar_sft, ArPolicy, ArTrainer};
use latentrl::envs::{Condition, EnvSpec};
use latentrl::evaluate::{evaluate_ar, evaluate_points, evaluate_reasoner, EvalReport};
use latentrl::flowlat::{draw_fm, fm_loss_graph};
use latentrl::numcore::{
    adamw_step_ranges, grad, normal_vec, seeded_rng, AdamState, AdamWConfig, Checkpoint, CheckpointMeta, ParamVector,
    Rng,
};
use latentrl::reasoner::{modsum_corpus, parse_corpus, train_sft, write_corpus, LatentReasoner, SftRecord, TraceExample};
use latentrl::rl::{LatentPolicy, MetricsRecord, RlTrainer};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Stage};
use crate::error::{io_err, Result, RunError};

pub const CODE_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

const SALT_CORPUS: u64 = 1;
const SALT_INIT: u64 = 2;
const SALT_EVAL: u64 = 3;

fn stream(seed: u64, salt: u64) -> Rng {
    seeded_rng(seed.wrapping_add(salt.wrapping_mul(0x9E37_79B9_7F4A_7C15)))
}

fn stage_salt(stage: Stage) -> u64 {
    16 + stage as u64
}

/// Machine-readable result of one stage for one policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSummary {
    pub stage: String,
    pub policy: String,
    pub steps: u64,
    /// Mean rollout reward of the last training step; the evaluation mean
    /// reward for stages without rollouts.
    pub final_mean_reward: f64,
    pub pass_at_1: f64,
    pub pass_at_16: Option<f64>,
    pub mode_coverage: f64,
    pub entropy_start: f64,
    pub entropy_end: f64,
    pub eval: EvalReport,
}

/// One line of an `eval.jsonl` log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: u64,
    pub policy: String,
    #[serde(flatten)]
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub code_version: String,
    pub seed: u64,
    pub stages: Vec<Stage>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub summaries: Vec<StageSummary>,
}

/// Line-delimited JSON, flushed per record so a failed run keeps its log.
pub struct JsonlWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl JsonlWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(io_err(path))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        })
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<()> {
        let line = serde_json::to_string(record).map_err(|e| RunError::Config(e.to_string()))?;
        writeln!(self.out, "{line}").map_err(io_err(&self.path))?;
        self.out.flush().map_err(io_err(&self.path))
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| RunError::Config(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(io_err(path))
}

pub fn read_summaries(path: &Path) -> Result<Vec<StageSummary>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| RunError::Json {
        path: path.to_path_buf(),
        line: 1,
        source,
    })
}

/// The latent model or the autoregressive baseline, with parameters.
pub enum Policy<'a> {
    Ladi { model: &'a LatentReasoner, params: &'a [f64] },
    Ar { policy: &'a ArPolicy, params: &'a [f64] },
}

impl Policy<'_> {
    pub fn tag(&self) -> &'static str {
        match self {
            Policy::Ladi { .. } => "ladi",
            Policy::Ar { .. } => "ar",
        }
    }
}

/// Evaluation on every question with the configured sample count and the
/// fixed evaluation stream.
pub fn evaluate_policy(cfg: &ExperimentConfig, policy: &Policy<'_>) -> Result<EvalReport> {
    let qs = cfg.env.conditions();
    let n = cfg.eval.samples_per_question;
    let mut rng = stream(cfg.seed, SALT_EVAL);
    let report = match (policy, &cfg.env) {
        (Policy::Ladi { model, params }, EnvSpec::Mixture { .. }) => {
            evaluate_points(&model.velocity, params, &cfg.env, &qs, n, &cfg.sampler.eval, &mut rng)?
        }
        (Policy::Ladi { model, params }, EnvSpec::Modsum { .. }) => {
            evaluate_reasoner(model, params, &cfg.env, &qs, n, &cfg.sampler.eval, &cfg.sampling, &mut rng)?
        }
        (Policy::Ar { policy, params }, _) => evaluate_ar(policy, params, &cfg.env, &qs, n, &cfg.sampling, &mut rng)?,
    };
    Ok(report)
}

pub fn latent_model(cfg: &ExperimentConfig) -> Result<LatentReasoner> {
    Ok(LatentReasoner::new(cfg.model.clone(), cfg.env.condition_dim())?)
}

pub fn ar_policy(cfg: &ExperimentConfig) -> Result<ArPolicy> {
    Ok(ArPolicy::new(
        cfg.env.condition_dim(),
        cfg.baseline.embed,
        cfg.baseline.hidden,
        cfg.model.max_len,
    )?)
}

/// The supervised corpus: the configured file, or one generated from the
/// run seed (identical for every stage that asks).
pub fn corpus(cfg: &ExperimentConfig) -> Result<Vec<TraceExample>> {
    if let Some(path) = &cfg.data.corpus {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        return Ok(parse_corpus(&text)?);
    }
    match cfg.env {
        EnvSpec::Modsum { answer_len } => Ok(modsum_corpus(answer_len, cfg.sft.per_target, &mut stream(cfg.seed, SALT_CORPUS))),
        EnvSpec::Mixture { .. } => Err(RunError::Config("the mixture task has no text corpus".into())),
    }
}

fn ladi_meta(cfg: &ExperimentConfig, model: &LatentReasoner, step: u64) -> Result<CheckpointMeta> {
    let widths = [
        ("velocity".to_string(), cfg.model.velocity_hidden.clone()),
        ("text".to_string(), vec![cfg.model.text_embed, cfg.model.text_hidden]),
        ("encoder".to_string(), vec![cfg.model.encoder_embed, cfg.model.encoder_hidden]),
    ]
    .into_iter()
    .collect();
    Ok(CheckpointMeta {
        widths,
        layout: model.layout.clone(),
        step,
        seed: cfg.seed,
        extra: serde_json::json!({
            "policy": "ladi",
            "model": cfg.model,
            "env": cfg.env,
            "code_version": CODE_VERSION,
        }),
    })
}

fn ar_meta(cfg: &ExperimentConfig, policy: &ArPolicy, step: u64) -> CheckpointMeta {
    CheckpointMeta {
        widths: [("ar".to_string(), vec![cfg.baseline.embed, cfg.baseline.hidden])].into_iter().collect(),
        layout: policy.layout.clone(),
        step,
        seed: cfg.seed,
        extra: serde_json::json!({
            "policy": "ar",
            "max_len": cfg.model.max_len,
            "env": cfg.env,
            "code_version": CODE_VERSION,
        }),
    }
}

/// The `policy` tag stored in a checkpoint, if any.
pub fn checkpoint_policy(ckpt: &Checkpoint) -> Option<&str> {
    ckpt.meta.extra.get("policy").and_then(|v| v.as_str())
}

fn load_for(path: &Path, tag: &str, layout: &latentrl::numcore::ParamLayout) -> Result<Checkpoint> {
    let ckpt = Checkpoint::load(path)?;
    if checkpoint_policy(&ckpt) != Some(tag) {
        return Err(RunError::Config(format!(
            "{} is not a `{tag}` checkpoint (found {:?})",
            path.display(),
            checkpoint_policy(&ckpt)
        )));
    }
    if &ckpt.meta.layout != layout {
        return Err(RunError::Config(format!(
            "{}: parameter layout does not match the configured model sizes",
            path.display()
        )));
    }
    Ok(ckpt)
}

fn summary(stage: Stage, policy: &str, steps: u64, reward: Option<f64>, first: &EvalReport, last: &EvalReport) -> StageSummary {
    StageSummary {
        stage: stage.name().into(),
        policy: policy.into(),
        steps,
        final_mean_reward: reward.unwrap_or(last.mean_reward),
        pass_at_1: last.pass_at(1).unwrap_or(0.0),
        pass_at_16: last.pass_at(16),
        mode_coverage: last.mode_coverage,
        entropy_start: first.entropy,
        entropy_end: last.entropy,
        eval: last.clone(),
    }
}

fn questions_for(all: &[Condition], per_step: usize, step: usize) -> Vec<Condition> {
    if per_step == 0 || per_step >= all.len() {
        return all.to_vec();
    }
    (0..per_step).map(|i| all[(step * per_step + i) % all.len()].clone()).collect()
}

/// Everything the stages hand to each other in memory.
#[derive(Default)]
struct Carry {
    ladi: Option<ParamVector>,
    ar: Option<ParamVector>,
}

struct StageRun<'a> {
    cfg: &'a ExperimentConfig,
    dir: PathBuf,
    progress: &'a mut dyn FnMut(&str),
}

impl StageRun<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn sft(&mut self, carry: &mut Carry) -> Result<Vec<StageSummary>> {
        let cfg = self.cfg;
        let model = latent_model(cfg)?;
        let mut rng = stream(cfg.seed, stage_salt(Stage::Sft));
        let mut params = model.init_params(&mut stream(cfg.seed, SALT_INIT));
        let mut adam = AdamState::new(params.len());
        let first = evaluate_policy(cfg, &Policy::Ladi { model: &model, params: &params.values })?;
        let mut log = JsonlWriter::create(&self.path("metrics.jsonl"))?;
        let mut failure = None;
        let mut epochs = 0u64;
        match cfg.env {
            EnvSpec::Modsum { .. } => {
                let corpus = corpus(cfg)?;
                std::fs::write(self.path("corpus.jsonl"), write_corpus(&corpus)?).map_err(io_err(self.path("corpus.jsonl")))?;
                train_sft(&model, &mut params, &mut adam, &corpus, &cfg.sft, &mut rng, |rec| {
                    epochs += 1;
                    if failure.is_none() {
                        failure = log.write(rec).err();
                    }
                })?;
            }
            EnvSpec::Mixture { .. } => {
                train_flow_on_centers(cfg, &model, &mut params, &mut adam, &mut rng, |rec| {
                    epochs += 1;
                    if failure.is_none() {
                        failure = log.write(rec).err();
                    }
                })?;
            }
        }
        if let Some(e) = failure {
            return Err(e);
        }
        let last = evaluate_policy(cfg, &Policy::Ladi { model: &model, params: &params.values })?;
        let mut evals = JsonlWriter::create(&self.path("eval.jsonl"))?;
        for (step, report) in [(0, &first), (epochs, &last)] {
            evals.write(&EvalRecord { step, policy: "ladi".into(), report: report.clone() })?;
        }
        (self.progress)(&format!("sft: pass@1 {:.3} -> {:.3}", first.pass_at(1).unwrap_or(0.0), last.pass_at(1).unwrap_or(0.0)));
        Checkpoint { meta: ladi_meta(cfg, &model, 0)?, params: params.clone(), adam }.save(&self.path("checkpoint.ckpt"))?;
        carry.ladi = Some(params);
        Ok(vec![summary(Stage::Sft, "ladi", epochs, None, &first, &last)])
    }

    fn rl(&mut self, carry: &mut Carry) -> Result<Vec<StageSummary>> {
        let cfg = self.cfg;
        let model = latent_model(cfg)?;
        let params = match carry.ladi.take() {
            Some(p) => p,
            None => {
                let path = cfg.init_checkpoint.as_ref().ok_or_else(|| RunError::Config("no latent model to train".into()))?;
                load_for(path, "ladi", &model.layout)?.params
            }
        };
        let policy = match cfg.env {
            EnvSpec::Modsum { .. } => LatentPolicy::from(&model),
            EnvSpec::Mixture { .. } => LatentPolicy::latent_only(model.velocity.clone()),
        };
        let trainer = RlTrainer {
            policy,
            env: cfg.env.clone(),
            sampler: cfg.sampler.train.clone(),
            guidance: cfg.guidance,
            grpo: cfg.grpo,
            sampling: cfg.sampling,
            optim: AdamWConfig {
                lr: cfg.rl.lr,
                weight_decay: cfg.rl.weight_decay,
                ..AdamWConfig::default()
            },
        };
        trainer.validate()?;
        let n = params.len();
        let mut state = trainer.start(params, AdamState::new(n));
        let qs = cfg.env.conditions();
        let mut rng = stream(cfg.seed, stage_salt(Stage::Rl));
        let mut log = JsonlWriter::create(&self.path("metrics.jsonl"))?;
        let mut evals = JsonlWriter::create(&self.path("eval.jsonl"))?;
        let eval_now = |values: &[f64]| evaluate_policy(cfg, &Policy::Ladi { model: &model, params: values });
        let first = eval_now(&state.params.values)?;
        evals.write(&EvalRecord { step: 0, policy: "ladi".into(), report: first.clone() })?;
        let mut last = first.clone();
        let mut last_reward = None;
        for step in 0..cfg.rl.steps {
            let rec = trainer.train_step(&mut state, &questions_for(&qs, cfg.rl.questions_per_step, step), &mut rng)?;
            log.write(&rec)?;
            last_reward = Some(rec.mean_reward);
            let done = step + 1;
            if done == cfg.rl.steps || (cfg.eval.every > 0 && done % cfg.eval.every == 0) {
                last = eval_now(&state.params.values)?;
                evals.write(&EvalRecord { step: done as u64, policy: "ladi".into(), report: last.clone() })?;
                (self.progress)(&format!(
                    "rl step {done}: reward {:.3}, pass@1 {:.3}",
                    rec.mean_reward,
                    last.pass_at(1).unwrap_or(0.0)
                ));
            }
        }
        Checkpoint {
            meta: ladi_meta(cfg, &model, state.step)?,
            params: state.params.clone(),
            adam: state.adam.clone(),
        }
        .save(&self.path("checkpoint.ckpt"))?;
        carry.ladi = Some(state.params);
        Ok(vec![summary(Stage::Rl, "ladi", state.step, last_reward, &first, &last)])
    }

    fn rl_baseline(&mut self, carry: &mut Carry) -> Result<Vec<StageSummary>> {
        let cfg = self.cfg;
        let policy = ar_policy(cfg)?;
        let mut rng = stream(cfg.seed, stage_salt(Stage::RlBaseline));
        let mut log = JsonlWriter::create(&self.path("metrics.jsonl"))?;
        let params = match &cfg.baseline.init_checkpoint {
            Some(path) => load_for(path, "ar", &policy.layout)?.params,
            None => {
                let mut p = policy.init_params(0.1, &mut stream(cfg.seed, SALT_INIT));
                let mut adam = AdamState::new(p.len());
                let corpus = corpus(cfg)?;
                let mut sft_log = JsonlWriter::create(&self.path("sft_metrics.jsonl"))?;
                let mut failure = None;
                train_ar_sft(
                    &policy,
                    &mut p,
                    &mut adam,
                    &corpus,
                    cfg.baseline.sft_epochs,
                    cfg.baseline.sft_batch_size,
                    cfg.baseline.sft_lr,
                    &mut rng,
                    |epoch, ce| {
                        if failure.is_none() {
                            failure = sft_log.write(&serde_json::json!({ "epoch": epoch, "ce": ce })).err();
                        }
                    },
                )?;
                if let Some(e) = failure {
                    return Err(e);
                }
                p
            }
        };
        let trainer = ArTrainer {
            policy: policy.clone(),
            env: cfg.env.clone(),
            config: cfg.baseline.grpo,
            sampling: cfg.sampling,
            optim: AdamWConfig {
                lr: cfg.baseline.lr,
                weight_decay: cfg.rl.weight_decay,
                ..AdamWConfig::default()
            },
        };
        trainer.validate()?;
        let n = params.len();
        let mut state = trainer.start(params, AdamState::new(n));
        let qs = cfg.env.conditions();
        let mut evals = JsonlWriter::create(&self.path("eval.jsonl"))?;
        let eval_now = |values: &[f64]| evaluate_policy(cfg, &Policy::Ar { policy: &policy, params: values });
        let first = eval_now(&state.params.values)?;
        evals.write(&EvalRecord { step: 0, policy: "ar".into(), report: first.clone() })?;
        let mut last = first.clone();
        let mut last_reward = None;
        for step in 0..cfg.baseline.steps {
            let rec: MetricsRecord =
                trainer.train_step(&mut state, &questions_for(&qs, cfg.baseline.questions_per_step, step), &mut rng)?;
            log.write(&rec)?;
            last_reward = Some(rec.mean_reward);
            let done = step + 1;
            if done == cfg.baseline.steps || (cfg.eval.every > 0 && done % cfg.eval.every == 0) {
                last = eval_now(&state.params.values)?;
                evals.write(&EvalRecord { step: done as u64, policy: "ar".into(), report: last.clone() })?;
                (self.progress)(&format!(
                    "rl-baseline step {done}: reward {:.3}, pass@1 {:.3}",
                    rec.mean_reward,
                    last.pass_at(1).unwrap_or(0.0)
                ));
            }
        }
        Checkpoint {
            meta: ar_meta(cfg, &policy, state.step),
            params: state.params.clone(),
            adam: state.adam.clone(),
        }
        .save(&self.path("checkpoint.ckpt"))?;
        carry.ar = Some(state.params);
        Ok(vec![summary(Stage::RlBaseline, "ar", state.step, last_reward, &first, &last)])
    }

    fn eval(&mut self, carry: &mut Carry) -> Result<Vec<StageSummary>> {
        let cfg = self.cfg;
        let mut out = Vec::new();
        let mut evals = JsonlWriter::create(&self.path("eval.jsonl"))?;
        let model = latent_model(cfg)?;
        let ladi = match carry.ladi.take() {
            Some(p) => Some(p),
            None => match &cfg.init_checkpoint {
                Some(path) => Some(load_for(path, "ladi", &model.layout)?.params),
                None => None,
            },
        };
        if let Some(p) = &ladi {
            let report = evaluate_policy(cfg, &Policy::Ladi { model: &model, params: &p.values })?;
            evals.write(&EvalRecord { step: 0, policy: "ladi".into(), report: report.clone() })?;
            out.push(summary(Stage::Eval, "ladi", 0, None, &report, &report));
        }
        let ar = match carry.ar.take() {
            Some(p) => Some(p),
            None if matches!(cfg.env, EnvSpec::Modsum { .. }) => match &cfg.baseline.init_checkpoint {
                Some(path) => Some(load_for(path, "ar", &ar_policy(cfg)?.layout)?.params),
                None => None,
            },
            None => None,
        };
        if let Some(p) = &ar {
            let policy = ar_policy(cfg)?;
            let report = evaluate_policy(cfg, &Policy::Ar { policy: &policy, params: &p.values })?;
            evals.write(&EvalRecord { step: 0, policy: "ar".into(), report: report.clone() })?;
            out.push(summary(Stage::Eval, "ar", 0, None, &report, &report));
        }
        if out.is_empty() {
            return Err(RunError::Config("nothing to evaluate: no model was trained or loaded".into()));
        }
        for s in &out {
            (self.progress)(&format!("eval {}: pass@1 {:.3}, pass@16 {:?}", s.policy, s.pass_at_1, s.pass_at_16));
        }
        carry.ladi = ladi;
        carry.ar = ar;
        Ok(out)
    }
}

/// Flow pre-training for the mixture task: flow matching on points drawn
/// around each center (std = radius / 2).
fn train_flow_on_centers(
    cfg: &ExperimentConfig,
    model: &LatentReasoner,
    params: &mut ParamVector,
    adam: &mut AdamState,
    rng: &mut Rng,
    mut log: impl FnMut(&SftRecord),
) -> Result<()> {
    let EnvSpec::Mixture { centers, radius } = &cfg.env else {
        return Err(RunError::Config("flow pre-training on centers needs the mixture task".into()));
    };
    let cond = cfg.env.conditions()[0].features.clone();
    let mut data = Vec::with_capacity(centers.len() * cfg.data.points_per_center);
    for c in centers {
        for _ in 0..cfg.data.points_per_center {
            let z = normal_vec(rng, 2);
            data.push((vec![c[0] + 0.5 * radius * z[0], c[1] + 0.5 * radius * z[1]], cond.clone()));
        }
    }
    let opt = AdamWConfig {
        lr: cfg.sft.lr,
        ..AdamWConfig::default()
    };
    let ranges = [model.velocity.range()];
    for epoch in 0..cfg.sft.flow_epochs {
        data.shuffle(rng);
        let (mut acc, mut batches) = (0.0, 0usize);
        for batch in data.chunks(cfg.sft.batch_size) {
            let draws = draw_fm(rng, batch.len(), 2, cfg.sft.t_clamp);
            let (loss, grads) = grad(&params.values, |g| fm_loss_graph(g, &model.velocity, batch, &draws))?;
            adamw_step_ranges(&mut params.values, &grads, adam, &opt, &ranges)?;
            acc += loss;
            batches += 1;
        }
        log(&SftRecord {
            phase: "flow".into(),
            epoch,
            fm: acc / batches as f64,
            ce: 0.0,
            kl: 0.0,
        });
    }
    Ok(())
}

/// Runs the configured stages in order inside `cfg.output_dir`. On failure
/// the artifacts of finished stages (and the partial logs of the failing
/// one) stay on disk.
pub fn run(cfg: &ExperimentConfig, progress: &mut dyn FnMut(&str)) -> Result<RunOutcome> {
    cfg.validate()?;
    let dir = cfg.output_dir.clone();
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let cfg_path = dir.join("config.toml");
    std::fs::write(&cfg_path, cfg.to_toml()?).map_err(io_err(&cfg_path))?;
    write_json(
        &dir.join("run.json"),
        &RunInfo {
            code_version: CODE_VERSION.into(),
            seed: cfg.seed,
            stages: cfg.ordered_stages(),
        },
    )?;
    let mut carry = Carry::default();
    let mut summaries = Vec::new();
    for stage in cfg.ordered_stages() {
        let stage_dir = dir.join(stage.name());
        std::fs::create_dir_all(&stage_dir).map_err(io_err(&stage_dir))?;
        let mut runner = StageRun {
            cfg,
            dir: stage_dir.clone(),
            progress: &mut *progress,
        };
        let result = match stage {
            Stage::Sft => runner.sft(&mut carry),
            Stage::Rl => runner.rl(&mut carry),
            Stage::RlBaseline => runner.rl_baseline(&mut carry),
            Stage::Eval => runner.eval(&mut carry),
        };
        let out = result.map_err(|e| RunError::Stage {
            stage: stage.name(),
            source: Box::new(e),
        })?;
        write_json(&stage_dir.join("summary.json"), &out)?;
        summaries.extend(out);
    }
    Ok(RunOutcome { dir, summaries })
}
