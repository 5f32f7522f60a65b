//! Experiment configuration.
//!
//! A config file only needs the keys it changes: the file is merged over the
//! serialized defaults and the result is deserialized with unknown keys
//! rejected at every level. Tables carrying a `kind` tag (the environment)
//! replace the default table instead of merging into it.

use std::path::{Path, PathBuf};

use latentrl::arbaseline::ArConfig;
use latentrl::envs::EnvSpec;
use latentrl::flowlat::SamplerConfig;
use latentrl::guidance::GuidanceConfig;
use latentrl::reasoner::{ModelConfig, SftConfig};
use latentrl::rl::GrpoConfig;
use latentrl::textpol::SamplingOptions;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Result, RunError};

/// Name of the only environment variable the runner reads.
pub const OUTPUT_DIR_ENV: &str = "LATENTRL_OUTPUT_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Sft,
    Rl,
    RlBaseline,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Sft, Stage::Rl, Stage::RlBaseline, Stage::Eval];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Sft => "sft",
            Stage::Rl => "rl",
            Stage::RlBaseline => "rl-baseline",
            Stage::Eval => "eval",
        }
    }

    pub fn parse(s: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|st| st.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSection {
    pub train: SamplerConfig,
    pub eval: SamplerConfig,
}

/// Supervised corpus: generated from the run seed unless a file is given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus: Option<PathBuf>,
    /// Mixture only: points drawn per center for flow pre-training.
    pub points_per_center: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RlSection {
    pub steps: usize,
    /// Questions per step; 0 means every question the task poses.
    pub questions_per_step: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineSection {
    #[serde(flatten)]
    pub grpo: ArConfig,
    pub embed: usize,
    pub hidden: usize,
    pub sft_epochs: usize,
    pub sft_lr: f64,
    pub sft_batch_size: usize,
    pub steps: usize,
    pub questions_per_step: usize,
    pub lr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub samples_per_question: usize,
    /// Evaluate during RL every this many steps (0: only at start and end).
    pub every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub stages: Vec<Stage>,
    /// Latent-model checkpoint used when the `sft` stage is not run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_checkpoint: Option<PathBuf>,
    pub env: EnvSpec,
    pub model: ModelConfig,
    pub sampler: SamplerSection,
    pub guidance: GuidanceConfig,
    pub grpo: GrpoConfig,
    pub sampling: SamplingOptions,
    pub sft: SftConfig,
    pub data: DataSection,
    pub rl: RlSection,
    pub baseline: BaselineSection,
    pub eval: EvalSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            stages: Stage::ALL.to_vec(),
            init_checkpoint: None,
            env: EnvSpec::default(),
            model: ModelConfig::default(),
            sampler: SamplerSection {
                train: SamplerConfig::train_default(),
                eval: SamplerConfig::eval_default(),
            },
            guidance: GuidanceConfig::default(),
            grpo: GrpoConfig::default(),
            sampling: SamplingOptions::default(),
            sft: SftConfig::default(),
            data: DataSection {
                corpus: None,
                points_per_center: 256,
            },
            rl: RlSection {
                steps: 300,
                questions_per_step: 0,
                lr: 1e-2,
                weight_decay: 0.0,
            },
            baseline: BaselineSection {
                grpo: ArConfig::default(),
                embed: 16,
                hidden: 64,
                sft_epochs: 160,
                sft_lr: 3e-3,
                sft_batch_size: 32,
                steps: 300,
                questions_per_step: 0,
                lr: 1e-2,
                init_checkpoint: None,
            },
            eval: EvalSection {
                samples_per_question: 20,
                every: 50,
            },
        }
    }
}

fn config_err(msg: impl Into<String>) -> RunError {
    RunError::Config(msg.into())
}

/// Deep merge of `over` into `base`. Tables with a `kind` key replace.
fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_table() && v.is_table() && v.get("kind").is_none() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

/// Parses the right-hand side of `key=value`: any TOML value, or a bare
/// string when it does not parse as one.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_path(root: &mut toml::Value, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(config_err(format!("malformed key `{key}`")));
    }
    let mut node = root;
    for p in &parts[..parts.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| config_err(format!("`{key}`: `{p}` is not a table")))?;
        node = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| config_err(format!("`{key}` does not name a table entry")))?;
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Where a resolved config came from, lowest precedence first.
#[derive(Debug, Clone, Default)]
pub struct ConfigSources {
    pub file: Option<PathBuf>,
    /// Output directory from the environment.
    pub env_output_dir: Option<PathBuf>,
    /// `key=value` overrides from the command line, in order.
    pub overrides: Vec<(String, String)>,
}

impl ExperimentConfig {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| config_err(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::resolve_str(Some(text), None, &[])
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml(&text).map_err(|e| match e {
            RunError::Config(m) => config_err(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Defaults, then the file, then the environment's output directory,
    /// then explicit overrides.
    pub fn resolve(sources: &ConfigSources) -> Result<Self> {
        let text = match &sources.file {
            Some(p) => Some(std::fs::read_to_string(p).map_err(io_err(p))?),
            None => None,
        };
        Self::resolve_str(text.as_deref(), sources.env_output_dir.as_deref(), &sources.overrides)
    }

    fn resolve_str(file: Option<&str>, env_out: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut root = toml::Value::try_from(Self::default()).map_err(|e| config_err(e.to_string()))?;
        if let Some(text) = file {
            let user: toml::Table = text.parse().map_err(|e: toml::de::Error| config_err(e.to_string()))?;
            merge(&mut root, toml::Value::Table(user));
        }
        if let Some(dir) = env_out {
            set_path(&mut root, "output_dir", toml::Value::String(dir.display().to_string()))?;
        }
        for (k, v) in overrides {
            // An inline table such as `env={kind="mixture",...}` replaces
            // the whole entry.
            set_path(&mut root, k, parse_value(v))?;
        }
        let cfg: Self = root.try_into().map_err(|e: toml::de::Error| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every check that can fail before any work starts.
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(config_err("stage list is empty"));
        }
        let mut sorted = self.stages.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.stages.len() {
            return Err(config_err("stage list repeats a stage"));
        }
        self.env.validate()?;
        self.model.validate()?;
        self.sampler.train.validate()?;
        self.sampler.eval.validate()?;
        self.grpo.validate()?;
        self.sampling.validate()?;
        self.sft.validate()?;
        self.baseline.grpo.validate()?;
        if !(self.guidance.gamma_max >= 0.0) {
            return Err(config_err("guidance.gamma_max must be non-negative"));
        }
        if self.grpo.kl_beta > 0.0 && !(self.sampler.train.noise_level > 0.0) {
            return Err(config_err("the KL term needs a positive sampler.train.noise_level"));
        }
        for (name, lr) in [("rl.lr", self.rl.lr), ("baseline.lr", self.baseline.lr), ("baseline.sft_lr", self.baseline.sft_lr)] {
            if !(lr >= 0.0) || !lr.is_finite() {
                return Err(config_err(format!("{name} must be a finite non-negative number")));
            }
        }
        if self.baseline.embed == 0 || self.baseline.hidden == 0 || self.baseline.sft_batch_size == 0 {
            return Err(config_err("baseline sizes must be positive"));
        }
        if self.eval.samples_per_question == 0 {
            return Err(config_err("eval.samples_per_question must be positive"));
        }
        let questions = self.env.conditions().len();
        for (name, q) in [
            ("rl.questions_per_step", self.rl.questions_per_step),
            ("baseline.questions_per_step", self.baseline.questions_per_step),
        ] {
            if q > questions {
                return Err(config_err(format!("{name} = {q} exceeds the {questions} questions of the task")));
            }
        }
        let has = |s: Stage| self.stages.contains(&s);
        match self.env {
            EnvSpec::Modsum { answer_len } => {
                if answer_len + 1 > self.model.max_len {
                    return Err(config_err(format!(
                        "model.max_len = {} cannot hold a {answer_len}-digit answer plus EOS",
                        self.model.max_len
                    )));
                }
            }
            EnvSpec::Mixture { .. } => {
                if self.model.latent_rows * self.model.latent_cols != 2 {
                    return Err(config_err("the mixture task needs a 2-value latent (model.latent_rows × latent_cols = 2)"));
                }
                if has(Stage::RlBaseline) {
                    return Err(config_err("the rl-baseline stage needs a text task (env.kind = \"modsum\")"));
                }
                if self.data.points_per_center == 0 {
                    return Err(config_err("data.points_per_center must be positive"));
                }
            }
        }
        if (has(Stage::Rl) || has(Stage::Eval)) && !has(Stage::Sft) && self.init_checkpoint.is_none() {
            let needs_latent = has(Stage::Rl) || !has(Stage::RlBaseline) && self.baseline.init_checkpoint.is_none();
            if needs_latent {
                return Err(config_err("the rl and eval stages need the sft stage or init_checkpoint"));
            }
        }
        Ok(())
    }

    /// Stages in execution order.
    pub fn ordered_stages(&self) -> Vec<Stage> {
        let mut s = self.stages.clone();
        s.sort();
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_file_keeps_other_defaults() {
        let cfg = ExperimentConfig::from_toml("seed = 7\n[grpo]\nn = 8\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.grpo.n, 8);
        assert_eq!(cfg.grpo.m, 5);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in ["sede = 1", "[grpo]\nnn = 3", "[sampler.train]\nstep = 3"] {
            let err = ExperimentConfig::from_toml(text).unwrap_err();
            assert!(matches!(err, RunError::Config(_)), "{text}: {err}");
        }
    }

    #[test]
    fn tagged_env_replaces_the_default_table() {
        let text = "stages = [\"sft\", \"rl\"]\n[env]\nkind = \"mixture\"\ncenters = [[1.0, 0.0], [-1.0, 0.0]]\nradius = 0.3\n[model]\nlatent_rows = 1\nlatent_cols = 2\n";
        let cfg = ExperimentConfig::from_toml(text).unwrap();
        assert!(matches!(cfg.env, EnvSpec::Mixture { .. }));
    }

    #[test]
    fn overrides_beat_file_and_env() {
        let sources = ConfigSources {
            file: None,
            env_output_dir: Some("from-env".into()),
            overrides: vec![("grpo.m".into(), "3".into()), ("rl.lr".into(), "0.5".into())],
        };
        let cfg = ExperimentConfig::resolve(&sources).unwrap();
        assert_eq!(cfg.output_dir, PathBuf::from("from-env"));
        assert_eq!(cfg.grpo.m, 3);
        assert_eq!(cfg.rl.lr, 0.5);
        let sources = ConfigSources {
            overrides: vec![("output_dir".into(), "from-flag".into())],
            ..sources
        };
        assert_eq!(ExperimentConfig::resolve(&sources).unwrap().output_dir, PathBuf::from("from-flag"));
    }

    #[test]
    fn invalid_configs_fail_before_work() {
        for (k, v) in [
            ("grpo.n", "1"),
            ("stages", "[]"),
            ("stages", "[\"rl\", \"rl\"]"),
            ("stages", "[\"rl\"]"),
            ("sampler.train.cfg", "true"),
            ("rl.questions_per_step", "11"),
            ("model.max_len", "4"),
        ] {
            let sources = ConfigSources {
                overrides: vec![(k.into(), v.into())],
                ..Default::default()
            };
            assert!(ExperimentConfig::resolve(&sources).is_err(), "{k}={v}");
        }
    }

    #[test]
    fn stages_run_in_canonical_order() {
        let cfg = ExperimentConfig::from_toml("stages = [\"eval\", \"sft\"]").unwrap();
        assert_eq!(cfg.ordered_stages(), vec![Stage::Sft, Stage::Eval]);
    }
}
