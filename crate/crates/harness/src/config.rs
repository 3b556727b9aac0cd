//! Experiment configuration.

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use vctree::learn::{BaselineKind, RlConfig, ScheduleConfig};
use vctree::ndcore::OptimizerConfig;
use vctree::scoring::PretrainConfig;
use vctree::sgg::Protocol;
use vctree::treebuild::Structure;

use crate::synth::SynthSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Sgg,
    Vqa,
}

/// `sl` trains the end task only; `hl` alternates with REINFORCE rounds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Sl,
    Hl,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelDims {
    pub class_embed_dim: usize,
    pub hidden: usize,
    pub pair_dim: usize,
    pub box_hidden: usize,
    pub scoring_hidden: usize,
    pub word_dim: usize,
    pub q_dim: usize,
    pub type_dim: usize,
    pub fuse_dim: usize,
    pub att_hidden: usize,
    pub joint_dim: usize,
    pub gate_hidden: usize,
    pub classifier_hidden: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            class_embed_dim: 16,
            hidden: 64,
            pair_dim: 64,
            box_hidden: 32,
            scoring_hidden: 32,
            word_dim: 16,
            q_dim: 32,
            type_dim: 8,
            fuse_dim: 32,
            att_hidden: 32,
            joint_dim: 32,
            gate_hidden: 32,
            classifier_hidden: 32,
        }
    }
}

/// Either a generator spec or a pair of dataset files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub generator: Option<SynthSpec>,
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            generator: Some(SynthSpec::default()),
            train: None,
            test: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    pub structure: Structure,
    pub mode: Mode,
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelDims,
    pub pretrain: PretrainConfig,
    pub schedule: ScheduleConfig,
    /// Protocol view used for training (SGG).
    pub train_protocol: Protocol,
    /// Protocols evaluated in the report (SGG).
    pub eval_protocols: Vec<Protocol>,
    pub eval_k: Vec<usize>,
    /// K of the Recall@K reward and of the phase metric.
    pub reward_k: usize,
    pub graph_constraint: bool,
    /// VQA: keep the context attention branch.
    pub use_context: bool,
    /// VQA: force the question gate to 1.
    pub unit_gate: bool,
    /// Where to write the report, checkpoint, trees and predictions.
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            task: Task::Sgg,
            structure: Structure::Vctree,
            mode: Mode::Hl,
            seed: 0,
            data: DataConfig::default(),
            model: ModelDims::default(),
            pretrain: PretrainConfig {
                epochs: 3,
                optimizer: OptimizerConfig::adam(1e-3),
                batch_size: 5,
            },
            schedule: ScheduleConfig {
                rounds: 2,
                sl_epochs: 6,
                sl_epochs_after: 2,
                rl_epochs: 1,
                sl_batch: 5,
                sl_optimizer: OptimizerConfig::adam(1e-3),
                rl_optimizer: OptimizerConfig::adam(1e-3),
                baseline: BaselineKind::SelfCritic,
                rl: RlConfig::default(),
            },
            train_protocol: Protocol::PredCls,
            eval_protocols: Protocol::ALL.to_vec(),
            eval_k: vec![20, 50, 100],
            reward_k: 20,
            graph_constraint: true,
            use_context: true,
            unit_gate: false,
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg = Self::from_json_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses a possibly partial config. Nested sections are merged over the
    /// defaults field by field, so `{"schedule": {"rounds": 1}}` keeps the
    /// default optimizers.
    pub fn from_json_str(text: &str) -> anyhow::Result<Self> {
        let user: serde_json::Value = serde_json::from_str(text)?;
        anyhow::ensure!(user.is_object(), "config must be a JSON object");
        let mut merged = serde_json::to_value(ExperimentConfig::default())?;
        merge(&mut merged, user);
        Ok(serde_json::from_value(merged)?)
    }

    /// Sets the run seed and, for generated data, the generator seed.
    pub fn reseed(&mut self, seed: u64) {
        self.seed = seed;
        if let Some(g) = self.data.generator.as_mut() {
            g.seed = seed;
        }
    }

    /// Schedule implied by the mode. `sl` runs one supervised phase with as
    /// many epochs as all supervised phases of the `hl` schedule combined.
    pub fn effective_schedule(&self) -> ScheduleConfig {
        let mut s = self.schedule.clone();
        if self.mode == Mode::Sl {
            s.sl_epochs += s.rounds * s.sl_epochs_after;
            s.rounds = 0;
        }
        s
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        let m = &self.model;
        for (name, v) in [
            ("class_embed_dim", m.class_embed_dim),
            ("hidden", m.hidden),
            ("pair_dim", m.pair_dim),
            ("box_hidden", m.box_hidden),
            ("scoring_hidden", m.scoring_hidden),
            ("word_dim", m.word_dim),
            ("q_dim", m.q_dim),
            ("type_dim", m.type_dim),
            ("fuse_dim", m.fuse_dim),
            ("att_hidden", m.att_hidden),
            ("joint_dim", m.joint_dim),
            ("gate_hidden", m.gate_hidden),
            ("classifier_hidden", m.classifier_hidden),
        ] {
            anyhow::ensure!(v > 0, "model.{name} must be positive");
        }
        if self.mode == Mode::Hl {
            anyhow::ensure!(
                self.structure.is_learnable(),
                "mode `hl` needs a learnable structure (vctree or multibranch), not `{}`",
                self.structure.name()
            );
            anyhow::ensure!(self.schedule.rounds > 0, "mode `hl` needs schedule.rounds > 0");
        }
        for (name, opt) in [
            ("pretrain.optimizer", &self.pretrain.optimizer),
            ("schedule.sl_optimizer", &self.schedule.sl_optimizer),
            ("schedule.rl_optimizer", &self.schedule.rl_optimizer),
        ] {
            anyhow::ensure!(opt.lr() >= 0.0 && opt.lr().is_finite(), "{name}: learning rate must be finite and nonnegative");
        }
        anyhow::ensure!(self.schedule.sl_batch > 0, "schedule.sl_batch must be positive");
        anyhow::ensure!(self.schedule.rl.clip > 0.0, "schedule.rl.clip must be positive");
        anyhow::ensure!(self.reward_k > 0, "reward_k must be at least 1");
        anyhow::ensure!(!self.eval_k.is_empty() && self.eval_k.iter().all(|&k| k > 0), "eval_k must list K values >= 1");
        match (&self.data.generator, &self.data.train, &self.data.test) {
            (Some(g), None, None) => g.validate()?,
            (None, Some(_), Some(_)) => {}
            _ => anyhow::bail!("data needs either `generator` or both `train` and `test` paths"),
        }
        if self.task == Task::Sgg {
            anyhow::ensure!(!self.eval_protocols.is_empty(), "eval_protocols must not be empty");
        }
        Ok(())
    }
}

/// Recursive object merge. An object whose `kind` tag differs from the
/// default's replaces it whole.
fn merge(base: &mut serde_json::Value, over: serde_json::Value) {
    use serde_json::Value;
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot @ Value::Object(_)) if v.is_object() && v.get("kind").is_none_or(|t| Some(t) == slot.get("kind")) => {
                        merge(slot, v)
                    }
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}
