//! Question answering head: GRU question encoding, two multimodal attention
//! branches (visual features and tree context features), a question-guided
//! channel gate and a soft-target answer classifier.

use serde::{Deserialize, Serialize};

use crate::encoder::BiTreeLstm;
use crate::error::{Error, Result};
use crate::ndcore::{soft_cross_entropy, GruCell, Linear, Mlp, NodeId, ParamId, ParamStore, Tape};
use crate::scoring::{ObjectProposal, ScoreNet, ScoringConfig, TaskScoringConfig};
use crate::treebuild::{CtxTree, Structure};

/// `f_d(x, y) = ReLU(W3 x + W4 y) - (W3 x - W4 y)^2`.
#[derive(Clone, Debug)]
pub struct Fusion {
    pub wx: Linear,
    pub wy: Linear,
}

impl Fusion {
    pub fn new(store: &mut ParamStore, name: &str, x_dim: usize, y_dim: usize, out_dim: usize) -> Result<Self> {
        Ok(Fusion {
            wx: Linear::new(store, &format!("{name}.wx"), x_dim, out_dim, false)?,
            wy: Linear::new(store, &format!("{name}.wy"), y_dim, out_dim, false)?,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.wx.out_dim
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: NodeId, y: NodeId) -> Result<NodeId> {
        let a = self.wx.forward(tape, store, x)?;
        let b = self.wy.forward(tape, store, y)?;
        let s = tape.add(a, b)?;
        let r = tape.relu(s);
        let d = tape.sub(a, b)?;
        let d2 = tape.square(d);
        tape.sub(r, d2)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.wx.params();
        p.extend(self.wy.params());
        p
    }
}

#[derive(Clone, Debug)]
pub struct AttentionResult {
    /// Attention weights over objects (sums to 1).
    pub weights: Vec<f64>,
    pub alpha: NodeId,
    pub attended: NodeId,
    /// Joint feature `m = f_d(z_hat, q)`.
    pub joint: NodeId,
}

/// `u_i = MLP(f_d(z_i, q))`, `alpha = softmax(u)`, `m = f_d(sum alpha_i z_i, q)`.
#[derive(Clone, Debug)]
pub struct Attention {
    pub score_fusion: Fusion,
    pub score_mlp: Mlp,
    pub joint_fusion: Fusion,
}

impl Attention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        z_dim: usize,
        q_dim: usize,
        fuse_dim: usize,
        hidden: usize,
        joint_dim: usize,
    ) -> Result<Self> {
        Ok(Attention {
            score_fusion: Fusion::new(store, &format!("{name}.score_fuse"), z_dim, q_dim, fuse_dim)?,
            score_mlp: Mlp::new(store, &format!("{name}.score_mlp"), &[fuse_dim, hidden, 1])?,
            joint_fusion: Fusion::new(store, &format!("{name}.joint_fuse"), z_dim, q_dim, joint_dim)?,
        })
    }

    /// Unnormalized scores `u_i`.
    pub fn logits(&self, tape: &mut Tape, store: &ParamStore, z: &[NodeId], q: NodeId) -> Result<NodeId> {
        if z.is_empty() {
            return Err(Error::EmptyInput("attention over zero objects"));
        }
        let u = z
            .iter()
            .map(|&zi| {
                let f = self.score_fusion.forward(tape, store, zi, q)?;
                self.score_mlp.forward(tape, store, f)
            })
            .collect::<Result<Vec<_>>>()?;
        tape.concat(&u)
    }

    pub fn attend(&self, tape: &mut Tape, store: &ParamStore, z: &[NodeId], q: NodeId) -> Result<AttentionResult> {
        let u = self.logits(tape, store, z, q)?;
        self.attend_with_logits(tape, store, z, q, u)
    }

    pub fn attend_with_logits(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        z: &[NodeId],
        q: NodeId,
        u: NodeId,
    ) -> Result<AttentionResult> {
        let alpha = tape.softmax(u);
        let weighted = z
            .iter()
            .enumerate()
            .map(|(i, &zi)| {
                let a = tape.index(alpha, i)?;
                tape.scale_by(zi, a)
            })
            .collect::<Result<Vec<_>>>()?;
        let attended = tape.add_n(&weighted)?;
        let joint = self.joint_fusion.forward(tape, store, attended, q)?;
        Ok(AttentionResult {
            weights: tape.data(alpha).to_vec(),
            alpha,
            attended,
            joint,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.score_fusion.params();
        p.extend(self.score_mlp.params());
        p.extend(self.joint_fusion.params());
        p
    }
}

/// One question about one scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Question {
    pub tokens: Vec<usize>,
    /// Index of the question type (the hot entry of `l_q`).
    pub question_type: usize,
    /// Soft answer targets over the answer vocabulary.
    pub targets: Vec<f64>,
}

pub fn one_hot(index: usize, len: usize) -> Vec<f64> {
    let mut v = vec![0.0; len];
    v[index] = 1.0;
    v
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VqaConfig {
    pub visual_dim: usize,
    pub vocab_size: usize,
    pub word_dim: usize,
    pub q_dim: usize,
    pub num_types: usize,
    pub type_dim: usize,
    pub fuse_dim: usize,
    pub att_hidden: usize,
    /// Width of each joint feature `m_x`, `m_d`.
    pub joint_dim: usize,
    pub gate_hidden: usize,
    pub hidden: usize,
    pub classifier_hidden: usize,
    pub num_answers: usize,
    pub scoring_hidden: usize,
    pub structure: Structure,
    /// When false, `m_d` is replaced by zeros (attention-only ablation).
    pub use_context: bool,
    /// Forces the gate to 1, reducing the head to plain concatenation.
    pub unit_gate: bool,
}

impl VqaConfig {
    pub fn feature_dim(&self) -> usize {
        self.visual_dim + 8
    }
}

/// Everything the head needs for one question.
#[derive(Clone, Debug)]
pub struct VqaSample {
    pub proposals: Vec<ObjectProposal>,
    pub question: Question,
}

#[derive(Clone, Debug)]
pub struct VqaModel {
    pub cfg: VqaConfig,
    pub scorer: ScoreNet,
    pub words: ParamId,
    pub gru: GruCell,
    pub context: BiTreeLstm,
    pub att_visual: Attention,
    pub att_context: Attention,
    pub type_embed: Linear,
    pub gate: Mlp,
    pub classifier: Mlp,
}

impl VqaModel {
    pub fn new(store: &mut ParamStore, cfg: VqaConfig) -> Result<Self> {
        let fd = cfg.feature_dim();
        let scorer = ScoreNet::new(
            store,
            "theta",
            &ScoringConfig {
                feature_dim: fd,
                hidden: cfg.scoring_hidden,
                task: Some(TaskScoringConfig {
                    q_dim: cfg.q_dim,
                    fuse_dim: cfg.fuse_dim,
                    hidden: cfg.scoring_hidden,
                }),
            },
        )?;
        let words = store.insert_uniform("vqa.words", &[cfg.vocab_size, cfg.word_dim], cfg.word_dim)?;
        let gru = GruCell::new(store, "vqa.gru", cfg.word_dim, cfg.q_dim)?;
        let kind = cfg.structure.tree_kind();
        let context = BiTreeLstm::new(store, "vqa.ctx", fd, cfg.hidden, kind)?;
        let att_visual = Attention::new(store, "vqa.att_x", fd, cfg.q_dim, cfg.fuse_dim, cfg.att_hidden, cfg.joint_dim)?;
        let att_context = Attention::new(
            store,
            "vqa.att_d",
            2 * cfg.hidden,
            cfg.q_dim,
            cfg.fuse_dim,
            cfg.att_hidden,
            cfg.joint_dim,
        )?;
        let type_embed = Linear::new(store, "vqa.type_embed", cfg.num_types, cfg.type_dim, false)?;
        let gate = Mlp::new(store, "vqa.gate", &[cfg.q_dim + cfg.type_dim, cfg.gate_hidden, 2 * cfg.joint_dim])?;
        let classifier = Mlp::new(
            store,
            "vqa.cls",
            &[2 * cfg.joint_dim, cfg.classifier_hidden, cfg.num_answers],
        )?;
        Ok(VqaModel {
            cfg,
            scorer,
            words,
            gru,
            context,
            att_visual,
            att_context,
            type_embed,
            gate,
            classifier,
        })
    }

    pub fn theta(&self) -> Vec<ParamId> {
        self.scorer.params()
    }

    pub fn end_task(&self) -> Vec<ParamId> {
        let mut p = vec![self.words];
        p.extend(self.gru.params());
        p.extend(self.context.params());
        p.extend(self.att_visual.params());
        p.extend(self.att_context.params());
        p.extend(self.type_embed.params());
        p.extend(self.gate.params());
        p.extend(self.classifier.params());
        p
    }

    /// Final hidden state of the GRU over the token embeddings.
    pub fn encode_question(&self, tape: &mut Tape, store: &ParamStore, tokens: &[usize]) -> Result<NodeId> {
        if tokens.is_empty() {
            return Err(Error::Validation("empty question".into()));
        }
        let table = tape.param(store, self.words);
        let mut h = tape.zeros(self.cfg.q_dim);
        for &t in tokens {
            if t >= self.cfg.vocab_size {
                return Err(Error::Validation(format!("token {t} outside vocabulary")));
            }
            let x = tape.row(table, t)?;
            h = self.gru.forward(tape, store, x, h)?;
        }
        Ok(h)
    }

    /// `sigmoid(MLP([q; W5 l_q]))`.
    pub fn question_gate(&self, tape: &mut Tape, store: &ParamStore, q: NodeId, l_q: &[f64]) -> Result<NodeId> {
        let hot = l_q.iter().filter(|&&v| v == 1.0).count();
        let zero = l_q.iter().filter(|&&v| v == 0.0).count();
        if l_q.len() != self.cfg.num_types || hot != 1 || hot + zero != l_q.len() {
            return Err(Error::Validation("question type is not a one-hot vector".into()));
        }
        let l = tape.constant_vec(l_q.to_vec());
        let t = self.type_embed.forward(tape, store, l)?;
        let input = tape.concat(&[q, t])?;
        let out = self.gate.forward(tape, store, input)?;
        Ok(tape.sigmoid(out))
    }

    /// Question feature value, used as the constant task feature for scoring.
    pub fn question_feature(&self, store: &ParamStore, tokens: &[usize]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let q = self.encode_question(&mut tape, store, tokens)?;
        Ok(tape.data(q).to_vec())
    }

    /// Answer logits for one question over the given context tree.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, sample: &VqaSample, tree: &CtxTree) -> Result<VqaForward> {
        let q = self.encode_question(tape, store, &sample.question.tokens)?;
        let xs = sample
            .proposals
            .iter()
            .map(|p| p.feature().map(|x| tape.constant_vec(x)))
            .collect::<Result<Vec<_>>>()?;
        let visual = self.att_visual.attend(tape, store, &xs, q)?;
        let context = if self.cfg.use_context {
            let d = self.context.encode(tape, store, tree, &xs)?;
            Some(self.att_context.attend(tape, store, &d.d, q)?)
        } else {
            None
        };
        let m_d = match &context {
            Some(c) => c.joint,
            None => tape.zeros(self.cfg.joint_dim),
        };
        let joint = tape.concat(&[visual.joint, m_d])?;
        let feature = if self.cfg.unit_gate {
            joint
        } else {
            let l_q = one_hot(sample.question.question_type, self.cfg.num_types);
            let g = self.question_gate(tape, store, q, &l_q)?;
            tape.mul(g, joint)?
        };
        let logits = self.classifier.forward(tape, store, feature)?;
        Ok(VqaForward {
            logits,
            visual,
            context,
        })
    }
}

#[derive(Clone, Debug)]
pub struct VqaForward {
    pub logits: NodeId,
    pub visual: AttentionResult,
    pub context: Option<AttentionResult>,
}

/// Soft-target cross-entropy; `None` when the targets carry no mass.
pub fn answer_loss(tape: &mut Tape, logits: NodeId, targets: &[f64]) -> Result<Option<NodeId>> {
    let mass: f64 = targets.iter().sum();
    if mass <= 0.0 {
        return Ok(None);
    }
    if targets.iter().any(|&t| !(0.0..=1.0).contains(&t)) {
        return Err(Error::Validation("answer targets must lie in [0, 1]".into()));
    }
    soft_cross_entropy(tape, logits, targets).map(Some)
}

/// Target score of the arg-max answer.
pub fn answer_accuracy(logits: &[f64], targets: &[f64]) -> f64 {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    targets[best]
}
