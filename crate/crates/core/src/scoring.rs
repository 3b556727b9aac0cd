//! Pairwise validity between object proposals.
//!
//! `S_ij = f(x_i, x_j) * g(x_i, x_j, q)` with `f = sigmoid(MLP([x_i; x_j]))`
//! and `g = sigmoid(h(x_i, q)) * sigmoid(h(x_j, q))`, or `g = 1` when there is
//! no task feature. The matrix is symmetrized by averaging and has a zero
//! diagonal.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndcore::{bce_with_logit, Mlp, NodeId, OptimizerConfig, PairMlp, ParamId, ParamStore, Tape};
use crate::vqa::Fusion;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxCoords {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoxCoords {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BoxCoords { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center_x(&self) -> f64 {
        0.5 * (self.x1 + self.x2)
    }

    pub fn union(&self, other: &BoxCoords) -> BoxCoords {
        BoxCoords::new(
            self.x1.min(other.x1),
            self.y1.min(other.y1),
            self.x2.max(other.x2),
            self.y2.max(other.y2),
        )
    }

    /// Intersection box, or `None` when the overlap has zero area.
    pub fn intersection(&self, other: &BoxCoords) -> Option<BoxCoords> {
        let b = BoxCoords::new(
            self.x1.max(other.x1),
            self.y1.max(other.y1),
            self.x2.min(other.x2),
            self.y2.min(other.y2),
        );
        (b.x2 > b.x1 && b.y2 > b.y1).then_some(b)
    }

    pub fn iou(&self, other: &BoxCoords) -> f64 {
        match self.intersection(other) {
            None => 0.0,
            Some(i) => {
                let inter = i.area();
                inter / (self.area() + other.area() - inter)
            }
        }
    }

    pub fn contains(&self, other: &BoxCoords) -> bool {
        other.x1 >= self.x1 && other.y1 >= self.y1 && other.x2 <= self.x2 && other.y2 <= self.y2
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageSize {
    pub width: f64,
    pub height: f64,
}

/// One detected object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectProposal {
    pub visual: Vec<f64>,
    #[serde(rename = "box")]
    pub bbox: BoxCoords,
    pub class_dist: Vec<f64>,
    pub image_size: ImageSize,
}

impl ObjectProposal {
    pub fn validate(&self) -> Result<()> {
        let ImageSize { width, height } = self.image_size;
        if !(width > 0.0 && height > 0.0) {
            return Err(Error::Validation(format!("image size {width}x{height} is not positive")));
        }
        let b = &self.bbox;
        if b.x1 < 0.0 || b.y1 < 0.0 || b.x2 > width || b.y2 > height {
            return Err(Error::Validation(format!("box {b:?} outside image {width}x{height}")));
        }
        let total: f64 = self.class_dist.iter().sum();
        if (total - 1.0).abs() > 1e-6 || self.class_dist.iter().any(|&p| p < 0.0) {
            return Err(Error::Validation(format!("class distribution sums to {total}")));
        }
        spatial_feature(&self.bbox, self.image_size).map(|_| ())
    }

    /// `x = [v; b]`: visual feature followed by the 8 spatial entries.
    pub fn feature(&self) -> Result<Vec<f64>> {
        let mut x = self.visual.clone();
        x.extend_from_slice(&spatial_feature(&self.bbox, self.image_size)?);
        Ok(x)
    }
}

/// Box corners, center and size, with x-like entries divided by the image
/// width and y-like entries by the height.
pub fn spatial_feature(b: &BoxCoords, image: ImageSize) -> Result<[f64; 8]> {
    if !(b.x2 > b.x1 && b.y2 > b.y1) {
        return Err(Error::Validation(format!("degenerate box {b:?}")));
    }
    let (w, h) = (image.width, image.height);
    Ok([
        b.x1 / w,
        b.y1 / h,
        b.x2 / w,
        b.y2 / h,
        0.5 * (b.x1 + b.x2) / w,
        0.5 * (b.y1 + b.y2) / h,
        (b.x2 - b.x1) / w,
        (b.y2 - b.y1) / h,
    ])
}

/// Task feature `q` (the question embedding in VQA).
#[derive(Clone, Debug, PartialEq)]
pub struct TaskFeature {
    pub q: Vec<f64>,
}

/// Dense `n x n` score matrix with its factors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreMatrix {
    pub n: usize,
    /// Symmetrized `f * g`, row-major, zero diagonal.
    pub s: Vec<f64>,
    /// Raw ordered-pair correlations `f(x_i, x_j)`.
    pub f_values: Vec<f64>,
    /// Task dependencies `g(x_i, x_j, q)`.
    pub g_values: Vec<f64>,
}

impl ScoreMatrix {
    /// A matrix given directly by its entries, with `f = s` and `g = 1`.
    pub fn from_values(n: usize, s: Vec<f64>) -> Result<Self> {
        if n == 0 {
            return Err(Error::EmptyInput("score matrix"));
        }
        if s.len() != n * n {
            return Err(Error::dim("score_matrix", &[n, n], &[s.len()]));
        }
        Ok(ScoreMatrix {
            n,
            f_values: s.clone(),
            g_values: vec![1.0; n * n],
            s,
        })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.s[i * self.n + j]
    }

    pub fn row_sum(&self, i: usize) -> f64 {
        (0..self.n).filter(|&j| j != i).map(|j| self.get(i, j)).sum()
    }

    /// Symmetric, nonnegative, finite, zero diagonal.
    pub fn validate(&self) -> Result<()> {
        for i in 0..self.n {
            if self.get(i, i) != 0.0 {
                return Err(Error::Validation(format!("nonzero diagonal at {i}")));
            }
            for j in 0..self.n {
                let v = self.get(i, j);
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::Validation(format!("invalid score {v} at ({i},{j})")));
                }
                if (v - self.get(j, i)).abs() > 1e-12 {
                    return Err(Error::Validation(format!("asymmetric scores at ({i},{j})")));
                }
            }
        }
        Ok(())
    }
}

/// A score matrix together with the tape nodes of its off-diagonal entries,
/// so construction log-probabilities can be differentiated.
#[derive(Clone, Debug)]
pub struct ScoredPairs {
    pub matrix: ScoreMatrix,
    /// `nodes[i * n + j]` is the scalar node of `S_ij` (shared with `S_ji`).
    pub nodes: Vec<Option<NodeId>>,
}

impl ScoredPairs {
    pub fn node(&self, i: usize, j: usize) -> Option<NodeId> {
        self.nodes[i * self.matrix.n + j]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskScoringConfig {
    pub q_dim: usize,
    pub fuse_dim: usize,
    pub hidden: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoringConfig {
    /// Width of `x = [v; b]`.
    pub feature_dim: usize,
    pub hidden: usize,
    /// Present in VQA mode.
    pub task: Option<TaskScoringConfig>,
}

/// Object-task correlation `h(x, q) = MLP(f_d(x, q))`.
#[derive(Clone, Debug)]
pub struct TaskNet {
    pub fusion: Fusion,
    pub mlp: Mlp,
}

/// Parameters `theta` of the score matrix.
#[derive(Clone, Debug)]
pub struct ScoreNet {
    pub correlation: PairMlp,
    pub task: Option<TaskNet>,
}

impl ScoreNet {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &ScoringConfig) -> Result<Self> {
        let correlation = PairMlp::new(store, &format!("{name}.f"), cfg.feature_dim, &[cfg.hidden, 1])?;
        let task = match &cfg.task {
            None => None,
            Some(t) => Some(TaskNet {
                fusion: Fusion::new(store, &format!("{name}.h.fuse"), cfg.feature_dim, t.q_dim, t.fuse_dim)?,
                mlp: Mlp::new(store, &format!("{name}.h.mlp"), &[t.fuse_dim, t.hidden, 1])?,
            }),
        };
        Ok(ScoreNet { correlation, task })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.correlation.params();
        if let Some(t) = &self.task {
            p.extend(t.fusion.params());
            p.extend(t.mlp.params());
        }
        p
    }

    pub fn correlation_params(&self) -> Vec<ParamId> {
        self.correlation.params()
    }

    /// `f(x_i, x_j) = sigmoid(MLP([x_i; x_j]))` for two feature nodes.
    pub fn object_correlation(&self, tape: &mut Tape, store: &ParamStore, xi: NodeId, xj: NodeId) -> Result<NodeId> {
        let a = self.correlation.halves(tape, store, xi)?;
        let b = self.correlation.halves(tape, store, xj)?;
        let logit = self.correlation.pair(tape, store, &a, &b)?;
        Ok(tape.sigmoid(logit))
    }

    /// `sigmoid(h(x, q))` for one object.
    fn task_factor(&self, tape: &mut Tape, store: &ParamStore, x: NodeId, q: NodeId) -> Result<NodeId> {
        let task = self
            .task
            .as_ref()
            .ok_or_else(|| Error::Config("task dependency requested without a task network".into()))?;
        let fused = task.fusion.forward(tape, store, x, q)?;
        let u = task.mlp.forward(tape, store, fused)?;
        Ok(tape.sigmoid(u))
    }

    /// `g(x_i, x_j, q)`; exactly 1 when scoring without a task feature.
    pub fn task_dependency(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        xi: NodeId,
        xj: NodeId,
        q: Option<&TaskFeature>,
    ) -> Result<NodeId> {
        match (&self.task, q) {
            (None, _) => Ok(tape.constant_vec(vec![1.0])),
            (Some(_), None) => Err(Error::Config("task feature q is required in VQA mode".into())),
            (Some(_), Some(q)) => {
                let qn = tape.constant_vec(q.q.clone());
                let gi = self.task_factor(tape, store, xi, qn)?;
                let gj = self.task_factor(tape, store, xj, qn)?;
                tape.mul(gi, gj)
            }
        }
    }

    /// Builds the full symmetrized matrix on `tape`.
    pub fn score_matrix(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        proposals: &[ObjectProposal],
        q: Option<&TaskFeature>,
    ) -> Result<ScoredPairs> {
        let n = proposals.len();
        if n == 0 {
            return Err(Error::EmptyInput("score matrix needs at least one proposal"));
        }
        if self.task.is_some() && q.is_none() {
            return Err(Error::Config("task feature q is required in VQA mode".into()));
        }
        let xs = proposals
            .iter()
            .map(|p| p.feature().map(|x| tape.constant_vec(x)))
            .collect::<Result<Vec<_>>>()?;
        let halves = xs
            .iter()
            .map(|&x| self.correlation.halves(tape, store, x))
            .collect::<Result<Vec<_>>>()?;
        let task_factors = match (&self.task, q) {
            (Some(_), Some(q)) => {
                let qn = tape.constant_vec(q.q.clone());
                Some(
                    xs.iter()
                        .map(|&x| self.task_factor(tape, store, x, qn))
                        .collect::<Result<Vec<_>>>()?,
                )
            }
            _ => None,
        };

        let mut f_values = vec![0.0; n * n];
        let mut g_values = vec![1.0; n * n];
        let mut raw: Vec<Option<NodeId>> = vec![None; n * n];
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let logit = self.correlation.pair(tape, store, &halves[i], &halves[j])?;
                let f = tape.sigmoid(logit);
                f_values[i * n + j] = tape.scalar(f);
                let s = match &task_factors {
                    Some(t) => {
                        let g = tape.mul(t[i], t[j])?;
                        g_values[i * n + j] = tape.scalar(g);
                        tape.mul(f, g)?
                    }
                    None => f,
                };
                raw[i * n + j] = Some(s);
            }
        }
        let mut s = vec![0.0; n * n];
        let mut nodes = vec![None; n * n];
        for i in 0..n {
            g_values[i * n + i] = 0.0;
            for j in (i + 1)..n {
                let (a, b) = (raw[i * n + j].expect("off-diagonal"), raw[j * n + i].expect("off-diagonal"));
                let sum = tape.add(a, b)?;
                let avg = tape.scale(sum, 0.5);
                let v = tape.scalar(avg);
                s[i * n + j] = v;
                s[j * n + i] = v;
                nodes[i * n + j] = Some(avg);
                nodes[j * n + i] = Some(avg);
            }
        }
        Ok(ScoredPairs {
            matrix: ScoreMatrix {
                n,
                s,
                f_values,
                g_values,
            },
            nodes,
        })
    }
}

/// Proposals with ground-truth relatedness for every ordered pair.
#[derive(Clone, Debug)]
pub struct CorrelationSample {
    pub proposals: Vec<ObjectProposal>,
    /// Row-major `n x n`; the diagonal is ignored.
    pub related: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 5,
            optimizer: OptimizerConfig::adam(1e-3),
            batch_size: 5,
        }
    }
}

/// Mean binary cross-entropy of `f` over all ordered pairs of one sample.
pub fn correlation_loss(net: &ScoreNet, tape: &mut Tape, store: &ParamStore, sample: &CorrelationSample) -> Result<NodeId> {
    let n = sample.proposals.len();
    if sample.related.len() != n * n {
        return Err(Error::dim("correlation_loss", &[n, n], &[sample.related.len()]));
    }
    if n < 2 {
        return Err(Error::EmptyInput("correlation pretraining needs at least two proposals"));
    }
    let halves = sample
        .proposals
        .iter()
        .map(|p| {
            let x = tape.constant_vec(p.feature()?);
            net.correlation.halves(tape, store, x)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut terms = Vec::with_capacity(n * (n - 1));
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let logit = net.correlation.pair(tape, store, &halves[i], &halves[j])?;
                terms.push(bce_with_logit(tape, logit, sample.related[i * n + j])?);
            }
        }
    }
    tape.mean_n(&terms)
}

/// Trains `f` as a binary relatedness prior over all ordered pairs.
/// Returns the mean loss of every epoch.
pub fn pretrain_correlation(
    net: &ScoreNet,
    store: &mut ParamStore,
    samples: &[CorrelationSample],
    cfg: &PretrainConfig,
) -> Result<Vec<f64>> {
    let usable: Vec<&CorrelationSample> = samples.iter().filter(|s| s.proposals.len() >= 2).collect();
    if usable.is_empty() {
        return Err(Error::EmptyInput("no samples with at least two proposals"));
    }
    let positives = usable
        .iter()
        .flat_map(|s| {
            let n = s.proposals.len();
            (0..n * n).filter(move |k| k / n != k % n && s.related[*k])
        })
        .count();
    if positives == 0 {
        log::warn!("correlation pretraining: dataset has no positive pairs");
    }
    let params = net.correlation_params();
    let mut opt = cfg.optimizer.build();
    let batch = cfg.batch_size.max(1);
    let mut history = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let mut total = 0.0;
        for chunk in usable.chunks(batch) {
            for sample in chunk {
                let mut tape = Tape::new();
                let loss = correlation_loss(net, &mut tape, store, sample)?;
                let value = tape.scalar(loss);
                if !value.is_finite() {
                    return Err(Error::NonFiniteLoss("correlation pretraining".into()));
                }
                total += value;
                let scaled = tape.scale(loss, 1.0 / chunk.len() as f64);
                tape.backward(scaled, store)?;
            }
            opt.step(store, &params)?;
        }
        history.push(total / usable.len() as f64);
    }
    Ok(history)
}
