//! Hybrid learning: supervised end-task steps over greedy structures,
//! REINFORCE on the structure parameters with a self-critic baseline, and the
//! alternating schedule.

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndcore::{soft_cross_entropy, NodeId, Optimizer, OptimizerConfig, ParamId, ParamStore, Tape};
use crate::scoring::{BoxCoords, ScoreMatrix, ScoredPairs, TaskFeature};
use crate::sgg::{recall_at_k, PairSampling, Protocol, SggModel, SggSample};
use crate::treebuild::{build_layout, BuildMode, ConstructionTrace, Layout, Structure};
use crate::vqa::{answer_accuracy, VqaModel, VqaSample};

/// Something that scores object pairs with parameters `theta` and turns the
/// scores into a structure.
pub trait StructurePolicy {
    type Sample;

    fn structure(&self) -> Structure;

    fn theta(&self) -> Vec<ParamId>;

    /// Symmetrized pair scores, recorded on `tape`.
    fn score(&self, tape: &mut Tape, store: &ParamStore, sample: &Self::Sample) -> Result<ScoredPairs>;

    /// Boxes for structures that need geometry.
    fn boxes(&self, sample: &Self::Sample) -> Vec<BoxCoords>;
}

/// A policy together with the end task it serves.
pub trait HybridModel: StructurePolicy {
    fn end_task(&self) -> Vec<ParamId>;

    /// Task loss over `layout`; `None` skips the sample.
    fn task_loss(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        sample: &Self::Sample,
        layout: &Layout,
        rng: &mut StdRng,
    ) -> Result<Option<NodeId>>;

    /// Reward of `layout` with the end task held fixed.
    fn reward(&self, store: &ParamStore, sample: &Self::Sample, layout: &Layout) -> Result<f64>;
}

/// Score values of `sample` without keeping the tape.
pub fn score_values<P: StructurePolicy>(policy: &P, store: &ParamStore, sample: &P::Sample) -> Result<ScoreMatrix> {
    let mut tape = Tape::new();
    Ok(policy.score(&mut tape, store, sample)?.matrix)
}

pub fn layout_for<P: StructurePolicy>(
    policy: &P,
    store: &ParamStore,
    sample: &P::Sample,
    mode: BuildMode,
    rng: &mut StdRng,
) -> Result<Layout> {
    let s = score_values(policy, store, sample)?;
    build_layout(policy.structure(), &s, &policy.boxes(sample), mode, rng)
}

/// Greedy layouts for a whole dataset.
pub fn greedy_layouts<P: StructurePolicy>(
    policy: &P,
    store: &ParamStore,
    samples: &[P::Sample],
    rng: &mut StdRng,
) -> Result<Vec<Layout>> {
    samples
        .iter()
        .map(|s| layout_for(policy, store, s, BuildMode::Greedy, rng))
        .collect()
}

/// `log pi(l | theta)` on the tape, as the sum over construction steps of
/// `ln S_chosen - ln sum_candidates S`.
pub fn trace_log_prob(tape: &mut Tape, scored: &ScoredPairs, trace: &ConstructionTrace) -> Result<Option<NodeId>> {
    let mut terms = Vec::with_capacity(trace.steps.len());
    for step in &trace.steps {
        if step.uniform_fallback {
            terms.push(tape.constant_vec(vec![step.probabilities[step.chosen].ln()]));
            continue;
        }
        let nodes = step
            .candidates
            .iter()
            .map(|&(t, p)| {
                scored
                    .node(t, p)
                    .ok_or_else(|| Error::Validation(format!("trace edge ({t}, {p}) has no score node")))
            })
            .collect::<Result<Vec<_>>>()?;
        let total = tape.add_n(&nodes)?;
        let chosen = tape.ln(nodes[step.chosen]);
        let norm = tape.ln(total);
        terms.push(tape.sub(chosen, norm)?);
    }
    if terms.is_empty() {
        return Ok(None);
    }
    tape.add_n(&terms).map(Some)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BaselineKind {
    /// Reward of the greedy structure under the same parameters.
    SelfCritic,
    /// Exponential moving average of past rewards.
    Moving { decay: f64 },
    None,
}

#[derive(Clone, Debug)]
pub struct Baseline {
    pub kind: BaselineKind,
    value: Option<f64>,
}

impl Baseline {
    pub fn new(kind: BaselineKind) -> Self {
        Baseline { kind, value: None }
    }

    fn observe(&mut self, reward: f64) {
        if let BaselineKind::Moving { decay } = self.kind {
            self.value = Some(match self.value {
                None => reward,
                Some(v) => decay * v + (1.0 - decay) * reward,
            });
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RlConfig {
    /// Gradients are rescaled to at most this infinity norm.
    pub clip: f64,
}

impl Default for RlConfig {
    fn default() -> Self {
        RlConfig { clip: 5.0 }
    }
}

#[derive(Clone, Debug)]
pub struct Episode {
    pub sampled: Layout,
    pub greedy: Layout,
    pub reward: f64,
    pub baseline: f64,
    pub advantage: f64,
    /// `log pi` as evaluated on the tape.
    pub log_prob: f64,
    pub loss: f64,
    /// L2 norm of the theta gradient before clipping.
    pub grad_norm: f64,
    /// The theta gradient before clipping, flattened in `theta` order.
    pub gradient: Vec<f64>,
    /// Trace had no steps (single node); nothing was updated.
    pub skipped: bool,
}

/// One REINFORCE update with a single sampled structure.
///
/// Only `theta` receives gradient; `reward` is called with the store as it
/// was before the update.
#[allow(clippy::too_many_arguments)]
pub fn reinforce_step<P, F>(
    policy: &P,
    store: &mut ParamStore,
    opt: &mut Optimizer,
    sample: &P::Sample,
    mut reward: F,
    baseline: &mut Baseline,
    cfg: &RlConfig,
    rng: &mut StdRng,
) -> Result<Episode>
where
    P: StructurePolicy,
    F: FnMut(&ParamStore, &Layout) -> Result<f64>,
{
    let structure = policy.structure();
    if !structure.is_learnable() {
        return Err(Error::Config(format!("structure `{}` has no learnable construction", structure.name())));
    }
    let mut tape = Tape::new();
    let scored = policy.score(&mut tape, store, sample)?;
    let boxes = policy.boxes(sample);
    let sampled = build_layout(structure, &scored.matrix, &boxes, BuildMode::Sampled, rng)?;
    let greedy = build_layout(structure, &scored.matrix, &boxes, BuildMode::Greedy, rng)?;
    let trace = sampled.trace.as_ref().expect("learnable structures carry a trace");
    if trace.steps.is_empty() {
        return Ok(Episode {
            sampled,
            greedy,
            reward: 0.0,
            baseline: 0.0,
            advantage: 0.0,
            log_prob: 0.0,
            loss: 0.0,
            grad_norm: 0.0,
            gradient: Vec::new(),
            skipped: true,
        });
    }
    let r = reward(store, &sampled)?;
    let b = match baseline.kind {
        BaselineKind::SelfCritic => reward(store, &greedy)?,
        BaselineKind::Moving { .. } => baseline.value.unwrap_or(0.0),
        BaselineKind::None => 0.0,
    };
    baseline.observe(r);
    if !r.is_finite() || !b.is_finite() {
        return Err(Error::NonFiniteLoss(format!("reward {r}, baseline {b}")));
    }
    let advantage = r - b;
    let log_pi = trace_log_prob(&mut tape, &scored, trace)?.expect("non-empty trace");
    let loss = tape.scale(log_pi, -advantage);
    let theta = policy.theta();
    store.zero_grad_of(&theta);
    tape.backward(loss, store)?;
    let grad_norm = store.grad_norm(&theta);
    let gradient = theta.iter().flat_map(|&id| store.grad(id).data().to_vec()).collect();
    store.clip_grad_inf_norm(&theta, cfg.clip);
    opt.step(store, &theta)?;
    Ok(Episode {
        log_prob: tape.scalar(log_pi),
        loss: tape.scalar(loss),
        sampled,
        greedy,
        reward: r,
        baseline: b,
        advantage,
        grad_norm,
        gradient,
        skipped: false,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub loss: f64,
    pub used: usize,
    pub skipped: usize,
}

/// One supervised update of the end-task parameters over a batch of
/// `(sample, greedy layout)` pairs. Theta is not touched.
pub fn supervised_step<M: HybridModel>(
    model: &M,
    store: &mut ParamStore,
    opt: &mut Optimizer,
    batch: &[(&M::Sample, &Layout)],
    rng: &mut StdRng,
) -> Result<StepLosses> {
    let params = model.end_task();
    store.zero_grad_of(&params);
    let mut total = 0.0;
    let mut used = 0;
    let mut skipped = 0;
    let scale = 1.0 / batch.len().max(1) as f64;
    for (i, (sample, layout)) in batch.iter().enumerate() {
        let mut tape = Tape::new();
        let Some(loss) = model.task_loss(&mut tape, store, sample, layout, rng)? else {
            skipped += 1;
            continue;
        };
        let v = tape.scalar(loss);
        if !v.is_finite() {
            store.zero_grad_of(&params);
            return Err(Error::NonFiniteLoss(format!("batch item {i} of {}: loss {v}", batch.len())));
        }
        let scaled = tape.scale(loss, scale);
        tape.backward(scaled, store)?;
        total += v;
        used += 1;
    }
    if used > 0 {
        opt.step(store, &params)?;
    }
    Ok(StepLosses {
        loss: if used > 0 { total / used as f64 } else { 0.0 },
        used,
        skipped,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    PretrainF,
    Supervised,
    Reinforce,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    /// Number of (reinforce, supervised) rounds after the first supervised phase.
    pub rounds: usize,
    pub sl_epochs: usize,
    /// Epochs of each supervised phase after a reinforce phase.
    pub sl_epochs_after: usize,
    pub rl_epochs: usize,
    pub sl_batch: usize,
    pub sl_optimizer: OptimizerConfig,
    pub rl_optimizer: OptimizerConfig,
    pub baseline: BaselineKind,
    pub rl: RlConfig,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            rounds: 2,
            sl_epochs: 4,
            sl_epochs_after: 1,
            rl_epochs: 1,
            sl_batch: 5,
            sl_optimizer: OptimizerConfig::sgd(6e-3, 0.9),
            rl_optimizer: OptimizerConfig::sgd(6e-4, 0.9),
            baseline: BaselineKind::SelfCritic,
            rl: RlConfig::default(),
        }
    }
}

impl ScheduleConfig {
    /// The phase sequence `[supervised, (reinforce, supervised) x rounds]`.
    pub fn phases(&self) -> Vec<Phase> {
        let mut p = vec![Phase::Supervised];
        for _ in 0..self.rounds {
            p.push(Phase::Reinforce);
            p.push(Phase::Supervised);
        }
        p
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub phase: Phase,
    pub step: usize,
    pub loss: f64,
    pub reward: Option<f64>,
    pub baseline: Option<f64>,
    pub metric: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub phase: Phase,
    pub index: usize,
    pub steps: usize,
    pub mean_loss: f64,
    pub mean_reward: Option<f64>,
    pub metric: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub phases: Vec<PhaseRecord>,
}

impl TrainLog {
    pub fn to_json_lines(&self) -> Result<String> {
        let mut out = String::new();
        for s in &self.steps {
            out.push_str(&serde_json::to_string(s)?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Runs the alternating schedule. `eval` is called once at the end of every
/// phase and its value lands in the phase record.
pub fn hybrid_schedule<M, E>(
    model: &M,
    store: &mut ParamStore,
    data: &[M::Sample],
    cfg: &ScheduleConfig,
    rng: &mut StdRng,
    mut eval: E,
) -> Result<TrainLog>
where
    M: HybridModel,
    E: FnMut(&M, &ParamStore) -> Result<f64>,
{
    if cfg.rounds > 0 && !model.structure().is_learnable() {
        return Err(Error::Config(format!(
            "structure `{}` cannot be trained with reinforce rounds",
            model.structure().name()
        )));
    }
    if data.is_empty() {
        return Err(Error::EmptyInput("training data"));
    }
    let mut log = TrainLog::default();
    let mut sl_opt = cfg.sl_optimizer.build();
    let mut rl_opt = cfg.rl_optimizer.build();
    let mut baseline = Baseline::new(cfg.baseline);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut sl_phases = 0;
    for (index, phase) in cfg.phases().into_iter().enumerate() {
        let first_step = log.steps.len();
        match phase {
            Phase::Supervised => {
                let epochs = if sl_phases == 0 { cfg.sl_epochs } else { cfg.sl_epochs_after };
                sl_phases += 1;
                // theta is frozen for the whole phase, so the greedy layouts are too
                let layouts = greedy_layouts(model, store, data, rng)?;
                let mut step = 0;
                for _ in 0..epochs {
                    order.shuffle(rng);
                    for chunk in order.chunks(cfg.sl_batch.max(1)) {
                        let batch: Vec<_> = chunk.iter().map(|&i| (&data[i], &layouts[i])).collect();
                        let l = supervised_step(model, store, &mut sl_opt, &batch, rng)?;
                        log.steps.push(StepRecord {
                            phase,
                            step,
                            loss: l.loss,
                            reward: None,
                            baseline: None,
                            metric: None,
                        });
                        step += 1;
                    }
                }
            }
            Phase::Reinforce => {
                let mut step = 0;
                for _ in 0..cfg.rl_epochs {
                    order.shuffle(rng);
                    for &i in &order {
                        let ep = reinforce_step(
                            model,
                            store,
                            &mut rl_opt,
                            &data[i],
                            |st: &ParamStore, l: &Layout| model.reward(st, &data[i], l),
                            &mut baseline,
                            &cfg.rl,
                            rng,
                        )?;
                        if ep.skipped {
                            continue;
                        }
                        log.steps.push(StepRecord {
                            phase,
                            step,
                            loss: ep.loss,
                            reward: Some(ep.reward),
                            baseline: Some(ep.baseline),
                            metric: None,
                        });
                        step += 1;
                    }
                }
            }
            Phase::PretrainF => unreachable!("not part of the alternating schedule"),
        }
        let metric = eval(model, store)?;
        let records = &mut log.steps[first_step..];
        let steps = records.len();
        let mean_loss = records.iter().map(|r| r.loss).sum::<f64>() / steps.max(1) as f64;
        let rewards: Vec<f64> = records.iter().filter_map(|r| r.reward).collect();
        let mean_reward = (!rewards.is_empty()).then(|| rewards.iter().sum::<f64>() / rewards.len() as f64);
        if let Some(last) = records.last_mut() {
            last.metric = Some(metric);
        }
        log::info!("phase {index} {phase:?}: {steps} steps, loss {mean_loss:.4}, metric {metric:.4}");
        log.phases.push(PhaseRecord {
            phase,
            index,
            steps,
            mean_loss,
            mean_reward,
            metric,
        });
    }
    Ok(log)
}

/// Scene-graph model plus the training-time choices that are not part of the
/// network itself.
#[derive(Clone, Debug)]
pub struct SggTask {
    pub model: SggModel,
    pub sampling: PairSampling,
    /// K of the Recall@K reward.
    pub reward_k: usize,
    pub protocol: Protocol,
    pub graph_constraint: bool,
}

impl StructurePolicy for SggTask {
    type Sample = SggSample;

    fn structure(&self) -> Structure {
        self.model.cfg.structure
    }

    fn theta(&self) -> Vec<ParamId> {
        self.model.theta()
    }

    fn score(&self, tape: &mut Tape, store: &ParamStore, sample: &SggSample) -> Result<ScoredPairs> {
        self.model.scorer.score_matrix(tape, store, &sample.proposals, None)
    }

    fn boxes(&self, sample: &SggSample) -> Vec<BoxCoords> {
        sample.proposals.iter().map(|p| p.bbox).collect()
    }
}

impl HybridModel for SggTask {
    fn end_task(&self) -> Vec<ParamId> {
        self.model.end_task()
    }

    fn task_loss(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        sample: &SggSample,
        layout: &Layout,
        rng: &mut StdRng,
    ) -> Result<Option<NodeId>> {
        self.model
            .loss(tape, store, sample, &layout.tree, self.sampling, rng)
            .map(Some)
    }

    fn reward(&self, store: &ParamStore, sample: &SggSample, layout: &Layout) -> Result<f64> {
        let pred = self
            .model
            .predict(store, sample, &layout.tree, self.protocol, self.graph_constraint)?;
        Ok(recall_at_k(&pred, &sample.gt, self.reward_k, self.protocol)?.recall)
    }
}

impl StructurePolicy for VqaModel {
    type Sample = VqaSample;

    fn structure(&self) -> Structure {
        self.cfg.structure
    }

    fn theta(&self) -> Vec<ParamId> {
        VqaModel::theta(self)
    }

    fn score(&self, tape: &mut Tape, store: &ParamStore, sample: &VqaSample) -> Result<ScoredPairs> {
        let q = TaskFeature {
            q: self.question_feature(store, &sample.question.tokens)?,
        };
        self.scorer.score_matrix(tape, store, &sample.proposals, Some(&q))
    }

    fn boxes(&self, sample: &VqaSample) -> Vec<BoxCoords> {
        sample.proposals.iter().map(|p| p.bbox).collect()
    }
}

impl HybridModel for VqaModel {
    fn end_task(&self) -> Vec<ParamId> {
        VqaModel::end_task(self)
    }

    fn task_loss(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        sample: &VqaSample,
        layout: &Layout,
        _rng: &mut StdRng,
    ) -> Result<Option<NodeId>> {
        if sample.question.targets.iter().sum::<f64>() <= 0.0 {
            return Ok(None);
        }
        let fwd = self.forward(tape, store, sample, &layout.tree)?;
        soft_cross_entropy(tape, fwd.logits, &sample.question.targets).map(Some)
    }

    fn reward(&self, store: &ParamStore, sample: &VqaSample, layout: &Layout) -> Result<f64> {
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, store, sample, &layout.tree)?;
        Ok(answer_accuracy(tape.data(fwd.logits), &sample.question.targets))
    }
}

/// Free pair logits `theta` over `n` nodes with `S_ij = (sigmoid(theta_ij) +
/// sigmoid(theta_ji)) / 2`; the reward is 1 iff the sampled tree contains
/// `edge`.
#[derive(Clone, Debug)]
pub struct PlantedEdgePolicy {
    pub n: usize,
    pub logits: ParamId,
    pub edge: (usize, usize),
}

impl PlantedEdgePolicy {
    /// Logits start at `N(0, init_scale^2)`-ish noise drawn from the store's RNG.
    pub fn new(store: &mut ParamStore, name: &str, n: usize, edge: (usize, usize), init_scale: f64) -> Result<Self> {
        if edge.0 >= n || edge.1 >= n || edge.0 == edge.1 {
            return Err(Error::Validation(format!("edge {edge:?} is not a pair of distinct nodes below {n}")));
        }
        let logits = store.insert_uniform(name, &[n, n], 1)?;
        for v in store.value_mut(logits).data_mut() {
            *v *= init_scale;
        }
        Ok(PlantedEdgePolicy { n, logits, edge })
    }

    pub fn reward(&self, layout: &Layout) -> f64 {
        let (a, b) = self.edge;
        let hit = match &layout.tree {
            crate::treebuild::CtxTree::MultiBranch(t) => t.contains_edge(a, b),
            crate::treebuild::CtxTree::Binary(t) => match crate::treebuild::unbinarize_lcrs(t) {
                Ok(m) => m.contains_edge(a, b),
                Err(_) => false,
            },
        };
        if hit { 1.0 } else { 0.0 }
    }
}

impl StructurePolicy for PlantedEdgePolicy {
    type Sample = ();

    fn structure(&self) -> Structure {
        Structure::Multibranch
    }

    fn theta(&self) -> Vec<ParamId> {
        vec![self.logits]
    }

    fn score(&self, tape: &mut Tape, store: &ParamStore, _: &()) -> Result<ScoredPairs> {
        let n = self.n;
        let m = tape.param(store, self.logits);
        let rows = (0..n).map(|i| tape.row(m, i)).collect::<Result<Vec<_>>>()?;
        let sig = rows.iter().map(|&r| tape.sigmoid(r)).collect::<Vec<_>>();
        let mut s = vec![0.0; n * n];
        let mut nodes = vec![None; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let a = tape.index(sig[i], j)?;
                let b = tape.index(sig[j], i)?;
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
            matrix: ScoreMatrix::from_values(n, s)?,
            nodes,
        })
    }

    fn boxes(&self, _: &()) -> Vec<BoxCoords> {
        Vec::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndcore::{cross_entropy, Linear};
    use rand::SeedableRng;

    /// Planted-edge structure plus a linear classifier as the end task.
    struct Toy {
        policy: PlantedEdgePolicy,
        head: Linear,
    }

    type ToySample = (Vec<f64>, usize);

    impl Toy {
        fn new(store: &mut ParamStore) -> Self {
            Toy {
                policy: PlantedEdgePolicy::new(store, "theta", 4, (0, 1), 0.1).unwrap(),
                head: Linear::new(store, "head", 3, 2, true).unwrap(),
            }
        }
    }

    impl StructurePolicy for Toy {
        type Sample = ToySample;
        fn structure(&self) -> Structure {
            Structure::Multibranch
        }
        fn theta(&self) -> Vec<ParamId> {
            self.policy.theta()
        }
        fn score(&self, tape: &mut Tape, store: &ParamStore, _: &ToySample) -> Result<ScoredPairs> {
            self.policy.score(tape, store, &())
        }
        fn boxes(&self, _: &ToySample) -> Vec<BoxCoords> {
            Vec::new()
        }
    }

    impl HybridModel for Toy {
        fn end_task(&self) -> Vec<ParamId> {
            self.head.params()
        }
        fn task_loss(&self, tape: &mut Tape, store: &ParamStore, s: &ToySample, _: &Layout, _: &mut StdRng) -> Result<Option<NodeId>> {
            let x = tape.constant_vec(s.0.clone());
            let y = self.head.forward(tape, store, x)?;
            cross_entropy(tape, y, s.1).map(Some)
        }
        fn reward(&self, _: &ParamStore, _: &ToySample, layout: &Layout) -> Result<f64> {
            Ok(self.policy.reward(layout))
        }
    }

    fn toy_data() -> Vec<ToySample> {
        vec![
            (vec![1.0, 0.0, 0.5], 0),
            (vec![0.0, 1.0, -0.5], 1),
            (vec![0.3, -0.7, 0.2], 0),
            (vec![-1.0, 0.4, 0.9], 1),
            (vec![0.6, 0.6, -0.3], 1),
        ]
    }

    fn snapshot(store: &ParamStore, ids: &[ParamId]) -> Vec<Vec<f64>> {
        ids.iter().map(|&id| store.value(id).data().to_vec()).collect()
    }

    fn rng(seed: u64) -> StdRng {
        StdRng::seed_from_u64(seed)
    }

    #[test]
    fn trace_log_prob_matches_recorded_trace() {
        let mut store = ParamStore::new(1);
        let policy = PlantedEdgePolicy::new(&mut store, "theta", 6, (2, 4), 1.0).unwrap();
        let mut r = rng(1);
        for _ in 0..50 {
            let mut tape = Tape::new();
            let scored = policy.score(&mut tape, &store, &()).unwrap();
            let layout = build_layout(Structure::Multibranch, &scored.matrix, &[], BuildMode::Sampled, &mut r).unwrap();
            let trace = layout.trace.unwrap();
            let lp = trace_log_prob(&mut tape, &scored, &trace).unwrap().unwrap();
            assert!((tape.scalar(lp) - trace.log_prob).abs() < 1e-9);
            assert!((tape.scalar(lp) - trace.recompute_log_prob()).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_advantage_gives_zero_gradient() {
        let mut store = ParamStore::new(2);
        let policy = PlantedEdgePolicy::new(&mut store, "theta", 5, (0, 1), 0.5).unwrap();
        let before = snapshot(&store, &policy.theta());
        let mut opt = OptimizerConfig::sgd(1.0, 0.0).build();
        let mut baseline = Baseline::new(BaselineKind::SelfCritic);
        let mut r = rng(2);
        for _ in 0..20 {
            let ep = reinforce_step(&policy, &mut store, &mut opt, &(), |_, _| Ok(0.7), &mut baseline, &RlConfig::default(), &mut r).unwrap();
            assert_eq!(ep.advantage, 0.0);
            assert!(ep.gradient.iter().all(|&g| g == 0.0));
        }
        assert_eq!(snapshot(&store, &policy.theta()), before);
    }

    #[test]
    fn constant_reward_has_zero_mean_gradient() {
        let mut store = ParamStore::new(3);
        let policy = PlantedEdgePolicy::new(&mut store, "theta", 4, (0, 1), 1.0).unwrap();
        let mut opt = OptimizerConfig::sgd(0.0, 0.0).build();
        let mut baseline = Baseline::new(BaselineKind::None);
        let mut r = rng(3);
        let episodes = 1000;
        let grads: Vec<Vec<f64>> = (0..episodes)
            .map(|_| {
                reinforce_step(&policy, &mut store, &mut opt, &(), |_, _| Ok(1.0), &mut baseline, &RlConfig::default(), &mut r)
                    .unwrap()
                    .gradient
            })
            .collect();
        for k in 0..grads[0].len() {
            let xs: Vec<f64> = grads.iter().map(|g| g[k]).collect();
            let mean = xs.iter().sum::<f64>() / episodes as f64;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (episodes - 1) as f64;
            let se = (var / episodes as f64).sqrt();
            assert!(mean.abs() <= 3.0 * se + 1e-12, "coordinate {k}: mean {mean}, se {se}");
        }
    }

    #[test]
    fn reinforce_touches_theta_only() {
        let mut store = ParamStore::new(4);
        let toy = Toy::new(&mut store);
        let head = toy.end_task();
        let before = snapshot(&store, &head);
        let theta_before = snapshot(&store, &toy.theta());
        let mut opt = OptimizerConfig::sgd(0.5, 0.0).build();
        let mut baseline = Baseline::new(BaselineKind::None);
        let mut r = rng(4);
        let sample = toy_data()[0].clone();
        for _ in 0..10 {
            reinforce_step(&toy, &mut store, &mut opt, &sample, |s, l| toy.reward(s, &sample, l), &mut baseline, &RlConfig::default(), &mut r).unwrap();
        }
        assert_eq!(snapshot(&store, &head), before);
        assert!(head.iter().all(|&id| store.grad(id).data().iter().all(|&g| g == 0.0)));
        assert_ne!(snapshot(&store, &toy.theta()), theta_before);
    }

    #[test]
    fn single_node_episode_is_skipped() {
        let mut store = ParamStore::new(5);
        let policy = PlantedEdgePolicy {
            n: 1,
            logits: store.insert_zeros("one", &[1, 1]).unwrap(),
            edge: (0, 0),
        };
        let mut opt = OptimizerConfig::sgd(1.0, 0.0).build();
        let ep = reinforce_step(&policy, &mut store, &mut opt, &(), |_, _| Ok(1.0), &mut Baseline::new(BaselineKind::None), &RlConfig::default(), &mut rng(5)).unwrap();
        assert!(ep.skipped);
    }

    #[test]
    fn moving_baseline_tracks_rewards() {
        let mut b = Baseline::new(BaselineKind::Moving { decay: 0.5 });
        b.observe(1.0);
        assert_eq!(b.value, Some(1.0));
        b.observe(0.0);
        assert_eq!(b.value, Some(0.5));
        let mut none = Baseline::new(BaselineKind::None);
        none.observe(1.0);
        assert_eq!(none.value, None);
    }

    fn greedy(toy: &Toy, store: &ParamStore, data: &[ToySample]) -> Vec<Layout> {
        greedy_layouts(toy, store, data, &mut rng(0)).unwrap()
    }

    #[test]
    fn supervised_step_zero_lr_and_frozen_theta() {
        let mut store = ParamStore::new(6);
        let toy = Toy::new(&mut store);
        let data = toy_data();
        let layouts = greedy(&toy, &store, &data);
        let batch: Vec<_> = data.iter().zip(&layouts).collect();
        let all: Vec<ParamId> = store.ids().collect();
        let before = snapshot(&store, &all);
        let mut opt = OptimizerConfig::sgd(0.0, 0.9).build();
        let l = supervised_step(&toy, &mut store, &mut opt, &batch, &mut rng(6)).unwrap();
        assert_eq!(l.used, 5);
        assert_eq!(snapshot(&store, &all), before);

        let theta = snapshot(&store, &toy.theta());
        let head = snapshot(&store, &toy.end_task());
        let mut opt = OptimizerConfig::adam(0.1).build();
        supervised_step(&toy, &mut store, &mut opt, &batch, &mut rng(6)).unwrap();
        assert_eq!(snapshot(&store, &toy.theta()), theta);
        assert_ne!(snapshot(&store, &toy.end_task()), head);
    }

    #[test]
    fn supervised_steps_memorize_small_set() {
        let mut store = ParamStore::new(7);
        let toy = Toy::new(&mut store);
        let data = toy_data();
        let layouts = greedy(&toy, &store, &data);
        let batch: Vec<_> = data.iter().zip(&layouts).collect();
        let mut opt = OptimizerConfig::adam(0.05).build();
        let mut r = rng(7);
        let first = supervised_step(&toy, &mut store, &mut opt, &batch, &mut r).unwrap().loss;
        let mut last = first;
        for _ in 0..49 {
            last = supervised_step(&toy, &mut store, &mut opt, &batch, &mut r).unwrap().loss;
        }
        assert!(last < first, "{first} -> {last}");
    }

    fn schedule(rounds: usize) -> ScheduleConfig {
        ScheduleConfig {
            rounds,
            sl_epochs: 2,
            sl_epochs_after: 1,
            rl_epochs: 1,
            sl_batch: 2,
            sl_optimizer: OptimizerConfig::adam(0.01),
            rl_optimizer: OptimizerConfig::adam(0.01),
            baseline: BaselineKind::SelfCritic,
            rl: RlConfig::default(),
        }
    }

    fn run(cfg: &ScheduleConfig, seed: u64) -> (TrainLog, Vec<Vec<f64>>) {
        let mut store = ParamStore::new(seed);
        let toy = Toy::new(&mut store);
        let data = toy_data();
        let log = hybrid_schedule(&toy, &mut store, &data, cfg, &mut rng(seed), |_, _| Ok(0.0)).unwrap();
        let all: Vec<ParamId> = store.ids().collect();
        (log, snapshot(&store, &all))
    }

    #[test]
    fn schedule_phase_layout() {
        let phases = |log: &TrainLog| log.phases.iter().map(|p| p.phase).collect::<Vec<_>>();
        let (log, _) = run(&schedule(0), 8);
        assert_eq!(phases(&log), vec![Phase::Supervised]);
        let (log, _) = run(&schedule(2), 8);
        use Phase::*;
        assert_eq!(phases(&log), vec![Supervised, Reinforce, Supervised, Reinforce, Supervised]);
        assert_eq!(ScheduleConfig::default().phases().len(), 5);
        assert_eq!(log.phases[0].steps, 2 * 3);
        assert_eq!(log.phases[1].steps, 5);
        assert_eq!(log.to_json_lines().unwrap().lines().count(), log.steps.len());
        assert!(log.phases[1].mean_reward.is_some());
    }

    #[test]
    fn schedule_is_deterministic() {
        assert_eq!(run(&schedule(2), 9), run(&schedule(2), 9));
        assert_ne!(run(&schedule(2), 9).1, run(&schedule(2), 10).1);
    }

    #[test]
    fn fixed_structures_cannot_reinforce() {
        let mut store = ParamStore::new(0);
        let policy = PlantedEdgePolicy::new(&mut store, "theta", 3, (0, 1), 0.1).unwrap();
        struct Fixed(PlantedEdgePolicy);
        impl StructurePolicy for Fixed {
            type Sample = ();
            fn structure(&self) -> Structure {
                Structure::Chain
            }
            fn theta(&self) -> Vec<ParamId> {
                self.0.theta()
            }
            fn score(&self, tape: &mut Tape, store: &ParamStore, s: &()) -> Result<ScoredPairs> {
                self.0.score(tape, store, s)
            }
            fn boxes(&self, _: &()) -> Vec<BoxCoords> {
                Vec::new()
            }
        }
        let mut opt = OptimizerConfig::sgd(1.0, 0.0).build();
        let res = reinforce_step(&Fixed(policy), &mut store, &mut opt, &(), |_, _| Ok(1.0), &mut Baseline::new(BaselineKind::None), &RlConfig::default(), &mut rng(0));
        assert!(res.is_err());
    }
}
