//! Scene-graph head: object and relation context over the context tree,
//! top-down object decoding, pairwise predicate classification, and the
//! Recall@K / mean Recall@K metrics.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{BiTreeLstm, ContextFeatures};
use crate::error::{Error, Result};
use crate::ndcore::{cross_entropy, Linear, LstmCell, Mlp, NodeId, PairHalves, PairMlp, ParamId, ParamStore, Tape};
use crate::scoring::{spatial_feature, BoxCoords, ImageSize, ObjectProposal, ScoreNet, ScoringConfig};
use crate::treebuild::{BinaryTree, CtxTree, Structure};

/// Evaluation protocols, from hardest to easiest.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    /// Boxes, classes and predicates are all predicted.
    SgGen,
    /// Boxes are given.
    SgCls,
    /// Boxes and classes are given.
    PredCls,
}

impl Protocol {
    pub const ALL: [Protocol; 3] = [Protocol::SgGen, Protocol::SgCls, Protocol::PredCls];

    pub fn name(self) -> &'static str {
        match self {
            Protocol::SgGen => "sggen",
            Protocol::SgCls => "sgcls",
            Protocol::PredCls => "predcls",
        }
    }

    pub fn parse(s: &str) -> Option<Protocol> {
        Protocol::ALL.into_iter().find(|p| p.name() == s)
    }
}

/// `(subject, predicate, object)` with node indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Relation {
    pub s: usize,
    pub p: usize,
    pub o: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthGraph {
    pub boxes: Vec<BoxCoords>,
    pub labels: Vec<usize>,
    pub relations: Vec<Relation>,
}

impl GroundTruthGraph {
    pub fn validate(&self, num_classes: usize, num_predicates: usize) -> Result<()> {
        let n = self.labels.len();
        if self.boxes.len() != n {
            return Err(Error::Validation(format!("{} boxes for {n} labels", self.boxes.len())));
        }
        if let Some(l) = self.labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Validation(format!("object class {l} out of range")));
        }
        let mut seen = std::collections::HashSet::new();
        for r in &self.relations {
            if r.s >= n || r.o >= n {
                return Err(Error::Validation(format!("relation {r:?} indexes past {n} objects")));
            }
            if r.s == r.o {
                return Err(Error::Validation(format!("relation {r:?} relates an object to itself")));
            }
            if r.p == 0 || r.p >= num_predicates {
                return Err(Error::Validation(format!("predicate {} out of range", r.p)));
            }
            if !seen.insert(*r) {
                return Err(Error::Validation(format!("duplicate relation {r:?}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Triplet {
    pub s: usize,
    pub o: usize,
    pub p: usize,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneGraphPrediction {
    pub labels: Vec<usize>,
    pub label_scores: Vec<f64>,
    /// Per-node class distributions `c_i`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub distributions: Vec<Vec<f64>>,
    pub boxes: Vec<BoxCoords>,
    /// Ranked by non-increasing score.
    pub triplets: Vec<Triplet>,
}

impl SceneGraphPrediction {
    pub fn validate(&self) -> Result<()> {
        let n = self.labels.len();
        if self.boxes.len() != n || self.label_scores.len() != n {
            return Err(Error::Validation("prediction has inconsistent node counts".into()));
        }
        for w in self.triplets.windows(2) {
            if w[1].score > w[0].score {
                return Err(Error::Validation("triplets are not ranked by score".into()));
            }
        }
        if let Some(t) = self.triplets.iter().find(|t| t.s == t.o || t.s >= n || t.o >= n) {
            return Err(Error::Validation(format!("invalid triplet {t:?}")));
        }
        Ok(())
    }
}

/// Ranking score of a triplet.
pub fn triplet_score(subject: f64, object: f64, predicate: f64) -> f64 {
    subject * object * predicate
}

/// Ranks triplets from per-pair predicate distributions (index 0 is background).
///
/// With `graph_constraint` each ordered pair contributes only its best
/// foreground predicate.
pub fn rank_triplets(
    label_scores: &[f64],
    pairs: &[(usize, usize)],
    predicate_probs: &[Vec<f64>],
    graph_constraint: bool,
) -> Vec<Triplet> {
    let mut out = Vec::new();
    for (&(s, o), probs) in pairs.iter().zip(predicate_probs) {
        if graph_constraint {
            let mut best = 1;
            for k in 2..probs.len() {
                if probs[k] > probs[best] {
                    best = k;
                }
            }
            if best < probs.len() {
                out.push(Triplet {
                    s,
                    o,
                    p: best,
                    score: triplet_score(label_scores[s], label_scores[o], probs[best]),
                });
            }
        } else {
            for (p, &pr) in probs.iter().enumerate().skip(1) {
                out.push(Triplet {
                    s,
                    o,
                    p,
                    score: triplet_score(label_scores[s], label_scores[o], pr),
                });
            }
        }
    }
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    out
}

/// Whether predicted triplet `t` matches ground-truth relation `r`.
pub fn triplet_matches(
    pred: &SceneGraphPrediction,
    t: &Triplet,
    gt: &GroundTruthGraph,
    r: &Relation,
    protocol: Protocol,
) -> bool {
    if t.p != r.p || pred.labels[t.s] != gt.labels[r.s] || pred.labels[t.o] != gt.labels[r.o] {
        return false;
    }
    match protocol {
        Protocol::SgGen => pred.boxes[t.s].iou(&gt.boxes[r.s]) >= 0.5 && pred.boxes[t.o].iou(&gt.boxes[r.o]) >= 0.5,
        Protocol::SgCls | Protocol::PredCls => t.s == r.s && t.o == r.o,
    }
}

/// Which ground-truth relations are recalled by the top `k` triplets.
///
/// Predictions are visited in rank order; each one claims the first
/// still-unmatched relation it matches.
pub fn matched_relations(
    pred: &SceneGraphPrediction,
    gt: &GroundTruthGraph,
    k: usize,
    protocol: Protocol,
) -> Result<Vec<bool>> {
    if k == 0 {
        return Err(Error::Validation("K must be at least 1".into()));
    }
    let mut matched = vec![false; gt.relations.len()];
    for t in pred.triplets.iter().take(k) {
        if let Some(i) = (0..gt.relations.len()).find(|&i| !matched[i] && triplet_matches(pred, t, gt, &gt.relations[i], protocol)) {
            matched[i] = true;
        }
    }
    Ok(matched)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallResult {
    pub hits: usize,
    pub total: usize,
    pub recall: f64,
    /// Set when the image has no ground-truth relations (recall is then 1).
    pub empty_gt: bool,
}

pub fn recall_at_k(pred: &SceneGraphPrediction, gt: &GroundTruthGraph, k: usize, protocol: Protocol) -> Result<RecallResult> {
    let matched = matched_relations(pred, gt, k, protocol)?;
    let hits = matched.iter().filter(|&&m| m).count();
    let total = matched.len();
    Ok(RecallResult {
        hits,
        total,
        recall: if total == 0 { 1.0 } else { hits as f64 / total as f64 },
        empty_gt: total == 0,
    })
}

/// Recall over a corpus: recalled relations over all ground-truth relations.
pub fn corpus_recall_at_k(
    preds: &[SceneGraphPrediction],
    gts: &[GroundTruthGraph],
    k: usize,
    protocol: Protocol,
) -> Result<f64> {
    check_corpus(preds, gts)?;
    let (mut hits, mut total) = (0, 0);
    for (p, g) in preds.iter().zip(gts) {
        let r = recall_at_k(p, g, k, protocol)?;
        hits += r.hits;
        total += r.total;
    }
    Ok(if total == 0 { 1.0 } else { hits as f64 / total as f64 })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanRecall {
    pub mean: f64,
    /// Per predicate class; `None` when the class has no ground-truth instance.
    pub per_predicate: Vec<Option<f64>>,
}

pub fn mean_recall_at_k(
    preds: &[SceneGraphPrediction],
    gts: &[GroundTruthGraph],
    k: usize,
    protocol: Protocol,
    num_predicates: usize,
) -> Result<MeanRecall> {
    check_corpus(preds, gts)?;
    let mut hits = vec![0usize; num_predicates];
    let mut total = vec![0usize; num_predicates];
    for (p, g) in preds.iter().zip(gts) {
        let matched = matched_relations(p, g, k, protocol)?;
        for (r, m) in g.relations.iter().zip(matched) {
            if r.p >= num_predicates {
                return Err(Error::Validation(format!("predicate {} out of range", r.p)));
            }
            total[r.p] += 1;
            hits[r.p] += m as usize;
        }
    }
    let per_predicate: Vec<Option<f64>> = hits
        .iter()
        .zip(&total)
        .map(|(&h, &t)| (t > 0).then(|| h as f64 / t as f64))
        .collect();
    let present: Vec<f64> = per_predicate.iter().flatten().copied().collect();
    let mean = if present.is_empty() {
        1.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    Ok(MeanRecall { mean, per_predicate })
}

fn check_corpus(preds: &[SceneGraphPrediction], gts: &[GroundTruthGraph]) -> Result<()> {
    if preds.len() != gts.len() {
        return Err(Error::Validation(format!(
            "{} predictions for {} ground-truth graphs",
            preds.len(),
            gts.len()
        )));
    }
    Ok(())
}

/// Left-child and right-child label counts for nodes of one category.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchHistogram {
    pub left: BTreeMap<usize, usize>,
    pub right: BTreeMap<usize, usize>,
}

pub fn branch_statistics(trees: &[(BinaryTree, Vec<usize>)], category: usize) -> BranchHistogram {
    let mut h = BranchHistogram::default();
    for (tree, labels) in trees {
        for v in 0..tree.n() {
            if labels[v] != category {
                continue;
            }
            if let Some(l) = tree.left[v] {
                *h.left.entry(labels[l]).or_insert(0) += 1;
            }
            if let Some(r) = tree.right[v] {
                *h.right.entry(labels[r]).or_insert(0) += 1;
            }
        }
    }
    h
}

/// Raw 32-d box-pair input `[b_i; b_j; b_union; b_intersection]`.
pub fn box_pair_feature(bi: &BoxCoords, bj: &BoxCoords, image: ImageSize) -> Result<[f64; 32]> {
    let mut out = [0.0; 32];
    out[..8].copy_from_slice(&spatial_feature(bi, image)?);
    out[8..16].copy_from_slice(&spatial_feature(bj, image)?);
    out[16..24].copy_from_slice(&spatial_feature(&bi.union(bj), image)?);
    if let Some(inter) = bi.intersection(bj) {
        out[24..].copy_from_slice(&spatial_feature(&inter, image)?);
    }
    Ok(out)
}

/// Union-region visual features for every ordered pair, stored densely.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnionFeatures {
    pub n: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl UnionFeatures {
    pub fn from_pairs(n: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n * dim {
            return Err(Error::Validation(format!("union features hold {} values, need {}", data.len(), n * n * dim)));
        }
        Ok(UnionFeatures { n, dim, data })
    }

    /// Mean visual feature of the proposals lying inside each pair's union box.
    pub fn derive(proposals: &[ObjectProposal]) -> Self {
        let n = proposals.len();
        let dim = proposals.first().map_or(0, |p| p.visual.len());
        let mut data = vec![0.0; n * n * dim];
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let u = proposals[i].bbox.union(&proposals[j].bbox);
                let members: Vec<&ObjectProposal> = proposals.iter().filter(|p| u.contains(&p.bbox)).collect();
                let slot = &mut data[(i * n + j) * dim..(i * n + j + 1) * dim];
                for m in &members {
                    for (s, v) in slot.iter_mut().zip(&m.visual) {
                        *s += v;
                    }
                }
                for s in slot.iter_mut() {
                    *s /= members.len() as f64;
                }
            }
        }
        UnionFeatures { n, dim, data }
    }

    pub fn get(&self, i: usize, j: usize) -> &[f64] {
        let k = (i * self.n + j) * self.dim;
        &self.data[k..k + self.dim]
    }
}

/// One image as seen by the head under some protocol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SggSample {
    pub proposals: Vec<ObjectProposal>,
    pub union: UnionFeatures,
    pub gt: GroundTruthGraph,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairSampling {
    pub bg_ratio: usize,
    pub cap: usize,
}

impl Default for PairSampling {
    fn default() -> Self {
        PairSampling { bg_ratio: 3, cap: 64 }
    }
}

/// Training pairs `(s, o, target)`: foreground pairs first, then background
/// pairs at `bg_ratio` per foreground pair, capped at `cap` in total.
pub fn sample_training_pairs<R: Rng + ?Sized>(
    gt: &GroundTruthGraph,
    cfg: PairSampling,
    rng: &mut R,
) -> Vec<(usize, usize, usize)> {
    let n = gt.labels.len();
    let mut target = vec![0usize; n * n];
    for r in &gt.relations {
        if target[r.s * n + r.o] == 0 {
            target[r.s * n + r.o] = r.p;
        }
    }
    let mut fg = Vec::new();
    let mut bg = Vec::new();
    for s in 0..n {
        for o in 0..n {
            if s == o {
                continue;
            }
            match target[s * n + o] {
                0 => bg.push((s, o, 0)),
                p => fg.push((s, o, p)),
            }
        }
    }
    if fg.len() > cfg.cap {
        fg.shuffle(rng);
        fg.truncate(cfg.cap);
    }
    let want = (cfg.bg_ratio * fg.len().max(1)).min(cfg.cap - fg.len());
    bg.shuffle(rng);
    bg.truncate(want);
    fg.extend(bg);
    fg
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SggConfig {
    pub visual_dim: usize,
    pub num_classes: usize,
    /// Predicate classes including background at index 0.
    pub num_predicates: usize,
    pub class_embed_dim: usize,
    pub hidden: usize,
    pub pair_dim: usize,
    pub box_hidden: usize,
    pub scoring_hidden: usize,
    pub structure: Structure,
}

impl SggConfig {
    pub fn feature_dim(&self) -> usize {
        self.visual_dim + 8
    }
}

/// The four pairwise factors, all of width `pair_dim`.
#[derive(Clone, Copy, Debug)]
pub struct PairFeatures {
    pub d: NodeId,
    pub b: NodeId,
    pub v: NodeId,
    pub g: NodeId,
}

#[derive(Clone, Debug)]
pub struct SggForward {
    pub object_context: ContextFeatures,
    pub relation_context: ContextFeatures,
    pub object_logits: Vec<NodeId>,
    pub object_probs: Vec<NodeId>,
}

#[derive(Clone, Debug)]
pub struct SggModel {
    pub cfg: SggConfig,
    pub scorer: ScoreNet,
    pub class_embed: Linear,
    pub object_ctx: BiTreeLstm,
    pub relation_ctx: BiTreeLstm,
    pub decoder: LstmCell,
    pub parent_embed: Linear,
    pub object_cls: Linear,
    pub pair_ctx: PairMlp,
    pub box_mlp: Mlp,
    pub union_proj: Linear,
    pub predicate_cls: Linear,
}

impl SggModel {
    pub fn new(store: &mut ParamStore, cfg: SggConfig) -> Result<Self> {
        let fd = cfg.feature_dim();
        let h = cfg.hidden;
        let kind = cfg.structure.tree_kind();
        let scorer = ScoreNet::new(
            store,
            "theta",
            &ScoringConfig {
                feature_dim: fd,
                hidden: cfg.scoring_hidden,
                task: None,
            },
        )?;
        let box_mlp = Mlp::new(store, "sgg.box_mlp", &[32, cfg.box_hidden, cfg.pair_dim])?;
        let union_proj = Linear::new(store, "sgg.union_proj", cfg.visual_dim, cfg.pair_dim, true)?;
        // unit biases: the triple product starts out close to `d`
        box_mlp.layers.last().expect("mlp has layers").fill_bias(store, 1.0);
        union_proj.fill_bias(store, 1.0);
        Ok(SggModel {
            scorer,
            class_embed: Linear::new(store, "sgg.class_embed", cfg.num_classes, cfg.class_embed_dim, false)?,
            object_ctx: BiTreeLstm::new(store, "sgg.obj_ctx", fd + cfg.class_embed_dim, h, kind)?,
            relation_ctx: BiTreeLstm::new(store, "sgg.rel_ctx", 2 * h, h, kind)?,
            decoder: LstmCell::new(store, "sgg.decoder", 2 * h + cfg.class_embed_dim, h)?,
            parent_embed: Linear::new(store, "sgg.parent_embed", cfg.num_classes, cfg.class_embed_dim, false)?,
            object_cls: Linear::new(store, "sgg.obj_cls", h, cfg.num_classes, true)?,
            pair_ctx: PairMlp::new(store, "sgg.pair_ctx", 2 * h, &[cfg.pair_dim, cfg.pair_dim])?,
            box_mlp,
            union_proj,
            predicate_cls: Linear::new(store, "sgg.pred_cls", cfg.pair_dim, cfg.num_predicates, true)?,
            cfg,
        })
    }

    pub fn theta(&self) -> Vec<ParamId> {
        self.scorer.params()
    }

    pub fn end_task(&self) -> Vec<ParamId> {
        let mut p = self.class_embed.params();
        p.extend(self.object_ctx.params());
        p.extend(self.relation_ctx.params());
        p.extend(self.decoder.params());
        p.extend(self.parent_embed.params());
        p.extend(self.object_cls.params());
        p.extend(self.pair_ctx.params());
        p.extend(self.box_mlp.params());
        p.extend(self.union_proj.params());
        p.extend(self.predicate_cls.params());
        p
    }

    /// `D^o`: BiTreeLSTM over `z_i = [x_i; W1 c_i]`.
    pub fn object_context(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        proposals: &[ObjectProposal],
        tree: &CtxTree,
    ) -> Result<ContextFeatures> {
        if proposals.len() != tree.n() {
            return Err(Error::Validation(format!("{} proposals for a {}-node tree", proposals.len(), tree.n())));
        }
        let z = proposals
            .iter()
            .map(|p| {
                let x = tape.constant_vec(p.feature()?);
                let c = tape.constant_vec(p.class_dist.clone());
                let e = self.class_embed.forward(tape, store, c)?;
                tape.concat(&[x, e])
            })
            .collect::<Result<Vec<_>>>()?;
        self.object_ctx.encode(tape, store, tree, &z)
    }

    /// `D^r`: a second BiTreeLSTM over `D^o`.
    pub fn relation_context(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        d_o: &ContextFeatures,
        tree: &CtxTree,
    ) -> Result<ContextFeatures> {
        self.relation_ctx.encode(tape, store, tree, &d_o.d)
    }

    /// Top-down decoding in preorder; each node sees `[d_i^o; W2 c_parent]`.
    pub fn decode_objects(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        d_o: &ContextFeatures,
        tree: &CtxTree,
    ) -> Result<(Vec<NodeId>, Vec<NodeId>)> {
        let n = tree.n();
        let h0 = tape.zeros(self.cfg.hidden);
        let no_parent = tape.zeros(self.cfg.class_embed_dim);
        let mut state: Vec<Option<(NodeId, NodeId)>> = vec![None; n];
        let mut logits = vec![None; n];
        let mut probs: Vec<Option<NodeId>> = vec![None; n];
        for v in tree.preorder() {
            let (hp, cp, emb) = match tree.parent(v) {
                None => (h0, h0, no_parent),
                Some(p) => {
                    let (hp, cp) = state[p].expect("parent decoded first");
                    let dist = probs[p].expect("parent decoded first");
                    let emb = self.parent_embed.forward(tape, store, dist)?;
                    (hp, cp, emb)
                }
            };
            let input = tape.concat(&[d_o.d[v], emb])?;
            let (h, c) = self.decoder.forward(tape, store, input, hp, cp)?;
            let l = self.object_cls.forward(tape, store, h)?;
            state[v] = Some((h, c));
            logits[v] = Some(l);
            probs[v] = Some(tape.softmax(l));
        }
        Ok((
            logits.into_iter().map(|l| l.expect("every node decoded")).collect(),
            probs.into_iter().map(|p| p.expect("every node decoded")).collect(),
        ))
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        proposals: &[ObjectProposal],
        tree: &CtxTree,
    ) -> Result<SggForward> {
        let object_context = self.object_context(tape, store, proposals, tree)?;
        let relation_context = self.relation_context(tape, store, &object_context, tree)?;
        let (object_logits, object_probs) = self.decode_objects(tape, store, &object_context, tree)?;
        Ok(SggForward {
            object_context,
            relation_context,
            object_logits,
            object_probs,
        })
    }

    /// `g_ij = d_ij * b_ij * v_ij` for one ordered pair.
    #[allow(clippy::too_many_arguments)]
    pub fn pair_features(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        halves: &[PairHalves],
        proposals: &[ObjectProposal],
        union: &UnionFeatures,
        i: usize,
        j: usize,
    ) -> Result<PairFeatures> {
        if i == j {
            return Err(Error::Validation(format!("predicate requested for the pair ({i}, {i})")));
        }
        let d = self.pair_ctx.pair(tape, store, &halves[i], &halves[j])?;
        let raw = box_pair_feature(&proposals[i].bbox, &proposals[j].bbox, proposals[i].image_size)?;
        let raw = tape.constant_vec(raw.to_vec());
        let b = self.box_mlp.forward(tape, store, raw)?;
        let u = tape.constant_vec(union.get(i, j).to_vec());
        let v = self.union_proj.forward(tape, store, u)?;
        let dv = tape.mul(d, v)?;
        let g = tape.mul(dv, b)?;
        Ok(PairFeatures { d, b, v, g })
    }

    /// Predicate logits for each requested ordered pair.
    pub fn predict_predicates(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        d_r: &ContextFeatures,
        proposals: &[ObjectProposal],
        union: &UnionFeatures,
        pairs: &[(usize, usize)],
    ) -> Result<Vec<NodeId>> {
        if union.n != proposals.len() {
            return Err(Error::Validation("union features do not match the proposals".into()));
        }
        let halves = d_r
            .d
            .iter()
            .map(|&d| self.pair_ctx.halves(tape, store, d))
            .collect::<Result<Vec<_>>>()?;
        pairs
            .iter()
            .map(|&(i, j)| {
                let f = self.pair_features(tape, store, &halves, proposals, union, i, j)?;
                self.predicate_cls.forward(tape, store, f.g)
            })
            .collect()
    }

    /// Mean object cross-entropy plus mean predicate cross-entropy.
    pub fn loss<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        sample: &SggSample,
        tree: &CtxTree,
        sampling: PairSampling,
        rng: &mut R,
    ) -> Result<NodeId> {
        let fwd = self.forward(tape, store, &sample.proposals, tree)?;
        let obj = sample
            .gt
            .labels
            .iter()
            .zip(&fwd.object_logits)
            .map(|(&c, &l)| cross_entropy(tape, l, c))
            .collect::<Result<Vec<_>>>()?;
        let obj = tape.mean_n(&obj)?;
        let pairs = sample_training_pairs(&sample.gt, sampling, rng);
        if pairs.is_empty() {
            return Ok(obj);
        }
        let ij: Vec<(usize, usize)> = pairs.iter().map(|&(s, o, _)| (s, o)).collect();
        let logits = self.predict_predicates(tape, store, &fwd.relation_context, &sample.proposals, &sample.union, &ij)?;
        let pred = logits
            .iter()
            .zip(&pairs)
            .map(|(&l, &(_, _, t))| cross_entropy(tape, l, t))
            .collect::<Result<Vec<_>>>()?;
        let pred = tape.mean_n(&pred)?;
        tape.add(obj, pred)
    }

    /// Full ranked scene graph over all ordered pairs.
    ///
    /// Under PredCls the ground-truth labels are reported unchanged with score 1.
    pub fn predict(
        &self,
        store: &ParamStore,
        sample: &SggSample,
        tree: &CtxTree,
        protocol: Protocol,
        graph_constraint: bool,
    ) -> Result<SceneGraphPrediction> {
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, store, &sample.proposals, tree)?;
        let n = sample.proposals.len();
        let distributions: Vec<Vec<f64>> = fwd.object_probs.iter().map(|&p| tape.data(p).to_vec()).collect();
        let (labels, label_scores) = if protocol == Protocol::PredCls {
            (sample.gt.labels.clone(), vec![1.0; n])
        } else {
            distributions
                .iter()
                .map(|d| {
                    let mut best = 0;
                    for (k, &v) in d.iter().enumerate() {
                        if v > d[best] {
                            best = k;
                        }
                    }
                    (best, d[best])
                })
                .unzip()
        };
        let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).collect();
        let logits = self.predict_predicates(&mut tape, store, &fwd.relation_context, &sample.proposals, &sample.union, &pairs)?;
        let probs: Vec<Vec<f64>> = logits.iter().map(|&l| crate::ndcore::softmax(tape.data(l))).collect();
        Ok(SceneGraphPrediction {
            labels,
            label_scores: label_scores.clone(),
            distributions,
            boxes: sample.proposals.iter().map(|p| p.bbox).collect(),
            triplets: rank_triplets(&label_scores, &pairs, &probs, graph_constraint),
        })
    }
}
