//! Finite-difference gradient cases shared by the gradient tests and the
//! acceptance run.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use vctree::encoder::{BinaryTreeLstm, ChildMeanTreeLstm, TopDownLstm};
use vctree::learn::trace_log_prob;
use vctree::ndcore::gradcheck::{check, GradCheckReport};
use vctree::ndcore::{bce_with_logit, cross_entropy, soft_cross_entropy, GruCell, Linear, LstmCell, Mlp, NodeId, PairMlp, ParamStore, Tape};
use vctree::scoring::{BoxCoords, ImageSize, ObjectProposal, ScoreNet, ScoringConfig, TaskFeature, TaskScoringConfig};
use vctree::sgg::{SggConfig, SggModel, UnionFeatures};
use vctree::treebuild::{binarize_lcrs, max_spanning_tree, BuildMode, CtxTree, MultiBranchTree, Structure};
use vctree::vqa::{one_hot, Attention, Fusion, VqaConfig, VqaModel};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
pub const SEEDS: u64 = 20;

pub type Case = fn(u64) -> GradCheckReport;

pub struct CaseResult {
    pub name: &'static str,
    pub seeds: u64,
    pub checked: usize,
    pub max_rel_error: f64,
}

impl CaseResult {
    pub fn passes(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

pub fn cases() -> Vec<(&'static str, Case)> {
    vec![
        ("linear", linear),
        ("mlp", mlp),
        ("pair_mlp", pair_mlp),
        ("lstm_cell", lstm_cell),
        ("gru_cell", gru_cell),
        ("tree_lstm_top_down", top_down),
        ("tree_lstm_bottom_up_binary", bottom_up_binary),
        ("tree_lstm_bottom_up_child_mean", bottom_up_child_mean),
        ("fusion", fusion),
        ("attention", attention),
        ("question_gate", question_gate),
        ("cross_entropy", ce_loss),
        ("soft_cross_entropy", soft_ce_loss),
        ("binary_cross_entropy", bce_loss),
        ("score_matrix_and_tree_log_prob", score_log_prob),
        ("sgg_object_context_and_triple_product", sgg_head),
        ("vqa_head", vqa_head),
    ]
}

pub fn run_case(name: &'static str, case: Case, seeds: u64) -> CaseResult {
    let mut out = CaseResult {
        name,
        seeds,
        checked: 0,
        max_rel_error: 0.0,
    };
    for seed in 0..seeds {
        let r = case(seed);
        out.checked += r.checked;
        out.max_rel_error = out.max_rel_error.max(r.max_rel_error);
    }
    out
}

fn rng(seed: u64) -> StdRng {
    StdRng::seed_from_u64(0x6ad0 + seed)
}

fn vec_in(rng: &mut StdRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Scalar `r . y` with a fixed random `r`.
fn project(tape: &mut Tape, y: NodeId, r: &[f64]) -> NodeId {
    let r = tape.constant_vec(r.to_vec());
    tape.dot(y, r).unwrap()
}

fn all(store: &ParamStore) -> Vec<vctree::ndcore::ParamId> {
    store.ids().collect()
}

fn finish<F>(mut store: ParamStore, loss: F) -> GradCheckReport
where
    F: FnMut(&mut Tape, &ParamStore) -> vctree::Result<NodeId>,
{
    let ids = all(&store);
    check(&mut store, &ids, STEP, loss).unwrap()
}

fn linear(seed: u64) -> GradCheckReport {
    let mut r = rng(seed);
    let mut store = ParamStore::new(seed);
    let l = Linear::new(&mut store, "l", 4, 3, true).unwrap();
    let (x, w) = (vec_in(&mut r, 4), vec_in(&mut r, 3));
    finish(store, |t, s| {
        let x = t.constant_vec(x.clone());
        let y = l.forward(t, s, x)?;
        Ok(project(t, y, &w))
    })
}

fn mlp(seed: u64) -> GradCheckReport {
    let mut r = rng(seed);
    let mut store = ParamStore::new(seed);
    let m = Mlp::new(&mut store, "m", &[4, 5, 3]).unwrap();
    let (x, w) = (vec_in(&mut r, 4), vec_in(&mut r, 3));
    finish(store, |t, s| {
        let x = t.constant_vec(x.clone());
        let y = m.forward(t, s, x)?;
        Ok(project(t, y, &w))
    })
}

fn pair_mlp(seed: u64) -> GradCheckReport {
    let mut r = rng(seed);
    let mut store = ParamStore::new(seed);
    let m = PairMlp::new(&mut store, "p", 3, &[4, 2]).unwrap();
    let (a, b, w) = (vec_in(&mut r, 3), vec_in(&mut r, 3), vec_in(&mut r, 2));
    finish(store, |t, s| {
        let a = t.constant_vec(a.clone());
        let b = t.constant_vec(b.clone());
        let ha = m.halves(t, s, a)?;
        let hb = m.halves(t, s, b)?;
        let y = m.pair(t, s, &ha, &hb)?;
        Ok(project(t, y, &w))
    })
}

fn lstm_cell(seed: u64) -> GradCheckReport {
    let mut r = rng(seed);
    let mut store = ParamStore::new(seed);
    let c = LstmCell::new(&mut store, "c", 3, 4).unwrap();
    let (x, h, cp, w) = (vec_in(&mut r, 3), vec_in(&mut r, 4), vec_in(&mut r, 4), vec_in(&mut r, 8));
    finish(store, |t, s| {
        let x = t.constant_vec(x.clone());
        let h = t.constant_vec(h.clone());
        let cp = t.constant_vec(cp.clone());
        let (h2, c2) = c.forward(t, s, x, h, cp)?;
        let y = t.concat(&[h2, c2])?;
        Ok(project(t, y, &w))
    })
}

fn gru_cell(seed: u64) -> GradCheckReport {
    let mut r = rng(seed);
    let mut store = ParamStore::new(seed);
    let c = GruCell::new(&mut store, "g", 3, 4).unwrap();
    let (x, h, w) = (vec_in(&mut r, 3), vec_in(&mut r, 4), vec_in(&mut r, 4));
    finish(store, |t, s| {
        let x = t.constant_vec(x.clone());
        let h = t.constant_vec(h.clone());
        let y = c.forward(t, s, x, h)?;
        Ok(project(t, y, &w))
    })
}

/// Random multi-branch tree with `n` nodes.
pub fn random_tree(r: &mut StdRng, n: usize) -> MultiBranchTree {
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        perm.swap(i, r.random_range(0..=i));
    }
    let edges: Vec<(usize, usize)> = (1..n).map(|k| (perm[r.random_range(0..k)], perm[k])).collect();
    MultiBranchTree::from_edges(n, perm[0], &edges).unwrap()
}

fn tree_inputs(r: &mut StdRng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| vec_in(r, d)).collect()
}

fn sum_states(t: &mut Tape, h: &[NodeId], w: &[Vec<f64>]) -> vctree::Result<NodeId> {
    let terms: Vec<NodeId> = h.iter().zip(w).map(|(&h, w)| project(t, h, w)).collect();
    t.add_n(&terms)
}

fn top_down(seed: u64) -> GradCheckReport {
    let mut r = rng(seed);
    let n = r.random_range(2..6);
    let tree = CtxTree::Binary(binarize_lcrs(&random_tree(&mut r, n)));
    let mut store = ParamStore::new(seed);
    let enc = TopDownLstm::new(&mut store, "td", 3, 3).unwrap();
    let (z, w) = (tree_inputs(&mut r, n, 3), tree_inputs(&mut r, n, 3));
    finish(store, |t, s| {
        let z: Vec<NodeId> = z.iter().map(|v| t.constant_vec(v.clone())).collect();
        let st = enc.forward(t, s, &tree, &z)?;
        sum_states(t, &st.h, &w)
    })
}

fn bottom_up_binary(seed: u64) -> GradCheckReport {
    let mut r = rng(seed);
    let n = r.random_range(2..6);
    let tree = binarize_lcrs(&random_tree(&mut r, n));
    let mut store = ParamStore::new(seed);
    let enc = BinaryTreeLstm::new(&mut store, "bu", 3, 3).unwrap();
    let (z, w) = (tree_inputs(&mut r, n, 3), tree_inputs(&mut r, n, 3));
    finish(store, |t, s| {
        let z: Vec<NodeId> = z.iter().map(|v| t.constant_vec(v.clone())).collect();
        let st = enc.forward(t, s, &tree, &z)?;
        sum_states(t, &st.h, &w)
    })
}

fn bottom_up_child_mean(seed: u64) -> GradCheckReport {
    let mut r = rng(seed);
    let n = r.random_range(2..6);
    let tree = random_tree(&mut r, n);
    let mut store = ParamStore::new(seed);
    let enc = ChildMeanTreeLstm::new(&mut store, "cm", 3, 3).unwrap();
    let (z, w) = (tree_inputs(&mut r, n, 3), tree_inputs(&mut r, n, 3));
    finish(store, |t, s| {
        let z: Vec<NodeId> = z.iter().map(|v| t.constant_vec(v.clone())).collect();
        let st = enc.forward(t, s, &tree, &z)?;
        sum_states(t, &st.h, &w)
    })
}

fn fusion(seed: u64) -> GradCheckReport {
    let mut r = rng(seed);
    let mut store = ParamStore::new(seed);
    let f = Fusion::new(&mut store, "f", 3, 2, 4).unwrap();
    let (x, y, w) = (vec_in(&mut r, 3), vec_in(&mut r, 2), vec_in(&mut r, 4));
    finish(store, |t, s| {
        let x = t.constant_vec(x.clone());
        let y = t.constant_vec(y.clone());
        let o = f.forward(t, s, x, y)?;
        Ok(project(t, o, &w))
    })
}

fn attention(seed: u64) -> GradCheckReport {
    let mut r = rng(seed);
    let mut store = ParamStore::new(seed);
    let a = Attention::new(&mut store, "a", 3, 2, 3, 3, 3).unwrap();
    let n = r.random_range(1..5);
    let (z, q, w) = (tree_inputs(&mut r, n, 3), vec_in(&mut r, 2), vec_in(&mut r, 3));
    finish(store, |t, s| {
        let z: Vec<NodeId> = z.iter().map(|v| t.constant_vec(v.clone())).collect();
        let q = t.constant_vec(q.clone());
        let out = a.attend(t, s, &z, q)?;
        Ok(project(t, out.joint, &w))
    })
}

fn small_vqa(store: &mut ParamStore, use_context: bool) -> VqaModel {
    VqaModel::new(
        store,
        VqaConfig {
            visual_dim: 2,
            vocab_size: 4,
            word_dim: 2,
            q_dim: 3,
            num_types: 2,
            type_dim: 2,
            fuse_dim: 3,
            att_hidden: 2,
            joint_dim: 2,
            gate_hidden: 3,
            hidden: 2,
            classifier_hidden: 3,
            num_answers: 3,
            scoring_hidden: 2,
            structure: Structure::Vctree,
            use_context,
            unit_gate: false,
        },
    )
    .unwrap()
}

fn question_gate(seed: u64) -> GradCheckReport {
    let mut r = rng(seed);
    let mut store = ParamStore::new(seed);
    let m = small_vqa(&mut store, true);
    let (q, w) = (vec_in(&mut r, 3), vec_in(&mut r, 4));
    let ty = r.random_range(0..2);
    finish(store, |t, s| {
        let q = t.constant_vec(q.clone());
        let g = m.question_gate(t, s, q, &one_hot(ty, 2))?;
        Ok(project(t, g, &w))
    })
}

fn ce_loss(seed: u64) -> GradCheckReport {
    let mut r = rng(seed);
    let mut store = ParamStore::new(seed);
    let l = Linear::new(&mut store, "l", 3, 4, true).unwrap();
    let x = vec_in(&mut r, 3);
    let target = r.random_range(0..4);
    finish(store, |t, s| {
        let x = t.constant_vec(x.clone());
        let y = l.forward(t, s, x)?;
        cross_entropy(t, y, target)
    })
}

fn soft_ce_loss(seed: u64) -> GradCheckReport {
    let mut r = rng(seed);
    let mut store = ParamStore::new(seed);
    let l = Linear::new(&mut store, "l", 3, 4, true).unwrap();
    let x = vec_in(&mut r, 3);
    let targets: Vec<f64> = (0..4).map(|_| r.random_range(0.0..1.0)).collect();
    finish(store, |t, s| {
        let x = t.constant_vec(x.clone());
        let y = l.forward(t, s, x)?;
        soft_cross_entropy(t, y, &targets)
    })
}

fn bce_loss(seed: u64) -> GradCheckReport {
    let mut r = rng(seed);
    let mut store = ParamStore::new(seed);
    let l = Linear::new(&mut store, "l", 3, 1, true).unwrap();
    let x = vec_in(&mut r, 3);
    let label = r.random_bool(0.5);
    finish(store, |t, s| {
        let x = t.constant_vec(x.clone());
        let y = l.forward(t, s, x)?;
        bce_with_logit(t, y, label)
    })
}

pub fn random_proposals(r: &mut StdRng, n: usize, visual_dim: usize, classes: usize) -> Vec<ObjectProposal> {
    let image = ImageSize {
        width: 10.0,
        height: 10.0,
    };
    (0..n)
        .map(|_| {
            let x1 = r.random_range(0.0..6.0);
            let y1 = r.random_range(0.0..6.0);
            let mut dist: Vec<f64> = (0..classes).map(|_| r.random_range(0.1..1.0)).collect();
            let total: f64 = dist.iter().sum();
            dist.iter_mut().for_each(|v| *v /= total);
            ObjectProposal {
                visual: vec_in(r, visual_dim),
                bbox: BoxCoords::new(x1, y1, x1 + r.random_range(1.0..4.0), y1 + r.random_range(1.0..4.0)),
                class_dist: dist,
                image_size: image,
            }
        })
        .collect()
}

fn score_log_prob(seed: u64) -> GradCheckReport {
    let mut r = rng(seed);
    let n = r.random_range(3..6);
    let props = random_proposals(&mut r, n, 2, 2);
    let q = TaskFeature { q: vec_in(&mut r, 2) };
    let mut store = ParamStore::new(seed);
    let net = ScoreNet::new(
        &mut store,
        "theta",
        &ScoringConfig {
            feature_dim: 10,
            hidden: 3,
            task: Some(TaskScoringConfig {
                q_dim: 2,
                fuse_dim: 3,
                hidden: 2,
            }),
        },
    )
    .unwrap();
    // the trace is fixed once; only its probability is differentiated
    let trace = {
        let mut tape = Tape::new();
        let sp = net.score_matrix(&mut tape, &store, &props, Some(&q)).unwrap();
        max_spanning_tree(&sp.matrix, BuildMode::Sampled, &mut r).unwrap().1
    };
    finish(store, |t, s| {
        let sp = net.score_matrix(t, s, &props, Some(&q))?;
        Ok(trace_log_prob(t, &sp, &trace)?.expect("n >= 3 gives steps"))
    })
}

fn sgg_head(seed: u64) -> GradCheckReport {
    let mut r = rng(seed);
    let n = r.random_range(2..5);
    let props = random_proposals(&mut r, n, 2, 3);
    let union = UnionFeatures::derive(&props);
    let tree = CtxTree::Binary(binarize_lcrs(&random_tree(&mut r, n)));
    let mut store = ParamStore::new(seed);
    let m = SggModel::new(
        &mut store,
        SggConfig {
            visual_dim: 2,
            num_classes: 3,
            num_predicates: 3,
            class_embed_dim: 2,
            hidden: 2,
            pair_dim: 2,
            box_hidden: 2,
            scoring_hidden: 2,
            structure: Structure::Vctree,
        },
    )
    .unwrap();
    let pairs: Vec<(usize, usize)> = vec![(0, 1), (1, 0)];
    let (wp, wo) = (vec_in(&mut r, 6), vec_in(&mut r, 3 * n));
    let ids = m.end_task();
    check(&mut store, &ids, STEP, |t, s| {
        let f = m.forward(t, s, &props, &tree)?;
        let logits = m.predict_predicates(t, s, &f.relation_context, &props, &union, &pairs)?;
        let p = t.concat(&logits)?;
        let o = t.concat(&f.object_logits)?;
        let (a, b) = (project(t, p, &wp), project(t, o, &wo));
        t.add_n(&[a, b])
    })
    .unwrap()
}

fn vqa_head(seed: u64) -> GradCheckReport {
    let mut r = rng(seed);
    let n = r.random_range(1..4);
    let props = random_proposals(&mut r, n, 2, 2);
    let tree = CtxTree::Binary(binarize_lcrs(&random_tree(&mut r, n)));
    let mut store = ParamStore::new(seed);
    let m = small_vqa(&mut store, true);
    let sample = vctree::vqa::VqaSample {
        proposals: props,
        question: vctree::vqa::Question {
            tokens: (0..r.random_range(1..4)).map(|_| r.random_range(0..4)).collect(),
            question_type: r.random_range(0..2),
            targets: (0..3).map(|_| r.random_range(0.0..1.0)).collect(),
        },
    };
    let ids = m.end_task();
    check(&mut store, &ids, STEP, |t, s| {
        let f = m.forward(t, s, &sample, &tree)?;
        Ok(vctree::vqa::answer_loss(t, f.logits, &sample.question.targets)?.expect("targets carry mass"))
    })
    .unwrap()
}
