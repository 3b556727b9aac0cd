//! Reference implementations for property tests and the acceptance run.
//! None of these call the code they check.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use vctree::scoring::{BoxCoords, ScoreMatrix};
use vctree::sgg::{GroundTruthGraph, Protocol, Relation, SceneGraphPrediction, Triplet};
use vctree::treebuild::MultiBranchTree;

/// Symmetric matrix with zero diagonal and weights in (0, 1). With
/// `distinct` no two off-diagonal pairs share a weight.
pub fn random_scores(rng: &mut StdRng, n: usize, distinct: bool) -> ScoreMatrix {
    let pairs = n * n.saturating_sub(1) / 2;
    let mut weights: Vec<f64> = if distinct {
        let step = 1.0 / (pairs + 2) as f64;
        let mut w: Vec<f64> = (1..=pairs).map(|k| k as f64 * step + rng.random_range(0.0..0.5) * step).collect();
        w.shuffle(rng);
        w
    } else {
        (0..pairs).map(|_| rng.random_range(0.05..1.0)).collect()
    };
    let mut s = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let w = weights.pop().unwrap();
            s[i * n + j] = w;
            s[j * n + i] = w;
        }
    }
    ScoreMatrix::from_values(n, s).unwrap()
}

/// Sorted undirected edge list.
pub fn edge_set(edges: &[(usize, usize)]) -> Vec<(usize, usize)> {
    let mut e: Vec<(usize, usize)> = edges.iter().map(|&(a, b)| (a.min(b), a.max(b))).collect();
    e.sort_unstable();
    e
}

/// Maximum spanning tree found by enumerating every labelled tree through
/// its Pruefer sequence.
pub fn brute_force_max_spanning_tree(s: &ScoreMatrix) -> (f64, Vec<(usize, usize)>) {
    let n = s.n;
    match n {
        1 => return (0.0, Vec::new()),
        2 => return (s.get(0, 1), vec![(0, 1)]),
        _ => {}
    }
    let len = n - 2;
    let mut best = (f64::NEG_INFINITY, Vec::new());
    let mut seq = vec![0usize; len];
    loop {
        let edges = pruefer_decode(&seq, n);
        let w: f64 = edges.iter().map(|&(a, b)| s.get(a, b)).sum();
        if w > best.0 {
            best = (w, edge_set(&edges));
        }
        let mut k = 0;
        while k < len {
            seq[k] += 1;
            if seq[k] < n {
                break;
            }
            seq[k] = 0;
            k += 1;
        }
        if k == len {
            return best;
        }
    }
}

fn pruefer_decode(seq: &[usize], n: usize) -> Vec<(usize, usize)> {
    let mut degree = vec![1usize; n];
    for &v in seq {
        degree[v] += 1;
    }
    let mut edges = Vec::with_capacity(n - 1);
    for &v in seq {
        let leaf = (0..n).find(|&u| degree[u] == 1).unwrap();
        edges.push((leaf, v));
        degree[leaf] -= 1;
        degree[v] -= 1;
    }
    let rest: Vec<usize> = (0..n).filter(|&u| degree[u] == 1).collect();
    edges.push((rest[0], rest[1]));
    edges
}

/// Random labelled rooted tree; child order is random too.
pub fn random_tree(rng: &mut StdRng, n: usize) -> MultiBranchTree {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    let mut edges: Vec<(usize, usize)> = (1..n).map(|k| (perm[rng.random_range(0..k)], perm[k])).collect();
    edges.shuffle(rng);
    MultiBranchTree::from_edges(n, perm[0], &edges).unwrap()
}

/// Node with the largest row sum, lowest index on ties.
pub fn root_of(s: &ScoreMatrix) -> usize {
    let sums: Vec<f64> = (0..s.n).map(|i| (0..s.n).map(|j| s.get(i, j)).sum()).collect();
    (0..s.n).fold(0, |b, i| if sums[i] > sums[b] { i } else { b })
}

/// For every step, the probability that the step attaches each
/// `(tree node, new node)` edge, summed over all earlier choices.
pub fn exact_step_marginals(s: &ScoreMatrix) -> Vec<BTreeMap<(usize, usize), f64>> {
    fn walk(s: &ScoreMatrix, in_tree: &mut [bool], step: usize, mass: f64, out: &mut [BTreeMap<(usize, usize), f64>]) {
        if step == out.len() {
            return;
        }
        let n = s.n;
        let mut cands = Vec::new();
        for t in (0..n).filter(|&t| in_tree[t]) {
            for p in (0..n).filter(|&p| !in_tree[p]) {
                cands.push((t, p, s.get(t, p)));
            }
        }
        let total: f64 = cands.iter().map(|c| c.2).sum();
        for (t, p, w) in cands {
            let pr = mass * w / total;
            *out[step].entry((t, p)).or_insert(0.0) += pr;
            in_tree[p] = true;
            walk(s, in_tree, step + 1, pr, out);
            in_tree[p] = false;
        }
    }
    let n = s.n;
    let mut out = vec![BTreeMap::new(); n.saturating_sub(1)];
    let mut in_tree = vec![false; n];
    in_tree[root_of(s)] = true;
    walk(s, &mut in_tree, 0, 1.0, &mut out);
    out
}

/// Log-probability of attaching `edges` in order, from the matrix alone.
pub fn log_prob_of_edges(s: &ScoreMatrix, root: usize, edges: &[(usize, usize)]) -> f64 {
    let n = s.n;
    let mut in_tree = vec![false; n];
    in_tree[root] = true;
    let mut lp = 0.0;
    for &(t, p) in edges {
        let mut total = 0.0;
        for a in (0..n).filter(|&a| in_tree[a]) {
            for b in (0..n).filter(|&b| !in_tree[b]) {
                total += s.get(a, b);
            }
        }
        lp += s.get(t, p).ln() - total.ln();
        in_tree[p] = true;
    }
    lp
}

pub fn total_variation(a: &BTreeMap<(usize, usize), f64>, b: &BTreeMap<(usize, usize), f64>) -> f64 {
    let keys: BTreeSet<_> = a.keys().chain(b.keys()).collect();
    0.5 * keys
        .into_iter()
        .map(|k| (a.get(k).copied().unwrap_or(0.0) - b.get(k).copied().unwrap_or(0.0)).abs())
        .sum::<f64>()
}

fn overlap(a: &BoxCoords, b: &BoxCoords) -> f64 {
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = w * h;
    let area = |c: &BoxCoords| (c.x2 - c.x1) * (c.y2 - c.y1);
    inter / (area(a) + area(b) - inter)
}

/// `table[t][r]`: ranked triplet `t` matches ground-truth relation `r`.
pub fn match_table(pred: &SceneGraphPrediction, gt: &GroundTruthGraph, protocol: Protocol) -> Vec<Vec<bool>> {
    pred.triplets
        .iter()
        .map(|t| {
            gt.relations
                .iter()
                .map(|r| {
                    let labels = t.p == r.p && pred.labels[t.s] == gt.labels[r.s] && pred.labels[t.o] == gt.labels[r.o];
                    let nodes = match protocol {
                        Protocol::SgGen => {
                            overlap(&pred.boxes[t.s], &gt.boxes[r.s]) >= 0.5 && overlap(&pred.boxes[t.o], &gt.boxes[r.o]) >= 0.5
                        }
                        _ => t.s == r.s && t.o == r.o,
                    };
                    labels && nodes
                })
                .collect()
        })
        .collect()
}

/// Relations hit by the top `k` triplets when each triplet, in rank order,
/// takes the first free relation it matches.
pub fn oracle_hits(pred: &SceneGraphPrediction, gt: &GroundTruthGraph, k: usize, protocol: Protocol) -> Vec<bool> {
    let mut taken = vec![false; gt.relations.len()];
    for row in match_table(pred, gt, protocol).iter().take(k) {
        if let Some(r) = (0..row.len()).find(|&r| row[r] && !taken[r]) {
            taken[r] = true;
        }
    }
    taken
}

/// Size of the largest one-to-one matching between the top `k` triplets
/// and the relations, by trying every assignment.
pub fn max_matching(pred: &SceneGraphPrediction, gt: &GroundTruthGraph, k: usize, protocol: Protocol) -> usize {
    fn go(rows: &[Vec<bool>], used: &mut [bool]) -> usize {
        let Some((first, rest)) = rows.split_first() else { return 0 };
        let mut best = go(rest, used);
        for r in 0..used.len() {
            if first[r] && !used[r] {
                used[r] = true;
                best = best.max(1 + go(rest, used));
                used[r] = false;
            }
        }
        best
    }
    let mut table = match_table(pred, gt, protocol);
    table.truncate(k);
    go(&table, &mut vec![false; gt.relations.len()])
}

pub fn oracle_recall(pred: &SceneGraphPrediction, gt: &GroundTruthGraph, k: usize, protocol: Protocol) -> f64 {
    let hits = oracle_hits(pred, gt, k, protocol);
    if hits.is_empty() {
        1.0
    } else {
        hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64
    }
}

pub fn oracle_corpus_recall(preds: &[SceneGraphPrediction], gts: &[GroundTruthGraph], k: usize, protocol: Protocol) -> f64 {
    let (mut hit, mut all) = (0usize, 0usize);
    for (p, g) in preds.iter().zip(gts) {
        let h = oracle_hits(p, g, k, protocol);
        all += h.len();
        hit += h.iter().filter(|&&x| x).count();
    }
    if all == 0 { 1.0 } else { hit as f64 / all as f64 }
}

/// Recall per predicate over the corpus, then the mean over predicates that
/// occur.
pub fn oracle_mean_recall(
    preds: &[SceneGraphPrediction],
    gts: &[GroundTruthGraph],
    k: usize,
    protocol: Protocol,
    num_predicates: usize,
) -> (f64, Vec<Option<f64>>) {
    let mut hit = vec![0.0; num_predicates];
    let mut all = vec![0.0; num_predicates];
    for (p, g) in preds.iter().zip(gts) {
        for (r, h) in g.relations.iter().zip(oracle_hits(p, g, k, protocol)) {
            all[r.p] += 1.0;
            if h {
                hit[r.p] += 1.0;
            }
        }
    }
    let per: Vec<Option<f64>> = (0..num_predicates).map(|c| (all[c] > 0.0).then(|| hit[c] / all[c])).collect();
    let present: Vec<f64> = per.iter().flatten().copied().collect();
    let mean = if present.is_empty() { 1.0 } else { present.iter().sum::<f64>() / present.len() as f64 };
    (mean, per)
}

/// Small random scene and a ranked prediction over the same nodes. Predicted
/// boxes are jittered and some labels are wrong, so every matching rule has
/// something to reject. `num_predicates` counts background as 0.
pub fn random_case(rng: &mut StdRng, num_classes: usize, num_predicates: usize) -> (SceneGraphPrediction, GroundTruthGraph) {
    let n = rng.random_range(2..6);
    let boxes: Vec<BoxCoords> = (0..n)
        .map(|_| {
            let (x, y) = (rng.random_range(0.0..6.0), rng.random_range(0.0..6.0));
            BoxCoords::new(x, y, x + rng.random_range(1.0..4.0), y + rng.random_range(1.0..4.0))
        })
        .collect();
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..num_classes)).collect();
    let mut relations = Vec::new();
    for s in 0..n {
        for o in (0..n).filter(|&o| o != s) {
            if rng.random_bool(0.3) {
                let p = rng.random_range(1..num_predicates);
                relations.push(Relation { s, p, o });
            }
        }
    }
    let gt = GroundTruthGraph {
        boxes: boxes.clone(),
        labels: labels.clone(),
        relations,
    };
    let pboxes = boxes
        .iter()
        .map(|b| {
            let dx = rng.random_range(-0.8..0.8);
            BoxCoords::new(b.x1 + dx, b.y1, b.x2 + dx, b.y2)
        })
        .collect();
    let plabels = labels
        .iter()
        .map(|&l| if rng.random_bool(0.8) { l } else { rng.random_range(0..num_classes) })
        .collect();
    let mut triplets = Vec::new();
    for _ in 0..rng.random_range(0..12) {
        let copy = !gt.relations.is_empty() && rng.random_bool(0.6);
        let (s, o, p) = if copy {
            let r = &gt.relations[rng.random_range(0..gt.relations.len())];
            (r.s, r.o, r.p)
        } else {
            let s = rng.random_range(0..n);
            (s, (s + rng.random_range(1..n)) % n, rng.random_range(1..num_predicates))
        };
        let score = rng.random_range(0.0..1.0);
        triplets.push(Triplet { s, o, p, score });
    }
    triplets.sort_by(|a, b| b.score.total_cmp(&a.score));
    let pred = SceneGraphPrediction {
        labels: plabels,
        label_scores: vec![1.0; n],
        distributions: Vec::new(),
        boxes: pboxes,
        triplets,
    };
    (pred, gt)
}
