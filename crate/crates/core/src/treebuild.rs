//! Context structures built from a score matrix.
//!
//! A maximum spanning tree is grown with Prim's algorithm from the node with
//! the largest row sum, either greedily or by sampling each attachment edge in
//! proportion to its score. The multi-branch result is turned into a binary
//! tree by the left-child/right-sibling rule: the first attached child becomes
//! the left child, each later sibling the right child of the one before it.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scoring::{BoxCoords, ScoreMatrix};

/// Arbitrary-arity tree; `children` keep attachment order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultiBranchTree {
    pub root: usize,
    pub children: Vec<Vec<usize>>,
    pub parent: Vec<Option<usize>>,
}

impl MultiBranchTree {
    pub fn single() -> Self {
        MultiBranchTree {
            root: 0,
            children: vec![Vec::new()],
            parent: vec![None],
        }
    }

    /// Builds a tree from `(parent, child)` edges listed in attachment order.
    pub fn from_edges(n: usize, root: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut t = MultiBranchTree {
            root,
            children: vec![Vec::new(); n],
            parent: vec![None; n],
        };
        for &(p, c) in edges {
            if p >= n || c >= n {
                return Err(Error::Validation(format!("edge ({p},{c}) out of range for n={n}")));
            }
            t.children[p].push(c);
            t.parent[c] = Some(p);
        }
        t.validate()?;
        Ok(t)
    }

    pub fn n(&self) -> usize {
        self.parent.len()
    }

    /// `(parent, child)` pairs in pre-order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.preorder()
            .into_iter()
            .flat_map(|p| self.children[p].iter().map(move |&c| (p, c)))
            .collect()
    }

    pub fn contains_edge(&self, a: usize, b: usize) -> bool {
        self.parent[b] == Some(a) || self.parent[a] == Some(b)
    }

    pub fn total_weight(&self, s: &ScoreMatrix) -> f64 {
        self.edges().iter().map(|&(p, c)| s.get(p, c)).sum()
    }

    pub fn preorder(&self) -> Vec<usize> {
        let mut order = Vec::with_capacity(self.n());
        let mut stack = vec![self.root];
        while let Some(v) = stack.pop() {
            order.push(v);
            stack.extend(self.children[v].iter().rev());
        }
        order
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        if n == 0 || self.root >= n || self.children.len() != n {
            return Err(Error::Validation("malformed multi-branch tree".into()));
        }
        if self.parent[self.root].is_some() {
            return Err(Error::Validation("root has a parent".into()));
        }
        let mut seen = vec![false; n];
        let mut stack = vec![self.root];
        let mut count = 0;
        while let Some(v) = stack.pop() {
            if seen[v] {
                return Err(Error::Validation(format!("cycle through node {v}")));
            }
            seen[v] = true;
            count += 1;
            for &c in &self.children[v] {
                if c >= n || self.parent[c] != Some(v) {
                    return Err(Error::Validation(format!("inconsistent parent link for node {c}")));
                }
                stack.push(c);
            }
        }
        if count != n {
            return Err(Error::Validation(format!("tree reaches {count} of {n} nodes")));
        }
        Ok(())
    }
}

/// Binary tree: left edges are hierarchical, right edges parallel.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryTree {
    pub root: usize,
    pub left: Vec<Option<usize>>,
    pub right: Vec<Option<usize>>,
    pub parent: Vec<Option<usize>>,
}

impl BinaryTree {
    pub fn single() -> Self {
        BinaryTree {
            root: 0,
            left: vec![None],
            right: vec![None],
            parent: vec![None],
        }
    }

    /// Builds parent links from child links.
    pub fn from_links(root: usize, left: Vec<Option<usize>>, right: Vec<Option<usize>>) -> Result<Self> {
        let n = left.len();
        if right.len() != n {
            return Err(Error::Validation("left/right link arrays differ in length".into()));
        }
        let mut parent = vec![None; n];
        for v in 0..n {
            for c in [left[v], right[v]].into_iter().flatten() {
                if c >= n || parent[c].is_some() {
                    return Err(Error::Validation(format!("node {c} has an invalid or second parent")));
                }
                parent[c] = Some(v);
            }
        }
        let t = BinaryTree {
            root,
            left,
            right,
            parent,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn n(&self) -> usize {
        self.parent.len()
    }

    /// Root, then left subtree, then right subtree.
    pub fn preorder(&self) -> Vec<usize> {
        let mut order = Vec::with_capacity(self.n());
        let mut stack = vec![self.root];
        while let Some(v) = stack.pop() {
            order.push(v);
            stack.extend(self.right[v]);
            stack.extend(self.left[v]);
        }
        order
    }

    pub fn left_edge_count(&self) -> usize {
        self.left.iter().flatten().count()
    }

    /// Swaps the left and right child of `node`.
    pub fn mirrored_at(&self, node: usize) -> Result<BinaryTree> {
        let mut left = self.left.clone();
        let mut right = self.right.clone();
        std::mem::swap(&mut left[node], &mut right[node]);
        BinaryTree::from_links(self.root, left, right)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        if n == 0 || self.root >= n || self.left.len() != n || self.right.len() != n {
            return Err(Error::Validation("malformed binary tree".into()));
        }
        if self.parent[self.root].is_some() {
            return Err(Error::Validation("root has a parent".into()));
        }
        let mut seen = vec![false; n];
        let mut stack = vec![self.root];
        let mut count = 0;
        while let Some(v) = stack.pop() {
            if seen[v] {
                return Err(Error::Validation(format!("cycle through node {v}")));
            }
            seen[v] = true;
            count += 1;
            for c in [self.left[v], self.right[v]].into_iter().flatten() {
                if c >= n || self.parent[c] != Some(v) {
                    return Err(Error::Validation(format!("inconsistent parent link for node {c}")));
                }
                stack.push(c);
            }
        }
        if count != n {
            return Err(Error::Validation(format!("tree reaches {count} of {n} nodes")));
        }
        Ok(())
    }
}

/// Any context structure an encoder can run over.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CtxTree {
    Binary(BinaryTree),
    MultiBranch(MultiBranchTree),
}

impl CtxTree {
    pub fn n(&self) -> usize {
        match self {
            CtxTree::Binary(t) => t.n(),
            CtxTree::MultiBranch(t) => t.n(),
        }
    }

    pub fn root(&self) -> usize {
        match self {
            CtxTree::Binary(t) => t.root,
            CtxTree::MultiBranch(t) => t.root,
        }
    }

    /// The single structural parent used by top-down passes.
    pub fn parent(&self, v: usize) -> Option<usize> {
        match self {
            CtxTree::Binary(t) => t.parent[v],
            CtxTree::MultiBranch(t) => t.parent[v],
        }
    }

    pub fn preorder(&self) -> Vec<usize> {
        match self {
            CtxTree::Binary(t) => t.preorder(),
            CtxTree::MultiBranch(t) => t.preorder(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            CtxTree::Binary(t) => t.validate(),
            CtxTree::MultiBranch(t) => t.validate(),
        }
    }
}

/// Index of the largest row sum; ties go to the lowest index.
pub fn select_root(s: &ScoreMatrix) -> usize {
    let mut best = 0;
    let mut best_sum = f64::NEG_INFINITY;
    for i in 0..s.n {
        let sum = s.row_sum(i);
        if sum > best_sum {
            best = i;
            best_sum = sum;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BuildMode {
    Greedy,
    Sampled,
}

/// One attachment step of the construction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    /// `(tree node, pool node)` candidates in enumeration order.
    pub candidates: Vec<(usize, usize)>,
    pub validities: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub chosen: usize,
    /// All candidate scores were zero and the step was drawn uniformly.
    pub uniform_fallback: bool,
}

impl TraceStep {
    pub fn chosen_edge(&self) -> (usize, usize) {
        self.candidates[self.chosen]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstructionTrace {
    pub root: usize,
    pub steps: Vec<TraceStep>,
    /// Sum of log step probabilities of the chosen edges.
    pub log_prob: f64,
}

impl ConstructionTrace {
    /// Recomputes the log-probability from the recorded validities.
    pub fn recompute_log_prob(&self) -> f64 {
        self.steps
            .iter()
            .map(|st| {
                if st.uniform_fallback {
                    -(st.candidates.len() as f64).ln()
                } else {
                    let total: f64 = st.validities.iter().sum();
                    st.validities[st.chosen].ln() - total.ln()
                }
            })
            .sum()
    }
}

/// Prim construction over `s`.
///
/// Greedy mode attaches the highest-scoring `(tree, pool)` edge at every step
/// (ties by lowest tree node, then lowest pool node). Sampled mode draws the
/// edge with probability proportional to its score; the root is the greedy
/// root in both modes.
pub fn max_spanning_tree<R: Rng + ?Sized>(
    s: &ScoreMatrix,
    mode: BuildMode,
    rng: &mut R,
) -> Result<(MultiBranchTree, ConstructionTrace)> {
    let n = s.n;
    if n == 0 {
        return Err(Error::EmptyInput("spanning tree over zero nodes"));
    }
    let root = select_root(s);
    let mut in_tree = vec![false; n];
    in_tree[root] = true;
    let mut edges = Vec::with_capacity(n - 1);
    let mut steps = Vec::with_capacity(n - 1);
    let mut log_prob = 0.0;
    for _ in 1..n {
        let mut candidates = Vec::new();
        let mut validities = Vec::new();
        for t in (0..n).filter(|&t| in_tree[t]) {
            for p in (0..n).filter(|&p| !in_tree[p]) {
                candidates.push((t, p));
                validities.push(s.get(t, p));
            }
        }
        let total: f64 = validities.iter().sum();
        let uniform_fallback = !(total > 0.0);
        let probabilities: Vec<f64> = if uniform_fallback {
            vec![1.0 / candidates.len() as f64; candidates.len()]
        } else {
            validities.iter().map(|v| v / total).collect()
        };
        let chosen = match mode {
            BuildMode::Greedy => argmax_first(&validities),
            BuildMode::Sampled => sample_index(&probabilities, rng),
        };
        log_prob += if uniform_fallback {
            probabilities[chosen].ln()
        } else {
            validities[chosen].ln() - total.ln()
        };
        let (t, p) = candidates[chosen];
        in_tree[p] = true;
        edges.push((t, p));
        steps.push(TraceStep {
            candidates,
            validities,
            probabilities,
            chosen,
            uniform_fallback,
        });
    }
    let tree = MultiBranchTree::from_edges(n, root, &edges)?;
    Ok((tree, ConstructionTrace { root, steps, log_prob }))
}

fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding can leave `acc` a hair below 1; fall back to the last nonzero entry.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// Left-child/right-sibling conversion.
pub fn binarize_lcrs(t: &MultiBranchTree) -> BinaryTree {
    let n = t.n();
    let mut left = vec![None; n];
    let mut right = vec![None; n];
    let mut parent = vec![None; n];
    for v in 0..n {
        let kids = &t.children[v];
        if let Some(&first) = kids.first() {
            left[v] = Some(first);
            parent[first] = Some(v);
        }
        for w in kids.windows(2) {
            right[w[0]] = Some(w[1]);
            parent[w[1]] = Some(w[0]);
        }
    }
    BinaryTree {
        root: t.root,
        left,
        right,
        parent,
    }
}

/// Inverse of [`binarize_lcrs`]. The root must not have a right child.
pub fn unbinarize_lcrs(b: &BinaryTree) -> Result<MultiBranchTree> {
    b.validate()?;
    if b.right[b.root].is_some() {
        return Err(Error::Validation("root with a right sibling is not an LCRS encoding".into()));
    }
    let n = b.n();
    let mut children = vec![Vec::new(); n];
    let mut parent = vec![None; n];
    for v in 0..n {
        let mut next = b.left[v];
        while let Some(c) = next {
            children[v].push(c);
            parent[c] = Some(v);
            next = b.right[c];
        }
    }
    let t = MultiBranchTree {
        root: b.root,
        children,
        parent,
    };
    t.validate()?;
    Ok(t)
}

/// Nodes sorted by descending row sum (ties by lower index), chained through left edges.
pub fn chain_structure(s: &ScoreMatrix) -> BinaryTree {
    let n = s.n;
    let sums: Vec<f64> = (0..n).map(|i| s.row_sum(i)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| sums[b].total_cmp(&sums[a]).then(a.cmp(&b)));
    chain_from_order(&order)
}

pub fn chain_from_order(order: &[usize]) -> BinaryTree {
    let n = order.len();
    let mut left = vec![None; n];
    let mut parent = vec![None; n];
    for w in order.windows(2) {
        left[w[0]] = Some(w[1]);
        parent[w[1]] = Some(w[0]);
    }
    BinaryTree {
        root: order[0],
        left,
        right: vec![None; n],
        parent,
    }
}

/// Overlap ablation: the node overlapping (IoU > 0) the most remaining boxes
/// becomes the parent; the rest split into left (center x <= parent's) and
/// right (center x > parent's) subtrees.
pub fn overlap_tree(boxes: &[BoxCoords]) -> Result<BinaryTree> {
    let n = boxes.len();
    if n == 0 {
        return Err(Error::EmptyInput("overlap tree over zero boxes"));
    }
    let mut left = vec![None; n];
    let mut right = vec![None; n];
    let mut root = None;
    // (members, attach point)
    let mut stack: Vec<(Vec<usize>, Option<(usize, bool)>)> = vec![((0..n).collect(), None)];
    while let Some((members, attach)) = stack.pop() {
        if members.is_empty() {
            continue;
        }
        let count = |i: usize| {
            members
                .iter()
                .filter(|&&j| j != i && boxes[i].iou(&boxes[j]) > 0.0)
                .count()
        };
        let mut parent = members[0];
        let mut best = count(parent);
        for &i in &members[1..] {
            let c = count(i);
            if c > best || (c == best && i < parent) {
                parent = i;
                best = c;
            }
        }
        match attach {
            None => root = Some(parent),
            Some((p, true)) => left[p] = Some(parent),
            Some((p, false)) => right[p] = Some(parent),
        }
        let cx = boxes[parent].center_x();
        let (l, r): (Vec<usize>, Vec<usize>) = members
            .into_iter()
            .filter(|&i| i != parent)
            .partition(|&i| boxes[i].center_x() <= cx);
        stack.push((r, Some((parent, false))));
        stack.push((l, Some((parent, true))));
    }
    BinaryTree::from_links(root.expect("nonempty"), left, right)
}

/// Which context structure a model runs over.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Structure {
    Vctree,
    Chain,
    Overlap,
    Multibranch,
}

impl Structure {
    /// Whether the structure comes from a sampled construction with a trace.
    pub fn is_learnable(self) -> bool {
        matches!(self, Structure::Vctree | Structure::Multibranch)
    }

    pub fn tree_kind(self) -> TreeKind {
        match self {
            Structure::Multibranch => TreeKind::Multibranch,
            _ => TreeKind::Binary,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Structure::Vctree => "vctree",
            Structure::Chain => "chain",
            Structure::Overlap => "overlap",
            Structure::Multibranch => "multibranch",
        }
    }
}

/// A built structure and, for spanning-tree structures, its construction trace.
#[derive(Clone, Debug)]
pub struct Layout {
    pub tree: CtxTree,
    pub trace: Option<ConstructionTrace>,
}

pub fn build_layout<R: Rng + ?Sized>(
    structure: Structure,
    s: &ScoreMatrix,
    boxes: &[BoxCoords],
    mode: BuildMode,
    rng: &mut R,
) -> Result<Layout> {
    Ok(match structure {
        Structure::Vctree => {
            let (t, trace) = max_spanning_tree(s, mode, rng)?;
            Layout {
                tree: CtxTree::Binary(binarize_lcrs(&t)),
                trace: Some(trace),
            }
        }
        Structure::Multibranch => {
            let (t, trace) = max_spanning_tree(s, mode, rng)?;
            Layout {
                tree: CtxTree::MultiBranch(t),
                trace: Some(trace),
            }
        }
        Structure::Chain => Layout {
            tree: CtxTree::Binary(chain_structure(s)),
            trace: None,
        },
        Structure::Overlap => Layout {
            tree: CtxTree::Binary(overlap_tree(boxes)?),
            trace: None,
        },
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreeKind {
    Binary,
    Multibranch,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeNodeJson {
    pub id: usize,
    pub parent: Option<usize>,
    pub left: Option<usize>,
    pub right: Option<usize>,
}

/// Tree file format. Multi-branch trees are stored through their LCRS
/// encoding and tagged with `kind`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeJson {
    pub n: usize,
    pub root: usize,
    pub nodes: Vec<TreeNodeJson>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<TreeKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<String>>,
}

impl TreeJson {
    pub fn from_binary(t: &BinaryTree) -> Self {
        TreeJson {
            n: t.n(),
            root: t.root,
            nodes: (0..t.n())
                .map(|id| TreeNodeJson {
                    id,
                    parent: t.parent[id],
                    left: t.left[id],
                    right: t.right[id],
                })
                .collect(),
            kind: None,
            labels: None,
        }
    }

    pub fn from_ctx(t: &CtxTree) -> Self {
        match t {
            CtxTree::Binary(b) => TreeJson::from_binary(b),
            CtxTree::MultiBranch(m) => TreeJson {
                kind: Some(TreeKind::Multibranch),
                ..TreeJson::from_binary(&binarize_lcrs(m))
            },
        }
    }

    pub fn to_binary(&self) -> Result<BinaryTree> {
        if self.nodes.len() != self.n {
            return Err(Error::Validation(format!("tree lists {} nodes, n = {}", self.nodes.len(), self.n)));
        }
        let mut left = vec![None; self.n];
        let mut right = vec![None; self.n];
        let mut parent = vec![None; self.n];
        for node in &self.nodes {
            if node.id >= self.n {
                return Err(Error::Validation(format!("node id {} out of range", node.id)));
            }
            left[node.id] = node.left;
            right[node.id] = node.right;
            parent[node.id] = node.parent;
        }
        let t = BinaryTree {
            root: self.root,
            left,
            right,
            parent,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn to_ctx(&self) -> Result<CtxTree> {
        let b = self.to_binary()?;
        Ok(match self.kind {
            Some(TreeKind::Multibranch) => CtxTree::MultiBranch(unbinarize_lcrs(&b)?),
            _ => CtxTree::Binary(b),
        })
    }
}
