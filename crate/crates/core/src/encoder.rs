//! Bidirectional TreeLSTM context encoding.
//!
//! The top-down direction is a plain LSTM whose previous state is the node's
//! parent. Bottom-up, binary trees use a binary N-ary TreeLSTM over
//! `[h_left; h_right]` with separate left/right forget gates, and multi-branch
//! trees use a Child-Mean TreeLSTM. Missing children contribute zero states.
//! Traversals use explicit orders, never recursion.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndcore::{Linear, LstmCell, NodeId, ParamId, ParamStore, Tape};
use crate::treebuild::{BinaryTree, CtxTree, MultiBranchTree, TreeKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    TopDown,
    BottomUp,
}

/// Per-node hidden and memory states of one pass.
#[derive(Clone, Debug)]
pub struct NodeStates {
    pub h: Vec<NodeId>,
    pub c: Vec<NodeId>,
    pub direction: Direction,
    /// Nodes in the order they were evaluated.
    pub order: Vec<usize>,
}

/// `d_i = [h_top_down_i; h_bottom_up_i]` for every node, in proposal order.
#[derive(Clone, Debug)]
pub struct ContextFeatures {
    pub d: Vec<NodeId>,
}

fn check_inputs(tape: &Tape, n: usize, z: &[NodeId], in_dim: usize) -> Result<()> {
    if z.len() != n {
        return Err(Error::dim("encoder inputs", &[n], &[z.len()]));
    }
    for &zi in z {
        if tape.data(zi).len() != in_dim {
            return Err(Error::dim("encoder input", tape.shape(zi), &[in_dim]));
        }
    }
    Ok(())
}

/// Top-down LSTM over any tree; one parameter set for every parent.
#[derive(Clone, Debug)]
pub struct TopDownLstm {
    pub cell: LstmCell,
    pub in_dim: usize,
}

impl TopDownLstm {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, hidden: usize) -> Result<Self> {
        Ok(TopDownLstm {
            cell: LstmCell::new(store, name, in_dim, hidden)?,
            in_dim,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, tree: &CtxTree, z: &[NodeId]) -> Result<NodeStates> {
        tree.validate()?;
        check_inputs(tape, tree.n(), z, self.in_dim)?;
        let n = tree.n();
        let zero = tape.zeros(self.cell.hidden_dim);
        let mut h = vec![zero; n];
        let mut c = vec![zero; n];
        let order = tree.preorder();
        for &v in &order {
            let (hp, cp) = match tree.parent(v) {
                Some(p) => (h[p], c[p]),
                None => (zero, zero),
            };
            let (hv, cv) = self.cell.forward(tape, store, z[v], hp, cp)?;
            h[v] = hv;
            c[v] = cv;
        }
        Ok(NodeStates {
            h,
            c,
            direction: Direction::TopDown,
            order,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.cell.params()
    }
}

/// Binary N-ary TreeLSTM. Gates are packed `[i; f_l; f_r; o; u]`.
#[derive(Clone, Debug)]
pub struct BinaryTreeLstm {
    pub input: Linear,
    pub hidden: Linear,
    pub hidden_dim: usize,
}

impl BinaryTreeLstm {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, hidden: usize) -> Result<Self> {
        Ok(BinaryTreeLstm {
            input: Linear::new(store, &format!("{name}.wz"), in_dim, 5 * hidden, true)?,
            hidden: Linear::new(store, &format!("{name}.uh"), 2 * hidden, 5 * hidden, false)?,
            hidden_dim: hidden,
        })
    }

    /// One node given its left and right child states `(h, c)`.
    pub fn cell(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        z: NodeId,
        left: (NodeId, NodeId),
        right: (NodeId, NodeId),
    ) -> Result<(NodeId, NodeId)> {
        let hd = self.hidden_dim;
        let hcat = tape.concat(&[left.0, right.0])?;
        let a = self.input.forward(tape, store, z)?;
        let b = self.hidden.forward(tape, store, hcat)?;
        let pre = tape.add(a, b)?;
        let mut gates = Vec::with_capacity(5);
        for k in 0..5 {
            let g = tape.slice(pre, k * hd, hd)?;
            gates.push(if k == 4 { tape.tanh(g) } else { tape.sigmoid(g) });
        }
        let (i, fl, fr, o, u) = (gates[0], gates[1], gates[2], gates[3], gates[4]);
        let iu = tape.mul(i, u)?;
        let lc = tape.mul(fl, left.1)?;
        let rc = tape.mul(fr, right.1)?;
        let c = tape.add_n(&[iu, lc, rc])?;
        let tc = tape.tanh(c);
        let h = tape.mul(o, tc)?;
        Ok((h, c))
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, tree: &BinaryTree, z: &[NodeId]) -> Result<NodeStates> {
        tree.validate()?;
        check_inputs(tape, tree.n(), z, self.input.in_dim)?;
        let n = tree.n();
        let zero = tape.zeros(self.hidden_dim);
        let mut h = vec![zero; n];
        let mut c = vec![zero; n];
        let mut order = tree.preorder();
        order.reverse();
        for &v in &order {
            let state = |child: Option<usize>| child.map_or((zero, zero), |k| (h[k], c[k]));
            let (l, r) = (state(tree.left[v]), state(tree.right[v]));
            let (hv, cv) = self.cell(tape, store, z[v], l, r)?;
            h[v] = hv;
            c[v] = cv;
        }
        Ok(NodeStates {
            h,
            c,
            direction: Direction::BottomUp,
            order,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.input.params();
        p.extend(self.hidden.params());
        p
    }
}

/// Child-Mean TreeLSTM for multi-branch trees.
///
/// Input gates are packed `[i; f; o; u]`; `i, o, u` read the mean child
/// hidden state and each child gets its own forget gate from its hidden state.
#[derive(Clone, Debug)]
pub struct ChildMeanTreeLstm {
    pub input: Linear,
    pub iou_hidden: Linear,
    pub forget_hidden: Linear,
    pub hidden_dim: usize,
}

impl ChildMeanTreeLstm {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, hidden: usize) -> Result<Self> {
        Ok(ChildMeanTreeLstm {
            input: Linear::new(store, &format!("{name}.wz"), in_dim, 4 * hidden, true)?,
            iou_hidden: Linear::new(store, &format!("{name}.uiou"), hidden, 3 * hidden, false)?,
            forget_hidden: Linear::new(store, &format!("{name}.uf"), hidden, hidden, false)?,
            hidden_dim: hidden,
        })
    }

    /// One node given the `(h, c)` states of all its children.
    pub fn cell(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        z: NodeId,
        children: &[(NodeId, NodeId)],
    ) -> Result<(NodeId, NodeId)> {
        let hd = self.hidden_dim;
        let a = self.input.forward(tape, store, z)?;
        let h_mean = if children.is_empty() {
            tape.zeros(hd)
        } else {
            let hs: Vec<NodeId> = children.iter().map(|s| s.0).collect();
            tape.mean_n(&hs)?
        };
        let b = self.iou_hidden.forward(tape, store, h_mean)?;
        let slice_a = |tape: &mut Tape, k: usize| tape.slice(a, k * hd, hd);
        let ai = slice_a(tape, 0)?;
        let af = slice_a(tape, 1)?;
        let ao = slice_a(tape, 2)?;
        let au = slice_a(tape, 3)?;
        let bi = tape.slice(b, 0, hd)?;
        let bo = tape.slice(b, hd, hd)?;
        let bu = tape.slice(b, 2 * hd, hd)?;
        let i = tape.add(ai, bi)?;
        let i = tape.sigmoid(i);
        let o = tape.add(ao, bo)?;
        let o = tape.sigmoid(o);
        let u = tape.add(au, bu)?;
        let u = tape.tanh(u);
        let mut c = tape.mul(i, u)?;
        if !children.is_empty() {
            let mut terms = Vec::with_capacity(children.len());
            for &(hk, ck) in children {
                let uf = self.forget_hidden.forward(tape, store, hk)?;
                let f = tape.add(af, uf)?;
                let f = tape.sigmoid(f);
                terms.push(tape.mul(f, ck)?);
            }
            let mem = tape.mean_n(&terms)?;
            c = tape.add(c, mem)?;
        }
        let tc = tape.tanh(c);
        let h = tape.mul(o, tc)?;
        Ok((h, c))
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, tree: &MultiBranchTree, z: &[NodeId]) -> Result<NodeStates> {
        tree.validate()?;
        check_inputs(tape, tree.n(), z, self.input.in_dim)?;
        let n = tree.n();
        let zero = tape.zeros(self.hidden_dim);
        let mut h = vec![zero; n];
        let mut c = vec![zero; n];
        let mut order = tree.preorder();
        order.reverse();
        for &v in &order {
            let kids: Vec<(NodeId, NodeId)> = tree.children[v].iter().map(|&k| (h[k], c[k])).collect();
            let (hv, cv) = self.cell(tape, store, z[v], &kids)?;
            h[v] = hv;
            c[v] = cv;
        }
        Ok(NodeStates {
            h,
            c,
            direction: Direction::BottomUp,
            order,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.input.params();
        p.extend(self.iou_hidden.params());
        p.extend(self.forget_hidden.params());
        p
    }
}

#[derive(Clone, Debug)]
pub enum BottomUp {
    Binary(BinaryTreeLstm),
    ChildMean(ChildMeanTreeLstm),
}

/// Top-down plus bottom-up TreeLSTM with concatenated hidden states.
#[derive(Clone, Debug)]
pub struct BiTreeLstm {
    pub top_down: TopDownLstm,
    pub bottom_up: BottomUp,
    pub hidden: usize,
}

impl BiTreeLstm {
    /// `kind` picks the bottom-up variant and must match the trees fed in.
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, hidden: usize, kind: TreeKind) -> Result<Self> {
        let top_down = TopDownLstm::new(store, &format!("{name}.td"), in_dim, hidden)?;
        let bottom_up = match kind {
            TreeKind::Binary => BottomUp::Binary(BinaryTreeLstm::new(store, &format!("{name}.bu"), in_dim, hidden)?),
            TreeKind::Multibranch => {
                BottomUp::ChildMean(ChildMeanTreeLstm::new(store, &format!("{name}.bu"), in_dim, hidden)?)
            }
        };
        Ok(BiTreeLstm {
            top_down,
            bottom_up,
            hidden,
        })
    }

    pub fn out_dim(&self) -> usize {
        2 * self.hidden
    }

    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, tree: &CtxTree, z: &[NodeId]) -> Result<ContextFeatures> {
        let (td, bu) = self.encode_states(tape, store, tree, z)?;
        let d = (0..tree.n())
            .map(|i| tape.concat(&[td.h[i], bu.h[i]]))
            .collect::<Result<_>>()?;
        Ok(ContextFeatures { d })
    }

    /// Both passes' states, top-down first.
    pub fn encode_states(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        tree: &CtxTree,
        z: &[NodeId],
    ) -> Result<(NodeStates, NodeStates)> {
        let td = self.top_down.forward(tape, store, tree, z)?;
        let bu = match (&self.bottom_up, tree) {
            (BottomUp::Binary(cell), CtxTree::Binary(t)) => cell.forward(tape, store, t, z)?,
            (BottomUp::ChildMean(cell), CtxTree::MultiBranch(t)) => cell.forward(tape, store, t, z)?,
            _ => return Err(Error::Config("tree kind does not match the bottom-up TreeLSTM variant".into())),
        };
        Ok((td, bu))
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.top_down.params();
        p.extend(match &self.bottom_up {
            BottomUp::Binary(c) => c.params(),
            BottomUp::ChildMean(c) => c.params(),
        });
        p
    }
}

impl From<&CtxTree> for TreeKind {
    fn from(t: &CtxTree) -> Self {
        match t {
            CtxTree::Binary(_) => TreeKind::Binary,
            CtxTree::MultiBranch(_) => TreeKind::Multibranch,
        }
    }
}
