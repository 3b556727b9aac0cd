use super::params::{ParamId, ParamStore};
use super::tape::{NodeId, Tape};
use crate::error::{Error, Result};

/// `W x + b` on tape nodes.
pub fn linear(tape: &mut Tape, w: NodeId, x: NodeId, b: Option<NodeId>) -> Result<NodeId> {
    let y = tape.matvec(w, x)?;
    match b {
        Some(b) => tape.add(y, b),
        None => Ok(y),
    }
}

/// Dense affine layer with weight `[out, in]` and optional bias `[out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::dim("linear", &[out_dim, in_dim], &[]));
        }
        let w = store.insert_uniform(&format!("{name}.w"), &[out_dim, in_dim], in_dim)?;
        let b = if bias {
            Some(store.insert_uniform(&format!("{name}.b"), &[out_dim], in_dim)?)
        } else {
            None
        };
        Ok(Linear { w, b, in_dim, out_dim })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let w = tape.param(store, self.w);
        let b = self.b.map(|b| tape.param(store, b));
        linear(tape, w, x, b)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.w_and_b().collect()
    }

    /// Sets every bias entry to `value`; no-op without a bias.
    pub fn fill_bias(&self, store: &mut ParamStore, value: f64) {
        if let Some(b) = self.b {
            store.value_mut(b).data_mut().fill(value);
        }
    }

    fn w_and_b(&self) -> impl Iterator<Item = ParamId> + '_ {
        std::iter::once(self.w).chain(self.b)
    }
}

/// Stacked linear layers with ReLU between them; the last layer is linear.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `sizes` lists input, hidden and output widths, e.g. `[in, hidden, out]`.
    pub fn new(store: &mut ParamStore, name: &str, sizes: &[usize]) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::EmptyInput("mlp layer sizes"));
        }
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], true))
            .collect::<Result<_>>()?;
        Ok(Mlp { layers })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map(|l| l.out_dim).unwrap_or(0)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        if tape.data(x).len() != self.in_dim() {
            return Err(Error::dim("mlp", tape.shape(x), &[self.in_dim()]));
        }
        self.forward_from(tape, store, x, 0)
    }

    fn forward_from(&self, tape: &mut Tape, store: &ParamStore, x: NodeId, start: usize) -> Result<NodeId> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate().skip(start) {
            if i > 0 {
                h = tape.relu(h);
            }
            h = layer.forward(tape, store, h)?;
        }
        Ok(h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| l.w_and_b()).collect()
    }
}

/// An MLP applied to `[a; b]`, with the first layer stored as the two column
/// blocks `W = [W_a | W_b]` so per-item projections are computed once and
/// shared across all pairs.
#[derive(Clone, Debug)]
pub struct PairMlp {
    pub first_a: Linear,
    pub first_b: Linear,
    pub rest: Option<Mlp>,
    pub item_dim: usize,
}

/// First-layer projections of one item: `(W_a x, W_b x)`.
#[derive(Clone, Copy, Debug)]
pub struct PairHalves {
    pub as_first: NodeId,
    pub as_second: NodeId,
}

impl PairMlp {
    /// `sizes` are the widths after the concatenated input, e.g. `[hidden, out]`.
    pub fn new(store: &mut ParamStore, name: &str, item_dim: usize, sizes: &[usize]) -> Result<Self> {
        let first = *sizes.first().ok_or(Error::EmptyInput("pair mlp layer sizes"))?;
        let first_a = Linear::new(store, &format!("{name}.0a"), item_dim, first, true)?;
        let first_b = Linear::new(store, &format!("{name}.0b"), item_dim, first, false)?;
        let rest = if sizes.len() > 1 {
            let mut layers = Vec::new();
            for (i, w) in sizes.windows(2).enumerate() {
                layers.push(Linear::new(store, &format!("{name}.{}", i + 1), w[0], w[1], true)?);
            }
            Some(Mlp { layers })
        } else {
            None
        };
        Ok(PairMlp {
            first_a,
            first_b,
            rest,
            item_dim,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.rest.as_ref().map_or(self.first_a.out_dim, Mlp::out_dim)
    }

    pub fn halves(&self, tape: &mut Tape, store: &ParamStore, x: NodeId) -> Result<PairHalves> {
        if tape.data(x).len() != self.item_dim {
            return Err(Error::dim("pair_mlp", tape.shape(x), &[self.item_dim]));
        }
        let as_first = self.first_a.forward(tape, store, x)?;
        let wb = tape.param(store, self.first_b.w);
        let as_second = tape.matvec(wb, x)?;
        Ok(PairHalves { as_first, as_second })
    }

    /// Output for the ordered pair `(a, b)`, i.e. `MLP([a; b])`.
    pub fn pair(&self, tape: &mut Tape, store: &ParamStore, a: &PairHalves, b: &PairHalves) -> Result<NodeId> {
        let h = tape.add(a.as_first, b.as_second)?;
        match &self.rest {
            None => Ok(h),
            Some(rest) => {
                let mut h = h;
                for layer in &rest.layers {
                    h = tape.relu(h);
                    h = layer.forward(tape, store, h)?;
                }
                Ok(h)
            }
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.first_a.params();
        p.extend(self.first_b.params());
        if let Some(rest) = &self.rest {
            p.extend(rest.params());
        }
        p
    }
}

/// Standard LSTM cell; gates are packed `[i; f; o; u]` in one `4h` projection.
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub input: Linear,
    pub hidden: Linear,
    pub hidden_dim: usize,
}

impl LstmCell {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, hidden_dim: usize) -> Result<Self> {
        Ok(LstmCell {
            input: Linear::new(store, &format!("{name}.wz"), in_dim, 4 * hidden_dim, true)?,
            hidden: Linear::new(store, &format!("{name}.uh"), hidden_dim, 4 * hidden_dim, false)?,
            hidden_dim,
        })
    }

    /// Returns `(h, c)`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        z: NodeId,
        h_prev: NodeId,
        c_prev: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let hd = self.hidden_dim;
        if tape.data(c_prev).len() != hd {
            return Err(Error::dim("lstm_cell", tape.shape(c_prev), &[hd]));
        }
        let a = self.input.forward(tape, store, z)?;
        let b = self.hidden.forward(tape, store, h_prev)?;
        let pre = tape.add(a, b)?;
        let gate = |tape: &mut Tape, k: usize| tape.slice(pre, k * hd, hd);
        let i = gate(tape, 0)?;
        let i = tape.sigmoid(i);
        let f = gate(tape, 1)?;
        let f = tape.sigmoid(f);
        let o = gate(tape, 2)?;
        let o = tape.sigmoid(o);
        let u = gate(tape, 3)?;
        let u = tape.tanh(u);
        let iu = tape.mul(i, u)?;
        let fc = tape.mul(f, c_prev)?;
        let c = tape.add(iu, fc)?;
        let tc = tape.tanh(c);
        let h = tape.mul(o, tc)?;
        Ok((h, c))
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.input.params();
        p.extend(self.hidden.params());
        p
    }
}

/// GRU cell with gates packed `[r; z; n]`:
/// `n = tanh(W_n x + b_n + r * (U_n h + c_n))`, `h' = (1 - z) * n + z * h`.
#[derive(Clone, Debug)]
pub struct GruCell {
    pub input: Linear,
    pub hidden: Linear,
    pub hidden_dim: usize,
}

impl GruCell {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, hidden_dim: usize) -> Result<Self> {
        Ok(GruCell {
            input: Linear::new(store, &format!("{name}.wx"), in_dim, 3 * hidden_dim, true)?,
            hidden: Linear::new(store, &format!("{name}.uh"), hidden_dim, 3 * hidden_dim, true)?,
            hidden_dim,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: NodeId, h_prev: NodeId) -> Result<NodeId> {
        let hd = self.hidden_dim;
        let a = self.input.forward(tape, store, x)?;
        let b = self.hidden.forward(tape, store, h_prev)?;
        let ar = tape.slice(a, 0, hd)?;
        let br = tape.slice(b, 0, hd)?;
        let r = tape.add(ar, br)?;
        let r = tape.sigmoid(r);
        let az = tape.slice(a, hd, hd)?;
        let bz = tape.slice(b, hd, hd)?;
        let zg = tape.add(az, bz)?;
        let zg = tape.sigmoid(zg);
        let an = tape.slice(a, 2 * hd, hd)?;
        let bn = tape.slice(b, 2 * hd, hd)?;
        let rbn = tape.mul(r, bn)?;
        let n = tape.add(an, rbn)?;
        let n = tape.tanh(n);
        let keep = tape.one_minus(zg);
        let new_part = tape.mul(keep, n)?;
        let old_part = tape.mul(zg, h_prev)?;
        tape.add(new_part, old_part)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.input.params();
        p.extend(self.hidden.params());
        p
    }
}

/// `-log softmax(logits)[target]`.
pub fn cross_entropy(tape: &mut Tape, logits: NodeId, target: usize) -> Result<NodeId> {
    let ls = tape.log_softmax(logits);
    let picked = tape.index(ls, target)?;
    Ok(tape.neg(picked))
}

/// `-sum_a t_a log softmax(logits)_a` for a constant target vector.
pub fn soft_cross_entropy(tape: &mut Tape, logits: NodeId, targets: &[f64]) -> Result<NodeId> {
    if tape.data(logits).len() != targets.len() {
        return Err(Error::dim("soft_cross_entropy", tape.shape(logits), &[targets.len()]));
    }
    let ls = tape.log_softmax(logits);
    let t = tape.constant_vec(targets.to_vec());
    let d = tape.dot(ls, t)?;
    Ok(tape.neg(d))
}

/// Binary cross-entropy on a scalar logit: `softplus(a) - y a`.
pub fn bce_with_logit(tape: &mut Tape, logit: NodeId, label: bool) -> Result<NodeId> {
    let sp = tape.softplus(logit);
    if label {
        tape.sub(sp, logit)
    } else {
        Ok(sp)
    }
}
