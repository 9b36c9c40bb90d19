//! Layers over a [`Tape`]. Each layer owns a parameter path prefix and its
//! dimensions; weights live in a [`ParamStore`].

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tape::{Tape, Var};
use super::TensorError;

/// `y = x W + b` with `W: input x output`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Linear {
    pub path: String,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(path: impl Into<String>, input: usize, output: usize) -> Self {
        Self { path: path.into(), input, output }
    }

    pub fn weight_path(&self) -> String {
        format!("{}.weight", self.path)
    }

    pub fn bias_path(&self) -> String {
        format!("{}.bias", self.path)
    }

    /// Uniform `±gain/sqrt(input)` weights, zero bias.
    pub fn init<R: Rng>(&self, store: &mut ParamStore, gain: f64, rng: &mut R) -> Result<(), TensorError> {
        let bound = gain / (self.input as f64).sqrt();
        store.insert_uniform(self.weight_path(), self.input, self.output, bound, rng)?;
        store.insert_zeros(self.bias_path(), 1, self.output)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var, TensorError> {
        let w = tape.param(store, &self.weight_path())?;
        let b = tape.param(store, &self.bias_path())?;
        let xw = tape.matmul(x, w)?;
        tape.add_row(xw, b)
    }
}

/// Scaled dot-product attention with `heads` heads over batched blocks.
///
/// Inputs stack `blocks` independent problems row-wise: queries are
/// `blocks * nq` rows and keys/values `blocks * nk` rows.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultiHeadAttention {
    pub path: String,
    pub dim: usize,
    pub heads: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
}

impl MultiHeadAttention {
    pub fn new(path: impl Into<String>, dim: usize, heads: usize) -> Result<Self, TensorError> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(TensorError::Shape { op: "attention_heads", left: (dim, heads), right: (0, 0) });
        }
        let path = path.into();
        Ok(Self {
            query: Linear::new(format!("{path}.query"), dim, dim),
            key: Linear::new(format!("{path}.key"), dim, dim),
            value: Linear::new(format!("{path}.value"), dim, dim),
            out: Linear::new(format!("{path}.out"), dim, dim),
            path,
            dim,
            heads,
        })
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) -> Result<(), TensorError> {
        for l in [&self.query, &self.key, &self.value, &self.out] {
            l.init(store, 1.0, rng)?;
        }
        Ok(())
    }

    /// `mask`, when given, is added to the `blocks * nq x nk` score matrix
    /// before the softmax (use a large negative value to exclude keys).
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        query: Var,
        key_value: Var,
        blocks: usize,
        mask: Option<&Array2<f64>>,
    ) -> Result<Var, TensorError> {
        let (qs, ks) = (tape.shape(query), tape.shape(key_value));
        if qs.1 != self.dim || ks.1 != self.dim {
            return Err(TensorError::Shape { op: "attention", left: qs, right: ks });
        }
        let q = self.query.forward(tape, store, query)?;
        let k = self.key.forward(tape, store, key_value)?;
        let v = self.value.forward(tape, store, key_value)?;
        let head_dim = self.dim / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * head_dim, head_dim)?;
            let kh = tape.slice_cols(k, h * head_dim, head_dim)?;
            let vh = tape.slice_cols(v, h * head_dim, head_dim)?;
            let raw = tape.block_matmul_bt(qh, kh, blocks)?;
            let mut scores = tape.scale(raw, scale);
            if let Some(m) = mask {
                scores = tape.add_const(scores, m)?;
            }
            let weights = tape.softmax(scores);
            outs.push(tape.block_matmul(weights, vh, blocks)?);
        }
        let joined = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs)? };
        self.out.forward(tape, store, joined)
    }
}

/// Graph convolution over fully connected groups of `group` consecutive
/// rows: every node receives `relu(W · mean(group) + b)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GcnLayer {
    pub linear: Linear,
}

impl GcnLayer {
    pub fn new(path: impl Into<String>, input: usize, output: usize) -> Self {
        Self { linear: Linear::new(path, input, output) }
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) -> Result<(), TensorError> {
        self.linear.init(store, 1.0, rng)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, nodes: Var, group: usize) -> Result<Var, TensorError> {
        let pooled = tape.group_mean_rows(nodes, group)?;
        let mixed = self.linear.forward(tape, store, pooled)?;
        let act = tape.relu(mixed);
        Ok(tape.repeat_rows(act, group))
    }
}

/// Gated recurrent cell: reset, update and candidate gates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GruCell {
    pub path: String,
    pub input: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new(path: impl Into<String>, input: usize, hidden: usize) -> Self {
        Self { path: path.into(), input, hidden }
    }

    fn p(&self, name: &str) -> String {
        format!("{}.{name}", self.path)
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) -> Result<(), TensorError> {
        let bound = 1.0 / (self.hidden as f64).sqrt();
        store.insert_uniform(self.p("input_weight"), self.input, 3 * self.hidden, bound, rng)?;
        store.insert_uniform(self.p("hidden_weight"), self.hidden, 3 * self.hidden, bound, rng)?;
        store.insert_zeros(self.p("input_bias"), 1, 3 * self.hidden)?;
        store.insert_zeros(self.p("hidden_bias"), 1, 3 * self.hidden)
    }

    /// `x: n x input`, `h: n x hidden` -> `n x hidden`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, h: Var) -> Result<Var, TensorError> {
        let (xs, hs) = (tape.shape(x), tape.shape(h));
        if xs.1 != self.input || hs.1 != self.hidden || xs.0 != hs.0 {
            return Err(TensorError::Shape { op: "gru", left: xs, right: hs });
        }
        let wi = tape.param(store, &self.p("input_weight"))?;
        let wh = tape.param(store, &self.p("hidden_weight"))?;
        let bi = tape.param(store, &self.p("input_bias"))?;
        let bh = tape.param(store, &self.p("hidden_bias"))?;
        let gx = tape.matmul(x, wi)?;
        let gx = tape.add_row(gx, bi)?;
        let gh = tape.matmul(h, wh)?;
        let gh = tape.add_row(gh, bh)?;
        let d = self.hidden;
        let (xr, xz, xn) = (tape.slice_cols(gx, 0, d)?, tape.slice_cols(gx, d, d)?, tape.slice_cols(gx, 2 * d, d)?);
        let (hr, hz, hn) = (tape.slice_cols(gh, 0, d)?, tape.slice_cols(gh, d, d)?, tape.slice_cols(gh, 2 * d, d)?);
        let r = tape.add(xr, hr)?;
        let r = tape.sigmoid(r);
        let z = tape.add(xz, hz)?;
        let z = tape.sigmoid(z);
        let gated = tape.mul(r, hn)?;
        let n = tape.add(xn, gated)?;
        let n = tape.tanh(n);
        let keep = tape.affine(z, -1.0, 1.0);
        let fresh = tape.mul(keep, n)?;
        let carried = tape.mul(z, h)?;
        tape.add(fresh, carried)
    }
}

/// Affine layers with relu between them (none after the last).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `sizes = [input, hidden.., output]`.
    pub fn new(path: &str, sizes: &[usize]) -> Self {
        let layers = sizes.windows(2).enumerate().map(|(i, w)| Linear::new(format!("{path}.{i}"), w[0], w[1])).collect();
        Self { layers }
    }

    pub fn input(&self) -> usize {
        self.layers.first().map_or(0, |l| l.input)
    }

    /// `last_gain` scales the initial weights of the output layer.
    pub fn init<R: Rng>(&self, store: &mut ParamStore, last_gain: f64, rng: &mut R) -> Result<(), TensorError> {
        let n = self.layers.len();
        for (i, l) in self.layers.iter().enumerate() {
            l.init(store, if i + 1 == n { last_gain } else { 1.0 }, rng)?;
        }
        Ok(())
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var, TensorError> {
        let mut h = x;
        let n = self.layers.len();
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(tape, store, h)?;
            if i + 1 < n {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }
}
