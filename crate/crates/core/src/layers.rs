//! Parameterised building blocks: affine maps, layer normalisation, the
//! position-wise feed-forward sublayer, and LSTM recurrences.
//!
//! Every layer only records [`ParamId`]s; values live in a [`ParamStore`] and
//! are pulled into the graph on each forward pass.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{xavier_uniform, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `y = x W^T + b` with `W: [out x in]`, `b: [out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), xavier_uniform(rng, out_dim, in_dim))?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]))?;
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let wt = g.transpose(w)?;
        let xw = g.matmul(x, wt).map_err(|e| match e {
            Error::Shape { lhs, .. } => Error::Shape {
                op: "linear",
                lhs,
                rhs: vec![self.out_dim, self.in_dim],
            },
            other => other,
        })?;
        g.add_bias(xw, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim]))?,
            eps: LAYER_NORM_EPS,
            dim,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta, self.eps)
    }
}

/// Linear, rectifier, linear. The outer width equals the model width so the
/// sublayer can sit inside a residual connection.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        dim: usize,
        inner_dim: usize,
    ) -> Result<Self> {
        Ok(Self {
            inner: Linear::new(store, rng, &format!("{name}.inner"), dim, inner_dim)?,
            outer: Linear::new(store, rng, &format!("{name}.outer"), inner_dim, dim)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.inner.forward(g, store, x)?;
        let h = g.relu(h);
        self.outer.forward(g, store, h)
    }
}

/// One LSTM cell. Gate blocks are stacked along the first weight axis in the
/// order input, forget, cell candidate, output.
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub input_dim: usize,
    pub hidden: usize,
}

/// Recurrent state carried between steps.
#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl LstmCell {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        input_dim: usize,
        hidden: usize,
    ) -> Result<Self> {
        let w_ih = store.add(format!("{name}.w_ih"), xavier_uniform(rng, 4 * hidden, input_dim))?;
        let w_hh = store.add(format!("{name}.w_hh"), xavier_uniform(rng, 4 * hidden, hidden))?;
        let mut bias = Tensor::zeros(&[4 * hidden]);
        bias.data_mut()[hidden..2 * hidden].fill(1.0);
        let bias = store.add(format!("{name}.bias"), bias)?;
        Ok(Self {
            w_ih,
            w_hh,
            bias,
            input_dim,
            hidden,
        })
    }

    pub fn zero_state(&self, g: &mut Graph) -> LstmState {
        let h = g.input(Tensor::zeros(&[1, self.hidden]));
        let c = g.input(Tensor::zeros(&[1, self.hidden]));
        LstmState { h, c }
    }

    /// `x W_ih^T + b` for every row of `x` at once.
    fn project_inputs(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w_ih);
        let b = g.param(store, self.bias);
        let wt = g.transpose(w)?;
        let xw = g.matmul(x, wt)?;
        g.add_bias(xw, b)
    }

    /// Gate arithmetic given the projected input row `[1 x 4h]`.
    fn advance(&self, g: &mut Graph, projected: Var, w_hh_t: Var, prev: LstmState) -> Result<LstmState> {
        let h = self.hidden;
        let rec = g.matmul(prev.h, w_hh_t)?;
        let z = g.add(projected, rec)?;
        let zi = g.narrow(z, 1, 0, h)?;
        let zf = g.narrow(z, 1, h, 2 * h)?;
        let zg = g.narrow(z, 1, 2 * h, 3 * h)?;
        let zo = g.narrow(z, 1, 3 * h, 4 * h)?;
        let i = g.sigmoid(zi);
        let f = g.sigmoid(zf);
        let cand = g.tanh(zg);
        let o = g.sigmoid(zo);
        let keep = g.mul(f, prev.c)?;
        let write = g.mul(i, cand)?;
        let c = g.add(keep, write)?;
        let squashed = g.tanh(c);
        let h = g.mul(o, squashed)?;
        Ok(LstmState { h, c })
    }

    /// A single step: `x_t: [1 x in]`, state rows `[1 x hidden]`.
    pub fn step(&self, g: &mut Graph, store: &ParamStore, x_t: Var, prev: LstmState) -> Result<LstmState> {
        if g.shape(x_t) != [1, self.input_dim] {
            return Err(Error::shape("lstm_cell_step", g.shape(x_t), &[1, self.input_dim]));
        }
        let projected = self.project_inputs(g, store, x_t)?;
        let w = g.param(store, self.w_hh);
        let w_hh_t = g.transpose(w)?;
        self.advance(g, projected, w_hh_t, prev)
    }

    /// Runs over the rows of `x: [T x in]`, optionally back to front.
    ///
    /// Rows with `mask[t] == false` leave the state untouched and emit zeros.
    /// The output is `[T x hidden]` in the original time order.
    pub fn run(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        mask: &[bool],
        reverse: bool,
    ) -> Result<Var> {
        let (steps, width) = g.value(x).dims2()?;
        if width != self.input_dim {
            return Err(Error::shape("lstm", g.shape(x), &[steps, self.input_dim]));
        }
        check_mask(mask, steps)?;
        let projected = self.project_inputs(g, store, x)?;
        let w = g.param(store, self.w_hh);
        let w_hh_t = g.transpose(w)?;
        let zero = g.input(Tensor::zeros(&[1, self.hidden]));
        let mut state = LstmState { h: zero, c: zero };
        let mut rows = vec![zero; steps];
        let order: Box<dyn Iterator<Item = usize>> = if reverse {
            Box::new((0..steps).rev())
        } else {
            Box::new(0..steps)
        };
        for t in order {
            if !mask[t] {
                continue;
            }
            let p = g.row(projected, t)?;
            state = self.advance(g, p, w_hh_t, state)?;
            rows[t] = state.h;
        }
        g.concat(&rows, 0)
    }
}

pub(crate) fn check_mask(mask: &[bool], steps: usize) -> Result<()> {
    if steps == 0 {
        return Err(Error::Contract("empty sequence".into()));
    }
    if mask.len() != steps {
        return Err(Error::Contract(format!(
            "mask has {} entries for a sequence of {steps}",
            mask.len()
        )));
    }
    Ok(())
}

/// Forward and backward LSTMs whose outputs are concatenated per step.
#[derive(Clone, Debug)]
pub struct BiLstm {
    pub forward: LstmCell,
    pub backward: LstmCell,
}

impl BiLstm {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        input_dim: usize,
        hidden: usize,
    ) -> Result<Self> {
        Ok(Self {
            forward: LstmCell::new(store, rng, &format!("{name}.fwd"), input_dim, hidden)?,
            backward: LstmCell::new(store, rng, &format!("{name}.bwd"), input_dim, hidden)?,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.forward.hidden + self.backward.hidden
    }

    /// `[T x in] -> [T x 2h]`.
    pub fn run(&self, g: &mut Graph, store: &ParamStore, x: Var, mask: &[bool]) -> Result<Var> {
        let f = self.forward.run(g, store, x, mask, false)?;
        let b = self.backward.run(g, store, x, mask, true)?;
        g.concat(&[f, b], 1)
    }
}

/// Unidirectional LSTM layers applied one after another.
#[derive(Clone, Debug)]
pub struct StackedLstm {
    pub layers: Vec<LstmCell>,
}

impl StackedLstm {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        input_dim: usize,
        hidden: usize,
        depth: usize,
    ) -> Result<Self> {
        let layers = (0..depth)
            .map(|i| {
                let input = if i == 0 { input_dim } else { hidden };
                LstmCell::new(store, rng, &format!("{name}.{i}"), input, hidden)
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn run(&self, g: &mut Graph, store: &ParamStore, x: Var, mask: &[bool]) -> Result<Var> {
        self.layers
            .iter()
            .try_fold(x, |h, cell| cell.run(g, store, h, mask, false))
    }
}
