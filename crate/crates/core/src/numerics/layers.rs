//! Parameterised building blocks shared by every model.

use rand::Rng;

use super::graph::{Graph, NodeId};
use super::params::{ParamId, ParamStore};
use super::Tensor;
use crate::{Error, Result};

/// Half-width of the uniform initialisation range for weights.
pub const INIT_RANGE: f64 = 0.1;

fn weight<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: String,
    shape: &[usize],
    rng: &mut R,
) -> Result<ParamId> {
    store.add(name, Tensor::uniform(shape, -INIT_RANGE, INIT_RANGE, rng))
}

/// `y = x W + b` with `W` stored as `input x output`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = weight(store, format!("{name}.weight"), &[input, output], rng)?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros(&[output]))?)
        } else {
            None
        };
        Ok(Linear {
            weight,
            bias,
            input,
            output,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: NodeId) -> Result<NodeId> {
        let w = g.param(self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        vocab: usize,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let table = weight(store, format!("{name}.table"), &[vocab, dim], rng)?;
        Ok(Embedding { table, vocab, dim })
    }

    pub fn forward(&self, g: &mut Graph<'_>, ids: &[u32]) -> Result<NodeId> {
        let t = g.param(self.table);
        g.embed(t, ids)
    }
}

/// Standard LSTM cell: sigmoid input/forget/output gates, tanh candidate.
/// Gate blocks are ordered input, forget, candidate, output; the forget-gate
/// bias starts at 1.
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub hidden: usize,
}

/// Result of running an LSTM over a whole sequence.
pub struct LstmRun {
    /// Hidden output per time step, in time order regardless of direction.
    pub outputs: Vec<NodeId>,
    pub h: NodeId,
    pub c: NodeId,
}

impl LstmCell {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w_input = weight(store, format!("{name}.w_input"), &[input, 4 * hidden], rng)?;
        let w_hidden = weight(store, format!("{name}.w_hidden"), &[hidden, 4 * hidden], rng)?;
        let mut b = vec![0.0; 4 * hidden];
        b[hidden..2 * hidden].iter_mut().for_each(|v| *v = 1.0);
        let bias = store.add(format!("{name}.bias"), Tensor::vector(b)?)?;
        Ok(LstmCell {
            w_input,
            w_hidden,
            bias,
            input,
            hidden,
        })
    }

    /// Input contribution to the gates for every row of `xs` at once.
    pub fn project_inputs(&self, g: &mut Graph<'_>, xs: NodeId) -> Result<NodeId> {
        let w = g.param(self.w_input);
        let b = g.param(self.bias);
        let y = g.matmul(xs, w)?;
        g.add_bias(y, b)
    }

    /// One step given the already projected input for this step.
    pub fn step_projected(
        &self,
        g: &mut Graph<'_>,
        x_proj: NodeId,
        h: NodeId,
        c: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let wh = g.param(self.w_hidden);
        let hh = g.matmul(h, wh)?;
        let gates = g.add(x_proj, hh)?;
        let hc = g.lstm_cell(gates, c)?;
        let h2 = g.slice_cols(hc, 0, self.hidden)?;
        let c2 = g.slice_cols(hc, self.hidden, self.hidden)?;
        Ok((h2, c2))
    }

    pub fn step(
        &self,
        g: &mut Graph<'_>,
        x: NodeId,
        h: NodeId,
        c: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let xp = self.project_inputs(g, x)?;
        self.step_projected(g, xp, h, c)
    }

    /// Runs over `steps` time steps. `xs` is time-major (`steps*batch x input`).
    /// With `reverse` the recurrence starts at the last step.
    pub fn run(
        &self,
        g: &mut Graph<'_>,
        xs: NodeId,
        batch: usize,
        h0: NodeId,
        c0: NodeId,
        reverse: bool,
    ) -> Result<LstmRun> {
        let rows = g.value(xs).rows();
        if batch == 0 || rows % batch != 0 {
            return Err(Error::shape("lstm_run", format!("{rows} rows, batch {batch}")));
        }
        let steps = rows / batch;
        let proj = self.project_inputs(g, xs)?;
        let (mut h, mut c) = (h0, c0);
        let mut outputs = vec![h0; steps];
        let order: Vec<usize> = if reverse {
            (0..steps).rev().collect()
        } else {
            (0..steps).collect()
        };
        for t in order {
            let xp = if steps == 1 {
                proj
            } else {
                g.slice_rows(proj, t * batch, batch)?
            };
            let (h2, c2) = self.step_projected(g, xp, h, c)?;
            h = h2;
            c = c2;
            outputs[t] = h;
        }
        Ok(LstmRun { outputs, h, c })
    }

    /// Plain-value single step: `(h, c, x) -> (h', c')`.
    pub fn step_values(
        &self,
        store: &ParamStore,
        h: &[f64],
        c: &[f64],
        x: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        if h.len() != self.hidden || c.len() != self.hidden || x.len() != self.input {
            return Err(Error::shape(
                "lstm_step",
                format!(
                    "h {} c {} x {} for input {} hidden {}",
                    h.len(),
                    c.len(),
                    x.len(),
                    self.input,
                    self.hidden
                ),
            ));
        }
        let mut g = Graph::new(store, false);
        let hn = g.input(Tensor::matrix(1, self.hidden, h.to_vec())?)?;
        let cn = g.input(Tensor::matrix(1, self.hidden, c.to_vec())?)?;
        let xn = g.input(Tensor::matrix(1, self.input, x.to_vec())?)?;
        let (h2, c2) = self.step(&mut g, xn, hn, cn)?;
        Ok((g.value(h2).data().to_vec(), g.value(c2).data().to_vec()))
    }
}

/// Zero `batch x dim` constant.
pub fn zeros(g: &mut Graph<'_>, batch: usize, dim: usize) -> Result<NodeId> {
    g.input(Tensor::zeros(&[batch, dim]))
}
