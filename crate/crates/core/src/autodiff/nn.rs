//! Parameterised layers built from graph ops.

use super::array::Array;
use super::graph::{Graph, Var};
use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Affine map `x W + b` with `W: in x out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, input: usize, output: usize) -> Self {
        Self {
            name: name.into(),
            input,
            output,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.w", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.b", self.name)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
        let k = 1.0 / (self.input.max(1) as f64).sqrt();
        store.insert(
            self.weight_name(),
            Array::uniform(&[self.input, self.output], k, rng),
        )?;
        store.insert(self.bias_name(), Array::uniform(&[self.output], k, rng))
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, &self.weight_name())?;
        let b = g.param(store, &self.bias_name())?;
        let xw = g.matmul(x, w)?;
        g.add(xw, b)
    }
}

/// LSTM cell with input, forget and output gates and a tanh candidate.
///
/// One fused weight `[x, h] -> [i, f, g, o]` of shape `(input + hidden) x 4 hidden`.
#[derive(Clone, Debug)]
pub struct Lstm {
    pub name: String,
    pub input: usize,
    pub hidden: usize,
}

impl Lstm {
    pub fn new(name: impl Into<String>, input: usize, hidden: usize) -> Self {
        Self {
            name: name.into(),
            input,
            hidden,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.w", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.b", self.name)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
        let h = self.hidden;
        let k = 1.0 / (h.max(1) as f64).sqrt();
        store.insert(
            self.weight_name(),
            Array::uniform(&[self.input + h, 4 * h], k, rng),
        )?;
        let mut b = Array::zeros(&[4 * h]);
        // forget gate starts open
        for v in &mut b.data_mut()[h..2 * h] {
            *v = 1.0;
        }
        store.insert(self.bias_name(), b)
    }

    pub fn zero_state(&self, g: &mut Graph, rows: usize) -> (Var, Var) {
        let h = g.constant(Array::zeros(&[rows, self.hidden]));
        let c = g.constant(Array::zeros(&[rows, self.hidden]));
        (h, c)
    }

    /// One step: returns `(h_t, c_t)`.
    pub fn step(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        h_prev: Var,
        c_prev: Var,
    ) -> Result<(Var, Var)> {
        let hd = self.hidden;
        let (xv, hv, cv) = (g.value(x), g.value(h_prev), g.value(c_prev));
        if xv.cols() != self.input
            || hv.cols() != hd
            || cv.cols() != hd
            || xv.rows() != hv.rows()
            || hv.rows() != cv.rows()
        {
            return Err(Error::Shape {
                op: "lstm_step",
                lhs: xv.shape().to_vec(),
                rhs: hv.shape().to_vec(),
            });
        }
        let w = g.param(store, &self.weight_name())?;
        let b = g.param(store, &self.bias_name())?;
        let xh = g.concat(&[x, h_prev])?;
        let z = g.matmul(xh, w)?;
        let z = g.add(z, b)?;
        let i = g.slice(z, 0, hd)?;
        let f = g.slice(z, hd, 2 * hd)?;
        let cand = g.slice(z, 2 * hd, 3 * hd)?;
        let o = g.slice(z, 3 * hd, 4 * hd)?;
        let i = g.sigmoid(i);
        let f = g.sigmoid(f);
        let cand = g.tanh(cand);
        let o = g.sigmoid(o);
        let keep = g.mul(f, c_prev)?;
        let write = g.mul(i, cand)?;
        let c = g.add(keep, write)?;
        let tc = g.tanh(c);
        let h = g.mul(o, tc)?;
        Ok((h, c))
    }
}
