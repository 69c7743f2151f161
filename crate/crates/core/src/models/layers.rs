//! Dense stacks and the LSTM cell, stored as flat parameter lists so that a
//! model's tensors can be bound to a graph in one pass.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{AutodiffError, Graph, Tensor, Var};

pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    LeakyRelu,
}

/// Kaiming-uniform weights, `U(−√(6/fan_in), √(6/fan_in))`.
pub fn kaiming_uniform(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("shape matches data")
}

/// Binds tensors to `g`, as gradient leaves when `trainable`.
pub fn bind(g: &Graph, params: &[Tensor], trainable: bool) -> Result<Vec<Var>, AutodiffError> {
    params.iter().map(|p| if trainable { g.param(p) } else { g.constant(p.clone()) }).collect()
}

/// Fully connected stack with the activation between layers (none after
/// the last). Parameters are `[w0, b0, w1, b1, ...]`, `w` stored `[in×out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub params: Vec<Tensor>,
    pub act: Activation,
}

impl Mlp {
    pub fn new(dims: &[usize], act: Activation, rng: &mut ChaCha8Rng) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least one layer");
        let mut params = Vec::with_capacity(2 * (dims.len() - 1));
        for w in dims.windows(2) {
            params.push(kaiming_uniform(rng, w[0], w[1]));
            params.push(Tensor::zeros(&[w[1]]));
        }
        Self { params, act }
    }

    /// Sets the last layer's weights and bias to zero.
    pub fn zero_last(mut self) -> Self {
        let n = self.params.len();
        for p in &mut self.params[n - 2..] {
            p.data_mut().fill(0.0);
        }
        self
    }

    pub fn n_layers(&self) -> usize {
        self.params.len() / 2
    }

    pub fn in_dim(&self) -> usize {
        self.params[0].rows()
    }

    pub fn out_dim(&self) -> usize {
        self.params[self.params.len() - 1].numel()
    }

    pub fn forward(&self, g: &Graph, p: &[Var], x: Var) -> Result<Var, AutodiffError> {
        if p.len() != self.params.len() {
            return Err(AutodiffError::Shape(format!("{} bound tensors for {} parameters", p.len(), self.params.len())));
        }
        let mut h = x;
        for l in 0..self.n_layers() {
            h = g.add_bias(g.matmul(h, p[2 * l])?, p[2 * l + 1])?;
            if l + 1 < self.n_layers() {
                h = match self.act {
                    Activation::Tanh => g.tanh(h)?,
                    Activation::LeakyRelu => g.leaky_relu(h, LEAKY_SLOPE)?,
                };
            }
        }
        Ok(h)
    }

    /// Forward pass on plain values, without gradients.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor, AutodiffError> {
        let g = Graph::new();
        let p = bind(&g, &self.params, false)?;
        let xv = g.constant(x.clone())?;
        let out = self.forward(&g, &p, xv)?;
        Ok(g.value(out))
    }
}

/// Single-layer LSTM over a short sequence followed by a linear readout.
/// Parameters: `[w_x (in×4h), w_h (h×4h), b (4h), w_out (h×n), b_out (n)]`,
/// gate blocks ordered input, forget, cell, output.
#[derive(Clone, Debug, PartialEq)]
pub struct Lstm {
    pub params: Vec<Tensor>,
    pub hidden: usize,
}

impl Lstm {
    pub fn new(input: usize, hidden: usize, n_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let params = vec![
            kaiming_uniform(rng, input, 4 * hidden),
            kaiming_uniform(rng, hidden, 4 * hidden),
            Tensor::zeros(&[4 * hidden]),
            kaiming_uniform(rng, hidden, n_out),
            Tensor::zeros(&[n_out]),
        ];
        Self { params, hidden }
    }

    /// `steps` are `[b×input]` inputs in time order; returns `[b×n_out]`.
    pub fn forward(&self, g: &Graph, p: &[Var], steps: &[Var]) -> Result<Var, AutodiffError> {
        if p.len() != self.params.len() {
            return Err(AutodiffError::Shape(format!("{} bound tensors for LSTM", p.len())));
        }
        if steps.is_empty() {
            return Err(AutodiffError::Shape("empty input sequence".into()));
        }
        let hd = self.hidden;
        let mut state: Option<(Var, Var)> = None;
        for &x in steps {
            let mut pre = g.matmul(x, p[0])?;
            if let Some((h, _)) = state {
                pre = g.add(pre, g.matmul(h, p[1])?)?;
            }
            let pre = g.add_bias(pre, p[2])?;
            let i = g.sigmoid(g.slice_cols(pre, 0, hd)?)?;
            let f = g.sigmoid(g.slice_cols(pre, hd, 2 * hd)?)?;
            let c_new = g.tanh(g.slice_cols(pre, 2 * hd, 3 * hd)?)?;
            let o = g.sigmoid(g.slice_cols(pre, 3 * hd, 4 * hd)?)?;
            let mut c = g.mul(i, c_new)?;
            if let Some((_, c_prev)) = state {
                c = g.add(c, g.mul(f, c_prev)?)?;
            }
            let h = g.mul(o, g.tanh(c)?)?;
            state = Some((h, c));
        }
        let (h, _) = state.expect("at least one step");
        g.add_bias(g.matmul(h, p[3])?, p[4])
    }
}
