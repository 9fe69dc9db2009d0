//! Dense layers and a SiLU multi-layer perceptron with hand-written reverse
//! mode.
//!
//! Every row of a batch is computed independently with a fixed summation
//! order, so evaluating a row inside any batch gives bit-identical results to
//! evaluating it alone.

use serde::{Deserialize, Serialize};

use crate::rng::Stream;

/// Dot product with four independent accumulators (fixed order).
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `y += a * x`
#[inline]
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Affine map with a row-major `out x in` weight matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    /// Uniform in `±1/sqrt(in_dim)` for weights and biases.
    pub fn fan_in(in_dim: usize, out_dim: usize, rng: &mut Stream) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let mut draw = || (2.0 * rng.uniform() - 1.0) * bound;
        Self {
            in_dim,
            out_dim,
            weight: (0..in_dim * out_dim).map(|_| draw()).collect(),
            bias: (0..out_dim).map(|_| draw()).collect(),
        }
    }

    #[inline]
    pub fn row(&self, o: usize) -> &[f64] {
        &self.weight[o * self.in_dim..(o + 1) * self.in_dim]
    }

    pub fn forward_row(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.in_dim);
        for (o, y) in out.iter_mut().enumerate() {
            *y = self.bias[o] + dot(self.row(o), x);
        }
    }

    /// Accumulate parameter gradients for one row and optionally write the
    /// input gradient (overwrite semantics).
    pub fn backward_row(&self, x: &[f64], dy: &[f64], grad: &mut Linear, dx: Option<&mut [f64]>) {
        for (o, &d) in dy.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            grad.bias[o] += d;
            axpy(d, x, &mut grad.weight[o * self.in_dim..(o + 1) * self.in_dim]);
        }
        if let Some(dx) = dx {
            dx.fill(0.0);
            for (o, &d) in dy.iter().enumerate() {
                if d != 0.0 {
                    axpy(d, self.row(o), dx);
                }
            }
        }
    }
}

/// SiLU MLP: every layer but the last is followed by SiLU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

/// Activations recorded by [`Mlp::forward_batch`] for the backward pass.
#[derive(Debug, Clone, Default)]
pub struct MlpTape {
    pub batch: usize,
    /// Input of layer `k`, row-major `batch x in_k`.
    pub inputs: Vec<Vec<f64>>,
    /// Pre-activation of hidden layer `k`, row-major `batch x out_k`.
    pub pre: Vec<Vec<f64>>,
}

impl Mlp {
    /// Layer sizes `dims[0] -> dims[1] -> ... -> dims[n]`; fan-in init for
    /// hidden layers, zeros for the output layer when `zero_output`.
    pub fn new(dims: &[usize], zero_output: bool, rng: &mut Stream) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least input and output sizes");
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|k| {
                if k == n - 1 && zero_output {
                    Linear::zeros(dims[k], dims[k + 1])
                } else {
                    Linear::fan_in(dims[k], dims[k + 1], rng)
                }
            })
            .collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.iter().map(|l| Linear::zeros(l.in_dim, l.out_dim)).collect(),
        }
    }

    fn max_width(&self) -> usize {
        self.layers.iter().map(|l| l.out_dim.max(l.in_dim)).max().unwrap()
    }

    /// One row. `extra` is added to the first layer's pre-activation.
    pub fn forward_row(&self, x: &[f64], extra: Option<&[f64]>, out: &mut [f64]) {
        let w = self.max_width();
        let mut cur = x.to_vec();
        let mut next = vec![0.0; w];
        let n = self.layers.len();
        for (k, layer) in self.layers.iter().enumerate() {
            let y = &mut next[..layer.out_dim];
            layer.forward_row(&cur, y);
            if k == 0 {
                if let Some(e) = extra {
                    for (yi, ei) in y.iter_mut().zip(e) {
                        *yi += ei;
                    }
                }
            }
            if k + 1 < n {
                for v in y.iter_mut() {
                    *v = silu(*v);
                }
                cur.clear();
                cur.extend_from_slice(y);
            } else {
                out.copy_from_slice(y);
            }
        }
    }

    /// Batched forward; rows of `x` are `in_dim` wide. Records activations in
    /// `tape` when given.
    pub fn forward_batch(
        &self,
        x: &[f64],
        extra: Option<&[f64]>,
        out: &mut [f64],
        mut tape: Option<&mut MlpTape>,
    ) {
        let din = self.input_dim();
        let dout = self.output_dim();
        let batch = x.len() / din;
        debug_assert_eq!(out.len(), batch * dout);
        let n = self.layers.len();
        if let Some(t) = tape.as_deref_mut() {
            t.batch = batch;
            t.inputs = self.layers.iter().map(|l| Vec::with_capacity(batch * l.in_dim)).collect();
            t.pre = self.layers[..n - 1]
                .iter()
                .map(|l| Vec::with_capacity(batch * l.out_dim))
                .collect();
        }
        let h1 = self.layers[0].out_dim;
        let w = self.max_width();
        let mut cur = Vec::with_capacity(w);
        let mut y = vec![0.0; w];
        for r in 0..batch {
            cur.clear();
            cur.extend_from_slice(&x[r * din..(r + 1) * din]);
            for (k, layer) in self.layers.iter().enumerate() {
                if let Some(t) = tape.as_deref_mut() {
                    t.inputs[k].extend_from_slice(&cur);
                }
                let yk = &mut y[..layer.out_dim];
                layer.forward_row(&cur, yk);
                if k == 0 {
                    if let Some(e) = extra {
                        for (yi, ei) in yk.iter_mut().zip(&e[r * h1..(r + 1) * h1]) {
                            *yi += ei;
                        }
                    }
                }
                if k + 1 < n {
                    if let Some(t) = tape.as_deref_mut() {
                        t.pre[k].extend_from_slice(yk);
                    }
                    cur.clear();
                    cur.extend(yk.iter().map(|&v| silu(v)));
                } else {
                    out[r * dout..(r + 1) * dout].copy_from_slice(yk);
                }
            }
        }
    }

    /// Reverse pass over a recorded batch.
    ///
    /// `d_out` is the loss gradient w.r.t. the outputs. Parameter gradients
    /// are accumulated into `grads`. When requested, the gradient w.r.t. the
    /// input rows and w.r.t. the first-layer `extra` term are written.
    pub fn backward_batch(
        &self,
        tape: &MlpTape,
        d_out: &[f64],
        grads: &mut Mlp,
        mut d_input: Option<&mut [f64]>,
        mut d_extra: Option<&mut [f64]>,
    ) {
        let n = self.layers.len();
        let dout = self.output_dim();
        let din = self.input_dim();
        let h1 = self.layers[0].out_dim;
        let w = self.max_width();
        let mut delta = vec![0.0; w];
        let mut d_a = vec![0.0; w];
        for r in 0..tape.batch {
            let d_row = &d_out[r * dout..(r + 1) * dout];
            if d_row.iter().all(|&v| v == 0.0) && d_input.is_none() && d_extra.is_none() {
                continue;
            }
            delta[..dout].copy_from_slice(d_row);
            for k in (0..n).rev() {
                let layer = &self.layers[k];
                let a = &tape.inputs[k][r * layer.in_dim..(r + 1) * layer.in_dim];
                if k == 0 {
                    if let Some(de) = d_extra.as_deref_mut() {
                        de[r * h1..(r + 1) * h1].copy_from_slice(&delta[..h1]);
                    }
                }
                let need_dx = k > 0 || d_input.is_some();
                let (dl, rest) = (&delta[..layer.out_dim], &mut d_a[..layer.in_dim]);
                layer.backward_row(a, dl, &mut grads.layers[k], need_dx.then_some(rest));
                if k > 0 {
                    let z = &tape.pre[k - 1][r * layer.in_dim..(r + 1) * layer.in_dim];
                    for i in 0..layer.in_dim {
                        delta[i] = d_a[i] * silu_grad(z[i]);
                    }
                } else if let Some(di) = d_input.as_deref_mut() {
                    di[r * din..(r + 1) * din].copy_from_slice(&d_a[..din]);
                }
            }
        }
    }
}
