//! The time-conditioned Gaussian backbone and the missingness head.

use serde::{Deserialize, Serialize};

use super::mlp::{silu, silu_grad, Linear, Mlp, MlpTape};
use super::Params;
use crate::error::{Error, Result};
use crate::rng::Stream;

pub const LOG_SIGMA_MIN: f64 = -7.0;
pub const LOG_SIGMA_MAX: f64 = 2.0;
pub const LOGIT_CLAMP: f64 = 15.0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Encoded data dimension `L`.
    pub dim: usize,
    pub hidden: Vec<usize>,
    /// Width of the sinusoidal time features.
    pub time_dim: usize,
}

impl BackboneConfig {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            hidden: vec![512, 1024, 512],
            time_dim: 512,
        }
    }
}

/// Sinusoidal features of a normalized step `t` in [0, 1].
pub fn time_features(t: f64, time_dim: usize) -> Vec<f64> {
    let half = time_dim / 2;
    let mut out = vec![0.0; time_dim];
    for k in 0..half {
        let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
        let a = 1000.0 * t * freq;
        out[k] = a.sin();
        out[half + k] = a.cos();
    }
    out
}

/// `[x * mask ; mask] -> hidden (SiLU) -> (mu, raw log sigma)`, with a
/// SiLU-activated affine time embedding added to the first pre-activation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub mlp: Mlp,
    pub time_proj: Linear,
}

/// One Gaussian per encoded dimension, row-major `batch x L`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GaussianOutput {
    pub mu: Vec<f64>,
    pub log_sigma: Vec<f64>,
}

/// Everything [`Backbone::backward_batch`] needs from a forward pass.
#[derive(Debug, Clone, Default)]
pub struct BackboneTape {
    mlp: MlpTape,
    masks: Vec<f64>,
    raw_log_sigma: Vec<f64>,
    /// Distinct time values in the batch with their features and projection
    /// pre-activation.
    times: Vec<(u64, Vec<f64>, Vec<f64>)>,
    row_time: Vec<usize>,
}

impl Backbone {
    pub fn new(config: BackboneConfig, rng: &mut Stream) -> Self {
        let l = config.dim;
        let mut dims = vec![2 * l];
        dims.extend(&config.hidden);
        dims.push(2 * l);
        let mlp = Mlp::new(&dims, true, rng);
        let time_proj = Linear::fan_in(config.time_dim, config.hidden[0], rng);
        Self {
            config,
            mlp,
            time_proj,
        }
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            mlp: self.mlp.zeros_like(),
            time_proj: Linear::zeros(self.time_proj.in_dim, self.time_proj.out_dim),
        }
    }

    fn time_embedding(&self, t: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let phi = time_features(t, self.config.time_dim);
        let mut pre = vec![0.0; self.time_proj.out_dim];
        self.time_proj.forward_row(&phi, &mut pre);
        let emb = pre.iter().map(|&v| silu(v)).collect();
        (phi, pre, emb)
    }

    fn check_row(&self, x: &[f64], mask: &[f64], t: f64) -> Result<()> {
        let l = self.dim();
        if x.len() != l {
            return Err(Error::Dimension { expected: l, got: x.len() });
        }
        if mask.len() != l {
            return Err(Error::Dimension { expected: l, got: mask.len() });
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::invalid(format!("time {t} outside [0, 1]")));
        }
        for (j, (&v, &m)) in x.iter().zip(mask).enumerate() {
            if m != 0.0 && !v.is_finite() {
                return Err(Error::NonFinite(format!("input element {j} = {v}")));
            }
        }
        Ok(())
    }

    /// Single-row evaluation with input validation.
    pub fn forward(&self, x: &[f64], context: &[f64], t: f64) -> Result<GaussianOutput> {
        self.check_row(x, context, t)?;
        Ok(self.forward_batch(x, context, &[t], None))
    }

    /// Batched evaluation. `x` and `mask` are row-major `batch x L`; values
    /// of `x` where `mask` is zero are ignored.
    pub fn forward_batch(
        &self,
        x: &[f64],
        mask: &[f64],
        t: &[f64],
        mut tape: Option<&mut BackboneTape>,
    ) -> GaussianOutput {
        let l = self.dim();
        let batch = t.len();
        debug_assert_eq!(x.len(), batch * l);
        let h1 = self.time_proj.out_dim;

        let mut times: Vec<(u64, Vec<f64>, Vec<f64>)> = Vec::new();
        let mut embs: Vec<Vec<f64>> = Vec::new();
        let mut row_time = Vec::with_capacity(batch);
        for &tv in t {
            let bits = tv.to_bits();
            let idx = match times.iter().position(|(b, _, _)| *b == bits) {
                Some(i) => i,
                None => {
                    let (phi, pre, emb) = self.time_embedding(tv);
                    times.push((bits, phi, pre));
                    embs.push(emb);
                    times.len() - 1
                }
            };
            row_time.push(idx);
        }
        let mut extra = vec![0.0; batch * h1];
        for (r, &ti) in row_time.iter().enumerate() {
            extra[r * h1..(r + 1) * h1].copy_from_slice(&embs[ti]);
        }

        let mut input = vec![0.0; batch * 2 * l];
        for r in 0..batch {
            let dst = &mut input[r * 2 * l..(r + 1) * 2 * l];
            for j in 0..l {
                let m = mask[r * l + j];
                dst[j] = if m != 0.0 { x[r * l + j] * m } else { 0.0 };
                dst[l + j] = m;
            }
        }
        let mut out = vec![0.0; batch * 2 * l];
        self.mlp.forward_batch(
            &input,
            Some(&extra),
            &mut out,
            tape.as_deref_mut().map(|t| &mut t.mlp),
        );
        let mut mu = Vec::with_capacity(batch * l);
        let mut log_sigma = Vec::with_capacity(batch * l);
        let mut raw = Vec::new();
        for r in 0..batch {
            let o = &out[r * 2 * l..(r + 1) * 2 * l];
            mu.extend_from_slice(&o[..l]);
            log_sigma.extend(o[l..].iter().map(|&v| v.clamp(LOG_SIGMA_MIN, LOG_SIGMA_MAX)));
            if tape.is_some() {
                raw.extend_from_slice(&o[l..]);
            }
        }
        if let Some(tp) = tape {
            tp.masks = mask.to_vec();
            tp.raw_log_sigma = raw;
            tp.times = times;
            tp.row_time = row_time;
        }
        GaussianOutput { mu, log_sigma }
    }

    /// Reverse pass. Accumulates into `grads`; optionally writes the gradient
    /// w.r.t. `x` (zero where the mask is zero).
    pub fn backward_batch(
        &self,
        tape: &BackboneTape,
        d_mu: &[f64],
        d_log_sigma: &[f64],
        grads: &mut Backbone,
        d_x: Option<&mut [f64]>,
    ) {
        let l = self.dim();
        let batch = tape.row_time.len();
        let h1 = self.time_proj.out_dim;
        let mut d_out = vec![0.0; batch * 2 * l];
        for r in 0..batch {
            let dst = &mut d_out[r * 2 * l..(r + 1) * 2 * l];
            dst[..l].copy_from_slice(&d_mu[r * l..(r + 1) * l]);
            for j in 0..l {
                let raw = tape.raw_log_sigma[r * l + j];
                if raw > LOG_SIGMA_MIN && raw < LOG_SIGMA_MAX {
                    dst[l + j] = d_log_sigma[r * l + j];
                }
            }
        }
        let mut d_extra = vec![0.0; batch * h1];
        let mut d_in = d_x.as_ref().map(|_| vec![0.0; batch * 2 * l]);
        self.mlp.backward_batch(
            &tape.mlp,
            &d_out,
            &mut grads.mlp,
            d_in.as_deref_mut(),
            Some(&mut d_extra),
        );
        if let (Some(dx), Some(d_in)) = (d_x, d_in) {
            for r in 0..batch {
                for j in 0..l {
                    let m = tape.masks[r * l + j];
                    dx[r * l + j] = if m != 0.0 { d_in[r * 2 * l + j] * m } else { 0.0 };
                }
            }
        }
        for (ti, (_, phi, pre)) in tape.times.iter().enumerate() {
            let mut d_emb = vec![0.0; h1];
            for (r, _) in tape.row_time.iter().enumerate().filter(|(_, &x)| x == ti) {
                for (d, s) in d_emb.iter_mut().zip(&d_extra[r * h1..(r + 1) * h1]) {
                    *d += s;
                }
            }
            let d_pre: Vec<f64> = d_emb.iter().zip(pre).map(|(d, z)| d * silu_grad(*z)).collect();
            self.time_proj.backward_row(phi, &d_pre, &mut grads.time_proj, None);
        }
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

impl Params for Backbone {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = Vec::new();
        for layer in &self.mlp.layers {
            v.push(&layer.weight);
            v.push(&layer.bias);
        }
        v.push(&self.time_proj.weight);
        v.push(&self.time_proj.bias);
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = Vec::new();
        for layer in &mut self.mlp.layers {
            v.push(&mut layer.weight);
            v.push(&mut layer.bias);
        }
        v.push(&mut self.time_proj.weight);
        v.push(&mut self.time_proj.bias);
        v
    }

    fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut v = Vec::new();
        for (k, layer) in self.mlp.layers.iter().enumerate() {
            v.push((format!("backbone.layer{k}.weight"), vec![layer.out_dim, layer.in_dim]));
            v.push((format!("backbone.layer{k}.bias"), vec![layer.out_dim]));
        }
        let tp = &self.time_proj;
        v.push(("backbone.time_proj.weight".into(), vec![tp.out_dim, tp.in_dim]));
        v.push(("backbone.time_proj.bias".into(), vec![tp.out_dim]));
        v
    }
}

/// Maps a completed vector to per-element observation logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissingnessHead {
    pub mlp: Mlp,
}

impl MissingnessHead {
    pub fn new(dim: usize, hidden: &[usize], rng: &mut Stream) -> Self {
        let mut dims = vec![dim];
        dims.extend(hidden);
        dims.push(dim);
        Self {
            mlp: Mlp::new(&dims, false, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.mlp.input_dim()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            mlp: self.mlp.zeros_like(),
        }
    }

    /// Clamped logits, row-major `batch x L`.
    pub fn logits_batch(&self, x: &[f64], tape: Option<&mut MlpTape>) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        self.mlp.forward_batch(x, None, &mut out, tape);
        for v in &mut out {
            *v = v.clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
        }
        out
    }

    /// Observation probabilities for one completed row.
    pub fn probabilities(&self, x: &[f64]) -> Vec<f64> {
        self.logits_batch(x, None).into_iter().map(super::mlp::sigmoid).collect()
    }

    /// Reverse pass from logit gradients. Logits outside the clamp receive
    /// no gradient.
    pub fn backward_batch(
        &self,
        tape: &MlpTape,
        raw_logits: &[f64],
        d_logits: &[f64],
        grads: &mut MissingnessHead,
        d_x: Option<&mut [f64]>,
    ) {
        let d: Vec<f64> = raw_logits
            .iter()
            .zip(d_logits)
            .map(|(&z, &g)| if z > -LOGIT_CLAMP && z < LOGIT_CLAMP { g } else { 0.0 })
            .collect();
        self.mlp.backward_batch(tape, &d, &mut grads.mlp, d_x, None);
    }

    /// Unclamped logits (for gradient gating).
    pub fn raw_logits_batch(&self, x: &[f64], tape: Option<&mut MlpTape>) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        self.mlp.forward_batch(x, None, &mut out, tape);
        out
    }
}

impl Params for MissingnessHead {
    fn tensors(&self) -> Vec<&[f64]> {
        self.mlp
            .layers
            .iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.mlp
            .layers
            .iter_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut v = Vec::new();
        for (k, layer) in self.mlp.layers.iter().enumerate() {
            v.push((format!("missingness.layer{k}.weight"), vec![layer.out_dim, layer.in_dim]));
            v.push((format!("missingness.layer{k}.bias"), vec![layer.out_dim]));
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(dim: usize) -> Backbone {
        let cfg = BackboneConfig {
            dim,
            hidden: vec![8, 8],
            time_dim: 16,
        };
        Backbone::new(cfg, &mut Stream::new(1))
    }

    #[test]
    fn zero_head_predicts_standard_normal() {
        let b = small(4);
        let o = b.forward(&[0.5, -1.0, 2.0, 0.0], &[1.0, 0.0, 1.0, 0.0], 0.5).unwrap();
        assert!(o.mu.iter().all(|&v| v == 0.0));
        assert!(o.log_sigma.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn magic_widths() {
        let b = Backbone::new(BackboneConfig::new(11), &mut Stream::new(0));
        assert_eq!(b.mlp.input_dim(), 22);
        assert_eq!(b.mlp.output_dim(), 22);
    }

    #[test]
    fn masked_inputs_are_ignored() {
        let mut b = small(3);
        let mut rng = Stream::new(5);
        for t in b.tensors_mut() {
            for v in t.iter_mut() {
                *v = 0.3 * rng.normal();
            }
        }
        let m = [1.0, 0.0, 1.0];
        let a = b.forward(&[0.1, 5.0, -0.2], &m, 0.3).unwrap();
        let c = b.forward(&[0.1, -9.0, -0.2], &m, 0.3).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn rejects_bad_inputs() {
        let b = small(3);
        assert!(matches!(b.forward(&[0.0; 2], &[1.0; 3], 0.1), Err(Error::Dimension { .. })));
        assert!(matches!(
            b.forward(&[f64::NAN, 0.0, 0.0], &[1.0; 3], 0.1),
            Err(Error::NonFinite(_))
        ));
        assert!(b.forward(&[f64::NAN, 0.0, 0.0], &[0.0, 1.0, 1.0], 0.1).is_ok());
        assert!(b.forward(&[0.0; 3], &[1.0; 3], 1.5).is_err());
    }

    #[test]
    fn log_sigma_is_clamped() {
        let mut b = small(2);
        let last = b.mlp.layers.last_mut().unwrap();
        last.bias = vec![0.0, 0.0, 50.0, -50.0];
        let o = b.forward(&[0.0; 2], &[0.0; 2], 0.0).unwrap();
        assert_eq!(o.log_sigma, vec![LOG_SIGMA_MAX, LOG_SIGMA_MIN]);
    }

    #[test]
    fn time_features_shape() {
        let f = time_features(0.0, 8);
        assert_eq!(f, vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
    }
}
