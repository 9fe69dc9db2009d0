//! The missingness-aware order-agnostic model: context sampling, the
//! single-step observed-data estimator, the Bernoulli mask likelihood and the
//! minibatch trainer.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{Mechanism, ObservationMask};
use crate::nn::checkpoint::Checkpoint;
use crate::nn::mlp::{sigmoid, MlpTape};
use crate::nn::optim::{clip_grad_norm, AdamW, AdamWConfig, Ema, PlateauScheduler};
use crate::nn::{Backbone, BackboneConfig, BackboneTape, MissingnessHead, Params};
use crate::rng::Stream;
use crate::sampling::{self, bernoulli_log_likelihood, Trajectory, Weighting};
use crate::tabular::{FeatureSchema, Standardization};

/// `0.5 * ln(2 pi)`
pub const HALF_LOG_TWO_PI: f64 = 0.918_938_533_204_672_7;

/// Rows per parallel work unit. Gradients are reduced in chunk order, so
/// results do not depend on the thread count.
const CHUNK: usize = 16;

const INIT: u64 = 0x696e_6974;
const STEP: u64 = 0x7374_6570;
const CONTEXT: u64 = 1;
const COMPLETION: u64 = 2;
const EPOCH: u64 = 0x6570_6f63;

/// The sampled autoregressive step `i` for one row and the split of its
/// observed elements into context and targets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OrderContext {
    /// `i`, in `1..=L_o`.
    pub step: usize,
    /// `i - 1` observed elements, ascending.
    pub context: Vec<usize>,
    /// The remaining observed elements, ascending.
    pub targets: Vec<usize>,
}

impl OrderContext {
    pub fn n_observed(&self) -> usize {
        self.context.len() + self.targets.len()
    }

    /// `L_o / (L_o - i + 1)`
    pub fn prefactor(&self) -> f64 {
        self.n_observed() as f64 / self.targets.len() as f64
    }

    pub fn context_mask(&self, dim: usize) -> Vec<f64> {
        let mut m = vec![0.0; dim];
        for &j in &self.context {
            m[j] = 1.0;
        }
        m
    }
}

/// Draws `i ~ Unif{1..L_o}` and a uniform `(i-1)`-subset of the observed
/// elements.
pub fn sample_order_context(mask: &ObservationMask, rng: &mut Stream) -> Result<OrderContext> {
    let observed = &mask.observed_elements;
    let l_o = observed.len();
    if l_o == 0 {
        return Err(Error::invalid("row has no observed elements"));
    }
    let step = 1 + rng.below(l_o);
    let mut context = rng.choose_subset(observed, step - 1);
    context.sort_unstable();
    let targets = observed.iter().copied().filter(|j| context.binary_search(j).is_err()).collect();
    Ok(OrderContext { step, context, targets })
}

pub fn gaussian_log_density(x: f64, mu: f64, log_sigma: f64) -> f64 {
    let z = (x - mu) * (-log_sigma).exp();
    -HALF_LOG_TWO_PI - log_sigma - 0.5 * z * z
}

fn context_input(row: &[f64], ctx: &OrderContext) -> Vec<f64> {
    let mut x = vec![0.0; row.len()];
    for &j in &ctx.context {
        x[j] = row[j];
    }
    x
}

/// The single-step estimate `L_o/(L_o-i+1) * sum_{j in targets} log N(x_j)`
/// (to be maximized).
pub fn observed_loss(backbone: &Backbone, row: &[f64], ctx: &OrderContext) -> Result<f64> {
    let l = backbone.dim();
    let out = backbone.forward(&context_input(row, ctx), &ctx.context_mask(l), ctx.step as f64 / l as f64)?;
    let total: f64 = ctx
        .targets
        .iter()
        .map(|&j| gaussian_log_density(row[j], out.mu[j], out.log_sigma[j]))
        .sum();
    let value = ctx.prefactor() * total;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("observed loss {value}")));
    }
    Ok(value)
}

/// Batched observed-data estimator. Adds `scale * d(sum_b loss_b)/d(theta)`
/// to `grads` and returns the per-row losses.
pub fn observed_term_backward(
    backbone: &Backbone,
    rows: &[&[f64]],
    contexts: &[OrderContext],
    scale: f64,
    grads: &mut Backbone,
) -> Vec<f64> {
    let l = backbone.dim();
    let b = rows.len();
    let mut x = Vec::with_capacity(b * l);
    let mut m = Vec::with_capacity(b * l);
    let mut t = Vec::with_capacity(b);
    for (row, ctx) in rows.iter().zip(contexts) {
        x.extend(context_input(row, ctx));
        m.extend(ctx.context_mask(l));
        t.push(ctx.step as f64 / l as f64);
    }
    let mut tape = BackboneTape::default();
    let out = backbone.forward_batch(&x, &m, &t, Some(&mut tape));
    let mut d_mu = vec![0.0; b * l];
    let mut d_ls = vec![0.0; b * l];
    let mut losses = Vec::with_capacity(b);
    for (r, (row, ctx)) in rows.iter().zip(contexts).enumerate() {
        let pref = ctx.prefactor();
        let mut total = 0.0;
        for &j in &ctx.targets {
            let idx = r * l + j;
            let (mu, ls) = (out.mu[idx], out.log_sigma[idx]);
            total += gaussian_log_density(row[j], mu, ls);
            let inv_var = (-2.0 * ls).exp();
            let diff = row[j] - mu;
            d_mu[idx] = scale * pref * diff * inv_var;
            d_ls[idx] = scale * pref * (diff * diff * inv_var - 1.0);
        }
        losses.push(pref * total);
    }
    backbone.backward_batch(&tape, &d_mu, &d_ls, grads, None);
    losses
}

/// `sum_j log Bern(1{j observed}; pi_j(x_hat))` (to be maximized).
pub fn missingness_loss(head: &MissingnessHead, completed: &[f64], mask: &ObservationMask) -> f64 {
    sampling::mask_log_likelihood(head, completed, mask)
}

/// Linear ramp `min(1, t / W)`; `W = 0` means no annealing.
pub fn anneal_factor(step: u64, warmup: u64) -> f64 {
    if warmup == 0 {
        1.0
    } else {
        (step as f64 / warmup as f64).min(1.0)
    }
}

struct StepRecord {
    tape: BackboneTape,
    blocks: Vec<Vec<usize>>,
    eps: Vec<Vec<f64>>,
    log_sigma: Vec<f64>,
}

/// Samples `k` completions of one row with the live parameters and records
/// what the pathwise gradient needs.
fn differentiable_completions(
    backbone: &Backbone,
    row: &[f64],
    mask: &ObservationMask,
    sample: usize,
    k: usize,
    max_steps: Option<usize>,
    seed: u64,
) -> Result<(Vec<Trajectory>, Vec<StepRecord>)> {
    let l = backbone.dim();
    let mut trajs = (0..k)
        .map(|r| Trajectory::new(sample, r, row, mask, max_steps, seed))
        .collect::<Result<Vec<_>>>()?;
    let mut records = Vec::new();
    while !trajs[0].is_done() {
        let mut x = Vec::with_capacity(k * l);
        let mut m = Vec::with_capacity(k * l);
        let mut t = Vec::with_capacity(k);
        for tr in &trajs {
            x.extend_from_slice(&tr.values);
            m.extend(tr.context_mask());
            t.push(tr.time());
        }
        let mut tape = BackboneTape::default();
        let out = backbone.forward_batch(&x, &m, &t, Some(&mut tape));
        let mut blocks = Vec::with_capacity(k);
        let mut eps = Vec::with_capacity(k);
        for (r, tr) in trajs.iter_mut().enumerate() {
            let block = tr.next_block();
            let e = tr.advance(&block, &out.mu[r * l..(r + 1) * l], &out.log_sigma[r * l..(r + 1) * l]);
            blocks.push(block);
            eps.push(e);
        }
        records.push(StepRecord { tape, blocks, eps, log_sigma: out.log_sigma });
    }
    Ok((trajs, records))
}

/// Mask likelihood averaged over `k` sampled completions of one row.
///
/// Adds `scale * d/d(phi)` to `g_phi` and, when `alpha > 0`, the pathwise
/// `alpha * scale * d/d(theta)` through the sampled trajectories to
/// `g_theta`. Returns the value.
#[allow(clippy::too_many_arguments)]
pub fn missingness_term_backward(
    backbone: &Backbone,
    head: &MissingnessHead,
    row: &[f64],
    mask: &ObservationMask,
    sample: usize,
    k: usize,
    max_steps: Option<usize>,
    seed: u64,
    alpha: f64,
    scale: f64,
    g_theta: &mut Backbone,
    g_phi: &mut MissingnessHead,
) -> Result<f64> {
    if k == 0 {
        return Err(Error::invalid("need at least one completion"));
    }
    let l = backbone.dim();
    let (trajs, records) = differentiable_completions(backbone, row, mask, sample, k, max_steps, seed)?;
    let xhat: Vec<f64> = trajs.iter().flat_map(|t| t.values.iter().copied()).collect();
    let mut tape = MlpTape::default();
    let raw = head.raw_logits_batch(&xhat, Some(&mut tape));
    let w = scale / k as f64;
    let mut value = 0.0;
    let mut d_logits = vec![0.0; k * l];
    for r in 0..k {
        let z: Vec<f64> = raw[r * l..(r + 1) * l]
            .iter()
            .map(|v| v.clamp(-crate::nn::backbone::LOGIT_CLAMP, crate::nn::backbone::LOGIT_CLAMP))
            .collect();
        value += bernoulli_log_likelihood(&z, &mask.binary);
        for j in 0..l {
            let target = if mask.binary[j] { 1.0 } else { 0.0 };
            d_logits[r * l + j] = w * (target - sigmoid(z[j]));
        }
    }
    value /= k as f64;
    if alpha == 0.0 {
        head.backward_batch(&tape, &raw, &d_logits, g_phi, None);
        return Ok(value);
    }
    let mut dx = vec![0.0; k * l];
    head.backward_batch(&tape, &raw, &d_logits, g_phi, Some(&mut dx));
    for v in &mut dx {
        *v *= alpha;
    }
    let mut d_in = vec![0.0; k * l];
    for rec in records.iter().rev() {
        let mut d_mu = vec![0.0; k * l];
        let mut d_ls = vec![0.0; k * l];
        for r in 0..k {
            for (&j, &e) in rec.blocks[r].iter().zip(&rec.eps[r]) {
                let idx = r * l + j;
                let g = dx[idx];
                d_mu[idx] = g;
                d_ls[idx] = g * rec.log_sigma[idx].exp() * e;
            }
        }
        backbone.backward_batch(&rec.tape, &d_mu, &d_ls, g_theta, Some(&mut d_in));
        for (a, b) in dx.iter_mut().zip(&d_in) {
            *a += b;
        }
    }
    Ok(value)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub dim: usize,
    pub hidden: Vec<usize>,
    pub time_dim: usize,
    pub head_hidden: Vec<usize>,
    pub mode: Mechanism,
}

impl ModelConfig {
    pub fn new(dim: usize, mode: Mechanism) -> Self {
        Self {
            dim,
            hidden: vec![512, 1024, 512],
            time_dim: 512,
            head_hidden: vec![256, 256],
            mode,
        }
    }

    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            dim: self.dim,
            hidden: self.hidden.clone(),
            time_dim: self.time_dim,
        }
    }
}

/// A backbone plus, for models trained under the MNAR objective, the
/// missingness head.
#[derive(Debug, Clone, PartialEq)]
pub struct MoArm {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub head: Option<MissingnessHead>,
}

impl MoArm {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        if config.dim == 0 || config.hidden.is_empty() || config.time_dim < 2 {
            return Err(Error::invalid("model needs L >= 1, a hidden layer and time_dim >= 2"));
        }
        let root = Stream::new(seed).fork(&[INIT]);
        let backbone = Backbone::new(config.backbone(), &mut root.fork(&[0]));
        let head = match config.mode {
            Mechanism::Mcar => None,
            Mechanism::Mnar => Some(MissingnessHead::new(config.dim, &config.head_hidden, &mut root.fork(&[1]))),
        };
        Ok(Self { config, backbone, head })
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    /// Importance weighting when a head is present, otherwise uniform.
    pub fn weighting(&self) -> Weighting<'_> {
        match &self.head {
            Some(h) => Weighting::Importance(h),
            None => Weighting::Uniform,
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            backbone: self.backbone.zeros_like(),
            head: self.head.as_ref().map(|h| h.zeros_like()),
        }
    }

    fn push_to(&self, ck: &mut Checkpoint, prefix: &str) {
        ck.push_params(prefix, &self.backbone);
        if let Some(h) = &self.head {
            ck.push_params(prefix, h);
        }
    }

    fn load_from(&mut self, ck: &Checkpoint, prefix: &str) -> Result<()> {
        ck.load_params(prefix, &mut self.backbone)?;
        if let Some(h) = &mut self.head {
            ck.load_params(prefix, h)?;
        }
        Ok(())
    }
}

/// Prefix of the averaged parameters inside a checkpoint.
pub const EMA_PREFIX: &str = "ema.";

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedModel {
    /// Averaged parameters, used for inference.
    pub model: MoArm,
    /// Raw training parameters.
    pub live: MoArm,
    pub schema_hash: String,
    /// Caller-supplied metadata stored with the model.
    pub extra: serde_json::Value,
}

pub fn save_checkpoint(
    path: &Path,
    ema: &MoArm,
    live: &MoArm,
    schema_hash: &str,
    extra: serde_json::Value,
) -> Result<()> {
    let meta = serde_json::json!({ "model": ema.config, "extra": extra });
    let mut ck = Checkpoint::new(schema_hash, meta);
    live.push_to(&mut ck, "");
    ema.push_to(&mut ck, EMA_PREFIX);
    ck.save(path)
}

/// Reads a checkpoint. When `expected_hash` is given, a schema mismatch is
/// an error.
pub fn load_checkpoint(path: &Path, expected_hash: Option<&str>) -> Result<LoadedModel> {
    let ck = Checkpoint::load(path)?;
    if let Some(h) = expected_hash {
        if h != ck.schema_hash {
            return Err(Error::Checkpoint(format!(
                "schema hash mismatch: checkpoint was trained on {}, data schema is {h}",
                ck.schema_hash
            )));
        }
    }
    let config: ModelConfig = serde_json::from_value(
        ck.metadata
            .get("model")
            .cloned()
            .ok_or_else(|| Error::Checkpoint("metadata lacks model config".into()))?,
    )
    .map_err(|e| Error::Checkpoint(format!("bad model config: {e}")))?;
    let template = MoArm::new(config, 0)?.zeros_like();
    let mut live = template.clone();
    live.load_from(&ck, "")?;
    let mut model = template;
    if ck.has_prefix(EMA_PREFIX) {
        model.load_from(&ck, EMA_PREFIX)?;
    } else {
        model = live.clone();
    }
    Ok(LoadedModel {
        model,
        live,
        schema_hash: ck.schema_hash,
        extra: ck.metadata.get("extra").cloned().unwrap_or(serde_json::Value::Null),
    })
}

/// A trained model with the schema and standardization of its training data.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub model: MoArm,
    pub schema: FeatureSchema,
    pub standardization: Standardization,
    pub schema_hash: String,
}

impl ModelBundle {
    pub fn save(path: &Path, ema: &MoArm, live: &MoArm, schema: &FeatureSchema, stz: &Standardization) -> Result<()> {
        let extra = serde_json::json!({ "schema": schema, "standardization": stz });
        save_checkpoint(path, ema, live, &schema.hash(), extra)
    }

    pub fn load(path: &Path, expected_hash: Option<&str>) -> Result<Self> {
        let loaded = load_checkpoint(path, expected_hash)?;
        let field = |name: &str| {
            loaded
                .extra
                .get(name)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint carries no {name}")))
        };
        let schema: FeatureSchema =
            serde_json::from_value(field("schema")?).map_err(|e| Error::Checkpoint(format!("bad schema: {e}")))?;
        let standardization: Standardization = serde_json::from_value(field("standardization")?)
            .map_err(|e| Error::Checkpoint(format!("bad standardization: {e}")))?;
        if schema.hash() != loaded.schema_hash || schema.dim != loaded.model.dim() {
            return Err(Error::Checkpoint("stored schema does not match the checkpoint".into()));
        }
        Ok(Self {
            model: loaded.model,
            schema,
            standardization,
            schema_hash: loaded.schema_hash,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlateauConfig {
    pub factor: f64,
    pub patience: usize,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        Self { factor: 0.9, patience: 200 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    /// Completions per row for the mask likelihood.
    pub k_train: usize,
    /// Steps of the missingness-gradient ramp; `None` means 30% of all steps.
    pub anneal_warmup: Option<u64>,
    pub mode: Mechanism,
    pub seed: u64,
    pub ema_decay: f64,
    pub clip_norm: f64,
    pub plateau: Option<PlateauConfig>,
    /// Cap on unmasking steps for training-time completions.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 256,
            optimizer: AdamWConfig::default(),
            k_train: 10,
            anneal_warmup: None,
            mode: Mechanism::Mcar,
            seed: 0,
            ema_decay: 0.999,
            clip_norm: 1.0,
            plateau: Some(PlateauConfig::default()),
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if self.mode == Mechanism::Mnar && self.k_train == 0 {
            return Err(Error::invalid("MNAR training needs k_train >= 1"));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::invalid(format!("ema decay {} outside [0, 1)", self.ema_decay)));
        }
        if !(self.optimizer.lr > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        Ok(())
    }

    pub fn warmup_steps(&self, total_steps: u64) -> u64 {
        self.anneal_warmup
            .unwrap_or_else(|| (0.3 * total_steps as f64).round() as u64)
    }
}

/// Minibatch objective terms (all to be maximized).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub obs_term: f64,
    pub miss_term: f64,
    pub total: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub obs_term: f64,
    pub miss_term: f64,
    pub alpha: f64,
    pub lr: f64,
    pub wall_seconds: f64,
}

struct ChunkOut {
    g_theta: Backbone,
    g_phi: Option<MissingnessHead>,
    obs: f64,
    miss: f64,
}

pub struct Trainer {
    pub config: TrainConfig,
    /// Live parameters.
    pub model: MoArm,
    ema_backbone: Ema<Backbone>,
    ema_head: Option<Ema<MissingnessHead>>,
    opt_theta: AdamW,
    opt_phi: Option<AdamW>,
    scheduler: Option<PlateauScheduler>,
    pub lr: f64,
    pub step: u64,
    pub warmup: u64,
    root: Stream,
}

impl Trainer {
    pub fn new(model_config: ModelConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if model_config.mode != config.mode {
            return Err(Error::invalid("model and training modes differ"));
        }
        let model = MoArm::new(model_config, config.seed)?;
        let opt_theta = AdamW::new(&model.backbone, config.optimizer);
        let opt_phi = model.head.as_ref().map(|h| AdamW::new(h, config.optimizer));
        let ema_backbone = Ema::new(&model.backbone, config.ema_decay);
        let ema_head = model.head.as_ref().map(|h| Ema::new(h, config.ema_decay));
        let lr = config.optimizer.lr;
        let scheduler = config.plateau.map(|p| PlateauScheduler::new(lr, p.factor, p.patience));
        Ok(Self {
            warmup: config.anneal_warmup.unwrap_or(0),
            root: Stream::new(config.seed).fork(&[STEP]),
            config,
            model,
            ema_backbone,
            ema_head,
            opt_theta,
            opt_phi,
            scheduler,
            lr,
            step: 0,
        })
    }

    /// The averaged parameters as a model.
    pub fn ema_model(&self) -> MoArm {
        MoArm {
            config: self.model.config.clone(),
            backbone: self.ema_backbone.shadow.clone(),
            head: self.ema_head.as_ref().map(|e| e.shadow.clone()),
        }
    }

    pub fn alpha(&self) -> f64 {
        anneal_factor(self.step, self.warmup)
    }

    fn chunk(&self, rows: &[&[f64]], masks: &[&ObservationMask], ids: &[usize], alpha: f64, scale: f64) -> Result<ChunkOut> {
        let stream = self.root.fork(&[self.step]);
        let model = &self.model;
        let mut g_theta = model.backbone.zeros_like();
        let mut contexts = Vec::with_capacity(ids.len());
        let mut sel_rows = Vec::with_capacity(ids.len());
        for &b in ids {
            contexts.push(sample_order_context(masks[b], &mut stream.fork(&[CONTEXT, b as u64]))?);
            sel_rows.push(rows[b]);
        }
        let losses = observed_term_backward(&model.backbone, &sel_rows, &contexts, scale, &mut g_theta);
        let obs: f64 = losses.iter().sum();
        let mut miss = 0.0;
        let mut g_phi = None;
        if let (Mechanism::Mnar, Some(head)) = (self.config.mode, &model.head) {
            let mut gp = head.zeros_like();
            let seed = stream.fork(&[COMPLETION]).key();
            for &b in ids {
                miss += missingness_term_backward(
                    &model.backbone,
                    head,
                    rows[b],
                    masks[b],
                    b,
                    self.config.k_train,
                    self.config.max_steps,
                    seed,
                    alpha,
                    scale,
                    &mut g_theta,
                    &mut gp,
                )?;
            }
            g_phi = Some(gp);
        }
        Ok(ChunkOut { g_theta, g_phi, obs, miss })
    }

    /// One ascent step on a minibatch. Rows without observed elements are
    /// skipped.
    pub fn train_step(&mut self, rows: &[&[f64]], masks: &[&ObservationMask]) -> Result<LossBreakdown> {
        use rayon::prelude::*;
        if rows.len() != masks.len() {
            return Err(Error::Dimension { expected: rows.len(), got: masks.len() });
        }
        let l = self.model.dim();
        for (r, m) in rows.iter().zip(masks) {
            if r.len() != l || m.dim() != l {
                return Err(Error::Dimension { expected: l, got: r.len().min(m.dim()) });
            }
        }
        let ids: Vec<usize> = (0..rows.len()).filter(|&b| masks[b].n_observed() > 0).collect();
        if ids.is_empty() {
            return Err(Error::Training("minibatch has no observed elements".into()));
        }
        let alpha = self.alpha();
        let scale = 1.0 / ids.len() as f64;
        let parts: Vec<Result<ChunkOut>> = ids
            .par_chunks(CHUNK)
            .map(|c| self.chunk(rows, masks, c, alpha, scale))
            .collect();
        let mut g_theta = self.model.backbone.zeros_like();
        let mut g_phi = self.model.head.as_ref().map(|h| h.zeros_like());
        let (mut obs, mut miss) = (0.0, 0.0);
        for p in parts {
            let p = p?;
            add_into(&mut g_theta, &p.g_theta);
            if let (Some(a), Some(b)) = (g_phi.as_mut(), p.g_phi.as_ref()) {
                add_into(a, b);
            }
            obs += p.obs;
            miss += p.miss;
        }
        obs *= scale;
        miss *= scale;
        let finite = obs.is_finite()
            && miss.is_finite()
            && g_theta.all_finite()
            && g_phi.as_ref().is_none_or(|g| g.all_finite());
        if !finite {
            return Err(Error::Training(format!(
                "non-finite loss or gradient at step {}: obs_term={obs}, miss_term={miss}, |g_theta|^2={}, alpha={alpha}",
                self.step,
                g_theta.sum_of_squares()
            )));
        }
        // the optimizer descends, so flip the ascent direction
        g_theta.scale(-1.0);
        clip_grad_norm(&mut g_theta, self.config.clip_norm);
        self.opt_theta.step(&mut self.model.backbone, &g_theta, self.lr);
        self.ema_backbone.update(&self.model.backbone);
        if let (Some(mut g), Some(head), Some(opt)) = (g_phi, self.model.head.as_mut(), self.opt_phi.as_mut()) {
            g.scale(-1.0);
            clip_grad_norm(&mut g, self.config.clip_norm);
            opt.step(head, &g, self.lr);
            if let Some(e) = self.ema_head.as_mut() {
                e.update(head);
            }
        }
        self.step += 1;
        Ok(LossBreakdown {
            obs_term: obs,
            miss_term: miss,
            total: obs + miss,
            alpha,
        })
    }

    /// Full training loop over `rows` with per-epoch reshuffling.
    pub fn fit(
        &mut self,
        rows: &[&[f64]],
        masks: &[ObservationMask],
        mut on_epoch: impl FnMut(&EpochRecord),
    ) -> Result<Vec<EpochRecord>> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::Training("no training rows".into()));
        }
        let bs = self.config.batch_size.min(n);
        let per_epoch = n.div_ceil(bs);
        let total = (per_epoch * self.config.epochs) as u64;
        self.warmup = self.config.warmup_steps(total);
        let shuffle = Stream::new(self.config.seed).fork(&[EPOCH]);
        let all: Vec<usize> = (0..n).collect();
        let mut log = Vec::with_capacity(self.config.epochs);
        let start = Instant::now();
        for epoch in 0..self.config.epochs {
            let order = shuffle.fork(&[epoch as u64]).choose_subset(&all, n);
            let (mut obs, mut miss, mut used) = (0.0, 0.0, 0usize);
            let mut alpha = self.alpha();
            for batch in order.chunks(bs) {
                let br: Vec<&[f64]> = batch.iter().map(|&i| rows[i]).collect();
                let bm: Vec<&ObservationMask> = batch.iter().map(|&i| &masks[i]).collect();
                if bm.iter().all(|m| m.n_observed() == 0) {
                    continue;
                }
                let lb = self.train_step(&br, &bm)?;
                obs += lb.obs_term;
                miss += lb.miss_term;
                alpha = lb.alpha;
                used += 1;
            }
            let denom = used.max(1) as f64;
            let (obs, miss) = (obs / denom, miss / denom);
            if let Some(s) = self.scheduler.as_mut() {
                self.lr = s.observe(-(obs + miss));
            }
            let rec = EpochRecord {
                epoch,
                obs_term: obs,
                miss_term: miss,
                alpha,
                lr: self.lr,
                wall_seconds: start.elapsed().as_secs_f64(),
            };
            on_epoch(&rec);
            log.push(rec);
        }
        Ok(log)
    }
}

fn add_into<P: Params>(dst: &mut P, src: &P) {
    let s = src.tensors();
    for (k, d) in dst.tensors_mut().into_iter().enumerate() {
        for (a, b) in d.iter_mut().zip(s[k]) {
            *a += b;
        }
    }
}
