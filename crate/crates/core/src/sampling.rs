//! Blocked-unmasking trajectories, Monte-Carlo imputation and the
//! cardinality-bucketed batch engine.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{Mechanism, ObservationMask};
use crate::nn::mlp::sigmoid;
use crate::nn::{Backbone, MissingnessHead};
use crate::rng::Stream;

/// Default upper bound on the number of unmasking steps.
pub const DEFAULT_MAX_STEPS: usize = 64;

const TRAJECTORY: u64 = 0x7472_616a;
const BLOCK: u64 = 1;
const NOISE: u64 = 2;

/// Block sizes of an exponential unmasking schedule.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnmaskingSchedule {
    pub blocks: Vec<usize>,
}

impl UnmaskingSchedule {
    pub fn steps(&self) -> usize {
        self.blocks.len()
    }

    pub fn total(&self) -> usize {
        self.blocks.iter().sum()
    }

    /// Cumulative reveal counts `s_1..s_S`.
    pub fn cumulative(&self) -> Vec<usize> {
        self.blocks
            .iter()
            .scan(0, |acc, &k| {
                *acc += k;
                Some(*acc)
            })
            .collect()
    }
}

/// Reveal `m` elements in `s` steps with cumulative targets `round(m^(t/s))`,
/// forced strictly increasing and ending at `m`. `m = s = 0` gives the empty
/// schedule.
pub fn make_schedule(m: usize, s: usize) -> Result<UnmaskingSchedule> {
    if s > m {
        return Err(Error::invalid(format!("{s} steps for {m} elements")));
    }
    if s == 0 {
        if m == 0 {
            return Ok(UnmaskingSchedule { blocks: vec![] });
        }
        return Err(Error::invalid("schedule needs at least one step"));
    }
    let mut blocks = Vec::with_capacity(s);
    let mut prev = 0usize;
    for t in 1..=s {
        let target = if t == s {
            m
        } else {
            let raw = (m as f64).powf(t as f64 / s as f64).round() as usize;
            raw.max(prev + 1).min(m - (s - t))
        };
        blocks.push(target - prev);
        prev = target;
    }
    Ok(UnmaskingSchedule { blocks })
}

/// Number of steps used for `missing` elements under an optional cap.
pub fn default_steps(missing: usize, cap: Option<usize>) -> usize {
    missing.min(cap.unwrap_or(DEFAULT_MAX_STEPS).max(1))
}

/// One imputation chain for sample `n`, replica `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub sample: usize,
    pub replica: usize,
    /// Working values; final at revealed positions.
    pub values: Vec<f64>,
    pub revealed: Vec<bool>,
    pub n_revealed: usize,
    /// Conditional mean of each element at the step it was revealed (the
    /// input value for originally observed elements).
    pub reveal_means: Vec<f64>,
    pub reveal_order: Vec<usize>,
    pub schedule: UnmaskingSchedule,
    pub step: usize,
    stream: Stream,
}

impl Trajectory {
    pub fn new(
        sample: usize,
        replica: usize,
        row: &[f64],
        mask: &ObservationMask,
        max_steps: Option<usize>,
        seed: u64,
    ) -> Result<Self> {
        if row.len() != mask.dim() {
            return Err(Error::Dimension { expected: mask.dim(), got: row.len() });
        }
        let mut values = vec![0.0; row.len()];
        for (j, v) in values.iter_mut().enumerate() {
            if mask.binary[j] {
                if !row[j].is_finite() {
                    return Err(Error::NonFinite(format!("observed element {j} = {}", row[j])));
                }
                *v = row[j];
            }
        }
        let missing = mask.n_missing();
        let schedule = make_schedule(missing, default_steps(missing, max_steps))?;
        Ok(Self {
            sample,
            replica,
            reveal_means: values.clone(),
            values,
            revealed: mask.binary.clone(),
            n_revealed: mask.n_observed(),
            reveal_order: Vec::with_capacity(missing),
            schedule,
            step: 0,
            stream: Stream::new(seed).fork(&[TRAJECTORY, sample as u64, replica as u64]),
        })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.schedule.steps()
    }

    /// Normalized time for the next forward call.
    pub fn time(&self) -> f64 {
        ((self.n_revealed + 1) as f64 / self.dim() as f64).min(1.0)
    }

    pub fn context_mask(&self) -> Vec<f64> {
        self.revealed.iter().map(|&r| if r { 1.0 } else { 0.0 }).collect()
    }

    /// The block revealed at the current step, drawn uniformly from the
    /// unrevealed elements.
    pub fn next_block(&self) -> Vec<usize> {
        let pool: Vec<usize> = (0..self.dim()).filter(|&j| !self.revealed[j]).collect();
        let k = self.schedule.blocks[self.step];
        let mut block = self
            .stream
            .fork(&[BLOCK, self.n_revealed as u64])
            .choose_subset(&pool, k);
        block.sort_unstable();
        block
    }

    /// Standard-normal noise for element `j` revealed at the current count.
    pub fn noise(&self, j: usize) -> f64 {
        self.stream
            .fork(&[NOISE, self.n_revealed as u64, j as u64])
            .normal()
    }

    /// Samples the block from the given per-element Gaussians (full
    /// length-`L` rows) and advances one step. Returns the noise used for
    /// each block element.
    pub fn advance(&mut self, block: &[usize], mu: &[f64], log_sigma: &[f64]) -> Vec<f64> {
        let eps: Vec<f64> = block.iter().map(|&j| self.noise(j)).collect();
        for (&j, &e) in block.iter().zip(&eps) {
            self.values[j] = mu[j] + log_sigma[j].exp() * e;
            self.reveal_means[j] = mu[j];
            self.revealed[j] = true;
            self.reveal_order.push(j);
        }
        self.n_revealed += block.len();
        self.step += 1;
        eps
    }
}

/// What each completion contributes to the point estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    /// The element's conditional mean at the step it was revealed.
    RevealMeans,
    /// The sampled value itself.
    Samples,
}

/// How MC completions are combined into a point estimate.
#[derive(Debug, Clone, Copy)]
pub enum Weighting<'a> {
    Uniform,
    /// Self-normalized weights proportional to the missingness head's
    /// likelihood of the observed mask.
    Importance(&'a MissingnessHead),
}

impl Weighting<'_> {
    pub fn mechanism(&self) -> Mechanism {
        match self {
            Weighting::Uniform => Mechanism::Mcar,
            Weighting::Importance(_) => Mechanism::Mnar,
        }
    }

    /// Reveal-time means under uniform weights. Importance weights depend on
    /// the sampled values, so a weighted average has to use the samples.
    pub fn default_estimator(&self) -> Estimator {
        match self {
            Weighting::Uniform => Estimator::RevealMeans,
            Weighting::Importance(_) => Estimator::Samples,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImputationResult {
    /// Observed inputs with missing elements replaced by the weighted average
    /// of the estimator's per-replica values.
    pub point_estimate: Vec<f64>,
    /// `K` sampled completions.
    pub samples: Vec<Vec<f64>>,
    /// Per-replica reveal-time means (observed inputs at observed positions).
    pub reveal_means: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub mode: Mechanism,
    pub estimator: Estimator,
}

impl ImputationResult {
    /// Per-replica values that the point estimate averages.
    pub fn contributions(&self) -> &[Vec<f64>] {
        match self.estimator {
            Estimator::RevealMeans => &self.reveal_means,
            Estimator::Samples => &self.samples,
        }
    }

    /// Weighted standard deviation of the sampled completions per element.
    pub fn posterior_std(&self) -> Vec<f64> {
        let l = self.point_estimate.len();
        (0..l)
            .map(|j| {
                let m: f64 = self.samples.iter().zip(&self.weights).map(|(s, w)| w * s[j]).sum();
                let v: f64 = self
                    .samples
                    .iter()
                    .zip(&self.weights)
                    .map(|(s, w)| w * (s[j] - m) * (s[j] - m))
                    .sum();
                v.max(0.0).sqrt()
            })
            .collect()
    }
}

/// `log p(mask | x)` under the element-wise Bernoulli head.
pub fn mask_log_likelihood(head: &MissingnessHead, x: &[f64], mask: &ObservationMask) -> f64 {
    let logits = head.logits_batch(x, None);
    bernoulli_log_likelihood(&logits, &mask.binary)
}

/// `sum_j log Bern(m_j; sigmoid(z_j))` computed stably.
pub fn bernoulli_log_likelihood(logits: &[f64], observed: &[bool]) -> f64 {
    logits
        .iter()
        .zip(observed)
        .map(|(&z, &m)| if m { -softplus(-z) } else { -softplus(z) })
        .sum()
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Normalizes log-weights onto the simplex with max subtraction.
pub fn normalize_log_weights(log_w: &[f64]) -> Vec<f64> {
    let k = log_w.len();
    let max = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return vec![1.0 / k as f64; k];
    }
    let w: Vec<f64> = log_w.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|v| v / total).collect()
}

fn combine(
    row: &[f64],
    mask: &ObservationMask,
    trajectories: Vec<Trajectory>,
    weighting: Weighting<'_>,
    estimator: Option<Estimator>,
) -> ImputationResult {
    let estimator = estimator.unwrap_or(weighting.default_estimator());
    let k = trajectories.len();
    let weights = match weighting {
        Weighting::Uniform => vec![1.0 / k as f64; k],
        Weighting::Importance(head) => {
            let log_w: Vec<f64> = trajectories
                .iter()
                .map(|t| mask_log_likelihood(head, &t.values, mask))
                .collect();
            normalize_log_weights(&log_w)
        }
    };
    let mut point = row.to_vec();
    for j in mask.missing_elements() {
        point[j] = trajectories
            .iter()
            .zip(&weights)
            .map(|(t, w)| {
                w * match estimator {
                    Estimator::RevealMeans => t.reveal_means[j],
                    Estimator::Samples => t.values[j],
                }
            })
            .sum();
    }
    let mut samples = Vec::with_capacity(k);
    let mut reveal_means = Vec::with_capacity(k);
    for t in trajectories {
        let mut s = t.values;
        let mut m = t.reveal_means;
        for j in 0..row.len() {
            if mask.binary[j] {
                s[j] = row[j];
                m[j] = row[j];
            }
        }
        samples.push(s);
        reveal_means.push(m);
    }
    ImputationResult {
        point_estimate: point,
        samples,
        reveal_means,
        weights,
        mode: weighting.mechanism(),
        estimator,
    }
}

/// Runs one trajectory to completion with single-row forward calls.
pub fn sample_trajectory(backbone: &Backbone, mut traj: Trajectory) -> Trajectory {
    while !traj.is_done() {
        let block = traj.next_block();
        let out = backbone.forward_batch(&traj.values, &traj.context_mask(), &[traj.time()], None);
        traj.advance(&block, &out.mu, &out.log_sigma);
    }
    traj
}

/// Imputation settings shared by the sequential and bucketed paths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImputeOptions {
    pub samples: usize,
    pub max_steps: Option<usize>,
    pub seed: u64,
    /// `None` picks the weighting's default.
    pub estimator: Option<Estimator>,
}

impl Default for ImputeOptions {
    fn default() -> Self {
        Self {
            samples: 100,
            max_steps: None,
            seed: 0,
            estimator: None,
        }
    }
}

fn check_row(backbone: &Backbone, row: &[f64], mask: &ObservationMask) -> Result<()> {
    if row.len() != backbone.dim() {
        return Err(Error::Dimension { expected: backbone.dim(), got: row.len() });
    }
    if mask.dim() != backbone.dim() {
        return Err(Error::Dimension { expected: backbone.dim(), got: mask.dim() });
    }
    Ok(())
}

/// Sequential imputation of one sample (`sample` keys its streams).
pub fn impute(
    backbone: &Backbone,
    row: &[f64],
    mask: &ObservationMask,
    sample: usize,
    weighting: Weighting<'_>,
    opts: &ImputeOptions,
) -> Result<ImputationResult> {
    if opts.samples == 0 {
        return Err(Error::invalid("need at least one sample"));
    }
    check_row(backbone, row, mask)?;
    let mut trajectories = Vec::with_capacity(opts.samples);
    for k in 0..opts.samples {
        let t = Trajectory::new(sample, k, row, mask, opts.max_steps, opts.seed)?;
        trajectories.push(sample_trajectory(backbone, t));
    }
    Ok(combine(row, mask, trajectories, weighting, opts.estimator))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EngineStats {
    pub forward_calls: usize,
    pub rows_evaluated: usize,
}

/// Initial cardinality buckets: `|revealed| -> sample indices`.
pub fn initial_buckets(masks: &[ObservationMask]) -> BTreeMap<usize, Vec<usize>> {
    let mut buckets: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (n, m) in masks.iter().enumerate() {
        buckets.entry(m.n_observed()).or_default().push(n);
    }
    buckets
}

/// Imputes many samples at once. Trajectories sharing a revealed-set size
/// advance together in one batched forward call. Sample `n` of the batch is
/// keyed as `first_sample + n`.
pub fn run_bucketed(
    backbone: &Backbone,
    rows: &[&[f64]],
    masks: &[ObservationMask],
    first_sample: usize,
    weighting: Weighting<'_>,
    opts: &ImputeOptions,
) -> Result<(Vec<ImputationResult>, EngineStats)> {
    if rows.len() != masks.len() {
        return Err(Error::Dimension { expected: rows.len(), got: masks.len() });
    }
    if opts.samples == 0 {
        return Err(Error::invalid("need at least one sample"));
    }
    let k = opts.samples;
    let mut trajs = Vec::with_capacity(rows.len() * k);
    for (n, (row, mask)) in rows.iter().zip(masks).enumerate() {
        check_row(backbone, row, mask)?;
        for r in 0..k {
            trajs.push(Trajectory::new(first_sample + n, r, row, mask, opts.max_steps, opts.seed)?);
        }
    }
    let mut buckets: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, t) in trajs.iter().enumerate() {
        if !t.is_done() {
            buckets.entry(t.n_revealed).or_default().push(i);
        }
    }
    let l = backbone.dim();
    let mut stats = EngineStats::default();
    while let Some((_, members)) = buckets.pop_first() {
        let b = members.len();
        let mut x = Vec::with_capacity(b * l);
        let mut m = Vec::with_capacity(b * l);
        let mut t = Vec::with_capacity(b);
        for &i in &members {
            x.extend_from_slice(&trajs[i].values);
            m.extend(trajs[i].context_mask());
            t.push(trajs[i].time());
        }
        let out = backbone.forward_batch(&x, &m, &t, None);
        stats.forward_calls += 1;
        stats.rows_evaluated += b;
        for (r, &i) in members.iter().enumerate() {
            let traj = &mut trajs[i];
            let block = traj.next_block();
            traj.advance(&block, &out.mu[r * l..(r + 1) * l], &out.log_sigma[r * l..(r + 1) * l]);
            if !traj.is_done() {
                buckets.entry(traj.n_revealed).or_default().push(i);
            }
        }
    }
    let mut results = Vec::with_capacity(rows.len());
    let mut it = trajs.into_iter();
    for (row, mask) in rows.iter().zip(masks) {
        let group: Vec<Trajectory> = it.by_ref().take(k).collect();
        results.push(combine(row, mask, group, weighting, opts.estimator));
    }
    Ok((results, stats))
}

/// Imputes every row in chunks of `chunk` samples. Chunks are independent
/// and may run on the rayon pool; results are in row order.
pub fn impute_rows(
    backbone: &Backbone,
    rows: &[&[f64]],
    masks: &[ObservationMask],
    weighting: Weighting<'_>,
    opts: &ImputeOptions,
    chunk: usize,
) -> Result<Vec<ImputationResult>> {
    use rayon::prelude::*;
    let chunk = chunk.max(1);
    let parts: Vec<Result<Vec<ImputationResult>>> = rows
        .par_chunks(chunk)
        .zip(masks.par_chunks(chunk))
        .enumerate()
        .map(|(c, (r, m))| run_bucketed(backbone, r, m, c * chunk, weighting, opts).map(|x| x.0))
        .collect();
    let mut out = Vec::with_capacity(rows.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Observation probabilities for a completed row, for reporting.
pub fn observation_probabilities(head: &MissingnessHead, x: &[f64]) -> Vec<f64> {
    head.logits_batch(x, None).into_iter().map(sigmoid).collect()
}

/// Writes per-cell posterior standard deviations as CSV (one row per input
/// row, encoded-element columns; empty for observed cells).
pub fn write_posterior_std(path: &Path, results: &[ImputationResult], masks: &[ObservationMask]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for (res, mask) in results.iter().zip(masks) {
        let std = res.posterior_std();
        let cells: Vec<String> = std
            .iter()
            .enumerate()
            .map(|(j, s)| if mask.binary[j] { String::new() } else { format!("{s}") })
            .collect();
        writeln!(f, "{}", cells.join(",")).map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{BackboneConfig, Params};

    fn random_backbone(dim: usize, seed: u64) -> Backbone {
        let cfg = BackboneConfig { dim, hidden: vec![8, 8], time_dim: 8 };
        let mut b = Backbone::new(cfg, &mut Stream::new(seed));
        let mut rng = Stream::new(seed + 100);
        for t in b.tensors_mut() {
            for v in t.iter_mut() {
                *v = 0.4 * rng.normal();
            }
        }
        b
    }

    #[test]
    fn schedule_examples() {
        assert_eq!(make_schedule(64, 6).unwrap().blocks, vec![2, 2, 4, 8, 16, 32]);
        assert_eq!(make_schedule(10, 10).unwrap().blocks, vec![1; 10]);
        let s = make_schedule(5, 3).unwrap();
        assert_eq!(s.cumulative(), vec![2, 3, 5]);
        assert_eq!(s.blocks, vec![2, 1, 2]);
        assert!(make_schedule(3, 4).is_err());
        assert_eq!(make_schedule(0, 0).unwrap().steps(), 0);
    }

    #[test]
    fn default_steps_caps() {
        assert_eq!(default_steps(10, None), 10);
        assert_eq!(default_steps(100, None), 64);
        assert_eq!(default_steps(100, Some(4)), 4);
        assert_eq!(default_steps(0, None), 0);
    }

    #[test]
    fn weight_normalization() {
        let w = normalize_log_weights(&[0.3f64.ln(), 0.1f64.ln()]);
        assert!((w[0] - 0.75).abs() < 1e-12 && (w[1] - 0.25).abs() < 1e-12);
        let w = normalize_log_weights(&[-2000.0, -2001.0]);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn observed_positions_pass_through() {
        let b = random_backbone(5, 1);
        let row = [0.123456789, f64::NAN, -3.25, f64::NAN, 7.0];
        let mask = ObservationMask::from_binary(&[true, false, true, false, true]);
        let opts = ImputeOptions { samples: 3, seed: 4, ..Default::default() };
        let r = impute(&b, &row, &mask, 0, Weighting::Uniform, &opts).unwrap();
        for j in [0, 2, 4] {
            assert_eq!(r.point_estimate[j].to_bits(), row[j].to_bits());
            for s in &r.samples {
                assert_eq!(s[j].to_bits(), row[j].to_bits());
            }
        }
        assert!(r.point_estimate.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn degenerate_sigma_follows_chained_means() {
        let mut b = random_backbone(3, 2);
        let last = b.mlp.layers.len() - 1;
        let layer = &mut b.mlp.layers[last];
        for o in 3..6 {
            layer.weight[o * layer.in_dim..(o + 1) * layer.in_dim].fill(0.0);
            layer.bias[o] = -50.0;
        }
        let mask = ObservationMask::from_binary(&[true, false, false]);
        let t = Trajectory::new(0, 0, &[0.5, 0.0, 0.0], &mask, None, 9).unwrap();
        let done = sample_trajectory(&b, t);
        for j in 1..3 {
            assert!((done.values[j] - done.reveal_means[j]).abs() < 1e-2);
        }
    }

    #[test]
    fn bucketed_matches_sequential_and_counts_calls() {
        let b = random_backbone(4, 3);
        let rows: Vec<Vec<f64>> = vec![vec![0.1, 0.2, 0.3, 0.4], vec![-1.0, 0.5, 0.0, 2.0]];
        let mask = ObservationMask::from_binary(&[false, false, false, false]);
        let masks = vec![mask.clone(), mask.clone()];
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let opts = ImputeOptions { samples: 4, max_steps: Some(4), seed: 11, estimator: None };
        let (res, stats) = run_bucketed(&b, &refs, &masks, 0, Weighting::Uniform, &opts).unwrap();
        assert_eq!(stats.forward_calls, 4);
        for (n, r) in res.iter().enumerate() {
            let seq = impute(&b, &rows[n], &masks[n], n, Weighting::Uniform, &opts).unwrap();
            assert_eq!(&seq, r);
        }
    }

    #[test]
    fn initial_buckets_group_by_cardinality() {
        let mk = |k: usize| ObservationMask::from_binary(&(0..8).map(|j| j < k).collect::<Vec<_>>());
        let b = initial_buckets(&[mk(3), mk(5), mk(3)]);
        assert_eq!(b[&3], vec![0, 2]);
        assert_eq!(b[&5], vec![1]);
    }

    #[test]
    fn same_key_same_trajectory() {
        let b = random_backbone(4, 5);
        let mask = ObservationMask::from_binary(&[true, false, false, true]);
        let row = [1.0, 0.0, 0.0, -1.0];
        let a = sample_trajectory(&b, Trajectory::new(2, 1, &row, &mask, None, 3).unwrap());
        let c = sample_trajectory(&b, Trajectory::new(2, 1, &row, &mask, None, 3).unwrap());
        assert_eq!(a, c);
        let d = sample_trajectory(&b, Trajectory::new(2, 2, &row, &mask, None, 3).unwrap());
        assert_ne!(a.values, d.values);
    }
}
