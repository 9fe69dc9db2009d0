//! Binned conditional mutual information from model samples and greedy
//! sequential feature acquisition.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{expand_feature_mask, ObservationMask};
use crate::model::MoArm;
use crate::rng::Stream;
use crate::sampling::{run_bucketed, ImputationResult, ImputeOptions, Weighting};
use crate::tabular::{decode_bits, encode_bits, FeatureKind, FeatureSchema, RawValue, Standardization};

const ACQUIRE: u64 = 0x6163_7175;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BinningSpec {
    /// Equal-width bins per continuous variable.
    pub bins: usize,
}

impl Default for BinningSpec {
    fn default() -> Self {
        Self { bins: 5 }
    }
}

/// Draws of one variable, binned according to its kind.
#[derive(Debug, Clone, PartialEq)]
pub enum VariableSamples {
    Continuous(Vec<f64>),
    /// Category indices in `0..categories`.
    Categorical { values: Vec<usize>, categories: usize },
}

impl VariableSamples {
    pub fn len(&self) -> usize {
        match self {
            VariableSamples::Continuous(v) => v.len(),
            VariableSamples::Categorical { values, .. } => values.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Bin index per draw and the number of bins. Continuous draws use
    /// equal-width bins over their own min/max; a constant variable falls
    /// into a single bin.
    pub fn bin(&self, spec: &BinningSpec) -> (Vec<usize>, usize) {
        match self {
            VariableSamples::Categorical { values, categories } => (values.clone(), *categories),
            VariableSamples::Continuous(v) => {
                let b = spec.bins;
                let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let width = hi - lo;
                if !(width > 0.0) || !width.is_finite() {
                    return (vec![0; v.len()], b);
                }
                let idx = v
                    .iter()
                    .map(|&x| (((x - lo) / width * b as f64) as usize).min(b - 1))
                    .collect();
                (idx, b)
            }
        }
    }
}

/// Plug-in mutual information (nats) of a contingency table, clamped at 0.
///
/// Terms are summed in sorted order so that transposing the table gives the
/// same value bit for bit.
pub fn mi_from_counts(counts: &[Vec<usize>]) -> f64 {
    let n: usize = counts.iter().flatten().sum();
    if n == 0 {
        return 0.0;
    }
    let nf = n as f64;
    let rows: Vec<f64> = counts.iter().map(|r| r.iter().sum::<usize>() as f64 / nf).collect();
    let n_cols = counts.iter().map(|r| r.len()).max().unwrap_or(0);
    let cols: Vec<f64> = (0..n_cols)
        .map(|v| counts.iter().map(|r| r.get(v).copied().unwrap_or(0)).sum::<usize>() as f64 / nf)
        .collect();
    let mut terms = Vec::new();
    for (u, r) in counts.iter().enumerate() {
        for (v, &c) in r.iter().enumerate() {
            if c > 0 {
                let p = c as f64 / nf;
                terms.push(p * (p / (rows[u] * cols[v])).ln());
            }
        }
    }
    terms.sort_by(|a, b| a.total_cmp(b));
    terms.iter().sum::<f64>().max(0.0)
}

pub fn contingency(a: &[usize], na: usize, b: &[usize], nb: usize) -> Vec<Vec<usize>> {
    let mut t = vec![vec![0usize; nb]; na];
    for (&u, &v) in a.iter().zip(b) {
        t[u][v] += 1;
    }
    t
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiEstimate {
    pub feature: usize,
    /// Nats, never negative.
    pub value: f64,
    pub n: usize,
    pub bins: usize,
}

/// Binned plug-in MI between paired draws of the target and a candidate.
pub fn estimate_mi(target: &VariableSamples, candidate: &VariableSamples, spec: &BinningSpec) -> Result<f64> {
    if target.len() != candidate.len() {
        return Err(Error::Dimension { expected: target.len(), got: candidate.len() });
    }
    if target.len() < 2 {
        return Err(Error::invalid("mutual information needs at least two samples"));
    }
    if spec.bins < 2 {
        return Err(Error::invalid("need at least two bins"));
    }
    let (a, na) = target.bin(spec);
    let (b, nb) = candidate.bin(spec);
    Ok(mi_from_counts(&contingency(&a, na, &b, nb)))
}

/// Draws of feature `f` across completed rows (numeric features stay in
/// standardized units; categorical bit blocks are decoded).
pub fn feature_samples(schema: &FeatureSchema, rows: &[Vec<f64>], f: usize) -> VariableSamples {
    let r = schema.elements(f);
    match schema.specs[f].cardinality() {
        None => VariableSamples::Continuous(rows.iter().map(|x| x[r.start]).collect()),
        Some(c) => VariableSamples::Categorical {
            values: rows.iter().map(|x| decode_bits(&x[r.clone()], c)).collect(),
            categories: c,
        },
    }
}

/// Feature-level observation state of one row in standardized encoded units.
#[derive(Debug, Clone, PartialEq)]
pub struct AcquisitionState {
    pub values: Vec<f64>,
    pub observed: Vec<bool>,
}

impl AcquisitionState {
    pub fn empty(schema: &FeatureSchema) -> Self {
        Self {
            values: vec![0.0; schema.dim],
            observed: vec![false; schema.n_features()],
        }
    }

    pub fn mask(&self, schema: &FeatureSchema) -> Result<ObservationMask> {
        expand_feature_mask(&self.observed, schema)
    }

    pub fn set(&mut self, schema: &FeatureSchema, f: usize, encoded: &[f64]) {
        let r = schema.elements(f);
        self.values[r].copy_from_slice(encoded);
        self.observed[f] = true;
    }

    pub fn n_observed(&self) -> usize {
        self.observed.iter().filter(|&&o| o).count()
    }

    /// Unobserved non-target features, ascending.
    pub fn candidates(&self, schema: &FeatureSchema) -> Vec<usize> {
        (0..schema.n_features())
            .filter(|&f| !self.observed[f] && !schema.specs[f].is_target)
            .collect()
    }
}

/// A user-supplied value for one feature.
#[derive(Debug, Clone, PartialEq)]
pub enum FeatureInput {
    Number(f64),
    Category(usize),
    Label(String),
}

/// Standardized encoding of a value for feature `f`.
pub fn encode_feature(schema: &FeatureSchema, stz: &Standardization, f: usize, value: &FeatureInput) -> Result<Vec<f64>> {
    let spec = schema
        .specs
        .get(f)
        .ok_or_else(|| Error::invalid(format!("no feature {f}")))?;
    let r = schema.elements(f);
    match (&spec.kind, value) {
        (FeatureKind::Numeric, FeatureInput::Number(v)) => {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("value for {}", spec.name)));
            }
            Ok(vec![stz.forward(r.start, *v)])
        }
        (FeatureKind::Categorical { categories }, FeatureInput::Category(i)) => {
            if *i >= categories.len() {
                return Err(Error::invalid(format!(
                    "category {i} out of range for {} (0..{})",
                    spec.name,
                    categories.len()
                )));
            }
            Ok(encode_bits(*i, r.len()))
        }
        (FeatureKind::Categorical { categories }, FeatureInput::Label(l)) => {
            let i = categories
                .iter()
                .position(|c| c == l)
                .ok_or_else(|| Error::invalid(format!("unknown category '{l}' for {}", spec.name)))?;
            Ok(encode_bits(i, r.len()))
        }
        (FeatureKind::Numeric, _) => Err(Error::invalid(format!("{} expects a number", spec.name))),
        (FeatureKind::Categorical { .. }, FeatureInput::Number(_)) => Err(Error::invalid(format!(
            "{} expects a category index or label",
            spec.name
        ))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AcquisitionOptions {
    /// Conditional samples per step.
    pub samples: usize,
    pub binning: BinningSpec,
    pub max_steps: Option<usize>,
    /// Weight samples by the missingness head when predicting the target.
    /// Mutual information always uses unweighted samples.
    pub weighted_prediction: bool,
}

impl Default for AcquisitionOptions {
    fn default() -> Self {
        Self {
            samples: 100,
            binning: BinningSpec::default(),
            max_steps: None,
            weighted_prediction: false,
        }
    }
}

/// One batch of conditional samples for `state`, keyed by `(seed, step)`.
pub fn draw_samples(
    model: &MoArm,
    schema: &FeatureSchema,
    state: &AcquisitionState,
    opts: &AcquisitionOptions,
    seed: u64,
    step: usize,
) -> Result<ImputationResult> {
    let mask = state.mask(schema)?;
    let weighting = if opts.weighted_prediction { model.weighting() } else { Weighting::Uniform };
    let io = ImputeOptions {
        samples: opts.samples,
        max_steps: opts.max_steps,
        seed: Stream::new(seed).fork(&[ACQUIRE, step as u64]).key(),
        estimator: None,
    };
    let (mut res, _) = run_bucketed(&model.backbone, &[&state.values], &[mask], 0, weighting, &io)?;
    Ok(res.remove(0))
}

/// MI of every candidate with the target, sorted by decreasing value with
/// ties going to the lower feature index.
pub fn rank_candidates(
    schema: &FeatureSchema,
    state: &AcquisitionState,
    samples: &[Vec<f64>],
    spec: &BinningSpec,
) -> Result<Vec<MiEstimate>> {
    let target = schema
        .target_index()
        .ok_or_else(|| Error::Schema("acquisition needs a target feature".into()))?;
    let cands = state.candidates(schema);
    if cands.is_empty() {
        return Err(Error::invalid("no candidate features left"));
    }
    let ts = feature_samples(schema, samples, target);
    let mut out = cands
        .into_iter()
        .map(|f| {
            let cs = feature_samples(schema, samples, f);
            Ok(MiEstimate {
                feature: f,
                value: estimate_mi(&ts, &cs, spec)?,
                n: samples.len(),
                bins: spec.bins,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    out.sort_by(|a, b| b.value.total_cmp(&a.value).then(a.feature.cmp(&b.feature)));
    Ok(out)
}

/// Predictive summary of the target feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TargetPrediction {
    Continuous {
        mean: f64,
        std: f64,
        mean_standardized: f64,
        std_standardized: f64,
    },
    Categorical {
        class: usize,
        label: String,
        frequencies: Vec<f64>,
    },
}

impl TargetPrediction {
    /// Absolute error in (standardized, raw) units for continuous targets,
    /// 0/1 error (both entries) for categorical targets.
    pub fn error(&self, truth_standardized: f64, truth_raw: f64) -> (f64, f64) {
        match self {
            TargetPrediction::Continuous { mean, mean_standardized, .. } => {
                ((mean_standardized - truth_standardized).abs(), (mean - truth_raw).abs())
            }
            TargetPrediction::Categorical { class, .. } => {
                let e = if *class as f64 == truth_raw { 0.0 } else { 1.0 };
                (e, e)
            }
        }
    }
}

/// Continuous targets: weighted mean of the result's per-replica
/// contributions with the spread of the sampled draws; categorical targets: majority vote over decoded
/// draws (ties to the lowest category).
pub fn predict_target(schema: &FeatureSchema, stz: &Standardization, res: &ImputationResult) -> Result<TargetPrediction> {
    let target = schema
        .target_index()
        .ok_or_else(|| Error::Schema("no target feature".into()))?;
    let r = schema.elements(target);
    match &schema.specs[target].kind {
        FeatureKind::Numeric => {
            let j = r.start;
            let mean: f64 = res.contributions().iter().zip(&res.weights).map(|(m, w)| w * m[j]).sum();
            let var: f64 = res
                .samples
                .iter()
                .zip(&res.weights)
                .map(|(s, w)| w * (s[j] - mean) * (s[j] - mean))
                .sum();
            let std = var.max(0.0).sqrt();
            let scale = stz.stats[j].map(|s| s.std).unwrap_or(1.0);
            Ok(TargetPrediction::Continuous {
                mean: stz.inverse(j, mean),
                std: std * scale,
                mean_standardized: mean,
                std_standardized: std,
            })
        }
        FeatureKind::Categorical { categories } => {
            let mut freq = vec![0.0; categories.len()];
            for (s, w) in res.samples.iter().zip(&res.weights) {
                freq[decode_bits(&s[r.clone()], categories.len())] += w;
            }
            let total: f64 = freq.iter().sum();
            for v in &mut freq {
                *v /= total;
            }
            let mut class = 0;
            for (c, &v) in freq.iter().enumerate() {
                if v > freq[class] {
                    class = c;
                }
            }
            Ok(TargetPrediction::Categorical {
                class,
                label: categories[class].clone(),
                frequencies: freq,
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaiaStep {
    pub step: usize,
    pub feature: Option<usize>,
    pub feature_name: Option<String>,
    pub mi: Option<f64>,
    pub value: Option<RawValue>,
    pub prediction: TargetPrediction,
    pub error_standardized: f64,
    pub error_raw: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaiaTrace {
    pub steps: Vec<SaiaStep>,
}

impl SaiaTrace {
    pub fn acquired(&self) -> Vec<usize> {
        self.steps.iter().filter_map(|s| s.feature).collect()
    }

    /// One JSON record per line.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for s in &self.steps {
            serde_json::to_writer(&mut w, s)?;
            writeln!(w).map_err(|e| Error::io("<trace>", e))?;
        }
        Ok(())
    }
}

fn target_truth(schema: &FeatureSchema, stz: &Standardization, truth: &[f64]) -> Result<(f64, f64)> {
    let t = schema.target_index().ok_or_else(|| Error::Schema("no target feature".into()))?;
    let r = schema.elements(t);
    match schema.specs[t].cardinality() {
        None => {
            let v = truth[r.start];
            if !v.is_finite() {
                return Err(Error::invalid("target value is missing in the evaluation row"));
            }
            Ok((v, stz.inverse(r.start, v)))
        }
        Some(c) => {
            let k = decode_bits(&truth[r], c) as f64;
            Ok((k, k))
        }
    }
}

/// Greedy acquisition on one fully known row (standardized encoded units;
/// non-finite entries mark features that cannot be acquired). Starts from an
/// empty observed set and acquires `budget` features.
pub fn saia_run(
    model: &MoArm,
    schema: &FeatureSchema,
    stz: &Standardization,
    truth: &[f64],
    budget: usize,
    opts: &AcquisitionOptions,
    seed: u64,
) -> Result<SaiaTrace> {
    if truth.len() != schema.dim {
        return Err(Error::Dimension { expected: schema.dim, got: truth.len() });
    }
    let (truth_std, truth_raw) = target_truth(schema, stz, truth)?;
    let available = |f: usize| schema.elements(f).all(|j| truth[j].is_finite());
    let mut state = AcquisitionState::empty(schema);
    let n_cands = state.candidates(schema).into_iter().filter(|&f| available(f)).count();
    if budget > n_cands {
        return Err(Error::invalid(format!("budget {budget} exceeds {n_cands} candidate features")));
    }
    let mut res = draw_samples(model, schema, &state, opts, seed, 0)?;
    let prediction = predict_target(schema, stz, &res)?;
    let (es, er) = prediction.error(truth_std, truth_raw);
    let mut steps = vec![SaiaStep {
        step: 0,
        feature: None,
        feature_name: None,
        mi: None,
        value: None,
        prediction,
        error_standardized: es,
        error_raw: er,
    }];
    for step in 1..=budget {
        let unweighted = if opts.weighted_prediction {
            draw_samples(model, schema, &state, &AcquisitionOptions { weighted_prediction: false, ..*opts }, seed, step - 1)?
        } else {
            res.clone()
        };
        let ranking = rank_candidates(schema, &state, &unweighted.samples, &opts.binning)?;
        let best = ranking
            .into_iter()
            .find(|m| available(m.feature))
            .ok_or_else(|| Error::invalid("no acquirable candidate"))?;
        let r = schema.elements(best.feature);
        state.set(schema, best.feature, &truth[r]);
        let decoded = crate::tabular::decode_row(&fill_nan(truth), schema, stz)?;
        res = draw_samples(model, schema, &state, opts, seed, step)?;
        let prediction = predict_target(schema, stz, &res)?;
        let (es, er) = prediction.error(truth_std, truth_raw);
        steps.push(SaiaStep {
            step,
            feature: Some(best.feature),
            feature_name: Some(schema.specs[best.feature].name.clone()),
            mi: Some(best.value),
            value: Some(decoded[best.feature].clone()),
            prediction,
            error_standardized: es,
            error_raw: er,
        });
    }
    Ok(SaiaTrace { steps })
}

fn fill_nan(row: &[f64]) -> Vec<f64> {
    row.iter().map(|v| if v.is_finite() { *v } else { 0.0 }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tabular::FeatureSpec;

    fn table(rows: &[&[usize]]) -> Vec<Vec<usize>> {
        rows.iter().map(|r| r.to_vec()).collect()
    }

    #[test]
    fn count_examples() {
        assert_eq!(mi_from_counts(&table(&[&[25, 25], &[25, 25]])), 0.0);
        let v = mi_from_counts(&table(&[&[50, 0], &[0, 50]]));
        assert!((v - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn symmetric_bit_for_bit() {
        let a = VariableSamples::Continuous((0..200).map(|i| ((i * 37) % 101) as f64).collect());
        let b = VariableSamples::Continuous((0..200).map(|i| ((i * 13) % 29) as f64 + i as f64 * 0.1).collect());
        let spec = BinningSpec::default();
        assert_eq!(estimate_mi(&a, &b, &spec).unwrap(), estimate_mi(&b, &a, &spec).unwrap());
    }

    #[test]
    fn degenerate_is_zero() {
        let a = VariableSamples::Continuous(vec![1.0; 10]);
        let b = VariableSamples::Continuous((0..10).map(|i| i as f64).collect());
        assert_eq!(estimate_mi(&a, &b, &BinningSpec::default()).unwrap(), 0.0);
    }

    #[test]
    fn duplicated_candidate_is_identical() {
        let t = VariableSamples::Continuous((0..50).map(|i| (i as f64).sin()).collect());
        let c = VariableSamples::Continuous((0..50).map(|i| (i as f64 * 0.7).cos()).collect());
        let spec = BinningSpec::default();
        assert_eq!(estimate_mi(&t, &c, &spec).unwrap(), estimate_mi(&t, &c.clone(), &spec).unwrap());
    }

    #[test]
    fn equal_width_bins_include_max() {
        let v = VariableSamples::Continuous(vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(v.bin(&BinningSpec::default()).0, vec![0, 1, 2, 3, 4, 4]);
    }

    fn schema_with_target() -> FeatureSchema {
        FeatureSchema::new(vec![
            FeatureSpec::numeric("x1", 0, false),
            FeatureSpec::numeric("x2", 1, false),
            FeatureSpec::numeric("y", 2, true),
        ])
        .unwrap()
    }

    #[test]
    fn ties_go_to_lower_index() {
        let schema = schema_with_target();
        let state = AcquisitionState::empty(&schema);
        // x1 and x2 identical draws; target independent of both
        let samples: Vec<Vec<f64>> = (0..40).map(|i| vec![(i % 5) as f64, (i % 5) as f64, (i / 8) as f64]).collect();
        let r = rank_candidates(&schema, &state, &samples, &BinningSpec::default()).unwrap();
        assert_eq!(r[0].value, r[1].value);
        assert_eq!(r[0].feature, 0);
    }

    #[test]
    fn prediction_examples() {
        let schema = schema_with_target();
        let stz = Standardization::identity(&schema);
        let res = ImputationResult {
            point_estimate: vec![0.0; 3],
            samples: vec![vec![0.0, 0.0, 1.0], vec![0.0, 0.0, 3.0]],
            reveal_means: vec![vec![0.0, 0.0, 1.0], vec![0.0, 0.0, 3.0]],
            weights: vec![0.5, 0.5],
            mode: crate::mask::Mechanism::Mcar,
            estimator: crate::sampling::Estimator::RevealMeans,
        };
        match predict_target(&schema, &stz, &res).unwrap() {
            TargetPrediction::Continuous { mean, std, .. } => {
                assert_eq!(mean, 2.0);
                assert_eq!(std, 1.0);
            }
            _ => panic!(),
        }
        let cat = FeatureSchema::new(vec![
            FeatureSpec::numeric("x", 0, false),
            FeatureSpec::categorical("y", vec!["a".into(), "b".into(), "c".into()], 1, true).unwrap(),
        ])
        .unwrap();
        let two = encode_bits(2, 2);
        let row = vec![0.0, two[0], two[1]];
        let res = ImputationResult {
            point_estimate: row.clone(),
            samples: vec![row.clone(); 4],
            reveal_means: vec![row; 4],
            weights: vec![0.25; 4],
            mode: crate::mask::Mechanism::Mcar,
            estimator: crate::sampling::Estimator::RevealMeans,
        };
        match predict_target(&cat, &Standardization::identity(&cat), &res).unwrap() {
            TargetPrediction::Categorical { class, frequencies, .. } => {
                assert_eq!(class, 2);
                assert_eq!(frequencies[2], 1.0);
            }
            _ => panic!(),
        }
    }

    #[test]
    fn feature_encoding_validates() {
        let cat = FeatureSchema::new(vec![
            FeatureSpec::numeric("x", 0, false),
            FeatureSpec::categorical("c", vec!["a".into(), "b".into(), "c".into()], 1, false).unwrap(),
        ])
        .unwrap();
        let stz = Standardization::identity(&cat);
        assert!(encode_feature(&cat, &stz, 1, &FeatureInput::Category(3)).is_err());
        assert_eq!(encode_feature(&cat, &stz, 1, &FeatureInput::Label("c".into())).unwrap(), encode_bits(2, 2));
        assert!(encode_feature(&cat, &stz, 0, &FeatureInput::Label("c".into())).is_err());
        assert_eq!(encode_feature(&cat, &stz, 0, &FeatureInput::Number(1.5)).unwrap(), vec![1.5]);
    }
}
