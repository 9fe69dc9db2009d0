//! Observation masks and synthetic missingness mechanisms.
//!
//! Mechanisms act on features; [`expand_feature_mask`] lifts a feature mask
//! to the encoded element level so every bit of a categorical feature is
//! observed or missing together.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::tabular::{EncodedDataset, FeatureSchema};

/// Observed element set together with its binary indicator form.
///
/// Constructors keep both views consistent; [`validate_mask`] checks values
/// assembled by hand or read from disk.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ObservationMask {
    pub observed_elements: Vec<usize>,
    pub binary: Vec<bool>,
}

impl ObservationMask {
    pub fn full(dim: usize) -> Self {
        Self::from_binary(&vec![true; dim])
    }

    pub fn empty(dim: usize) -> Self {
        Self::from_binary(&vec![false; dim])
    }

    pub fn from_binary(binary: &[bool]) -> Self {
        Self {
            observed_elements: binary
                .iter()
                .enumerate()
                .filter_map(|(j, &b)| b.then_some(j))
                .collect(),
            binary: binary.to_vec(),
        }
    }

    pub fn from_indices(dim: usize, indices: &[usize]) -> Result<Self> {
        let mut binary = vec![false; dim];
        for &j in indices {
            if j >= dim {
                return Err(Error::invalid(format!("index {j} out of range for dimension {dim}")));
            }
            binary[j] = true;
        }
        Ok(Self::from_binary(&binary))
    }

    pub fn dim(&self) -> usize {
        self.binary.len()
    }

    pub fn n_observed(&self) -> usize {
        self.observed_elements.len()
    }

    pub fn n_missing(&self) -> usize {
        self.dim() - self.n_observed()
    }

    #[inline]
    pub fn is_observed(&self, j: usize) -> bool {
        self.binary[j]
    }

    pub fn missing_elements(&self) -> Vec<usize> {
        (0..self.dim()).filter(|&j| !self.binary[j]).collect()
    }

    /// Indicator vector as 0/1 reals.
    pub fn as_f64(&self) -> Vec<f64> {
        self.binary.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    pub fn with_observed(&self, extra: &[usize]) -> Self {
        let mut b = self.binary.clone();
        for &j in extra {
            b[j] = true;
        }
        Self::from_binary(&b)
    }

    pub fn intersect(&self, other: &ObservationMask) -> Self {
        let b: Vec<bool> = self.binary.iter().zip(&other.binary).map(|(a, b)| *a && *b).collect();
        Self::from_binary(&b)
    }

    pub fn to_bitstring(&self) -> String {
        self.binary.iter().map(|&b| if b { '1' } else { '0' }).collect()
    }

    pub fn from_bitstring(s: &str) -> Result<Self> {
        let binary = s
            .chars()
            .map(|c| match c {
                '1' => Ok(true),
                '0' => Ok(false),
                other => Err(Error::invalid(format!("bad mask character '{other}'"))),
            })
            .collect::<Result<Vec<bool>>>()?;
        Ok(Self::from_binary(&binary))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MaskViolation {
    IndexOutOfRange { index: usize, dim: usize },
    CountMismatch { set_size: usize, binary_sum: usize },
    Unsorted,
    Disagreement { index: usize },
}

impl fmt::Display for MaskViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MaskViolation::IndexOutOfRange { index, dim } => {
                write!(f, "index {index} out of range for dimension {dim}")
            }
            MaskViolation::CountMismatch { set_size, binary_sum } => {
                write!(f, "index set has {set_size} entries but binary sums to {binary_sum}")
            }
            MaskViolation::Unsorted => write!(f, "index set is not strictly increasing"),
            MaskViolation::Disagreement { index } => {
                write!(f, "index {index} listed as observed but its bit is 0")
            }
        }
    }
}

/// Check the index-set/binary bijection. Never panics.
pub fn validate_mask(mask: &ObservationMask) -> Result<(), Vec<MaskViolation>> {
    let dim = mask.binary.len();
    let mut v = Vec::new();
    for &j in &mask.observed_elements {
        if j >= dim {
            v.push(MaskViolation::IndexOutOfRange { index: j, dim });
        } else if !mask.binary[j] {
            v.push(MaskViolation::Disagreement { index: j });
        }
    }
    if mask.observed_elements.windows(2).any(|w| w[0] >= w[1]) {
        v.push(MaskViolation::Unsorted);
    }
    let binary_sum = mask.binary.iter().filter(|&&b| b).count();
    if binary_sum != mask.observed_elements.len() {
        v.push(MaskViolation::CountMismatch {
            set_size: mask.observed_elements.len(),
            binary_sum,
        });
    }
    if v.is_empty() {
        Ok(())
    } else {
        Err(v)
    }
}

/// Lift a per-feature observed flag vector to element level.
pub fn expand_feature_mask(feature_mask: &[bool], schema: &FeatureSchema) -> Result<ObservationMask> {
    if feature_mask.len() != schema.n_features() {
        return Err(Error::Dimension {
            expected: schema.n_features(),
            got: feature_mask.len(),
        });
    }
    let mut binary = vec![false; schema.dim];
    for (f, &obs) in feature_mask.iter().enumerate() {
        if obs {
            for j in schema.elements(f) {
                binary[j] = true;
            }
        }
    }
    Ok(ObservationMask::from_binary(&binary))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mechanism {
    Mcar,
    Mnar,
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mechanism::Mcar => "mcar",
            Mechanism::Mnar => "mnar",
        })
    }
}

impl std::str::FromStr for Mechanism {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mcar" => Ok(Mechanism::Mcar),
            "mnar" => Ok(Mechanism::Mnar),
            other => Err(Error::invalid(format!("unknown mechanism '{other}'"))),
        }
    }
}

/// Masks for one split, reproducible from `(mechanism, rate, seed, shape)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSuite {
    pub mechanism: Mechanism,
    pub rate: f64,
    pub seed: u64,
    pub dim: usize,
    pub masks: Vec<ObservationMask>,
}

impl MaskSuite {
    pub fn missing_fraction(&self) -> f64 {
        let total = (self.masks.len() * self.dim) as f64;
        let missing: usize = self.masks.iter().map(ObservationMask::n_missing).sum();
        missing as f64 / total
    }

    /// Header line `mechanism rate seed L`, then one bitstring per row.
    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "# mechanism={} rate={} seed={} L={}", self.mechanism, self.rate, self.seed, self.dim)?;
        for m in &self.masks {
            writeln!(w, "{}", m.to_bitstring())?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(std::io::BufWriter::new(f)).map_err(|e| Error::io(path, e))
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::invalid("empty mask file"))?
            .map_err(|e| Error::io("<mask>", e))?;
        let mut mechanism = None;
        let mut rate = None;
        let mut seed = None;
        let mut dim = None;
        for tok in header.trim_start_matches('#').split_whitespace() {
            let (k, v) = tok
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("bad header token '{tok}'")))?;
            let bad = |_| Error::invalid(format!("bad header value '{tok}'"));
            match k {
                "mechanism" => mechanism = Some(v.parse::<Mechanism>()?),
                "rate" => rate = Some(v.parse::<f64>().map_err(|_| Error::invalid(tok.to_string()))?),
                "seed" => seed = Some(v.parse::<u64>().map_err(bad)?),
                "L" => dim = Some(v.parse::<usize>().map_err(bad)?),
                other => return Err(Error::invalid(format!("unknown header key '{other}'"))),
            }
        }
        let missing = |k: &str| Error::invalid(format!("mask header lacks '{k}'"));
        let dim = dim.ok_or_else(|| missing("L"))?;
        let mut masks = Vec::new();
        for line in lines {
            let line = line.map_err(|e| Error::io("<mask>", e))?;
            if line.is_empty() {
                continue;
            }
            let m = ObservationMask::from_bitstring(line.trim())?;
            if m.dim() != dim {
                return Err(Error::Dimension { expected: dim, got: m.dim() });
            }
            masks.push(m);
        }
        Ok(Self {
            mechanism: mechanism.ok_or_else(|| missing("mechanism"))?,
            rate: rate.ok_or_else(|| missing("rate"))?,
            seed: seed.ok_or_else(|| missing("seed"))?,
            dim,
            masks,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(format!("missing rate must lie in [0, 1), got {rate}")));
    }
    Ok(())
}

/// Row-level stream for mask generation; `salt` separates independent uses.
fn row_stream(seed: u64, salt: u64, row: usize) -> Stream {
    Stream::new(seed).fork(&[0x4D41_534B, salt, row as u64])
}

/// Every feature independently missing with probability `rate`.
pub fn gen_mcar(n_rows: usize, schema: &FeatureSchema, rate: f64, seed: u64) -> Result<MaskSuite> {
    check_rate(rate)?;
    let nf = schema.n_features();
    let masks = (0..n_rows)
        .map(|i| {
            let mut s = row_stream(seed, 0, i);
            let fm: Vec<bool> = (0..nf).map(|_| !s.bernoulli(rate)).collect();
            expand_feature_mask(&fm, schema)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MaskSuite {
        mechanism: Mechanism::Mcar,
        rate,
        seed,
        dim: schema.dim,
        masks,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MnarVariant {
    /// Response features are driven by an input-group feature; the input
    /// group is then masked MCAR.
    #[default]
    LogisticPaired,
    /// Every feature is driven by its own value.
    SelfMask,
}

/// Parameters of the logistic missingness model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MnarParams {
    pub variant: MnarVariant,
    /// Coefficient on the standardized driving value. Positive means large
    /// values are more likely to go missing.
    pub weight: f64,
}

impl Default for MnarParams {
    fn default() -> Self {
        Self {
            variant: MnarVariant::LogisticPaired,
            weight: 1.0,
        }
    }
}

/// The fitted logistic model, kept for diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct MnarModel {
    pub inputs: Vec<usize>,
    pub responses: Vec<usize>,
    /// `(response feature, driving feature, weight, offset)`.
    pub logits: Vec<(usize, usize, f64, f64)>,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Find `b` with `mean_i sigmoid(w * z_i + b) = rate` by bisection.
pub fn calibrate_offset(z: &[f64], w: f64, rate: f64) -> f64 {
    if rate <= 0.0 {
        return f64::NEG_INFINITY;
    }
    let mean_rate = |b: f64| z.iter().map(|&v| sigmoid(w * v + b)).sum::<f64>() / z.len() as f64;
    let (mut lo, mut hi) = (-60.0, 60.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean_rate(mid) < rate {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Z-scored feature values over all rows (categoricals use their index).
fn driving_values(data: &EncodedDataset, f: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..data.n_rows).map(|i| data.feature_value(i, f)).collect();
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt().max(1e-12);
    v.into_iter().map(|x| (x - mean) / sd).collect()
}

/// Logistic MNAR masks.
///
/// Features are split 50/50 (by `seed`) into an input group and a response
/// group. With [`MnarVariant::LogisticPaired`], response feature `k` goes
/// missing with probability `sigmoid(w * z_a + b_k)` where `z_a` is the
/// standardized value of its round-robin paired input feature, and the input
/// group is then masked MCAR at `rate`. With [`MnarVariant::SelfMask`] every
/// feature uses its own value. Each `b_k` is bisected so the expected rate of
/// that feature equals `rate` on this dataset.
pub fn gen_mnar_selfmask(
    data: &EncodedDataset,
    rate: f64,
    seed: u64,
    params: &MnarParams,
) -> Result<(MaskSuite, MnarModel)> {
    check_rate(rate)?;
    let schema = &data.schema;
    let nf = schema.n_features();
    let (inputs, responses, pairs): (Vec<usize>, Vec<usize>, Vec<(usize, usize)>) = match params.variant {
        MnarVariant::LogisticPaired => {
            if nf < 2 {
                return Err(Error::invalid("logistic MNAR needs at least 2 features"));
            }
            let all: Vec<usize> = (0..nf).collect();
            let mut s = Stream::new(seed).fork(&[0x4D4E_4152]);
            let perm = s.choose_subset(&all, nf);
            let n_in = nf / 2;
            let mut inputs = perm[..n_in].to_vec();
            let mut responses = perm[n_in..].to_vec();
            inputs.sort_unstable();
            responses.sort_unstable();
            let pairs = responses
                .iter()
                .enumerate()
                .map(|(k, &r)| (r, inputs[k % inputs.len()]))
                .collect();
            (inputs, responses, pairs)
        }
        MnarVariant::SelfMask => (Vec::new(), (0..nf).collect(), (0..nf).map(|f| (f, f)).collect()),
    };
    let mut logits = Vec::with_capacity(pairs.len());
    let mut probs: Vec<(usize, Vec<f64>)> = Vec::with_capacity(pairs.len());
    for &(r, a) in &pairs {
        let z = driving_values(data, a);
        let b = calibrate_offset(&z, params.weight, rate);
        let p = z.iter().map(|&v| sigmoid(params.weight * v + b)).collect();
        logits.push((r, a, params.weight, b));
        probs.push((r, p));
    }
    let masks = (0..data.n_rows)
        .map(|i| {
            let mut s = row_stream(seed, 1, i);
            let mut fm = vec![true; nf];
            for (r, p) in &probs {
                fm[*r] = !s.bernoulli(p[i]);
            }
            for &a in &inputs {
                fm[a] = !s.bernoulli(rate);
            }
            expand_feature_mask(&fm, schema)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((
        MaskSuite {
            mechanism: Mechanism::Mnar,
            rate,
            seed,
            dim: schema.dim,
            masks,
        },
        MnarModel {
            inputs,
            responses,
            logits,
        },
    ))
}

/// Intersect generated masks with the natively present cells of `data`.
pub fn with_native_missingness(suite: &MaskSuite, data: &EncodedDataset) -> Result<MaskSuite> {
    if suite.masks.len() != data.n_rows {
        return Err(Error::Dimension {
            expected: data.n_rows,
            got: suite.masks.len(),
        });
    }
    let nf = data.schema.n_features();
    let masks = suite
        .masks
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let fm: Vec<bool> = (0..nf).map(|f| data.feature_present(i, f)).collect();
            Ok(m.intersect(&expand_feature_mask(&fm, &data.schema)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MaskSuite { masks, ..suite.clone() })
}
