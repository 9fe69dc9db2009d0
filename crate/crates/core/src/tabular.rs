//! Raw tables, feature schemas and the encoded real-valued representation.
//!
//! Numeric features occupy one encoded dimension each. A categorical feature
//! with `C` categories occupies `ceil(log2 C)` dimensions holding the
//! big-endian bits of its category index. Encoded layout is the numeric block
//! followed by the categorical block, with the target feature moved to the
//! end of whichever block its kind belongs to.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mask::ObservationMask;
use crate::rng::Stream;

/// Floor applied to every standard deviation.
pub const STD_FLOOR: f64 = 1e-6;

/// Fraction of rows assigned to the training split.
/// Training share of each split, as a fraction `numerator / 10`.
pub const TRAIN_TENTHS: usize = 7;

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Missing,
    Num(f64),
    Text(String),
}

impl Cell {
    fn as_text(&self) -> Option<String> {
        match self {
            Cell::Missing => None,
            Cell::Num(v) => Some(format_number(*v)),
            Cell::Text(s) => Some(s.clone()),
        }
    }
}

fn format_number(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Numeric,
    Categorical,
}

/// A delimited-text table with per-column kinds.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTable {
    pub columns: Vec<String>,
    pub kinds: Vec<ColumnKind>,
    pub rows: Vec<Vec<Cell>>,
}

impl RawTable {
    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    /// Rows selected by `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> RawTable {
        RawTable {
            columns: self.columns.clone(),
            kinds: self.kinds.clone(),
            rows: indices.iter().map(|&i| self.rows[i].clone()).collect(),
        }
    }

    /// Shuffled train/test split with `floor(0.7 N)` training rows.
    pub fn split(&self, seed: u64) -> (RawTable, RawTable) {
        let (train, test) = split_indices(self.n_rows(), seed);
        (self.subset(&train), self.subset(&test))
    }
}

/// Shuffled train/test row indices with `floor(0.7 N)` training rows.
pub fn split_indices(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut stream = Stream::new(seed).fork(&[0x5911]);
    let all: Vec<usize> = (0..n).collect();
    let perm = stream.choose_subset(&all, n);
    let n_train = n * TRAIN_TENTHS / 10;
    (perm[..n_train].to_vec(), perm[n_train..].to_vec())
}

/// Parse a comma-separated file with a header row.
///
/// A column is numeric when every non-empty cell parses as a number and at
/// least one cell is non-empty; all other columns are categorical. Empty
/// cells become [`Cell::Missing`].
pub fn load_table(path: impl AsRef<Path>) -> Result<RawTable> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_table(file)
}

pub fn read_table<R: std::io::Read>(reader: R) -> Result<RawTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let columns: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Table(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if columns.is_empty() || columns.iter().all(String::is_empty) {
        return Err(Error::Table("empty file".into()));
    }
    let mut text_rows: Vec<Vec<String>> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Table(e.to_string()))?;
        text_rows.push(rec.iter().map(str::to_string).collect());
    }
    if text_rows.is_empty() {
        return Err(Error::Table("no data rows".into()));
    }
    let kinds: Vec<ColumnKind> = (0..columns.len())
        .map(|c| {
            let mut any = false;
            let numeric = text_rows.iter().all(|r| {
                let v = &r[c];
                if v.is_empty() {
                    true
                } else {
                    any = true;
                    v.parse::<f64>().is_ok()
                }
            });
            if numeric && any {
                ColumnKind::Numeric
            } else {
                ColumnKind::Categorical
            }
        })
        .collect();
    let rows = text_rows
        .into_iter()
        .map(|r| {
            r.into_iter()
                .zip(&kinds)
                .map(|(v, k)| match (v.is_empty(), k) {
                    (true, _) => Cell::Missing,
                    (false, ColumnKind::Numeric) => Cell::Num(v.parse().unwrap()),
                    (false, ColumnKind::Categorical) => Cell::Text(v),
                })
                .collect()
        })
        .collect();
    Ok(RawTable {
        columns,
        kinds,
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FeatureKind {
    Numeric,
    Categorical { categories: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: FeatureKind,
    pub is_target: bool,
    pub bit_width: usize,
    /// Column position in the raw table this feature was read from.
    pub source_column: usize,
}

impl FeatureSpec {
    pub fn numeric(name: &str, source_column: usize, is_target: bool) -> Self {
        Self {
            name: name.to_string(),
            kind: FeatureKind::Numeric,
            is_target,
            bit_width: 1,
            source_column,
        }
    }

    pub fn categorical(
        name: &str,
        categories: Vec<String>,
        source_column: usize,
        is_target: bool,
    ) -> Result<Self> {
        if categories.len() < 2 {
            return Err(Error::Schema(format!(
                "categorical feature '{name}' has {} distinct value(s); at least 2 required",
                categories.len()
            )));
        }
        Ok(Self {
            name: name.to_string(),
            bit_width: bits_for(categories.len()),
            kind: FeatureKind::Categorical { categories },
            is_target,
            source_column,
        })
    }

    pub fn cardinality(&self) -> Option<usize> {
        match &self.kind {
            FeatureKind::Numeric => None,
            FeatureKind::Categorical { categories } => Some(categories.len()),
        }
    }

    pub fn is_numeric(&self) -> bool {
        matches!(self.kind, FeatureKind::Numeric)
    }
}

/// `ceil(log2 c)` for `c >= 2`.
pub fn bits_for(c: usize) -> usize {
    assert!(c >= 2);
    (usize::BITS - (c - 1).leading_zeros()) as usize
}

/// Big-endian bits of `value` in `width` positions.
pub fn encode_bits(value: usize, width: usize) -> Vec<f64> {
    (0..width)
        .map(|b| ((value >> (width - 1 - b)) & 1) as f64)
        .collect()
}

/// Round each entry to {0, 1}, read big-endian, clamp to `c - 1`.
pub fn decode_bits(bits: &[f64], c: usize) -> usize {
    let code = bits
        .iter()
        .fold(0usize, |acc, &b| (acc << 1) | usize::from(b >= 0.5));
    code.min(c - 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub specs: Vec<FeatureSpec>,
    pub element_offsets: Vec<usize>,
    pub dim: usize,
}

impl FeatureSchema {
    /// Reorders `specs` into the encoded layout and computes offsets.
    pub fn new(specs: Vec<FeatureSpec>) -> Result<Self> {
        let targets = specs.iter().filter(|s| s.is_target).count();
        if targets > 1 {
            return Err(Error::Schema(format!("{targets} target features; at most 1 allowed")));
        }
        let mut ordered: Vec<FeatureSpec> = Vec::with_capacity(specs.len());
        let group = |numeric: bool, target: bool| {
            specs
                .iter()
                .filter(move |s| s.is_numeric() == numeric && s.is_target == target)
                .cloned()
        };
        ordered.extend(group(true, false));
        ordered.extend(group(true, true));
        ordered.extend(group(false, false));
        ordered.extend(group(false, true));
        let mut element_offsets = Vec::with_capacity(ordered.len());
        let mut dim = 0;
        for s in &ordered {
            let expected = match s.cardinality() {
                None => 1,
                Some(c) => bits_for(c),
            };
            if s.bit_width != expected {
                return Err(Error::Schema(format!(
                    "feature '{}' has bit_width {} but requires {expected}",
                    s.name, s.bit_width
                )));
            }
            element_offsets.push(dim);
            dim += s.bit_width;
        }
        Ok(Self {
            specs: ordered,
            element_offsets,
            dim,
        })
    }

    pub fn n_features(&self) -> usize {
        self.specs.len()
    }

    pub fn target_index(&self) -> Option<usize> {
        self.specs.iter().position(|s| s.is_target)
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.specs.iter().position(|s| s.name == name)
    }

    /// Encoded element range of feature `f`.
    pub fn elements(&self, f: usize) -> std::ops::Range<usize> {
        let o = self.element_offsets[f];
        o..o + self.specs[f].bit_width
    }

    /// Owning feature of every encoded element.
    pub fn element_owner(&self) -> Vec<usize> {
        let mut owner = vec![0; self.dim];
        for f in 0..self.n_features() {
            for j in self.elements(f) {
                owner[j] = f;
            }
        }
        owner
    }

    /// True for encoded dimensions that hold a numeric feature.
    pub fn numeric_elements(&self) -> Vec<bool> {
        let mut out = vec![false; self.dim];
        for (f, s) in self.specs.iter().enumerate() {
            if s.is_numeric() {
                out[self.element_offsets[f]] = true;
            }
        }
        out
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("schema serializes");
        let digest = Sha256::digest(&json);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let raw: FeatureSchema = serde_json::from_str(&text)?;
        let rebuilt = FeatureSchema::new(raw.specs.clone())?;
        if rebuilt != raw {
            return Err(Error::Schema(format!(
                "{} is not in canonical layout (offsets or order disagree)",
                path.display()
            )));
        }
        Ok(rebuilt)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub mean: f64,
    pub std: f64,
}

/// Per-element z-score statistics; `None` for bit dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub stats: Vec<Option<ColumnStats>>,
}

impl Standardization {
    pub fn identity(schema: &FeatureSchema) -> Self {
        let stats = schema
            .numeric_elements()
            .into_iter()
            .map(|n| n.then_some(ColumnStats { mean: 0.0, std: 1.0 }))
            .collect();
        Self { stats }
    }

    pub fn forward(&self, j: usize, v: f64) -> f64 {
        match self.stats[j] {
            Some(s) => (v - s.mean) / s.std,
            None => v,
        }
    }

    pub fn inverse(&self, j: usize, v: f64) -> f64 {
        match self.stats[j] {
            Some(s) => v * s.std + s.mean,
            None => v,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Row-major `N x L` encoded values plus the schema that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedDataset {
    pub values: Vec<f64>,
    pub n_rows: usize,
    pub schema: FeatureSchema,
    pub standardization: Standardization,
    pub split: Split,
    /// Row-major `N x F` flags; false where the raw cell was empty.
    pub present: Vec<bool>,
}

impl EncodedDataset {
    pub fn dim(&self) -> usize {
        self.schema.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let l = self.dim();
        &self.values[i * l..(i + 1) * l]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let l = self.dim();
        &mut self.values[i * l..(i + 1) * l]
    }

    pub fn feature_present(&self, i: usize, f: usize) -> bool {
        self.present[i * self.schema.n_features() + f]
    }

    /// Scalar value of feature `f` in row `i`: the numeric value, or the
    /// decoded category index for categoricals.
    pub fn feature_value(&self, i: usize, f: usize) -> f64 {
        let row = self.row(i);
        let spec = &self.schema.specs[f];
        let r = self.schema.elements(f);
        match spec.cardinality() {
            None => row[r.start],
            Some(c) => decode_bits(&row[r], c) as f64,
        }
    }

    /// The given rows, relabelled as `split`.
    pub fn select(&self, rows: &[usize], split: Split) -> EncodedDataset {
        let l = self.dim();
        let nf = self.schema.n_features();
        let mut values = Vec::with_capacity(rows.len() * l);
        let mut present = Vec::with_capacity(rows.len() * nf);
        for &i in rows {
            values.extend_from_slice(self.row(i));
            present.extend_from_slice(&self.present[i * nf..(i + 1) * nf]);
        }
        EncodedDataset {
            values,
            n_rows: rows.len(),
            schema: self.schema.clone(),
            standardization: self.standardization.clone(),
            split,
            present,
        }
    }

    /// Build a dataset directly from encoded rows (all cells present).
    pub fn from_rows(schema: FeatureSchema, rows: &[Vec<f64>], split: Split) -> Result<Self> {
        let l = schema.dim;
        let mut values = Vec::with_capacity(rows.len() * l);
        for r in rows {
            if r.len() != l {
                return Err(Error::Dimension {
                    expected: l,
                    got: r.len(),
                });
            }
            values.extend_from_slice(r);
        }
        let present = vec![true; rows.len() * schema.n_features()];
        Ok(Self {
            values,
            n_rows: rows.len(),
            standardization: Standardization::identity(&schema),
            schema,
            split,
            present,
        })
    }
}

/// Infer a schema from `raw` with `target_name` as the target feature and
/// encode every row.
pub fn infer_and_encode_schema(
    raw: &RawTable,
    target_name: &str,
) -> Result<(FeatureSchema, EncodedDataset)> {
    let target_col = raw
        .column_index(target_name)
        .ok_or_else(|| Error::Schema(format!("unknown target column '{target_name}'")))?;
    let mut specs = Vec::with_capacity(raw.columns.len());
    for (c, name) in raw.columns.iter().enumerate() {
        let is_target = c == target_col;
        let spec = match raw.kinds[c] {
            ColumnKind::Numeric => FeatureSpec::numeric(name, c, is_target),
            ColumnKind::Categorical => {
                let cats: BTreeSet<String> =
                    raw.rows.iter().filter_map(|r| r[c].as_text()).collect();
                FeatureSpec::categorical(name, cats.into_iter().collect(), c, is_target)?
            }
        };
        specs.push(spec);
    }
    let schema = FeatureSchema::new(specs)?;
    let data = encode_table(raw, &schema, Split::Train)?;
    Ok((schema, data))
}

/// Encode `raw` under an existing schema. Unknown categories are rejected.
pub fn encode_table(raw: &RawTable, schema: &FeatureSchema, split: Split) -> Result<EncodedDataset> {
    let l = schema.dim;
    let nf = schema.n_features();
    let mut values = vec![0.0; raw.n_rows() * l];
    let mut present = vec![true; raw.n_rows() * nf];
    for (f, spec) in schema.specs.iter().enumerate() {
        let c = raw.column_index(&spec.name).ok_or_else(|| {
            Error::Schema(format!("column '{}' missing from table", spec.name))
        })?;
        let off = schema.element_offsets[f];
        for (i, row) in raw.rows.iter().enumerate() {
            let cell = &row[c];
            if *cell == Cell::Missing {
                present[i * nf + f] = false;
                continue;
            }
            match &spec.kind {
                FeatureKind::Numeric => {
                    let v = match cell {
                        Cell::Num(v) => *v,
                        Cell::Text(t) => t.parse::<f64>().map_err(|_| {
                            Error::Table(format!("row {i}: '{t}' in numeric column '{}'", spec.name))
                        })?,
                        Cell::Missing => unreachable!(),
                    };
                    if !v.is_finite() {
                        return Err(Error::NonFinite(format!(
                            "row {i}, column '{}': {v}",
                            spec.name
                        )));
                    }
                    values[i * l + off] = v;
                }
                FeatureKind::Categorical { categories } => {
                    let text = cell.as_text().unwrap();
                    let idx = categories.iter().position(|k| *k == text).ok_or_else(|| {
                        Error::Schema(format!(
                            "row {i}: category '{text}' not in schema for '{}'",
                            spec.name
                        ))
                    })?;
                    for (b, bit) in encode_bits(idx, spec.bit_width).into_iter().enumerate() {
                        values[i * l + off + b] = bit;
                    }
                }
            }
        }
    }
    Ok(EncodedDataset {
        values,
        n_rows: raw.n_rows(),
        standardization: Standardization::identity(schema),
        schema: schema.clone(),
        split,
        present,
    })
}

/// Fit z-score statistics on observed training entries and apply them.
///
/// An entry counts as observed when its mask bit is set and the raw cell
/// was present. Population standard deviation, floored at [`STD_FLOOR`].
pub fn standardize(dataset: &EncodedDataset, masks: &[ObservationMask]) -> Result<EncodedDataset> {
    if dataset.split != Split::Train {
        return Err(Error::invalid("standardization must be fit on the training split"));
    }
    if masks.len() != dataset.n_rows {
        return Err(Error::Dimension {
            expected: dataset.n_rows,
            got: masks.len(),
        });
    }
    let l = dataset.dim();
    let owner = dataset.schema.element_owner();
    let numeric = dataset.schema.numeric_elements();
    let mut stats = vec![None; l];
    for j in (0..l).filter(|&j| numeric[j]) {
        let f = owner[j];
        let observed: Vec<f64> = (0..dataset.n_rows)
            .filter(|&i| masks[i].is_observed(j) && dataset.feature_present(i, f))
            .map(|i| dataset.row(i)[j])
            .collect();
        if observed.is_empty() {
            return Err(Error::invalid(format!(
                "numeric column '{}' has no observed training entries",
                dataset.schema.specs[f].name
            )));
        }
        let n = observed.len() as f64;
        let mean = observed.iter().sum::<f64>() / n;
        let var = observed.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        stats[j] = Some(ColumnStats {
            mean,
            std: var.sqrt().max(STD_FLOOR),
        });
    }
    Ok(apply_standardization(dataset, &Standardization { stats }))
}

/// Apply previously fitted statistics (e.g. training stats to a test split).
/// `dataset` must hold raw-scale values.
pub fn apply_standardization(dataset: &EncodedDataset, stz: &Standardization) -> EncodedDataset {
    let mut out = dataset.clone();
    let l = dataset.dim();
    for i in 0..dataset.n_rows {
        let row = &mut out.values[i * l..(i + 1) * l];
        for (j, v) in row.iter_mut().enumerate() {
            *v = stz.forward(j, *v);
        }
    }
    out.standardization = stz.clone();
    out
}

/// A decoded, user-facing feature value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RawValue {
    Num(f64),
    Category { index: usize, label: String },
}

impl fmt::Display for RawValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RawValue::Num(v) => write!(f, "{v}"),
            RawValue::Category { label, .. } => write!(f, "{label}"),
        }
    }
}

/// Inverse-standardize numerics and decode categorical bit blocks, in schema
/// feature order.
pub fn decode_row(row: &[f64], schema: &FeatureSchema, stz: &Standardization) -> Result<Vec<RawValue>> {
    if row.len() != schema.dim {
        return Err(Error::Dimension {
            expected: schema.dim,
            got: row.len(),
        });
    }
    Ok(schema
        .specs
        .iter()
        .enumerate()
        .map(|(f, spec)| {
            let r = schema.elements(f);
            match &spec.kind {
                FeatureKind::Numeric => RawValue::Num(stz.inverse(r.start, row[r.start])),
                FeatureKind::Categorical { categories } => {
                    let index = decode_bits(&row[r], categories.len());
                    RawValue::Category {
                        index,
                        label: categories[index].clone(),
                    }
                }
            }
        })
        .collect())
}

/// Write decoded rows as comma-separated text in schema feature order.
pub fn write_decoded_csv(
    path: impl AsRef<Path>,
    schema: &FeatureSchema,
    rows: &[Vec<RawValue>],
) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Table(e.to_string()))?;
    w.write_record(schema.specs.iter().map(|s| s.name.as_str()))
        .map_err(|e| Error::Table(e.to_string()))?;
    for r in rows {
        w.write_record(r.iter().map(|v| v.to_string()))
            .map_err(|e| Error::Table(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numeric_names(n: usize) -> Vec<FeatureSpec> {
        (0..n)
            .map(|i| FeatureSpec::numeric(&format!("x{i}"), i, false))
            .collect()
    }

    fn cats(c: usize) -> Vec<String> {
        (0..c).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn magic_dimension() {
        let mut specs = numeric_names(10);
        specs.push(FeatureSpec::numeric("class", 10, true));
        assert_eq!(FeatureSchema::new(specs).unwrap().dim, 11);
    }

    #[test]
    fn adult_dimension() {
        let mut specs = numeric_names(6);
        for (k, c) in [9, 16, 7, 15, 6, 5, 2, 42].into_iter().enumerate() {
            specs.push(FeatureSpec::categorical(&format!("cat{k}"), cats(c), 6 + k, false).unwrap());
        }
        specs.push(FeatureSpec::categorical("income", cats(2), 14, true).unwrap());
        assert_eq!(FeatureSchema::new(specs).unwrap().dim, 35);
    }

    #[test]
    fn big_endian_bits() {
        assert_eq!(encode_bits(2, 2), vec![1.0, 0.0]);
        assert_eq!(encode_bits(5, 3), vec![1.0, 0.0, 1.0]);
        assert_eq!(decode_bits(&[0.9, 0.1], 4), 2);
        assert_eq!(decode_bits(&[1.0, 1.0], 3), 2);
        assert_eq!(bits_for(2), 1);
        assert_eq!(bits_for(3), 2);
        assert_eq!(bits_for(4), 2);
        assert_eq!(bits_for(5), 3);
        assert_eq!(bits_for(42), 6);
    }

    #[test]
    fn target_moves_to_end_of_its_block() {
        let specs = vec![
            FeatureSpec::categorical("a", cats(3), 0, false).unwrap(),
            FeatureSpec::numeric("y", 1, true),
            FeatureSpec::numeric("b", 2, false),
            FeatureSpec::categorical("c", cats(2), 3, false).unwrap(),
        ];
        let s = FeatureSchema::new(specs).unwrap();
        let names: Vec<&str> = s.specs.iter().map(|s| s.name.as_str()).collect();
        assert_eq!(names, ["b", "y", "a", "c"]);
        assert_eq!(s.element_offsets, vec![0, 1, 2, 4]);
        assert_eq!(s.dim, 5);
    }

    #[test]
    fn load_and_infer() {
        let text = "a,b,y\n1.5,x,0\n2.0,y,1\n,x,1\n";
        let t = read_table(text.as_bytes()).unwrap();
        assert_eq!(t.n_rows(), 3);
        assert_eq!(t.kinds, vec![ColumnKind::Numeric, ColumnKind::Categorical, ColumnKind::Numeric]);
        assert_eq!(t.rows[2][0], Cell::Missing);
        let (schema, data) = infer_and_encode_schema(&t, "b").unwrap();
        assert_eq!(schema.specs[2].cardinality(), Some(2));
        assert!(schema.specs[2].is_target);
        assert!(!data.feature_present(2, 0));
    }

    #[test]
    fn load_errors() {
        assert!(read_table("".as_bytes()).is_err());
        assert!(read_table("a,b\n".as_bytes()).is_err());
        assert!(read_table("a,b\n1,2\n3\n".as_bytes()).is_err());
        let t = read_table("a,b\n1,q\n2,q\n".as_bytes()).unwrap();
        assert!(matches!(infer_and_encode_schema(&t, "a"), Err(Error::Schema(_))));
        assert!(matches!(infer_and_encode_schema(&t, "zz"), Err(Error::Schema(_))));
        let t = read_table("a,b\n1,q\ninf,r\n".as_bytes()).unwrap();
        assert!(matches!(infer_and_encode_schema(&t, "b"), Err(Error::NonFinite(_))));
    }

    fn one_column(vals: &[f64]) -> EncodedDataset {
        let schema = FeatureSchema::new(numeric_names(1)).unwrap();
        let rows: Vec<Vec<f64>> = vals.iter().map(|v| vec![*v]).collect();
        EncodedDataset::from_rows(schema, &rows, Split::Train).unwrap()
    }

    #[test]
    fn standardize_examples() {
        let d = one_column(&[1.0, 2.0, 3.0]);
        let masks = vec![ObservationMask::full(1); 3];
        let s = standardize(&d, &masks).unwrap();
        let st = s.standardization.stats[0].unwrap();
        assert!((st.mean - 2.0).abs() < 1e-12);
        assert!((st.std - 0.816_496_580_927_726).abs() < 1e-12);
        let expect = [-1.224_744_871_391_589, 0.0, 1.224_744_871_391_589];
        for (i, e) in expect.iter().enumerate() {
            assert!((s.row(i)[0] - e).abs() < 1e-12);
        }
        let back = decode_row(&[1.224_744_871_391_589], &s.schema, &s.standardization).unwrap();
        assert!(matches!(back[0], RawValue::Num(v) if (v - 3.0).abs() < 1e-12));

        let d = one_column(&[-1.0, 1.0, -1.0, 1.0]);
        let s = standardize(&d, &vec![ObservationMask::full(1); 4]).unwrap();
        for i in 0..4 {
            assert!((s.row(i)[0] - d.row(i)[0]).abs() < 1e-12);
        }

        let d = one_column(&[5.0, 5.0, 5.0]);
        let s = standardize(&d, &vec![ObservationMask::full(1); 3]).unwrap();
        assert_eq!(s.standardization.stats[0].unwrap().std, STD_FLOOR);
        assert!((0..3).all(|i| s.row(i)[0] == 0.0));
    }

    #[test]
    fn standardize_uses_observed_only() {
        let d = one_column(&[1.0, 2.0, 3.0, 1000.0]);
        let mut masks = vec![ObservationMask::full(1); 4];
        masks[3] = ObservationMask::from_binary(&[false]);
        let s = standardize(&d, &masks).unwrap();
        assert!((s.standardization.stats[0].unwrap().mean - 2.0).abs() < 1e-12);
        let none = vec![ObservationMask::from_binary(&[false]); 4];
        assert!(standardize(&d, &none).is_err());
    }

    #[test]
    fn schema_sidecar_roundtrip() {
        let specs = vec![
            FeatureSpec::numeric("a", 0, false),
            FeatureSpec::categorical("b", cats(5), 1, true).unwrap(),
        ];
        let s = FeatureSchema::new(specs).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("schema.json");
        s.save(&p).unwrap();
        let back = FeatureSchema::load(&p).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.hash(), s.hash());
    }

    #[test]
    fn split_sizes() {
        let (tr, te) = split_indices(20_640, 0);
        assert_eq!(tr.len(), 14_448);
        assert_eq!(te.len(), 6_192);
        let (tr, _) = split_indices(19_020, 0);
        assert_eq!(tr.len(), 13_314);
    }
}
