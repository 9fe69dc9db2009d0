//! Imputation metrics on held-out cells and the benchmark grid runner.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{gen_mcar, gen_mnar_selfmask, with_native_missingness, MaskSuite, Mechanism, MnarParams, ObservationMask};
use crate::model::{EpochRecord, ModelBundle, ModelConfig, TrainConfig, Trainer};
use crate::sampling::{impute_rows, ImputeOptions};
use crate::tabular::{
    apply_standardization, decode_bits, encode_bits, encode_table, infer_and_encode_schema, split_indices, standardize,
    EncodedDataset, FeatureKind, RawTable, Split,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMetric {
    pub feature: String,
    pub categorical: bool,
    pub cells: usize,
    pub rmse: Option<f64>,
    pub mae: Option<f64>,
    pub accuracy: Option<f64>,
}

/// Metrics over the cells that were missing at evaluation time. RMSE/MAE are
/// in standardized units; `None` when there was nothing to score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rmse: Option<f64>,
    pub mae: Option<f64>,
    pub accuracy: Option<f64>,
    pub continuous_cells: usize,
    pub categorical_cells: usize,
    pub per_feature: Vec<FeatureMetric>,
}

/// Scores `imputed` against `truth` on cells that are missing in `masks` and
/// present in the raw data. Both are standardized encoded rows.
pub fn compute_metrics(truth: &EncodedDataset, imputed: &[Vec<f64>], masks: &[ObservationMask]) -> Result<MetricReport> {
    if imputed.len() != truth.n_rows || masks.len() != truth.n_rows {
        return Err(Error::Dimension { expected: truth.n_rows, got: imputed.len().min(masks.len()) });
    }
    let schema = &truth.schema;
    let mut per_feature = Vec::with_capacity(schema.n_features());
    let (mut sq, mut ab, mut nc) = (0.0, 0.0, 0usize);
    let (mut hits, mut nk) = (0usize, 0usize);
    for (f, spec) in schema.specs.iter().enumerate() {
        let r = schema.elements(f);
        let (mut fsq, mut fab, mut fn_, mut fhits) = (0.0, 0.0, 0usize, 0usize);
        for i in 0..truth.n_rows {
            if masks[i].is_observed(r.start) || !truth.feature_present(i, f) {
                continue;
            }
            let t = truth.row(i);
            let p = &imputed[i];
            match &spec.kind {
                FeatureKind::Numeric => {
                    let d = p[r.start] - t[r.start];
                    fsq += d * d;
                    fab += d.abs();
                }
                FeatureKind::Categorical { categories } => {
                    let c = categories.len();
                    if decode_bits(&p[r.clone()], c) == decode_bits(&t[r.clone()], c) {
                        fhits += 1;
                    }
                }
            }
            fn_ += 1;
        }
        let categorical = !spec.is_numeric();
        let metric = if categorical {
            hits += fhits;
            nk += fn_;
            FeatureMetric {
                feature: spec.name.clone(),
                categorical,
                cells: fn_,
                rmse: None,
                mae: None,
                accuracy: (fn_ > 0).then(|| fhits as f64 / fn_ as f64),
            }
        } else {
            sq += fsq;
            ab += fab;
            nc += fn_;
            FeatureMetric {
                feature: spec.name.clone(),
                categorical,
                cells: fn_,
                rmse: (fn_ > 0).then(|| (fsq / fn_ as f64).sqrt()),
                mae: (fn_ > 0).then(|| fab / fn_ as f64),
                accuracy: None,
            }
        };
        per_feature.push(metric);
    }
    Ok(MetricReport {
        rmse: (nc > 0).then(|| (sq / nc as f64).sqrt()),
        mae: (nc > 0).then(|| ab / nc as f64),
        accuracy: (nk > 0).then(|| hits as f64 / nk as f64),
        continuous_cells: nc,
        categorical_cells: nk,
        per_feature,
    })
}

/// Column means (numeric) and modes (categorical) of observed training
/// entries.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanImputer {
    pub fill: Vec<f64>,
}

impl MeanImputer {
    pub fn fit(train: &EncodedDataset, masks: &[ObservationMask]) -> Result<Self> {
        let schema = &train.schema;
        let mut fill = vec![0.0; schema.dim];
        for (f, spec) in schema.specs.iter().enumerate() {
            let r = schema.elements(f);
            let rows = (0..train.n_rows).filter(|&i| masks[i].is_observed(r.start) && train.feature_present(i, f));
            match &spec.kind {
                FeatureKind::Numeric => {
                    let (mut s, mut n) = (0.0, 0usize);
                    for i in rows {
                        s += train.row(i)[r.start];
                        n += 1;
                    }
                    fill[r.start] = if n > 0 { s / n as f64 } else { 0.0 };
                }
                FeatureKind::Categorical { categories } => {
                    let mut counts = vec![0usize; categories.len()];
                    for i in rows {
                        counts[decode_bits(&train.row(i)[r.clone()], categories.len())] += 1;
                    }
                    let mut best = 0;
                    for (c, &n) in counts.iter().enumerate() {
                        if n > counts[best] {
                            best = c;
                        }
                    }
                    fill[r.clone()].copy_from_slice(&encode_bits(best, r.len()));
                }
            }
        }
        Ok(Self { fill })
    }

    pub fn impute(&self, row: &[f64], mask: &ObservationMask) -> Vec<f64> {
        row.iter()
            .zip(&self.fill)
            .enumerate()
            .map(|(j, (&v, &m))| if mask.is_observed(j) { v } else { m })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub dataset: String,
    pub target: String,
    pub mechanisms: Vec<Mechanism>,
    pub rates: Vec<f64>,
    pub seeds: Vec<u64>,
    pub test_rate: f64,
    pub k_test: usize,
    pub split_seed: u64,
    pub hidden: Vec<usize>,
    pub time_dim: usize,
    pub head_hidden: Vec<usize>,
    pub train: TrainConfig,
    pub max_steps: Option<usize>,
    /// Subsample of the training split (all rows when `None`).
    pub max_train_rows: Option<usize>,
    /// Subsample of the test split (all rows when `None`).
    pub max_test_rows: Option<usize>,
    pub mnar: MnarParams,
    pub save_checkpoints: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            dataset: "dataset".into(),
            target: String::new(),
            mechanisms: vec![Mechanism::Mcar, Mechanism::Mnar],
            rates: vec![0.1, 0.3, 0.5],
            seeds: (0..5).collect(),
            test_rate: 0.5,
            k_test: 100,
            split_seed: 0,
            hidden: vec![512, 1024, 512],
            time_dim: 512,
            head_hidden: vec![256, 256],
            train: TrainConfig::default(),
            max_steps: None,
            max_train_rows: None,
            max_test_rows: None,
            mnar: MnarParams::default(),
            save_checkpoints: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchCell {
    pub mechanism: Mechanism,
    pub rate: f64,
    pub seed: u64,
}

impl BenchCell {
    pub fn dir(&self, root: &Path, dataset: &str) -> PathBuf {
        root.join(dataset)
            .join(self.mechanism.to_string())
            .join(format!("{}", self.rate))
            .join(self.seed.to_string())
    }
}

/// The grid in mechanism, rate, seed order.
pub fn plan(cfg: &BenchConfig) -> Vec<BenchCell> {
    let mut cells = Vec::new();
    for &mechanism in &cfg.mechanisms {
        for &rate in &cfg.rates {
            for &seed in &cfg.seeds {
                cells.push(BenchCell { mechanism, rate, seed });
            }
        }
    }
    cells
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub dataset: String,
    pub mechanism: Mechanism,
    pub rate: f64,
    pub seed: u64,
    pub status: String,
    pub model: Option<MetricReport>,
    pub baseline: Option<MetricReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub dataset: String,
    pub mechanism: Mechanism,
    pub rate: f64,
    pub method: String,
    pub runs: usize,
    pub failed: usize,
    pub rmse_mean: Option<f64>,
    pub rmse_std: Option<f64>,
    pub mae_mean: Option<f64>,
    pub mae_std: Option<f64>,
    pub accuracy_mean: Option<f64>,
    pub accuracy_std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub summary: Vec<SummaryRow>,
}

/// Encoded splits shared by every cell.
pub struct PreparedData {
    pub train: EncodedDataset,
    pub test: EncodedDataset,
}

pub fn prepare(raw: &RawTable, cfg: &BenchConfig) -> Result<PreparedData> {
    let (schema, _) = infer_and_encode_schema(raw, &cfg.target)?;
    let (mut tr, mut te) = split_indices(raw.n_rows(), cfg.split_seed);
    if let Some(n) = cfg.max_train_rows {
        tr.truncate(n);
    }
    if let Some(n) = cfg.max_test_rows {
        te.truncate(n);
    }
    let all = encode_table(raw, &schema, Split::Train)?;
    Ok(PreparedData {
        train: all.select(&tr, Split::Train),
        test: all.select(&te, Split::Test),
    })
}

fn gen_masks(data: &EncodedDataset, mechanism: Mechanism, rate: f64, seed: u64, mnar: &MnarParams) -> Result<MaskSuite> {
    let suite = match mechanism {
        Mechanism::Mcar => gen_mcar(data.n_rows, &data.schema, rate, seed)?,
        Mechanism::Mnar => gen_mnar_selfmask(data, rate, seed, mnar)?.0,
    };
    with_native_missingness(&suite, data)
}

/// Metrics of one cell for the model and the mean baseline.
pub struct CellOutcome {
    pub model: MetricReport,
    pub baseline: MetricReport,
    pub log: Vec<EpochRecord>,
}

/// Trains and evaluates one grid cell; writes artifacts under `out` when
/// given.
pub fn run_cell(data: &PreparedData, cfg: &BenchConfig, cell: &BenchCell, out: Option<&Path>) -> Result<CellOutcome> {
    let train_masks = gen_masks(&data.train, cell.mechanism, cell.rate, cell.seed, &cfg.mnar)?;
    let train = standardize(&data.train, &train_masks.masks)?;
    let test = apply_standardization(&data.test, &train.standardization);
    let test_seed = cell.seed ^ 0x7465_7374;
    let test_masks = gen_masks(&data.test, cell.mechanism, cfg.test_rate, test_seed, &cfg.mnar)?;

    let model_cfg = ModelConfig {
        dim: train.dim(),
        hidden: cfg.hidden.clone(),
        time_dim: cfg.time_dim,
        head_hidden: cfg.head_hidden.clone(),
        mode: cell.mechanism,
    };
    let train_cfg = TrainConfig {
        mode: cell.mechanism,
        seed: cell.seed,
        ..cfg.train.clone()
    };
    let mut trainer = Trainer::new(model_cfg, train_cfg.clone())?;
    let rows: Vec<&[f64]> = (0..train.n_rows).map(|i| train.row(i)).collect();
    let mut log_file = match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let p = dir.join("train_log.jsonl");
            Some(fs::File::create(&p).map_err(|e| Error::io(&p, e))?)
        }
        None => None,
    };
    let log = trainer.fit(&rows, &train_masks.masks, |rec| {
        if let Some(f) = log_file.as_mut() {
            let _ = writeln!(f, "{}", serde_json::to_string(rec).unwrap_or_default());
        }
    })?;
    let model = trainer.ema_model();

    let test_rows: Vec<&[f64]> = (0..test.n_rows).map(|i| test.row(i)).collect();
    let opts = ImputeOptions { samples: cfg.k_test, max_steps: cfg.max_steps, seed: cell.seed, estimator: None };
    let results = impute_rows(&model.backbone, &test_rows, &test_masks.masks, model.weighting(), &opts, 8)?;
    let imputed: Vec<Vec<f64>> = results.into_iter().map(|r| r.point_estimate).collect();
    let model_report = compute_metrics(&test, &imputed, &test_masks.masks)?;

    let baseline = MeanImputer::fit(&train, &train_masks.masks)?;
    let base_imputed: Vec<Vec<f64>> = (0..test.n_rows)
        .map(|i| baseline.impute(test.row(i), &test_masks.masks[i]))
        .collect();
    let baseline_report = compute_metrics(&test, &base_imputed, &test_masks.masks)?;

    if let Some(dir) = out {
        let resolved = serde_json::json!({
            "cell": cell,
            "test_mask_seed": test_seed,
            "train": train_cfg,
            "bench": cfg,
            "schema_hash": train.schema.hash(),
        });
        write_json(&dir.join("config.json"), &resolved)?;
        write_json(
            &dir.join("metrics.json"),
            &serde_json::json!({ "model": model_report, "baseline": baseline_report }),
        )?;
        train_masks.save(dir.join("train_masks.txt"))?;
        test_masks.save(dir.join("test_masks.txt"))?;
        if cfg.save_checkpoints {
            ModelBundle::save(&dir.join("model.ckpt"), &model, &trainer.model, &train.schema, &train.standardization)?;
        }
    }
    Ok(CellOutcome { model: model_report, baseline: baseline_report, log })
}

fn write_json(path: &Path, v: &serde_json::Value) -> Result<()> {
    let s = serde_json::to_string_pretty(v)?;
    fs::write(path, s + "\n").map_err(|e| Error::io(path, e))
}

fn mean_std(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    let sd = if values.len() > 1 {
        (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (Some(m), Some(sd))
}

/// Mean and (sample) standard deviation over seeds for every configuration.
pub fn summarize(rows: &[BenchRow]) -> Vec<SummaryRow> {
    let mut keys: Vec<(String, Mechanism, f64)> = Vec::new();
    for r in rows {
        let k = (r.dataset.clone(), r.mechanism, r.rate);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    let mut out = Vec::new();
    for (dataset, mechanism, rate) in keys {
        let group: Vec<&BenchRow> = rows
            .iter()
            .filter(|r| r.dataset == dataset && r.mechanism == mechanism && r.rate == rate)
            .collect();
        for method in ["moarm", "mean"] {
            let reports: Vec<&MetricReport> = group
                .iter()
                .filter_map(|r| if method == "moarm" { r.model.as_ref() } else { r.baseline.as_ref() })
                .collect();
            let pick = |f: fn(&MetricReport) -> Option<f64>| mean_std(&reports.iter().filter_map(|r| f(r)).collect::<Vec<_>>());
            let (rmse_mean, rmse_std) = pick(|r| r.rmse);
            let (mae_mean, mae_std) = pick(|r| r.mae);
            let (accuracy_mean, accuracy_std) = pick(|r| r.accuracy);
            out.push(SummaryRow {
                dataset: dataset.clone(),
                mechanism,
                rate,
                method: method.into(),
                runs: group.len(),
                failed: group.iter().filter(|r| r.status != "ok").count(),
                rmse_mean,
                rmse_std,
                mae_mean,
                mae_std,
                accuracy_mean,
                accuracy_std,
            });
        }
    }
    out
}

/// Runs every cell of the grid. Failed cells are reported with their error
/// rather than dropped.
pub fn run_benchmark(
    raw: &RawTable,
    cfg: &BenchConfig,
    out_root: Option<&Path>,
    mut progress: impl FnMut(&BenchCell, &BenchRow),
) -> Result<BenchReport> {
    let data = prepare(raw, cfg)?;
    let mut rows = Vec::new();
    for cell in plan(cfg) {
        let dir = out_root.map(|r| cell.dir(r, &cfg.dataset));
        let row = match run_cell(&data, cfg, &cell, dir.as_deref()) {
            Ok(o) => BenchRow {
                dataset: cfg.dataset.clone(),
                mechanism: cell.mechanism,
                rate: cell.rate,
                seed: cell.seed,
                status: "ok".into(),
                model: Some(o.model),
                baseline: Some(o.baseline),
            },
            Err(e) => BenchRow {
                dataset: cfg.dataset.clone(),
                mechanism: cell.mechanism,
                rate: cell.rate,
                seed: cell.seed,
                status: format!("failed: {e}"),
                model: None,
                baseline: None,
            },
        };
        progress(&cell, &row);
        rows.push(row);
    }
    let summary = summarize(&rows);
    let report = BenchReport { rows, summary };
    if let Some(root) = out_root {
        let dir = root.join(&cfg.dataset);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        report.write_csv(&dir.join("results.csv"))?;
        write_json(&dir.join("summary.json"), &serde_json::to_value(&report.summary)?)?;
    }
    Ok(report)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

impl BenchReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Table(e.to_string()))?;
        let header = [
            "dataset", "mechanism", "rate", "seed", "status", "rmse", "mae", "accuracy", "mean_rmse", "mean_mae",
            "mean_accuracy",
        ];
        w.write_record(header).map_err(|e| Error::Table(e.to_string()))?;
        for r in &self.rows {
            let m = r.model.as_ref();
            let b = r.baseline.as_ref();
            w.write_record([
                r.dataset.clone(),
                r.mechanism.to_string(),
                format!("{}", r.rate),
                r.seed.to_string(),
                r.status.clone(),
                opt(m.and_then(|x| x.rmse)),
                opt(m.and_then(|x| x.mae)),
                opt(m.and_then(|x| x.accuracy)),
                opt(b.and_then(|x| x.rmse)),
                opt(b.and_then(|x| x.mae)),
                opt(b.and_then(|x| x.accuracy)),
            ])
            .map_err(|e| Error::Table(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tabular::{FeatureSchema, FeatureSpec};

    fn two_numeric() -> FeatureSchema {
        FeatureSchema::new(vec![FeatureSpec::numeric("a", 0, false), FeatureSpec::numeric("b", 1, false)]).unwrap()
    }

    #[test]
    fn rmse_and_mae_example() {
        let truth = EncodedDataset::from_rows(two_numeric(), &[vec![0.0, 2.0]], Split::Test).unwrap();
        let masks = vec![ObservationMask::empty(2)];
        let r = compute_metrics(&truth, &[vec![0.0, 0.0]], &masks).unwrap();
        assert!((r.rmse.unwrap() - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(r.mae, Some(1.0));
        assert_eq!(r.accuracy, None);
    }

    #[test]
    fn observed_cells_do_not_count() {
        let truth = EncodedDataset::from_rows(two_numeric(), &[vec![1.0, 2.0]], Split::Test).unwrap();
        let masks = vec![ObservationMask::from_binary(&[true, false])];
        let a = compute_metrics(&truth, &[vec![1.0, 2.5]], &masks).unwrap();
        let b = compute_metrics(&truth, &[vec![-40.0, 2.5]], &masks).unwrap();
        assert_eq!(a, b);
        let none = compute_metrics(&truth, &[vec![1.0, 2.0]], &[ObservationMask::full(2)]).unwrap();
        assert_eq!(none.rmse, None);
    }

    #[test]
    fn perfect_imputation() {
        let schema = FeatureSchema::new(vec![
            FeatureSpec::numeric("a", 0, false),
            FeatureSpec::categorical("c", vec!["x".into(), "y".into(), "z".into()], 1, false).unwrap(),
        ])
        .unwrap();
        let rows = vec![vec![0.5, 1.0, 0.0], vec![-0.5, 0.0, 1.0]];
        let truth = EncodedDataset::from_rows(schema, &rows, Split::Test).unwrap();
        let masks = vec![ObservationMask::empty(3); 2];
        let r = compute_metrics(&truth, &rows, &masks).unwrap();
        assert_eq!((r.rmse, r.mae, r.accuracy), (Some(0.0), Some(0.0), Some(1.0)));
    }

    #[test]
    fn grid_has_thirty_cells() {
        let cfg = BenchConfig::default();
        assert_eq!(plan(&cfg).len(), 30);
    }

    #[test]
    fn mean_imputer_uses_observed_training_entries() {
        let train = EncodedDataset::from_rows(two_numeric(), &[vec![1.0, 10.0], vec![3.0, 20.0]], Split::Train).unwrap();
        let masks = vec![ObservationMask::full(2), ObservationMask::from_binary(&[true, false])];
        let m = MeanImputer::fit(&train, &masks).unwrap();
        assert_eq!(m.fill, vec![2.0, 10.0]);
        assert_eq!(m.impute(&[7.0, 0.0], &ObservationMask::from_binary(&[true, false])), vec![7.0, 10.0]);
    }
}
