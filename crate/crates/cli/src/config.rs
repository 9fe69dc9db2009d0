//! Resolved run configurations. Each subcommand has one; values come from
//! command-line flags, then an optional TOML file, then the defaults below.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use moarm::mask::Mechanism;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// Merges `overrides` (flags that were actually given) over the table in
/// `file` and deserializes the result. Keys the target type does not know
/// are rejected.
pub fn resolve<C: DeserializeOwned>(file: Option<&Path>, overrides: &impl Serialize) -> Result<C> {
    let mut table = match file {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            text.parse::<toml::Table>().with_context(|| format!("parsing config {}", p.display()))?
        }
        None => toml::Table::new(),
    };
    let flags = toml::Table::try_from(overrides).context("encoding command-line flags")?;
    table.extend(flags);
    let cfg = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| anyhow::anyhow!("invalid configuration: {}", e.message()))?;
    Ok(cfg)
}

/// Writes `cfg` as `config.toml` in `dir`.
pub fn write_resolved(dir: &Path, cfg: &impl Serialize) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join("config.toml");
    let text = toml::to_string(cfg).context("serializing resolved config")?;
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

fn required<'a>(v: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    v.as_deref().with_context(|| format!("missing --{flag} (flag or config key)"))
}

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        bail!("--rate must lie in [0, 1), got {rate}");
    }
    Ok(())
}

fn check_positive(v: usize, flag: &str) -> Result<()> {
    if v == 0 {
        bail!("--{flag} must be positive");
    }
    Ok(())
}

fn check_widths(w: &[usize], flag: &str) -> Result<()> {
    if w.is_empty() || w.contains(&0) {
        bail!("--{flag} needs one or more positive layer widths");
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrepConfig {
    pub data: Option<PathBuf>,
    pub target: Option<String>,
    /// Seed of the train/test split.
    pub seed: u64,
    pub out: PathBuf,
}

impl Default for PrepConfig {
    fn default() -> Self {
        Self { data: None, target: None, seed: 0, out: "prepared".into() }
    }
}

impl PrepConfig {
    pub fn validate(&self) -> Result<()> {
        required(&self.data, "data")?;
        if self.target.as_deref().unwrap_or("").is_empty() {
            bail!("missing --target (flag or config key)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskConfig {
    pub data: Option<PathBuf>,
    pub schema: Option<PathBuf>,
    pub mechanism: Mechanism,
    pub rate: f64,
    pub seed: u64,
    /// Coefficient of the logistic self-masking model.
    pub mnar_weight: f64,
    pub out: PathBuf,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            data: None,
            schema: None,
            mechanism: Mechanism::Mcar,
            rate: 0.3,
            seed: 0,
            mnar_weight: 1.0,
            out: "masks".into(),
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        required(&self.data, "data")?;
        required(&self.schema, "schema")?;
        check_rate(self.rate)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub data: Option<PathBuf>,
    pub schema: Option<PathBuf>,
    pub mechanism: Mechanism,
    pub rate: f64,
    pub seed: u64,
    pub mnar_weight: f64,
    pub epochs: usize,
    pub batch: usize,
    pub widths: Vec<usize>,
    pub time_dim: usize,
    pub head_widths: Vec<usize>,
    pub k_train: usize,
    pub lr: f64,
    pub steps: Option<usize>,
    pub out: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let t = moarm::model::TrainConfig::default();
        Self {
            data: None,
            schema: None,
            mechanism: Mechanism::Mcar,
            rate: 0.3,
            seed: 0,
            mnar_weight: 1.0,
            epochs: t.epochs,
            batch: t.batch_size,
            widths: vec![512, 1024, 512],
            time_dim: 512,
            head_widths: vec![256, 256],
            k_train: t.k_train,
            lr: t.optimizer.lr,
            steps: None,
            out: "run".into(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        required(&self.data, "data")?;
        required(&self.schema, "schema")?;
        check_rate(self.rate)?;
        check_positive(self.epochs, "epochs")?;
        check_positive(self.batch, "batch")?;
        check_positive(self.time_dim, "time-dim")?;
        check_widths(&self.widths, "widths")?;
        if self.mechanism == Mechanism::Mnar {
            check_widths(&self.head_widths, "head-widths")?;
            check_positive(self.k_train, "k-train")?;
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            bail!("learning rate must be positive, got {}", self.lr);
        }
        if self.steps == Some(0) {
            bail!("--steps must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImputeConfig {
    pub data: Option<PathBuf>,
    pub schema: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub mechanism: Mechanism,
    /// Rate of additionally hidden cells, on top of the natively missing
    /// ones. Zero imputes only what the file lacks.
    pub rate: f64,
    pub seed: u64,
    pub mnar_weight: f64,
    pub k_test: usize,
    pub steps: Option<usize>,
    pub out: PathBuf,
}

impl Default for ImputeConfig {
    fn default() -> Self {
        Self {
            data: None,
            schema: None,
            checkpoint: None,
            mechanism: Mechanism::Mcar,
            rate: 0.5,
            seed: 0,
            mnar_weight: 1.0,
            k_test: 100,
            steps: None,
            out: "imputed".into(),
        }
    }
}

impl ImputeConfig {
    pub fn validate(&self) -> Result<()> {
        required(&self.data, "data")?;
        required(&self.schema, "schema")?;
        required(&self.checkpoint, "checkpoint")?;
        check_rate(self.rate)?;
        check_positive(self.k_test, "k-test")?;
        if self.steps == Some(0) {
            bail!("--steps must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AcquireConfig {
    pub data: Option<PathBuf>,
    pub schema: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub seed: u64,
    /// Conditional samples per acquisition step.
    pub k_test: usize,
    pub bins: usize,
    pub steps: Option<usize>,
    /// Only the first `rows` rows of the file (all when unset).
    pub rows: Option<usize>,
    pub weighted_prediction: bool,
    pub out: PathBuf,
}

impl Default for AcquireConfig {
    fn default() -> Self {
        Self {
            data: None,
            schema: None,
            checkpoint: None,
            seed: 0,
            k_test: 100,
            bins: 5,
            steps: None,
            rows: None,
            weighted_prediction: false,
            out: "acquisition".into(),
        }
    }
}

impl AcquireConfig {
    pub fn validate(&self) -> Result<()> {
        required(&self.data, "data")?;
        required(&self.schema, "schema")?;
        required(&self.checkpoint, "checkpoint")?;
        check_positive(self.k_test, "k-test")?;
        check_positive(self.bins, "bins")?;
        if self.steps == Some(0) {
            bail!("--steps must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub data: Option<PathBuf>,
    pub dataset: Option<String>,
    pub target: Option<String>,
    pub mechanisms: Vec<Mechanism>,
    pub rates: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Seed of the train/test split.
    pub seed: u64,
    pub test_rate: f64,
    pub mnar_weight: f64,
    pub epochs: usize,
    pub batch: usize,
    pub widths: Vec<usize>,
    pub time_dim: usize,
    pub head_widths: Vec<usize>,
    pub k_train: usize,
    pub k_test: usize,
    pub lr: f64,
    pub steps: Option<usize>,
    pub max_train_rows: Option<usize>,
    pub max_test_rows: Option<usize>,
    pub save_checkpoints: bool,
    pub dry_run: bool,
    pub out: PathBuf,
}

impl Default for BenchConfig {
    fn default() -> Self {
        let b = moarm::eval::BenchConfig::default();
        Self {
            data: None,
            dataset: None,
            target: None,
            mechanisms: b.mechanisms,
            rates: b.rates,
            seeds: b.seeds,
            seed: b.split_seed,
            test_rate: b.test_rate,
            mnar_weight: b.mnar.weight,
            epochs: b.train.epochs,
            batch: b.train.batch_size,
            widths: b.hidden,
            time_dim: b.time_dim,
            head_widths: b.head_hidden,
            k_train: b.train.k_train,
            k_test: b.k_test,
            lr: b.train.optimizer.lr,
            steps: b.max_steps,
            max_train_rows: None,
            max_test_rows: None,
            save_checkpoints: false,
            dry_run: false,
            out: "bench".into(),
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.dry_run {
            required(&self.data, "data")?;
            if self.target.as_deref().unwrap_or("").is_empty() {
                bail!("missing --target (flag or config key)");
            }
        }
        if self.mechanisms.is_empty() || self.rates.is_empty() || self.seeds.is_empty() {
            bail!("the grid needs at least one mechanism, rate and seed");
        }
        for &r in &self.rates {
            check_rate(r)?;
        }
        check_rate(self.test_rate)?;
        check_positive(self.epochs, "epochs")?;
        check_positive(self.batch, "batch")?;
        check_positive(self.k_test, "k-test")?;
        check_widths(&self.widths, "widths")?;
        Ok(())
    }

    /// Dataset label used for the output directory: the explicit name, else
    /// the data file's stem.
    pub fn dataset_name(&self) -> String {
        self.dataset
            .clone()
            .or_else(|| self.data.as_ref().and_then(|p| p.file_stem()).map(|s| s.to_string_lossy().into_owned()))
            .unwrap_or_else(|| "dataset".into())
    }

    pub fn to_core(&self) -> moarm::eval::BenchConfig {
        let base = moarm::eval::BenchConfig::default();
        let mut train = base.train.clone();
        train.epochs = self.epochs;
        train.batch_size = self.batch;
        train.k_train = self.k_train;
        train.optimizer.lr = self.lr;
        train.max_steps = self.steps;
        moarm::eval::BenchConfig {
            dataset: self.dataset_name(),
            target: self.target.clone().unwrap_or_default(),
            mechanisms: self.mechanisms.clone(),
            rates: self.rates.clone(),
            seeds: self.seeds.clone(),
            test_rate: self.test_rate,
            k_test: self.k_test,
            split_seed: self.seed,
            hidden: self.widths.clone(),
            time_dim: self.time_dim,
            head_hidden: self.head_widths.clone(),
            train,
            max_steps: self.steps,
            max_train_rows: self.max_train_rows,
            max_test_rows: self.max_test_rows,
            mnar: moarm::mask::MnarParams { weight: self.mnar_weight, ..base.mnar },
            save_checkpoints: self.save_checkpoints,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeConfig {
    /// Checkpoint registered at startup as model `m1`.
    pub checkpoint: Option<PathBuf>,
    pub host: String,
    pub port: u16,
    pub seed: u64,
    pub k_test: usize,
    pub bins: usize,
    pub steps: Option<usize>,
    pub weighted_prediction: bool,
    pub idle_ttl_secs: u64,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            checkpoint: None,
            host: "127.0.0.1".into(),
            port: 8080,
            seed: 0,
            k_test: 100,
            bins: 5,
            steps: None,
            weighted_prediction: false,
            idle_ttl_secs: 3600,
        }
    }
}

impl ServeConfig {
    pub fn validate(&self) -> Result<()> {
        check_positive(self.k_test, "k-test")?;
        check_positive(self.bins, "bins")?;
        if self.idle_ttl_secs == 0 {
            bail!("idle_ttl_secs must be positive");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Serialize)]
    struct Flags {
        #[serde(skip_serializing_if = "Option::is_none")]
        rate: Option<f64>,
    }

    fn file(text: &str) -> tempfile::NamedTempFile {
        let f = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(f.path(), text).unwrap();
        f
    }

    #[test]
    fn flag_beats_file_beats_default() {
        let f = file("rate = 0.1\nseed = 7\n");
        let c: MaskConfig = resolve(Some(f.path()), &Flags { rate: Some(0.3) }).unwrap();
        assert_eq!((c.rate, c.seed), (0.3, 7));
        let c: MaskConfig = resolve(Some(f.path()), &Flags { rate: None }).unwrap();
        assert_eq!(c.rate, 0.1);
        let c: MaskConfig = resolve(None, &Flags { rate: None }).unwrap();
        assert_eq!(c, MaskConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let f = file("rate = 0.1\nlearning_rate = 3\n");
        let err = resolve::<MaskConfig>(Some(f.path()), &Flags { rate: None }).unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
    }

    #[test]
    fn rate_outside_unit_interval_fails_validation() {
        let c: MaskConfig = resolve(None, &Flags { rate: Some(1.5) }).unwrap();
        let c = MaskConfig { data: Some("d".into()), schema: Some("s".into()), ..c };
        assert!(c.validate().unwrap_err().to_string().contains("1.5"));
    }

    #[test]
    fn resolved_config_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig { data: Some("train.csv".into()), steps: Some(4), ..Default::default() };
        let path = write_resolved(dir.path(), &cfg).unwrap();
        let back: TrainConfig = resolve(Some(&path), &Flags { rate: None }).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn bench_defaults_give_the_thirty_cell_grid() {
        let cfg = BenchConfig { dry_run: true, ..Default::default() };
        cfg.validate().unwrap();
        assert_eq!(moarm::eval::plan(&cfg.to_core()).len(), 30);
    }
}
