//! One function per subcommand. Each takes a validated config, writes its
//! artifacts under `out` together with the resolved config, and returns.

use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use moarm::acquisition::{saia_run, AcquisitionOptions, BinningSpec, SaiaTrace};
use moarm::eval::{compute_metrics, plan, run_benchmark};
use moarm::mask::{gen_mcar, gen_mnar_selfmask, with_native_missingness, MaskSuite, Mechanism, MnarParams};
use moarm::model::{ModelBundle, ModelConfig, Trainer};
use moarm::nn::optim::AdamWConfig;
use moarm::rng::Stream;
use moarm::sampling::{impute_rows, write_posterior_std, ImputeOptions};
use moarm::tabular::{
    apply_standardization, decode_row, encode_table, infer_and_encode_schema, load_table, standardize,
    write_decoded_csv, Cell, EncodedDataset, FeatureSchema, RawTable, Split,
};
use serde_json::json;

use crate::config::{
    write_resolved, AcquireConfig, BenchConfig, ImputeConfig, MaskConfig, PrepConfig, ServeConfig, TrainConfig,
};

/// Salt separating per-row acquisition seeds from other uses of `seed`.
const ACQUIRE_ROW: u64 = 0x6163_7172;

fn write_json(path: &Path, v: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(v)? + "\n";
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_table(path: &Path, raw: &RawTable) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(&raw.columns)?;
    for row in &raw.rows {
        w.write_record(row.iter().map(|c| match c {
            Cell::Missing => String::new(),
            Cell::Num(v) => format!("{v}"),
            Cell::Text(t) => t.clone(),
        }))?;
    }
    w.flush().with_context(|| format!("writing {}", path.display()))
}

/// Loads `data` and encodes it under the schema at `schema`.
fn load_encoded(data: &Path, schema: &Path) -> Result<EncodedDataset> {
    let schema = FeatureSchema::load(schema).with_context(|| format!("loading schema {}", schema.display()))?;
    let raw = load_table(data).with_context(|| format!("loading {}", data.display()))?;
    Ok(encode_table(&raw, &schema, Split::Train)?)
}

/// Loads a checkpoint, refusing it unless it was trained on `schema`.
fn load_bundle(path: &Path, schema: &FeatureSchema) -> Result<ModelBundle> {
    let hash = schema.hash();
    ModelBundle::load(path, Some(&hash)).with_context(|| {
        format!("refusing checkpoint {}: it does not match schema {}", path.display(), &hash[..12])
    })
}

fn masks_for(data: &EncodedDataset, mechanism: Mechanism, rate: f64, seed: u64, mnar_weight: f64) -> Result<MaskSuite> {
    let suite = match mechanism {
        Mechanism::Mcar => gen_mcar(data.n_rows, &data.schema, rate, seed)?,
        Mechanism::Mnar => {
            let params = MnarParams { weight: mnar_weight, ..MnarParams::default() };
            gen_mnar_selfmask(data, rate, seed, &params)?.0
        }
    };
    Ok(with_native_missingness(&suite, data)?)
}

pub fn prep(cfg: &PrepConfig) -> Result<()> {
    let data = cfg.data.as_deref().unwrap();
    let target = cfg.target.as_deref().unwrap();
    let raw = load_table(data).with_context(|| format!("loading {}", data.display()))?;
    let (schema, _) = infer_and_encode_schema(&raw, target)?;
    let (train, test) = raw.split(cfg.seed);
    fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    schema.save(cfg.out.join("schema.json"))?;
    write_table(&cfg.out.join("train.csv"), &train)?;
    write_table(&cfg.out.join("test.csv"), &test)?;
    write_resolved(&cfg.out, cfg)?;
    println!(
        "{} features ({} encoded elements), {} train rows, {} test rows, schema {}",
        schema.n_features(),
        schema.dim,
        train.n_rows(),
        test.n_rows(),
        &schema.hash()[..12]
    );
    Ok(())
}

pub fn mask(cfg: &MaskConfig) -> Result<()> {
    let data = load_encoded(cfg.data.as_deref().unwrap(), cfg.schema.as_deref().unwrap())?;
    let suite = masks_for(&data, cfg.mechanism, cfg.rate, cfg.seed, cfg.mnar_weight)?;
    fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    suite.save(cfg.out.join("masks.txt"))?;
    write_resolved(&cfg.out, cfg)?;
    println!(
        "{} masks over {} elements, {:.4} missing (including native gaps)",
        suite.masks.len(),
        suite.dim,
        suite.missing_fraction()
    );
    Ok(())
}

pub fn train(cfg: &TrainConfig) -> Result<()> {
    let data = load_encoded(cfg.data.as_deref().unwrap(), cfg.schema.as_deref().unwrap())?;
    let suite = masks_for(&data, cfg.mechanism, cfg.rate, cfg.seed, cfg.mnar_weight)?;
    let train = standardize(&data, &suite.masks)?;
    let model_cfg = ModelConfig {
        dim: train.dim(),
        hidden: cfg.widths.clone(),
        time_dim: cfg.time_dim,
        head_hidden: cfg.head_widths.clone(),
        mode: cfg.mechanism,
    };
    let train_cfg = moarm::model::TrainConfig {
        epochs: cfg.epochs,
        batch_size: cfg.batch,
        optimizer: AdamWConfig { lr: cfg.lr, ..AdamWConfig::default() },
        k_train: cfg.k_train,
        mode: cfg.mechanism,
        seed: cfg.seed,
        max_steps: cfg.steps,
        ..moarm::model::TrainConfig::default()
    };
    fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    write_resolved(&cfg.out, cfg)?;
    suite.save(cfg.out.join("train_masks.txt"))?;

    let mut trainer = Trainer::new(model_cfg, train_cfg)?;
    let rows: Vec<&[f64]> = (0..train.n_rows).map(|i| train.row(i)).collect();
    let log_path = cfg.out.join("train_log.jsonl");
    let mut log = fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?;
    let mut failed = None;
    trainer.fit(&rows, &suite.masks, |rec| {
        tracing::info!(epoch = rec.epoch, obs = rec.obs_term, miss = rec.miss_term, lr = rec.lr, "epoch");
        if let Err(e) = serde_json::to_writer(&mut log, rec).map_err(std::io::Error::from).and_then(|_| writeln!(log)) {
            failed.get_or_insert(e);
        }
    })?;
    if let Some(e) = failed {
        return Err(e).with_context(|| format!("writing {}", log_path.display()));
    }
    let ckpt = cfg.out.join("model.ckpt");
    ModelBundle::save(&ckpt, &trainer.ema_model(), &trainer.model, &train.schema, &train.standardization)?;
    write_json(
        &cfg.out.join("run.json"),
        &json!({ "schema_hash": train.schema.hash(), "mask_seed": suite.seed, "train_seed": cfg.seed }),
    )?;
    println!("saved {}", ckpt.display());
    Ok(())
}

pub fn impute(cfg: &ImputeConfig) -> Result<()> {
    let data = load_encoded(cfg.data.as_deref().unwrap(), cfg.schema.as_deref().unwrap())?;
    let bundle = load_bundle(cfg.checkpoint.as_deref().unwrap(), &data.schema)?;
    let suite = masks_for(&data, cfg.mechanism, cfg.rate, cfg.seed, cfg.mnar_weight)?;
    let test = apply_standardization(&data, &bundle.standardization);
    let rows: Vec<&[f64]> = (0..test.n_rows).map(|i| test.row(i)).collect();
    let opts = ImputeOptions { samples: cfg.k_test, max_steps: cfg.steps, seed: cfg.seed, estimator: None };
    let results = impute_rows(&bundle.model.backbone, &rows, &suite.masks, bundle.model.weighting(), &opts, 8)?;

    fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    write_resolved(&cfg.out, cfg)?;
    suite.save(cfg.out.join("masks.txt"))?;
    let imputed: Vec<Vec<f64>> = results.iter().map(|r| r.point_estimate.clone()).collect();
    let decoded = imputed
        .iter()
        .map(|r| decode_row(r, &test.schema, &bundle.standardization))
        .collect::<moarm::Result<Vec<_>>>()?;
    write_decoded_csv(cfg.out.join("imputed.csv"), &test.schema, &decoded)?;
    write_posterior_std(&cfg.out.join("posterior_std.csv"), &results, &suite.masks)?;
    let report = compute_metrics(&test, &imputed, &suite.masks)?;
    write_json(
        &cfg.out.join("metrics.json"),
        &json!({ "schema_hash": test.schema.hash(), "metrics": report }),
    )?;
    let show = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
    println!(
        "imputed {} rows; rmse {} mae {} accuracy {}",
        test.n_rows,
        show(report.rmse),
        show(report.mae),
        show(report.accuracy)
    );
    Ok(())
}

pub fn acquire(cfg: &AcquireConfig) -> Result<()> {
    let data = load_encoded(cfg.data.as_deref().unwrap(), cfg.schema.as_deref().unwrap())?;
    let bundle = load_bundle(cfg.checkpoint.as_deref().unwrap(), &data.schema)?;
    let schema = &bundle.schema;
    let target = schema.target_index().context("the schema has no target feature")?;
    let test = apply_standardization(&data, &bundle.standardization);
    let opts = AcquisitionOptions {
        samples: cfg.k_test,
        binning: BinningSpec { bins: cfg.bins },
        max_steps: cfg.steps,
        weighted_prediction: cfg.weighted_prediction,
    };
    let n = cfg.rows.map_or(test.n_rows, |r| r.min(test.n_rows));

    fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    write_resolved(&cfg.out, cfg)?;
    let trace_path = cfg.out.join("traces.jsonl");
    let mut traces = std::io::BufWriter::new(
        fs::File::create(&trace_path).with_context(|| format!("creating {}", trace_path.display()))?,
    );
    // per step: (sum standardized error, sum raw error, rows)
    let mut curve: Vec<(f64, f64, usize)> = Vec::new();
    let mut skipped = 0;
    for i in 0..n {
        if !test.feature_present(i, target) {
            skipped += 1;
            continue;
        }
        let mut truth = test.row(i).to_vec();
        for f in 0..schema.n_features() {
            if !test.feature_present(i, f) {
                truth[schema.elements(f)].fill(f64::NAN);
            }
        }
        let budget = (0..schema.n_features()).filter(|&f| f != target && test.feature_present(i, f)).count();
        let seed = Stream::new(cfg.seed).fork(&[ACQUIRE_ROW, i as u64]).key();
        let trace: SaiaTrace = saia_run(&bundle.model, schema, &bundle.standardization, &truth, budget, &opts, seed)
            .with_context(|| format!("row {i}"))?;
        serde_json::to_writer(&mut traces, &json!({ "row": i, "seed": seed, "steps": trace.steps }))?;
        writeln!(traces)?;
        for s in &trace.steps {
            if curve.len() <= s.step {
                curve.resize(s.step + 1, (0.0, 0.0, 0));
            }
            let c = &mut curve[s.step];
            c.0 += s.error_standardized;
            c.1 += s.error_raw;
            c.2 += 1;
        }
        tracing::debug!(row = i, acquired = ?trace.acquired(), "row done");
    }
    traces.flush()?;
    let mut w = csv::Writer::from_path(cfg.out.join("curve.csv"))?;
    w.write_record(["step", "rows", "mean_error_standardized", "mean_error_raw"])?;
    for (step, (es, er, k)) in curve.iter().enumerate() {
        let k = *k as f64;
        w.write_record([step.to_string(), format!("{}", k), format!("{}", es / k), format!("{}", er / k)])?;
    }
    w.flush()?;
    if let (Some(first), Some(last)) = (curve.first(), curve.last()) {
        println!(
            "{} rows ({} skipped without a target); mean standardized error {:.4} -> {:.4}",
            first.2,
            skipped,
            first.0 / first.2 as f64,
            last.0 / last.2 as f64
        );
    } else {
        bail!("no row with an observed target");
    }
    Ok(())
}

pub fn bench(cfg: &BenchConfig) -> Result<()> {
    let core = cfg.to_core();
    let cells = plan(&core);
    if cfg.dry_run {
        println!("{} cells for dataset '{}':", cells.len(), core.dataset);
        for c in &cells {
            println!("  {} rate {} seed {} -> {}", c.mechanism, c.rate, c.seed, c.dir(&cfg.out, &core.dataset).display());
        }
        return Ok(());
    }
    let data = cfg.data.as_deref().unwrap();
    let raw = load_table(data).with_context(|| format!("loading {}", data.display()))?;
    write_resolved(&cfg.out.join(&core.dataset), cfg)?;
    let total = cells.len();
    let mut done = 0;
    let report = run_benchmark(&raw, &core, Some(&cfg.out), |cell, row| {
        done += 1;
        let rmse = row.model.as_ref().and_then(|m| m.rmse);
        tracing::info!(done, total, mechanism = %cell.mechanism, rate = cell.rate, seed = cell.seed, status = %row.status, ?rmse, "cell");
    })?;
    for s in &report.summary {
        let show = |m: Option<f64>, sd: Option<f64>| match (m, sd) {
            (Some(m), Some(sd)) => format!("{m:.4} +/- {sd:.4}"),
            _ => "n/a".into(),
        };
        println!(
            "{:<5} {:<4} {:<6} rmse {:<18} mae {:<18} acc {:<18} ({} failed)",
            s.mechanism.to_string(),
            s.rate,
            s.method,
            show(s.rmse_mean, s.rmse_std),
            show(s.mae_mean, s.mae_std),
            show(s.accuracy_mean, s.accuracy_std),
            s.failed
        );
    }
    let failed = report.rows.iter().filter(|r| r.status != "ok").count();
    if failed > 0 {
        bail!("{failed} of {total} cells failed; see results.csv");
    }
    Ok(())
}

pub fn serve(cfg: &ServeConfig) -> Result<()> {
    use moarm_service::{AppState, ServiceConfig};
    let service = ServiceConfig {
        acquisition: AcquisitionOptions {
            samples: cfg.k_test,
            binning: BinningSpec { bins: cfg.bins },
            max_steps: cfg.steps,
            weighted_prediction: cfg.weighted_prediction,
        },
        seed: cfg.seed,
        idle_ttl: std::time::Duration::from_secs(cfg.idle_ttl_secs),
    };
    let state = AppState::new(service);
    if let Some(path) = &cfg.checkpoint {
        let bundle = ModelBundle::load(path, None).with_context(|| format!("loading {}", path.display()))?;
        let id = state.add_model(bundle);
        tracing::info!(model = %id, path = %path.display(), "preloaded checkpoint");
    }
    let runtime = tokio::runtime::Runtime::new().context("starting the async runtime")?;
    runtime.block_on(async {
        let addr = format!("{}:{}", cfg.host, cfg.port);
        let listener = tokio::net::TcpListener::bind(&addr).await.with_context(|| format!("binding {addr}"))?;
        tracing::info!(addr = %listener.local_addr()?, "listening");
        println!("listening on http://{}", listener.local_addr()?);
        moarm_service::serve(listener, state).await.context("server failed")
    })
}
