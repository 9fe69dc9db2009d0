//! Session state machine, independent of HTTP.

use std::sync::Arc;
use std::time::Instant;

use axum::http::StatusCode;
use moarm::acquisition::{
    draw_samples, encode_feature, predict_target, rank_candidates, AcquisitionOptions, AcquisitionState, FeatureInput,
    MiEstimate, TargetPrediction,
};
use moarm::model::ModelBundle;
use moarm::tabular::{decode_row, FeatureKind, RawValue};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::ApiError;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeatureInfo {
    pub index: usize,
    pub name: String,
    pub kind: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub categories: Option<Vec<String>>,
    pub target: bool,
}

pub fn feature_table(bundle: &ModelBundle) -> Vec<FeatureInfo> {
    bundle
        .schema
        .specs
        .iter()
        .enumerate()
        .map(|(index, s)| {
            let (kind, categories) = match &s.kind {
                FeatureKind::Numeric => ("numeric", None),
                FeatureKind::Categorical { categories } => ("categorical", Some(categories.clone())),
            };
            FeatureInfo { index, name: s.name.clone(), kind, categories, target: s.is_target }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Suggestion {
    pub feature: usize,
    pub name: String,
    /// Estimated mutual information with the target, in nats.
    pub mi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistoryEntry {
    pub step: usize,
    pub feature: usize,
    pub name: String,
    pub value: RawValue,
    pub prediction: TargetPrediction,
}

/// Body of `POST /sessions/{id}/observations`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationRequest {
    /// Feature name or index.
    pub feature: Value,
    pub value: Value,
}

/// Everything derived from one batch of conditional samples. Valid until the
/// next observation.
struct Batch {
    prediction: TargetPrediction,
    ranking: Option<Vec<MiEstimate>>,
    ranking_samples: Option<Vec<Vec<f64>>>,
}

pub struct Session {
    pub id: String,
    pub model_id: String,
    pub seed: u64,
    pub last_used: Instant,
    bundle: Arc<ModelBundle>,
    opts: AcquisitionOptions,
    state: AcquisitionState,
    history: Vec<HistoryEntry>,
    batch: Batch,
}

fn core_error(e: moarm::Error) -> ApiError {
    ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_value", e.to_string())
}

impl Session {
    /// A session with nothing observed and its prior prediction.
    pub fn new(id: String, model_id: String, bundle: Arc<ModelBundle>, opts: AcquisitionOptions, seed: u64) -> Result<Self, ApiError> {
        if bundle.schema.target_index().is_none() {
            return Err(ApiError::new(
                StatusCode::UNPROCESSABLE_ENTITY,
                "no_target",
                "the model's schema has no target feature",
            ));
        }
        let state = AcquisitionState::empty(&bundle.schema);
        let batch = Self::draw(&bundle, &opts, &state, seed)?;
        Ok(Self {
            id,
            model_id,
            seed,
            last_used: Instant::now(),
            bundle,
            opts,
            state,
            history: Vec::new(),
            batch,
        })
    }

    /// Samples keyed by the number of observations, as in the offline
    /// acquisition loop.
    fn draw(bundle: &ModelBundle, opts: &AcquisitionOptions, state: &AcquisitionState, seed: u64) -> Result<Batch, ApiError> {
        let step = state.n_observed();
        let res = draw_samples(&bundle.model, &bundle.schema, state, opts, seed, step).map_err(|e| ApiError::internal(e.to_string()))?;
        let prediction = predict_target(&bundle.schema, &bundle.standardization, &res).map_err(|e| ApiError::internal(e.to_string()))?;
        let ranking_samples = if opts.weighted_prediction {
            let plain = AcquisitionOptions { weighted_prediction: false, ..*opts };
            draw_samples(&bundle.model, &bundle.schema, state, &plain, seed, step)
                .map_err(|e| ApiError::internal(e.to_string()))?
                .samples
        } else {
            res.samples
        };
        Ok(Batch { prediction, ranking: None, ranking_samples: Some(ranking_samples) })
    }

    pub fn bundle(&self) -> &ModelBundle {
        &self.bundle
    }

    pub fn n_observed(&self) -> usize {
        self.history.len()
    }

    pub fn prediction(&self) -> &TargetPrediction {
        &self.batch.prediction
    }

    pub fn history(&self) -> &[HistoryEntry] {
        &self.history
    }

    /// Candidates ranked by mutual information, computed once per
    /// observation state.
    pub fn suggestions(&mut self, top_n: Option<usize>) -> Result<Vec<Suggestion>, ApiError> {
        let schema = &self.bundle.schema;
        if self.state.candidates(schema).is_empty() {
            return Err(ApiError::new(StatusCode::CONFLICT, "no_candidates", "every non-target feature is observed"));
        }
        if self.batch.ranking.is_none() {
            let samples = self.batch.ranking_samples.take().unwrap_or_default();
            let ranking = rank_candidates(schema, &self.state, &samples, &self.opts.binning).map_err(|e| ApiError::internal(e.to_string()))?;
            self.batch.ranking = Some(ranking);
        }
        let ranking = self.batch.ranking.as_ref().map(|r| r.as_slice()).unwrap_or_default();
        let n = top_n.unwrap_or(ranking.len()).min(ranking.len());
        Ok(ranking[..n]
            .iter()
            .map(|m| Suggestion { feature: m.feature, name: schema.specs[m.feature].name.clone(), mi: m.value })
            .collect())
    }

    fn resolve_feature(&self, feature: &Value) -> Result<usize, ApiError> {
        let schema = &self.bundle.schema;
        let unknown = || ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "unknown_feature", format!("no feature {feature}"));
        let f = match feature {
            Value::String(name) => schema.feature_index(name).ok_or_else(unknown)?,
            Value::Number(n) => {
                let i = n.as_u64().ok_or_else(unknown)? as usize;
                if i >= schema.n_features() {
                    return Err(unknown());
                }
                i
            }
            _ => return Err(ApiError::bad_request("feature must be a name or an index")),
        };
        if schema.specs[f].is_target {
            return Err(ApiError::new(
                StatusCode::UNPROCESSABLE_ENTITY,
                "target_feature",
                format!("{} is the target and cannot be observed", schema.specs[f].name),
            ));
        }
        if self.state.observed[f] {
            return Err(ApiError::new(
                StatusCode::CONFLICT,
                "already_observed",
                format!("{} was already observed", schema.specs[f].name),
            ));
        }
        Ok(f)
    }

    fn parse_value(&self, f: usize, value: &Value) -> Result<FeatureInput, ApiError> {
        let spec = &self.bundle.schema.specs[f];
        let mismatch = |what: &str| {
            ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_value", format!("{} expects {what}, got {value}", spec.name))
        };
        match (&spec.kind, value) {
            (FeatureKind::Numeric, Value::Number(n)) => Ok(FeatureInput::Number(n.as_f64().ok_or_else(|| mismatch("a number"))?)),
            (FeatureKind::Numeric, _) => Err(mismatch("a number")),
            (FeatureKind::Categorical { .. }, Value::String(s)) => Ok(FeatureInput::Label(s.clone())),
            (FeatureKind::Categorical { .. }, Value::Number(n)) => {
                Ok(FeatureInput::Category(n.as_u64().ok_or_else(|| mismatch("a category index or label"))? as usize))
            }
            (FeatureKind::Categorical { .. }, _) => Err(mismatch("a category index or label")),
        }
    }

    /// Records a raw value for an unobserved feature and refreshes the
    /// prediction.
    pub fn observe(&mut self, req: &ObservationRequest) -> Result<&TargetPrediction, ApiError> {
        let f = self.resolve_feature(&req.feature)?;
        let input = self.parse_value(f, &req.value)?;
        let bundle = Arc::clone(&self.bundle);
        let encoded = encode_feature(&bundle.schema, &bundle.standardization, f, &input).map_err(core_error)?;
        let mut next = self.state.clone();
        next.set(&bundle.schema, f, &encoded);
        let batch = Self::draw(&bundle, &self.opts, &next, self.seed)?;
        let decoded = decode_row(&next.values, &bundle.schema, &bundle.standardization).map_err(|e| ApiError::internal(e.to_string()))?;
        self.state = next;
        self.batch = batch;
        self.history.push(HistoryEntry {
            step: self.history.len() + 1,
            feature: f,
            name: bundle.schema.specs[f].name.clone(),
            value: decoded[f].clone(),
            prediction: self.batch.prediction.clone(),
        });
        Ok(&self.batch.prediction)
    }
}
