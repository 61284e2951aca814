//! Request and response bodies plus handlers. Request bodies reject unknown
//! fields so drift on the trainer or UI side shows up as a 400.

use std::time::Instant;

use axum::extract::{Query, State};
use axum::Json;
use deepinsight_core::audit::{AuditError, AuditSample, CalibrationReport, HumanScores};
use deepinsight_core::judge::{aggregate, judge_proof, AggregatedVerdict};
use deepinsight_core::reward::{score_rollout_group, ScoredResponse};
use futures::future::join_all;
use serde::{Deserialize, Serialize};

use crate::error::{ApiError, StrictJson};
use crate::AppState;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardRequest {
    pub question: String,
    pub responses: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question_id: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RewardResponse {
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    /// One entry per response, in order; failed verifications carry
    /// `failure` and score 0.
    pub breakdowns: Vec<ScoredResponse>,
}

pub async fn reward_group(
    State(state): State<AppState>,
    StrictJson(body): StrictJson<RewardRequest>,
) -> Result<Json<RewardResponse>, ApiError> {
    let n = body.responses.len();
    if n == 0 {
        return Err(ApiError::BadRequest("responses must not be empty".into()));
    }
    if n > state.config.group_size {
        return Err(ApiError::BadRequest(format!(
            "{n} responses exceed the group limit of {}",
            state.config.group_size
        )));
    }
    let qid = body.question_id.as_deref().unwrap_or("request");
    let scored = score_rollout_group(
        qid,
        &body.question,
        &body.responses,
        &state.gateway,
        &state.prompts,
        &state.config.verifier,
    )
    .await;
    if scored.all_unreachable() {
        return Err(ApiError::Unavailable(
            "verifier unreachable after retries".into(),
        ));
    }
    Ok(Json(RewardResponse {
        rewards: scored.group.rewards,
        advantages: scored.group.advantages,
        breakdowns: scored.responses,
    }))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JudgeRequest {
    pub question: String,
    pub proof: String,
    pub judges: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeFailure {
    pub judge_id: String,
    pub error: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JudgeResponse {
    #[serde(flatten)]
    pub aggregate: AggregatedVerdict,
    /// Some judges failed; the means cover the successful ones only.
    pub partial: bool,
    pub failures: Vec<JudgeFailure>,
}

pub async fn judge(
    State(state): State<AppState>,
    StrictJson(body): StrictJson<JudgeRequest>,
) -> Result<Json<JudgeResponse>, ApiError> {
    if body.judges.is_empty() {
        return Err(ApiError::BadRequest(
            "at least one judge is required".into(),
        ));
    }
    if body.proof.trim().is_empty() {
        return Err(ApiError::BadRequest("proof is empty".into()));
    }
    let calls = body.judges.iter().map(|model| {
        judge_proof(
            &body.question,
            &body.proof,
            model,
            &state.gateway,
            &state.prompts,
            &state.config.judge,
        )
    });
    let mut verdicts = Vec::new();
    let mut failures = Vec::new();
    for (model, result) in body.judges.iter().zip(join_all(calls).await) {
        match result {
            Ok(v) => verdicts.push(v),
            Err(e) => failures.push(JudgeFailure {
                judge_id: model.clone(),
                error: e.to_string(),
            }),
        }
    }
    if verdicts.is_empty() {
        let detail: Vec<String> = failures
            .iter()
            .map(|f| format!("{}: {}", f.judge_id, f.error))
            .collect();
        return Err(ApiError::BadGateway(format!(
            "all judges failed ({})",
            detail.join("; ")
        )));
    }
    let aggregate = aggregate(verdicts).map_err(|e| ApiError::Internal(e.to_string()))?;
    Ok(Json(JudgeResponse {
        aggregate,
        partial: !failures.is_empty(),
        failures,
    }))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NextQuery {
    pub reviewer: String,
}

pub async fn audit_next(
    State(state): State<AppState>,
    query: Result<Query<NextQuery>, axum::extract::rejection::QueryRejection>,
) -> Result<Json<AuditSample>, ApiError> {
    let Query(q) = query?;
    if q.reviewer.trim().is_empty() {
        return Err(ApiError::BadRequest("reviewer must not be empty".into()));
    }
    let ttl = state.config.lease_ttl();
    let mut store = state
        .audit
        .lock()
        .map_err(|_| ApiError::Internal("audit store poisoned".into()))?;
    store
        .lease_next(&q.reviewer, Instant::now(), ttl)
        .map(Json)
        .ok_or_else(|| ApiError::NotFound("no pending samples".into()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreRequest {
    pub sample_id: String,
    pub reviewer_id: String,
    pub scores: HumanScores,
    /// Required to overwrite an existing score.
    #[serde(default)]
    pub replace: bool,
}

pub async fn audit_score(
    State(state): State<AppState>,
    StrictJson(body): StrictJson<ScoreRequest>,
) -> Result<Json<AuditSample>, ApiError> {
    if body.reviewer_id.trim().is_empty() {
        return Err(ApiError::BadRequest("reviewer_id must not be empty".into()));
    }
    let audit = state.audit.clone();
    // Scoring fsyncs the event log, so keep it off the async workers.
    let sample = tokio::task::spawn_blocking(move || {
        let mut store = audit
            .lock()
            .map_err(|_| ApiError::Internal("audit store poisoned".into()))?;
        store
            .ingest_human_score(
                &body.sample_id,
                &body.reviewer_id,
                body.scores,
                body.replace,
            )
            .map_err(ApiError::from)
    })
    .await
    .map_err(|e| ApiError::Internal(e.to_string()))??;
    Ok(Json(sample))
}

pub async fn audit_report(
    State(state): State<AppState>,
) -> Result<Json<CalibrationReport>, ApiError> {
    let store = state
        .audit
        .lock()
        .map_err(|_| ApiError::Internal("audit store poisoned".into()))?;
    match store.calibration_report() {
        Ok(r) => Ok(Json(r)),
        Err(AuditError::NoScoredSamples) => Ok(Json(CalibrationReport {
            rows: Vec::new(),
            total_scored: 0,
            correlation: None,
        })),
        Err(e) => Err(e.into()),
    }
}

pub async fn healthz() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok" }))
}
