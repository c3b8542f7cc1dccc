//! Reference games with human listeners over HTTP. Captions are generated
//! offline; the service deals out trials, records choices and fluency
//! ratings, and reports accuracy once a session is finished.
//!
//! Data directory layout:
//!
//! ```text
//! scenes.jsonl
//! pair_sets/<pair set>.jsonl
//! captions/<pair set>/<speaker>.jsonl
//! sessions/<session id>.jsonl      (written by the service)
//! ```

mod error;
mod store;

use std::collections::BTreeMap;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use tower_http::cors::CorsLayer;

use pragma::corpus::{GamePair, SceneObject};

pub use error::ServiceError;
pub use store::{Answer, Catalog, GameSession, Side, Store, Trial};

type Result<T, E = ServiceError> = std::result::Result<T, E>;
type AppState = State<Arc<Store>>;

pub fn router(store: Arc<Store>) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/trials/{k}", get(get_trial))
        .route("/sessions/{id}/trials/{k}/answer", post(answer))
        .route("/sessions/{id}/trials/{k}/fluency", post(fluency))
        .route("/sessions/{id}/report", get(session_report))
        .route("/report", get(aggregate_report))
        .route("/speakers", get(speakers))
        .route("/pair_sets", get(pair_sets))
        .layer(CorsLayer::permissive())
        .with_state(store)
}

#[derive(Debug, Deserialize)]
pub struct CreateSession {
    pub pair_set: String,
    pub speaker: String,
    pub n_trials: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub participant: Option<String>,
}

#[derive(Debug, Serialize)]
pub struct SessionView {
    pub id: String,
    pub pair_set: String,
    pub speaker: String,
    pub participant: Option<String>,
    pub created_at: DateTime<Utc>,
    pub n_trials: usize,
    pub trials: Vec<String>,
    pub answered: usize,
    /// First unanswered trial, where a resumed session picks up.
    pub next_trial: Option<usize>,
}

impl From<&GameSession> for SessionView {
    fn from(s: &GameSession) -> Self {
        SessionView {
            id: s.id.clone(),
            pair_set: s.pair_set.clone(),
            speaker: s.speaker.clone(),
            participant: s.participant.clone(),
            created_at: s.created_at,
            n_trials: s.trials.len(),
            trials: s.trials.iter().map(|t| t.id.clone()).collect(),
            answered: s.answered(),
            next_trial: s.trials.iter().position(|t| t.answer.is_none()),
        }
    }
}

#[derive(Debug, Serialize)]
pub struct SceneView {
    pub objects: Vec<SceneObject>,
}

#[derive(Debug, Serialize)]
pub struct TrialView {
    pub session: String,
    pub index: usize,
    pub trial_id: String,
    pub scene_left: SceneView,
    pub scene_right: SceneView,
    pub caption: String,
    pub answered: bool,
    pub rated: bool,
}

#[derive(Debug, Deserialize)]
pub struct AnswerBody {
    pub side: Side,
}

#[derive(Debug, Deserialize)]
pub struct FluencyBody {
    pub rating: u8,
}

#[derive(Debug, Serialize)]
pub struct Ack {
    pub status: &'static str,
    pub trial_id: String,
}

/// An answered trial. Correctness and the pair itself stay out until every
/// trial of the session is answered.
#[derive(Debug, Serialize)]
pub struct TrialRecord {
    pub index: usize,
    pub trial_id: String,
    pub caption: String,
    pub side: Side,
    pub answered_at: DateTime<Utc>,
    pub fluency: Option<u8>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pair: Option<GamePair>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_side: Option<Side>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub correct: Option<bool>,
}

#[derive(Debug, Serialize)]
pub struct SessionReport {
    pub session: String,
    pub pair_set: String,
    pub speaker: String,
    pub n_trials: usize,
    pub answered: usize,
    pub completion: f64,
    pub complete: bool,
    /// Null until the session is complete.
    pub accuracy: Option<f64>,
    pub mean_fluency: Option<f64>,
    pub trials: Vec<TrialRecord>,
}

pub fn session_report_of(s: &GameSession) -> SessionReport {
    let complete = s.complete();
    let answered: Vec<(usize, &Trial)> = s
        .trials
        .iter()
        .enumerate()
        .filter(|(_, t)| t.answer.is_some())
        .collect();
    let trials: Vec<TrialRecord> = answered
        .iter()
        .map(|&(k, t)| {
            let a = t.answer.as_ref().expect("filtered on answered");
            TrialRecord {
                index: k,
                trial_id: t.id.clone(),
                caption: t.caption.join(" "),
                side: a.side,
                answered_at: a.at,
                fluency: t.fluency,
                pair: complete.then(|| t.pair.clone()),
                target_side: complete.then_some(t.target_side),
                correct: if complete { t.correct() } else { None },
            }
        })
        .collect();
    let accuracy = (complete && !answered.is_empty()).then(|| {
        answered
            .iter()
            .filter(|(_, t)| t.correct() == Some(true))
            .count() as f64
            / answered.len() as f64
    });
    let ratings: Vec<f64> = s
        .trials
        .iter()
        .filter_map(|t| t.fluency)
        .map(f64::from)
        .collect();
    SessionReport {
        session: s.id.clone(),
        pair_set: s.pair_set.clone(),
        speaker: s.speaker.clone(),
        n_trials: s.trials.len(),
        answered: answered.len(),
        completion: answered.len() as f64 / s.trials.len() as f64,
        complete,
        accuracy,
        mean_fluency: (!ratings.is_empty())
            .then(|| ratings.iter().sum::<f64>() / ratings.len() as f64),
        trials,
    }
}

fn trial_index(k: &str) -> Result<usize> {
    k.parse()
        .map_err(|_| ServiceError::BadRequest(format!("trial index {k:?} is not a number")))
}

async fn create_session(
    State(store): AppState,
    body: std::result::Result<Json<CreateSession>, JsonRejection>,
) -> Result<(StatusCode, Json<SessionView>)> {
    let Json(req) = body?;
    let session = store.create(
        &req.pair_set,
        &req.speaker,
        req.n_trials,
        req.seed,
        req.participant,
    )?;
    Ok((StatusCode::CREATED, Json(SessionView::from(&session))))
}

async fn get_session(State(store): AppState, Path(id): Path<String>) -> Result<Json<SessionView>> {
    let slot = store.get(&id)?;
    let slot = slot.lock().await;
    Ok(Json(SessionView::from(&slot.session)))
}

async fn get_trial(
    State(store): AppState,
    Path((id, k)): Path<(String, String)>,
) -> Result<Json<TrialView>> {
    let k = trial_index(&k)?;
    let slot = store.get(&id)?;
    let slot = slot.lock().await;
    let t = slot.session.trial(k)?;
    let scene = |id: &str| {
        store
            .catalog
            .scenes
            .get(id)
            .map(|s| SceneView {
                objects: s.objects.clone(),
            })
            .ok_or_else(|| ServiceError::Data(format!("scene {id} vanished")))
    };
    let (target, distractor) = (scene(&t.pair.target)?, scene(&t.pair.distractor)?);
    let (scene_left, scene_right) = match t.target_side {
        Side::Left => (target, distractor),
        Side::Right => (distractor, target),
    };
    Ok(Json(TrialView {
        session: id,
        index: k,
        trial_id: t.id.clone(),
        scene_left,
        scene_right,
        caption: t.caption.join(" "),
        answered: t.answer.is_some(),
        rated: t.fluency.is_some(),
    }))
}

async fn answer(
    State(store): AppState,
    Path((id, k)): Path<(String, String)>,
    body: std::result::Result<Json<AnswerBody>, JsonRejection>,
) -> Result<Json<Ack>> {
    let k = trial_index(&k)?;
    let Json(body) = body?;
    let slot = store.get(&id)?;
    let mut slot = slot.lock().await;
    slot.answer(k, body.side)?;
    Ok(Json(Ack {
        status: "recorded",
        trial_id: slot.session.trials[k].id.clone(),
    }))
}

async fn fluency(
    State(store): AppState,
    Path((id, k)): Path<(String, String)>,
    body: std::result::Result<Json<FluencyBody>, JsonRejection>,
) -> Result<Json<Ack>> {
    let k = trial_index(&k)?;
    let Json(body) = body?;
    let slot = store.get(&id)?;
    let mut slot = slot.lock().await;
    slot.rate(k, body.rating)?;
    Ok(Json(Ack {
        status: "recorded",
        trial_id: slot.session.trials[k].id.clone(),
    }))
}

async fn session_report(
    State(store): AppState,
    Path(id): Path<String>,
) -> Result<Json<SessionReport>> {
    let slot = store.get(&id)?;
    let slot = slot.lock().await;
    Ok(Json(session_report_of(&slot.session)))
}

#[derive(Debug, Deserialize)]
pub struct AggregateQuery {
    pub pair_set: Option<String>,
    pub speaker: Option<String>,
}

/// Pooled over the trials of completed sessions.
#[derive(Debug, Serialize)]
pub struct AggregateReport {
    pub sessions: usize,
    pub trials: usize,
    pub correct: usize,
    pub accuracy: Option<f64>,
}

async fn aggregate_report(
    State(store): AppState,
    Query(q): Query<AggregateQuery>,
) -> Result<Json<AggregateReport>> {
    let (mut sessions, mut trials, mut correct) = (0, 0, 0);
    for id in store.session_ids() {
        let slot = store.get(&id)?;
        let slot = slot.lock().await;
        let s = &slot.session;
        let wanted = q.pair_set.as_ref().is_none_or(|p| *p == s.pair_set)
            && q.speaker.as_ref().is_none_or(|p| *p == s.speaker);
        if !wanted || !s.complete() {
            continue;
        }
        sessions += 1;
        trials += s.trials.len();
        correct += s
            .trials
            .iter()
            .filter(|t| t.correct() == Some(true))
            .count();
    }
    Ok(Json(AggregateReport {
        sessions,
        trials,
        correct,
        accuracy: (trials > 0).then(|| correct as f64 / trials as f64),
    }))
}

#[derive(Debug, Serialize)]
pub struct SpeakerInfo {
    pub name: String,
    pub pair_sets: Vec<String>,
}

async fn speakers(State(store): AppState) -> Json<Vec<SpeakerInfo>> {
    Json(
        store
            .catalog
            .speakers()
            .into_iter()
            .map(|(name, sets)| SpeakerInfo {
                name: name.into(),
                pair_sets: sets.into_iter().map(String::from).collect(),
            })
            .collect(),
    )
}

#[derive(Debug, Serialize)]
pub struct PairSetInfo {
    pub name: String,
    pub n_pairs: usize,
    /// Speaker -> number of pairs with a caption.
    pub speakers: BTreeMap<String, usize>,
}

async fn pair_sets(State(store): AppState) -> Json<Vec<PairSetInfo>> {
    let c = &store.catalog;
    Json(
        c.pair_sets
            .iter()
            .map(|(name, pairs)| PairSetInfo {
                name: name.clone(),
                n_pairs: pairs.len(),
                speakers: c
                    .captions
                    .get(name)
                    .map(|s| s.iter().map(|(k, v)| (k.clone(), v.len())).collect())
                    .unwrap_or_default(),
            })
            .collect(),
    )
}
