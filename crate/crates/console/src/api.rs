use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use gridwall_core::arena::{play_match, Agent, EloTable, MatchResult};
use gridwall_core::duel::interaction_penalty;
use gridwall_core::env::{advance_car, Driver, EgoObservation, OpponentObservation, EGO_OBS_DIM, OPP_OBS_DIM};
use gridwall_core::track::{Action, Compound, PitCall};
use serde::{Deserialize, Serialize};
use tokio::sync::broadcast::error::RecvError;

use crate::duel::{DuelSession, HumanAction, HumanView, LapResult, Side};
use crate::error::{parse_body, ApiError};
use crate::state::{AgentView, AppState, DuelHandle};

type Shared = State<Arc<AppState>>;

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/agents", get(list_agents))
        .route("/arena/leaderboard", get(leaderboard))
        .route("/matches", post(create_match))
        .route("/matches/:id", get(get_match))
        .route("/matches/:id/trace", get(match_trace))
        .route("/duels", post(create_duel))
        .route("/duels/:id", get(get_duel))
        .route("/duels/:id/action", post(submit_action))
        .route("/duels/:id/trace", get(duel_trace))
        .route("/duels/:id/stream", get(stream_duel))
        .route("/recommend", post(recommend))
        .with_state(state)
}

fn csv(body: String) -> Response {
    ([(header::CONTENT_TYPE, "text/csv; charset=utf-8")], body).into_response()
}

async fn list_agents(State(s): Shared) -> Json<Vec<AgentView>> {
    Json(s.agents.values().map(|a| a.view()).collect())
}

#[derive(Debug, Serialize)]
pub struct RankEntry {
    pub rank: usize,
    pub id: String,
    pub rating: f64,
    pub games: u32,
}

#[derive(Debug, Serialize)]
pub struct Leaderboard {
    pub ranking: Vec<RankEntry>,
    #[serde(flatten)]
    pub table: EloTable,
}

async fn leaderboard(State(s): Shared) -> Result<Json<Leaderboard>, ApiError> {
    let table = s.leaderboard()?;
    let ranking = table
        .ranking()
        .into_iter()
        .enumerate()
        .map(|(i, (id, rating))| RankEntry { rank: i + 1, games: table.games.get(&id).copied().unwrap_or(0), id, rating })
        .collect();
    Ok(Json(Leaderboard { ranking, table }))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct MatchRequest {
    #[serde(rename = "agentA")]
    agent_a: String,
    #[serde(rename = "agentB")]
    agent_b: String,
    #[serde(default)]
    seed: u64,
    #[serde(default = "default_gap")]
    gap: f64,
}

fn default_gap() -> f64 {
    0.5
}

#[derive(Debug, Serialize)]
struct MatchCreated {
    id: u64,
    result: MatchResult,
}

fn finite(field: &str, v: f64) -> Result<(), ApiError> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(ApiError::invalid(field, "must be a finite number"))
    }
}

async fn create_match(State(s): Shared, body: Bytes) -> Result<(StatusCode, Json<MatchCreated>), ApiError> {
    let req: MatchRequest = parse_body(&body)?;
    finite("gap", req.gap)?;
    let hash = s.env.track.hash();
    let a = s.raceable(&req.agent_a)?;
    let b = s.raceable(&req.agent_b)?;
    let a = Agent::new(a.id.clone(), a.policy.clone() as Arc<dyn Driver>, hash.clone());
    let b = Agent::new(b.id.clone(), b.policy.clone() as Arc<dyn Driver>, hash);
    let result = play_match(&a, &b, &s.env, req.seed, req.gap).map_err(|e| ApiError::Conflict(e.to_string()))?;
    let id = s.store_match(result.clone());
    Ok((StatusCode::CREATED, Json(MatchCreated { id, result })))
}

async fn get_match(State(s): Shared, Path(id): Path<u64>) -> Result<Json<MatchResult>, ApiError> {
    Ok(Json(s.get_match(id)?.as_ref().clone()))
}

async fn match_trace(State(s): Shared, Path(id): Path<u64>) -> Result<Response, ApiError> {
    Ok(csv(s.get_match(id)?.trace.to_csv()))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DuelRequest {
    agent: String,
    #[serde(default = "default_side")]
    human_side: Side,
    #[serde(default)]
    gap: f64,
    #[serde(default)]
    seed: u64,
}

fn default_side() -> Side {
    Side::Car1
}

#[derive(Debug, Serialize)]
pub struct DuelSummary {
    pub id: u64,
    pub agent: String,
    pub human_side: Side,
    pub seed: u64,
    pub gap: f64,
    pub n_laps: u32,
    pub pending_lap: Option<u32>,
    pub done: bool,
    pub view: Option<HumanView>,
    pub actions: Vec<HumanAction>,
    pub last: Option<LapResult>,
}

fn summary(d: &DuelSession, n_laps: u32) -> DuelSummary {
    DuelSummary {
        id: d.id,
        agent: d.agent_id.clone(),
        human_side: d.human_side,
        seed: d.seed,
        gap: d.init_gap,
        n_laps,
        pending_lap: d.pending_lap(),
        done: d.is_done(),
        view: d.view(),
        actions: d.actions().to_vec(),
        last: d.results().last().cloned(),
    }
}

async fn create_duel(State(s): Shared, body: Bytes) -> Result<(StatusCode, Json<DuelSummary>), ApiError> {
    let req: DuelRequest = parse_body(&body)?;
    finite("gap", req.gap)?;
    let agent = s.raceable(&req.agent)?;
    let session = DuelSession::new(
        s.new_duel_id(),
        agent.id.clone(),
        agent.policy.clone(),
        s.env.clone(),
        req.human_side,
        req.gap,
        req.seed,
    );
    let out = summary(&session, s.env.track.n_laps);
    s.insert_duel(session);
    Ok((StatusCode::CREATED, Json(out)))
}

async fn get_duel(State(s): Shared, Path(id): Path<u64>) -> Result<Json<DuelSummary>, ApiError> {
    let h = s.duel(id)?;
    let d = h.session.lock().await;
    Ok(Json(summary(&d, s.env.track.n_laps)))
}

async fn duel_trace(State(s): Shared, Path(id): Path<u64>) -> Result<Response, ApiError> {
    let h = s.duel(id)?;
    let d = h.session.lock().await;
    Ok(csv(d.trace().to_csv()))
}

async fn submit_action(State(s): Shared, Path(id): Path<u64>, body: Bytes) -> Result<Json<LapResult>, ApiError> {
    let h = s.duel(id)?;
    let action: HumanAction = parse_body(&body)?;
    // Submissions within a session are serialized; a second one in flight is a conflict.
    let mut d = h
        .session
        .try_lock()
        .map_err(|_| ApiError::Conflict(format!("duel {id} is already processing an action")))?;
    let result = d.submit(action)?;
    // Nobody listening is fine.
    let _ = h.tx.send(result.clone());
    Ok(Json(result))
}

#[derive(Debug, Deserialize)]
struct StreamQuery {
    /// Last lap the client already has; earlier results are not resent.
    #[serde(default)]
    from: u32,
}

async fn stream_duel(
    State(s): Shared,
    Path(id): Path<u64>,
    Query(q): Query<StreamQuery>,
    ws: WebSocketUpgrade,
) -> Result<Response, ApiError> {
    let h = s.duel(id)?;
    Ok(ws.on_upgrade(move |socket| push_laps(socket, h, q.from)))
}

async fn send_result(socket: &mut WebSocket, r: &LapResult) -> bool {
    match serde_json::to_string(r) {
        Ok(text) => socket.send(Message::Text(text)).await.is_ok(),
        Err(_) => false,
    }
}

/// Replays results after lap `from`, then follows the session live.
async fn push_laps(mut socket: WebSocket, h: Arc<DuelHandle>, from: u32) {
    let (history, mut rx) = {
        let d = h.session.lock().await;
        (d.results().to_vec(), h.tx.subscribe())
    };
    let mut sent = from;
    for r in history.iter().filter(|r| r.lap > from) {
        if !send_result(&mut socket, r).await {
            return;
        }
        sent = r.lap;
    }
    if history.last().is_some_and(|r| r.done) {
        let _ = socket.send(Message::Close(None)).await;
        return;
    }
    loop {
        tokio::select! {
            msg = rx.recv() => match msg {
                Ok(r) => {
                    if r.lap <= sent {
                        continue;
                    }
                    sent = r.lap;
                    if !send_result(&mut socket, &r).await {
                        return;
                    }
                    if r.done {
                        let _ = socket.send(Message::Close(None)).await;
                        return;
                    }
                }
                Err(RecvError::Lagged(_)) | Err(RecvError::Closed) => {
                    let _ = socket.send(Message::Close(None)).await;
                    return;
                }
            },
            incoming = socket.recv() => match incoming {
                None | Some(Err(_)) | Some(Ok(Message::Close(_))) => return,
                Some(Ok(_)) => {}
            },
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecommendRequest {
    agent: String,
    ego: Vec<f64>,
    opponent: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionView {
    pub d_ef: f64,
    pub d_eb: f64,
    pub ps: u8,
}

impl From<Action> for ActionView {
    fn from(a: Action) -> Self {
        Self { d_ef: a.d_ef, d_eb: a.d_eb, ps: a.ps.code() }
    }
}

/// Predicted lap time split into its terms; `t_nom + tire_penalty + dt_int == t_lap`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Breakdown {
    pub t_nom: f64,
    pub tire_penalty: f64,
    pub dt_int: f64,
    pub t_lap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub agent: String,
    pub a_nom: [f64; 3],
    pub delta: [f64; 3],
    pub action: ActionView,
    pub pit: String,
    /// Allocations after the environment's clipping.
    pub realized: ActionView,
    pub clipped: u8,
    pub breakdown: Breakdown,
}

pub fn pit_label(p: PitCall) -> &'static str {
    match p {
        PitCall::NoPit => "no-pit",
        PitCall::Fit(Compound::Soft) => "soft",
        PitCall::Fit(Compound::Medium) => "medium",
        PitCall::Fit(Compound::Hard) => "hard",
    }
}

fn check_ego(o: &[f64], s: &AppState) -> Result<(), ApiError> {
    let t = &s.env.track;
    if o.len() != EGO_OBS_DIM {
        return Err(ApiError::invalid("ego", format!("expected {EGO_OBS_DIM} values, got {}", o.len())));
    }
    for (i, v) in o.iter().enumerate() {
        finite(&format!("ego[{i}]"), *v)?;
    }
    let ranges = [(0, 0.0, t.e_b_max, "battery energy"), (1, 0.0, t.e_f0, "fuel energy"), (6, 0.0, t.wear_cap, "tire wear")];
    for (i, lo, hi, what) in ranges {
        if !(lo..=hi).contains(&o[i]) {
            return Err(ApiError::invalid(format!("ego[{i}]"), format!("{what} must lie in [{lo}, {hi}]")));
        }
    }
    if !matches!(o[5], 1.0 | 2.0 | 3.0) {
        return Err(ApiError::invalid("ego[5]", "compound code must be 1, 2 or 3"));
    }
    Ok(())
}

async fn recommend(State(s): Shared, body: Bytes) -> Result<Json<Recommendation>, ApiError> {
    let req: RecommendRequest = parse_body(&body)?;
    let agent = s.agent(&req.agent)?;
    check_ego(&req.ego, &s)?;
    if req.opponent.len() != OPP_OBS_DIM {
        return Err(ApiError::invalid("opponent", format!("expected {OPP_OBS_DIM} values, got {}", req.opponent.len())));
    }
    for (i, v) in req.opponent.iter().enumerate() {
        finite(&format!("opponent[{i}]"), *v)?;
    }
    let ego = EgoObservation::from_slice(&req.ego).map_err(|e| ApiError::invalid("ego", e.to_string()))?;
    let opp = OpponentObservation::from_slice(&req.opponent).map_err(|e| ApiError::invalid("opponent", e.to_string()))?;
    let p = &agent.policy;
    let parts = p.act_parts(&ego, &opp);
    // The opponent reports its own gap; ours is the negation.
    let track = &p.track;
    let dt_int = interaction_penalty(-opp.t_gap(), track);
    let (_, lap) = advance_car(&ego.car_state(), &parts.action, dt_int, track);
    Ok(Json(Recommendation {
        agent: agent.id.clone(),
        a_nom: parts.a_nom,
        delta: parts.delta,
        action: parts.action.into(),
        pit: pit_label(parts.action.ps).to_string(),
        realized: ActionView { d_ef: lap.d_ef, d_eb: lap.d_eb, ps: lap.ps.code() },
        clipped: lap.clipped,
        breakdown: Breakdown { t_nom: lap.t_nom, tire_penalty: lap.tire_penalty, dt_int: lap.dt_int, t_lap: lap.t_lap },
    }))
}
