//! HTTP routes. No authentication: bind to loopback unless the network is
//! trusted.

use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;

use axum::extract::{Path as UrlPath, Query, State};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;

use crate::error::Result;
use crate::service::Service;
use crate::types::*;

#[derive(Debug, Default, Deserialize)]
struct StatsQuery {
    #[serde(default)]
    partial: bool,
}

async fn create_session(State(s): State<Arc<Service>>, Json(req): Json<CreateSession>) -> Result<Json<SessionCreated>> {
    s.create_session(&req).map(Json)
}

async fn card_list(State(s): State<Arc<Service>>, UrlPath(id): UrlPath<String>) -> Result<Json<CardList>> {
    s.card_list(&id).map(Json)
}

async fn card(State(s): State<Arc<Service>>, UrlPath(id): UrlPath<String>) -> Result<Json<FeatureCard>> {
    s.card(&id).map(Json)
}

async fn annotate(State(s): State<Arc<Service>>, Json(req): Json<AnnotationRequest>) -> Result<Json<AnnotationAck>> {
    s.submit(&req).map(Json)
}

async fn stats(
    State(s): State<Arc<Service>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<StatsQuery>,
) -> Result<Json<SessionStats>> {
    s.stats(&id, q.partial).map(Json)
}

async fn reveal(State(s): State<Arc<Service>>, UrlPath(id): UrlPath<String>) -> Result<Json<Reveal>> {
    s.reveal(&id).map(Json)
}

pub fn router(service: Arc<Service>) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/cards", get(card_list))
        .route("/sessions/{id}/stats", get(stats))
        .route("/sessions/{id}/reveal", get(reveal))
        .route("/cards/{opaque}", get(card))
        .route("/annotations", post(annotate))
        .with_state(service)
}

/// Serve the API on `addr` until the process is stopped.
pub fn serve(addr: SocketAddr, log_path: &Path) -> std::io::Result<()> {
    let service = Service::open(log_path).map_err(std::io::Error::other)?;
    let app = router(Arc::new(service));
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        log::info!("annotation service listening on {}", listener.local_addr()?);
        axum::serve(listener, app).await
    })
}
