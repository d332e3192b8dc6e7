//! Local JSON API over one project. Mutations go through the same
//! `Project` methods as the command line.

use std::net::{SocketAddr, TcpListener};
use std::sync::{Arc, RwLock};
use std::thread::JoinHandle;

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use super::project::{Project, TimerAction, WorkbenchError, OPERATOR};
use crate::extraction::ExtractionError;
use crate::repair::RepairError;

pub type SharedProject = Arc<RwLock<Project>>;

#[derive(Debug, Error)]
pub enum ApiError {
    #[error("port {0} is already in use")]
    PortInUse(u16),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

struct Failure(WorkbenchError);

impl From<WorkbenchError> for Failure {
    fn from(e: WorkbenchError) -> Failure {
        Failure(e)
    }
}

impl IntoResponse for Failure {
    fn into_response(self) -> Response {
        use WorkbenchError as W;
        let status = match &self.0 {
            W::OutOfOrderStage { .. } | W::ValidationFailed(_) | W::UnbalancedTimer(_) | W::Locked(_) => {
                StatusCode::CONFLICT
            }
            W::Repair(RepairError::EpisodeResolved(_)) => StatusCode::CONFLICT,
            W::UnknownStage(_) | W::UnknownModule(_) | W::UnknownEpisode(_) | W::NotProduced(_) => StatusCode::NOT_FOUND,
            W::Extraction(ExtractionError::RejectedRefinement(_)) | W::Repair(RepairError::EmptyPrompt) => {
                StatusCode::BAD_REQUEST
            }
            W::StageFailed { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let mut body = json!({ "error": self.0.to_string() });
        if let W::ValidationFailed(report) = &self.0 {
            body["findings"] = json!(report.findings);
        }
        (status, Json(body)).into_response()
    }
}

type Reply = Result<Response, Failure>;

fn ok<T: Serialize>(value: T) -> Reply {
    Ok(Json(value).into_response())
}

async fn read<T: Serialize + Send + 'static>(
    p: SharedProject,
    f: impl FnOnce(&Project) -> Result<T, WorkbenchError> + Send + 'static,
) -> Reply {
    let value = tokio::task::spawn_blocking(move || f(&p.read().expect("project lock")))
        .await
        .expect("reader task");
    ok(value?)
}

async fn write<T: Serialize + Send + 'static>(
    p: SharedProject,
    f: impl FnOnce(&mut Project) -> Result<T, WorkbenchError> + Send + 'static,
) -> Reply {
    let value = tokio::task::spawn_blocking(move || f(&mut p.write().expect("project lock")))
        .await
        .expect("writer task");
    ok(value?)
}

#[derive(Debug, Deserialize)]
pub struct TextBody {
    pub text: String,
}

#[derive(Debug, Deserialize)]
pub struct TimerBody {
    pub action: TimerAction,
    #[serde(default)]
    pub at_ms: Option<u64>,
}

pub fn router(project: SharedProject) -> Router {
    Router::new()
        .route("/state", get(|State(p): State<SharedProject>| read(p, |p| p.state())))
        .route("/division", get(|State(p): State<SharedProject>| read(p, |p| p.division())))
        .route(
            "/modules/{name}/artifacts",
            get(|State(p): State<SharedProject>, Path(name): Path<String>| read(p, move |p| p.module_artifacts(&name))),
        )
        .route("/transcripts", get(|State(p): State<SharedProject>| read(p, |p| p.transcripts())))
        .route("/repairs", get(|State(p): State<SharedProject>| read(p, |p| p.episodes())))
        .route("/metrics", get(|State(p): State<SharedProject>| read(p, |p| p.metrics())))
        .route(
            "/division/approve",
            post(|State(p): State<SharedProject>| write(p, |p| p.approve_division(OPERATOR))),
        )
        .route(
            "/division/refine",
            post(|State(p): State<SharedProject>, Json(b): Json<TextBody>| {
                write(p, move |p| p.refine_division(&b.text))
            }),
        )
        .route(
            "/repairs/{id}/human-prompt",
            post(|State(p): State<SharedProject>, Path(id): Path<String>, Json(b): Json<TextBody>| {
                write(p, move |p| p.human_prompt(&id, &b.text))
            }),
        )
        .route(
            "/stages/{name}/run",
            post(|State(p): State<SharedProject>, Path(name): Path<String>| write(p, move |p| p.run_stage(&name))),
        )
        .route(
            "/timers/paper-reading",
            post(|State(p): State<SharedProject>, Json(b): Json<TimerBody>| {
                write(p, move |p| p.paper_reading(b.action, b.at_ms))
            }),
        )
        .with_state(project)
}

/// Binds the API port on the loopback interface.
pub fn bind(port: u16) -> Result<TcpListener, ApiError> {
    match TcpListener::bind(("127.0.0.1", port)) {
        Ok(l) => {
            l.set_nonblocking(true)?;
            Ok(l)
        }
        Err(e) if e.kind() == std::io::ErrorKind::AddrInUse => Err(ApiError::PortInUse(port)),
        Err(e) => Err(e.into()),
    }
}

/// A running API server; dropping the handle leaves it running until
/// `shutdown` or process exit.
#[derive(Debug)]
pub struct ServiceHandle {
    pub addr: SocketAddr,
    stop: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<JoinHandle<std::io::Result<()>>>,
}

impl ServiceHandle {
    pub fn shutdown(mut self) -> std::io::Result<()> {
        if let Some(s) = self.stop.take() {
            let _ = s.send(());
        }
        self.join()
    }

    /// Blocks until the server stops.
    pub fn join(mut self) -> std::io::Result<()> {
        match self.thread.take() {
            Some(t) => t.join().unwrap_or_else(|_| Err(std::io::Error::other("server thread panicked"))),
            None => Ok(()),
        }
    }
}

/// Serves `project` on `port` (0 picks a free one) from a background thread.
pub fn serve(project: Project, port: u16) -> Result<ServiceHandle, ApiError> {
    let listener = bind(port)?;
    let addr = listener.local_addr()?;
    let shared = Arc::new(RwLock::new(project));
    let (stop, stopped) = tokio::sync::oneshot::channel::<()>();
    let thread = std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::from_std(listener)?;
            axum::serve(listener, router(shared))
                .with_graceful_shutdown(async {
                    let _ = stopped.await;
                })
                .await
        })
    });
    Ok(ServiceHandle {
        addr,
        stop: Some(stop),
        thread: Some(thread),
    })
}
