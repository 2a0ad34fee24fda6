//! Review service: leases flagged images to operators, records their
//! verdicts in the ledger, and serves overlay geometry and statistics.
//!
//! Routes:
//!
//! | method | path | |
//! |---|---|---|
//! | GET | `/api/queue/next?operator=ID` | lease the next pending item (204 when none) |
//! | POST | `/api/queue/release` | give a lease back without deciding |
//! | POST | `/api/decisions` | submit a verdict |
//! | GET | `/api/images/{id}` | image bytes |
//! | GET | `/api/overlays/{id}` | ground-truth and prediction polygons |
//! | GET | `/api/stats` | per-iteration statistics |
//! | GET | `/api/iterations` | iteration summaries and queue counts |

pub mod api;
pub mod coordinator;

use std::path::{Path, PathBuf};

use refinery_core::triage::TriageReport;
use refinery_core::{DatasetVersion, Ledger};
use tokio::net::TcpListener;

pub use api::{router, AppState, Overlay, Polygon, Role};
pub use coordinator::{
    read_queue, system_clock, Ack, Clock, Coordinator, DecisionRequest, IterationInfo, LeasedItem, QueueCounts,
    ServiceError,
};

/// Files a service instance is built from.
#[derive(Debug, Clone)]
pub struct ServiceFiles {
    pub version: PathBuf,
    pub queue: PathBuf,
    pub ledger: PathBuf,
    pub reports: Vec<PathBuf>,
    pub image_root: Option<PathBuf>,
}

#[derive(Debug, thiserror::Error)]
pub enum StartError {
    #[error(transparent)]
    Service(#[from] ServiceError),
    #[error(transparent)]
    Dataset(#[from] refinery_core::dataset::DatasetError),
    #[error(transparent)]
    Ledger(#[from] refinery_core::ledger::LedgerError),
    #[error("{path}: {message}")]
    Report { path: PathBuf, message: String },
}

fn read_report(path: &Path) -> Result<TriageReport, StartError> {
    let err = |message: String| StartError::Report {
        path: path.to_path_buf(),
        message,
    };
    let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| err(e.to_string()))
}

/// Loads state from disk; the ledger file is opened for appending.
pub fn load_state(files: &ServiceFiles, clock: Clock) -> Result<AppState, StartError> {
    let version = DatasetVersion::load_json(&files.version)?;
    let queue = read_queue(&files.queue)?;
    let ledger = Ledger::open(&files.ledger)?;
    let reports = files
        .reports
        .iter()
        .map(|p| read_report(p))
        .collect::<Result<Vec<_>, _>>()?;
    let coordinator = Coordinator::new(queue, ledger, reports, clock)?;
    Ok(AppState::new(coordinator, version, files.image_root.clone()))
}

pub async fn serve(listener: TcpListener, state: AppState) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}
