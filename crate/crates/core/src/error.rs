use thiserror::Error;

/// Errors raised across the planner.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{what} not found: {id}")]
    NotFound { what: &'static str, id: u64 },

    #[error("placement failed after {attempts} samples")]
    Placement { attempts: usize },

    #[error("pose ({x:.4}, {y:.4}) outside the heightmap")]
    Range { x: f64, y: f64 },

    #[error("controller error: {0}")]
    Controller(String),

    #[error("no collision-free interval: lower bound {alpha_min:.4} exceeds upper bound {alpha_max:.4}")]
    EmptyInterval { alpha_min: f64, alpha_max: f64 },

    #[error("collision error: {0}")]
    Collision(String),

    #[error("grasp rejected: {0}")]
    Rejected(String),

    #[error("logic error: {0}")]
    Logic(String),

    #[error("selection error: {0}")]
    Selection(String),

    #[error("training aborted: {0}")]
    Training(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn arg<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Argument(msg.into()))
}
