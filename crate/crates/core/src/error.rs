use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error")]
    Io(#[from] std::io::Error),

    #[error("json error")]
    Json(#[from] serde_json::Error),

    /// A record in an input file could not be parsed.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Input was syntactically valid but violates a documented constraint.
    #[error("validation error: {0}")]
    Validation(String),

    #[error("event out of sensor bounds: ({x}, {y}) on {width}x{height}")]
    OutOfBounds {
        x: u16,
        y: u16,
        width: u16,
        height: u16,
    },

    /// The input geometry does not determine a solution (collinear points,
    /// zero-radius orbit, singular look-at, ...).
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    /// A point projected with non-positive depth.
    #[error("point behind camera")]
    BehindCamera,

    #[error("empty stream: {0}")]
    EmptyStream(String),

    #[error("invalid initialization: {0}")]
    InvalidInitialization(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    /// A pipeline stage failed; carries the stage name for diagnostics.
    #[error("stage '{stage}' failed")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn stage(stage: &'static str, source: Error) -> Self {
        Error::Stage {
            stage,
            source: Box::new(source),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
