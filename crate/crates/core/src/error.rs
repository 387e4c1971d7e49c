use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {error}")]
    Io { path: PathBuf, error: std::io::Error },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("line {line}: non-triangle face with {count} vertices")]
    NonTriangleFace { line: usize, count: usize },

    #[error("invalid mesh: {0}")]
    InvalidMesh(String),

    #[error("non-manifold edge ({0}, {1}) borders more than two triangles")]
    NonManifoldEdge(usize, usize),

    #[error("mesh has no boundary")]
    NoBoundary,

    #[error("mesh has {0} boundary loops, expected exactly one")]
    MultipleBoundaryLoops(usize),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate configuration: {0}")]
    Degenerate(String),

    #[error("requested {requested} components but data rank is {rank}")]
    RankDeficient { requested: usize, rank: usize },

    #[error("linear solver failed: {0}")]
    Solver(String),

    #[error("non-finite energy at iteration {iteration}")]
    NonFiniteEnergy {
        iteration: usize,
        /// Vertex positions of the last iterate with finite energy.
        last_stable: Vec<[f64; 3]>,
    },

    #[error("parametrization has {0} flipped triangles")]
    FlippedTriangles(usize),

    #[error("pixel ({x}, {y}) covered by more than one triangle")]
    Overlap { x: usize, y: usize },

    #[error("vertex {0} maps outside the covered image region")]
    OutsideCoverage(usize),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            error: source,
        }
    }

    /// True for failures caused by numerics rather than by malformed input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Solver(_) | Error::NonFiniteEnergy { .. } | Error::RankDeficient { .. } | Error::Degenerate(_)
        )
    }
}
