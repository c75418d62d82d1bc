use std::path::PathBuf;

use crate::runtime::Tag;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("invalid config: {0}")]
    Validation(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("ghost nodes of {0} are stale; exchange the halo first")]
    StaleGhosts(&'static str),

    #[error("CFL violation: particle moved {hop} cells in one step but the subdomain has {n_local_cells}")]
    Cfl { hop: i64, n_local_cells: usize },

    #[error("routing error on rank {rank}: immigrant at cell position {x_cells} outside owned cells [{first}, {end})")]
    Routing {
        rank: usize,
        x_cells: f64,
        first: usize,
        end: usize,
    },

    #[error("topology error: rank {from} cannot use tag {tag} with rank {to}")]
    Topology { from: usize, to: usize, tag: Tag },

    #[error("handle {id} on rank {rank} was already waited on")]
    DoubleWait { rank: usize, id: u64 },

    #[error("rank {rank} left {count} message handles un-waited")]
    UnwaitedHandles { rank: usize, count: usize },

    #[error("deadlock: rank {rank} timed out after {secs:.1} s waiting for tag {tag} from rank {peer}")]
    Deadlock {
        rank: usize,
        peer: usize,
        tag: Tag,
        secs: f64,
    },

    #[error("rank {rank} aborted because another rank failed")]
    Aborted { rank: usize },

    #[error("malformed message payload: {0}")]
    Payload(String),

    #[error("instrumentation error: {0}")]
    Instrumentation(String),

    #[error("incompatible checkpoint {path}: {reason}")]
    IncompatibleCheckpoint { path: PathBuf, reason: String },

    #[error("I/O error on rank {rank} at {path}: {source}")]
    RankIo {
        rank: usize,
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error at {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("rank {rank} failed: {source}")]
    Rank {
        rank: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("rank {rank} panicked: {msg}")]
    RankPanic { rank: usize, msg: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input (config or usage) rather
    /// than a runtime failure.
    pub fn is_user_error(&self) -> bool {
        match self {
            Error::Parse { .. } | Error::Validation(_) | Error::Usage(_) => true,
            Error::Rank { source, .. } => source.is_user_error(),
            _ => false,
        }
    }
}
