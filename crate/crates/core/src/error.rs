use std::path::PathBuf;

/// Errors raised by simulation, training, transfer fitting and I/O.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("voltage collapse: v_o = {v_o:.3} V is at or below the {floor} V floor")]
    VoltageCollapse { v_o: f64, floor: f64 },

    #[error("numerical divergence: {0}")]
    NumericalDivergence(String),

    #[error("no equilibrium for duty {duty} at {power} W")]
    NoEquilibrium { duty: f64, power: f64 },

    #[error("replay memory holds {have} transitions, minibatch needs {need}")]
    InsufficientReplay { have: usize, need: usize },

    #[error("cannot sample from an empty replay memory")]
    EmptyMemory,

    #[error("only {settled} sweep points reached steady state, at least {required} are needed")]
    NoSteadyState { settled: usize, required: usize },

    #[error("degenerate regression design: {0}")]
    DegenerateDesign(String),

    #[error("invalid value for `{path}`: {msg}")]
    Invalid { path: String, msg: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn invalid(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Invalid {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the numerical kind (collapse, divergence, missing equilibria).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::VoltageCollapse { .. }
                | Error::NumericalDivergence(_)
                | Error::NoEquilibrium { .. }
                | Error::NoSteadyState { .. }
                | Error::DegenerateDesign(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
