use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: [usize; 2],
        rhs: [usize; 2],
    },

    #[error("backward needs a scalar root, got shape {0:?}")]
    NonScalarRoot([usize; 2]),

    #[error("{file}:{line}: {msg}")]
    Parse {
        file: String,
        line: u64,
        msg: String,
    },

    #[error("dataset integrity violations:\n{}", .0.join("\n"))]
    Integrity(Vec<String>),

    #[error("{field}: value {value:?} is not in the vocabulary")]
    Vocabulary { field: String, value: String },

    #[error("station {station}: missing readings for t in [{from}, {to}]")]
    MissingData { station: String, from: i64, to: i64 },

    #[error("training diverged (non-finite loss) at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{0}")]
    Invalid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
