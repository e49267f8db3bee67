use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type. Variants group into three families that the CLI
/// maps onto exit codes: usage problems (handled by clap before we get here),
/// data problems (corpus, config, checkpoint), and numeric failures.
#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed JSON in {path} at line {line}, column {column}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("schema violation at `{field}`: {detail}")]
    Schema { field: String, detail: String },

    #[error("question `{id}`: question plus specials (len {needed}) does not fit in max_len {max_len}")]
    QuestionTooLong {
        id: String,
        needed: usize,
        max_len: usize,
    },

    #[error("answer alignment failed: no token overlaps chars {char_start}..{char_end}")]
    Alignment { char_start: usize, char_end: usize },

    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("backward requires a scalar loss, got shape ({rows}, {cols})")]
    NotScalar { rows: usize, cols: usize },

    #[error("{op}: index {index} out of range for size {len}")]
    Index {
        op: &'static str,
        index: usize,
        len: usize,
    },

    #[error("non-finite {what} in `{name}`")]
    NonFinite { what: &'static str, name: String },

    #[error("gradient check failed: max relative error {max_rel_err:.3e} exceeds {threshold:.3e}")]
    GradCheckFailed { max_rel_err: f64, threshold: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("model/config mismatch: {0}")]
    ConfigMismatch(String),
}

impl Error {
    /// Process exit code for the CLI: 2 for data problems, 3 for numeric ones.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Shape { .. }
            | Error::NotScalar { .. }
            | Error::Index { .. }
            | Error::NonFinite { .. }
            | Error::GradCheckFailed { .. } => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_split_numeric_from_data_problems() {
        let numeric: Vec<Error> = vec![
            Error::Shape { op: "matmul", lhs: (1, 2), rhs: (3, 4) },
            Error::NotScalar { rows: 2, cols: 2 },
            Error::Index { op: "slice_cols", index: 9, len: 3 },
            Error::NonFinite { what: "loss", name: "step 1".into() },
            Error::GradCheckFailed { max_rel_err: 1.0, threshold: 1e-6 },
        ];
        for e in numeric {
            assert_eq!(e.exit_code(), 3, "{e}");
        }
        let data: Vec<Error> = vec![
            Error::Schema { field: "dialogues".into(), detail: "empty".into() },
            Error::Config("bad key".into()),
            Error::Checkpoint("bad magic".into()),
            Error::ConfigMismatch("shape".into()),
            Error::QuestionTooLong { id: "q0".into(), needed: 9, max_len: 8 },
            Error::Alignment { char_start: 0, char_end: 1 },
        ];
        for e in data {
            assert_eq!(e.exit_code(), 2, "{e}");
        }
    }
}
