use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, EpistasisError>;

/// Location inside an input file, 1-based.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FilePos {
    pub path: PathBuf,
    pub line: usize,
    pub column: Option<usize>,
}

impl std::fmt::Display for FilePos {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.column {
            Some(c) => write!(f, "{}:{}:{}", self.path.display(), self.line, c),
            None => write!(f, "{}:{}", self.path.display(), self.line),
        }
    }
}

#[derive(Debug, Error)]
pub enum EpistasisError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{pos}: malformed input: {msg}")]
    Malformed { pos: FilePos, msg: String },
    #[error("{pos}: genotype code {value:?} is not one of 1, 2, 3")]
    CodeOutOfRange { pos: FilePos, value: String },
    #[error("{pos}: {msg}")]
    GeneMap { pos: FilePos, msg: String },
    #[error("phenotype has {got} values but genotype matrix has {expected} subjects ({path})")]
    PhenotypeLength {
        path: PathBuf,
        expected: usize,
        got: usize,
    },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("degenerate gene pair {pair}: zero cross-covariance with the phenotype")]
    DegeneratePair { pair: String },
    #[error("all {0} gene pairs are degenerate")]
    AllPairsDegenerate(usize),
    #[error("group lasso did not converge after {sweeps} sweeps (duality gap {gap:.3e})")]
    NoConvergence { sweeps: usize, gap: f64 },
    #[error("phenotype has zero variance")]
    ConstantPhenotype,
    #[error("signal vector is constant; R\u{b2} is undefined")]
    ConstantSignal,
    #[error("serialization failed: {0}")]
    Serde(#[from] serde_json::Error),
}

impl EpistasisError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        EpistasisError::Io {
            path: path.into(),
            source,
        }
    }
}
