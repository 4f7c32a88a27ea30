use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("design matrix is rank deficient (column {column}: |r_jj| = {diag:e} below {threshold:e})")]
    RankDeficient {
        column: usize,
        diag: f64,
        threshold: f64,
    },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite input: {0}")]
    NonFiniteInput(String),
    #[error("transformed response has degenerate variance ({0:e})")]
    DegenerateVariance(f64),
    #[error("degenerate sample: {0}")]
    DegenerateSample(String),
    #[error("matrix is not positive semi-definite: {0}")]
    NotPsd(String),
    #[error("all columns are zero")]
    AllZero,
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
    #[error("degenerate gene: {0}")]
    DegenerateGene(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parse error at row {row}, column {column:?}: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },
    #[error("missing column {0:?}")]
    MissingColumn(String),
    #[error("bad magic bytes in {0}")]
    BadMagic(PathBuf),
    #[error("truncated file {0}")]
    TruncatedFile(PathBuf),
    #[error("unknown SNP {0:?}")]
    UnknownSnp(String),
    #[error("sample alignment failed: {matched} of {total} phenotype IDs found in genotype file ({missing} missing)")]
    Alignment {
        matched: usize,
        total: usize,
        missing: usize,
    },
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Numerical failures map to exit code 3, everything else to 2.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::RankDeficient { .. }
                | Error::DegenerateVariance(_)
                | Error::DegenerateSample(_)
                | Error::NotPsd(_)
                | Error::AllZero
                | Error::NumericalFailure(_)
                | Error::DegenerateGene(_)
        )
    }
}
