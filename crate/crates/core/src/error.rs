use thiserror::Error;

use crate::family::Family;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("non-finite natural parameter at person {person}, item {item}, time {time}")]
    NonFiniteEta {
        person: usize,
        item: usize,
        time: usize,
    },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("covariate matrix is rank deficient; dependent columns {columns:?}")]
    RankDeficient { columns: Vec<usize> },

    #[error("SVD initialization needs Bernoulli items, item {item} is {family:?}")]
    UnsupportedInit { item: usize, family: Family },

    #[error("matrix is near singular, smallest eigenvalue {smallest:e}")]
    NearSingular { smallest: f64 },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("sweep {sweep}: {source}")]
    Sweep {
        sweep: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// True for failures caused by the inputs rather than by the arithmetic.
    pub fn is_input_error(&self) -> bool {
        match self {
            Error::Config(_)
            | Error::Data(_)
            | Error::RankDeficient { .. }
            | Error::UnsupportedInit { .. }
            | Error::UndefinedMetric(_) => true,
            Error::Sweep { source, .. } => source.is_input_error(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
