//! Exit-code classification.

use crate::config::ConfigError;
use serde::Serialize;
use treerl::credit::CreditError;
use treerl::evalx::{CsvError, EvalError};
use treerl::gentree::ForestError;
use treerl::policy::{BackendError, GradeError};
use treerl::search::SearchError;
use treerl::theory::TheoryError;
use treerl::trainer::TrainError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Config,
    Backend,
    Invariant,
    Other,
}

impl Kind {
    pub fn exit_code(self) -> i32 {
        match self {
            Kind::Config => 2,
            Kind::Backend => 3,
            Kind::Invariant => 4,
            Kind::Other => 1,
        }
    }
}

/// Raised for an empty or unusable report directory.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct InputError(pub String);

fn backend(e: &BackendError) -> Kind {
    match e {
        BackendError::Http { .. } => Kind::Backend,
        BackendError::InvalidParams(_) => Kind::Config,
        BackendError::Vocab { .. } | BackendError::Other(_) => Kind::Invariant,
    }
}

fn search(e: &SearchError) -> Kind {
    match e {
        SearchError::Backend(b) => backend(b),
        SearchError::InvalidConfig(_) | SearchError::BudgetTooSmall { .. } => Kind::Config,
        SearchError::Forest(_) | SearchError::Grade(_) => Kind::Invariant,
        SearchError::MaskExhausted { .. } => Kind::Other,
    }
}

fn eval(e: &EvalError) -> Kind {
    match e {
        EvalError::Search(s) => search(s),
        EvalError::InvalidArgument(_) | EvalError::EmptyDataset => Kind::Config,
        EvalError::NoResponses(_) | EvalError::EmptyHistogram => Kind::Invariant,
    }
}

pub fn classify(err: &anyhow::Error) -> Kind {
    for cause in err.chain() {
        if cause.is::<ConfigError>() || cause.is::<InputError>() {
            return Kind::Config;
        }
        if let Some(e) = cause.downcast_ref::<BackendError>() {
            return backend(e);
        }
        if let Some(e) = cause.downcast_ref::<SearchError>() {
            return search(e);
        }
        if let Some(e) = cause.downcast_ref::<EvalError>() {
            return eval(e);
        }
        if let Some(e) = cause.downcast_ref::<TrainError>() {
            return match e {
                TrainError::InvalidConfig(_) | TrainError::GroupTooSmall(_) => Kind::Config,
                TrainError::NonFinite { .. } | TrainError::Update(_) => Kind::Invariant,
            };
        }
        if let Some(e) = cause.downcast_ref::<TheoryError>() {
            return match e {
                TheoryError::OutOfDomain { .. } | TheoryError::InvalidArgument(_) => Kind::Config,
                TheoryError::Search(s) => search(s),
                TheoryError::Eval(s) => eval(s),
            };
        }
        if cause.is::<ForestError>() || cause.is::<CreditError>() || cause.is::<GradeError>() {
            return Kind::Invariant;
        }
        if cause.is::<CsvError>() {
            return Kind::Other;
        }
    }
    Kind::Other
}

#[derive(Serialize)]
pub struct ErrorRecord<'a> {
    pub exit_code: i32,
    pub kind: Kind,
    pub message: String,
    pub command: &'a str,
}
