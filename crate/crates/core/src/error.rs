use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("index {index} out of range for {what} of size {size}")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        size: usize,
    },
    #[error("loss is undefined: every target position is ignored")]
    UndefinedLoss,
    #[error("backward requires a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("loss is detached: no recorded path reaches a parameter")]
    DetachedGraph,
    #[error("graph was already backpropagated; build a new graph")]
    BackwardReplayed,
    #[error("configuration error: {0}")]
    Config(String),
    #[error("routing error: {0}")]
    Routing(String),
    #[error("corpus error: {0}")]
    Corpus(String),
    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: u64, loss: f32 },
    #[error("evaluation error: {0}")]
    Eval(String),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub(crate) fn routing(msg: impl Into<String>) -> Self {
        Error::Routing(msg.into())
    }
    pub(crate) fn corpus(msg: impl Into<String>) -> Self {
        Error::Corpus(msg.into())
    }
}
