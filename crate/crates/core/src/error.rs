use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {shapes:?}: {detail}")]
    Shape {
        op: &'static str,
        shapes: Vec<Vec<usize>>,
        detail: String,
    },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),
    #[error("kernel size {0} is even; sparse convolution needs a center tap")]
    EvenKernel(usize),
    #[error("key set is empty")]
    EmptyKeys,
    #[error("weather label {0} outside 0..7")]
    InvalidLabel(usize),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("non-finite loss term `{term}` at step {step}")]
    NonFiniteLoss { term: &'static str, step: usize },
    #[error("fusion gate left the open interval (0, 1) at layer {0}")]
    GateSaturated(usize),
    #[error("invalid configuration: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, shapes: &[&[usize]], detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            shapes: shapes.iter().map(|s| s.to_vec()).collect(),
            detail: detail.into(),
        }
    }
}
