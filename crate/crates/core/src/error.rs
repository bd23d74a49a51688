use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Shape(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid config field `{field}`: {reason}")]
    Config { field: &'static str, reason: String },

    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("token id {token} is outside the vocabulary (size {vocab})")]
    TokenOutOfRange { token: u32, vocab: usize },

    #[error("position {position} exceeds the configured maximum of {max}")]
    PositionOverflow { position: usize, max: usize },

    #[error("position regression at layer {layer}: got {got}, last cached {last}")]
    PositionRegression {
        layer: usize,
        got: usize,
        last: usize,
    },

    #[error("no residual checkpoint for layer {0}")]
    MissingResidual(usize),

    /// `p_i > 0` where `q_i = 0`.
    #[error("KL divergence is infinite: q is zero at index {index} where p = {p}")]
    InfiniteDivergence { index: usize, p: f64 },

    #[error("outputs diverged across decode modes: {0}")]
    Mismatch(String),

    #[error("weight file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
