use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("missing parameter `{0}`")]
    MissingParameter(String),

    #[error("parameter `{0}` has no gradient")]
    MissingGradient(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("symbol {symbol} at index {index} is outside table support [{min}, {max}]")]
    SymbolOutOfRange {
        index: usize,
        symbol: i32,
        min: i32,
        max: i32,
    },

    #[error("coded stream truncated at byte {position}")]
    Truncated { position: usize },

    #[error("corrupt coded stream: {0}")]
    Corrupt(String),

    #[error("bitstream: {0}")]
    Bitstream(String),

    #[error("model mismatch: stream expects {expected:016x}, model is {found:016x}")]
    ModelMismatch { expected: u64, found: u64 },

    #[error("training stage order: {0}")]
    StageOrder(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("no feasible assignment; minimal achievable cost is {min_cost}")]
    Infeasible { min_cost: u128 },

    #[error("model file: {0}")]
    ModelFormat(String),

    #[error("image: {0}")]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
