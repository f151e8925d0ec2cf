use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("extent {0} is not a power of two")]
    NotPowerOfTwo(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("infeasible mask: {0}")]
    InfeasibleMask(String),
    #[error("degenerate knot grid: {0}")]
    DegenerateGrid(String),
    #[error("timestep {t} out of range for {steps} steps")]
    TimestepOutOfRange { t: usize, steps: usize },
    #[error("images are identical; PSNR is unbounded")]
    IdenticalImages,
    #[error("reference image has zero norm")]
    ZeroReference,
    #[error("image too small: {0}")]
    TooSmall(String),
    #[error("non-finite training loss {value} at epoch {epoch}")]
    NonFiniteLoss { epoch: usize, value: f64 },
    #[error("empty batch")]
    EmptyBatch,
    #[error("bad magic bytes")]
    BadMagic,
    #[error("truncated file: expected {expected} bytes, found {actual}")]
    Truncated { expected: u64, actual: u64 },
    #[error("shape overflow: {0}")]
    ShapeOverflow(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
