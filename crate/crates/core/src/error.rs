use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs} is {lhs_shape:?}, {rhs} is {rhs_shape:?}")]
    Shape {
        op: &'static str,
        lhs: &'static str,
        lhs_shape: (usize, usize),
        rhs: &'static str,
        rhs_shape: (usize, usize),
    },

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("index capacity exceeded: region size {region} needs more than {bits} bits")]
    Capacity { region: usize, bits: u32 },

    #[error("embedded index corrupted: {0}")]
    Corruption(String),

    #[error("state error: {0}")]
    State(String),

    #[error("correlation undefined: operand has zero norm")]
    UndefinedCorrelation,

    #[error("training diverged at step {step} (phase {phase}): loss = {loss}")]
    Divergence { step: u64, phase: usize, loss: f64 },

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(
        op: &'static str,
        lhs: &'static str,
        lhs_shape: (usize, usize),
        rhs: &'static str,
        rhs_shape: (usize, usize),
    ) -> Self {
        Error::Shape {
            op,
            lhs,
            lhs_shape,
            rhs,
            rhs_shape,
        }
    }
}
