use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate distribution: {0}")]
    DegenerateDistribution(String),

    #[error("code length {0} outside [1, 32]")]
    InvalidBits(u32),

    #[error("infeasible configuration: {0}")]
    Infeasible(String),

    #[error("packet of {bits} bits exceeds budget of {budget} bits")]
    PacketOverflow { bits: usize, budget: usize },

    #[error("{field} value {value} does not fit in {width} bits")]
    FieldOverflow {
        field: &'static str,
        value: u64,
        width: u32,
    },

    #[error("unsupported packet version {0}")]
    UnsupportedVersion(u8),

    #[error("corrupt packet: {0}")]
    CorruptPacket(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
