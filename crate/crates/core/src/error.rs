use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("index out of range in {op}: {index} not in [0, {bound})")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("memory initialization failed: no {modality} clips for identities {identities:?}")]
    MemoryInit {
        modality: &'static str,
        identities: Vec<usize>,
    },

    #[error("no {modality} sample of identity {identity} in batch")]
    Selection {
        modality: &'static str,
        identity: usize,
    },

    #[error("cannot sample batch: {0}")]
    Sampling(String),

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("checkpoint does not match model: {0}")]
    Load(String),

    #[error("query identity {0} has no match in the gallery")]
    Protocol(usize),

    #[error("training diverged at step {step}: total loss {value}")]
    Diverged { step: usize, value: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
