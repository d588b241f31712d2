use thiserror::Error;

pub type Result<T, E = HscError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum HscError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("map chain is not composable at stage {stage}: {reason}")]
    ChainMismatch { stage: usize, reason: String },

    #[error("nonpositive probability {value} at element {index}")]
    NonPositiveProbability { index: usize, value: f64 },

    #[error("cdf table: {0}")]
    CdfTable(String),

    #[error("symbol {symbol} not representable by table {table} (no escape slot)")]
    SymbolOutOfRange { symbol: i64, table: usize },

    #[error("bit source exhausted after {consumed} bytes (chunk has {available})")]
    SourceExhausted { consumed: usize, available: usize },

    #[error("coder error at symbol {position}: {reason}")]
    Coder { position: usize, reason: String },

    #[error("container truncated: needed {needed} bytes at offset {offset}, have {available}")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },

    #[error("bad magic {found:?}")]
    BadMagic { found: [u8; 4] },

    #[error("container: {0}")]
    Container(String),

    #[error("unsupported container version {0}")]
    BadVersion(u8),

    #[error("model hash mismatch: stream {stream}, model {model}")]
    HashMismatch { stream: String, model: String },

    #[error("container field {field} = {value} disagrees with model ({expected})")]
    HeaderMismatch {
        field: &'static str,
        value: u64,
        expected: u64,
    },

    #[error("slice {requested} decoded out of order (next expected slice is {expected})")]
    SliceOrder { requested: usize, expected: usize },

    #[error("non-finite values in {0}")]
    NonFinite(&'static str),

    #[error("missing parameter {0}")]
    MissingParam(String),

    #[error("model file: {0}")]
    ModelFormat(String),

    #[error("config: {0}")]
    Config(String),

    #[error("training diverged in stage {stage} at step {step} (loss {loss})")]
    Divergence {
        stage: &'static str,
        step: usize,
        loss: f64,
    },

    #[error("training for lambda {lambda} failed: {source}")]
    Sweep {
        lambda: f64,
        #[source]
        source: Box<HscError>,
    },

    #[error("rd curve: {0}")]
    Curve(String),

    #[error("image: {0}")]
    Image(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub(crate) fn shape_err(op: &'static str, left: &[usize], right: &[usize]) -> HscError {
    HscError::Shape {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}
