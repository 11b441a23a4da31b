//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: lhs {lhs:?} vs rhs {rhs:?} in {op}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("loss must be a scalar, got shape {0:?}")]
    LossNotScalar(Vec<usize>),

    #[error("tensor id {0} is not on this tape")]
    NotOnTape(usize),

    #[error("degenerate denominator: |logit_{class_index}| = {value:.3e} < 1e-8")]
    DegenerateDenominator { class_index: usize, value: f64 },

    #[error("class indices must differ, both are {0}")]
    ClassesMustDiffer(usize),

    #[error("class index {index} out of range (num_classes = {num_classes})")]
    ClassOutOfRange { index: usize, num_classes: usize },

    #[error("overlapping planted regions: patch {patch} claimed by classes {a} and {b}")]
    OverlappingRegions { patch: usize, a: usize, b: usize },

    #[error("planted region for class {class} is invalid: {reason}")]
    InvalidRegion { class: usize, reason: String },

    #[error("image dimensions {got_h}x{got_w}x{got_c} do not match expected {want_h}x{want_w}x{want_c}")]
    ImageDimMismatch {
        got_h: usize,
        got_w: usize,
        got_c: usize,
        want_h: usize,
        want_w: usize,
        want_c: usize,
    },

    #[error("composite layout degenerate: {0}")]
    DegenerateLayout(String),

    #[error("weight file: missing tensor `{0}`")]
    MissingTensor(String),

    #[error("weight file: tensor `{name}` shape {got:?} does not match expected {want:?}")]
    WeightShapeMismatch {
        name: String,
        got: Vec<usize>,
        want: Vec<usize>,
    },

    #[error("weight file: truncated payload for tensor `{name}` (need {need} bytes at offset {offset}, payload is {have} bytes)")]
    TruncatedPayload {
        name: String,
        offset: usize,
        need: usize,
        have: usize,
    },

    #[error("weight file: malformed header: {0}")]
    MalformedHeader(String),

    #[error("unknown image format in `{0}`")]
    UnknownImageFormat(String),

    #[error("corrupt image stream in `{path}`: {reason}")]
    CorruptImage { path: String, reason: String },

    #[error("saliency length {got} does not match token count minus one ({want})")]
    SaliencyLengthMismatch { got: usize, want: usize },

    #[error("empty dataset directory `{0}`")]
    EmptyDataset(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("io error on `{path}`: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
