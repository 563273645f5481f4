use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("image dimensions must be non-zero, got {width}x{height}")]
    ZeroDimension { width: u32, height: u32 },

    #[error("dimension mismatch: expected {expected:?}, got {actual:?}")]
    DimensionMismatch {
        expected: (u32, u32),
        actual: (u32, u32),
    },

    #[error("invalid pixel data: {0}")]
    InvalidPixels(String),

    #[error("class index {index} outside palette range 1..{size}")]
    ClassOutOfPalette { index: u32, size: usize },

    #[error("prompt template must contain exactly one `{placeholder}` placeholder, found {found}")]
    TemplatePlaceholder {
        placeholder: &'static str,
        found: usize,
    },

    #[error("class name must not be empty")]
    EmptyClassName,

    #[error("backend `{backend}` unavailable: {reason}")]
    BackendUnavailable { backend: String, reason: String },

    #[error("backend `{backend}` returned a malformed response: {reason}")]
    MalformedResponse { backend: String, reason: String },

    #[error("requested {requested} images but backend limit is {limit}")]
    CountExceedsLimit { requested: usize, limit: usize },

    #[error("mock generator requires the source image and mask for `{0}`")]
    MissingSource(String),

    #[error("fold {fold} out of range 0..{folds}")]
    FoldOutOfRange { fold: u32, folds: u32 },

    #[error("class manifest has {actual} classes, expected {expected}")]
    ManifestCount { expected: usize, actual: usize },

    #[error("duplicate entry `{0}` in manifest")]
    DuplicateEntry(String),

    #[error("stratum too small to sample: class {class} would receive no images at ratio {ratio}")]
    StratumTooSmall { class: u32, ratio: f64 },

    #[error("class {0} has no validation images after intersection")]
    NoValidationImages(u32),

    #[error("class {class} has {available} validation images, {required} needed")]
    InsufficientValidation {
        class: u32,
        available: usize,
        required: usize,
    },

    #[error("not enough samples: {0}")]
    InsufficientSamples(String),

    #[error("episode `{0}` must hold exactly one original support and no auxiliaries")]
    NotOneShot(String),

    #[error("provenance mismatch: auxiliary from `{found}` cannot extend support `{expected}`")]
    ProvenanceMismatch { expected: String, found: String },

    #[error("mask has no foreground pixels")]
    EmptyMask,

    #[error("cannot normalize a zero vector")]
    ZeroVector,

    #[error("channel mismatch: expected {expected}, got {actual}")]
    ChannelMismatch { expected: usize, actual: usize },

    #[error("model failed on episode `{episode}`: {reason}")]
    ModelFailure { episode: String, reason: String },

    #[error("empty class list")]
    EmptyClassList,

    #[error("report configurations differ: {0}")]
    ConfigMismatch(String),

    #[error("unresolvable provenance: no source support `{0}`")]
    UnresolvedSource(String),

    #[error("drift report has no record for generated image `{0}`")]
    MissingDriftRecord(String),

    #[error("floor {0} outside [0, 1]")]
    FloorOutOfRange(f64),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("class {class} is missing {origin} prototypes")]
    MissingOrigin { class: u32, origin: &'static str },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Self::Json {
            context: context.into(),
            source,
        }
    }

    /// True for failures caused by an unreachable or misbehaving remote service.
    pub fn is_backend(&self) -> bool {
        matches!(
            self,
            Self::BackendUnavailable { .. } | Self::MalformedResponse { .. }
        )
    }
}
