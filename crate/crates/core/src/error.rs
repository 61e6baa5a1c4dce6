use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    // corpus
    #[error("malformed manifest {path}:{line}: {reason}")]
    MalformedManifest { path: PathBuf, line: usize, reason: String },
    #[error("duplicate utterance id {0:?}")]
    DuplicateId(String),
    #[error("unknown emotion label {0:?}")]
    UnknownLabel(String),
    #[error("invalid synthetic corpus spec: {0}")]
    InvalidSpec(String),
    #[error("signal is shorter than one analysis window")]
    EmptySignal,
    #[error("signal contains non-finite samples")]
    NonFiniteInput,
    #[error("corrupt feature file {path}: {reason}")]
    CorruptFeatures { path: PathBuf, reason: String },

    // encoder
    #[error("layer tap {layer_id} out of range for a {n_layers}-layer encoder")]
    TapOutOfRange { layer_id: i32, n_layers: usize },
    #[error("mask index {index} out of range for {len} frames")]
    MaskIndexOutOfRange { index: usize, len: usize },
    #[error("mask probability {0} not in (0, 1)")]
    InvalidProbability(f64),
    #[error("incompatible configuration: {0}")]
    IncompatibleConfig(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("feature dimension {found} does not match encoder input dimension {expected}")]
    InputDimMismatch { expected: usize, found: usize },

    // training heads and losses
    #[error("empty frame sequence")]
    EmptySequence,
    #[error("non-finite logits")]
    NonFiniteLogits,
    #[error("utterance {0} has no gender label")]
    MissingGenderLabel(String),
    #[error("{stage} loss diverged at step {step}")]
    DivergedLoss { stage: &'static str, step: usize },
    #[error("empty corpus")]
    EmptyCorpus,

    // gmp
    #[error("k-means needs at least {k} points, got {points}")]
    TooFewPoints { points: usize, k: usize },
    #[error("invalid GMP configuration: {0}")]
    InvalidGmpConfig(String),
    #[error("corrupt file {path}: {reason}")]
    CorruptFile { path: PathBuf, reason: String },
    #[error("label {label} at frame {frame}, scale {scale} is outside [0, {k})")]
    RangeViolation { frame: usize, scale: usize, label: u32, k: u32 },
    #[error("empty input")]
    EmptyInput,

    // stage 2
    #[error("mask covers no frames")]
    EmptyMask,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("no GMP labels for utterance {0}")]
    MissingGmp(String),
    #[error("utterance {id}: GMP labels have {found} frames, features have {expected}")]
    FrameCountMismatch { id: String, expected: usize, found: usize },

    // stage 3
    #[error("zero-norm vector in cosine similarity")]
    ZeroVector,
    #[error("non-finite cosine")]
    NonFiniteCosine,

    // eval
    #[error("confusion matrix is empty")]
    EmptyMatrix,
    #[error("expected 5 sessions, corpus has {0}")]
    WrongSessionCount(usize),
    #[error("speaker {0} appears in more than one session")]
    SpeakerLeak(String),
    #[error("fold {fold}: {source}")]
    Fold { fold: usize, source: Box<Error> },

    // pipeline
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("{stage}: {source}")]
    Stage { stage: &'static str, source: Box<Error> },
    #[error("provenance mismatch: {0}")]
    ProvenanceMismatch(String),
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage { stage, source: Box::new(self) }
    }

    pub fn in_fold(self, fold: usize) -> Self {
        Error::Fold { fold, source: Box::new(self) }
    }

    /// The innermost error, past fold and stage annotations.
    pub fn root(&self) -> &Error {
        match self {
            Error::Fold { source, .. } | Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }

    /// Process exit code: 2 config, 3 data, 4 divergence.
    pub fn exit_code(&self) -> i32 {
        match self.root() {
            Error::ConfigInvalid(_)
            | Error::InvalidSpec(_)
            | Error::InvalidGmpConfig(_)
            | Error::InvalidProbability(_)
            | Error::TapOutOfRange { .. }
            | Error::IncompatibleConfig(_) => 2,
            Error::DivergedLoss { .. } | Error::NonFiniteLogits | Error::NonFiniteCosine => 4,
            _ => 3,
        }
    }
}
