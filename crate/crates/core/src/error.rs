//! Error type shared by every stage of the detector.

use std::fmt;
use std::path::PathBuf;

use thiserror::Error;

/// Pipeline stage a failure is attributed to when reported from `run_episode`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Load,
    Frontend,
    Episode,
    Segmentation,
    Embedding,
    FineTune,
    Prototypes,
    NegativeSelection,
    Adaptation,
    PostProcess,
    Evaluation,
    Output,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Load => "load",
            Stage::Frontend => "frontend",
            Stage::Episode => "episode",
            Stage::Segmentation => "segmentation",
            Stage::Embedding => "embedding",
            Stage::FineTune => "fine-tune",
            Stage::Prototypes => "prototypes",
            Stage::NegativeSelection => "negative-selection",
            Stage::Adaptation => "adaptation",
            Stage::PostProcess => "post-process",
            Stage::Evaluation => "evaluation",
            Stage::Output => "output",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    // audio
    #[error("unsupported audio encoding: {0}")]
    UnsupportedEncoding(String),
    #[error("corrupt WAV header: {0}")]
    CorruptHeader(String),
    #[error("audio contains no samples")]
    EmptyAudio,
    #[error("signal too short: {samples} samples, need at least {needed}")]
    TooShort { samples: usize, needed: usize },
    #[error("sample rate mismatch: got {got} Hz, expected {expected} Hz")]
    SampleRateMismatch { got: u32, expected: u32 },

    // annotations / episodes
    #[error("malformed annotation row {row}: {reason}")]
    MalformedRow { row: usize, reason: String },
    #[error("unknown label {label:?} on row {row}")]
    UnknownLabel { row: usize, label: String },
    #[error("episode has no positive events")]
    NoPositives,
    #[error("no query span: recording ends at {duration_s} s, support ends at {support_end_s} s")]
    EmptyQuery { duration_s: f64, support_end_s: f64 },

    // embeddings
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("row count mismatch: expected {expected}, got {got}")]
    RowCountMismatch { expected: usize, got: usize },
    #[error("non-finite value at row {row}, column {col}")]
    NonFiniteValue { row: usize, col: usize },
    #[error("training corpus must contain both classes")]
    SingleClassCorpus,

    // prototypes / selection
    #[error("class {0} has no examples")]
    EmptyClass(&'static str),
    #[error("query has {got} segments, negative selection needs at least {needed}")]
    QueryTooSmall { got: usize, needed: usize },

    // adaptation
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("probability matrix is empty")]
    EmptyMatrix,

    // post-processing
    #[error("{probs} probability rows for {segments} segments")]
    AlignmentMismatch { probs: usize, segments: usize },

    // synthesis / corpus
    #[error("could not place {wanted} events in {length_s} s")]
    PlacementFailure { wanted: usize, length_s: f64 },
    #[error("manifest lists no test recordings")]
    EmptyCorpus,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stage this error was tagged with, if any.
    pub fn stage(&self) -> Option<Stage> {
        match self {
            Error::Stage { stage, .. } => Some(*stage),
            _ => None,
        }
    }
}

/// Attach a pipeline stage to an error.
pub(crate) trait StageExt<T> {
    fn stage(self, stage: Stage) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: Stage) -> Result<T> {
        self.map_err(|e| match e {
            tagged @ Error::Stage { .. } => tagged,
            other => Error::Stage {
                stage,
                source: Box::new(other),
            },
        })
    }
}
