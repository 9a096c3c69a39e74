//! Few-shot bioacoustic event detection.
//!
//! Given one recording and its first five annotated target events, the
//! detector builds a two-class prototype classifier from the annotated head,
//! optionally enriches the negative prototype with query segments that look
//! unambiguously like background, optionally adapts the student classifier
//! towards a second (teacher) embedder's predictions, and turns per-segment
//! probabilities into onset/offset events scored by event-level F-measure.
//!
//! ```text
//! wav -> resample -> mel + PCEN -> segment plan -> embed -> W0 -> fine-tune -> W1
//!     -> negative selection -> W2 -> teacher/student adaptation -> events -> F
//! ```

pub mod adaptive;
pub mod audio;
pub mod embed;
pub mod error;
pub mod eval;
pub mod optim;
pub mod pipeline;
pub mod proto;
pub mod synth;
pub mod task;

pub use error::{Error, Result, Stage};
