//! Desk-scale video-to-audio generation pipeline.
//!
//! The crate covers the full loop on a synthetic paired audio/visual task:
//! waveform <-> latent featurizer, residual vector quantizer, delay-pattern
//! token streams, a decoder-only transformer conditioned on a visual prefix
//! (three attention mechanisms), classifier-free guidance sampling, and the
//! evaluation metrics (Fréchet distance, label KLD, onset alignment).

pub mod cli;
pub mod config;
pub mod error;
pub mod featurizer;
pub mod infer;
pub mod lm;
pub mod masks;
pub mod metrics;
pub mod patterns;
pub mod pipeline;
pub mod rvq;
pub mod toy_data;
pub mod util;
pub mod visual;
pub mod wav;

pub use ndarray;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use featurizer::{FeaturizerConfig, LatentSequence};
pub use infer::GenConfig;
pub use lm::{LMParams, ModelConfig, TrainConfig};
pub use masks::{AttentionMask, MaskSpec, Mechanism};
pub use patterns::StepSequence;
pub use rvq::{RVQConfig, RVQModel, TokenGrid};
pub use toy_data::{EpisodeSpec, Event, VisualTrack, Waveform};
pub use visual::VisualFeatures;
