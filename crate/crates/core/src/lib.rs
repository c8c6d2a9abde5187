//! Streaming blind source separation for multichannel electrophysiological
//! signals: online recursive whitening, constrained online unmixing, and
//! task-level identification (motor-unit spike trains, respiratory envelopes),
//! with synthetic generators and evaluation metrics for end-to-end validation.

pub mod block;
pub mod cli;
pub mod error;
pub mod identify;
pub mod io;
pub mod metrics;
pub mod oracle;
pub mod pipeline;
pub mod schedule;
pub mod separate;
pub mod synth;
pub mod whiten;

pub use block::MultichannelBlock;
pub use error::{CorssError, Result};
pub use schedule::ForgettingSchedule;
