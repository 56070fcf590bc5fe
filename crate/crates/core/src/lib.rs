#![allow(clippy::neg_cmp_op_on_partial_ord)]
//! Acoustic UAV detection, array self-calibration, direction-of-arrival
//! estimation and spectral-signature classification for small microphone
//! arrays, together with a ground-truth scene simulator.

pub mod calibration;
pub mod classifier;
pub mod doa;
pub mod error;
pub mod formats;
pub mod frontend;
pub mod geometry;
pub mod interp;
pub mod pipeline;
pub mod simulator;

pub use error::{Error, Result};
pub use frontend::{
    DecimatedStream, LogAmpModel, RawAdcBlock, SpectrumAnalyzer, SpectrumFrame, BIN_WIDTH_HZ,
    FRAME_LEN, PSD_BINS, SAMPLE_RATE_HZ,
};
pub use geometry::{ArrayGeometry, Point3, SPEED_OF_SOUND};
