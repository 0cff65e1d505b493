//! Physical-layer spoofing laboratory for NC-OFDM/OFDM links.
//!
//! The crate simulates the three-party setting of a legitimate transmitter,
//! a legitimate receiver and an adversary that overhears the transmitter,
//! infers its transmission parameters and injects bogus frames. Parameter
//! inference is attempted with classical cyclostationary analysis,
//! supervised feed-forward networks and unsupervised variational
//! autoencoders; the damage is measured as the bit-error rate at the
//! receiver.

pub mod channel;
pub mod cyclo;
pub mod dataset;
pub mod attack;
pub mod error;
pub mod experiments;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod vae;
pub mod waveform;

pub use error::{Error, Result};
