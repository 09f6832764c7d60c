//! Simulation and analysis of a 1 GHz clocked entangled-photon-pair source.
//!
//! The crate is organised along the measurement chain:
//!
//! * [`cascade`] samples biexciton-cascade emissions cycle by cycle,
//! * [`link`] carries photons through fiber and detectors into time tags,
//! * [`timetag`] holds the tag type, clock folding and the binary stream format,
//! * [`correlator`] builds coincidence grids and g² histograms,
//! * [`fidelity`] turns three-basis grids into Bell-state fidelity maps,
//! * [`polcontrol`] models the retarder stack and its calibration loop,
//! * [`config`] and [`pipeline`] tie the pieces into reproducible runs.

pub mod cascade;
pub mod config;
pub mod correlator;
pub mod error;
pub mod fidelity;
pub mod link;
pub mod pipeline;
pub mod polarization;
pub mod polcontrol;
pub mod rng;
pub mod timetag;

pub use error::{Error, Result};
