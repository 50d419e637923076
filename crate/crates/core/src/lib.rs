//! Simulation and equalization of dual-polarization WDM transmission over
//! dispersion-managed fiber links.
//!
//! The crate is organized bottom-up:
//!
//! * [`signal`]: sample grids, FIR filtering, rate conversion.
//! * [`link`] and [`pmd`]: split-step forward propagation with PMD and ASE.
//! * [`transceiver`]: 16-QAM, WDM multiplexing and BER/Q measurement.
//! * [`rxdsp`]: channel selection, CD compensation, 2x2 MIMO, synchronization.
//! * [`dbp`]: back-propagation adapted to dispersion maps.
//! * [`ldbp`]: the learned, layered variant and its training loop.
//! * [`pipeline`]: end-to-end runs tying the stages together.

pub mod dbp;
pub mod error;
pub mod ldbp;
pub mod link;
pub mod pipeline;
pub mod pmd;
pub mod rxdsp;
pub mod signal;
pub mod transceiver;
pub mod units;

pub use error::{Error, Result};
pub use num_complex::Complex64;
pub use signal::DualPolField;
