//! Information-geometry detection for large MIMO systems.
//!
//! The crate is organised bottom-up:
//!
//! * [`constellation`]: square QAM, the per-dimension real alphabet, Gray labels.
//! * [`channel`]: channel instances, the real lifting, noise and file formats.
//! * [`exp_family`]: coordinates and calculus of product distributions.
//! * [`iga`]: the iterative detector itself.
//! * [`oracle`]: exhaustive references and the LMMSE baseline.
//! * [`harness`]: seeded Monte Carlo experiments and CSV output.

pub mod channel;
pub mod constellation;
pub mod error;
pub mod exp_family;
pub mod harness;
pub mod iga;
pub mod oracle;
pub mod seed;

pub use error::{Error, Result};
