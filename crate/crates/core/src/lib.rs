//! Query-efficient hard-label model extraction.
//!
//! The attack runs in two stages against a [`oracle::VictimOracle`] that only
//! answers top-1 labels under a fixed query budget:
//!
//! 1. pick proxy samples ([`selection`]), query them, and fit an anchor on the
//!    labels alone ([`anchor`]);
//! 2. train a student on the queried set plus the unqueried remainder, guided
//!    by the frozen anchor and an EMA teacher ([`querywise`]).
//!
//! [`runner`] wires the stages into a reproducible pipeline and [`metrics`]
//! scores the result.

pub mod anchor;
pub mod data;
pub mod datapool;
pub mod error;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod oracle;
pub mod querywise;
pub mod runner;
pub mod selection;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
pub use model::{Architecture, Classifier, Network};
pub use numerics::{Logits, Matrix, Probs};
