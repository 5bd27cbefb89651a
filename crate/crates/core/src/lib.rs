//! Certified abstractions of interconnected discrete-time linear stochastic
//! systems.
//!
//! * [`model`]: subsystems, wiring and the assembled interconnection.
//! * [`spsf`]: per-subsystem quadratic simulation functions and their
//!   certificates.
//! * [`smallgain`]: gain matrices, the small-gain test and composition.
//! * [`bounds`]: closeness probability bounds.
//! * [`montecarlo`]: simulation-based validation of the bounds.

pub mod bounds;
pub mod error;
pub mod example;
pub mod linalg;
pub mod model;
pub mod montecarlo;
pub mod random;
pub mod smallgain;
pub mod spsf;

pub use error::{Error, Result};
pub use model::{assemble_interconnection, Edge, InterconnectedSystem, LinearSubsystem, Topology};
pub use smallgain::{CompositionCertificate, DegreeMode, GainDecomposition};
pub use spsf::{
    AbstractionCandidate, AbstractionCertificate, CertifiedAbstraction, RhoExtVariant,
    SpsfConstants,
};
