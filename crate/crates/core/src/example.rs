//! The four-subsystem ring used as a regression fixture: four 25-state
//! subsystems, each abstracted to a single state.
//!
//! Subsystem `i` (0-based) listens to one peer: 2 → 0, 3 → 1, 1 → 2, 0 → 3.

use std::collections::BTreeMap;

use nalgebra::DMatrix;

use crate::model::{LinearSubsystem, Topology};
use crate::spsf::AbstractionCandidate;

pub const STATE_DIM: usize = 25;
pub const SUBSYSTEMS: usize = 4;
pub const PI: f64 = 0.99;
pub const KAPPA_HAT: f64 = 0.98;
pub const FEEDBACK: f64 = -0.95;
pub const AHAT: f64 = 2.0;
pub const BHAT: f64 = 1.0;
pub const DHAT: f64 = 0.096;

/// `(from, to)` wiring of the ring.
pub const EDGES: [(usize, usize); 4] = [(2, 0), (3, 1), (1, 2), (0, 3)];

/// Published values the regression run is compared against.
pub mod published {
    pub const RHO_INT: f64 = 0.88;
    pub const PSI: f64 = 0.0025;
    pub const RHO_EXT: f64 = 0.0;
    pub const COMPOSED_KAPPA_HAT: f64 = 0.1;
    pub const COMPOSED_PSI: f64 = 0.01;
    pub const SPECTRAL_RADIUS: f64 = 0.898;
    /// Published `S = −0.003·1`; the structural equation with `D̂ = 0.096`
    /// actually forces `−0.004·1`.
    pub const S_COEF: f64 = -0.003;
    pub const CLOSENESS: f64 = 0.90;
    pub const EPSILON: f64 = 1.0;
    pub const HORIZON: u64 = 10;
    /// Decimal places the published gain matrices are rounded to.
    pub const GAIN_DECIMALS: u32 = 2;
}

fn ones_col(v: f64) -> DMatrix<f64> {
    DMatrix::from_element(STATE_DIM, 1, v)
}

fn ones_row(v: f64) -> DMatrix<f64> {
    DMatrix::from_element(1, STATE_DIM, v)
}

pub fn subsystems() -> Vec<LinearSubsystem> {
    (0..SUBSYSTEMS)
        .map(|i| {
            let listener = EDGES.iter().find(|&&(from, _)| from == i).unwrap().1;
            LinearSubsystem {
                id: i,
                a: DMatrix::identity(STATE_DIM, STATE_DIM),
                b: DMatrix::identity(STATE_DIM, STATE_DIM),
                d: ones_col(0.1),
                f: ones_col(0.01),
                c_ext: ones_row(0.1),
                c_int: BTreeMap::from([(listener, ones_row(0.1))]),
            }
        })
        .collect()
}

pub fn topology(subs: &[LinearSubsystem]) -> Topology {
    Topology::from_pairs(subs, &EDGES).expect("fixture wiring is consistent")
}

/// One-state abstraction with `P = 1`, `F̂ = 0` and lifted outputs.
pub fn candidate(s: &LinearSubsystem) -> AbstractionCandidate {
    AbstractionCandidate::with_lifted_outputs(
        s,
        ones_col(1.0),
        DMatrix::from_element(1, 1, AHAT),
        DMatrix::from_element(1, 1, BHAT),
        DMatrix::from_element(1, 1, DHAT),
        DMatrix::zeros(1, 1),
    )
}

/// Published `M = I`, `K = −0.95 I`.
pub fn published_m_k() -> (DMatrix<f64>, DMatrix<f64>) {
    (
        DMatrix::identity(STATE_DIM, STATE_DIM),
        DMatrix::identity(STATE_DIM, STATE_DIM) * FEEDBACK,
    )
}
