//! Random instance generators for property and acceptance testing.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::linalg::pseudo_inverse;
use crate::model::LinearSubsystem;
use crate::montecarlo::SamplePoint;
use crate::smallgain::{nonnegative_spectral_radius, GainDecomposition};
use crate::spsf::{certify, AbstractionCandidate, CertifiedAbstraction, CertifyOptions};

pub fn gaussian_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        z * scale
    })
}

pub fn gaussian_vector<R: Rng + ?Sized>(rng: &mut R, len: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(len, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        z * scale
    })
}

/// Random subsystem with `n` states and `m` inputs, wired to peer `1`.
pub fn random_subsystem<R: Rng + ?Sized>(rng: &mut R, n: usize, m: usize) -> LinearSubsystem {
    let p = rng.random_range(1..=2);
    let q = rng.random_range(1..=2);
    let r = rng.random_range(1..=2);
    let ri = rng.random_range(1..=2);
    let scale = 1.0 / (n as f64).sqrt();
    LinearSubsystem {
        id: 0,
        a: gaussian_matrix(rng, n, n, scale),
        b: gaussian_matrix(rng, n, m, 1.0),
        d: gaussian_matrix(rng, n, p, 0.5),
        f: gaussian_matrix(rng, n, q, 0.1),
        c_ext: gaussian_matrix(rng, r, n, scale),
        c_int: BTreeMap::from([(1, gaussian_matrix(rng, ri, n, scale))]),
    }
}

/// Random concrete/abstract pair for which the structural equations hold
/// exactly: `P`, `Â`, `Q`, `D̂`, `S` are drawn first and `A`, `D` are
/// completed from them. `M`, `K` are synthesised. Returns `None` when the
/// synthesis is infeasible for the drawn pair.
pub fn random_certified_pair<R: Rng + ?Sized>(
    rng: &mut R,
    n: usize,
    nhat: usize,
    m: usize,
) -> Option<(LinearSubsystem, CertifiedAbstraction)> {
    assert!(nhat <= n && m >= 1);
    let mut s = random_subsystem(rng, n, m);
    let p = gaussian_matrix(rng, n, nhat, 1.0);
    let ahat = gaussian_matrix(rng, nhat, nhat, 1.0 / (nhat as f64).sqrt());
    let q = gaussian_matrix(rng, m, nhat, 0.5);
    let pinv = pseudo_inverse(&p);
    let proj = DMatrix::identity(n, n) - &p * &pinv;
    let z = gaussian_matrix(rng, n, n, 1.0 / (n as f64).sqrt());
    s.a = (&p * &ahat - &s.b * &q) * &pinv + z * proj;
    let pdim = s.internal_input_dim();
    let dhat = gaussian_matrix(rng, nhat, pdim, 0.5);
    let smat = gaussian_matrix(rng, m, pdim, 0.5);
    s.d = &p * &dhat - &s.b * smat;
    let mhat = rng.random_range(1..=2);
    let bhat = gaussian_matrix(rng, nhat, mhat, 1.0);
    let qhat = rng.random_range(0..=1);
    let fhat = gaussian_matrix(rng, nhat, qhat, 0.1);
    let cand = AbstractionCandidate::with_lifted_outputs(&s, p, ahat, bhat, dhat, fhat);
    let pi = rng.random_range(0.1..2.0);
    let kappa_hat = rng.random_range(0.05..0.95);
    certify(&s, &cand, &CertifyOptions::new(pi, kappa_hat))
        .ok()
        .map(|ca| (s, ca))
}

/// Random probe point for the expected-decrease inequality.
pub fn random_point<R: Rng + ?Sized>(
    rng: &mut R,
    s: &LinearSubsystem,
    cand: &AbstractionCandidate,
) -> SamplePoint {
    SamplePoint {
        x: gaussian_vector(rng, s.state_dim(), 1.0),
        xhat: gaussian_vector(rng, cand.state_dim(), 1.0),
        nuhat: gaussian_vector(rng, cand.bhat.ncols(), 1.0),
        omega: gaussian_vector(rng, s.internal_input_dim(), 1.0),
        omegahat: gaussian_vector(rng, s.internal_input_dim(), 1.0),
    }
}

/// Random gain decomposition of size `n` whose `ρ(Λ⁻¹Δ)` equals `target`.
/// Returns `None` if the drawn coupling has zero radius and `target > 0`.
pub fn random_gains<R: Rng + ?Sized>(rng: &mut R, n: usize, target: f64) -> Option<GainDecomposition> {
    let lambda = DVector::from_fn(n, |_, _| rng.random_range(0.1..1.0));
    let density = rng.random_range(0.2..1.0);
    let mut delta = DMatrix::from_fn(n, n, |i, j| {
        if i != j && rng.random_bool(density) {
            rng.random_range(0.0..1.0)
        } else {
            0.0
        }
    });
    let mut norm = delta.clone();
    for (i, mut row) in norm.row_iter_mut().enumerate() {
        row /= lambda[i];
    }
    let r = nonnegative_spectral_radius(&norm);
    if r <= 1e-8 {
        return (target == 0.0).then(|| GainDecomposition::new(lambda, delta).unwrap());
    }
    delta *= target / r;
    GainDecomposition::new(lambda, delta).ok()
}
