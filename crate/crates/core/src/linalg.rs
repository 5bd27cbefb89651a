//! Dense linear-algebra helpers shared by the certificate, gain and bound code.
//!
//! Everything here works on `nalgebra` dynamic matrices. Problem sizes are
//! small (a few hundred states at most), so no attempt is made at sparsity.

use nalgebra::{DMatrix, DVector, Schur, SymmetricEigen};

/// Symmetric part `(m + mᵀ) / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Smallest eigenvalue of the symmetric part of `m`. Empty matrices give `+∞`.
pub fn min_sym_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    SymmetricEigen::new(symmetrize(m))
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Symmetric positive semidefinite square root. Negative eigenvalues from
/// round-off are clipped to zero.
pub fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    if m.nrows() == 0 {
        return m.clone();
    }
    let eig = SymmetricEigen::new(symmetrize(m));
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let v = &eig.eigenvectors;
    v * DMatrix::from_diagonal(&roots) * v.transpose()
}

/// Induced 2-norm (largest singular value).
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0.0;
    }
    m.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .copied()
        .fold(0.0, f64::max)
}

/// Spectral radius of a general square matrix via the real Schur form.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    match Schur::try_new(m.clone(), f64::EPSILON, 10_000) {
        Some(schur) => schur
            .complex_eigenvalues()
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max),
        None => gelfand_radius(m),
    }
}

// ‖M^(2^k)‖^(1/2^k) estimate, used only when the QR iteration fails.
fn gelfand_radius(m: &DMatrix<f64>) -> f64 {
    // power = M^exponent / exp(log_scale)
    let mut power = m.clone();
    let mut log_scale = 0.0_f64;
    let mut exponent = 1.0_f64;
    for _ in 0..40 {
        let norm = power.norm();
        if norm == 0.0 {
            return 0.0;
        }
        log_scale += norm.ln();
        power /= norm;
        power = &power * &power;
        log_scale *= 2.0;
        exponent *= 2.0;
    }
    let norm = power.norm();
    if norm == 0.0 {
        return 0.0;
    }
    ((log_scale + norm.ln()) / exponent).exp()
}

/// Result of a minimum-norm least-squares solve.
#[derive(Debug, Clone)]
pub struct LeastSquares {
    pub solution: DMatrix<f64>,
    /// Frobenius norm of `a·x − b`.
    pub residual: f64,
    /// `a` lacks full column rank; `solution` is the minimum-norm one.
    pub rank_deficient: bool,
}

/// Minimum-norm least-squares solution of `a·x = b` through the SVD.
pub fn least_squares(a: &DMatrix<f64>, b: &DMatrix<f64>) -> LeastSquares {
    assert_eq!(a.nrows(), b.nrows(), "least_squares: row mismatch");
    if a.ncols() == 0 {
        return LeastSquares {
            solution: DMatrix::zeros(0, b.ncols()),
            residual: b.norm(),
            rank_deficient: false,
        };
    }
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.iter().copied().fold(0.0, f64::max);
    let cutoff = smax * f64::EPSILON * (a.nrows().max(a.ncols()) as f64);
    let rank = svd.singular_values.iter().filter(|&&s| s > cutoff).count();
    let solution = svd
        .solve(b, cutoff)
        .unwrap_or_else(|_| DMatrix::zeros(a.ncols(), b.ncols()));
    let residual = (a * &solution - b).norm();
    LeastSquares {
        solution,
        residual,
        rank_deficient: rank < a.ncols(),
    }
}

/// Moore–Penrose pseudo-inverse.
pub fn pseudo_inverse(a: &DMatrix<f64>) -> DMatrix<f64> {
    if a.nrows() == 0 || a.ncols() == 0 {
        return DMatrix::zeros(a.ncols(), a.nrows());
    }
    let smax = spectral_norm(a);
    let cutoff = smax * f64::EPSILON * (a.nrows().max(a.ncols()) as f64);
    a.clone()
        .pseudo_inverse(cutoff)
        .unwrap_or_else(|_| DMatrix::zeros(a.ncols(), a.nrows()))
}

/// Solves `X = Q + γ² Lᵀ X L` by Smith doubling, i.e. the series
/// `Σ_k γ^{2k} (Lᵀ)^k Q L^k`. Returns `None` when the series does not
/// converge within 64 doublings (which happens iff `γ·ρ(L) ≥ 1` up to
/// round-off).
pub fn scaled_stein(l: &DMatrix<f64>, q: &DMatrix<f64>, gamma: f64) -> Option<DMatrix<f64>> {
    let mut x = symmetrize(q);
    let mut a = l * gamma;
    for _ in 0..64 {
        let term = a.transpose() * &x * &a;
        let term_norm = term.amax();
        x += term;
        x = symmetrize(&x);
        if !x.iter().all(|v| v.is_finite()) {
            return None;
        }
        if term_norm <= 1e-14 * x.amax().max(f64::MIN_POSITIVE) {
            return Some(x);
        }
        a = &a * &a;
    }
    None
}

/// `xᵀ M x` for a square `m`.
pub fn quad_form(m: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
    x.dot(&(m * x))
}

/// Block-diagonal matrix from a list of blocks (possibly non-square).
pub fn block_diag<'a, I>(blocks: I) -> DMatrix<f64>
where
    I: IntoIterator<Item = &'a DMatrix<f64>> + Clone,
{
    let (rows, cols) = blocks
        .clone()
        .into_iter()
        .fold((0, 0), |(r, c), b| (r + b.nrows(), c + b.ncols()));
    let mut out = DMatrix::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), (b.nrows(), b.ncols())).copy_from(b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

/// Vertically stacks matrices that share a column count.
pub fn vstack(blocks: &[&DMatrix<f64>], ncols: usize) -> DMatrix<f64> {
    let rows = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(rows, ncols);
    let mut r = 0;
    for b in blocks {
        out.view_mut((r, 0), (b.nrows(), ncols)).copy_from(*b);
        r += b.nrows();
    }
    out
}
