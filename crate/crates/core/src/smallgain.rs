//! Small-gain composition of per-subsystem SPSFs into one simulation
//! function for the interconnection.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::spectral_radius;
use crate::model::Topology;
use crate::spsf::SpsfConstants;

/// How many internal inputs the `ρ_int` argument is scaled by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DegreeMode {
    /// `N − 1` for every subsystem, as if all others were peers.
    AllPeers,
    /// Number of incoming edges of the receiving subsystem.
    #[default]
    InDegree,
}

impl std::str::FromStr for DegreeMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "in_degree" | "in-degree" => Ok(DegreeMode::InDegree),
            "paper_N_minus_1" | "n_minus_1" | "n-minus-1" => Ok(DegreeMode::AllPeers),
            other => Err(format!("unknown degree mode `{other}`")),
        }
    }
}

impl std::fmt::Display for DegreeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DegreeMode::InDegree => "in_degree",
            DegreeMode::AllPeers => "paper_N_minus_1",
        })
    }
}

/// `Λ = diag(λ)` and `Δ = {δ_ij}` with `γ_i(s) = s`.
#[derive(Debug, Clone, PartialEq)]
pub struct GainDecomposition {
    pub lambda: DVector<f64>,
    pub delta: DMatrix<f64>,
    pub degree_mode: DegreeMode,
}

impl GainDecomposition {
    pub fn new(lambda: DVector<f64>, delta: DMatrix<f64>) -> Result<Self> {
        let n = lambda.len();
        if delta.shape() != (n, n) {
            return Err(Error::DimensionMismatch(format!(
                "Delta is {:?}, expected ({n}, {n})",
                delta.shape()
            )));
        }
        if lambda.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
            return Err(Error::Domain("lambda entries must be positive".into()));
        }
        for i in 0..n {
            if delta[(i, i)] != 0.0 {
                return Err(Error::Domain(format!("delta[{i},{i}] must be zero")));
            }
        }
        if delta.iter().any(|&d| !(d >= 0.0 && d.is_finite())) {
            return Err(Error::Domain("delta entries must be nonnegative".into()));
        }
        Ok(GainDecomposition {
            lambda,
            delta,
            degree_mode: DegreeMode::default(),
        })
    }

    pub fn len(&self) -> usize {
        self.lambda.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lambda.is_empty()
    }

    /// `Λ⁻¹Δ`.
    pub fn normalized(&self) -> DMatrix<f64> {
        let mut g = self.delta.clone();
        for (i, mut row) in g.row_iter_mut().enumerate() {
            row /= self.lambda[i];
        }
        g
    }

    /// Rounds `λ` down and `δ` up to `decimals` places. The result still
    /// satisfies `κ_i(s) ≥ λ_i s` and `ρ_int,i(...) ≤ δ_ij s`, so it is a valid
    /// (more conservative) decomposition whenever `λ` stays positive.
    pub fn rounded_conservatively(&self, decimals: u32) -> Result<Self> {
        let scale = 10f64.powi(decimals as i32);
        // Guard against 0.98 * 100 = 97.99999999999999 style artefacts.
        let down = |v: f64| ((v * scale) * (1.0 + 1e-12)).floor() / scale;
        let up = |v: f64| ((v * scale) * (1.0 - 1e-12)).ceil() / scale;
        let lambda = self.lambda.map(down);
        let delta = self.delta.map(up);
        let mut g = GainDecomposition::new(lambda, delta)?;
        g.degree_mode = self.degree_mode;
        Ok(g)
    }

    /// Componentwise `μᵀ(−Λ + Δ)`; all entries negative means μ certifies the
    /// small-gain condition.
    pub fn slack(&self, mu: &DVector<f64>) -> DVector<f64> {
        let n = self.len();
        DVector::from_fn(n, |j, _| {
            -mu[j] * self.lambda[j] + (0..n).map(|i| mu[i] * self.delta[(i, j)]).sum::<f64>()
        })
    }
}

/// `λ_i = κ̂_i`, and for every edge `j → i`
/// `δ_ij = c_int,i · d² / a_j` where `d` follows `mode` and `a_j` is the
/// quadratic lower-bound coefficient of subsystem `j`.
pub fn build_gains(
    constants: &[SpsfConstants],
    topo: &Topology,
    mode: DegreeMode,
) -> Result<GainDecomposition> {
    let n = constants.len();
    if topo.n != n {
        return Err(Error::InvalidTopology(format!(
            "{} constant sets for a topology of {} subsystems",
            n, topo.n
        )));
    }
    for (i, c) in constants.iter().enumerate() {
        if !(c.alpha_coef > 0.0 && c.alpha_coef.is_finite()) {
            return Err(Error::UnsupportedForm(format!(
                "subsystem {i}: alpha coefficient {} is not a positive quadratic",
                c.alpha_coef
            )));
        }
        if !(c.kappa_hat > 0.0 && c.kappa_hat.is_finite()) {
            return Err(Error::UnsupportedForm(format!(
                "subsystem {i}: kappa_hat {} is not a positive linear rate",
                c.kappa_hat
            )));
        }
        if !(c.rho_int_coef >= 0.0 && c.rho_int_coef.is_finite()) {
            return Err(Error::UnsupportedForm(format!(
                "subsystem {i}: rho_int coefficient {} is not a nonnegative quadratic",
                c.rho_int_coef
            )));
        }
    }
    let lambda = DVector::from_iterator(n, constants.iter().map(|c| c.kappa_hat));
    let mut delta = DMatrix::zeros(n, n);
    for e in &topo.edges {
        let d = match mode {
            DegreeMode::AllPeers => n.saturating_sub(1),
            DegreeMode::InDegree => topo.in_degree(e.to),
        } as f64;
        delta[(e.to, e.from)] =
            constants[e.to].rho_int_coef * d * d / constants[e.from].alpha_coef;
    }
    let mut g = GainDecomposition::new(lambda, delta)?;
    g.degree_mode = mode;
    Ok(g)
}

const POWER_MAX_ITERS: usize = 200_000;
const POWER_RTOL: f64 = 1e-13;

/// Perron root and (left or right) eigenvector of a nonnegative matrix by
/// power iteration on `I + G`. Returns `None` if the Collatz–Wielandt
/// bracket fails to close.
fn perron(g: &DMatrix<f64>, left: bool) -> Option<(f64, DVector<f64>)> {
    let n = g.nrows();
    let shifted = if left { g.transpose() } else { g.clone() } + DMatrix::identity(n, n);
    let mut v = DVector::from_element(n, 1.0 / n as f64);
    for _ in 0..POWER_MAX_ITERS {
        let w = &shifted * &v;
        let (mut lo, mut hi) = (f64::INFINITY, 0.0_f64);
        for i in 0..n {
            if v[i] > 0.0 {
                let r = w[i] / v[i];
                lo = lo.min(r);
                hi = hi.max(r);
            }
        }
        let sum = w.sum();
        if !(sum > 0.0) {
            return None;
        }
        v = w / sum;
        if v.iter().all(|&x| x > 0.0) && hi - lo <= POWER_RTOL * hi {
            return Some((0.5 * (lo + hi) - 1.0, v));
        }
    }
    None
}

/// `ρ(Λ⁻¹Δ)`; a valid `μ` exists iff the result is below one.
pub fn spectral_radius_test(g: &GainDecomposition) -> f64 {
    nonnegative_spectral_radius(&g.normalized())
}

/// Spectral radius of an entrywise nonnegative square matrix: the largest
/// Perron root over the strongly connected components of its graph.
/// Acyclic parts contribute exactly zero, so nilpotent couplings are not
/// polluted by the round-off of a general eigensolver.
pub fn nonnegative_spectral_radius(m: &DMatrix<f64>) -> f64 {
    let mut radius: f64 = 0.0;
    for comp in strongly_connected_components(m) {
        let block = m.select_rows(&comp).select_columns(&comp);
        let r = if comp.len() == 1 {
            block[(0, 0)]
        } else {
            match perron(&block, false) {
                Some((r, _)) => r,
                None => spectral_radius(&block),
            }
        };
        radius = radius.max(r);
    }
    radius.max(0.0)
}

// Components via the transitive closure; gain matrices are small.
fn strongly_connected_components(m: &DMatrix<f64>) -> Vec<Vec<usize>> {
    let n = m.nrows();
    let mut reach = DMatrix::from_fn(n, n, |i, j| i == j || m[(i, j)] > 0.0);
    for k in 0..n {
        for i in 0..n {
            if reach[(i, k)] {
                for j in 0..n {
                    if reach[(k, j)] {
                        reach[(i, j)] = true;
                    }
                }
            }
        }
    }
    let mut assigned = vec![false; n];
    let mut comps = Vec::new();
    for i in 0..n {
        if assigned[i] {
            continue;
        }
        let comp: Vec<usize> = (0..n).filter(|&j| reach[(i, j)] && reach[(j, i)]).collect();
        for &j in &comp {
            assigned[j] = true;
        }
        comps.push(comp);
    }
    comps
}

fn irreducible(g: &DMatrix<f64>) -> bool {
    let n = g.nrows();
    let reach = |transpose: bool| {
        let mut seen = vec![false; n];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(u) = stack.pop() {
            for v in 0..n {
                let w = if transpose { g[(v, u)] } else { g[(u, v)] };
                if w > 0.0 && !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
        seen.into_iter().all(|s| s)
    };
    n <= 1 || (reach(false) && reach(true))
}

/// A positive `μ` with `μᵀ(−Λ + Δ) < 0`, normalised so that `min μ_i = 1`.
///
/// Built from the left Perron vector `w` of `Λ⁻¹Δ` (perturbed by `εJ` when
/// reducible) as `μᵀ = wᵀΛ⁻¹`. If verification fails after shrinking `ε`,
/// falls back to `μᵀ = 1ᵀ(I − Λ⁻¹Δ)⁻¹Λ⁻¹`, which has slack exactly `−1`.
pub fn find_mu(g: &GainDecomposition) -> Result<DVector<f64>> {
    let n = g.len();
    if n == 0 {
        return Ok(DVector::zeros(0));
    }
    let radius = spectral_radius_test(g);
    if !(radius < 1.0) {
        return Err(Error::Infeasible(format!(
            "spectral radius of Lambda^-1 Delta is {radius:.6} >= 1"
        )));
    }
    let norm = g.normalized();
    if norm.iter().all(|&x| x == 0.0) {
        return Ok(DVector::from_element(n, 1.0));
    }
    let finish = |w: DVector<f64>| -> Option<DVector<f64>> {
        let mu = w.component_div(&g.lambda);
        let min = mu.min();
        if !(min > 0.0) {
            return None;
        }
        let mu = mu / min;
        g.slack(&mu).iter().all(|&s| s < 0.0).then_some(mu)
    };

    let mut eps = if irreducible(&norm) { 0.0 } else { 1e-9 };
    for _ in 0..8 {
        let perturbed = norm.map(|x| x + eps);
        if let Some((_, w)) = perron(&perturbed, true) {
            if let Some(mu) = finish(w) {
                return Ok(mu);
            }
        }
        if eps == 0.0 {
            eps = 1e-9;
        } else {
            eps *= 0.01;
        }
    }

    let ones = DVector::from_element(n, 1.0);
    let resolvent = (DMatrix::identity(n, n) - &norm)
        .transpose()
        .lu()
        .solve(&ones)
        .ok_or_else(|| Error::Infeasible("I - Lambda^-1 Delta is singular".into()))?;
    finish(resolvent).ok_or_else(|| {
        Error::Infeasible(format!(
            "could not verify a positive mu (radius {radius:.6})"
        ))
    })
}

/// Constants of the composed simulation function `V = Σ μ_i V_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositionCertificate {
    pub mu: DVector<f64>,
    pub alpha_coef: f64,
    pub kappa_hat: f64,
    pub rho_ext_coef: f64,
    pub psi: f64,
    pub spectral_radius: f64,
    pub slack: DVector<f64>,
    pub constituents: Vec<SpsfConstants>,
}

impl CompositionCertificate {
    /// `Σ μ_i V_i` from per-subsystem values.
    pub fn combine(&self, values: &[f64]) -> f64 {
        self.mu.iter().zip(values).map(|(m, v)| m * v).sum()
    }
}

/// `α = min_i μ_i a_i`, `κ̂ = min_i (μ_iλ_i − Σ_j μ_jδ_ji)/μ_i`,
/// `ψ = Σ μ_iψ_i`, `c_ext = Σ μ_i c_ext,i`.
pub fn compose(
    constants: &[SpsfConstants],
    g: &GainDecomposition,
    mu: &DVector<f64>,
) -> Result<CompositionCertificate> {
    let n = g.len();
    if constants.len() != n || mu.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{} constant sets, {} gains, {} weights",
            constants.len(),
            n,
            mu.len()
        )));
    }
    if mu.iter().any(|&m| !(m > 0.0)) {
        return Err(Error::PreconditionViolated("mu must be positive".into()));
    }
    let slack = g.slack(mu);
    if slack.iter().any(|&s| !(s < 0.0)) {
        return Err(Error::Infeasible(format!(
            "mu^T(-Lambda + Delta) is not negative: {:?}",
            slack.as_slice()
        )));
    }
    let kappa_hat = (0..n)
        .map(|i| -slack[i] / mu[i])
        .fold(f64::INFINITY, f64::min);
    let alpha_coef = (0..n)
        .map(|i| mu[i] * constants[i].alpha_coef)
        .fold(f64::INFINITY, f64::min);
    Ok(CompositionCertificate {
        mu: mu.clone(),
        alpha_coef,
        kappa_hat,
        rho_ext_coef: constants.iter().zip(mu.iter()).map(|(c, m)| m * c.rho_ext_coef).sum(),
        psi: constants.iter().zip(mu.iter()).map(|(c, m)| m * c.psi).sum(),
        spectral_radius: spectral_radius_test(g),
        slack,
        constituents: constants.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn nilpotent_coupling_has_zero_radius() {
        // strictly lower triangular with large entries
        let delta = DMatrix::from_row_slice(3, 3, &[
            0.0, 0.0, 0.0,
            5e4, 0.0, 0.0,
            1e5, 2e5, 0.0,
        ]);
        let g = GainDecomposition::new(DVector::from_element(3, 0.3), delta).unwrap();
        assert_eq!(spectral_radius_test(&g), 0.0);
        let mu = find_mu(&g).unwrap();
        assert!(g.slack(&mu).iter().all(|&v| v < 0.0));
    }

    #[test]
    fn reducible_radius_is_largest_block() {
        // cycle {0,1} with radius 0.6, cycle {2,3} with radius 0.8, one-way link
        let m = DMatrix::from_row_slice(4, 4, &[
            0.0, 0.6, 0.0, 0.0,
            0.6, 0.0, 0.0, 0.0,
            7.0, 0.0, 0.0, 0.4,
            0.0, 0.0, 1.6, 0.0,
        ]);
        assert_relative_eq!(nonnegative_spectral_radius(&m), 0.8, epsilon = 1e-12);
        assert_relative_eq!(spectral_radius(&m), 0.8, epsilon = 1e-9);
    }

    fn consts(kappa: f64, rho_int: f64, psi: f64) -> SpsfConstants {
        SpsfConstants {
            alpha_coef: 1.0,
            kappa_hat: kappa,
            rho_int_coef: rho_int,
            rho_ext_coef: 0.0,
            psi,
        }
    }

    #[test]
    fn boundary_radius_is_one() {
        let g = GainDecomposition::new(
            DVector::from_element(2, 1.0),
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]),
        )
        .unwrap();
        assert_relative_eq!(spectral_radius_test(&g), 1.0, epsilon = 1e-12);
        assert!(matches!(find_mu(&g), Err(Error::Infeasible(_))));
    }

    #[test]
    fn symmetric_two_by_two() {
        let g = GainDecomposition::new(
            DVector::from_element(2, 1.0),
            DMatrix::from_row_slice(2, 2, &[0.0, 0.5, 0.5, 0.0]),
        )
        .unwrap();
        let mu = find_mu(&g).unwrap();
        assert_relative_eq!(mu, DVector::from_element(2, 1.0), epsilon = 1e-12);
        assert_relative_eq!(g.slack(&mu), DVector::from_element(2, -0.5), epsilon = 1e-12);
    }

    #[test]
    fn zero_delta() {
        let g = GainDecomposition::new(DVector::from_element(3, 0.4), DMatrix::zeros(3, 3)).unwrap();
        assert_eq!(spectral_radius_test(&g), 0.0);
        assert_eq!(find_mu(&g).unwrap(), DVector::from_element(3, 1.0));
    }

    #[test]
    fn two_subsystem_composition() {
        let c = [consts(0.5, 0.2, 0.003), consts(0.5, 0.2, 0.003)];
        let g = GainDecomposition::new(
            DVector::from_element(2, 0.5),
            DMatrix::from_row_slice(2, 2, &[0.0, 0.2, 0.2, 0.0]),
        )
        .unwrap();
        let cc = compose(&c, &g, &DVector::from_element(2, 1.0)).unwrap();
        assert_relative_eq!(cc.kappa_hat, 0.3, epsilon = 1e-15);
        assert_relative_eq!(cc.psi, 0.006, epsilon = 1e-15);
    }

    #[test]
    fn single_subsystem_passes_through() {
        let c = [SpsfConstants {
            alpha_coef: 1.0,
            kappa_hat: 0.7,
            rho_int_coef: 0.0,
            rho_ext_coef: 0.4,
            psi: 0.02,
        }];
        let g = build_gains(&c, &Topology::empty(1), DegreeMode::InDegree).unwrap();
        let mu = find_mu(&g).unwrap();
        let cc = compose(&c, &g, &mu).unwrap();
        assert_eq!(cc.kappa_hat, 0.7);
        assert_eq!(cc.psi, 0.02);
        assert_eq!(cc.rho_ext_coef, 0.4);
        assert_eq!(cc.alpha_coef, 1.0);
    }

    #[test]
    fn reducible_chain_gets_positive_mu() {
        let g = GainDecomposition::new(
            DVector::from_vec(vec![0.9, 0.5, 0.7]),
            DMatrix::from_row_slice(3, 3, &[0.0, 0.0, 0.0, 0.3, 0.0, 0.0, 0.0, 0.4, 0.0]),
        )
        .unwrap();
        let mu = find_mu(&g).unwrap();
        assert!(mu.iter().all(|&m| m > 0.0));
        assert!(g.slack(&mu).iter().all(|&s| s < 0.0));
    }

    #[test]
    fn rounding_is_conservative() {
        let g = GainDecomposition::new(
            DVector::from_element(2, 0.98),
            DMatrix::from_row_slice(2, 2, &[0.0, 0.8788, 0.8788, 0.0]),
        )
        .unwrap();
        let r = g.rounded_conservatively(2).unwrap();
        assert_eq!(r.lambda[0], 0.98);
        assert_eq!(r.delta[(0, 1)], 0.88);
    }

    #[test]
    fn unsupported_alpha() {
        let mut c = consts(0.5, 0.1, 0.0);
        c.alpha_coef = 0.0;
        assert!(matches!(
            build_gains(&[c], &Topology::empty(1), DegreeMode::InDegree),
            Err(Error::UnsupportedForm(_))
        ));
    }
}
