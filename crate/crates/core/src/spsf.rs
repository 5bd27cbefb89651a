//! Quadratic stochastic pseudo-simulation functions between a linear
//! subsystem and a lower-dimensional abstraction.
//!
//! The function is `V(x, x̂) = (x − P x̂)ᵀ M (x − P x̂)`. It is certified by
//!
//! * `M ⪰ CᵀC` and `(1+π)(A+BK)ᵀ M (A+BK) ⪯ (1−κ̂) M`,
//! * `AP = PÂ − BQ`, `D = PD̂ − BS` and `CP = Ĉ` (block by block),
//!
//! and the concrete input is refined from the abstract one through the
//! interface `ν = K(x − P x̂) + Q x̂ + R̃ ν̂ + S ω̂`.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{
    least_squares, min_sym_eigenvalue, pseudo_inverse, quad_form, scaled_stein, spectral_norm,
    spectral_radius, sqrt_psd, vstack,
};
use crate::model::{LinearSubsystem, Violation};

/// Default numerical tolerance for certificate checks.
pub const DEFAULT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct AbstractionCandidate {
    pub ahat: DMatrix<f64>,
    pub bhat: DMatrix<f64>,
    pub chat_ext: DMatrix<f64>,
    pub chat_int: BTreeMap<usize, DMatrix<f64>>,
    pub dhat: DMatrix<f64>,
    pub fhat: DMatrix<f64>,
    /// Lifting map from abstract to concrete states (n × n̂).
    pub p: DMatrix<f64>,
}

impl AbstractionCandidate {
    /// Candidate whose output blocks are forced by `Ĉ = C P`.
    pub fn with_lifted_outputs(
        s: &LinearSubsystem,
        p: DMatrix<f64>,
        ahat: DMatrix<f64>,
        bhat: DMatrix<f64>,
        dhat: DMatrix<f64>,
        fhat: DMatrix<f64>,
    ) -> Self {
        let chat_ext = &s.c_ext * &p;
        let chat_int = s
            .c_int
            .iter()
            .map(|(&peer, c)| (peer, c * &p))
            .collect();
        AbstractionCandidate {
            ahat,
            bhat,
            chat_ext,
            chat_int,
            dhat,
            fhat,
            p,
        }
    }

    /// The subsystem abstracting itself: `P = I`, hatted matrices equal the
    /// originals.
    pub fn identity(s: &LinearSubsystem) -> Self {
        AbstractionCandidate {
            ahat: s.a.clone(),
            bhat: s.b.clone(),
            chat_ext: s.c_ext.clone(),
            chat_int: s.c_int.clone(),
            dhat: s.d.clone(),
            fhat: s.f.clone(),
            p: DMatrix::identity(s.state_dim(), s.state_dim()),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.ahat.nrows()
    }

    pub fn full_output(&self) -> DMatrix<f64> {
        let mut blocks = vec![&self.chat_ext];
        blocks.extend(self.chat_int.values());
        vstack(&blocks, self.state_dim())
    }

    /// The abstraction as a subsystem of its own, sharing `s`'s id and wiring.
    pub fn abstract_subsystem(&self, id: usize) -> LinearSubsystem {
        LinearSubsystem {
            id,
            a: self.ahat.clone(),
            b: self.bhat.clone(),
            d: self.dhat.clone(),
            f: self.fhat.clone(),
            c_ext: self.chat_ext.clone(),
            c_int: self.chat_int.clone(),
        }
    }

    pub fn validate(&self, s: &LinearSubsystem) -> Vec<Violation> {
        let n = s.state_dim();
        let nh = self.ahat.nrows();
        let mut out = Vec::new();
        let mut push = |first: &str, second: &str, detail: String| {
            out.push(Violation {
                subsystem: s.id,
                first: first.to_string(),
                second: second.to_string(),
                detail,
            })
        };
        if self.ahat.ncols() != nh {
            push("Ahat", "Ahat", "not square".into());
        }
        if nh > n {
            push("Ahat", "A", format!("abstract dim {nh} exceeds concrete dim {n}"));
        }
        if self.p.shape() != (n, nh) {
            push("P", "A/Ahat", format!("P is {:?}, expected ({n}, {nh})", self.p.shape()));
        }
        for (name, m) in [("Bhat", &self.bhat), ("Dhat", &self.dhat), ("Fhat", &self.fhat)] {
            if m.nrows() != nh {
                push(name, "Ahat", format!("rows {} ≠ abstract dim {nh}", m.nrows()));
            }
        }
        if self.dhat.ncols() != s.internal_input_dim() {
            push(
                "Dhat",
                "D",
                format!(
                    "internal input dims differ ({} ≠ {})",
                    self.dhat.ncols(),
                    s.internal_input_dim()
                ),
            );
        }
        if self.chat_ext.shape() != (s.external_output_dim(), nh) {
            push(
                "Chat_ext",
                "C_ext",
                format!(
                    "Chat_ext is {:?}, expected ({}, {nh})",
                    self.chat_ext.shape(),
                    s.external_output_dim()
                ),
            );
        }
        if self.chat_int.keys().ne(s.c_int.keys()) {
            push("Chat_int", "C_int", "peer sets differ".into());
        }
        for (peer, c) in &self.chat_int {
            let rows = s.c_int.get(peer).map(|b| b.nrows());
            if rows.is_some_and(|r| r != c.nrows()) || c.ncols() != nh {
                push(
                    &format!("Chat_int[{peer}]"),
                    &format!("C_int[{peer}]"),
                    format!("shape {:?} inconsistent", c.shape()),
                );
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AbstractionCertificate {
    pub m: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub s: DMatrix<f64>,
    pub rtilde: DMatrix<f64>,
    pub pi: f64,
    pub kappa_hat: f64,
}

/// Coefficients of `α(s) = a s²`, `κ(s) = κ̂ s`, `ρ_int(s) = c_int s²`,
/// `ρ_ext(s) = c_ext s²` and the offset `ψ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpsfConstants {
    pub alpha_coef: f64,
    pub kappa_hat: f64,
    pub rho_int_coef: f64,
    pub rho_ext_coef: f64,
    pub psi: f64,
}

/// Which leading factor to use for the external-input gain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RhoExtVariant {
    /// `1 + 2/π + 2/π`.
    #[default]
    AsPrinted,
    /// `1 + 2/π + π/2`, mirroring the internal-input gain.
    Symmetric,
}

impl RhoExtVariant {
    pub fn factor(self, pi: f64) -> f64 {
        match self {
            RhoExtVariant::AsPrinted => 1.0 + 2.0 / pi + 2.0 / pi,
            RhoExtVariant::Symmetric => 1.0 + 2.0 / pi + pi / 2.0,
        }
    }
}

pub fn rho_int_factor(pi: f64) -> f64 {
    1.0 + 2.0 / pi + pi / 2.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResidualKind {
    /// Smallest eigenvalue; must be ≥ −threshold.
    MinEigenvalue,
    /// Norm of an equality residual; must be ≤ threshold.
    Norm,
    /// Scalar parameter range check; `value` is the parameter.
    Range,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Residual {
    pub name: &'static str,
    pub description: &'static str,
    pub kind: ResidualKind,
    pub value: f64,
    pub threshold: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualReport {
    pub tol: f64,
    pub items: Vec<Residual>,
}

impl ResidualReport {
    pub fn passed(&self) -> bool {
        self.items.iter().all(|r| r.pass)
    }

    pub fn get(&self, name: &str) -> Option<&Residual> {
        self.items.iter().find(|r| r.name == name)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Residual> {
        self.items.iter().filter(|r| !r.pass)
    }
}

impl fmt::Display for ResidualReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<26} {:>14} {:>12}  status", "condition", "value", "threshold")?;
        for r in &self.items {
            writeln!(
                f,
                "{:<26} {:>14.6e} {:>12.3e}  {}  ({})",
                r.name,
                r.value,
                r.threshold,
                if r.pass { "ok" } else { "FAIL" },
                r.description
            )?;
        }
        Ok(())
    }
}

pub mod residual {
    pub const PI_POSITIVE: &str = "pi_positive";
    pub const KAPPA_RANGE: &str = "kappa_hat_range";
    pub const M_SYMMETRIC: &str = "m_symmetric";
    pub const M_POSITIVE: &str = "m_positive_definite";
    pub const OUTPUT_BOUND: &str = "output_bound";
    pub const DECAY: &str = "decay";
    pub const STATE_MATCH: &str = "state_matching";
    pub const INTERNAL_INPUT_MATCH: &str = "internal_input_matching";
    pub const OUTPUT_MATCH: &str = "output_matching";
}

/// Evaluates every certificate condition. Thresholds are `tol` scaled by the
/// magnitude of the terms being compared (never below `tol`).
pub fn check_conditions(
    s: &LinearSubsystem,
    cand: &AbstractionCandidate,
    cert: &AbstractionCertificate,
    tol: f64,
) -> ResidualReport {
    use residual::*;
    let mut items = Vec::new();

    let pi_ok = cert.pi > 0.0 && cert.pi.is_finite();
    items.push(Residual {
        name: PI_POSITIVE,
        description: "pi > 0",
        kind: ResidualKind::Range,
        value: cert.pi,
        threshold: 0.0,
        pass: pi_ok,
    });
    items.push(Residual {
        name: KAPPA_RANGE,
        description: "kappa_hat in (0,1)",
        kind: ResidualKind::Range,
        value: cert.kappa_hat,
        threshold: 0.0,
        pass: cert.kappa_hat > 0.0 && cert.kappa_hat < 1.0,
    });

    let m = &cert.m;
    let m_scale = spectral_norm(m).max(1.0);
    let asym = (m - m.transpose()).norm();
    items.push(Residual {
        name: M_SYMMETRIC,
        description: "M = M^T",
        kind: ResidualKind::Norm,
        value: asym,
        threshold: tol * m_scale,
        pass: asym <= tol * m_scale,
    });
    let m_min = min_sym_eigenvalue(m);
    items.push(Residual {
        name: M_POSITIVE,
        description: "lambda_min(M) > 0",
        kind: ResidualKind::MinEigenvalue,
        value: m_min,
        threshold: 0.0,
        pass: m_min > 0.0,
    });

    let c = s.full_output();
    let ctc = c.transpose() * &c;
    let out_gap = min_sym_eigenvalue(&(m - &ctc));
    let out_thr = tol * m_scale.max(spectral_norm(&ctc));
    items.push(Residual {
        name: OUTPUT_BOUND,
        description: "M - C^T C >= 0",
        kind: ResidualKind::MinEigenvalue,
        value: out_gap,
        threshold: out_thr,
        pass: out_gap >= -out_thr,
    });

    let closed = &s.a + &s.b * &cert.k;
    let lml = closed.transpose() * m * &closed * (1.0 + cert.pi);
    let decay_gap = min_sym_eigenvalue(&(m * (1.0 - cert.kappa_hat) - &lml));
    let decay_thr = tol * m_scale.max(spectral_norm(&lml));
    items.push(Residual {
        name: DECAY,
        description: "(1-kh)M - (1+pi)(A+BK)^T M (A+BK) >= 0",
        kind: ResidualKind::MinEigenvalue,
        value: decay_gap,
        threshold: decay_thr,
        pass: decay_gap >= -decay_thr,
    });

    let ap = &s.a * &cand.p;
    let pa = &cand.p * &cand.ahat;
    let bq = &s.b * &cert.q;
    let r11 = (&ap - &pa + &bq).norm();
    let thr11 = tol * 1f64.max(ap.norm()).max(pa.norm());
    items.push(Residual {
        name: STATE_MATCH,
        description: "AP - P Ahat + BQ = 0",
        kind: ResidualKind::Norm,
        value: r11,
        threshold: thr11,
        pass: r11 <= thr11,
    });

    let pd = &cand.p * &cand.dhat;
    let bs = &s.b * &cert.s;
    let r12 = (&s.d - &pd + &bs).norm();
    let thr12 = tol * 1f64.max(s.d.norm()).max(pd.norm());
    items.push(Residual {
        name: INTERNAL_INPUT_MATCH,
        description: "D - P Dhat + BS = 0",
        kind: ResidualKind::Norm,
        value: r12,
        threshold: thr12,
        pass: r12 <= thr12,
    });

    let (r14, thr14) = if cand.chat_int.keys().eq(s.c_int.keys()) {
        let cp = &c * &cand.p;
        let chat = cand.full_output();
        let r = (&cp - &chat).norm();
        (r, tol * 1f64.max(cp.norm()))
    } else {
        (f64::INFINITY, tol)
    };
    items.push(Residual {
        name: OUTPUT_MATCH,
        description: "C P - Chat = 0 (all output blocks)",
        kind: ResidualKind::Norm,
        value: r14,
        threshold: thr14,
        pass: r14 <= thr14,
    });

    ResidualReport { tol, items }
}

/// Rejects `π ≤ 0` and `κ̂ ∉ (0, 1)`.
pub fn check_gain_parameters(pi: f64, kappa_hat: f64) -> Result<()> {
    if !(pi > 0.0 && pi.is_finite()) {
        return Err(Error::Domain(format!("pi must be positive, got {pi}")));
    }
    if !(kappa_hat > 0.0 && kappa_hat < 1.0) {
        return Err(Error::Domain(format!(
            "kappa_hat out of (0,1): {kappa_hat}"
        )));
    }
    Ok(())
}

/// `γ = √((1+π)/(1−κ̂))`; the decay condition holds for some `M` iff
/// `γ·ρ(A+BK) < 1`.
pub fn decay_scale(pi: f64, kappa_hat: f64) -> f64 {
    ((1.0 + pi) / (1.0 - kappa_hat)).sqrt()
}

const SHRINK_TARGET: f64 = 0.5;

/// Finds `(M, K)` satisfying the output-bound and decay conditions.
///
/// `K` comes from uniform shrinkage `K = −η B⁻¹ A` when `B` is square and
/// invertible, otherwise from a discounted Riccati iteration on
/// `(γA, γB)`. `M` then solves `M = CᵀC + εI + γ² Lᵀ M L` with
/// `L = A + BK`, which leaves a margin of `ε` in both conditions.
pub fn synthesize_mk(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    c: &DMatrix<f64>,
    pi: f64,
    kappa_hat: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    check_gain_parameters(pi, kappa_hat)?;
    let n = a.nrows();
    if a.ncols() != n || b.nrows() != n || c.ncols() != n {
        return Err(Error::DimensionMismatch(format!(
            "synthesize: A {:?}, B {:?}, C {:?}",
            a.shape(),
            b.shape(),
            c.shape()
        )));
    }
    let gamma = decay_scale(pi, kappa_hat);

    let k = match square_inverse(b) {
        Some(binv) => {
            let rho = spectral_radius(a);
            let eta = if gamma * rho <= SHRINK_TARGET {
                0.0
            } else {
                1.0 - SHRINK_TARGET / (gamma * rho)
            };
            -(binv * a) * eta
        }
        None => discounted_riccati_gain(a, b, gamma),
    };

    let closed = a + b * &k;
    let scaled_radius = gamma * spectral_radius(&closed);
    if !(scaled_radius < 1.0) {
        return Err(Error::Infeasible(format!(
            "no stabilizing gain found: gamma*rho(A+BK) = {scaled_radius:.6} >= 1 (gamma = {gamma:.6})"
        )));
    }

    // The margin starts small relative to `CᵀC`. It grows relative to `M`
    // whenever round-off in an ill-conditioned `M` exceeds it. Every
    // returned pair satisfies both inequalities with zero tolerance.
    let ctc = c.transpose() * c;
    let mut eps = 1e-8 * spectral_norm(&ctc) + 1e-12;
    for _ in 0..MARGIN_ATTEMPTS {
        let rhs = &ctc + DMatrix::identity(n, n) * eps;
        let m = scaled_stein(&closed, &rhs, gamma).ok_or_else(|| {
            Error::Infeasible(format!(
                "scaled Lyapunov series diverged (gamma*rho = {scaled_radius:.6})"
            ))
        })?;
        let output_gap = min_sym_eigenvalue(&(&m - &ctc));
        let lml = closed.transpose() * &m * &closed * (1.0 + pi);
        let decay_gap = min_sym_eigenvalue(&(&m * (1.0 - kappa_hat) - lml));
        if output_gap >= 0.0 && decay_gap >= 0.0 {
            return Ok((m, k));
        }
        eps = eps.max(1e-8 * spectral_norm(&m)) * 100.0;
    }
    Err(Error::Infeasible(format!(
        "synthesized M fails its own check after {MARGIN_ATTEMPTS} margin increases \
         (gamma*rho = {scaled_radius:.6})"
    )))
}

const MARGIN_ATTEMPTS: usize = 6;

fn square_inverse(b: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    if b.nrows() != b.ncols() || b.nrows() == 0 {
        return None;
    }
    let sv = b.clone().svd(false, false).singular_values;
    let smax = sv.iter().copied().fold(0.0, f64::max);
    let smin = sv.iter().copied().fold(f64::INFINITY, f64::min);
    if smin <= 1e-10 * smax {
        return None;
    }
    b.clone().try_inverse()
}

// Value iteration on X = I + ÃᵀXÃ − ÃᵀXB̃(I + B̃ᵀXB̃)⁻¹B̃ᵀXÃ with Ã = γA,
// B̃ = γB. The returned gain stabilizes Ã + B̃K = γ(A + BK) when the pair is
// stabilizable; the caller verifies the radius either way.
fn discounted_riccati_gain(a: &DMatrix<f64>, b: &DMatrix<f64>, gamma: f64) -> DMatrix<f64> {
    let n = a.nrows();
    let m = b.ncols();
    if m == 0 {
        return DMatrix::zeros(0, n);
    }
    let at = a * gamma;
    let bt = b * gamma;
    let gain = |x: &DMatrix<f64>| -> Option<DMatrix<f64>> {
        let r = DMatrix::identity(m, m) + bt.transpose() * x * &bt;
        let rhs = bt.transpose() * x * &at;
        r.cholesky().map(|ch| -ch.solve(&rhs))
    };
    let mut x = DMatrix::identity(n, n);
    let mut k = DMatrix::zeros(m, n);
    for _ in 0..20_000 {
        let Some(next_k) = gain(&x) else { break };
        k = next_k;
        let closed = &at + &bt * &k;
        let next = DMatrix::identity(n, n) + k.transpose() * &k + closed.transpose() * &x * &closed;
        let next = (&next + next.transpose()) * 0.5;
        if !next.iter().all(|v| v.is_finite()) || next.norm() > 1e15 {
            break;
        }
        let change = (&next - &x).norm();
        x = next;
        if change <= 1e-13 * x.norm() {
            k = gain(&x).unwrap_or(k);
            break;
        }
    }
    k
}

#[derive(Debug, Clone, PartialEq)]
pub struct StructuralSolution {
    pub q: DMatrix<f64>,
    pub s: DMatrix<f64>,
    pub residual_q: f64,
    pub residual_s: f64,
    /// `B` lacks full column rank; `Q` and `S` are minimum-norm choices.
    pub rank_deficient: bool,
}

/// Least-squares `Q` from `BQ = PÂ − AP` and `S` from `BS = PD̂ − D`.
pub fn solve_structural(s: &LinearSubsystem, cand: &AbstractionCandidate) -> StructuralSolution {
    let rhs_q = &cand.p * &cand.ahat - &s.a * &cand.p;
    let rhs_s = &cand.p * &cand.dhat - &s.d;
    let q = least_squares(&s.b, &rhs_q);
    let sl = least_squares(&s.b, &rhs_s);
    StructuralSolution {
        rank_deficient: q.rank_deficient,
        q: q.solution,
        s: sl.solution,
        residual_q: q.residual,
        residual_s: sl.residual,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RtildeSolution {
    pub rtilde: DMatrix<f64>,
    /// `BᵀMB` was singular and the pseudo-inverse was used.
    pub used_pseudo_inverse: bool,
}

/// `R̃ = (BᵀMB)⁻¹ BᵀM P B̂`, the minimiser of `‖√M(BR̃ − PB̂)‖`.
pub fn compute_rtilde(
    b: &DMatrix<f64>,
    m: &DMatrix<f64>,
    p: &DMatrix<f64>,
    bhat: &DMatrix<f64>,
) -> RtildeSolution {
    let gram = b.transpose() * m * b;
    let rhs = b.transpose() * m * p * bhat;
    if let Some(ch) = gram.clone().cholesky() {
        let sv = gram.clone().svd(false, false).singular_values;
        let smax = sv.iter().copied().fold(0.0, f64::max);
        let smin = sv.iter().copied().fold(f64::INFINITY, f64::min);
        if smin > 1e-12 * smax {
            return RtildeSolution {
                rtilde: ch.solve(&rhs),
                used_pseudo_inverse: false,
            };
        }
    }
    RtildeSolution {
        rtilde: pseudo_inverse(&gram) * rhs,
        used_pseudo_inverse: b.ncols() > 0,
    }
}

/// Closed-form gain functions and offset of the certified SPSF.
pub fn derive_constants(
    s: &LinearSubsystem,
    cand: &AbstractionCandidate,
    cert: &AbstractionCertificate,
    variant: RhoExtVariant,
) -> SpsfConstants {
    let root = sqrt_psd(&cert.m);
    let int_gain = spectral_norm(&(&root * &s.d)).powi(2);
    let mismatch = &s.b * &cert.rtilde - &cand.p * &cand.bhat;
    let ext_gain = spectral_norm(&(&root * mismatch)).powi(2);
    SpsfConstants {
        alpha_coef: 1.0,
        kappa_hat: cert.kappa_hat,
        rho_int_coef: rho_int_factor(cert.pi) * int_gain,
        rho_ext_coef: variant.factor(cert.pi) * ext_gain,
        psi: noise_offset(&cert.m, &s.f, &cand.p, &cand.fhat),
    }
}

/// `Tr(FᵀMF + F̂ᵀPᵀMPF̂)`.
pub fn noise_offset(
    m: &DMatrix<f64>,
    f: &DMatrix<f64>,
    p: &DMatrix<f64>,
    fhat: &DMatrix<f64>,
) -> f64 {
    let pf = p * fhat;
    (f.transpose() * m * f).trace() + (pf.transpose() * m * &pf).trace()
}

/// `(x − P x̂)ᵀ M (x − P x̂)`.
pub fn evaluate_v(x: &DVector<f64>, xhat: &DVector<f64>, m: &DMatrix<f64>, p: &DMatrix<f64>) -> f64 {
    let e = x - p * xhat;
    quad_form(m, &e)
}

/// Refines the abstract input into the concrete one.
pub fn interface(
    x: &DVector<f64>,
    xhat: &DVector<f64>,
    nuhat: &DVector<f64>,
    omegahat: &DVector<f64>,
    p: &DMatrix<f64>,
    cert: &AbstractionCertificate,
) -> DVector<f64> {
    let e = x - p * xhat;
    let mut nu = &cert.k * e;
    nu.gemv(1.0, &cert.q, xhat, 1.0);
    nu.gemv(1.0, &cert.rtilde, nuhat, 1.0);
    nu.gemv(1.0, &cert.s, omegahat, 1.0);
    nu
}

/// Exact `E[V(x⁺, x̂⁺)]` for independent standard-normal noises on both sides:
/// the squared `M`-norm of the mean error plus the noise trace.
#[allow(clippy::too_many_arguments)]
pub fn expected_v_next(
    x: &DVector<f64>,
    xhat: &DVector<f64>,
    nu: &DVector<f64>,
    nuhat: &DVector<f64>,
    omega: &DVector<f64>,
    omegahat: &DVector<f64>,
    s: &LinearSubsystem,
    cand: &AbstractionCandidate,
    cert: &AbstractionCertificate,
) -> f64 {
    let zero_q = DVector::zeros(s.noise_dim());
    let mean_x = s.step(x, nu, omega, &zero_q);
    let mut mean_xhat = &cand.ahat * xhat;
    mean_xhat.gemv(1.0, &cand.bhat, nuhat, 1.0);
    mean_xhat.gemv(1.0, &cand.dhat, omegahat, 1.0);
    evaluate_v(&mean_x, &mean_xhat, &cert.m, &cand.p)
        + noise_offset(&cert.m, &s.f, &cand.p, &cand.fhat)
}

/// Right-hand side of the expected-decrease inequality,
/// `−κ̂V + c_int‖ω−ω̂‖² + c_ext‖ν̂‖² + ψ`.
pub fn decrease_bound(
    v: f64,
    omega: &DVector<f64>,
    omegahat: &DVector<f64>,
    nuhat: &DVector<f64>,
    constants: &SpsfConstants,
) -> f64 {
    -constants.kappa_hat * v
        + constants.rho_int_coef * (omega - omegahat).norm_squared()
        + constants.rho_ext_coef * nuhat.norm_squared()
        + constants.psi
}

/// Options for [`certify`].
#[derive(Debug, Clone)]
pub struct CertifyOptions {
    pub pi: f64,
    pub kappa_hat: f64,
    /// Use these `(M, K)` instead of synthesising them.
    pub m_k: Option<(DMatrix<f64>, DMatrix<f64>)>,
    pub tol: f64,
    pub rho_ext_variant: RhoExtVariant,
}

impl CertifyOptions {
    pub fn new(pi: f64, kappa_hat: f64) -> Self {
        CertifyOptions {
            pi,
            kappa_hat,
            m_k: None,
            tol: DEFAULT_TOL,
            rho_ext_variant: RhoExtVariant::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CertifiedAbstraction {
    pub candidate: AbstractionCandidate,
    pub certificate: AbstractionCertificate,
    pub constants: SpsfConstants,
    pub report: ResidualReport,
    pub rank_deficient_b: bool,
    pub rtilde_pseudo_inverse: bool,
}

/// Full construction for one subsystem: `(M, K)` if absent, then `Q`, `S`,
/// `R̃`, the residual check and the constants. Fails with `Infeasible` when
/// any condition is violated.
pub fn certify(
    s: &LinearSubsystem,
    cand: &AbstractionCandidate,
    opts: &CertifyOptions,
) -> Result<CertifiedAbstraction> {
    if let Some(v) = s.validate().into_iter().chain(cand.validate(s)).next() {
        return Err(Error::DimensionMismatch(v.to_string()));
    }
    check_gain_parameters(opts.pi, opts.kappa_hat)?;
    let (m, k) = match &opts.m_k {
        Some(mk) => mk.clone(),
        None => synthesize_mk(&s.a, &s.b, &s.full_output(), opts.pi, opts.kappa_hat)?,
    };
    let structural = solve_structural(s, cand);
    let rt = compute_rtilde(&s.b, &m, &cand.p, &cand.bhat);
    let certificate = AbstractionCertificate {
        m,
        k,
        q: structural.q,
        s: structural.s,
        rtilde: rt.rtilde,
        pi: opts.pi,
        kappa_hat: opts.kappa_hat,
    };
    let report = check_conditions(s, cand, &certificate, opts.tol);
    if !report.passed() {
        let failed: Vec<String> = report
            .failures()
            .map(|r| format!("{} = {:.3e}", r.name, r.value))
            .collect();
        return Err(Error::Infeasible(format!(
            "subsystem {}: {}",
            s.id,
            failed.join(", ")
        )));
    }
    let constants = derive_constants(s, cand, &certificate, opts.rho_ext_variant);
    Ok(CertifiedAbstraction {
        candidate: cand.clone(),
        certificate,
        constants,
        report,
        rank_deficient_b: structural.rank_deficient,
        rtilde_pseudo_inverse: rt.used_pseudo_inverse,
    })
}
