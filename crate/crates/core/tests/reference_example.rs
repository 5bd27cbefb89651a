use approx::assert_relative_eq;
use nalgebra::{DMatrix, DVector};

use simcert_core::bounds::{finite_horizon_bound, psi_hat, Branch, BoundQuery};
use simcert_core::example::{self, published};
use simcert_core::model::assemble_interconnection;
use simcert_core::smallgain::{build_gains, compose, find_mu, spectral_radius_test, DegreeMode};
use simcert_core::spsf::{
    certify, check_conditions, compute_rtilde, decay_scale, derive_constants, evaluate_v,
    expected_v_next, interface, residual, solve_structural, synthesize_mk, AbstractionCertificate,
    CertifyOptions, RhoExtVariant, DEFAULT_TOL,
};
use simcert_core::linalg::spectral_radius;

const N: usize = example::STATE_DIM;

fn ones(n: usize) -> DVector<f64> {
    DVector::from_element(n, 1.0)
}

fn published_certificate(s_coef: f64) -> AbstractionCertificate {
    let (m, k) = example::published_m_k();
    AbstractionCertificate {
        m,
        k,
        q: DMatrix::from_element(N, 1, 1.0),
        s: DMatrix::from_element(N, 1, s_coef),
        rtilde: DMatrix::from_element(N, 1, 1.0),
        pi: example::PI,
        kappa_hat: example::KAPPA_HAT,
    }
}

#[test]
fn subsystems_are_well_formed() {
    for s in example::subsystems() {
        assert!(s.validate().is_empty());
    }
}

#[test]
fn monolith_has_ring_coupling() {
    let subs = example::subsystems();
    let topo = example::topology(&subs);
    let sys = assemble_interconnection(&subs, &topo).unwrap();
    assert_eq!(sys.state_dim(), 100);
    let coupled = [(0, 2), (1, 3), (2, 1), (3, 0)];
    for bi in 0..4 {
        for bj in 0..4 {
            let block = sys.a.view((25 * bi, 25 * bj), (25, 25));
            let expected = if bi == bj {
                DMatrix::identity(25, 25)
            } else if coupled.contains(&(bi, bj)) {
                DMatrix::from_element(25, 25, 0.01)
            } else {
                DMatrix::zeros(25, 25)
            };
            assert_relative_eq!(block.into_owned(), expected, epsilon = 1e-15);
        }
    }
}

#[test]
fn published_s_fails_internal_input_matching() {
    let s = &example::subsystems()[0];
    let cand = example::candidate(s);
    let report = check_conditions(s, &cand, &published_certificate(published::S_COEF), DEFAULT_TOL);
    for r in &report.items {
        if r.name == residual::INTERNAL_INPUT_MATCH {
            assert!(!r.pass);
            // 0.001 per row over 25 rows, Frobenius
            assert_relative_eq!(r.value, 0.001 * 5.0, epsilon = 1e-12);
        } else {
            assert!(r.pass, "{} failed: {}", r.name, r.value);
        }
    }
}

#[test]
fn recomputed_structural_matrices() {
    let s = &example::subsystems()[0];
    let cand = example::candidate(s);
    let st = solve_structural(s, &cand);
    assert_relative_eq!(st.q, DMatrix::from_element(N, 1, 1.0), epsilon = 1e-12);
    assert_relative_eq!(st.s, DMatrix::from_element(N, 1, -0.004), epsilon = 1e-12);
    assert!(st.residual_q < 1e-12 && st.residual_s < 1e-12);
    assert!(!st.rank_deficient);

    let report = check_conditions(s, &cand, &published_certificate(-0.004), DEFAULT_TOL);
    assert!(report.passed(), "{report}");
    assert!(report.get(residual::INTERNAL_INPUT_MATCH).unwrap().value < 1e-15);
}

#[test]
fn rtilde_and_constants() {
    let s = &example::subsystems()[0];
    let cand = example::candidate(s);
    let (m, _) = example::published_m_k();
    let rt = compute_rtilde(&s.b, &m, &cand.p, &cand.bhat);
    assert_relative_eq!(rt.rtilde, DMatrix::from_element(N, 1, 1.0), epsilon = 1e-14);

    let cert = published_certificate(-0.004);
    let c = derive_constants(s, &cand, &cert, RhoExtVariant::AsPrinted);
    let expected_rho_int = (1.0 + 2.0 / 0.99 + 0.99 / 2.0) * 0.25;
    assert_relative_eq!(c.rho_int_coef, expected_rho_int, epsilon = 1e-12);
    assert!((c.rho_int_coef - published::RHO_INT).abs() < 0.005);
    assert_relative_eq!(c.psi, published::PSI, epsilon = 1e-15);
    assert!(c.rho_ext_coef.abs() < 1e-24);
    let sym = derive_constants(s, &cand, &cert, RhoExtVariant::Symmetric);
    assert!(sym.rho_ext_coef.abs() < 1e-24);
}

#[test]
fn synthesis_on_example() {
    let s = &example::subsystems()[0];
    let gamma = decay_scale(example::PI, example::KAPPA_HAT);
    // with the published gain, γ·ρ(A+BK) = γ·0.05
    assert_relative_eq!(gamma * 0.05, (1.99f64 / 0.02).sqrt() * 0.05, epsilon = 1e-15);
    assert!(gamma * 0.05 < 0.5);
    let (m, k) = synthesize_mk(&s.a, &s.b, &s.full_output(), example::PI, example::KAPPA_HAT).unwrap();
    let closed = &s.a + &s.b * &k;
    assert!(gamma * spectral_radius(&closed) < 1.0);
    let cand = example::candidate(s);
    let st = solve_structural(s, &cand);
    let cert = AbstractionCertificate {
        rtilde: compute_rtilde(&s.b, &m, &cand.p, &cand.bhat).rtilde,
        m,
        k,
        q: st.q,
        s: st.s,
        pi: example::PI,
        kappa_hat: example::KAPPA_HAT,
    };
    assert!(check_conditions(s, &cand, &cert, DEFAULT_TOL).passed());
}

#[test]
fn v_interface_and_expectation() {
    let s = &example::subsystems()[0];
    let cand = example::candidate(s);
    let cert = published_certificate(-0.004);
    let zero1 = DVector::zeros(1);
    assert_eq!(evaluate_v(&ones(N), &zero1, &cert.m, &cand.p), 25.0);

    let xhat = DVector::from_element(1, 0.7);
    let e = DVector::from_fn(N, |i, _| (i as f64 * 0.37).sin());
    let x = &cand.p * &xhat + &e;
    let omega = DVector::from_element(1, -0.4);
    let nu = interface(&x, &xhat, &zero1, &omega, &cand.p, &cert);
    let expected_nu = &e * -0.95 + ones(N) * 0.7 + ones(N) * (-0.004 * -0.4);
    assert_relative_eq!(nu, expected_nu, epsilon = 1e-14);

    let ev = expected_v_next(&x, &xhat, &nu, &zero1, &omega, &omega, s, &cand, &cert);
    assert_relative_eq!(ev, 0.05f64.powi(2) * e.norm_squared() + 0.0025, epsilon = 1e-13);

    // drift-free point returns exactly psi
    let x0 = &cand.p * &xhat;
    let nu0 = interface(&x0, &xhat, &zero1, &omega, &cand.p, &cert);
    let ev0 = expected_v_next(&x0, &xhat, &nu0, &zero1, &omega, &omega, s, &cand, &cert);
    assert_relative_eq!(ev0, 0.0025, epsilon = 1e-15);
}

fn example_constants() -> Vec<simcert_core::SpsfConstants> {
    let subs = example::subsystems();
    subs.iter()
        .map(|s| {
            let mut opts = CertifyOptions::new(example::PI, example::KAPPA_HAT);
            opts.m_k = Some(example::published_m_k());
            certify(s, &example::candidate(s), &opts).unwrap().constants
        })
        .collect()
}

#[test]
fn gains_radius_and_composition() {
    let subs = example::subsystems();
    let topo = example::topology(&subs);
    let constants = example_constants();

    let g = build_gains(&constants, &topo, DegreeMode::InDegree).unwrap();
    for (i, j) in [(0, 2), (1, 3), (2, 1), (3, 0)] {
        assert_relative_eq!(g.delta[(i, j)], constants[i].rho_int_coef, epsilon = 1e-15);
    }
    assert_eq!(g.delta.iter().filter(|&&d| d != 0.0).count(), 4);
    assert_eq!(g.lambda, DVector::from_element(4, 0.98));

    let rounded = g.rounded_conservatively(published::GAIN_DECIMALS).unwrap();
    assert_eq!(rounded.delta[(0, 2)], 0.88);
    let radius = spectral_radius_test(&rounded);
    assert_relative_eq!(radius, 0.88 / 0.98, epsilon = 1e-12);
    assert!((radius - published::SPECTRAL_RADIUS).abs() < 1e-3);

    let mu = find_mu(&rounded).unwrap();
    assert_relative_eq!(mu, DVector::from_element(4, 1.0), epsilon = 1e-12);
    assert_relative_eq!(rounded.slack(&mu), DVector::from_element(4, -0.1), epsilon = 1e-12);

    let cc = compose(&constants, &rounded, &mu).unwrap();
    assert!((cc.kappa_hat - published::COMPOSED_KAPPA_HAT).abs() < 1e-9);
    assert!((cc.psi - published::COMPOSED_PSI).abs() < 1e-9);
    assert_eq!(cc.rho_ext_coef, 0.0);
    assert_relative_eq!(cc.alpha_coef, 1.0, epsilon = 1e-12);

    let q = BoundQuery {
        v0: 0.0,
        alpha_coef: cc.alpha_coef,
        epsilon: published::EPSILON,
        horizon: published::HORIZON,
        psi_hat: psi_hat(cc.rho_ext_coef, 0.0, cc.psi),
        kappa_hat: cc.kappa_hat,
    };
    let b = finite_horizon_bound(&q).unwrap();
    assert_eq!(b.branch, Branch::LargeThreshold);
    assert!((b.probability - 0.0956).abs() < 1e-4);
    assert!(b.closeness() >= published::CLOSENESS);

    // unrounded gains: still feasible, slightly larger composed decay rate
    let mu = find_mu(&g).unwrap();
    let cc = compose(&constants, &g, &mu).unwrap();
    assert_relative_eq!(cc.kappa_hat, 0.98 - constants[0].rho_int_coef, epsilon = 1e-12);
}

#[test]
fn n_minus_one_mode_is_infeasible() {
    let subs = example::subsystems();
    let topo = example::topology(&subs);
    let g = build_gains(&example_constants(), &topo, DegreeMode::AllPeers)
        .unwrap()
        .rounded_conservatively(published::GAIN_DECIMALS)
        .unwrap();
    // 3² · 0.87879 rounded up
    assert_relative_eq!(g.delta[(0, 2)], 7.91, epsilon = 1e-12);
    assert_relative_eq!(spectral_radius_test(&g), 7.91 / 0.98, epsilon = 1e-9);
    assert!(find_mu(&g).is_err());
}

#[test]
fn q_and_rtilde_are_exactly_ones() {
    let s = &example::subsystems()[0];
    let cand = example::candidate(s);
    let st = solve_structural(s, &cand);
    let (m, _) = example::published_m_k();
    let rt = compute_rtilde(&s.b, &m, &cand.p, &cand.bhat);
    assert!(st.q.iter().all(|&v| v == 1.0));
    assert!(rt.rtilde.iter().all(|&v| v == 1.0));
}
