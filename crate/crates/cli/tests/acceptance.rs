//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any
//! failure.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use simcert::commands::{
    run_reference_example, run_simulation, ExampleOptions, SimulateOptions,
};
use simcert::project::reference_example_project;
use simcert::{Settings, Status};
use simcert_core::bounds::{
    branch_value, finite_horizon_bound, infinite_horizon_bound, BoundQuery, Branch,
};
use simcert_core::example::{self, published};
use simcert_core::montecarlo::empirical_supermartingale_check;
use simcert_core::random::{random_certified_pair, random_gains, random_point, random_subsystem};
use simcert_core::smallgain::find_mu;
use simcert_core::spsf::{
    certify, check_conditions, compute_rtilde, residual, solve_structural, synthesize_mk,
    AbstractionCandidate, AbstractionCertificate, CertifyOptions,
};
use simcert_core::Error;

const EXAMPLE_BOUND: f64 = 0.0956;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn c1_reference_example() -> Verdict {
    let run = run_reference_example(&ExampleOptions::default(), &Settings::default());
    let failed: Vec<_> = run
        .comparisons
        .iter()
        .filter(|c| !c.pass())
        .map(|c| c.quantity.clone())
        .collect();
    let only_s = run.flagged.len() == 4
        && run
            .flagged
            .iter()
            .all(|f| f.as_slice() == [residual::INTERNAL_INPUT_MATCH]);
    let s_ok = (run.s_recomputed - -0.004).abs() < 1e-12;
    let composed = run.composition.as_ref();
    let kappa_ok = composed.is_some_and(|c| (c.kappa_hat - 0.1).abs() <= 1e-9);
    let psi_ok = composed.is_some_and(|c| (c.psi - 0.01).abs() <= 1e-9);
    let rho_ext_ok = run.constants.iter().all(|c| c.rho_ext_coef == 0.0);
    let rho_int_ok = run
        .constants
        .iter()
        .all(|c| (c.rho_int_coef - published::RHO_INT).abs() <= 0.005);
    let psi_i_ok = run.constants.iter().all(|c| (c.psi - 0.0025).abs() <= 1e-6);
    let fast = run.elapsed < Duration::from_secs(10);
    let pass = failed.is_empty()
        && only_s
        && s_ok
        && run.q_exact
        && run.rtilde_exact
        && kappa_ok
        && psi_ok
        && rho_ext_ok
        && rho_int_ok
        && psi_i_ok
        && fast
        && run.unexpected.is_empty()
        && run.status == Status::Success;
    verdict(
        pass,
        format!(
            "{} comparisons, failing {:?}; flagged only S: {only_s}; S recomputed {:.6}; \
             Q, R~ exact: {}, {}; {:.2?}",
            run.comparisons.len(),
            failed,
            run.s_recomputed,
            run.q_exact,
            run.rtilde_exact,
            run.elapsed
        ),
    )
}

fn c2_bound() -> Verdict {
    let q = BoundQuery {
        v0: 0.0,
        alpha_coef: 1.0,
        epsilon: 1.0,
        horizon: 10,
        psi_hat: 0.01,
        kappa_hat: 0.1,
    };
    match finite_horizon_bound(&q) {
        Ok(b) => verdict(
            (b.probability - EXAMPLE_BOUND).abs() <= 1e-4,
            format!("bound {:.6} ({})", b.probability, b.branch),
        ),
        Err(e) => verdict(false, e.to_string()),
    }
}

fn example_project_file(dir: &tempfile::TempDir) -> std::path::PathBuf {
    let path = dir.path().join("example.json");
    reference_example_project(-0.004).save(&path).unwrap();
    path
}

fn c3_monte_carlo(dir: &tempfile::TempDir) -> Verdict {
    let path = example_project_file(dir);
    let opts = SimulateOptions {
        epsilon: Some(1.0),
        horizon: Some(10),
        trials: Some(10_000),
        seed: Some(42),
        threads: None,
        csv: None,
    };
    let start = Instant::now();
    let (outcome, summary) = run_simulation(&path, &opts, &Settings::default());
    let elapsed = start.elapsed();
    match summary {
        Some(s) => verdict(
            outcome.status == Status::Success
                && s.estimate.upper_95 <= EXAMPLE_BOUND
                && elapsed < Duration::from_secs(60),
            format!(
                "{} violations in {} trials, 95% upper {:.5} vs {EXAMPLE_BOUND}; {elapsed:.2?}",
                s.estimate.violations, s.estimate.trials, s.estimate.upper_95
            ),
        ),
        None => verdict(false, outcome.report),
    }
}

fn c4_supermartingale() -> Verdict {
    const POINTS: usize = 1_000;
    const DRAWS: usize = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut instances = Vec::new();
    let sub = example::subsystems().remove(0);
    let mut opts = CertifyOptions::new(example::PI, example::KAPPA_HAT);
    opts.m_k = Some(example::published_m_k());
    let ca = certify(&sub, &example::candidate(&sub), &opts).unwrap();
    instances.push((sub, ca));
    while instances.len() < 21 {
        let n = rng.random_range(1..=10);
        let nhat = rng.random_range(1..=n.min(3));
        let m = rng.random_range(1..=3);
        if let Some(pair) = random_certified_pair(&mut rng, n, nhat, m) {
            instances.push(pair);
        }
    }
    let start = Instant::now();
    let mut min_margin = f64::INFINITY;
    let mut max_z: f64 = 0.0;
    for (k, (s, ca)) in instances.iter().enumerate() {
        let points: Vec<_> = (0..POINTS)
            .map(|_| random_point(&mut rng, s, &ca.candidate))
            .collect();
        let check = empirical_supermartingale_check(s, ca, &points, DRAWS, 1000 + k as u64);
        min_margin = min_margin.min(check.min_closed_form_margin());
        max_z = max_z.max(check.max_abs_z());
    }
    verdict(
        min_margin >= -1e-9 && max_z <= 5.0,
        format!(
            "21 instances x {POINTS} points x {DRAWS} draws: min slack {min_margin:.3e}, \
             max |z| {max_z:.2}; {:.1?}",
            start.elapsed()
        ),
    )
}

fn c5_find_mu() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut feasible_ok, mut infeasible_ok) = (0, 0);
    let (mut feasible, mut infeasible) = (0, 0);
    while feasible < 100 {
        let n = rng.random_range(1..=8);
        let target = rng.random_range(0.05..0.99);
        let Some(g) = random_gains(&mut rng, n, target) else { continue };
        feasible += 1;
        if let Ok(mu) = find_mu(&g) {
            if g.slack(&mu).iter().all(|&v| v < 0.0) && mu.iter().all(|&v| v > 0.0) {
                feasible_ok += 1;
            }
        }
    }
    while infeasible < 100 {
        let n = rng.random_range(2..=8);
        let target = rng.random_range(1.0..3.0);
        let Some(g) = random_gains(&mut rng, n, target) else { continue };
        infeasible += 1;
        if matches!(find_mu(&g), Err(Error::Infeasible(_))) {
            infeasible_ok += 1;
        }
    }
    verdict(
        feasible_ok == 100 && infeasible_ok == 100,
        format!("feasible {feasible_ok}/100 negative slack, infeasible {infeasible_ok}/100 rejected"),
    )
}

fn query(v0: f64, alpha_eps: f64, horizon: u64, psi_hat: f64, kappa_hat: f64) -> BoundQuery {
    BoundQuery {
        v0,
        alpha_coef: alpha_eps,
        epsilon: 1.0,
        horizon,
        psi_hat,
        kappa_hat,
    }
}

fn probability(q: &BoundQuery) -> f64 {
    finite_horizon_bound(q).unwrap().probability
}

fn c6_bound_properties() -> Verdict {
    // branches agree where they meet
    let mut agree = 0.0f64;
    for i in 0..100 {
        for j in 0..100 {
            let kappa = 0.01 + 0.98 * i as f64 / 99.0;
            let psi = 1e-3 + j as f64 / 99.0;
            let alpha_eps = psi / kappa;
            let v0 = alpha_eps * ((i * 31 + j * 17) % 100) as f64 / 100.0;
            let q = query(v0, alpha_eps, ((i + 3 * j) % 50) as u64, psi, kappa);
            let diff = branch_value(&q, Branch::LargeThreshold) - branch_value(&q, Branch::SmallThreshold);
            agree = agree.max(diff.abs());
        }
    }

    // monotone in each argument; epsilon enters through alpha(eps) = eps²
    let mut monotone = true;
    let bases = [(0.0, 0.01, 0.1, 10u64), (0.3, 0.2, 0.05, 25), (2.0, 0.5, 0.4, 3)];
    for &(v0, psi, kappa, t) in &bases {
        let grid = |k: usize| k as f64 / 200.0;
        let mut prev = f64::NEG_INFINITY;
        for k in 1..=400 {
            let eps = 3.0 - 2.9 * grid(k) / 2.0;
            let p = probability(&BoundQuery { epsilon: eps, alpha_coef: 1.0, ..query(v0, 1.0, t, psi, kappa) });
            monotone &= p >= prev - 1e-15;
            prev = p;
        }
        let mut prev = f64::NEG_INFINITY;
        for k in 0..=400 {
            let p = probability(&query(v0 + grid(k), 1.0, t, psi, kappa));
            monotone &= p >= prev - 1e-15;
            prev = p;
        }
        let mut prev = f64::NEG_INFINITY;
        for k in 0..=400 {
            let p = probability(&query(v0, 1.0, t, psi + grid(k), kappa));
            monotone &= p >= prev - 1e-15;
            prev = p;
        }
        let mut prev = f64::NEG_INFINITY;
        for h in 0..=200 {
            let p = probability(&query(v0, 1.0, h, psi, kappa));
            monotone &= p >= prev - 1e-15;
            prev = p;
        }
    }

    // long-horizon limit of the small-threshold case
    let mut limit_err = 0.0f64;
    for &(v0, alpha_eps, psi, kappa) in &[(0.5, 0.2, 0.1, 0.1), (3.0, 1.0, 0.5, 0.3), (0.0, 0.05, 0.02, 0.2)] {
        let q = query(v0, alpha_eps, 1 << 40, psi, kappa);
        let expected = psi / (kappa * alpha_eps);
        limit_err = limit_err.max((branch_value(&q, Branch::SmallThreshold) - expected).abs());
    }

    // unbounded horizon equals the offset-free finite bound
    let mut inf_err = 0.0f64;
    for &(v0, alpha, eps) in &[(0.0, 1.0, 1.0), (0.4, 2.0, 0.7), (5.0, 1.0, 1.5)] {
        let inf = infinite_horizon_bound(v0, alpha, eps, 0.0, 0.0).unwrap();
        for t in [0u64, 1, 10, 1000] {
            let q = BoundQuery { v0, alpha_coef: alpha, epsilon: eps, horizon: t, psi_hat: 0.0, kappa_hat: 0.3 };
            inf_err = inf_err.max((finite_horizon_bound(&q).unwrap().probability - inf).abs());
        }
    }

    verdict(
        agree <= 1e-12 && monotone && limit_err <= 1e-9 && inf_err <= 1e-15,
        format!(
            "branch gap {agree:.1e} on 1e4 points, monotone {monotone}, limit error {limit_err:.1e}, \
             infinite-horizon gap {inf_err:.1e}"
        ),
    )
}

fn c7_synthesis() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut certified, mut infeasible, mut bad) = (0, 0, 0);
    for _ in 0..50 {
        let n = rng.random_range(1..=10);
        let m = rng.random_range(1..=n.min(3));
        let mut s = random_subsystem(&mut rng, n, m);
        s.a *= rng.random_range(0.5..2.0);
        let pi = rng.random_range(0.1..2.0);
        let kappa_hat = rng.random_range(0.05..0.95);
        match synthesize_mk(&s.a, &s.b, &s.full_output(), pi, kappa_hat) {
            Ok((m, k)) => {
                let cand = AbstractionCandidate::identity(&s);
                let st = solve_structural(&s, &cand);
                let cert = AbstractionCertificate {
                    rtilde: compute_rtilde(&s.b, &m, &cand.p, &cand.bhat).rtilde,
                    m,
                    k,
                    q: st.q,
                    s: st.s,
                    pi,
                    kappa_hat,
                };
                let report = check_conditions(&s, &cand, &cert, 1e-9);
                if report.passed() {
                    certified += 1;
                } else {
                    eprintln!("n = {n}, pi = {pi}, kappa_hat = {kappa_hat}\n{report}");
                    bad += 1;
                }
            }
            Err(Error::Infeasible(_)) => infeasible += 1,
            Err(_) => bad += 1,
        }
    }
    verdict(
        bad == 0,
        format!("{certified} certified, {infeasible} infeasible, {bad} failing"),
    )
}

fn c8_csv_determinism(dir: &tempfile::TempDir) -> Verdict {
    let path = example_project_file(dir);
    let mut bytes = Vec::new();
    for threads in [1, 4] {
        let csv = dir.path().join(format!("run{threads}.csv"));
        let opts = SimulateOptions {
            epsilon: None,
            horizon: None,
            trials: Some(500),
            seed: Some(2024),
            threads: Some(threads),
            csv: Some(csv.clone()),
        };
        let (outcome, _) = run_simulation(&path, &opts, &Settings::default());
        if outcome.status != Status::Success {
            return verdict(false, outcome.report);
        }
        bytes.push(std::fs::read(csv).unwrap());
    }
    verdict(
        !bytes[0].is_empty() && bytes[0] == bytes[1],
        format!("{} bytes with 1 and 4 workers, identical: {}", bytes[0].len(), bytes[0] == bytes[1]),
    )
}

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let criteria: Vec<(&str, Box<dyn Fn() -> Verdict + '_>)> = vec![
        ("1 example constants and S discrepancy", Box::new(c1_reference_example)),
        ("2 closeness bound", Box::new(c2_bound)),
        ("3 Monte Carlo below bound", Box::new(|| c3_monte_carlo(&dir))),
        ("4 expected decrease and sampled expectation", Box::new(c4_supermartingale)),
        ("5 small-gain weights", Box::new(c5_find_mu)),
        ("6 bound formula properties", Box::new(c6_bound_properties)),
        ("7 synthesis never returns a failing certificate", Box::new(c7_synthesis)),
        ("8 CSV independent of worker count", Box::new(|| c8_csv_determinism(&dir))),
    ];
    let mut failures = 0;
    for (name, check) in &criteria {
        let v = check();
        failures += usize::from(!v.pass);
        println!("{} criterion {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
    }
    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
}
