use approx::assert_relative_eq;
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use simcert_core::example;
use simcert_core::model::{LinearSubsystem, Topology};
use simcert_core::montecarlo::{
    empirical_supermartingale_check, noise_stream, simulate_pair, standard_normal_vector,
    write_trajectory_csv, CoupledPair, RunConfig, Side, ZeroPolicy,
};
use simcert_core::random::{random_certified_pair, random_point};
use simcert_core::spsf::{
    certify, evaluate_v, interface, AbstractionCandidate, CertifiedAbstraction, CertifyOptions,
};

fn example_certified() -> (Vec<LinearSubsystem>, Topology, Vec<CertifiedAbstraction>) {
    let subs = example::subsystems();
    let topo = example::topology(&subs);
    let cas = subs
        .iter()
        .map(|s| {
            let mut opts = CertifyOptions::new(example::PI, example::KAPPA_HAT);
            opts.m_k = Some(example::published_m_k());
            certify(s, &example::candidate(s), &opts).unwrap()
        })
        .collect();
    (subs, topo, cas)
}

fn noiseless(mut s: LinearSubsystem) -> LinearSubsystem {
    s.f = DMatrix::zeros(s.state_dim(), 1);
    s
}

#[test]
fn noiseless_matched_start_never_deviates() {
    let subs: Vec<LinearSubsystem> = example::subsystems().into_iter().map(noiseless).collect();
    let topo = example::topology(&subs);
    let cas: Vec<CertifiedAbstraction> = subs
        .iter()
        .map(|s| {
            let mut opts = CertifyOptions::new(example::PI, example::KAPPA_HAT);
            opts.m_k = Some(example::published_m_k());
            certify(s, &example::candidate(s), &opts).unwrap()
        })
        .collect();
    let pair = CoupledPair::new(&subs, &topo, &cas).unwrap();
    let mut cfg = RunConfig::new(20, 5, 1);
    let xhat0: Vec<DVector<f64>> = (0..4).map(|i| DVector::from_element(1, 0.1 * i as f64)).collect();
    cfg.initial_concrete = Some(xhat0.iter().map(|xh| DVector::from_element(25, xh[0])).collect());
    cfg.initial_abstract = Some(xhat0);
    let policy = |_k: usize, xhat: &[DVector<f64>]| -> Vec<DVector<f64>> {
        xhat.iter().map(|x| x * -1.5).collect()
    };
    for s in simulate_pair(&pair, &cfg, &policy).unwrap() {
        assert!(s.sup_deviation <= 1e-12, "{}", s.sup_deviation);
    }
}

#[test]
fn error_decays_geometrically_without_noise() {
    // scalar concrete and abstract with identical dynamics, K = −0.5
    let s = LinearSubsystem {
        id: 0,
        a: DMatrix::from_element(1, 1, 1.0),
        b: DMatrix::from_element(1, 1, 1.0),
        d: DMatrix::zeros(1, 0),
        f: DMatrix::zeros(1, 1),
        c_ext: DMatrix::from_element(1, 1, 1.0),
        c_int: Default::default(),
    };
    let cand = AbstractionCandidate::identity(&s);
    let mut opts = CertifyOptions::new(0.5, 0.5);
    opts.m_k = Some((DMatrix::from_element(1, 1, 1.0), DMatrix::from_element(1, 1, -0.5)));
    let ca = certify(&s, &cand, &opts).unwrap();
    let subs = [s];
    let topo = Topology::empty(1);
    let cas = [ca];
    let pair = CoupledPair::new(&subs, &topo, &cas).unwrap();
    let mut cfg = RunConfig::new(8, 1, 0);
    cfg.record_trajectories = true;
    cfg.initial_concrete = Some(vec![DVector::from_element(1, 1.0)]);
    cfg.initial_abstract = Some(vec![DVector::zeros(1)]);
    let out = simulate_pair(&pair, &cfg, &ZeroPolicy).unwrap();
    let traj = out[0].trajectory.as_ref().unwrap();
    for p in traj {
        assert_relative_eq!(p.deviation, 0.5f64.powi(p.k as i32), epsilon = 1e-15);
    }
    assert_eq!(out[0].sup_deviation, 1.0);
}

#[test]
fn csv_is_independent_of_worker_count() {
    let (subs, topo, cas) = example_certified();
    let pair = CoupledPair::new(&subs, &topo, &cas).unwrap();
    let mut bytes = Vec::new();
    for threads in [1, 3] {
        let mut cfg = RunConfig::new(10, 16, 99);
        cfg.threads = Some(threads);
        cfg.record_trajectories = true;
        let out = simulate_pair(&pair, &cfg, &ZeroPolicy).unwrap();
        let mut buf = Vec::new();
        write_trajectory_csv(&out, &mut buf).unwrap();
        bytes.push(buf);
    }
    assert_eq!(bytes[0], bytes[1]);
    let text = String::from_utf8(bytes.pop().unwrap()).unwrap();
    assert!(text.starts_with("trial,k,y0,y1,y2,y3,yhat0,yhat1,yhat2,yhat3,deviation\n"));
    assert_eq!(text.lines().count(), 1 + 16 * 11);
}

#[test]
fn different_seeds_differ() {
    let (subs, topo, cas) = example_certified();
    let pair = CoupledPair::new(&subs, &topo, &cas).unwrap();
    let a = simulate_pair(&pair, &RunConfig::new(10, 4, 1), &ZeroPolicy).unwrap();
    let b = simulate_pair(&pair, &RunConfig::new(10, 4, 2), &ZeroPolicy).unwrap();
    assert_ne!(a[0].sup_deviation, b[0].sup_deviation);
}

#[test]
fn policy_dimension_is_checked() {
    let (subs, topo, cas) = example_certified();
    let pair = CoupledPair::new(&subs, &topo, &cas).unwrap();
    let bad = |_k: usize, _x: &[DVector<f64>]| -> Vec<DVector<f64>> { vec![DVector::zeros(2); 4] };
    assert!(simulate_pair(&pair, &RunConfig::new(3, 1, 0), &bad).is_err());
}

#[test]
fn sampled_expectation_matches_literal_stepping() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (s, ca) = loop {
        if let Some(pair) = random_certified_pair(&mut rng, 5, 2, 2) {
            break pair;
        }
    };
    let cand = &ca.candidate;
    let cert = &ca.certificate;
    let abs = cand.abstract_subsystem(0);
    let points: Vec<_> = (0..4).map(|_| random_point(&mut rng, &s, cand)).collect();
    let draws = 2000;
    let check = empirical_supermartingale_check(&s, &ca, &points, draws, 17);
    for (idx, pt) in points.iter().enumerate() {
        let nu = interface(&pt.x, &pt.xhat, &pt.nuhat, &pt.omegahat, &cand.p, cert);
        let mut rc = noise_stream(17, idx as u64, 0, Side::Concrete);
        let mut ra = noise_stream(17, idx as u64, 0, Side::Abstract);
        let mut sum = 0.0;
        for _ in 0..draws {
            let z = standard_normal_vector(&mut rc, s.noise_dim());
            let zh = standard_normal_vector(&mut ra, abs.noise_dim());
            let xn = s.step(&pt.x, &nu, &pt.omega, &z);
            let xhn = abs.step(&pt.xhat, &pt.nuhat, &pt.omegahat, &zh);
            sum += evaluate_v(&xn, &xhn, &cert.m, &cand.p);
        }
        let mean = sum / draws as f64;
        let v = evaluate_v(&pt.x, &pt.xhat, &cert.m, &cand.p);
        // mc_margin = rhs − (mean − v)
        let rhs = simcert_core::spsf::decrease_bound(v, &pt.omega, &pt.omegahat, &pt.nuhat, &ca.constants);
        let implied_mean = rhs + v - check.points[idx].mc_margin;
        assert_relative_eq!(implied_mean, mean, max_relative = 1e-9);
    }
}

#[test]
fn zero_noise_sampling_equals_closed_form() {
    let (subs, _, cas) = example_certified();
    let mut s = noiseless(subs[0].clone());
    s.f = DMatrix::zeros(25, 1);
    let mut ca = cas[0].clone();
    ca.constants.psi = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let points: Vec<_> = (0..10).map(|_| random_point(&mut rng, &s, &ca.candidate)).collect();
    let check = empirical_supermartingale_check(&s, &ca, &points, 10, 1);
    for p in &check.points {
        assert_eq!(p.std_error, 0.0);
        assert_eq!(p.z_vs_closed_form, 0.0);
        assert_relative_eq!(p.mc_margin, p.closed_form_margin, epsilon = 1e-9);
        assert!(p.closed_form_margin >= -1e-9);
    }
}
