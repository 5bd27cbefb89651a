//! Monte Carlo validation: simulate a concrete interconnection driven through
//! the interface functions alongside its abstraction, with independent
//! Gaussian noise on each side, and compare empirical deviation frequencies
//! with the analytic bounds.

use std::io::{self, Write};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use statrs::function::beta::beta_reg;

use crate::error::{Error, Result};
use crate::model::{route_internal_inputs, LinearSubsystem, Topology};
use crate::spsf::{
    decrease_bound, evaluate_v, expected_v_next, interface, CertifiedAbstraction,
};

/// Which side of the pair a noise stream feeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Concrete = 0,
    Abstract = 1,
}

const SUBSYSTEM_BITS: u32 = 19;

/// Independent ChaCha8 stream for `(trial, subsystem, side)` under `seed`.
/// Distinct triples map to distinct stream ids, so streams never overlap.
pub fn noise_stream(seed: u64, trial: u64, subsystem: usize, side: Side) -> ChaCha8Rng {
    assert!(
        (subsystem as u64) < (1 << SUBSYSTEM_BITS),
        "too many subsystems for the stream layout"
    );
    assert!(trial < (1 << (63 - SUBSYSTEM_BITS)), "trial index too large");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((trial << (SUBSYSTEM_BITS + 1)) | ((subsystem as u64) << 1) | side as u64);
    rng
}

pub fn standard_normal_vector(rng: &mut ChaCha8Rng, len: usize) -> DVector<f64> {
    DVector::from_fn(len, |_, _| StandardNormal.sample(rng))
}

/// Closed-loop policy for the abstract interconnection: a pure function of
/// time and the abstract states.
pub trait AbstractPolicy: Sync {
    fn nu_hat(&self, k: usize, xhat: &[DVector<f64>], input_dims: &[usize]) -> Vec<DVector<f64>>;
}

/// `ν̂ ≡ 0`.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroPolicy;

impl AbstractPolicy for ZeroPolicy {
    fn nu_hat(&self, _k: usize, _xhat: &[DVector<f64>], input_dims: &[usize]) -> Vec<DVector<f64>> {
        input_dims.iter().map(|&m| DVector::zeros(m)).collect()
    }
}

/// `ν̂_i = G_i x̂_i`.
#[derive(Debug, Clone)]
pub struct LinearFeedback {
    pub gains: Vec<DMatrix<f64>>,
}

impl AbstractPolicy for LinearFeedback {
    fn nu_hat(&self, _k: usize, xhat: &[DVector<f64>], _input_dims: &[usize]) -> Vec<DVector<f64>> {
        self.gains.iter().zip(xhat).map(|(g, x)| g * x).collect()
    }
}

impl<F> AbstractPolicy for F
where
    F: Fn(usize, &[DVector<f64>]) -> Vec<DVector<f64>> + Sync,
{
    fn nu_hat(&self, k: usize, xhat: &[DVector<f64>], _input_dims: &[usize]) -> Vec<DVector<f64>> {
        self(k, xhat)
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunConfig {
    pub horizon: usize,
    pub trials: usize,
    pub seed: u64,
    /// Worker threads; `None` uses the global rayon pool.
    pub threads: Option<usize>,
    pub initial_concrete: Option<Vec<DVector<f64>>>,
    pub initial_abstract: Option<Vec<DVector<f64>>>,
    pub record_trajectories: bool,
}

impl RunConfig {
    pub fn new(horizon: usize, trials: usize, seed: u64) -> Self {
        RunConfig {
            horizon,
            trials,
            seed,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryPoint {
    pub k: usize,
    pub y: DVector<f64>,
    pub yhat: DVector<f64>,
    pub deviation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeviationSample {
    pub trial: usize,
    /// `sup_{0≤k≤T} ‖y(k) − ŷ(k)‖` over stacked external outputs.
    pub sup_deviation: f64,
    pub trajectory: Option<Vec<TrajectoryPoint>>,
}

/// A concrete interconnection, its certified abstractions and the shared
/// wiring.
#[derive(Debug, Clone)]
pub struct CoupledPair<'a> {
    pub concrete: &'a [LinearSubsystem],
    pub abstracts: Vec<LinearSubsystem>,
    pub topology: &'a Topology,
    pub abstractions: &'a [CertifiedAbstraction],
}

impl<'a> CoupledPair<'a> {
    pub fn new(
        concrete: &'a [LinearSubsystem],
        topology: &'a Topology,
        abstractions: &'a [CertifiedAbstraction],
    ) -> Result<Self> {
        if abstractions.len() != concrete.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} subsystems but {} abstractions",
                concrete.len(),
                abstractions.len()
            )));
        }
        topology.validate(concrete)?;
        let abstracts: Vec<LinearSubsystem> = abstractions
            .iter()
            .enumerate()
            .map(|(i, ca)| ca.candidate.abstract_subsystem(i))
            .collect();
        topology.validate(&abstracts)?;
        Ok(CoupledPair {
            concrete,
            abstracts,
            topology,
            abstractions,
        })
    }

    fn stacked_output(subs: &[LinearSubsystem], states: &[DVector<f64>]) -> DVector<f64> {
        let rows: usize = subs.iter().map(|s| s.external_output_dim()).sum();
        let mut y = DVector::zeros(rows);
        let mut r = 0;
        for (s, x) in subs.iter().zip(states) {
            let yi = &s.c_ext * x;
            y.rows_mut(r, yi.len()).copy_from(&yi);
            r += yi.len();
        }
        y
    }

    fn run_trial(
        &self,
        trial: usize,
        cfg: &RunConfig,
        policy: &dyn AbstractPolicy,
    ) -> Result<DeviationSample> {
        let n = self.concrete.len();
        let input_dims: Vec<usize> = self.abstracts.iter().map(|s| s.input_dim()).collect();
        let mut x: Vec<DVector<f64>> = match &cfg.initial_concrete {
            Some(init) => init.clone(),
            None => self.concrete.iter().map(|s| DVector::zeros(s.state_dim())).collect(),
        };
        let mut xhat: Vec<DVector<f64>> = match &cfg.initial_abstract {
            Some(init) => init.clone(),
            None => self.abstracts.iter().map(|s| DVector::zeros(s.state_dim())).collect(),
        };
        let mut rng_c: Vec<ChaCha8Rng> = (0..n)
            .map(|i| noise_stream(cfg.seed, trial as u64, i, Side::Concrete))
            .collect();
        let mut rng_a: Vec<ChaCha8Rng> = (0..n)
            .map(|i| noise_stream(cfg.seed, trial as u64, i, Side::Abstract))
            .collect();

        let mut sup = 0.0_f64;
        let mut trajectory = cfg.record_trajectories.then(Vec::new);
        for k in 0..=cfg.horizon {
            let y = Self::stacked_output(self.concrete, &x);
            let yhat = Self::stacked_output(&self.abstracts, &xhat);
            let deviation = (&y - &yhat).norm();
            sup = sup.max(deviation);
            if let Some(traj) = trajectory.as_mut() {
                traj.push(TrajectoryPoint {
                    k,
                    y,
                    yhat,
                    deviation,
                });
            }
            if k == cfg.horizon {
                break;
            }

            let omega = route_internal_inputs(self.concrete, self.topology, &x);
            let omegahat = route_internal_inputs(&self.abstracts, self.topology, &xhat);
            let nuhat = policy.nu_hat(k, &xhat, &input_dims);
            if nuhat.len() != n {
                return Err(Error::PolicyDimension {
                    subsystem: nuhat.len().min(n),
                    expected: n,
                    got: nuhat.len(),
                });
            }
            for (i, v) in nuhat.iter().enumerate() {
                if v.len() != input_dims[i] {
                    return Err(Error::PolicyDimension {
                        subsystem: i,
                        expected: input_dims[i],
                        got: v.len(),
                    });
                }
            }
            for i in 0..n {
                let ca = &self.abstractions[i];
                let nu = interface(
                    &x[i],
                    &xhat[i],
                    &nuhat[i],
                    &omegahat[i],
                    &ca.candidate.p,
                    &ca.certificate,
                );
                let noise = standard_normal_vector(&mut rng_c[i], self.concrete[i].noise_dim());
                let noise_hat = standard_normal_vector(&mut rng_a[i], self.abstracts[i].noise_dim());
                x[i] = self.concrete[i].step(&x[i], &nu, &omega[i], &noise);
                xhat[i] = self.abstracts[i].step(&xhat[i], &nuhat[i], &omegahat[i], &noise_hat);
            }
        }
        Ok(DeviationSample {
            trial,
            sup_deviation: sup,
            trajectory,
        })
    }
}

/// Runs `cfg.trials` independent coupled trajectories. Output is ordered by
/// trial index and bitwise independent of the worker count.
pub fn simulate_pair(
    pair: &CoupledPair<'_>,
    cfg: &RunConfig,
    policy: &dyn AbstractPolicy,
) -> Result<Vec<DeviationSample>> {
    if cfg.trials == 0 {
        return Err(Error::Domain("at least one trial is required".into()));
    }
    for (label, init, subs) in [
        ("concrete", &cfg.initial_concrete, pair.concrete),
        ("abstract", &cfg.initial_abstract, pair.abstracts.as_slice()),
    ] {
        if let Some(init) = init {
            let ok = init.len() == subs.len()
                && init.iter().zip(subs).all(|(x, s)| x.len() == s.state_dim());
            if !ok {
                return Err(Error::DimensionMismatch(format!(
                    "{label} initial state does not match subsystem dimensions"
                )));
            }
        }
    }
    let run = || {
        (0..cfg.trials)
            .into_par_iter()
            .map(|t| pair.run_trial(t, cfg, policy))
            .collect::<Result<Vec<_>>>()
    };
    let mut samples = match cfg.threads {
        Some(threads) => rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Domain(format!("thread pool: {e}")))?
            .install(run)?,
        None => run()?,
    };
    samples.sort_by_key(|s| s.trial);
    Ok(samples)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViolationEstimate {
    pub trials: usize,
    pub violations: usize,
    pub estimate: f64,
    /// One-sided 95% Clopper–Pearson upper confidence bound.
    pub upper_95: f64,
    /// One-sided 95% Clopper–Pearson lower confidence bound.
    pub lower_95: f64,
}

/// Fraction of samples at or above `epsilon`.
pub fn violation_probability(samples: &[f64], epsilon: f64) -> ViolationEstimate {
    assert!(!samples.is_empty(), "violation_probability needs samples");
    let n = samples.len();
    let k = samples.iter().filter(|&&s| s >= epsilon).count();
    ViolationEstimate {
        trials: n,
        violations: k,
        estimate: k as f64 / n as f64,
        upper_95: clopper_pearson_upper(k, n, 0.95),
        lower_95: clopper_pearson_lower(k, n, 0.95),
    }
}

/// Exact one-sided binomial upper confidence bound: the `p` at which
/// `P(X ≤ k) = 1 − confidence` for `X ~ Bin(n, p)`.
pub fn clopper_pearson_upper(k: usize, n: usize, confidence: f64) -> f64 {
    assert!(k <= n && n > 0);
    let alpha = 1.0 - confidence;
    if k == n {
        return 1.0;
    }
    if k == 0 {
        return 1.0 - alpha.powf(1.0 / n as f64);
    }
    // P(X ≤ k) = I_{1−p}(n−k, k+1), decreasing in p.
    let cdf = |p: f64| beta_reg((n - k) as f64, (k + 1) as f64, 1.0 - p);
    let (mut lo, mut hi) = (k as f64 / n as f64, 1.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if cdf(mid) > alpha {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-15 {
            break;
        }
    }
    hi
}

/// Exact one-sided binomial lower confidence bound, by symmetry with the
/// upper bound on the complementary count.
pub fn clopper_pearson_lower(k: usize, n: usize, confidence: f64) -> f64 {
    assert!(k <= n && n > 0);
    if k == 0 {
        return 0.0;
    }
    1.0 - clopper_pearson_upper(n - k, n, confidence)
}

/// Writes one CSV row per `(trial, k)`. Requires recorded trajectories.
pub fn write_trajectory_csv<W: Write>(samples: &[DeviationSample], out: &mut W) -> io::Result<()> {
    let dims = samples
        .iter()
        .find_map(|s| s.trajectory.as_ref().and_then(|t| t.first()).map(|p| p.y.len()))
        .unwrap_or(0);
    write!(out, "trial,k")?;
    for i in 0..dims {
        write!(out, ",y{i}")?;
    }
    for i in 0..dims {
        write!(out, ",yhat{i}")?;
    }
    writeln!(out, ",deviation")?;
    for s in samples {
        let Some(traj) = &s.trajectory else {
            return Err(io::Error::new(
                io::ErrorKind::InvalidInput,
                "trajectories were not recorded",
            ));
        };
        for p in traj {
            write!(out, "{},{}", s.trial, p.k)?;
            for v in p.y.iter().chain(p.yhat.iter()) {
                write!(out, ",{v}")?;
            }
            writeln!(out, ",{}", p.deviation)?;
        }
    }
    Ok(())
}

/// State and inputs at which the expected-decrease inequality is probed.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePoint {
    pub x: DVector<f64>,
    pub xhat: DVector<f64>,
    pub nuhat: DVector<f64>,
    pub omega: DVector<f64>,
    pub omegahat: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointCheck {
    /// Right-hand side minus the closed-form expected increment.
    pub closed_form_margin: f64,
    /// Right-hand side minus the Monte Carlo expected increment.
    pub mc_margin: f64,
    pub std_error: f64,
    /// `(MC mean − closed form) / std_error`; zero for degenerate noise.
    pub z_vs_closed_form: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupermartingaleCheck {
    pub points: Vec<PointCheck>,
    /// Index of the point with the smallest `mc_margin / std_error`.
    pub worst: usize,
}

impl SupermartingaleCheck {
    pub fn worst_point(&self) -> &PointCheck {
        &self.points[self.worst]
    }

    pub fn min_closed_form_margin(&self) -> f64 {
        self.points
            .iter()
            .map(|p| p.closed_form_margin)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn max_abs_z(&self) -> f64 {
        self.points
            .iter()
            .map(|p| p.z_vs_closed_form.abs())
            .fold(0.0, f64::max)
    }
}

/// Estimates `E[V(x⁺, x̂⁺)]` by sampling at each point and compares it with
/// both the decrease bound and the closed-form expectation.
///
/// The error after one step is `e₀ + Gξ` with `e₀` the noise-free error,
/// `G = [F, −PF̂]` and `ξ` the stacked concrete and abstract noise draws, so
/// each sample is evaluated as `e₀ᵀMe₀ + 2ξᵀGᵀMe₀ + ξᵀGᵀMGξ`. Draws come
/// from the same streams, in the same order, as stepping both systems.
pub fn empirical_supermartingale_check(
    s: &LinearSubsystem,
    ca: &CertifiedAbstraction,
    points: &[SamplePoint],
    draws: usize,
    seed: u64,
) -> SupermartingaleCheck {
    assert!(draws >= 2, "need at least two draws per point");
    let cand = &ca.candidate;
    let cert = &ca.certificate;
    let (q, qhat) = (s.noise_dim(), cand.fhat.ncols());
    let mut noise_map = DMatrix::zeros(s.state_dim(), q + qhat);
    noise_map.columns_mut(0, q).copy_from(&s.f);
    noise_map
        .columns_mut(q, qhat)
        .copy_from(&(-(&cand.p * &cand.fhat)));
    let gram = noise_map.transpose() * &cert.m * &noise_map;
    let checks: Vec<PointCheck> = points
        .par_iter()
        .enumerate()
        .map(|(idx, pt)| {
            let nu = interface(&pt.x, &pt.xhat, &pt.nuhat, &pt.omegahat, &cand.p, cert);
            let v = evaluate_v(&pt.x, &pt.xhat, &cert.m, &cand.p);
            let rhs = decrease_bound(v, &pt.omega, &pt.omegahat, &pt.nuhat, &ca.constants);
            let closed = expected_v_next(
                &pt.x, &pt.xhat, &nu, &pt.nuhat, &pt.omega, &pt.omegahat, s, cand, cert,
            );
            let mean_x = s.step(&pt.x, &nu, &pt.omega, &DVector::zeros(q));
            let mut mean_xhat = &cand.ahat * &pt.xhat;
            mean_xhat.gemv(1.0, &cand.bhat, &pt.nuhat, 1.0);
            mean_xhat.gemv(1.0, &cand.dhat, &pt.omegahat, 1.0);
            let e0 = mean_x - &cand.p * mean_xhat;
            let me0 = &cert.m * &e0;
            let base = e0.dot(&me0);
            let cross = noise_map.transpose() * me0;

            let mut rng_c = noise_stream(seed, idx as u64, 0, Side::Concrete);
            let mut rng_a = noise_stream(seed, idx as u64, 0, Side::Abstract);
            let r = q + qhat;
            let mut xi = vec![0.0_f64; r];
            let (mut mean, mut m2) = (0.0_f64, 0.0_f64);
            for j in 0..draws {
                for slot in &mut xi[..q] {
                    *slot = StandardNormal.sample(&mut rng_c);
                }
                for slot in &mut xi[q..] {
                    *slot = StandardNormal.sample(&mut rng_a);
                }
                let mut vn = base;
                for a in 0..r {
                    let mut row = 2.0 * cross[a];
                    for b in 0..r {
                        row += gram[(a, b)] * xi[b];
                    }
                    vn += xi[a] * row;
                }
                let delta = vn - mean;
                mean += delta / (j + 1) as f64;
                m2 += delta * (vn - mean);
            }
            let var = m2 / (draws - 1) as f64;
            let std_error = (var.max(0.0) / draws as f64).sqrt();
            let diff = mean - closed;
            let z = if std_error > 0.0 {
                diff / std_error
            } else if diff.abs() <= 1e-12 * closed.abs().max(1.0) {
                0.0
            } else {
                f64::INFINITY
            };
            PointCheck {
                closed_form_margin: rhs - (closed - v),
                mc_margin: rhs - (mean - v),
                std_error,
                z_vs_closed_form: z,
            }
        })
        .collect();
    let worst = checks
        .iter()
        .enumerate()
        .min_by(|a, b| {
            let key = |p: &PointCheck| {
                if p.std_error > 0.0 {
                    p.mc_margin / p.std_error
                } else {
                    p.mc_margin.signum() * f64::INFINITY
                }
            };
            key(a.1).total_cmp(&key(b.1))
        })
        .map(|(i, _)| i)
        .unwrap_or(0);
    SupermartingaleCheck {
        points: checks,
        worst,
    }
}
