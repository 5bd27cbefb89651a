//! The subcommands. Each returns an [`Outcome`]: an exit status and the
//! plain-text report to print.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};

use simcert_core::bounds::{finite_horizon_bound, psi_hat, BoundQuery, BoundResult};
use simcert_core::example::{self, published};
use simcert_core::montecarlo::{
    simulate_pair, violation_probability, write_trajectory_csv, CoupledPair, LinearFeedback,
    RunConfig, ViolationEstimate,
};
use simcert_core::smallgain::{build_gains, compose, find_mu, spectral_radius_test};
use simcert_core::spsf::{
    certify, check_conditions, compute_rtilde, derive_constants,
    evaluate_v, residual, solve_structural, AbstractionCertificate, CertifiedAbstraction,
    CertifyOptions, ResidualReport, DEFAULT_TOL,
};
use simcert_core::{CompositionCertificate, DegreeMode, Error, RhoExtVariant};

use crate::project::{
    matrix_rows, reference_example_project, CertificateSpec, ConstantsSpec, Project, ProjectError,
    ProjectFile,
};

/// Process exit status. The numeric values are a stable contract.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Success = 0,
    /// Failed condition, infeasible composition or soundness alarm.
    Failure = 1,
    /// Unreadable or inconsistent input.
    InputError = 2,
}

impl Status {
    pub fn code(self) -> i32 {
        self as i32
    }

    fn max_severity(self, other: Status) -> Status {
        if other.code() > self.code() {
            other
        } else {
            self
        }
    }

    fn of(err: &Error) -> Status {
        match err {
            Error::DimensionMismatch(_)
            | Error::DanglingInput { .. }
            | Error::InvalidTopology(_)
            | Error::PolicyDimension { .. } => Status::InputError,
            Error::Infeasible(_)
            | Error::UnsupportedForm(_)
            | Error::Domain(_)
            | Error::PreconditionViolated(_) => Status::Failure,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub status: Status,
    pub report: String,
}

impl Outcome {
    fn new(status: Status, report: String) -> Self {
        Outcome { status, report }
    }

    fn input_error(err: &ProjectError) -> Self {
        let status = match err {
            ProjectError::Model(e) => Status::of(e),
            _ => Status::InputError,
        };
        Outcome::new(status, format!("error: {err}\n"))
    }
}

/// Options shared by every subcommand.
#[derive(Debug, Clone, Copy)]
pub struct Settings {
    pub tol: f64,
    pub rho_ext_variant: RhoExtVariant,
    /// Overrides the project's degree mode.
    pub degree_mode: Option<DegreeMode>,
    /// Overrides the project's gain rounding.
    pub gain_decimals: Option<u32>,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            tol: DEFAULT_TOL,
            rho_ext_variant: RhoExtVariant::AsPrinted,
            degree_mode: None,
            gain_decimals: None,
        }
    }
}

/// Early exit carrying the status; the report so far holds the reason.
type Step<T> = std::result::Result<T, Status>;

fn fmt_vec(v: &DVector<f64>) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.6}")).collect();
    format!("[{}]", parts.join(", "))
}

fn fmt_matrix(m: &DMatrix<f64>, indent: &str) -> String {
    m.row_iter()
        .map(|r| {
            let parts: Vec<String> = r.iter().map(|x| format!("{x:>9.6}")).collect();
            format!("{indent}{}\n", parts.join(" "))
        })
        .collect()
}

/// Checks the stored certificate, or builds one from stored or synthesised
/// `(M, K)`, for every subsystem. Failures are written to `out`.
fn certified_abstractions(
    project: &Project,
    settings: &Settings,
    out: &mut String,
) -> Step<Vec<CertifiedAbstraction>> {
    let mut result = Vec::with_capacity(project.subsystems.len());
    let mut failed = false;
    for (idx, s) in project.subsystems.iter().enumerate() {
        let id = project.ids[idx];
        let Some(abs) = &project.abstractions[idx] else {
            let _ = writeln!(out, "error: subsystem {id} has no abstraction");
            return Err(Status::InputError);
        };
        match &abs.certificate {
            Some(cert) => {
                let report = check_conditions(s, &abs.candidate, cert, settings.tol);
                if !report.passed() {
                    let _ = writeln!(out, "subsystem {id}: stored certificate fails");
                    let _ = write!(out, "{report}");
                    failed = true;
                    continue;
                }
                let constants =
                    derive_constants(s, &abs.candidate, cert, settings.rho_ext_variant);
                result.push(CertifiedAbstraction {
                    candidate: abs.candidate.clone(),
                    certificate: cert.clone(),
                    constants,
                    report,
                    rank_deficient_b: solve_structural(s, &abs.candidate).rank_deficient,
                    rtilde_pseudo_inverse: false,
                });
            }
            None => {
                let mut opts = CertifyOptions::new(abs.pi, abs.kappa_hat);
                opts.m_k = abs.m_k.clone();
                opts.tol = settings.tol;
                opts.rho_ext_variant = settings.rho_ext_variant;
                match certify(s, &abs.candidate, &opts) {
                    Ok(ca) => result.push(ca),
                    Err(e) => {
                        let _ = writeln!(out, "subsystem {id}: {e}");
                        if Status::of(&e) == Status::InputError {
                            return Err(Status::InputError);
                        }
                        failed = true;
                    }
                }
            }
        }
    }
    if failed {
        Err(Status::Failure)
    } else {
        Ok(result)
    }
}

fn write_check(out: &mut String, id: usize, report: &ResidualReport) {
    let verdict = if report.passed() { "PASS" } else { "FAIL" };
    let _ = writeln!(out, "subsystem {id}: {verdict}");
    let _ = write!(out, "{report}");
    if let Some(r) = report.get(residual::KAPPA_RANGE) {
        if !r.pass {
            let _ = writeln!(out, "  kappa_hat out of (0,1): {}", r.value);
        }
    }
}

/// Verifies every stored certificate (building `Q`, `S`, `R̃` when only
/// `M`, `K` are stored). Exit 0 iff all pass.
pub fn cmd_check(project_path: &Path, settings: &Settings) -> Outcome {
    let project = match Project::load(project_path) {
        Ok(p) => p,
        Err(e) => return Outcome::input_error(&e),
    };
    check_project(&project, settings)
}

pub fn check_project(project: &Project, settings: &Settings) -> Outcome {
    let mut out = String::new();
    for note in &project.file.notes {
        let _ = writeln!(out, "note: {note}");
    }
    let _ = writeln!(out, "tolerance: {:e}", settings.tol);
    let mut status = Status::Success;
    for (idx, s) in project.subsystems.iter().enumerate() {
        let id = project.ids[idx];
        let Some(abs) = &project.abstractions[idx] else {
            let _ = writeln!(out, "subsystem {id}: no abstraction");
            status = Status::Failure;
            continue;
        };
        let structural = solve_structural(s, &abs.candidate);
        let cert = match (&abs.certificate, &abs.m_k) {
            (Some(c), _) => c.clone(),
            (None, Some((m, k))) => AbstractionCertificate {
                rtilde: compute_rtilde(&s.b, m, &abs.candidate.p, &abs.candidate.bhat).rtilde,
                m: m.clone(),
                k: k.clone(),
                q: structural.q.clone(),
                s: structural.s.clone(),
                pi: abs.pi,
                kappa_hat: abs.kappa_hat,
            },
            (None, None) => {
                let _ = writeln!(out, "subsystem {id}: no certificate (run `simcert abstract`)");
                status = Status::Failure;
                continue;
            }
        };
        let report = check_conditions(s, &abs.candidate, &cert, settings.tol);
        write_check(&mut out, id, &report);
        if abs.certificate.is_some() {
            let ds = (&cert.s - &structural.s).amax();
            let dq = (&cert.q - &structural.q).amax();
            let _ = writeln!(
                out,
                "  recomputed from the structural equations: max |dQ| = {dq:.3e}, max |dS| = {ds:.3e}"
            );
        }
        if structural.rank_deficient {
            let _ = writeln!(out, "  note: B is rank deficient; Q and S are minimum-norm choices");
        }
        if !report.passed() {
            status = Status::Failure;
        }
    }
    Outcome::new(status, out)
}

/// Builds certificates for one subsystem (or all) and writes them back.
pub fn cmd_abstract(
    project_path: &Path,
    subsystem: Option<usize>,
    pi: Option<f64>,
    kappa_hat: Option<f64>,
    out_path: Option<&Path>,
    settings: &Settings,
) -> Outcome {
    let project = match Project::load(project_path) {
        Ok(p) => p,
        Err(e) => return Outcome::input_error(&e),
    };
    let mut out = String::new();
    let targets: Vec<usize> = match subsystem {
        Some(id) => match project.index_of(id) {
            Some(i) => vec![i],
            None => return Outcome::new(Status::InputError, format!("error: unknown subsystem id {id}\n")),
        },
        None => (0..project.subsystems.len()).collect(),
    };
    let mut file: ProjectFile = project.file.clone();
    let mut status = Status::Success;
    for idx in targets {
        let id = project.ids[idx];
        let s = &project.subsystems[idx];
        let Some(abs) = &project.abstractions[idx] else {
            let _ = writeln!(out, "error: subsystem {id} has no abstraction candidate");
            return Outcome::new(Status::InputError, out);
        };
        let mut opts = CertifyOptions::new(pi.unwrap_or(abs.pi), kappa_hat.unwrap_or(abs.kappa_hat));
        opts.m_k = abs.m_k.clone();
        opts.tol = settings.tol;
        opts.rho_ext_variant = settings.rho_ext_variant;
        let synthesised = opts.m_k.is_none();
        match certify(s, &abs.candidate, &opts) {
            Ok(ca) => {
                let c = ca.constants;
                let _ = writeln!(
                    out,
                    "subsystem {id}: certified ({})",
                    if synthesised { "M, K synthesised" } else { "stored M, K" }
                );
                let _ = writeln!(
                    out,
                    "  alpha = {:.6}·s², kappa_hat = {:.6}, rho_int = {:.6}·s², rho_ext = {:.6}·s², psi = {:.6e}",
                    c.alpha_coef, c.kappa_hat, c.rho_int_coef, c.rho_ext_coef, c.psi
                );
                if ca.rank_deficient_b {
                    let _ = writeln!(out, "  note: B is rank deficient; Q and S are minimum-norm choices");
                }
                if ca.rtilde_pseudo_inverse {
                    let _ = writeln!(out, "  note: BᵀMB is singular; R̃ uses the pseudo-inverse");
                }
                let spec = file
                    .abstractions
                    .iter_mut()
                    .find(|a| a.subsystem == id)
                    .expect("abstraction spec exists for a loaded abstraction");
                let cert = &ca.certificate;
                spec.pi = cert.pi;
                spec.kappa_hat = cert.kappa_hat;
                spec.m = Some(matrix_rows(&cert.m));
                spec.k = Some(matrix_rows(&cert.k));
                spec.certificate = Some(CertificateSpec {
                    q: matrix_rows(&cert.q),
                    s: matrix_rows(&cert.s),
                    r_tilde: matrix_rows(&cert.rtilde),
                });
                spec.constants = Some(ConstantsSpec::from(c));
            }
            Err(e) => {
                let _ = writeln!(out, "subsystem {id}: {e}");
                status = status.max_severity(Status::of(&e));
            }
        }
    }
    if status == Status::Success {
        let dest = out_path.unwrap_or(project_path);
        if let Err(e) = file.save(dest) {
            return Outcome::new(Status::InputError, format!("{out}error: {e}\n"));
        }
        let _ = writeln!(out, "certificates written to {}", dest.display());
    }
    Outcome::new(status, out)
}

/// Certified abstractions and the composed certificate.
struct Composed {
    abstractions: Vec<CertifiedAbstraction>,
    composition: CompositionCertificate,
}

fn compose_project(project: &Project, settings: &Settings, out: &mut String) -> Step<Composed> {
    let abstractions = certified_abstractions(project, settings, out)?;
    let constants: Vec<_> = abstractions.iter().map(|a| a.constants).collect();
    let project_mode = project.degree_mode().map_err(|e| {
        let _ = writeln!(out, "error: {e}");
        Status::InputError
    })?;
    let mode = settings.degree_mode.or(project_mode).unwrap_or_default();
    let decimals = settings.gain_decimals.or(project.gain_decimals());
    let mut gains = build_gains(&constants, &project.topology, mode).map_err(|e| {
        let _ = writeln!(out, "error: {e}");
        Status::of(&e)
    })?;
    if let Some(d) = decimals {
        gains = gains.rounded_conservatively(d).map_err(|e| {
            let _ = writeln!(out, "error: {e}");
            Status::of(&e)
        })?;
    }
    let radius = spectral_radius_test(&gains);
    let _ = writeln!(out, "degree mode: {mode}");
    match decimals {
        Some(d) => {
            let _ = writeln!(out, "gains rounded conservatively to {d} decimals");
        }
        None => {
            let _ = writeln!(out, "gains unrounded");
        }
    }
    let _ = writeln!(out, "Lambda = diag{}", fmt_vec(&gains.lambda));
    let _ = write!(out, "Delta =\n{}", fmt_matrix(&gains.delta, "  "));
    let _ = writeln!(out, "spectral radius of Lambda^-1 Delta: {radius:.6}");
    let mu = find_mu(&gains).map_err(|e| {
        let _ = writeln!(out, "composition infeasible (radius {radius:.6} >= 1): {e}");
        Status::Failure
    })?;
    let composition = compose(&constants, &gains, &mu).map_err(|e| {
        let _ = writeln!(out, "composition failed: {e}");
        Status::of(&e)
    })?;
    let _ = writeln!(out, "mu = {}", fmt_vec(&composition.mu));
    let _ = writeln!(out, "slack mu^T(-Lambda + Delta) = {}", fmt_vec(&composition.slack));
    let _ = writeln!(
        out,
        "composed: alpha = {:.6}·s², kappa_hat = {:.9}, rho_ext = {:.6}·s², psi = {:.9}",
        composition.alpha_coef, composition.kappa_hat, composition.rho_ext_coef, composition.psi
    );
    Ok(Composed {
        abstractions,
        composition,
    })
}

/// Small-gain composition of all certified subsystems.
pub fn cmd_compose(project_path: &Path, settings: &Settings) -> Outcome {
    let project = match Project::load(project_path) {
        Ok(p) => p,
        Err(e) => return Outcome::input_error(&e),
    };
    let mut out = String::new();
    match compose_project(&project, settings, &mut out) {
        Ok(_) => Outcome::new(Status::Success, out),
        Err(status) => Outcome::new(status, out),
    }
}

fn initial_value(
    project: &Project,
    composed: &Composed,
    out: &mut String,
) -> Step<(f64, Vec<DVector<f64>>, Vec<DVector<f64>>)> {
    let (x0, xhat0) = project.initial_states().map_err(|e| {
        let _ = writeln!(out, "error: {e}");
        Status::InputError
    })?;
    let values: Vec<f64> = composed
        .abstractions
        .iter()
        .enumerate()
        .map(|(i, ca)| evaluate_v(&x0[i], &xhat0[i], &ca.certificate.m, &ca.candidate.p))
        .collect();
    Ok((composed.composition.combine(&values), x0, xhat0))
}

fn bound_for(
    project: &Project,
    composed: &Composed,
    epsilon: f64,
    horizon: u64,
    out: &mut String,
) -> Step<BoundResult> {
    let (v0, _, _) = initial_value(project, composed, out)?;
    let c = &composed.composition;
    let nuhat_sup = project.run().nuhat_sup.unwrap_or(0.0);
    let psi_hat = psi_hat(c.rho_ext_coef, nuhat_sup, c.psi);
    let q = BoundQuery {
        v0,
        alpha_coef: c.alpha_coef,
        epsilon,
        horizon,
        psi_hat,
        kappa_hat: c.kappa_hat,
    };
    let r = finite_horizon_bound(&q).map_err(|e| {
        let _ = writeln!(out, "error: {e}");
        Status::of(&e)
    })?;
    let _ = writeln!(out, "epsilon = {epsilon}, horizon = {horizon}, V0 = {v0:.6e}, psi_hat = {psi_hat:.6e}");
    let _ = writeln!(out, "branch: {}", r.branch);
    let _ = writeln!(
        out,
        "P(sup deviation >= epsilon) <= {:.4}{}",
        r.probability,
        if r.clamped {
            format!(" (clamped from {:.4})", r.raw)
        } else {
            String::new()
        }
    );
    let _ = writeln!(
        out,
        "outputs stay epsilon-close over the horizon with probability >= {:.4}",
        r.closeness()
    );
    Ok(r)
}

fn run_parameter<T: Copy>(flag: Option<T>, stored: Option<T>, name: &str, out: &mut String) -> Step<T> {
    flag.or(stored).ok_or_else(|| {
        let _ = writeln!(out, "error: --{name} not given and not set in the project's run section");
        Status::InputError
    })
}

/// Finite-horizon closeness bound of the composed system.
pub fn cmd_bound(
    project_path: &Path,
    epsilon: Option<f64>,
    horizon: Option<u64>,
    settings: &Settings,
) -> Outcome {
    let project = match Project::load(project_path) {
        Ok(p) => p,
        Err(e) => return Outcome::input_error(&e),
    };
    let mut out = String::new();
    let result = (|| {
        let run = project.run();
        let epsilon = run_parameter(epsilon, run.epsilon, "epsilon", &mut out)?;
        let horizon = run_parameter(horizon, run.horizon, "horizon", &mut out)?;
        let composed = compose_project(&project, settings, &mut out)?;
        bound_for(&project, &composed, epsilon, horizon, &mut out)
    })();
    Outcome::new(result.map_or_else(|s| s, |_| Status::Success), out)
}

#[derive(Debug, Clone, Default)]
pub struct SimulateOptions {
    pub epsilon: Option<f64>,
    pub horizon: Option<u64>,
    pub trials: Option<usize>,
    pub seed: Option<u64>,
    /// Worker threads; `None` uses all cores.
    pub threads: Option<usize>,
    /// Write per-step outputs of every trial here.
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct SimulationSummary {
    pub bound: BoundResult,
    pub estimate: ViolationEstimate,
    pub elapsed: Duration,
}

/// How a Monte Carlo estimate relates to the analytic bound at 95%
/// confidence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Soundness {
    /// The upper confidence bound is at or below the analytic bound.
    Confirmed,
    /// The confidence interval straddles the analytic bound.
    Inconclusive,
    /// The lower confidence bound exceeds the analytic bound.
    Violated,
}

impl Soundness {
    pub fn judge(summary: &SimulationSummary) -> Self {
        let bound = summary.bound.probability;
        if summary.estimate.upper_95 <= bound {
            Soundness::Confirmed
        } else if summary.estimate.lower_95 > bound {
            Soundness::Violated
        } else {
            Soundness::Inconclusive
        }
    }
}

fn simulate_project(
    project: &Project,
    opts: &SimulateOptions,
    settings: &Settings,
    out: &mut String,
) -> Step<SimulationSummary> {
    let run = project.run();
    let epsilon = run_parameter(opts.epsilon, run.epsilon, "epsilon", out)?;
    let horizon = run_parameter(opts.horizon, run.horizon, "horizon", out)?;
    let composed = match compose_project(project, settings, out) {
        Ok(c) => c,
        Err(status) => {
            let _ = writeln!(out, "pre-check failed; not simulating");
            return Err(status);
        }
    };
    let bound = bound_for(project, &composed, epsilon, horizon, out)?;
    simulate_composed(project, &composed, bound, epsilon, horizon, opts, out)
}

fn simulate_composed(
    project: &Project,
    composed: &Composed,
    bound: BoundResult,
    epsilon: f64,
    horizon: u64,
    opts: &SimulateOptions,
    out: &mut String,
) -> Step<SimulationSummary> {
    let run = project.run();
    let trials = run_parameter(opts.trials, run.trials, "trials", out)?;
    let seed = run_parameter(opts.seed, run.seed, "seed", out)?;
    let (_, x0, xhat0) = initial_value(project, composed, out)?;
    let horizon_steps = usize::try_from(horizon).map_err(|_| {
        let _ = writeln!(out, "error: horizon {horizon} too large to simulate");
        Status::InputError
    })?;

    let mut gains = Vec::with_capacity(project.subsystems.len());
    for (idx, ca) in composed.abstractions.iter().enumerate() {
        let (mh, nh) = (ca.candidate.bhat.ncols(), ca.candidate.state_dim());
        let g = match run.policy_gains.get(&project.ids[idx]) {
            Some(rows) => {
                let g = crate::project::parse_matrix("policy gain", rows, nh).map_err(|e| {
                    let _ = writeln!(out, "error: {e}");
                    Status::InputError
                })?;
                if g.shape() != (mh, nh) {
                    let _ = writeln!(
                        out,
                        "error: policy gain of subsystem {} must be {mh}×{nh}",
                        project.ids[idx]
                    );
                    return Err(Status::InputError);
                }
                g
            }
            None => DMatrix::zeros(mh, nh),
        };
        gains.push(g);
    }
    for id in run.policy_gains.keys() {
        if project.index_of(*id).is_none() {
            let _ = writeln!(out, "error: policy gain for unknown subsystem id {id}");
            return Err(Status::InputError);
        }
    }
    let policy = LinearFeedback { gains };

    let pair = CoupledPair::new(&project.subsystems, &project.topology, &composed.abstractions)
        .map_err(|e| {
            let _ = writeln!(out, "error: {e}");
            Status::of(&e)
        })?;
    let mut cfg = RunConfig::new(horizon_steps, trials, seed);
    cfg.threads = opts.threads;
    cfg.initial_concrete = Some(x0);
    cfg.initial_abstract = Some(xhat0);
    cfg.record_trajectories = opts.csv.is_some();
    let start = Instant::now();
    let samples = simulate_pair(&pair, &cfg, &policy).map_err(|e| {
        let _ = writeln!(out, "error: {e}");
        Status::of(&e)
    })?;
    let elapsed = start.elapsed();
    if let Some(path) = &opts.csv {
        let mut buf = Vec::new();
        write_trajectory_csv(&samples, &mut buf).expect("writing to memory succeeds");
        if let Err(e) = std::fs::write(path, buf) {
            let _ = writeln!(out, "error: cannot write {}: {e}", path.display());
            return Err(Status::InputError);
        }
        let _ = writeln!(out, "trajectories written to {}", path.display());
    }
    let sups: Vec<f64> = samples.iter().map(|s| s.sup_deviation).collect();
    let estimate = violation_probability(&sups, epsilon);
    let max_dev = sups.iter().copied().fold(0.0, f64::max);
    let mean_dev = sups.iter().sum::<f64>() / sups.len() as f64;
    let _ = writeln!(
        out,
        "simulated {trials} trials (seed {seed}) in {:.2} s; sup deviation mean {mean_dev:.4}, max {max_dev:.4}",
        elapsed.as_secs_f64()
    );
    let _ = writeln!(
        out,
        "empirical P(sup deviation >= epsilon) = {:.4} ({} of {}), 95% upper confidence bound {:.4}",
        estimate.estimate, estimate.violations, estimate.trials, estimate.upper_95
    );
    Ok(SimulationSummary {
        bound,
        estimate,
        elapsed,
    })
}

/// Monte Carlo validation of the closeness bound. Exit 1 when the empirical
/// lower confidence bound exceeds the analytic bound.
pub fn cmd_simulate(project_path: &Path, opts: &SimulateOptions, settings: &Settings) -> Outcome {
    run_simulation(project_path, opts, settings).0
}

/// [`cmd_simulate`] together with the numbers behind its report.
pub fn run_simulation(
    project_path: &Path,
    opts: &SimulateOptions,
    settings: &Settings,
) -> (Outcome, Option<SimulationSummary>) {
    let project = match Project::load(project_path) {
        Ok(p) => p,
        Err(e) => return (Outcome::input_error(&e), None),
    };
    let mut out = String::new();
    match simulate_project(&project, opts, settings, &mut out) {
        Ok(summary) => {
            let verdict = Soundness::judge(&summary);
            let (est, bound) = (&summary.estimate, summary.bound.probability);
            let _ = match verdict {
                Soundness::Confirmed => writeln!(
                    out,
                    "soundness: PASS (empirical upper bound {:.4} <= analytic bound {bound:.4})",
                    est.upper_95
                ),
                Soundness::Inconclusive => writeln!(
                    out,
                    "soundness: INCONCLUSIVE (confidence interval [{:.4}, {:.4}] contains analytic bound {bound:.4}; more trials needed)",
                    est.lower_95, est.upper_95
                ),
                Soundness::Violated => writeln!(
                    out,
                    "soundness: FAIL (empirical lower bound {:.4} > analytic bound {bound:.4})",
                    est.lower_95
                ),
            };
            let status = if verdict == Soundness::Violated {
                Status::Failure
            } else {
                Status::Success
            };
            (Outcome::new(status, out), Some(summary))
        }
        Err(status) => (Outcome::new(status, out), None),
    }
}

#[derive(Debug, Clone)]
pub struct ExampleOptions {
    pub trials: usize,
    pub seed: u64,
    pub threads: Option<usize>,
    /// Write the fixture project (with recomputed `S`) here.
    pub dump_project: Option<PathBuf>,
}

impl Default for ExampleOptions {
    fn default() -> Self {
        ExampleOptions {
            trials: 10_000,
            seed: 42,
            threads: None,
            dump_project: None,
        }
    }
}

/// One compared quantity of the regression run.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub quantity: String,
    pub published: f64,
    pub computed: f64,
    /// Allowed absolute difference; `0` means exact equality.
    pub tolerance: f64,
}

impl Comparison {
    pub fn pass(&self) -> bool {
        (self.computed - self.published).abs() <= self.tolerance
    }
}

/// Structured result of the regression run.
#[derive(Debug, Clone)]
pub struct ExampleRun {
    pub status: Status,
    pub report: String,
    /// Residuals that fail, per subsystem, with the published `S`.
    pub flagged: Vec<Vec<&'static str>>,
    /// Coefficient of the recomputed `S = s·1`.
    pub s_recomputed: f64,
    pub q_exact: bool,
    pub rtilde_exact: bool,
    pub constants: Vec<simcert_core::SpsfConstants>,
    pub composition: Option<CompositionCertificate>,
    pub bound: Option<BoundResult>,
    pub simulation: Option<ViolationEstimate>,
    pub comparisons: Vec<Comparison>,
    pub unexpected: Vec<String>,
    pub elapsed: Duration,
}

/// Rebuilds the four-subsystem ring and compares every constant with the
/// published values.
pub fn run_reference_example(opts: &ExampleOptions, settings: &Settings) -> ExampleRun {
    let start = Instant::now();
    let mut out = String::new();
    let mut unexpected = Vec::new();
    let mut comparisons = Vec::new();
    let subs = example::subsystems();
    let n = example::STATE_DIM;

    let _ = writeln!(out, "== check with the published S = {}·1", published::S_COEF);
    let published_project = reference_example_project(published::S_COEF)
        .resolve()
        .expect("fixture project is consistent");
    let mut flagged = Vec::new();
    for (idx, s) in published_project.subsystems.iter().enumerate() {
        let abs = published_project.abstractions[idx].as_ref().expect("fixture has abstractions");
        let cert = abs.certificate.as_ref().expect("fixture has certificates");
        let report = check_conditions(s, &abs.candidate, cert, settings.tol);
        let failing: Vec<&'static str> = report.failures().map(|r| r.name).collect();
        let id = published_project.ids[idx];
        match failing.as_slice() {
            [name] if *name == residual::INTERNAL_INPUT_MATCH => {
                let r = report.get(name).expect("residual present");
                let _ = writeln!(
                    out,
                    "subsystem {id}: flagged {name} (D = P·D_hat − B·S), residual {:.3e} > {:.3e}",
                    r.value, r.threshold
                );
            }
            _ => {
                let _ = write!(out, "{report}");
                unexpected.push(format!(
                    "subsystem {id}: published certificate fails {failing:?}, expected only {}",
                    residual::INTERNAL_INPUT_MATCH
                ));
            }
        }
        flagged.push(failing);
    }

    let structural = solve_structural(&subs[0], &example::candidate(&subs[0]));
    let s_recomputed = structural.s[(0, 0)];
    let s_uniform = structural.s.iter().all(|&v| v == s_recomputed);
    let _ = writeln!(
        out,
        "recomputed S = {s_recomputed:.6}·1 (published {}·1): the documented discrepancy",
        published::S_COEF
    );
    if !s_uniform || (s_recomputed + 0.004).abs() > 1e-12 {
        unexpected.push(format!("recomputed S is not −0.004·1 (got {s_recomputed})"));
    }

    let project = reference_example_project(s_recomputed)
        .resolve()
        .expect("fixture project is consistent");
    if let Some(path) = &opts.dump_project {
        match project.file.save(path) {
            Ok(()) => {
                let _ = writeln!(out, "fixture project written to {}", path.display());
            }
            Err(e) => unexpected.push(format!("cannot write fixture project: {e}")),
        }
    }

    let _ = writeln!(out, "\n== abstract (published M = I, K = {}·I)", example::FEEDBACK);
    let mut constants = Vec::new();
    let (mut q_exact, mut rtilde_exact) = (true, true);
    for (idx, s) in project.subsystems.iter().enumerate() {
        let abs = project.abstractions[idx].as_ref().expect("fixture has abstractions");
        let mut copts = CertifyOptions::new(abs.pi, abs.kappa_hat);
        copts.m_k = abs.m_k.clone();
        copts.tol = settings.tol;
        copts.rho_ext_variant = settings.rho_ext_variant;
        match certify(s, &abs.candidate, &copts) {
            Ok(ca) => {
                q_exact &= ca.certificate.q.shape() == (n, 1) && ca.certificate.q.iter().all(|&v| v == 1.0);
                rtilde_exact &=
                    ca.certificate.rtilde.shape() == (n, 1) && ca.certificate.rtilde.iter().all(|&v| v == 1.0);
                constants.push(ca.constants);
            }
            Err(e) => unexpected.push(format!("subsystem {}: {e}", project.ids[idx])),
        }
    }
    let _ = writeln!(out, "Q = 1_{n} exactly: {q_exact}; R_tilde = 1_{n} exactly: {rtilde_exact}");
    if !q_exact {
        unexpected.push("Q differs from 1_25".into());
    }
    if !rtilde_exact {
        unexpected.push("R_tilde differs from 1_25".into());
    }
    for (i, c) in constants.iter().enumerate() {
        let id = i + 1;
        let _ = writeln!(
            out,
            "subsystem {id}: kappa_hat = {}, rho_int = {:.6}·s², rho_ext = {}·s², psi = {:.6}",
            c.kappa_hat, c.rho_int_coef, c.rho_ext_coef, c.psi
        );
        comparisons.push(Comparison {
            quantity: format!("rho_int coefficient ({id})"),
            published: published::RHO_INT,
            computed: c.rho_int_coef,
            tolerance: 0.005,
        });
        comparisons.push(Comparison {
            quantity: format!("psi ({id})"),
            published: published::PSI,
            computed: c.psi,
            tolerance: 1e-6,
        });
        comparisons.push(Comparison {
            quantity: format!("rho_ext coefficient ({id})"),
            published: published::RHO_EXT,
            computed: c.rho_ext_coef,
            tolerance: 0.0,
        });
        comparisons.push(Comparison {
            quantity: format!("kappa_hat ({id})"),
            published: example::KAPPA_HAT,
            computed: c.kappa_hat,
            tolerance: 0.0,
        });
    }
    if settings.rho_ext_variant == RhoExtVariant::Symmetric {
        let _ = writeln!(out, "rho_ext uses the symmetric factor; B·R_tilde = P·B_hat keeps it at 0");
    }

    let mut composition = None;
    let mut bound = None;
    let mut simulation = None;
    let mut status_override = None;
    if constants.len() == example::SUBSYSTEMS {
        let _ = writeln!(out, "\n== compose");
        let settings = Settings {
            gain_decimals: settings.gain_decimals.or(Some(published::GAIN_DECIMALS)),
            ..*settings
        };
        match compose_project(&project, &settings, &mut out) {
            Ok(composed) => {
                let c = &composed.composition;
                comparisons.push(Comparison {
                    quantity: "spectral radius".into(),
                    published: published::SPECTRAL_RADIUS,
                    computed: c.spectral_radius,
                    tolerance: 1e-3,
                });
                comparisons.push(Comparison {
                    quantity: "composed kappa_hat".into(),
                    published: published::COMPOSED_KAPPA_HAT,
                    computed: c.kappa_hat,
                    tolerance: 1e-9,
                });
                comparisons.push(Comparison {
                    quantity: "composed psi".into(),
                    published: published::COMPOSED_PSI,
                    computed: c.psi,
                    tolerance: 1e-9,
                });
                let mu_spread = c.mu.max() - c.mu.min();
                if mu_spread > 1e-9 * c.mu.max() {
                    unexpected.push(format!("mu is not proportional to 1: {}", fmt_vec(&c.mu)));
                }

                let _ = writeln!(out, "\n== bound");
                match bound_for(&project, &composed, published::EPSILON, published::HORIZON, &mut out) {
                    Ok(b) => {
                        comparisons.push(Comparison {
                            quantity: "closeness bound (eps = 1, T = 10)".into(),
                            published: 0.0956,
                            computed: b.probability,
                            tolerance: 1e-4,
                        });
                        if b.closeness() < published::CLOSENESS {
                            unexpected.push(format!(
                                "closeness {:.4} below the published {}",
                                b.closeness(),
                                published::CLOSENESS
                            ));
                        }
                        bound = Some(b);
                    }
                    Err(_) => unexpected.push("bound evaluation failed".into()),
                }
                composition = Some(c.clone());

                let _ = writeln!(out, "\n== simulate");
                let sim_opts = SimulateOptions {
                    trials: Some(opts.trials),
                    seed: Some(opts.seed),
                    threads: opts.threads,
                    ..Default::default()
                };
                let simulated = match bound {
                    Some(b) => simulate_composed(
                        &project,
                        &composed,
                        b,
                        published::EPSILON,
                        published::HORIZON,
                        &sim_opts,
                        &mut out,
                    ),
                    None => Err(Status::Failure),
                };
                match simulated {
                    Ok(summary) => {
                        let sound = summary.estimate.upper_95 <= summary.bound.probability;
                        let _ = writeln!(
                            out,
                            "soundness: {}",
                            if sound { "PASS" } else { "FAIL" }
                        );
                        if !sound {
                            unexpected.push("Monte Carlo upper bound exceeds the analytic bound".into());
                        }
                        simulation = Some(summary.estimate);
                    }
                    Err(_) => unexpected.push("simulation failed".into()),
                }
            }
            Err(status) => {
                let mode = settings.degree_mode.unwrap_or_default();
                if mode == DegreeMode::AllPeers {
                    let _ = writeln!(
                        out,
                        "composition is infeasible with degree mode {mode}: expected, since every off-diagonal gain is (N−1)² times larger"
                    );
                    status_override = Some(Status::Failure);
                } else {
                    unexpected.push("composition failed".into());
                    status_override = Some(status);
                }
            }
        }
    }

    let _ = writeln!(out, "\n== comparison with published values");
    let _ = writeln!(
        out,
        "{:<36} {:>12} {:>14} {:>10}  status",
        "quantity", "published", "computed", "tolerance"
    );
    for c in &comparisons {
        let _ = writeln!(
            out,
            "{:<36} {:>12} {:>14.9} {:>10.0e}  {}",
            c.quantity,
            c.published,
            c.computed,
            c.tolerance,
            if c.pass() { "ok" } else { "MISMATCH" }
        );
        if !c.pass() {
            unexpected.push(format!(
                "{}: computed {} vs published {}",
                c.quantity, c.computed, c.published
            ));
        }
    }
    let _ = writeln!(
        out,
        "documented discrepancy: S recomputed as {s_recomputed:.6}·1, published {}·1",
        published::S_COEF
    );
    let elapsed = start.elapsed();
    let status = if !unexpected.is_empty() {
        let _ = writeln!(out, "\nunexpected mismatches:");
        for u in &unexpected {
            let _ = writeln!(out, "  {u}");
        }
        Status::Failure
    } else {
        status_override.unwrap_or(Status::Success)
    };
    let _ = writeln!(out, "finished in {:.2} s", elapsed.as_secs_f64());
    ExampleRun {
        status,
        report: out,
        flagged,
        s_recomputed,
        q_exact,
        rtilde_exact,
        constants,
        composition,
        bound,
        simulation,
        comparisons,
        unexpected,
        elapsed,
    }
}

pub fn cmd_reference_example(opts: &ExampleOptions, settings: &Settings) -> Outcome {
    let run = run_reference_example(opts, settings);
    Outcome::new(run.status, run.report)
}
