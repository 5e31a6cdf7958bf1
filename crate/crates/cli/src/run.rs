//! Execution of a validated scenario and artifact writing.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use fermi_sse::bath::{build_kernels, kernel_sums, markov_kernel, BathError, SpectralDensity, TimeGrid};
use fermi_sse::coeffs::{solve, solve_u_thermal, CoeffError, CoeffTable, ModelSpec};
use fermi_sse::grassmann::{verify_completeness, verify_novikov, GrassmannError, MAX_MODES};
use fermi_sse::oracle::{
    one_body_hamiltonian, partial_trace_system, FockSpace, FockState, OneBodyOracle, OracleError,
    MAX_FOCK_MODES,
};
use fermi_sse::propagator::{
    build_system_ops, nonmarkov_witness, propagate, DensityMatrix, MasterEquation, PropagationError,
    SystemOperators, Trajectory,
};
use fermi_sse::sse::{
    build_noise, negate, noise_coefficients, projector, propagate_pair, reconstruct_rho, verify_q_ansatz,
    QAnsatz, SseError, SseOptions,
};
use fermi_sse::C64;
use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::config::{RunMode, Scenario, ScenarioConfig, ScenarioModel};

/// Largest Fock space used for thermal-mixture comparisons.
const MAX_MIXTURE_MODES: usize = 10;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Bath(#[from] BathError),
    #[error(transparent)]
    Coeff(#[from] CoeffError),
    #[error(transparent)]
    Propagation(#[from] PropagationError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Sse(#[from] SseError),
    #[error(transparent)]
    Grassmann(#[from] GrassmannError),
    #[error("cannot write {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("cannot serialize metadata: {0}")]
    Metadata(String),
}

/// One named pass/fail comparison.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl Check {
    fn at_most(name: &str, value: f64, tolerance: f64) -> Self {
        Self { name: name.into(), value, tolerance, pass: value <= tolerance }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunOutcome {
    pub checks: Vec<Check>,
    pub notes: Vec<String>,
    pub files: Vec<PathBuf>,
}

impl RunOutcome {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

#[derive(Serialize)]
struct GridRecord {
    t_max_hbar_per_ev: f64,
    n_steps: usize,
    dt: f64,
}

#[derive(Serialize)]
struct SolverRecord {
    name: String,
    tolerance: f64,
    max_iterations_allowed: usize,
    rotating_frame: bool,
    frame_ev: f64,
    max_residual: f64,
    max_iterations: usize,
    total_iterations: usize,
    monotone_after_third_iteration: bool,
}

#[derive(Serialize)]
struct WitnessRecord {
    crossings: usize,
    negative_fraction: f64,
}

#[derive(Serialize)]
struct PropagationRecord {
    substeps: usize,
    max_trace_error: f64,
    max_hermiticity_error: f64,
    min_eigenvalue: f64,
}

#[derive(Serialize)]
struct Metadata<'a> {
    variant: &'static str,
    mode: RunMode,
    passed: bool,
    /// Sign convention of the free term in the vacuum `f` equation.
    sign_flip: &'static str,
    notes: Vec<String>,
    grid: GridRecord,
    solver: SolverRecord,
    witness: BTreeMap<String, WitnessRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    propagation: Option<PropagationRecord>,
    checks: &'a [Check],
    config: &'a ScenarioConfig,
}

fn create(path: &Path) -> Result<BufWriter<File>, RunError> {
    File::create(path).map(BufWriter::new).map_err(|source| RunError::Io { path: path.into(), source })
}

fn write_with<F>(path: &Path, files: &mut Vec<PathBuf>, f: F) -> Result<(), RunError>
where
    F: FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
{
    let mut w = create(path)?;
    f(&mut w).and_then(|_| w.flush()).map_err(|source| RunError::Io { path: path.into(), source })?;
    files.push(path.into());
    Ok(())
}

fn max_abs_diff(a: &DMatrix<C64>, b: &DMatrix<C64>) -> f64 {
    (a - b).iter().map(|z| z.norm()).fold(0.0, f64::max)
}

fn max_traj_diff(a: &[DMatrix<C64>], b: &[DMatrix<C64>]) -> f64 {
    a.iter().zip(b).map(|(x, y)| max_abs_diff(x, y)).fold(0.0, f64::max)
}

fn max_population_diff(a: &[DMatrix<C64>], b: &[DMatrix<C64>]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (0..x.nrows()).map(|k| (x[(k, k)].re - y[(k, k)].re).abs()).fold(0.0, f64::max))
        .fold(0.0, f64::max)
}

fn oracle_trajectory(times: &[f64], states: Vec<DMatrix<C64>>) -> Trajectory {
    Trajectory { times: times.to_vec(), states, max_trace_error: 0.0, max_hermiticity_error: 0.0, min_eigenvalue: 0.0 }
}

fn solve_scenario(sc: &Scenario) -> Result<CoeffTable, RunError> {
    Ok(match &sc.model {
        ScenarioModel::Spec(m) => solve(m, &sc.grid, &sc.solver)?,
        ScenarioModel::MarkovDot { omega0, gamma } => {
            solve_u_thermal(*omega0, &markov_kernel(*gamma)?, &sc.grid, &sc.solver)?
        }
    })
}

fn system(sc: &Scenario) -> Result<(SystemOperators, MasterEquation), RunError> {
    Ok(match &sc.model {
        ScenarioModel::Spec(m) => (build_system_ops(m)?, MasterEquation::for_model(m)),
        ScenarioModel::MarkovDot { omega0, .. } => {
            let h1 = DMatrix::from_element(1, 1, C64::from(*omega0));
            (SystemOperators::from_one_body(&h1)?, MasterEquation::Thermal)
        }
    })
}

/// Runs `sc`, writing every artifact into `out`.
pub fn execute(sc: &Scenario, cfg: &ScenarioConfig, out: &Path) -> Result<RunOutcome, RunError> {
    std::fs::create_dir_all(out).map_err(|source| RunError::Io { path: out.into(), source })?;
    let mut outcome = RunOutcome::default();
    if sc.write_kernels {
        if let ScenarioModel::Spec(m) = &sc.model {
            for (j, bath) in m.baths().iter().enumerate() {
                let table = build_kernels(bath, &sc.grid)?;
                let name = if m.baths().len() == 1 { "kernels.csv".to_string() } else { format!("kernels_{}.csv", j + 1) };
                write_with(&out.join(name), &mut outcome.files, |w| table.write_csv(w))?;
            }
        }
    }
    let table = solve_scenario(sc)?;
    write_with(&out.join("coefficients.csv"), &mut outcome.files, |w| table.write_csv(w))?;

    let mut propagation = None;
    if sc.mode != RunMode::Coefficients {
        let (ops, eq) = system(sc)?;
        let rho0 = DensityMatrix::pure(&sc.initial, 0.0)?;
        let traj = propagate(&rho0, &ops, eq, &table, sc.substeps)?;
        write_with(&out.join("trajectory.csv"), &mut outcome.files, |w| traj.write_csv(w))?;
        if matches!(sc.mode, RunMode::Validate | RunMode::OracleCompare) {
            oracle_checks(sc, &traj, out, &mut outcome)?;
        }
        if sc.mode == RunMode::Validate {
            outcome.checks.push(Check::at_most("trace_error", traj.max_trace_error, 1e-10));
            outcome.checks.push(Check::at_most("hermiticity_error", traj.max_hermiticity_error, 1e-10));
            if let ScenarioModel::Spec(m) = &sc.model {
                grassmann_checks(sc, m, &table, &mut outcome)?;
            }
        }
        propagation = Some(PropagationRecord {
            substeps: sc.substeps,
            max_trace_error: traj.max_trace_error,
            max_hermiticity_error: traj.max_hermiticity_error,
            min_eigenvalue: traj.min_eigenvalue,
        });
    }

    let diag = &table.diagnostics;
    let mut notes = diag.notes.clone();
    notes.extend(outcome.notes.iter().cloned());
    let meta = Metadata {
        variant: sc.model.variant(),
        mode: sc.mode,
        passed: outcome.passed(),
        sign_flip: "none: the printed +i Omega_j sign of the vacuum f equation agrees with the exact oracle",
        notes,
        grid: GridRecord { t_max_hbar_per_ev: sc.grid.t_max, n_steps: sc.grid.n_steps, dt: sc.grid.dt() },
        solver: SolverRecord {
            name: diag.solver.clone(),
            tolerance: sc.solver.tolerance,
            max_iterations_allowed: sc.solver.max_iter,
            rotating_frame: sc.solver.rotating_frame,
            frame_ev: diag.frame,
            max_residual: diag.max_residual,
            max_iterations: diag.max_iterations,
            total_iterations: diag.total_iterations,
            monotone_after_third_iteration: diag.monotone,
        },
        witness: table
            .coefficients
            .iter()
            .map(|(l, s)| {
                let w = nonmarkov_witness(s);
                (l.clone(), WitnessRecord { crossings: w.crossings, negative_fraction: w.negative_fraction })
            })
            .collect(),
        propagation,
        checks: &outcome.checks,
        config: cfg,
    };
    let text = toml::to_string(&meta).map_err(|e| RunError::Metadata(e.to_string()))?;
    write_with(&out.join("metadata.toml"), &mut outcome.files, |w| w.write_all(text.as_bytes()))?;
    Ok(outcome)
}

fn vacuum_pure(sc: &Scenario, m: &ModelSpec) -> bool {
    matches!(m, ModelSpec::ManyFermionVacuum { .. }) && sc.initial.len() == 1 << m.n_system_modes()
}

fn oracle_checks(sc: &Scenario, traj: &Trajectory, out: &Path, outcome: &mut RunOutcome) -> Result<(), RunError> {
    let tol = sc.compare_tolerance.unwrap_or(1e-5);
    let times = &traj.times;
    let reference: Option<(&str, Vec<DMatrix<C64>>)> = match &sc.model {
        ScenarioModel::MarkovDot { omega0, gamma } => {
            let r0 = &traj.states[0];
            let states = times
                .iter()
                .map(|&t| {
                    let p = r0[(1, 1)] * (-gamma * t).exp();
                    let c = r0[(1, 0)] * C64::from_polar((-0.5 * gamma * t).exp(), -omega0 * t);
                    DMatrix::from_row_slice(2, 2, &[C64::from(1.0) - p, c.conj(), c, p])
                })
                .collect();
            Some(("closed_form", states))
        }
        ScenarioModel::Spec(m) => {
            let (h, occ) = one_body_hamiltonian(m)?;
            let n_sys = m.n_system_modes();
            let n_total = h.nrows();
            if vacuum_pure(sc, m) && n_total <= MAX_FOCK_MODES {
                let space = FockSpace::new(&h)?;
                let psi0 = FockState::product(&sc.initial, n_total - n_sys, 0);
                let states = space.evolve(&psi0, times)?.iter().map(|s| partial_trace_system(s, n_sys)).collect();
                Some(("fock", states))
            } else if let Some(occupied) = &sc.initial_occupations {
                if n_total <= MAX_MIXTURE_MODES {
                    let space = FockSpace::new(&h)?;
                    let mix = space.thermal_mixture(&sc.initial, &occ, times, sc.fock_weight_cutoff)?;
                    outcome.checks.push(Check::at_most("rho_vs_fock_mixture", max_traj_diff(&traj.states, &mix), tol));
                }
                let states = OneBodyOracle::new(&h, n_sys, occ)?.reduced_states(occupied, times)?;
                outcome
                    .checks
                    .push(Check::at_most("populations_vs_one_body", max_population_diff(&traj.states, &states), tol));
                Some(("one_body", states))
            } else {
                outcome.notes.push("no oracle for a superposed initial state with this bath".into());
                None
            }
        }
    };
    if let Some((name, states)) = reference {
        outcome.checks.push(Check::at_most(&format!("rho_vs_{name}"), max_traj_diff(&traj.states, &states), tol));
        let oracle = oracle_trajectory(times, states);
        write_with(&out.join("oracle.csv"), &mut outcome.files, |w| oracle.write_csv(w))?;
    }
    Ok(())
}

fn grassmann_checks(sc: &Scenario, m: &ModelSpec, table: &CoeffTable, outcome: &mut RunOutcome) -> Result<(), RunError> {
    let ModelSpec::ManyFermionVacuum { omegas, bath } = m else {
        outcome.notes.push("Grassmann checks need the vacuum model".into());
        return Ok(());
    };
    let SpectralDensity::Discrete { modes } = &bath.density else {
        outcome.notes.push("Grassmann checks need a discrete bath".into());
        return Ok(());
    };
    let k = modes.len();
    if k > MAX_MODES {
        outcome.notes.push(format!("Grassmann checks support at most {MAX_MODES} bath modes"));
        return Ok(());
    }
    if k <= 3 {
        outcome.checks.push(Check::at_most("completeness", verify_completeness(k)?, 1e-13));
    }
    let grid: &TimeGrid = &sc.grid;
    let samples: Vec<f64> = [0, grid.n_steps / 3, grid.n_steps / 2, grid.n_steps].iter().map(|&i| grid.t(i)).collect();
    let scale: f64 = modes.iter().map(|m| m.t * m.t).sum();
    let zero_occ = vec![0.0; k];
    let mut corr: f64 = 0.0;
    for &t in &samples {
        for &s in &samples {
            let xi = build_noise(modes, t, false)?;
            let xs = build_noise(modes, s, true)?;
            let avg = xi.mul(&xs)?.gaussian_average()?[(0, 0)];
            let (kb, _) = kernel_sums(modes, &zero_occ, t - s);
            corr = corr.max((avg - kb).norm() / scale);
        }
    }
    outcome.checks.push(Check::at_most("noise_correlation_vs_kernel", corr, 1e-14));

    let parity = build_system_ops(m)?.parity();
    let psi: &DVector<C64> = &sc.initial;
    let definite = [1.0, -1.0]
        .iter()
        .any(|sign| psi.iter().zip(&parity).all(|(a, p)| *p == *sign || *a == C64::new(0.0, 0.0)));
    if !definite {
        outcome.notes.push("SSE checks skipped: initial state has indefinite fermion parity".into());
        return Ok(());
    }
    let q = QAnsatz::from_table(table, omegas.len())?;
    let opts = SseOptions { substeps: sc.sse_substeps, frame: None };
    let (plus, minus) = propagate_pair(m, psi, &q, &opts)?;
    let rho = reconstruct_rho(&plus, &minus)?;
    let rho_alt = reconstruct_rho(&plus, &negate(&plus))?;
    let (h, _) = one_body_hamiltonian(m)?;
    let n_sys = omegas.len();
    let fock = FockSpace::new(&h)?.evolve(&FockState::product(psi, k, 0), &[grid.t_max])?;
    let exact = partial_trace_system(&fock[0], n_sys);
    let tol = sc.compare_tolerance.unwrap_or(1e-8);
    outcome.checks.push(Check::at_most("sse_rho_vs_fock", max_abs_diff(&rho.rho, &exact), tol));
    outcome.checks.push(Check::at_most("sse_partner_routes", max_abs_diff(&rho.rho, &rho_alt.rho), 1e-12));
    let p = projector(&plus, &minus)?;
    let (r1, r2) = verify_novikov(&p, &noise_coefficients(modes, &samples))?;
    outcome.checks.push(Check::at_most("novikov_conjugate_noise", r1, 1e-12));
    outcome.checks.push(Check::at_most("novikov_noise", r2, 1e-12));
    outcome.checks.push(Check::at_most("q_ansatz_residual", verify_q_ansatz(m, &plus, &q)?, 1e-5));
    Ok(())
}
