//! Grassmann-valued stochastic Schrödinger equation for vacuum baths of a
//! few discrete modes, and reconstruction of the reduced state by Berezin
//! averaging.
//!
//! The trajectory `ψ_t(ξ*) = Σ_A ξ*^A ⊗ |c_A⟩` obeys
//!
//! ```text
//! ∂_t ψ = -i H_S ψ + σ ξ*_t L ψ - L† Q̄(t) ψ,   Q̄(t) = Σ_j F_j(t) d_j
//! ```
//!
//! with `ξ*_t = -i Σ_k t_k e^{iω_k t} ξ*_k`, `L = Σ_j d_j` and noise sign
//! `σ = ±1`. Payloads commute with the generators here, so the effective
//! Hamiltonian term `-i L ξ*_t` (odd `L` to the left of the odd noise) appears
//! as `+ξ*_t L`. With this sign `∂⃗_{ξ*_k} ψ = ∫_0^t ds (∂ξ*_s/∂ξ*_k) Q̂(t,s) ψ`
//! holds with `f_j(t,t) = 1`. The reduced state is
//! `ρ = ∫D_g[ξ] |ψ_t(ξ*)⟩⟨ψ_t(-ξ*)|`.
//!
//! Propagation may run in a frame rotating at `ω_r` (all one-particle
//! energies shifted by `-ω_r`); reconstruction rotates back with
//! `e^{-iω_r N_S t}`.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::bath::{Mode, SpectralDensity, TimeGrid};
use crate::coeffs::{labels, CoeffError, CoeffTable, ModelSpec};
use crate::grassmann::{Gen, GrassmannElement, GrassmannError, MAX_MODES};
use crate::propagator::{build_system_ops, DensityMatrix, PropagationError, SystemOperators};
use crate::C64;

const ZERO: C64 = C64::new(0.0, 0.0);
const I: C64 = C64::new(0.0, 1.0);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SseError {
    #[error(transparent)]
    Grassmann(#[from] GrassmannError),
    #[error(transparent)]
    Propagation(#[from] PropagationError),
    #[error(transparent)]
    Coeff(#[from] CoeffError),
    #[error("the SSE needs a vacuum bath of discrete modes: {0}")]
    UnsupportedModel(String),
    #[error("at most {MAX_MODES} bath modes are supported, got {0}")]
    TooManyModes(usize),
    #[error("initial system state must have definite fermion parity")]
    ParityIndefinite,
    #[error("trajectories or coefficients refer to different grids or times")]
    GridMismatch,
    #[error("initial state has dimension {got}, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// `ξ*_t = -iΣ_k t_k e^{iω_k t} ξ*_k` (`conjugate = true`) or
/// `ξ_t = iΣ_k t_k e^{-iω_k t} ξ_k`.
pub fn build_noise(modes: &[Mode], t: f64, conjugate: bool) -> Result<GrassmannElement, SseError> {
    if modes.len() > MAX_MODES {
        return Err(SseError::TooManyModes(modes.len()));
    }
    let terms: Vec<(Gen, C64)> = modes
        .iter()
        .enumerate()
        .map(|(k, m)| {
            if conjugate {
                (Gen::XiStar(k), -I * m.t * C64::from_polar(1.0, m.omega * t))
            } else {
                (Gen::Xi(k), I * m.t * C64::from_polar(1.0, -m.omega * t))
            }
        })
        .collect();
    Ok(GrassmannElement::linear(modes.len(), &terms)?)
}

/// Coefficients `(c, c')` of `ξ*_t = Σ_k c_k ξ*_k` and `ξ_t = Σ_k c'_k ξ_k` at
/// each time, in the layout expected by [`crate::grassmann::verify_novikov`].
pub fn noise_coefficients(modes: &[Mode], times: &[f64]) -> Vec<(Vec<C64>, Vec<C64>)> {
    times
        .iter()
        .map(|&t| {
            let c = modes.iter().map(|m| -I * m.t * C64::from_polar(1.0, m.omega * t)).collect();
            let c_conj = modes.iter().map(|m| I * m.t * C64::from_polar(1.0, -m.omega * t)).collect();
            (c, c_conj)
        })
        .collect()
}

/// Coefficients defining `Q̂(t,s) = Σ_j f_j(t,s) d_j` and `Q̄(t) = Σ_j F_j(t) d_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct QAnsatz {
    grid: TimeGrid,
    /// `F_j` on the grid, one series per system mode.
    coefficients: Vec<Vec<C64>>,
    /// `f_j(t_max, s_l)` in the lab frame, one row per system mode.
    final_row: Vec<Vec<C64>>,
}

impl QAnsatz {
    pub fn from_table(table: &CoeffTable, n_modes: usize) -> Result<Self, SseError> {
        let coefficients = labels::vacuum_coefficients(n_modes)
            .iter()
            .map(|l| table.coefficient(l).map(|s| s.to_vec()))
            .collect::<Result<Vec<_>, _>>()?;
        let final_row = labels::vacuum_functions(n_modes)
            .iter()
            .map(|l| {
                table.final_row.get(l).cloned().ok_or_else(|| CoeffError::MissingLabel(l.clone()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { grid: table.grid, coefficients, final_row })
    }

    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    pub fn n_modes(&self) -> usize {
        self.coefficients.len()
    }

    /// `(F_1, …, F_N)` at grid index `i`.
    pub fn qbar(&self, i: usize) -> Vec<C64> {
        self.coefficients.iter().map(|s| s[i]).collect()
    }

    /// `f_j(t_max, s_l)` for `l = 0..=n_steps`.
    pub fn final_row(&self, j: usize) -> &[C64] {
        &self.final_row[j]
    }
}

/// A Grassmann-valued trajectory at time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct SseTrajectory {
    /// Ket-valued element over the `ξ*_k` generators.
    pub psi: GrassmannElement,
    pub t: f64,
    pub noise_sign: f64,
    /// Reference frequency of the propagation frame.
    pub frame: f64,
    /// `Σ_A ‖c_A‖²` at every grid point, the trace of the reconstructed state.
    pub norm_history: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SseOptions {
    /// Heun steps per coefficient-grid interval.
    pub substeps: usize,
    /// Propagate in a frame rotating at this frequency (`None`: the mean
    /// system frequency).
    pub frame: Option<f64>,
}

impl Default for SseOptions {
    fn default() -> Self {
        Self { substeps: 1, frame: None }
    }
}

struct SseSetup {
    ops: SystemOperators,
    modes: Vec<Mode>,
    omegas: Vec<f64>,
}

fn setup(model: &ModelSpec) -> Result<SseSetup, SseError> {
    let ModelSpec::ManyFermionVacuum { omegas, bath } = model else {
        return Err(SseError::UnsupportedModel("only the vacuum many-fermion model".into()));
    };
    let SpectralDensity::Discrete { modes } = &bath.density else {
        return Err(SseError::UnsupportedModel("continuum densities have no finite algebra".into()));
    };
    if bath.occupations(modes).iter().any(|&n| n != 0.0) {
        return Err(SseError::UnsupportedModel("bath is not in its vacuum".into()));
    }
    if modes.len() > MAX_MODES {
        return Err(SseError::TooManyModes(modes.len()));
    }
    Ok(SseSetup { ops: build_system_ops(model)?, modes: modes.clone(), omegas: omegas.clone() })
}

fn number_operator(ops: &SystemOperators) -> DMatrix<C64> {
    ops.d.iter().fold(DMatrix::zeros(ops.dim(), ops.dim()), |acc, d| acc + d.adjoint() * d)
}

/// Total state norm `Σ_A ‖c_A‖²`.
fn total_norm(psi: &GrassmannElement) -> f64 {
    psi.terms().map(|(_, x)| x.norm_squared()).sum()
}

/// Heun propagation of the trajectory with noise sign `noise_sign` over the
/// grid of `q`.
pub fn propagate_sse(
    model: &ModelSpec,
    psi_s0: &DVector<C64>,
    q: &QAnsatz,
    noise_sign: f64,
    opts: &SseOptions,
) -> Result<SseTrajectory, SseError> {
    let SseSetup { ops, modes, omegas } = setup(model)?;
    if psi_s0.len() != ops.dim() {
        return Err(SseError::DimensionMismatch { expected: ops.dim(), got: psi_s0.len() });
    }
    if q.n_modes() != omegas.len() {
        return Err(SseError::GridMismatch);
    }
    let parity = ops.parity();
    let even = psi_s0.iter().zip(&parity).all(|(a, p)| *p > 0.0 || *a == ZERO);
    let odd = psi_s0.iter().zip(&parity).all(|(a, p)| *p < 0.0 || *a == ZERO);
    if !(even || odd) {
        return Err(SseError::ParityIndefinite);
    }
    let frame = opts.frame.unwrap_or_else(|| model.reference_frequency());
    let k = modes.len();
    let shifted: Vec<Mode> = modes.iter().map(|m| Mode::new(m.omega - frame, m.t)).collect();
    let h = &ops.h - number_operator(&ops) * C64::from(frame);
    let l = ops.coupling();
    let l_dag = l.adjoint();
    let rhs = |t: f64, f: &[C64], psi: &GrassmannElement| -> Result<GrassmannElement, SseError> {
        let qbar = ops.d.iter().zip(f).fold(DMatrix::zeros(ops.dim(), ops.dim()), |acc, (d, c)| acc + d * *c);
        let local = &h * (-I) - &l_dag * qbar;
        let noise = build_noise(&shifted, t, true)?.scale(C64::from(noise_sign));
        let driven = noise.mul(&psi.apply(&l)?)?;
        Ok(psi.apply(&local)?.add(&driven)?)
    };
    let grid = q.grid();
    let substeps = opts.substeps.max(1);
    let h_step = grid.dt() / substeps as f64;
    let mut psi = GrassmannElement::constant(k, DMatrix::from_column_slice(psi_s0.len(), 1, psi_s0.as_slice()))?;
    let mut norm_history = vec![total_norm(&psi)];
    let mut f_prev = q.qbar(0);
    for i in 0..grid.n_steps {
        let f_next = q.qbar(i + 1);
        for s in 0..substeps {
            let lerp = |x: f64| -> Vec<C64> { f_prev.iter().zip(&f_next).map(|(a, b)| a + (b - a) * x).collect() };
            let t0 = grid.t(i) + s as f64 * h_step;
            let fa = lerp(s as f64 / substeps as f64);
            let fb = lerp((s + 1) as f64 / substeps as f64);
            let k1 = rhs(t0, &fa, &psi)?;
            let pred = psi.add(&k1.scale(C64::from(h_step)))?;
            let k2 = rhs(t0 + h_step, &fb, &pred)?;
            psi = psi.add(&k1.add(&k2)?.scale(C64::from(0.5 * h_step)))?;
        }
        norm_history.push(total_norm(&psi));
        f_prev = f_next;
    }
    Ok(SseTrajectory { psi: psi.prune(), t: grid.t_max, noise_sign, frame, norm_history })
}

/// Both partner trajectories, `σ = +1` and `σ = -1`, propagated concurrently.
pub fn propagate_pair(
    model: &ModelSpec,
    psi_s0: &DVector<C64>,
    q: &QAnsatz,
    opts: &SseOptions,
) -> Result<(SseTrajectory, SseTrajectory), SseError> {
    let (plus, minus) = rayon::join(
        || propagate_sse(model, psi_s0, q, 1.0, opts),
        || propagate_sse(model, psi_s0, q, -1.0, opts),
    );
    Ok((plus?, minus?))
}

/// The partner trajectory obtained by substituting `ξ* → -ξ*` after the fact.
pub fn negate(traj: &SseTrajectory) -> SseTrajectory {
    SseTrajectory { psi: traj.psi.negate_odd(), noise_sign: -traj.noise_sign, ..traj.clone() }
}

/// `P̂ = |ψ_t(ξ*)⟩⟨ψ_t(-ξ*)|` as an operator-valued element.
pub fn projector(plus: &SseTrajectory, minus: &SseTrajectory) -> Result<GrassmannElement, SseError> {
    if plus.t != minus.t || plus.frame != minus.frame || plus.noise_sign != -minus.noise_sign {
        return Err(SseError::GridMismatch);
    }
    let p = plus.psi.mul(&minus.psi.conjugate())?;
    let dev = p.parity_deviation();
    if dev > 1e-12 * p.max_abs().max(1.0) {
        return Err(GrassmannError::OddElement(dev).into());
    }
    Ok(p)
}

/// `ρ_r = ∫D_g[ξ] P̂`, rotated back to the lab frame.
pub fn reconstruct_rho(plus: &SseTrajectory, minus: &SseTrajectory) -> Result<DensityMatrix, SseError> {
    let p = projector(plus, minus)?;
    let rho = p.gaussian_average()?;
    let dim = rho.nrows();
    let phase = |b: usize| C64::from_polar(1.0, -plus.frame * b.count_ones() as f64 * plus.t);
    let lab = DMatrix::from_fn(dim, dim, |a, b| phase(a) * rho[(a, b)] * phase(b).conj());
    Ok(DensityMatrix::new(lab, plus.t)?)
}

/// `max_k |∂⃗_{ξ*_k} ψ - Σ_j c_kj d_j ψ|` with
/// `c_kj = -i t_k ∫_0^t e^{iω_k s} f_j(t,s) ds`, evaluated in the
/// trajectory's frame.
pub fn verify_q_ansatz(model: &ModelSpec, traj: &SseTrajectory, q: &QAnsatz) -> Result<f64, SseError> {
    let SseSetup { ops, modes, .. } = setup(model)?;
    let grid = q.grid();
    if (grid.t_max - traj.t).abs() > 1e-12 * grid.t_max {
        return Err(SseError::GridMismatch);
    }
    let dt = grid.dt();
    let t = grid.t_max;
    let frame = traj.frame;
    let mut worst: f64 = 0.0;
    for (k, m) in modes.iter().enumerate() {
        let lhs = traj.psi.left_derivative(Gen::XiStar(k))?;
        let mut rhs = GrassmannElement::zero(modes.len(), traj.psi.shape())?;
        for (j, d) in ops.d.iter().enumerate() {
            let row = q.final_row(j);
            let n = row.len() - 1;
            let integrand = |l: usize| {
                let s = grid.t(l);
                let f_rot = row[l] * C64::from_polar(1.0, -frame * (t - s));
                C64::from_polar(1.0, (m.omega - frame) * s) * f_rot
            };
            let mut acc: C64 = (0..=n).map(integrand).sum();
            acc -= 0.5 * (integrand(0) + integrand(n));
            let c = -I * m.t * acc * dt;
            rhs = rhs.add(&traj.psi.apply(d)?.scale(c))?;
        }
        worst = worst.max(lhs.sub(&rhs)?.max_abs());
    }
    Ok(worst)
}
