//! Reduced density matrix propagation under the time-local master equations
//!
//! ```text
//! ∂_t ρ = -i[H_S, ρ] + Σ_c { [X_c ρ + ρ Y_c, Z_c†] + h.c. }
//! ```
//!
//! where each channel's `X_c`, `Y_c` are linear in the system annihilators with
//! the time-dependent coefficients `F(t)`, and `Z_c` is the coupling operator.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::bath::sci;
use crate::coeffs::{labels, CoeffError, CoeffTable, ModelSpec};
use crate::C64;

const ZERO: C64 = C64::new(0.0, 0.0);
const ONE: C64 = C64::new(1.0, 0.0);
const I: C64 = C64::new(0.0, 1.0);

/// Most negative eigenvalue tolerated before a run is aborted.
pub const POSITIVITY_FLOOR: f64 = -1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PropagationError {
    #[error("non-finite master-equation coefficient at t = {0}")]
    NonFiniteCoefficient(f64),
    #[error("positivity violated at t = {t}: minimum eigenvalue {min_eig:e}")]
    PositivityViolation { t: f64, min_eig: f64 },
    #[error("density matrix must be square with dimension 2 or 4, got {0}x{1}")]
    BadDimension(usize, usize),
    #[error("matrix backend supports at most 2 system modes, got {0}")]
    TooManyModes(usize),
    #[error("coefficient count {got} does not match the master equation ({expected})")]
    CoefficientCount { expected: usize, got: usize },
    #[error(transparent)]
    Coeff(#[from] CoeffError),
}

/// Reduced density matrix at time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix {
    pub rho: DMatrix<C64>,
    pub t: f64,
}

impl DensityMatrix {
    pub fn new(rho: DMatrix<C64>, t: f64) -> Result<Self, PropagationError> {
        let (r, c) = rho.shape();
        if r != c || !(r == 2 || r == 4) {
            return Err(PropagationError::BadDimension(r, c));
        }
        Ok(Self { rho, t })
    }

    /// `|ψ⟩⟨ψ|` for a normalized or unnormalized state vector.
    pub fn pure(psi: &DVector<C64>, t: f64) -> Result<Self, PropagationError> {
        let norm = psi.norm();
        let v = psi / C64::from(norm);
        Self::new(&v * v.adjoint(), t)
    }

    /// Number state with the given occupations (dot 1 first).
    pub fn number_state(occupations: &[bool], t: f64) -> Result<Self, PropagationError> {
        let dim = 1 << occupations.len();
        let idx = occupations.iter().fold(0, |acc, &o| 2 * acc + o as usize);
        let mut psi = DVector::zeros(dim);
        psi[idx] = ONE;
        Self::pure(&psi, t)
    }

    pub fn dim(&self) -> usize {
        self.rho.nrows()
    }

    pub fn trace(&self) -> C64 {
        self.rho.trace()
    }

    pub fn hermiticity_error(&self) -> f64 {
        (&self.rho - self.rho.adjoint()).iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    pub fn min_eigenvalue(&self) -> f64 {
        min_eigenvalue(&self.rho)
    }
}

/// Smallest eigenvalue of the Hermitian part of `m`.
pub fn min_eigenvalue(m: &DMatrix<C64>) -> f64 {
    let herm = (m + m.adjoint()) * C64::from(0.5);
    herm.symmetric_eigenvalues().iter().copied().fold(f64::INFINITY, f64::min)
}

/// Annihilators and Hamiltonian of the system in the Jordan–Wigner basis,
/// mode 0 as the most significant tensor factor.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemOperators {
    pub d: Vec<DMatrix<C64>>,
    pub h: DMatrix<C64>,
}

impl SystemOperators {
    /// Operators for `n` modes with single-particle Hamiltonian `h1`
    /// (`H_S = Σ_ij h1_ij d_i† d_j`).
    pub fn from_one_body(h1: &DMatrix<C64>) -> Result<Self, PropagationError> {
        let n = h1.nrows();
        if n == 0 || n > 2 {
            return Err(PropagationError::TooManyModes(n));
        }
        let d = jordan_wigner(n);
        let dim = 1 << n;
        let mut h = DMatrix::zeros(dim, dim);
        for i in 0..n {
            for j in 0..n {
                if h1[(i, j)] != ZERO {
                    h += d[i].adjoint() * &d[j] * h1[(i, j)];
                }
            }
        }
        Ok(Self { d, h })
    }

    pub fn n_modes(&self) -> usize {
        self.d.len()
    }

    pub fn dim(&self) -> usize {
        self.h.nrows()
    }

    /// Diagonal of the fermion-number parity `(-1)^N`.
    pub fn parity(&self) -> Vec<f64> {
        (0..self.dim()).map(|b: usize| if b.count_ones() % 2 == 0 { 1.0 } else { -1.0 }).collect()
    }

    /// Largest deviation from `{d_i, d_j†} = δ_ij` and `{d_i, d_j} = 0`.
    pub fn anticommutation_error(&self) -> f64 {
        let dim = self.dim();
        let id = DMatrix::<C64>::identity(dim, dim);
        let mut worst: f64 = 0.0;
        for (i, di) in self.d.iter().enumerate() {
            for (j, dj) in self.d.iter().enumerate() {
                let a = di * dj.adjoint() + dj.adjoint() * di;
                let target = if i == j { id.clone() } else { DMatrix::zeros(dim, dim) };
                worst = worst.max((a - target).iter().map(|z| z.norm()).fold(0.0, f64::max));
                let b = di * dj + dj * di;
                worst = worst.max(b.iter().map(|z| z.norm()).fold(0.0, f64::max));
            }
        }
        worst
    }

    /// `L = Σ_j d_j`.
    pub fn coupling(&self) -> DMatrix<C64> {
        self.d.iter().fold(DMatrix::zeros(self.dim(), self.dim()), |acc, d| acc + d)
    }
}

/// Jordan–Wigner annihilators `d_q = Z ⊗ … ⊗ Z ⊗ σ⁻ ⊗ I ⊗ …` with
/// `σ⁻ = |0⟩⟨1|` and `Z = diag(1, -1)`.
pub fn jordan_wigner(n: usize) -> Vec<DMatrix<C64>> {
    let dim = 1usize << n;
    (0..n)
        .map(|q| {
            let mut m = DMatrix::zeros(dim, dim);
            let bit = 1usize << (n - 1 - q);
            for b in 0..dim {
                if b & bit != 0 {
                    let above = (b >> (n - q)).count_ones();
                    let sign = if above % 2 == 0 { 1.0 } else { -1.0 };
                    m[(b ^ bit, b)] = C64::new(sign, 0.0);
                }
            }
            m
        })
        .collect()
}

/// System operators of a model (at most two system modes).
pub fn build_system_ops(model: &ModelSpec) -> Result<SystemOperators, PropagationError> {
    match model {
        ModelSpec::ManyFermionVacuum { omegas, .. } => {
            let n = omegas.len();
            let h1 = DMatrix::from_fn(n, n, |i, j| if i == j { C64::from(omegas[i]) } else { ZERO });
            SystemOperators::from_one_body(&h1)
        }
        ModelSpec::SingleDotThermal { omega0, .. } => {
            SystemOperators::from_one_body(&DMatrix::from_element(1, 1, C64::from(*omega0)))
        }
        ModelSpec::DoubleDotTwoBaths { omega1, omega2, g, .. } => {
            let h1 = DMatrix::from_row_slice(2, 2, &[C64::from(*omega1), *g, g.conj(), C64::from(*omega2)]);
            SystemOperators::from_one_body(&h1)
        }
    }
}

/// Structure of the dissipator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MasterEquation {
    /// `[(Σ_j F_j d_j) ρ, Σ_j d_j†] + h.c.`; coefficients `F_1..F_N`.
    Vacuum,
    /// `F1 [d ρ, d†] + F2 [ρ d, d†] + h.c.`; coefficients `F1, F2`.
    Thermal,
    /// `Σ_j [(F^j_1 d1 + F^j_2 d2) ρ + ρ (F^j_3 d1 + F^j_4 d2), d_j†] + h.c.`;
    /// coefficients `F1_1..F1_4, F2_1..F2_4`.
    Double,
}

impl MasterEquation {
    pub fn for_model(model: &ModelSpec) -> Self {
        match model {
            ModelSpec::ManyFermionVacuum { .. } => Self::Vacuum,
            ModelSpec::SingleDotThermal { .. } => Self::Thermal,
            ModelSpec::DoubleDotTwoBaths { .. } => Self::Double,
        }
    }

    pub fn labels(&self, n_modes: usize) -> Vec<String> {
        match self {
            Self::Vacuum => labels::vacuum_coefficients(n_modes),
            Self::Thermal => labels::thermal_coefficients(),
            Self::Double => labels::double_coefficients(),
        }
    }
}

/// Right-hand side of the master equation for coefficient values `f`.
pub fn master_rhs(
    eq: MasterEquation,
    ops: &SystemOperators,
    f: &[C64],
    rho: &DMatrix<C64>,
) -> Result<DMatrix<C64>, PropagationError> {
    let expected = eq.labels(ops.n_modes()).len();
    if f.len() != expected {
        return Err(PropagationError::CoefficientCount { expected, got: f.len() });
    }
    let mut out = (&ops.h * rho - rho * &ops.h) * (-I);
    let mut channel = |x: DMatrix<C64>, y: Option<DMatrix<C64>>, z: &DMatrix<C64>| {
        let mut a = &x * rho;
        if let Some(y) = y {
            a += rho * y;
        }
        let zd = z.adjoint();
        let m = &a * &zd - &zd * &a;
        out += &m + m.adjoint();
    };
    match eq {
        MasterEquation::Vacuum => {
            let x = ops.d.iter().zip(f).fold(DMatrix::zeros(ops.dim(), ops.dim()), |acc, (d, c)| acc + d * *c);
            channel(x, None, &ops.coupling());
        }
        MasterEquation::Thermal => {
            let d = &ops.d[0];
            channel(d * f[0], Some(d * f[1]), d);
        }
        MasterEquation::Double => {
            let (d1, d2) = (&ops.d[0], &ops.d[1]);
            for j in 0..2 {
                let c = &f[4 * j..4 * j + 4];
                channel(d1 * c[0] + d2 * c[1], Some(d1 * c[2] + d2 * c[3]), &ops.d[j]);
            }
        }
    }
    Ok(out)
}

fn check_finite(f: &[C64], t: f64) -> Result<(), PropagationError> {
    if f.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
        Ok(())
    } else {
        Err(PropagationError::NonFiniteCoefficient(t))
    }
}

/// One Heun step from `t` to `t + dt` with coefficients `f0` at `t` and `f1`
/// at `t + dt`.
pub fn heun_step(
    eq: MasterEquation,
    rho: &DensityMatrix,
    f0: &[C64],
    f1: &[C64],
    ops: &SystemOperators,
    dt: f64,
) -> Result<DensityMatrix, PropagationError> {
    check_finite(f0, rho.t)?;
    check_finite(f1, rho.t + dt)?;
    let k1 = master_rhs(eq, ops, f0, &rho.rho)?;
    let pred = &rho.rho + &k1 * C64::from(dt);
    let k2 = master_rhs(eq, ops, f1, &pred)?;
    let next = &rho.rho + (k1 + k2) * C64::from(0.5 * dt);
    DensityMatrix::new(next, rho.t + dt)
}

pub fn step_master_vacuum(
    rho: &DensityMatrix,
    f0: &[C64],
    f1: &[C64],
    ops: &SystemOperators,
    dt: f64,
) -> Result<DensityMatrix, PropagationError> {
    heun_step(MasterEquation::Vacuum, rho, f0, f1, ops, dt)
}

pub fn step_master_thermal(
    rho: &DensityMatrix,
    f0: [C64; 2],
    f1: [C64; 2],
    ops: &SystemOperators,
    dt: f64,
) -> Result<DensityMatrix, PropagationError> {
    heun_step(MasterEquation::Thermal, rho, &f0, &f1, ops, dt)
}

pub fn step_master_double(
    rho: &DensityMatrix,
    f0: &[C64; 8],
    f1: &[C64; 8],
    ops: &SystemOperators,
    dt: f64,
) -> Result<DensityMatrix, PropagationError> {
    heun_step(MasterEquation::Double, rho, f0, f1, ops, dt)
}

/// Reduced-state trajectory sampled on the coefficient grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<DMatrix<C64>>,
    pub max_trace_error: f64,
    pub max_hermiticity_error: f64,
    pub min_eigenvalue: f64,
}

impl Trajectory {
    /// Population of basis state `k` along the trajectory.
    pub fn population(&self, k: usize) -> Vec<f64> {
        self.states.iter().map(|r| r[(k, k)].re).collect()
    }

    /// CSV with `t, rho_11` (dimension 2) or `t, p_00, p_01, p_10, p_11,
    /// |rho_ij| (i<j)` (dimension 4), then `trace, min_eig`.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        let dim = self.states.first().map_or(2, |r| r.nrows());
        let mut header = vec!["t".to_string()];
        if dim == 2 {
            header.push("rho_11".into());
        } else {
            for s in ["p_00", "p_01", "p_10", "p_11"] {
                header.push(s.into());
            }
            for i in 0..dim {
                for j in i + 1..dim {
                    header.push(format!("abs_rho_{i}{j}"));
                }
            }
        }
        header.push("trace".into());
        header.push("min_eig".into());
        writeln!(w, "{}", header.join(","))?;
        for (t, r) in self.times.iter().zip(&self.states) {
            let obs = observables(r);
            let mut row = vec![sci(*t)];
            if dim == 2 {
                row.push(sci(obs.populations[1]));
            } else {
                row.extend(obs.populations.iter().map(|p| sci(*p)));
                row.extend(obs.coherences.iter().map(|c| sci(*c)));
            }
            row.push(sci(obs.trace));
            row.push(sci(obs.min_eigenvalue));
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Propagates `rho0` across the coefficient grid with `substeps` Heun steps per
/// grid interval, interpolating `F` linearly inside each interval.
pub fn propagate(
    rho0: &DensityMatrix,
    ops: &SystemOperators,
    eq: MasterEquation,
    coeffs: &CoeffTable,
    substeps: usize,
) -> Result<Trajectory, PropagationError> {
    let labels = eq.labels(ops.n_modes());
    let grid = coeffs.grid;
    let substeps = substeps.max(1);
    let h = grid.dt() / substeps as f64;
    let mut rho = rho0.clone();
    let mut traj = Trajectory {
        times: vec![rho.t],
        states: vec![rho.rho.clone()],
        max_trace_error: (rho.trace() - ONE).norm(),
        max_hermiticity_error: rho.hermiticity_error(),
        min_eigenvalue: rho.min_eigenvalue(),
    };
    let mut f_prev = coeffs.sample(&labels, 0)?;
    for i in 0..grid.n_steps {
        let f_next = coeffs.sample(&labels, i + 1)?;
        for s in 0..substeps {
            let lerp = |x: f64| -> Vec<C64> {
                f_prev.iter().zip(&f_next).map(|(a, b)| a + (b - a) * x).collect()
            };
            let fa = lerp(s as f64 / substeps as f64);
            let fb = lerp((s + 1) as f64 / substeps as f64);
            rho = heun_step(eq, &rho, &fa, &fb, ops, h)?;
        }
        rho.t = grid.t(i + 1);
        let min_eig = rho.min_eigenvalue();
        if min_eig < POSITIVITY_FLOOR {
            return Err(PropagationError::PositivityViolation { t: rho.t, min_eig });
        }
        traj.max_trace_error = traj.max_trace_error.max((rho.trace() - ONE).norm());
        traj.max_hermiticity_error = traj.max_hermiticity_error.max(rho.hermiticity_error());
        traj.min_eigenvalue = traj.min_eigenvalue.min(min_eig);
        traj.times.push(rho.t);
        traj.states.push(rho.rho.clone());
        f_prev = f_next;
    }
    Ok(traj)
}

/// Populations, coherence magnitudes, trace and minimum eigenvalue.
#[derive(Debug, Clone, PartialEq)]
pub struct Observables {
    pub populations: Vec<f64>,
    /// `|ρ_ij|` for `i < j`, row-major.
    pub coherences: Vec<f64>,
    pub trace: f64,
    pub min_eigenvalue: f64,
}

pub fn observables(rho: &DMatrix<C64>) -> Observables {
    let n = rho.nrows();
    let populations = (0..n).map(|i| rho[(i, i)].re).collect();
    let mut coherences = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            coherences.push(rho[(i, j)].norm());
        }
    }
    Observables { populations, coherences, trace: rho.trace().re, min_eigenvalue: min_eigenvalue(rho) }
}

/// Sign-change statistics of `Re F` for one coefficient series.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Witness {
    /// Number of sign changes of the real part (zeros are skipped).
    pub crossings: usize,
    /// Fraction of samples with a negative real part.
    pub negative_fraction: f64,
}

pub fn nonmarkov_witness(series: &[C64]) -> Witness {
    let mut crossings = 0;
    let mut last: Option<bool> = None;
    let mut negative = 0;
    for z in series {
        if z.re < 0.0 {
            negative += 1;
        }
        if z.re == 0.0 {
            continue;
        }
        let sign = z.re > 0.0;
        if let Some(prev) = last {
            if prev != sign {
                crossings += 1;
            }
        }
        last = Some(sign);
    }
    let negative_fraction = if series.is_empty() { 0.0 } else { negative as f64 / series.len() as f64 };
    Witness { crossings, negative_fraction }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jordan_wigner_two_modes_match_tensor_form() {
        let d = jordan_wigner(2);
        let sm = DMatrix::from_row_slice(2, 2, &[ZERO, ONE, ZERO, ZERO]);
        let z = DMatrix::from_row_slice(2, 2, &[ONE, ZERO, ZERO, -ONE]);
        let id = DMatrix::<C64>::identity(2, 2);
        assert_eq!(d[0], sm.kronecker(&id));
        assert_eq!(d[1], z.kronecker(&sm));
    }

    #[test]
    fn number_state_index() {
        let r = DensityMatrix::number_state(&[true, false], 0.0).unwrap();
        assert_eq!(r.rho[(2, 2)], ONE);
    }

    #[test]
    fn witness_counts_crossings() {
        let s: Vec<C64> = [0.0, 1.0, -1.0, -2.0, 3.0].iter().map(|&x| C64::from(x)).collect();
        let w = nonmarkov_witness(&s);
        assert_eq!(w.crossings, 2);
        assert!((w.negative_fraction - 0.4).abs() < 1e-15);
    }
}
