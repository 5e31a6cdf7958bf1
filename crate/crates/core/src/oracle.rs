//! Exact references for quadratic system–bath models.
//!
//! Two independent routes are provided. The one-body route evolves the
//! single-particle correlation matrix `C_ij = ⟨a_i† a_j⟩` with `U = e^{-iht}`
//! and rebuilds the reduced state by Wick's theorem. The Fock route
//! diagonalizes the many-body Hamiltonian in each particle-number sector and
//! evolves explicit state vectors of small discrete models.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use thiserror::Error;

use crate::bath::{BathError, BathSpec, Mode};
use crate::coeffs::ModelSpec;
use crate::C64;

const ZERO: C64 = C64::new(0.0, 0.0);
const ONE: C64 = C64::new(1.0, 0.0);
const I: C64 = C64::new(0.0, 1.0);

/// Largest mode count accepted by the Fock route.
pub const MAX_FOCK_MODES: usize = 14;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error(transparent)]
    Bath(#[from] BathError),
    #[error("Fock oracle supports at most {MAX_FOCK_MODES} modes, got {0}")]
    TooManyModes(usize),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("Wick reconstruction supports 1 or 2 system modes, got {0}")]
    UnsupportedSystem(usize),
}

/// Single-particle Hamiltonian with system modes first, then the modes of
/// each bath in order, together with the initial bath occupations.
pub fn one_body_hamiltonian(model: &ModelSpec) -> Result<(DMatrix<C64>, Vec<f64>), OracleError> {
    let n_sys = model.n_system_modes();
    let mut sys = DMatrix::zeros(n_sys, n_sys);
    let mut couplings: Vec<(Vec<usize>, Vec<Mode>, &BathSpec)> = Vec::new();
    match model {
        ModelSpec::ManyFermionVacuum { omegas, bath } => {
            for (j, w) in omegas.iter().enumerate() {
                sys[(j, j)] = C64::from(*w);
            }
            couplings.push(((0..n_sys).collect(), bath.modes()?, bath));
        }
        ModelSpec::SingleDotThermal { omega0, bath } => {
            sys[(0, 0)] = C64::from(*omega0);
            couplings.push((vec![0], bath.modes()?, bath));
        }
        ModelSpec::DoubleDotTwoBaths { omega1, omega2, g, bath1, bath2 } => {
            sys[(0, 0)] = C64::from(*omega1);
            sys[(1, 1)] = C64::from(*omega2);
            sys[(0, 1)] = *g;
            sys[(1, 0)] = g.conj();
            couplings.push((vec![0], bath1.modes()?, bath1));
            couplings.push((vec![1], bath2.modes()?, bath2));
        }
    }
    let n = n_sys + couplings.iter().map(|c| c.1.len()).sum::<usize>();
    let mut h = DMatrix::zeros(n, n);
    h.view_mut((0, 0), (n_sys, n_sys)).copy_from(&sys);
    let mut occ = Vec::new();
    let mut offset = n_sys;
    for (targets, modes, bath) in couplings {
        for (k, m) in modes.iter().enumerate() {
            let q = offset + k;
            h[(q, q)] = C64::from(m.omega);
            for &j in &targets {
                h[(j, q)] = C64::from(m.t);
                h[(q, j)] = C64::from(m.t);
            }
        }
        occ.extend(bath.occupations(&modes));
        offset += modes.len();
    }
    Ok((h, occ))
}

/// Single-particle propagation of a quadratic model.
#[derive(Debug, Clone)]
pub struct OneBodyOracle {
    n_sys: usize,
    energies: DVector<f64>,
    vectors: DMatrix<C64>,
    bath_occupations: Vec<f64>,
}

impl OneBodyOracle {
    pub fn new(h: &DMatrix<C64>, n_sys: usize, bath_occupations: Vec<f64>) -> Result<Self, OracleError> {
        let n = h.nrows();
        if n_sys + bath_occupations.len() != n {
            return Err(OracleError::DimensionMismatch { expected: n, got: n_sys + bath_occupations.len() });
        }
        let eig = h.clone().symmetric_eigen();
        Ok(Self { n_sys, energies: eig.eigenvalues, vectors: eig.eigenvectors, bath_occupations })
    }

    pub fn from_model(model: &ModelSpec) -> Result<Self, OracleError> {
        let (h, occ) = one_body_hamiltonian(model)?;
        Self::new(&h, model.n_system_modes(), occ)
    }

    pub fn n_modes(&self) -> usize {
        self.energies.len()
    }

    pub fn n_system(&self) -> usize {
        self.n_sys
    }

    /// System rows of the eigenvectors scaled by `e^{-iE_m t}` and by `factor(E_m)`.
    fn scaled_system_rows(&self, t: f64, factor: impl Fn(f64) -> C64) -> DMatrix<C64> {
        let n = self.n_modes();
        DMatrix::from_fn(self.n_sys, n, |i, m| {
            let e = self.energies[m];
            self.vectors[(i, m)] * C64::from_polar(1.0, -e * t) * factor(e)
        })
    }

    /// `G(t)`: the system block of `e^{-iht}`.
    pub fn system_propagator(&self, t: f64) -> DMatrix<C64> {
        let vs = self.vectors.rows(0, self.n_sys);
        self.scaled_system_rows(t, |_| ONE) * vs.adjoint()
    }

    /// `dG/dt`.
    pub fn system_propagator_derivative(&self, t: f64) -> DMatrix<C64> {
        let vs = self.vectors.rows(0, self.n_sys);
        self.scaled_system_rows(t, |e| -I * e) * vs.adjoint()
    }

    /// Diagonal initial correlation matrix: the given system occupations and
    /// the thermal bath occupations.
    pub fn initial_correlation(&self, system_occupations: &[f64]) -> Result<DMatrix<C64>, OracleError> {
        if system_occupations.len() != self.n_sys {
            return Err(OracleError::DimensionMismatch { expected: self.n_sys, got: system_occupations.len() });
        }
        let diag: Vec<C64> =
            system_occupations.iter().chain(&self.bath_occupations).map(|&x| C64::from(x)).collect();
        Ok(DMatrix::from_diagonal(&DVector::from_vec(diag)))
    }

    /// System block of `C(t) = conj(U) C0 Uᵀ` at each time.
    pub fn system_correlation(&self, c0: &DMatrix<C64>, times: &[f64]) -> Result<Vec<DMatrix<C64>>, OracleError> {
        let n = self.n_modes();
        if c0.shape() != (n, n) {
            return Err(OracleError::DimensionMismatch { expected: n, got: c0.nrows() });
        }
        let m = self.vectors.transpose() * c0 * self.vectors.conjugate();
        Ok(times
            .par_iter()
            .map(|&t| {
                let a = self.scaled_system_rows(t, |_| ONE);
                a.conjugate() * &m * a.transpose()
            })
            .collect())
    }

    /// Reduced states for an initial system number state and thermal baths.
    pub fn reduced_states(&self, system_occupations: &[bool], times: &[f64]) -> Result<Vec<DMatrix<C64>>, OracleError> {
        let occ: Vec<f64> = system_occupations.iter().map(|&b| b as u8 as f64).collect();
        let c0 = self.initial_correlation(&occ)?;
        self.system_correlation(&c0, times)?.iter().map(gaussian_reduced_state).collect()
    }
}

/// `C(t) = conj(U) C0 Uᵀ` restricted to the system for a model.
pub fn evolve_onebody(model: &ModelSpec, c0: &DMatrix<C64>, times: &[f64]) -> Result<Vec<DMatrix<C64>>, OracleError> {
    OneBodyOracle::from_model(model)?.system_correlation(c0, times)
}

/// Initial Fermi–Dirac occupations of a bath's discrete modes.
pub fn thermal_occupations(bath: &BathSpec, modes: &[Mode]) -> Vec<f64> {
    bath.occupations(modes)
}

/// Reduced density matrix of a number-conserving Gaussian state from its
/// system correlation block (basis index `2 n1 + n2` for two modes).
pub fn gaussian_reduced_state(c: &DMatrix<C64>) -> Result<DMatrix<C64>, OracleError> {
    match c.nrows() {
        1 => {
            let n = c[(0, 0)].re;
            Ok(DMatrix::from_row_slice(2, 2, &[C64::from(1.0 - n), ZERO, ZERO, C64::from(n)]))
        }
        2 => {
            let (c11, c22) = (c[(0, 0)].re, c[(1, 1)].re);
            let p11 = c11 * c22 - c[(0, 1)].norm_sqr();
            let mut rho = DMatrix::zeros(4, 4);
            rho[(0, 0)] = C64::from(1.0 - c11 - c22 + p11);
            rho[(1, 1)] = C64::from(c22 - p11);
            rho[(2, 2)] = C64::from(c11 - p11);
            rho[(3, 3)] = C64::from(p11);
            rho[(2, 1)] = c[(1, 0)];
            rho[(1, 2)] = c[(0, 1)];
            Ok(rho)
        }
        n => Err(OracleError::UnsupportedSystem(n)),
    }
}

/// Exact vacuum coefficients from `-Ġ G⁻¹ = iΩ + 1Fᵀ`, averaged over rows.
pub fn vacuum_f_exact(oracle: &OneBodyOracle, omegas: &[f64], t: f64) -> Option<Vec<C64>> {
    let g = oracle.system_propagator(t);
    let gd = oracle.system_propagator_derivative(t);
    let m = -gd * g.try_inverse()?;
    let n = omegas.len();
    Some(
        (0..n)
            .map(|k| {
                let col: C64 = (0..n).map(|j| m[(j, k)]).sum::<C64>() / n as f64;
                col - I * omegas[k] / n as f64
            })
            .collect(),
    )
}

/// Many-body state vector; mode 0 is the most significant bit of the index.
#[derive(Debug, Clone, PartialEq)]
pub struct FockState {
    pub n_modes: usize,
    pub amps: DVector<C64>,
}

impl FockState {
    pub fn basis(n_modes: usize, index: usize) -> Self {
        let mut amps = DVector::zeros(1 << n_modes);
        amps[index] = ONE;
        Self { n_modes, amps }
    }

    /// `|sys⟩ ⊗ |bath config⟩` with the system modes first.
    pub fn product(system: &DVector<C64>, n_bath: usize, bath_config: usize) -> Self {
        let n_sys = system.len().trailing_zeros() as usize;
        let mut amps = DVector::zeros(1 << (n_sys + n_bath));
        for (s, a) in system.iter().enumerate() {
            amps[(s << n_bath) | bath_config] = *a;
        }
        Self { n_modes: n_sys + n_bath, amps }
    }

    pub fn norm(&self) -> f64 {
        self.amps.norm()
    }
}

#[derive(Debug, Clone)]
struct Sector {
    states: Vec<usize>,
    energies: DVector<f64>,
    vectors: DMatrix<C64>,
}

/// Number-sector eigendecomposition of `H = Σ h_pq a_p† a_q`.
#[derive(Debug, Clone)]
pub struct FockSpace {
    n_modes: usize,
    sectors: Vec<Sector>,
    /// `(sector, position)` of each basis index.
    lookup: Vec<(usize, usize)>,
}

fn jw_sign(n_modes: usize, q: usize, b: usize) -> f64 {
    if (b >> (n_modes - q)).count_ones() % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

impl FockSpace {
    pub fn new(h: &DMatrix<C64>) -> Result<Self, OracleError> {
        let n = h.nrows();
        if n > MAX_FOCK_MODES {
            return Err(OracleError::TooManyModes(n));
        }
        let dim = 1usize << n;
        let mut by_count: Vec<Vec<usize>> = vec![Vec::new(); n + 1];
        for b in 0..dim {
            by_count[b.count_ones() as usize].push(b);
        }
        let mut lookup = vec![(0, 0); dim];
        for (s, states) in by_count.iter().enumerate() {
            for (p, &b) in states.iter().enumerate() {
                lookup[b] = (s, p);
            }
        }
        let bit = |q: usize| 1usize << (n - 1 - q);
        let sectors = by_count
            .into_par_iter()
            .map(|states| {
                let m = states.len();
                let mut hm = DMatrix::<C64>::zeros(m, m);
                for (col, &b) in states.iter().enumerate() {
                    for q in (0..n).filter(|&q| b & bit(q) != 0) {
                        let s1 = jw_sign(n, q, b);
                        let b1 = b ^ bit(q);
                        for p in (0..n).filter(|&p| b1 & bit(p) == 0) {
                            if h[(p, q)] == ZERO {
                                continue;
                            }
                            let s2 = jw_sign(n, p, b1);
                            let b2 = b1 | bit(p);
                            let row = states.binary_search(&b2).expect("same sector");
                            hm[(row, col)] += h[(p, q)] * (s1 * s2);
                        }
                    }
                }
                let eig = hm.symmetric_eigen();
                Sector { states, energies: eig.eigenvalues, vectors: eig.eigenvectors }
            })
            .collect();
        Ok(Self { n_modes: n, sectors, lookup })
    }

    pub fn n_modes(&self) -> usize {
        self.n_modes
    }

    /// `⟨ψ|H|ψ⟩`.
    pub fn energy(&self, psi: &FockState) -> f64 {
        self.sectors
            .iter()
            .map(|s| {
                let v = DVector::from_iterator(s.states.len(), s.states.iter().map(|&b| psi.amps[b]));
                let c = s.vectors.adjoint() * v;
                c.iter().zip(s.energies.iter()).map(|(a, e)| a.norm_sqr() * e).sum::<f64>()
            })
            .sum()
    }

    /// `e^{-iHt}|ψ⟩` at each time.
    pub fn evolve(&self, psi0: &FockState, times: &[f64]) -> Result<Vec<FockState>, OracleError> {
        let dim = 1usize << self.n_modes;
        if psi0.amps.len() != dim {
            return Err(OracleError::DimensionMismatch { expected: dim, got: psi0.amps.len() });
        }
        let proj: Vec<(usize, DVector<C64>)> = self
            .sectors
            .iter()
            .enumerate()
            .filter_map(|(k, s)| {
                let v = DVector::from_iterator(s.states.len(), s.states.iter().map(|&b| psi0.amps[b]));
                (v.norm() > 0.0).then(|| (k, s.vectors.adjoint() * v))
            })
            .collect();
        Ok(times
            .iter()
            .map(|&t| {
                let mut amps = DVector::zeros(dim);
                for (k, c) in &proj {
                    let s = &self.sectors[*k];
                    let phased = DVector::from_iterator(
                        c.len(),
                        c.iter().zip(s.energies.iter()).map(|(a, e)| a * C64::from_polar(1.0, -e * t)),
                    );
                    let v = &s.vectors * phased;
                    for (p, &b) in s.states.iter().enumerate() {
                        amps[b] = v[p];
                    }
                }
                FockState { n_modes: self.n_modes, amps }
            })
            .collect())
    }

    /// Sector and position of a basis index.
    pub fn locate(&self, b: usize) -> (usize, usize) {
        self.lookup[b]
    }

    /// Reduced states of a thermal mixture: the system starts in `system`, each
    /// bath mode independently occupied with probability `bath_occupations[k]`.
    /// Configurations whose weight is below `weight_cutoff` are dropped and the
    /// kept weights renormalized.
    pub fn thermal_mixture(
        &self,
        system: &DVector<C64>,
        bath_occupations: &[f64],
        times: &[f64],
        weight_cutoff: f64,
    ) -> Result<Vec<DMatrix<C64>>, OracleError> {
        let n_bath = bath_occupations.len();
        let n_sys = self.n_modes - n_bath;
        if system.len() != 1 << n_sys {
            return Err(OracleError::DimensionMismatch { expected: 1 << n_sys, got: system.len() });
        }
        let configs: Vec<(usize, f64)> = (0..1usize << n_bath)
            .filter_map(|c| {
                let w: f64 = (0..n_bath)
                    .map(|k| {
                        let occ = c & (1 << (n_bath - 1 - k)) != 0;
                        if occ {
                            bath_occupations[k]
                        } else {
                            1.0 - bath_occupations[k]
                        }
                    })
                    .product();
                (w > weight_cutoff).then_some((c, w))
            })
            .collect();
        let total: f64 = configs.iter().map(|c| c.1).sum();
        let dim_s = 1 << n_sys;
        let zero = vec![DMatrix::zeros(dim_s, dim_s); times.len()];
        let acc = configs
            .par_iter()
            .map(|&(c, w)| -> Result<Vec<DMatrix<C64>>, OracleError> {
                let psi = FockState::product(system, n_bath, c);
                let states = self.evolve(&psi, times)?;
                Ok(states.iter().map(|s| partial_trace_system(s, n_sys) * C64::from(w / total)).collect())
            })
            .try_reduce(
                || zero.clone(),
                |mut a, b| {
                    for (x, y) in a.iter_mut().zip(b) {
                        *x += y;
                    }
                    Ok(a)
                },
            )?;
        Ok(acc)
    }
}

/// `Tr_B |ψ⟩⟨ψ|` with the first `n_sys` modes kept.
pub fn partial_trace_system(psi: &FockState, n_sys: usize) -> DMatrix<C64> {
    let n_bath = psi.n_modes - n_sys;
    let dim_b = 1usize << n_bath;
    let m = DMatrix::from_fn(1 << n_sys, dim_b, |s, b| psi.amps[(s << n_bath) | b]);
    &m * m.adjoint()
}

/// Fock evolution of a model whose baths are small discrete sets of modes.
pub fn evolve_fock(model: &ModelSpec, psi0: &FockState, times: &[f64]) -> Result<Vec<FockState>, OracleError> {
    let (h, _) = one_body_hamiltonian(model)?;
    FockSpace::new(&h)?.evolve(psi0, times)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bath::SpectralDensity;

    fn small_model() -> ModelSpec {
        let modes = vec![Mode::new(0.8, 0.3), Mode::new(1.1, 0.2), Mode::new(1.4, 0.25)];
        let bath = BathSpec::new(SpectralDensity::discrete(modes).unwrap(), 3000.0, 1.0).unwrap();
        ModelSpec::SingleDotThermal { omega0: 1.0, bath }
    }

    #[test]
    fn fock_and_onebody_agree_on_single_dot() {
        let model = small_model();
        let (h, occ) = one_body_hamiltonian(&model).unwrap();
        let ob = OneBodyOracle::new(&h, 1, occ.clone()).unwrap();
        let space = FockSpace::new(&h).unwrap();
        let times = [0.0, 0.7, 2.3, 5.0];
        let sys = DVector::from_vec(vec![ZERO, ONE]);
        let fock = space.thermal_mixture(&sys, &occ, &times, 0.0).unwrap();
        let gauss = ob.reduced_states(&[true], &times).unwrap();
        for (a, b) in fock.iter().zip(&gauss) {
            assert!((a - b).norm() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn energy_is_conserved() {
        let model = small_model();
        let (h, _) = one_body_hamiltonian(&model).unwrap();
        let space = FockSpace::new(&h).unwrap();
        let mut psi = FockState::basis(4, 0b1010);
        psi.amps[0b0110] = ONE;
        psi.amps /= C64::from(2f64.sqrt());
        let e0 = space.energy(&psi);
        for s in space.evolve(&psi, &[1.0, 3.0]).unwrap() {
            assert!((space.energy(&s) - e0).abs() < 1e-12);
            assert!((s.norm() - 1.0).abs() < 1e-12);
        }
    }
}
