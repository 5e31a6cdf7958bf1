//! Reservoir description and two-time correlation kernels.
//!
//! Energies are in eV and times in units of ħ/eV (ħ = 1). A thermal reservoir
//! is split into two effective vacuum branches with couplings
//! `g_k = sqrt(1 - n_k) t_k` (particle branch, `b'`) and `f_k = sqrt(n_k) t_k`
//! (hole branch, `c'`), giving the stationary kernels
//!
//! ```text
//! K_b'(t,s) = Σ_k g_k² e^{-iω_k (t-s)}      K_c'(t,s) = Σ_k f_k² e^{+iω_k (t-s)}
//! ```

use std::num::NonZeroUsize;

use gauss_quad::GaussLegendre;
use rayon::prelude::*;
use thiserror::Error;

use crate::C64;

/// Boltzmann constant in eV/K (CODATA 2018).
pub const K_B_EV_PER_K: f64 = 8.617333262e-5;

/// Default number of quadrature nodes used to discretize a continuum density.
pub const DEFAULT_NODES: usize = 400;

/// Half-width of the default quadrature window, in units of `b ω0`.
pub const DEFAULT_WINDOW_WIDTHS: f64 = 8.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BathError {
    #[error("invalid spectral density: {0}")]
    InvalidDensity(String),
    #[error("invalid bath: {0}")]
    InvalidBath(String),
    #[error("invalid time grid: {0}")]
    InvalidGrid(String),
    #[error("operation requires a Lorentzian density")]
    NotLorentzian,
    #[error("degenerate frequency window [{0}, {1}]")]
    DegenerateWindow(f64, f64),
    #[error("bath has no modes")]
    EmptyModes,
    #[error("Markov rate must be positive, got {0}")]
    NonPositiveRate(f64),
}

/// One discrete reservoir mode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mode {
    /// Mode energy ω_k (eV).
    pub omega: f64,
    /// Coupling amplitude t_k (eV), real and non-negative.
    pub t: f64,
}

impl Mode {
    pub fn new(omega: f64, t: f64) -> Self {
        Self { omega, t }
    }
}

/// Spectral description of a reservoir.
#[derive(Debug, Clone, PartialEq)]
pub enum SpectralDensity {
    /// `J(ω) = Γ b² / ((1 - ω/ω0)² + b²)`.
    Lorentzian { gamma: f64, b: f64, omega0: f64 },
    /// Explicit modes, sorted ascending in ω with no duplicates.
    Discrete { modes: Vec<Mode> },
}

impl SpectralDensity {
    pub fn lorentzian(gamma: f64, b: f64, omega0: f64) -> Result<Self, BathError> {
        for (name, v) in [("gamma", gamma), ("b", b), ("omega0", omega0)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(BathError::InvalidDensity(format!(
                    "{name} must be positive and finite, got {v}"
                )));
            }
        }
        Ok(Self::Lorentzian { gamma, b, omega0 })
    }

    /// Builds a discrete density, sorting the modes by energy.
    pub fn discrete(mut modes: Vec<Mode>) -> Result<Self, BathError> {
        if modes.is_empty() {
            return Err(BathError::EmptyModes);
        }
        for m in &modes {
            if !m.omega.is_finite() || !m.t.is_finite() || m.t < 0.0 {
                return Err(BathError::InvalidDensity(format!(
                    "mode (omega={}, t={}) must be finite with t >= 0",
                    m.omega, m.t
                )));
            }
        }
        modes.sort_by(|a, b| a.omega.total_cmp(&b.omega));
        if modes.windows(2).any(|w| w[0].omega == w[1].omega) {
            return Err(BathError::InvalidDensity("duplicate mode energy".into()));
        }
        Ok(Self::Discrete { modes })
    }

    /// Default Gauss–Legendre window `[max(0, ω0(1-8b)), ω0(1+8b)]`.
    pub fn default_window(&self) -> Option<(f64, f64)> {
        match *self {
            Self::Lorentzian { b, omega0, .. } => {
                let half = DEFAULT_WINDOW_WIDTHS * b;
                Some(((omega0 * (1.0 - half)).max(0.0), omega0 * (1.0 + half)))
            }
            Self::Discrete { .. } => None,
        }
    }
}

/// Fermi–Dirac occupation `1 / (1 + exp((ω - μ)/k_B T))`, with the step
/// function (value 1/2 at ω = μ) at zero temperature.
pub fn fermi_occupation(omega: f64, temperature: f64, mu: f64) -> f64 {
    let x = omega - mu;
    if temperature <= 0.0 {
        return if x < 0.0 {
            1.0
        } else if x > 0.0 {
            0.0
        } else {
            0.5
        };
    }
    let beta_x = x / (K_B_EV_PER_K * temperature);
    // Evaluated in the form that cannot overflow for either sign.
    if beta_x > 0.0 {
        let e = (-beta_x).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + beta_x.exp())
    }
}

/// Lorentzian weight per unit frequency, `Γ b² / ((1 - ω/ω0)² + b²)`.
pub fn lorentzian_density(omega: f64, density: &SpectralDensity) -> Result<f64, BathError> {
    match *density {
        SpectralDensity::Lorentzian { gamma, b, omega0 } => {
            let d = 1.0 - omega / omega0;
            Ok(gamma * b * b / (d * d + b * b))
        }
        SpectralDensity::Discrete { .. } => Err(BathError::NotLorentzian),
    }
}

/// Samples a continuum density on `k` Gauss–Legendre nodes in
/// `[omega_min, omega_max]` with `t_k² = J(ω_k) w_k`. Discrete input is
/// returned unchanged.
pub fn discretize_spectrum(
    density: &SpectralDensity,
    omega_min: f64,
    omega_max: f64,
    k: usize,
) -> Result<SpectralDensity, BathError> {
    if let SpectralDensity::Discrete { .. } = density {
        return Ok(density.clone());
    }
    let k = NonZeroUsize::new(k)
        .ok_or_else(|| BathError::InvalidDensity("need at least one node".into()))?;
    if !(omega_min < omega_max) {
        return Err(BathError::DegenerateWindow(omega_min, omega_max));
    }
    let rule = GaussLegendre::new(k);
    let half = 0.5 * (omega_max - omega_min);
    let mid = 0.5 * (omega_max + omega_min);
    let mut modes = Vec::with_capacity(k.get());
    for &(x, w) in rule.as_node_weight_pairs() {
        let omega = mid + half * x;
        let j = lorentzian_density(omega, density)?;
        modes.push(Mode::new(omega, (j * w * half).sqrt()));
    }
    SpectralDensity::discrete(modes)
}

/// Explicit quadrature for discretizing a continuum density.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OmegaGrid {
    pub omega_min: f64,
    pub omega_max: f64,
    pub nodes: usize,
}

/// Statistics of one reservoir.
#[derive(Debug, Clone, PartialEq)]
pub struct BathSpec {
    pub density: SpectralDensity,
    /// Temperature in K.
    pub temperature: f64,
    /// Chemical potential in eV.
    pub mu: f64,
    /// Quadrature used for continuum densities; the default window applies
    /// when absent.
    pub omega_grid: Option<OmegaGrid>,
}

impl BathSpec {
    pub fn new(density: SpectralDensity, temperature: f64, mu: f64) -> Result<Self, BathError> {
        if !(temperature.is_finite() && temperature >= 0.0) {
            return Err(BathError::InvalidBath(format!(
                "temperature must be >= 0, got {temperature}"
            )));
        }
        if !mu.is_finite() {
            return Err(BathError::InvalidBath("mu must be finite".into()));
        }
        Ok(Self { density, temperature, mu, omega_grid: None })
    }

    /// A zero-temperature bath with every mode empty.
    pub fn vacuum(density: SpectralDensity) -> Self {
        Self { density, temperature: 0.0, mu: f64::NEG_INFINITY, omega_grid: None }
    }

    pub fn with_omega_grid(mut self, grid: OmegaGrid) -> Self {
        self.omega_grid = Some(grid);
        self
    }

    /// The discrete modes feeding both the kernels and the oracles.
    pub fn modes(&self) -> Result<Vec<Mode>, BathError> {
        let discrete = match &self.density {
            SpectralDensity::Discrete { modes } => return Ok(modes.clone()),
            d => match self.omega_grid {
                Some(g) => discretize_spectrum(d, g.omega_min, g.omega_max, g.nodes)?,
                None => {
                    let (lo, hi) = d.default_window().expect("continuum density");
                    discretize_spectrum(d, lo, hi, DEFAULT_NODES)?
                }
            },
        };
        match discrete {
            SpectralDensity::Discrete { modes } => Ok(modes),
            SpectralDensity::Lorentzian { .. } => unreachable!(),
        }
    }

    pub fn occupation(&self, omega: f64) -> f64 {
        fermi_occupation(omega, self.temperature, self.mu)
    }

    pub fn occupations(&self, modes: &[Mode]) -> Vec<f64> {
        modes.iter().map(|m| self.occupation(m.omega)).collect()
    }
}

/// Uniform time grid `t_i = i dt`, `i = 0..=n_steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    pub t_max: f64,
    pub n_steps: usize,
}

impl TimeGrid {
    pub fn new(t_max: f64, n_steps: usize) -> Result<Self, BathError> {
        if !(t_max.is_finite() && t_max > 0.0) {
            return Err(BathError::InvalidGrid(format!("t_max must be positive, got {t_max}")));
        }
        if n_steps < 2 {
            return Err(BathError::InvalidGrid(format!("n_steps must be >= 2, got {n_steps}")));
        }
        Ok(Self { t_max, n_steps })
    }

    pub fn dt(&self) -> f64 {
        self.t_max / self.n_steps as f64
    }

    pub fn t(&self, i: usize) -> f64 {
        i as f64 * self.dt()
    }

    /// Number of grid points, `n_steps + 1`.
    pub fn len(&self) -> usize {
        self.n_steps + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.t(i)).collect()
    }
}

/// Sampled stationary kernels of one reservoir.
///
/// Because the kernels depend on `t - s` only, each branch is stored as its
/// values at the grid lags `τ_l = l dt`; `kb(i, j)` returns `K_b'(t_i, s_j)`
/// for any ordering, using `K(s,t) = conj K(t,s)` when `j > i`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelTable {
    pub grid: TimeGrid,
    kb: Vec<C64>,
    kc: Vec<C64>,
    /// Reference frequency of the rotating frame the table is expressed in.
    frame: f64,
    exps: Option<ExpSum>,
}

/// Exact mode-sum form of both branches, `K(τ) = Σ a e^{iντ}` for `τ >= 0`,
/// stored as `(a, ν)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpSum {
    pub kb: Vec<(C64, f64)>,
    pub kc: Vec<(C64, f64)>,
}

impl ExpSum {
    pub fn from_modes(modes: &[Mode], occupations: &[f64]) -> Self {
        let keep = |v: Vec<(C64, f64)>| v.into_iter().filter(|(a, _)| *a != C64::new(0.0, 0.0)).collect();
        let kb = modes.iter().zip(occupations).map(|(m, n)| (C64::from((1.0 - n) * m.t * m.t), -m.omega));
        let kc = modes.iter().zip(occupations).map(|(m, n)| (C64::from(n * m.t * m.t), m.omega));
        Self { kb: keep(kb.collect()), kc: keep(kc.collect()) }
    }
}

impl KernelTable {
    /// Builds a table from explicit lag samples (index `l` ↔ `τ = l dt`).
    pub fn from_lags(grid: TimeGrid, kb: Vec<C64>, kc: Vec<C64>) -> Self {
        assert_eq!(kb.len(), grid.len());
        assert_eq!(kc.len(), grid.len());
        Self { grid, kb, kc, frame: 0.0, exps: None }
    }

    /// Attaches the mode-sum form of the same kernels (in the table's frame).
    pub fn with_exponentials(mut self, exps: ExpSum) -> Self {
        self.exps = Some(exps);
        self
    }

    pub fn exponentials(&self) -> Option<&ExpSum> {
        self.exps.as_ref()
    }

    /// Same kernels on a grid with half the steps (every other lag).
    pub fn every_other_lag(&self, coarse: TimeGrid) -> Self {
        Self {
            grid: coarse,
            kb: self.kb.iter().step_by(2).copied().collect(),
            kc: self.kc.iter().step_by(2).copied().collect(),
            frame: self.frame,
            exps: self.exps.clone(),
        }
    }

    pub fn kb(&self, i: usize, j: usize) -> C64 {
        lag_value(&self.kb, i, j)
    }

    pub fn kc(&self, i: usize, j: usize) -> C64 {
        lag_value(&self.kc, i, j)
    }

    /// `K_b'` at lags `0..=n_steps`.
    pub fn kb_lags(&self) -> &[C64] {
        &self.kb
    }

    pub fn kc_lags(&self) -> &[C64] {
        &self.kc
    }

    pub fn frame(&self) -> f64 {
        self.frame
    }

    /// True when the hole branch vanishes identically.
    pub fn is_vacuum(&self) -> bool {
        self.kc.iter().all(|z| *z == C64::new(0.0, 0.0))
    }

    /// The same kernels seen in a frame rotating at `omega_ref`, in which
    /// every mode energy is shifted by `-omega_ref`.
    pub fn in_frame(&self, omega_ref: f64) -> Self {
        let shift = omega_ref - self.frame;
        let dt = self.grid.dt();
        let rot = |l: usize| C64::from_polar(1.0, shift * l as f64 * dt);
        Self {
            grid: self.grid,
            kb: self.kb.iter().enumerate().map(|(l, z)| z * rot(l)).collect(),
            kc: self.kc.iter().enumerate().map(|(l, z)| z * rot(l).conj()).collect(),
            frame: omega_ref,
            exps: self.exps.as_ref().map(|e| ExpSum {
                kb: e.kb.iter().map(|&(a, nu)| (a, nu + shift)).collect(),
                kc: e.kc.iter().map(|&(a, nu)| (a, nu - shift)).collect(),
            }),
        }
    }

    /// CSV with columns `t, s, Re(Kb), Im(Kb), Re(Kc), Im(Kc)` over `s <= t`.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "t,s,re_kb,im_kb,re_kc,im_kc")?;
        for i in 0..self.grid.len() {
            for j in 0..=i {
                let (b, c) = (self.kb(i, j), self.kc(i, j));
                writeln!(
                    w,
                    "{},{},{},{},{},{}",
                    sci(self.grid.t(i)),
                    sci(self.grid.t(j)),
                    sci(b.re),
                    sci(b.im),
                    sci(c.re),
                    sci(c.im)
                )?;
            }
        }
        Ok(())
    }
}

fn lag_value(lags: &[C64], i: usize, j: usize) -> C64 {
    if i >= j {
        lags[i - j]
    } else {
        lags[j - i].conj()
    }
}

/// Scientific notation with 12 significant digits.
pub fn sci(x: f64) -> String {
    format!("{x:.11e}")
}

/// Correlation kernel of one reservoir: tabulated, or the Markov delta marker
/// `K(t,s) = Γ δ(t-s)`.
#[derive(Debug, Clone, PartialEq)]
pub enum Kernel {
    Tabulated(KernelTable),
    Markov { gamma: f64 },
}

/// The delta-kernel marker, interpreted downstream as `Q̄ = Γ L / 2`.
pub fn markov_kernel(gamma: f64) -> Result<Kernel, BathError> {
    if !(gamma.is_finite() && gamma > 0.0) {
        return Err(BathError::NonPositiveRate(gamma));
    }
    Ok(Kernel::Markov { gamma })
}

/// Direct generating sums for both branches at a single lag `τ`.
pub fn kernel_sums(modes: &[Mode], occupations: &[f64], tau: f64) -> (C64, C64) {
    let mut kb = C64::new(0.0, 0.0);
    let mut kc = C64::new(0.0, 0.0);
    for (m, &n) in modes.iter().zip(occupations) {
        let phase = C64::from_polar(1.0, -m.omega * tau);
        let t2 = m.t * m.t;
        kb += (1.0 - n) * t2 * phase;
        kc += n * t2 * phase.conj();
    }
    (kb, kc)
}

/// Samples `K_b'` and `K_c'` on every grid lag.
pub fn build_kernels(bath: &BathSpec, grid: &TimeGrid) -> Result<KernelTable, BathError> {
    let modes = bath.modes()?;
    if modes.is_empty() {
        return Err(BathError::EmptyModes);
    }
    let occ = bath.occupations(&modes);
    let dt = grid.dt();
    let (kb, kc): (Vec<C64>, Vec<C64>) = (0..grid.len())
        .into_par_iter()
        .map(|l| kernel_sums(&modes, &occ, l as f64 * dt))
        .unzip();
    Ok(KernelTable::from_lags(*grid, kb, kc).with_exponentials(ExpSum::from_modes(&modes, &occ)))
}
