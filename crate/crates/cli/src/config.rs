//! Scenario configuration files.
//!
//! Configs are TOML documents with unit-suffixed keys. Parsing happens in two
//! stages: [`parse`] checks syntax and rejects unknown keys, and
//! [`Scenario::from_config`] checks semantics and reports every offending
//! field at once.

use std::path::PathBuf;

use fermi_sse::bath::{BathSpec, Mode, OmegaGrid, SpectralDensity, TimeGrid};
use fermi_sse::coeffs::{FixedPointMethod, ModelSpec, SolverOptions};
use fermi_sse::C64;
use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config does not parse: {0}")]
    Syntax(String),
    #[error("invalid config:\n  {}", .0.join("\n  "))]
    Invalid(Vec<String>),
    #[error("sweep parameter `{0}` is not addressable: {1}")]
    Parameter(String, String),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub model: Option<ModelBlock>,
    pub bath: Option<BathBlock>,
    pub bath1: Option<BathBlock>,
    pub bath2: Option<BathBlock>,
    pub grid: Option<GridBlock>,
    pub run: Option<RunBlock>,
    pub sweep: Option<SweepBlock>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelBlock {
    /// `many_fermion_vacuum`, `single_dot_thermal` or `double_dot`.
    pub variant: String,
    #[serde(rename = "omega0_eV")]
    pub omega0_ev: Option<f64>,
    #[serde(rename = "omegas_eV")]
    pub omegas_ev: Option<Vec<f64>>,
    #[serde(rename = "omega1_eV")]
    pub omega1_ev: Option<f64>,
    #[serde(rename = "omega2_eV")]
    pub omega2_ev: Option<f64>,
    #[serde(rename = "g_re_eV")]
    pub g_re_ev: Option<f64>,
    #[serde(rename = "g_im_eV")]
    pub g_im_ev: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BathBlock {
    /// `lorentzian`, `discrete` or `markov`.
    pub density: String,
    #[serde(rename = "temperature_K")]
    pub temperature_k: Option<f64>,
    #[serde(rename = "mu_eV")]
    pub mu_ev: Option<f64>,
    #[serde(rename = "gamma_eV")]
    pub gamma_ev: Option<f64>,
    /// Dimensionless Lorentzian width `b`.
    pub bandwidth: Option<f64>,
    #[serde(rename = "center_eV")]
    pub center_ev: Option<f64>,
    pub nodes: Option<usize>,
    #[serde(rename = "window_min_eV")]
    pub window_min_ev: Option<f64>,
    #[serde(rename = "window_max_eV")]
    pub window_max_ev: Option<f64>,
    #[serde(rename = "mode_energies_eV")]
    pub mode_energies_ev: Option<Vec<f64>>,
    #[serde(rename = "mode_couplings_eV")]
    pub mode_couplings_ev: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridBlock {
    #[serde(rename = "t_max_hbar_per_eV")]
    pub t_max: Option<f64>,
    pub n_steps: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunBlock {
    /// `coefficients`, `propagate`, `validate` or `oracle-compare`.
    pub mode: String,
    pub output: Option<String>,
    pub substeps: Option<usize>,
    pub sse_substeps: Option<usize>,
    pub solver_tolerance: Option<f64>,
    pub max_iterations: Option<usize>,
    /// `krylov` (default) or `picard`.
    pub fixed_point: Option<String>,
    pub rotating_frame: Option<bool>,
    pub compare_tolerance: Option<f64>,
    pub initial_occupations: Option<Vec<bool>>,
    /// Pure initial system state as `[re, im]` pairs in the number basis.
    pub initial_amplitudes: Option<Vec<[f64; 2]>>,
    pub write_kernels: Option<bool>,
    /// Thermal configurations lighter than this are dropped by the Fock oracle.
    pub fock_weight_cutoff: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepBlock {
    /// Dotted key path, e.g. `bath.temperature_K`.
    pub parameter: String,
    pub values: Vec<toml::Value>,
}

pub fn parse(text: &str) -> Result<ScenarioConfig, ConfigError> {
    toml::from_str(text).map_err(|e| ConfigError::Syntax(e.to_string()))
}

pub fn load(path: &std::path::Path) -> Result<ScenarioConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
    parse(&text)
}

/// Returns a copy of `cfg` with the key at dotted `path` replaced by `value`.
/// The enclosing block must exist; the key itself may be absent.
pub fn with_parameter(cfg: &ScenarioConfig, path: &str, value: &toml::Value) -> Result<ScenarioConfig, ConfigError> {
    let err = |m: &str| ConfigError::Parameter(path.into(), m.into());
    let mut tree = toml::Value::try_from(cfg).map_err(|e| err(&e.to_string()))?;
    let keys: Vec<&str> = path.split('.').collect();
    let (last, parents) = keys.split_last().ok_or_else(|| err("empty path"))?;
    let mut node = &mut tree;
    for k in parents {
        node = node
            .get_mut(*k)
            .ok_or_else(|| err(&format!("no block `{k}`")))?;
    }
    let table = node.as_table_mut().ok_or_else(|| err("parent is not a block"))?;
    table.insert((*last).to_string(), value.clone());
    tree.try_into().map_err(|e: toml::de::Error| err(&e.to_string()))
}

/// Parses a command-line literal as a TOML value, falling back to a string.
pub fn parse_value(literal: &str) -> toml::Value {
    #[derive(Deserialize)]
    struct Wrap {
        v: toml::Value,
    }
    toml::from_str::<Wrap>(&format!("v = {literal}"))
        .map(|w| w.v)
        .unwrap_or_else(|_| toml::Value::String(literal.into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunMode {
    Coefficients,
    Propagate,
    Validate,
    OracleCompare,
}

impl RunMode {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "coefficients" => Some(Self::Coefficients),
            "propagate" => Some(Self::Propagate),
            "validate" => Some(Self::Validate),
            "oracle-compare" => Some(Self::OracleCompare),
            _ => None,
        }
    }
}

/// The physical model; the Markov marker has no bath spectrum and is kept apart.
#[derive(Debug, Clone, PartialEq)]
pub enum ScenarioModel {
    Spec(ModelSpec),
    MarkovDot { omega0: f64, gamma: f64 },
}

impl ScenarioModel {
    pub fn variant(&self) -> &'static str {
        match self {
            Self::Spec(ModelSpec::ManyFermionVacuum { .. }) => "many_fermion_vacuum",
            Self::Spec(ModelSpec::SingleDotThermal { .. }) => "single_dot_thermal",
            Self::Spec(ModelSpec::DoubleDotTwoBaths { .. }) => "double_dot",
            Self::MarkovDot { .. } => "single_dot_markov",
        }
    }

    pub fn n_system_modes(&self) -> usize {
        match self {
            Self::Spec(m) => m.n_system_modes(),
            Self::MarkovDot { .. } => 1,
        }
    }
}

/// A validated, ready-to-run scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub model: ScenarioModel,
    pub grid: TimeGrid,
    pub mode: RunMode,
    pub output: Option<PathBuf>,
    pub substeps: usize,
    pub sse_substeps: usize,
    pub solver: SolverOptions,
    pub compare_tolerance: Option<f64>,
    pub initial: DVector<C64>,
    /// Number-state occupations when the initial state is one.
    pub initial_occupations: Option<Vec<bool>>,
    pub write_kernels: bool,
    pub fock_weight_cutoff: f64,
}

struct Diagnostics(Vec<String>);

impl Diagnostics {
    fn require<T: Copy>(&mut self, v: Option<T>, field: &str) -> Option<T> {
        if v.is_none() {
            self.0.push(format!("{field}: required"));
        }
        v
    }

    fn positive(&mut self, v: Option<f64>, field: &str) -> Option<f64> {
        let v = self.require(v, field)?;
        if v.is_finite() && v > 0.0 {
            Some(v)
        } else {
            self.0.push(format!("{field}: must be positive, got {v}"));
            None
        }
    }

    fn push(&mut self, msg: String) {
        self.0.push(msg);
    }
}

impl Scenario {
    pub fn from_config(cfg: &ScenarioConfig) -> Result<Self, ConfigError> {
        let mut d = Diagnostics(Vec::new());
        let missing: Vec<&str> = [
            ("model", cfg.model.is_none()),
            ("grid", cfg.grid.is_none()),
            ("run", cfg.run.is_none()),
        ]
        .iter()
        .filter(|(_, m)| *m)
        .map(|(n, _)| *n)
        .collect();
        if !missing.is_empty() {
            d.push(format!("missing blocks: {}", missing.iter().map(|b| format!("[{b}]")).collect::<Vec<_>>().join(", ")));
        }
        let model = cfg.model.as_ref().and_then(|m| build_model(m, cfg, &mut d));
        let grid = cfg.grid.as_ref().and_then(|g| {
            let t_max = d.positive(g.t_max, "grid.t_max_hbar_per_eV")?;
            let n = d.require(g.n_steps, "grid.n_steps")?;
            TimeGrid::new(t_max, n).map_err(|e| d.push(format!("grid: {e}"))).ok()
        });
        let run = cfg.run.as_ref();
        let mode = run.and_then(|r| {
            let m = RunMode::parse(&r.mode);
            if m.is_none() {
                d.push(format!(
                    "run.mode: expected coefficients | propagate | validate | oracle-compare, got `{}`",
                    r.mode
                ));
            }
            m
        });
        let n_sys = model.as_ref().map_or(1, ScenarioModel::n_system_modes);
        let initial = run.and_then(|r| initial_state(r, n_sys, &mut d));
        let solver = run.and_then(|r| solver_options(r, &mut d));
        if !d.0.is_empty() {
            return Err(ConfigError::Invalid(d.0));
        }
        let run = run.expect("checked");
        let (initial, initial_occupations) = initial.expect("checked");
        Ok(Self {
            model: model.expect("checked"),
            grid: grid.expect("checked"),
            mode: mode.expect("checked"),
            output: run.output.as_ref().map(PathBuf::from),
            substeps: run.substeps.unwrap_or(4).max(1),
            sse_substeps: run.sse_substeps.unwrap_or(1).max(1),
            solver: solver.expect("checked"),
            compare_tolerance: run.compare_tolerance,
            initial,
            initial_occupations,
            write_kernels: run.write_kernels.unwrap_or(false),
            fock_weight_cutoff: run.fock_weight_cutoff.unwrap_or(0.0),
        })
    }
}

fn solver_options(r: &RunBlock, d: &mut Diagnostics) -> Option<SolverOptions> {
    let mut opts = SolverOptions { keep_tables: false, ..SolverOptions::default() };
    if let Some(tol) = r.solver_tolerance {
        if !(tol.is_finite() && tol > 0.0) {
            d.push(format!("run.solver_tolerance: must be positive, got {tol}"));
            return None;
        }
        opts.tolerance = tol;
    }
    if let Some(m) = r.max_iterations {
        opts.max_iter = m;
    }
    if let Some(f) = r.rotating_frame {
        opts.rotating_frame = f;
    }
    match r.fixed_point.as_deref() {
        None | Some("krylov") => {}
        Some("picard") => opts.method = FixedPointMethod::Picard { damping: 0.5 },
        Some(other) => {
            d.push(format!("run.fixed_point: expected krylov | picard, got `{other}`"));
            return None;
        }
    }
    Some(opts)
}

fn initial_state(r: &RunBlock, n_sys: usize, d: &mut Diagnostics) -> Option<(DVector<C64>, Option<Vec<bool>>)> {
    let dim = 1usize << n_sys;
    match (&r.initial_occupations, &r.initial_amplitudes) {
        (Some(_), Some(_)) => {
            d.push("run: give either initial_occupations or initial_amplitudes, not both".into());
            None
        }
        (Some(occ), None) => {
            if occ.len() != n_sys {
                d.push(format!("run.initial_occupations: expected {n_sys} entries, got {}", occ.len()));
                return None;
            }
            let index = occ.iter().fold(0usize, |acc, &b| (acc << 1) | b as usize);
            let mut v = DVector::zeros(dim);
            v[index] = C64::new(1.0, 0.0);
            Some((v, Some(occ.clone())))
        }
        (None, Some(amps)) => {
            if amps.len() != dim {
                d.push(format!("run.initial_amplitudes: expected {dim} [re, im] pairs, got {}", amps.len()));
                return None;
            }
            let v = DVector::from_iterator(dim, amps.iter().map(|[re, im]| C64::new(*re, *im)));
            let norm = v.norm();
            if !(norm > 0.0 && norm.is_finite()) {
                d.push("run.initial_amplitudes: state has zero norm".into());
                return None;
            }
            Some((v / C64::from(norm), None))
        }
        (None, None) => {
            let occ: Vec<bool> = (0..n_sys).map(|k| k == 0).collect();
            let index = 1usize << (n_sys - 1);
            let mut v = DVector::zeros(dim);
            v[index] = C64::new(1.0, 0.0);
            Some((v, Some(occ)))
        }
    }
}

fn build_model(m: &ModelBlock, cfg: &ScenarioConfig, d: &mut Diagnostics) -> Option<ScenarioModel> {
    match m.variant.as_str() {
        "many_fermion_vacuum" => {
            let omegas = m.omegas_ev.clone().or(m.omega0_ev.map(|w| vec![w]));
            if omegas.as_ref().is_none_or(|o| o.is_empty()) {
                d.push("model.omegas_eV: required (or model.omega0_eV for one mode)".into());
            }
            let block = bath_block(cfg.bath.as_ref(), "bath", d)?;
            for key in [("temperature_K", block.temperature_k.is_some()), ("mu_eV", block.mu_ev.is_some())] {
                if key.1 {
                    d.push(format!("bath.{}: not allowed for the vacuum model", key.0));
                }
            }
            let density = density(block, "bath", m.omega0_ev, d)?;
            let bath = bath_spec(BathSpec::vacuum(density.0), density.1);
            Some(ScenarioModel::Spec(ModelSpec::ManyFermionVacuum { omegas: omegas?, bath }))
        }
        "single_dot_thermal" => {
            let omega0 = d.require(m.omega0_ev, "model.omega0_eV");
            let block = bath_block(cfg.bath.as_ref(), "bath", d)?;
            if block.density == "markov" {
                let gamma = d.positive(block.gamma_ev, "bath.gamma_eV")?;
                return Some(ScenarioModel::MarkovDot { omega0: omega0?, gamma });
            }
            let bath = thermal_bath(block, "bath", omega0, d)?;
            Some(ScenarioModel::Spec(ModelSpec::SingleDotThermal { omega0: omega0?, bath }))
        }
        "double_dot" => {
            let omega1 = d.require(m.omega1_ev, "model.omega1_eV");
            let omega2 = d.require(m.omega2_ev, "model.omega2_eV");
            let g_re = d.require(m.g_re_ev, "model.g_re_eV");
            let b1 = bath_block(cfg.bath1.as_ref(), "bath1", d).and_then(|b| thermal_bath(b, "bath1", omega1, d));
            let b2 = bath_block(cfg.bath2.as_ref(), "bath2", d).and_then(|b| thermal_bath(b, "bath2", omega2, d));
            Some(ScenarioModel::Spec(ModelSpec::DoubleDotTwoBaths {
                omega1: omega1?,
                omega2: omega2?,
                g: C64::new(g_re?, m.g_im_ev.unwrap_or(0.0)),
                bath1: b1?,
                bath2: b2?,
            }))
        }
        other => {
            d.push(format!(
                "model.variant: expected many_fermion_vacuum | single_dot_thermal | double_dot, got `{other}`"
            ));
            None
        }
    }
}

fn bath_block<'a>(b: Option<&'a BathBlock>, name: &str, d: &mut Diagnostics) -> Option<&'a BathBlock> {
    if b.is_none() {
        d.push(format!("missing blocks: [{name}]"));
    }
    b
}

fn bath_spec(spec: BathSpec, grid: Option<OmegaGrid>) -> BathSpec {
    match grid {
        Some(g) => spec.with_omega_grid(g),
        None => spec,
    }
}

fn thermal_bath(b: &BathBlock, name: &str, center: Option<f64>, d: &mut Diagnostics) -> Option<BathSpec> {
    let temperature = d.require(b.temperature_k, &format!("{name}.temperature_K"));
    let mu = d.require(b.mu_ev, &format!("{name}.mu_eV"));
    if b.density == "markov" {
        d.push(format!("{name}.density: markov is only available for single_dot_thermal"));
        return None;
    }
    let (density, grid) = density(b, name, center, d)?;
    match BathSpec::new(density, temperature?, mu?) {
        Ok(spec) => Some(bath_spec(spec, grid)),
        Err(e) => {
            d.push(format!("{name}: {e}"));
            None
        }
    }
}

fn density(
    b: &BathBlock,
    name: &str,
    center: Option<f64>,
    d: &mut Diagnostics,
) -> Option<(SpectralDensity, Option<OmegaGrid>)> {
    match b.density.as_str() {
        "lorentzian" => {
            let gamma = d.positive(b.gamma_ev, &format!("{name}.gamma_eV"));
            let width = d.positive(b.bandwidth, &format!("{name}.bandwidth"));
            let omega0 = b.center_ev.or(center);
            if omega0.is_none() {
                d.push(format!("{name}.center_eV: required"));
            }
            let density = SpectralDensity::lorentzian(gamma?, width?, omega0?)
                .map_err(|e| d.push(format!("{name}: {e}")))
                .ok()?;
            let grid = match (b.window_min_ev, b.window_max_ev, b.nodes) {
                (None, None, None) => None,
                (lo, hi, nodes) => {
                    let (dlo, dhi) = density.default_window().expect("continuum density");
                    let nodes = nodes.unwrap_or(fermi_sse::bath::DEFAULT_NODES);
                    if nodes == 0 {
                        d.push(format!("{name}.nodes: must be at least 1"));
                        return None;
                    }
                    Some(OmegaGrid { omega_min: lo.unwrap_or(dlo), omega_max: hi.unwrap_or(dhi), nodes })
                }
            };
            Some((density, grid))
        }
        "discrete" => {
            let energies = b.mode_energies_ev.as_ref();
            let couplings = b.mode_couplings_ev.as_ref();
            let (Some(e), Some(c)) = (energies, couplings) else {
                d.push(format!("{name}.mode_energies_eV and {name}.mode_couplings_eV: required for discrete densities"));
                return None;
            };
            if e.len() != c.len() {
                d.push(format!("{name}.mode_couplings_eV: expected {} entries, got {}", e.len(), c.len()));
                return None;
            }
            let modes = e.iter().zip(c).map(|(&w, &t)| Mode::new(w, t)).collect();
            SpectralDensity::discrete(modes).map(|s| (s, None)).map_err(|e| d.push(format!("{name}: {e}"))).ok()
        }
        "markov" => {
            d.push(format!("{name}.density: markov is only available for single_dot_thermal"));
            None
        }
        other => {
            d.push(format!("{name}.density: expected lorentzian | discrete | markov, got `{other}`"));
            None
        }
    }
}
