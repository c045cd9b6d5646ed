use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adjoint::SignConvention;
use crate::assimilate::DescentOptions;
use crate::domain::{ControlKind, Field, Grid, ObservationLayout, DEFAULT_CFL, DEFAULT_DISSIPATION};
use crate::error::{Error, Result};
use crate::sensitivity::{OracleOptions, SensitivityOptions};

/// Analytic field recipes for truths and known counterparts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "recipe", rename_all = "snake_case", deny_unknown_fields)]
pub enum Recipe {
    Flat,
    Gaussian { amplitude: f64, center: f64, width: f64 },
    /// Sum of cosines with wavenumbers `k_min..=k_max` (in units of `pi / L`), random phases
    /// and amplitudes from `seed`, rescaled to the given peak amplitude.
    CosinePack {
        k_min: usize,
        k_max: usize,
        seed: u64,
        #[serde(default = "default_pack_amplitude")]
        amplitude: f64,
    },
    /// Compact `cos²` bump of total width `width`.
    Sandbar { height: f64, center: f64, width: f64 },
}

fn default_pack_amplitude() -> f64 {
    0.05
}

impl Default for Recipe {
    fn default() -> Self {
        Recipe::Flat
    }
}

impl Recipe {
    pub fn build(&self, grid: &Grid) -> Result<Field> {
        let l = grid.half_length();
        match *self {
            Recipe::Flat => Ok(grid.zeros()),
            Recipe::Gaussian { amplitude, center, width } => {
                if !(width > 0.0) {
                    return Err(Error::Config(format!("gaussian width must be positive, got {width}")));
                }
                // periodic image nearest to each cell
                Ok(grid.field_from_fn(|x| {
                    let d = (x - center + l).rem_euclid(2.0 * l) - l;
                    amplitude * (-(d / width).powi(2)).exp()
                }))
            }
            Recipe::CosinePack { k_min, k_max, seed, amplitude } => {
                if k_min == 0 || k_min > k_max || 2 * k_max >= grid.n_cells() {
                    return Err(Error::Config(format!(
                        "cosine pack needs 1 <= k_min <= k_max < n_cells / 2, got {k_min}..{k_max}"
                    )));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let modes: Vec<(f64, f64, f64)> = (k_min..=k_max)
                    .map(|k| (k as f64, rng.gen_range(0.5..1.0), rng.gen_range(0.0..std::f64::consts::TAU)))
                    .collect();
                let f = grid.field_from_fn(|x| {
                    modes.iter().map(|(k, a, th)| a * (std::f64::consts::PI * k * x / l + th).cos()).sum()
                });
                let peak = f.max_abs();
                Ok(f.scaled(amplitude / peak))
            }
            Recipe::Sandbar { height, center, width } => {
                if !(width > 0.0) {
                    return Err(Error::Config(format!("sandbar width must be positive, got {width}")));
                }
                Ok(grid.field_from_fn(|x| {
                    let d = (x - center + l).rem_euclid(2.0 * l) - l;
                    if d.abs() < 0.5 * width {
                        height * (std::f64::consts::PI * d / width).cos().powi(2)
                    } else {
                        0.0
                    }
                }))
            }
        }
    }

    /// Shortest wavelength present, where one is defined.
    pub fn min_wavelength(&self, grid: &Grid) -> Option<f64> {
        match self {
            Recipe::CosinePack { k_max, .. } => Some(2.0 * grid.half_length() / *k_max as f64),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default = "one")]
    pub half_length: f64,
    pub n_cells: usize,
    pub dt: f64,
    pub n_steps: usize,
    #[serde(default = "default_cfl")]
    pub c_cfl: f64,
    #[serde(default = "default_dissipation")]
    pub dissipation: f64,
}

fn one() -> f64 {
    1.0
}
fn default_cfl() -> f64 {
    DEFAULT_CFL
}
fn default_dissipation() -> f64 {
    DEFAULT_DISSIPATION
}

impl GridConfig {
    pub fn build(&self) -> Result<Grid> {
        Grid::with_options(self.half_length, self.n_cells, self.dt, self.n_steps, self.c_cfl, self.dissipation)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthConfig {
    /// Initial surface height `phi`.
    #[serde(default)]
    pub initial: Recipe,
    /// Bathymetry `beta`.
    #[serde(default)]
    pub bathymetry: Recipe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationConfig {
    /// Explicit station positions; overrides `count`.
    #[serde(default)]
    pub stations: Option<Vec<f64>>,
    /// Number of equally spaced stations.
    #[serde(default)]
    pub count: Option<usize>,
    /// First observed level.
    #[serde(default)]
    pub start: usize,
    #[serde(default = "one_usize")]
    pub stride: usize,
    #[serde(default)]
    pub noise_sd: f64,
    #[serde(default)]
    pub seed: u64,
}

fn one_usize() -> usize {
    1
}

impl Default for ObservationConfig {
    fn default() -> Self {
        Self { stations: None, count: Some(16), start: 0, stride: 1, noise_sd: 0.0, seed: 0 }
    }
}

impl ObservationConfig {
    pub fn positions(&self, grid: &Grid) -> Result<Vec<f64>> {
        match (&self.stations, self.count) {
            (Some(s), _) if !s.is_empty() => Ok(s.clone()),
            (_, Some(n)) if n > 0 => Ok(ObservationLayout::uniform_stations(grid, n)),
            _ => Err(Error::Config("observation block needs `stations` or a positive `count`".into())),
        }
    }

    pub fn layout(&self, grid: &Grid) -> Result<ObservationLayout> {
        ObservationLayout::strided(grid, self.positions(grid)?, self.start, self.stride)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KappaConfig {
    /// Sweep `10^max_exp` down to `10^min_exp`.
    pub max_exp: f64,
    pub min_exp: f64,
    pub per_decade: usize,
    pub seed: u64,
    /// Scale of the random directions (L² norm).
    pub direction_scale: f64,
    /// Directions for the gradient and Hessian checks.
    pub checks: usize,
}

impl Default for KappaConfig {
    fn default() -> Self {
        Self { max_exp: -1.0, min_exp: -12.0, per_decade: 2, seed: 0, direction_scale: 0.01, checks: 5 }
    }
}

impl KappaConfig {
    pub fn epsilons(&self) -> Result<Vec<f64>> {
        if !(self.max_exp > self.min_exp) || self.per_decade == 0 {
            return Err(Error::Config("kappa sweep needs max_exp > min_exp and per_decade > 0".into()));
        }
        let n = ((self.max_exp - self.min_exp) * self.per_decade as f64).round() as usize;
        Ok((0..=n).map(|i| 10f64.powf(self.max_exp - i as f64 / self.per_decade as f64)).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensitivityConfig {
    pub response: String,
    /// Station of the point-height response.
    pub x0: f64,
    pub rel_tol: f64,
    pub max_iter: usize,
    pub tikhonov: f64,
    pub sign_convention: SignConvention,
    /// Relative gradient tolerance of the assimilation run that produces the optimum.
    pub optimum_rel_tol: f64,
    pub optimum_max_iters: usize,
    /// Observation perturbation of the oracle; unset picks one suited to the control kind.
    pub oracle_delta: Option<f64>,
    pub oracle_rel_tol: f64,
    pub oracle_max_iters: usize,
    pub oracle_memory: usize,
}

impl Default for SensitivityConfig {
    fn default() -> Self {
        let s = SensitivityOptions::default();
        let o = OracleOptions::default();
        Self {
            response: "point_height".into(),
            x0: 0.0,
            rel_tol: s.rel_tol,
            max_iter: s.max_iter,
            tikhonov: s.tikhonov,
            sign_convention: s.sign_convention,
            optimum_rel_tol: 1e-10,
            optimum_max_iters: 20_000,
            oracle_delta: None,
            oracle_rel_tol: o.rel_tol,
            oracle_max_iters: o.max_iters,
            oracle_memory: o.memory,
        }
    }
}

impl SensitivityConfig {
    pub fn options(&self) -> SensitivityOptions {
        SensitivityOptions {
            rel_tol: self.rel_tol,
            max_iter: self.max_iter,
            tikhonov: self.tikhonov,
            sign_convention: self.sign_convention,
            ..SensitivityOptions::default()
        }
    }

    pub fn oracle(&self, kind: ControlKind) -> OracleOptions {
        OracleOptions {
            delta: self.oracle_delta.unwrap_or(OracleOptions::for_kind(kind).delta),
            rel_tol: self.oracle_rel_tol,
            max_iters: self.oracle_max_iters,
            memory: self.oracle_memory,
        }
    }

    pub fn optimum_descent(&self, base: &DescentOptions) -> DescentOptions {
        DescentOptions { max_iters: self.optimum_max_iters, tol: None, rel_tol: self.optimum_rel_tol, ..*base }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub directory: PathBuf,
    /// Tabular formats to write; only `csv` is supported.
    pub formats: Vec<String>,
    /// Levels between forward snapshots (0: first and last only).
    pub snapshot_every: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { directory: PathBuf::from("out"), formats: vec!["csv".into()], snapshot_every: 0 }
    }
}

/// Complete run configuration, read from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_kind")]
    pub kind: ControlKind,
    pub grid: GridConfig,
    #[serde(default)]
    pub truth: TruthConfig,
    #[serde(default)]
    pub observation: ObservationConfig,
    #[serde(default)]
    pub optimizer: DescentOptions,
    #[serde(default)]
    pub kappa: KappaConfig,
    #[serde(default)]
    pub sensitivity: SensitivityConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

fn default_kind() -> ControlKind {
    ControlKind::InitialCondition
}

/// A small twin on 64 cells: Gaussian hump over a sandbar, eight irregular stations sampled every fourth step.
impl Default for RunConfig {
    fn default() -> Self {
        Self {
            kind: ControlKind::InitialCondition,
            grid: GridConfig {
                half_length: 1.0,
                n_cells: 64,
                dt: 0.0125,
                n_steps: 128,
                c_cfl: DEFAULT_CFL,
                dissipation: DEFAULT_DISSIPATION,
            },
            truth: TruthConfig {
                initial: Recipe::Gaussian { amplitude: 0.1, center: 0.0, width: 0.1 },
                bathymetry: Recipe::Sandbar { height: 0.1, center: 0.3, width: 0.3 },
            },
            observation: ObservationConfig {
                stations: Some((0..8).map(|j| -0.9 + 0.2437 * j as f64).collect()),
                count: None,
                start: 4,
                stride: 4,
                noise_sd: 1e-3,
                seed: 7,
            },
            optimizer: DescentOptions::default(),
            kappa: KappaConfig::default(),
            sensitivity: SensitivityConfig { x0: 0.4, ..SensitivityConfig::default() },
            output: OutputConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; returns it with its raw bytes, which the manifest hashes.
    pub fn load(path: &Path) -> Result<(Self, Vec<u8>)> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let text = std::str::from_utf8(&bytes).map_err(|e| Error::Config(format!("config is not UTF-8: {e}")))?;
        Ok((Self::from_toml(text)?, bytes))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let grid = self.grid.build().map_err(|e| Error::Config(e.to_string()))?;
        self.truth.initial.build(&grid)?;
        self.truth.bathymetry.build(&grid)?;
        self.observation.layout(&grid).map_err(|e| Error::Config(e.to_string()))?;
        if !(self.observation.noise_sd >= 0.0) {
            return Err(Error::Config("observation noise_sd must be non-negative".into()));
        }
        if self.output.formats.iter().any(|f| f != "csv") {
            return Err(Error::Config(format!("unsupported output formats {:?} (only csv)", self.output.formats)));
        }
        let o = &self.optimizer;
        if !(o.armijo_c1 > 0.0 && o.armijo_c1 < 1.0) {
            return Err(Error::Config(format!("armijo_c1 must lie in (0, 1), got {}", o.armijo_c1)));
        }
        crate::sensitivity::builtin_response(&self.sensitivity.response, &grid.zeros(), self.sensitivity.x0)?;
        if self.sensitivity.response == "point_height" && (self.sensitivity.x0 < -grid.half_length() || self.sensitivity.x0 >= grid.half_length()) {
            return Err(Error::Config(format!("response station x0 = {} is outside the domain", self.sensitivity.x0)));
        }
        self.kappa.epsilons()?;
        Ok(())
    }

    pub fn grid(&self) -> Result<Grid> {
        self.grid.build()
    }

    /// True control and known counterpart for a control kind.
    pub fn truth_fields(&self, grid: &Grid, kind: ControlKind) -> Result<(Field, Field)> {
        let phi = self.truth.initial.build(grid)?;
        let beta = self.truth.bathymetry.build(grid)?;
        Ok(match kind {
            ControlKind::InitialCondition => (phi, beta),
            ControlKind::Bathymetry => (beta, phi),
        })
    }
}
