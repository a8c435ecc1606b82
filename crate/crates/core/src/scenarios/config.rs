//! Scenario configuration: a JSON document with unit-suffixed field names,
//! dotted-path overrides, validation, and construction of the physics
//! objects it names.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::fields::Potential;
use crate::grid::{gaussian_packet, Grid, Point, SpinorField, MAX_DIM};
use crate::path_oracle::SliceKernelConfig;
use crate::product::{KappaScheme, OmegaSchedule, TauScheme};
use crate::propagator::{Backend, SpinTerm};
use crate::weights::{self, MultislitWeight, Trajectory, WallProfile, WeightSpec};
use crate::{CMat, C64};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Corridor,
    Multislit,
    Zeno,
    AharonovBohm,
    Convergence,
    OracleCompare,
    VerifyWeights,
}

impl ScenarioKind {
    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::Corridor => "corridor",
            ScenarioKind::Multislit => "multislit",
            ScenarioKind::Zeno => "zeno",
            ScenarioKind::AharonovBohm => "aharonov_bohm",
            ScenarioKind::Convergence => "convergence",
            ScenarioKind::OracleCompare => "oracle_compare",
            ScenarioKind::VerifyWeights => "verify_weights",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub extent_length_units: Vec<[f64; 2]>,
    pub points_per_axis: Vec<usize>,
}

impl GridConfig {
    pub fn build(&self) -> Result<Grid> {
        let ext: Vec<(f64, f64)> = self.extent_length_units.iter().map(|e| (e[0], e[1])).collect();
        Grid::new(ext.len(), &ext, &self.points_per_axis)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Constants {
    #[serde(default = "one")]
    pub mass_mass_units: f64,
    #[serde(default = "one")]
    pub charge_charge_units: f64,
    #[serde(default = "one")]
    pub hbar_action_units: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for Constants {
    fn default() -> Self {
        Constants {
            mass_mass_units: 1.0,
            charge_charge_units: 1.0,
            hbar_action_units: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "key", content = "params", deny_unknown_fields)]
pub enum PotentialConfig {
    Free,
    UniformField {
        field_strength_field_units: Vec<f64>,
    },
    Harmonic {
        omega_inverse_time_units: f64,
        #[serde(default)]
        center_length_units: Vec<f64>,
    },
    SymmetricGauge {
        b_field_units: f64,
    },
    Solenoid {
        flux_flux_units: f64,
        core_radius_length_units: f64,
        #[serde(default)]
        center_length_units: Vec<f64>,
    },
}

fn point(v: &[f64]) -> Result<Point> {
    if v.len() > MAX_DIM {
        return Err(Error::Config(format!("vector {v:?} has more than {MAX_DIM} entries")));
    }
    let mut p = [0.0; MAX_DIM];
    p[..v.len()].copy_from_slice(v);
    Ok(p)
}

impl PotentialConfig {
    pub fn build(&self, dim: usize, c: &Constants) -> Result<Potential> {
        let p = match self {
            PotentialConfig::Free => Potential::free(dim),
            PotentialConfig::UniformField {
                field_strength_field_units,
            } => Potential::uniform_field(dim, point(field_strength_field_units)?),
            PotentialConfig::Harmonic {
                omega_inverse_time_units,
                center_length_units,
            } => Potential::harmonic(
                dim,
                c.mass_mass_units,
                *omega_inverse_time_units,
                point(center_length_units)?,
            ),
            PotentialConfig::SymmetricGauge { b_field_units } => {
                if dim != 2 {
                    return Err(Error::Config("symmetric_gauge needs a 2D grid".into()));
                }
                Potential::symmetric_gauge(*b_field_units)
            }
            PotentialConfig::Solenoid {
                flux_flux_units,
                core_radius_length_units,
                center_length_units,
            } => {
                if dim != 2 {
                    return Err(Error::Config("solenoid needs a 2D grid".into()));
                }
                if !(*core_radius_length_units > 0.0) {
                    return Err(Error::Config("solenoid core radius must be positive".into()));
                }
                Potential::solenoid(*flux_flux_units, *core_radius_length_units, point(center_length_units)?)
            }
        };
        Ok(p.with_constants(c.mass_mass_units, c.charge_charge_units, c.hbar_action_units))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum TrajectoryConfig {
    Fixed {
        position_length_units: Vec<f64>,
    },
    Linear {
        start_length_units: Vec<f64>,
        velocity_length_per_time_units: Vec<f64>,
    },
    Sinusoid {
        offset_length_units: Vec<f64>,
        amplitude_length_units: Vec<f64>,
        omega_inverse_time_units: f64,
        #[serde(default)]
        phase_radians: f64,
    },
}

impl TrajectoryConfig {
    pub fn build(&self) -> Result<Trajectory> {
        Ok(match self {
            TrajectoryConfig::Fixed { position_length_units } => Trajectory::Fixed(point(position_length_units)?),
            TrajectoryConfig::Linear {
                start_length_units,
                velocity_length_per_time_units,
            } => Trajectory::Linear {
                start: point(start_length_units)?,
                velocity: point(velocity_length_per_time_units)?,
            },
            TrajectoryConfig::Sinusoid {
                offset_length_units,
                amplitude_length_units,
                omega_inverse_time_units,
                phase_radians,
            } => Trajectory::Sinusoid {
                offset: point(offset_length_units)?,
                amplitude: point(amplitude_length_units)?,
                omega: *omega_inverse_time_units,
                phase: *phase_radians,
            },
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum WallConfig {
    Plateau {
        center_length_units: f64,
        half_width_length_units: f64,
        ramp_length_units: f64,
    },
    Exponential {
        center_length_units: f64,
        thickness_length_units: f64,
    },
}

impl WallConfig {
    pub fn build(&self) -> WallProfile {
        match *self {
            WallConfig::Plateau {
                center_length_units,
                half_width_length_units,
                ramp_length_units,
            } => WallProfile::Plateau {
                center: center_length_units,
                half_width: half_width_length_units,
                ramp: ramp_length_units,
            },
            WallConfig::Exponential {
                center_length_units,
                thickness_length_units,
            } => WallProfile::Exponential {
                center: center_length_units,
                thickness: thickness_length_units,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultislitParams {
    pub holes_length_units: Vec<f64>,
    pub hole_width_length_units: f64,
    pub strength: f64,
    pub wall: WallConfig,
    #[serde(default)]
    pub subtract_offset: bool,
}

impl MultislitParams {
    pub fn build(&self) -> Result<MultislitWeight> {
        let mut m = MultislitWeight::new(
            self.holes_length_units.clone(),
            self.hole_width_length_units,
            self.strength,
            self.wall.build(),
        )?;
        m.subtract_offset = self.subtract_offset;
        Ok(m)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "key", content = "params", deny_unknown_fields)]
pub enum WeightConfig {
    Zero,
    Constant {
        value_inverse_time_units: f64,
    },
    Corridor {
        trajectories: Vec<TrajectoryConfig>,
        resolution_length_units: f64,
    },
    Ball {
        centers_length_units: Vec<Vec<f64>>,
        radii_length_units: Vec<f64>,
        #[serde(default = "one")]
        strength: f64,
    },
    Bump {
        center_length_units: Vec<f64>,
        inner_radius_length_units: f64,
        outer_radius_length_units: f64,
        strength: f64,
    },
    Multislit(MultislitParams),
}

impl WeightConfig {
    pub fn key(&self) -> &'static str {
        match self {
            WeightConfig::Zero => "zero",
            WeightConfig::Constant { .. } => "constant",
            WeightConfig::Corridor { .. } => "corridor",
            WeightConfig::Ball { .. } => "ball",
            WeightConfig::Bump { .. } => "bump",
            WeightConfig::Multislit(_) => "multislit",
        }
    }

    /// Builds the weight for `l` components; sampled shifts use `grid`.
    pub fn build(&self, l: usize, grid: &Grid, t_max: f64) -> Result<WeightSpec> {
        let w = match self {
            WeightConfig::Zero => weights::zero(l),
            WeightConfig::Constant {
                value_inverse_time_units,
            } => weights::constant(l, *value_inverse_time_units),
            WeightConfig::Corridor {
                trajectories,
                resolution_length_units,
            } => {
                let trajs = trajectories
                    .iter()
                    .map(TrajectoryConfig::build)
                    .collect::<Result<Vec<_>>>()?;
                weights::corridor(trajs, *resolution_length_units, t_max)?
            }
            WeightConfig::Ball {
                centers_length_units,
                radii_length_units,
                strength,
            } => {
                let centers = centers_length_units
                    .iter()
                    .map(|c| point(c))
                    .collect::<Result<Vec<_>>>()?;
                weights::ball(centers, radii_length_units.clone(), *strength, grid)?
            }
            WeightConfig::Bump {
                center_length_units,
                inner_radius_length_units,
                outer_radius_length_units,
                strength,
            } => weights::bump(
                point(center_length_units)?,
                *inner_radius_length_units,
                *outer_radius_length_units,
                *strength,
            )?,
            WeightConfig::Multislit(m) => m.build()?.spec(grid)?,
        };
        if w.l != l {
            return Err(Error::Config(format!(
                "weight '{}' has {} components but spin_components = {l}",
                self.key(),
                w.l
            )));
        }
        Ok(w)
    }
}

/// A complex number as [re, im].
pub type ComplexPair = [f64; 2];

fn c64(z: &ComplexPair) -> C64 {
    C64::new(z[0], z[1])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "key", content = "params", deny_unknown_fields)]
#[derive(Default)]
pub enum SpinTermConfig {
    #[default]
    None,
    /// Constant Hermitian matrix, rows of [re, im] pairs.
    Constant { matrix_energy_units: Vec<Vec<ComplexPair>> },
}

impl SpinTermConfig {
    pub fn build(&self, l: usize) -> Result<SpinTerm> {
        match self {
            SpinTermConfig::None => Ok(SpinTerm::none(l)),
            SpinTermConfig::Constant { matrix_energy_units } => {
                if matrix_energy_units.len() != l || matrix_energy_units.iter().any(|r| r.len() != l) {
                    return Err(Error::Config(format!("spin term matrix must be {l}×{l}")));
                }
                let m = CMat::from_fn(l, l, |i, j| c64(&matrix_energy_units[i][j]));
                crate::linalg::check_hermitian(&m, 1e-12)?;
                Ok(SpinTerm::constant(m))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PacketConfig {
    pub center_length_units: Vec<f64>,
    #[serde(default)]
    pub momentum_hbar_per_length_units: Vec<f64>,
    pub width_length_units: f64,
    #[serde(default)]
    pub component_weights: Vec<ComplexPair>,
    /// Relative complex amplitude when several packets are superposed.
    #[serde(default = "unit_amplitude")]
    pub amplitude: ComplexPair,
}

fn unit_amplitude() -> ComplexPair {
    [1.0, 0.0]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeConfig {
    pub t_final_time_units: f64,
    pub dt_time_units: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum TauChoice {
    Uniform,
    Jitter { amplitude: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KappaChoice {
    Left,
    Right,
    Midpoint,
    Random,
}

impl TauChoice {
    pub fn scheme(self, seed: u64) -> TauScheme {
        match self {
            TauChoice::Uniform => TauScheme::Uniform,
            TauChoice::Jitter { amplitude } => TauScheme::Jitter { seed, amplitude },
        }
    }
}

impl KappaChoice {
    pub fn scheme(self, seed: u64) -> KappaScheme {
        match self {
            KappaChoice::Left => KappaScheme::Left,
            KappaChoice::Right => KappaScheme::Right,
            KappaChoice::Midpoint => KappaScheme::Midpoint,
            KappaChoice::Random => KappaScheme::Random { seed },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorridorOptions {
    /// Slices of the interleaved product compared against the direct run.
    pub product_slices: usize,
    /// Survival region: ball of this radius around the first trajectory.
    pub survival_radius_length_units: f64,
}

impl Default for CorridorOptions {
    fn default() -> Self {
        CorridorOptions {
            product_slices: 64,
            survival_radius_length_units: 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MultislitOptions {
    pub screen_position_length_units: f64,
    /// Visibility is measured on |x'| ≤ this half-width.
    pub central_window_length_units: f64,
    /// Mask multipliers n in n·W.
    pub strength_scales: Vec<f64>,
    /// Also run with only the first hole.
    pub compare_single_slit: bool,
}

impl Default for MultislitOptions {
    fn default() -> Self {
        MultislitOptions {
            screen_position_length_units: 6.0,
            central_window_length_units: 1.0,
            strength_scales: vec![1.0],
            compare_single_slit: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ZenoOptions {
    pub strengths: Vec<f64>,
    pub product_slices: usize,
}

impl Default for ZenoOptions {
    fn default() -> Self {
        ZenoOptions {
            strengths: vec![1.0, 10.0, 100.0],
            product_slices: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AharonovBohmOptions {
    pub flux_values_flux_units: Vec<f64>,
    /// The screen is the line x₁ = this value.
    pub screen_position_length_units: f64,
    /// Profile pairs whose fluxes differ by a nonzero multiple of 2πħ/𝔮
    /// must agree within this L² distance.
    pub periodicity_tolerance: f64,
    /// Direction (radians) of the ray from the solenoid along which the
    /// initial gauge phase e^{i𝔮αθ/2πħ} jumps. The packets must avoid it.
    pub gauge_cut_angle: f64,
}

impl Default for AharonovBohmOptions {
    fn default() -> Self {
        AharonovBohmOptions {
            flux_values_flux_units: vec![0.0, std::f64::consts::PI, 3.0 * std::f64::consts::PI],
            screen_position_length_units: 6.0,
            periodicity_tolerance: 1e-4,
            gauge_cut_angle: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConvergenceOptions {
    pub nus: Vec<usize>,
    pub tau_scheme: TauChoice,
    pub kappa_scheme: KappaChoice,
    pub omega: Option<OmegaSchedule>,
    pub with_b1: bool,
    pub minimum_order: f64,
    /// ν values (coarse, fine) for the κ-scheme comparison; skipped if None.
    pub kappa_comparison: Option<[usize; 2]>,
}

impl Default for ConvergenceOptions {
    fn default() -> Self {
        ConvergenceOptions {
            nus: vec![8, 16, 32, 64, 128],
            tau_scheme: TauChoice::Uniform,
            kappa_scheme: KappaChoice::Left,
            omega: None,
            with_b1: false,
            minimum_order: 0.9,
            kappa_comparison: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleOptions {
    pub nus: Vec<usize>,
    pub kernel: SliceKernelConfig,
    /// Errors at or below this count as agreement regardless of trend.
    pub tolerance: f64,
}

impl Default for OracleOptions {
    fn default() -> Self {
        OracleOptions {
            nus: vec![1, 2, 4],
            kernel: SliceKernelConfig::default(),
            tolerance: 2e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyOptions {
    /// Lattice points per axis for the sampled checks (doubled once for the
    /// stability comparison).
    pub lattice_points: usize,
    pub times_time_units: Vec<f64>,
    /// Additional weights checked alongside the main one.
    pub extra_weights: Vec<WeightConfig>,
    /// Allowed relative change of reported constants under lattice doubling.
    pub stability_tolerance: f64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            lattice_points: 64,
            times_time_units: vec![0.0],
            extra_weights: Vec::new(),
            stability_tolerance: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub scenario: ScenarioKind,
    pub grid: GridConfig,
    #[serde(default)]
    pub constants: Constants,
    #[serde(default = "free_potential")]
    pub potential: PotentialConfig,
    #[serde(default = "one_component")]
    pub spin_components: usize,
    #[serde(default)]
    pub spin_term: SpinTermConfig,
    #[serde(default = "zero_weight")]
    pub weight: WeightConfig,
    pub initial: Vec<PacketConfig>,
    pub time: TimeConfig,
    #[serde(default = "default_backend")]
    pub backend: Backend,
    #[serde(default = "default_output")]
    pub output_dir: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub corridor: CorridorOptions,
    #[serde(default)]
    pub multislit: MultislitOptions,
    #[serde(default)]
    pub zeno: ZenoOptions,
    #[serde(default)]
    pub aharonov_bohm: AharonovBohmOptions,
    #[serde(default)]
    pub convergence: ConvergenceOptions,
    #[serde(default)]
    pub oracle: OracleOptions,
    #[serde(default)]
    pub verify: VerifyOptions,
}

fn free_potential() -> PotentialConfig {
    PotentialConfig::Free
}

fn one_component() -> usize {
    1
}

fn zero_weight() -> WeightConfig {
    WeightConfig::Zero
}

fn default_backend() -> Backend {
    Backend::SpectralStrang
}

fn default_output() -> String {
    "out".into()
}

/// Parses a VALUE from `KEY=VALUE`: JSON if it parses, otherwise a string.
fn parse_override_value(s: &str) -> Value {
    serde_json::from_str(s).unwrap_or_else(|_| Value::String(s.to_string()))
}

/// Sets `path` (dot-separated; numeric segments index arrays) in `doc`,
/// creating intermediate objects as needed.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{assignment}' is not KEY=VALUE")))?;
    let value = parse_override_value(raw);
    let mut cur = doc;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(Error::Config(format!("override path '{path}' has an empty segment")));
        }
        let last = i + 1 == parts.len();
        cur = match cur {
            Value::Array(items) => {
                let idx: usize = part
                    .parse()
                    .map_err(|_| Error::Config(format!("override path '{path}': '{part}' is not an array index")))?;
                let len = items.len();
                items
                    .get_mut(idx)
                    .ok_or_else(|| Error::Config(format!("override path '{path}': index {idx} out of range ({len})")))?
            }
            Value::Object(map) => {
                if last {
                    map.insert(part.to_string(), Value::Null);
                }
                map.entry(part.to_string())
                    .or_insert_with(|| Value::Object(Default::default()))
            }
            _ => {
                return Err(Error::Config(format!(
                    "override path '{path}': '{part}' is inside a scalar"
                )))
            }
        };
    }
    *cur = value;
    Ok(())
}

impl ScenarioConfig {
    /// Parses JSON text, applies overrides and validates.
    pub fn from_json_str(text: &str, overrides: &[String]) -> Result<Self> {
        let located = |prefix: &str, e: serde_json::Error| {
            Error::Config(format!("{prefix}line {} column {}: {e}", e.line(), e.column()))
        };
        let cfg: ScenarioConfig = if overrides.is_empty() {
            serde_json::from_str(text).map_err(|e| located("", e))?
        } else {
            let mut doc: Value = serde_json::from_str(text).map_err(|e| located("", e))?;
            for o in overrides {
                apply_override(&mut doc, o)?;
            }
            // Re-serialize so errors still carry line/column positions.
            let text = serde_json::to_string_pretty(&doc).map_err(|e| Error::Config(e.to_string()))?;
            serde_json::from_str(&text).map_err(|e| located("after overrides, ", e))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json_str(&text, overrides)
    }

    pub fn dim(&self) -> usize {
        self.grid.extent_length_units.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let d = self.dim();
        if d == 0 || d > MAX_DIM {
            return bad(format!("grid.extent_length_units must have 1 or {MAX_DIM} entries"));
        }
        if self.grid.points_per_axis.len() != d {
            return bad("grid.points_per_axis must match grid.extent_length_units".into());
        }
        for (i, (e, n)) in self
            .grid
            .extent_length_units
            .iter()
            .zip(&self.grid.points_per_axis)
            .enumerate()
        {
            if !(e[0] < e[1]) || !e[0].is_finite() || !e[1].is_finite() {
                return bad(format!(
                    "grid.extent_length_units.{i} must be an increasing finite pair"
                ));
            }
            if *n < 4 {
                return bad(format!("grid.points_per_axis.{i} must be at least 4"));
            }
        }
        if self.spin_components == 0 {
            return bad("spin_components must be at least 1".into());
        }
        let c = &self.constants;
        for (name, v) in [
            ("constants.mass_mass_units", c.mass_mass_units),
            ("constants.hbar_action_units", c.hbar_action_units),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive"));
            }
        }
        if !(c.charge_charge_units.is_finite() && c.charge_charge_units != 0.0) {
            return bad("constants.charge_charge_units must be finite and nonzero".into());
        }
        if !(self.time.t_final_time_units > 0.0) {
            return bad("time.t_final_time_units must be positive".into());
        }
        if !(self.time.dt_time_units > 0.0 && self.time.dt_time_units <= self.time.t_final_time_units) {
            return bad("time.dt_time_units must lie in (0, t_final_time_units]".into());
        }
        if self.initial.is_empty() {
            return bad("initial must list at least one packet".into());
        }
        for (i, pk) in self.initial.iter().enumerate() {
            if pk.center_length_units.len() != d {
                return bad(format!("initial.{i}.center_length_units must have {d} entries"));
            }
            if !pk.momentum_hbar_per_length_units.is_empty() && pk.momentum_hbar_per_length_units.len() != d {
                return bad(format!(
                    "initial.{i}.momentum_hbar_per_length_units must have {d} entries"
                ));
            }
            if !(pk.width_length_units > 0.0) {
                return bad(format!("initial.{i}.width_length_units must be positive"));
            }
            if !pk.component_weights.is_empty() && pk.component_weights.len() != self.spin_components {
                return bad(format!(
                    "initial.{i}.component_weights must have spin_components entries"
                ));
            }
        }
        match self.scenario {
            ScenarioKind::Corridor => {
                if !matches!(self.weight, WeightConfig::Corridor { .. } | WeightConfig::Zero) {
                    return bad("corridor scenario needs weight.key = corridor (or zero)".into());
                }
                if self.corridor.product_slices == 0 {
                    return bad("corridor.product_slices must be positive".into());
                }
            }
            ScenarioKind::Multislit => {
                if d != 2 {
                    return bad("multislit needs a 2D grid".into());
                }
                if !matches!(self.weight, WeightConfig::Multislit(_)) {
                    return bad("multislit scenario needs weight.key = multislit".into());
                }
                if self.multislit.strength_scales.iter().any(|s| !(*s >= 0.0)) {
                    return bad("multislit.strength_scales must be nonnegative".into());
                }
            }
            ScenarioKind::Zeno => {
                if !matches!(self.weight, WeightConfig::Ball { .. }) {
                    return bad("zeno scenario needs weight.key = ball".into());
                }
                if self.zeno.strengths.iter().any(|s| !(*s >= 0.0)) || self.zeno.product_slices == 0 {
                    return bad("zeno.strengths must be nonnegative and product_slices positive".into());
                }
            }
            ScenarioKind::AharonovBohm => {
                if d != 2 {
                    return bad("aharonov_bohm needs a 2D grid".into());
                }
                if !matches!(self.potential, PotentialConfig::Solenoid { .. }) {
                    return bad("aharonov_bohm needs potential.key = solenoid".into());
                }
                if self.aharonov_bohm.flux_values_flux_units.is_empty() {
                    return bad("aharonov_bohm.flux_values_flux_units must not be empty".into());
                }
            }
            ScenarioKind::Convergence => {
                let nus = &self.convergence.nus;
                if nus.len() < 2 || nus.windows(2).any(|w| w[0] >= w[1]) || nus[0] == 0 {
                    return bad("convergence.nus must be at least two increasing positive values".into());
                }
                if let Some(OmegaSchedule::Power { sigma, .. }) = self.convergence.omega {
                    if !(sigma > 0.0) {
                        return bad("convergence.omega.sigma must be positive".into());
                    }
                }
            }
            ScenarioKind::OracleCompare => {
                if d != 1 {
                    return bad("oracle_compare needs a 1D grid".into());
                }
                let nus = &self.oracle.nus;
                if nus.is_empty() || nus.iter().any(|&n| n == 0 || n > crate::path_oracle::MAX_SLICES) {
                    return bad(format!("oracle.nus must lie in 1..={}", crate::path_oracle::MAX_SLICES));
                }
                if self.grid.points_per_axis[0] > crate::path_oracle::MAX_POINTS {
                    return bad(format!(
                        "oracle_compare allows at most {} points",
                        crate::path_oracle::MAX_POINTS
                    ));
                }
            }
            ScenarioKind::VerifyWeights => {
                if self.verify.lattice_points < 4 || self.verify.times_time_units.is_empty() {
                    return bad("verify.lattice_points must be ≥ 4 and verify.times_time_units nonempty".into());
                }
            }
        }
        Ok(())
    }

    pub fn build_grid(&self) -> Result<Grid> {
        self.grid.build()
    }

    pub fn build_potential(&self) -> Result<Potential> {
        self.potential.build(self.dim(), &self.constants)
    }

    pub fn build_spin_term(&self) -> Result<SpinTerm> {
        self.spin_term.build(self.spin_components)
    }

    pub fn build_weight(&self, grid: &Grid) -> Result<WeightSpec> {
        self.weight
            .build(self.spin_components, grid, self.time.t_final_time_units)
    }

    /// Superposition of the configured packets, normalized to unit norm.
    /// Returns the field and whether any packet was flagged as too wide.
    pub fn build_initial(&self, grid: &Grid) -> Result<(SpinorField, bool)> {
        let l = self.spin_components;
        let d = self.dim();
        let mut total = SpinorField::zeros(grid, l);
        let mut wide = false;
        for pk in &self.initial {
            let weights: Vec<C64> = if pk.component_weights.is_empty() {
                (0..l).map(|c| C64::new(if c == 0 { 1.0 } else { 0.0 }, 0.0)).collect()
            } else {
                pk.component_weights.iter().map(c64).collect()
            };
            let momentum = if pk.momentum_hbar_per_length_units.is_empty() {
                vec![0.0; d]
            } else {
                pk.momentum_hbar_per_length_units.clone()
            };
            let g = gaussian_packet(
                grid,
                l,
                &pk.center_length_units,
                &momentum,
                pk.width_length_units,
                &weights,
                self.constants.hbar_action_units,
            )?;
            wide |= g.wide_warning;
            let amp = c64(&pk.amplitude);
            for (t, v) in total.data_mut().iter_mut().zip(g.field.data()) {
                *t += amp * v;
            }
        }
        let n = crate::grid::l2_norm(&total);
        if !(n > 0.0) {
            return Err(Error::Config("initial packets cancel to a zero field".into()));
        }
        Ok((total.scaled(C64::new(1.0 / n, 0.0)), wide))
    }

    /// The fully resolved configuration as JSON.
    pub fn resolved(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }
}
