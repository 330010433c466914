//! Pipeline configuration read from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::angular::AngularGrid;
use crate::diffraction::{MoleculeGeometry, Probe, ScatteringGeometry};
use crate::error::{Error, Result};
use crate::inversion::{log_lambda_grid, LCurveOptions, NoiseModel};
use crate::iterative::QtConfig;
use crate::mblock::default_time_samples;
use crate::rotor::{LaserPulse, RotorSpec};
use crate::vibrational::{OscillatorBasis, VibQtConfig, WAVENUMBER_TO_RAD_PER_FS};

/// Environment variable naming the root under which relative output
/// directories are placed.
pub const OUTPUT_ROOT_ENV: &str = "QTUED_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MoleculeConfig {
    pub element: String,
    pub bond_length_angstrom: f64,
    pub rotational_constant_cm: f64,
    pub alpha_parallel_angstrom3: f64,
    pub alpha_perp_angstrom3: f64,
    pub spin_weights: [f64; 2],
}

impl Default for MoleculeConfig {
    fn default() -> Self {
        MoleculeConfig {
            element: "N".into(),
            bond_length_angstrom: 1.0977,
            rotational_constant_cm: 1.98958,
            alpha_parallel_angstrom3: 2.38,
            alpha_perp_angstrom3: 1.45,
            spin_weights: [6.0, 3.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RotorConfig {
    pub temperature_k: f64,
    pub j_max: usize,
    pub max_thermal_tail: f64,
}

impl Default for RotorConfig {
    fn default() -> Self {
        RotorConfig {
            temperature_k: 30.0,
            j_max: 8,
            max_thermal_tail: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PulseConfig {
    pub fwhm_fs: f64,
    pub peak_intensity_w_cm2: f64,
    /// Integration intervals across the pulse support.
    pub time_intervals: usize,
}

impl Default for PulseConfig {
    fn default() -> Self {
        PulseConfig {
            fwhm_fs: 50.0,
            peak_intensity_w_cm2: 1e13,
            time_intervals: 400,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub kind: Probe,
    pub energy_kev: f64,
    /// Pixels per side of the flat square detector.
    pub detector_pixels: usize,
    pub s_max_inv_angstrom: f64,
    /// Pixel indices excluded from the inversion.
    pub masked_pixels: Vec<usize>,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            kind: Probe::Xray,
            energy_kev: 20.0,
            detector_pixels: 32,
            s_max_inv_angstrom: 4.5,
            masked_pixels: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    /// Grid of the forward kernel and the recovered distribution.
    pub kernel_n_theta: usize,
    pub kernel_n_phi: usize,
    /// Grid of the tomography stage.
    pub qt_n_theta: usize,
    /// `0` selects the minimal compliant count for `j_max`.
    pub time_samples: usize,
    pub start_ps: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            kernel_n_theta: 40,
            kernel_n_phi: 40,
            qt_n_theta: 32,
            time_samples: 145,
            start_ps: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    /// Expected counts per frame; absent for noiseless frames.
    pub counts_per_frame: Option<f64>,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig { counts_per_frame: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaPolicy {
    Fixed,
    #[serde(rename = "lcurve")]
    LCurve,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegularizationConfig {
    pub policy: LambdaPolicy,
    pub lambda: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub lambda_points: usize,
    pub relative_noise: f64,
    pub trials: usize,
    /// Frame used for the L-curve scan.
    pub scan_frame: usize,
}

impl Default for RegularizationConfig {
    fn default() -> Self {
        RegularizationConfig {
            policy: LambdaPolicy::LCurve,
            lambda: 1e4,
            lambda_min: 1e-2,
            lambda_max: 1e8,
            lambda_points: 41,
            relative_noise: 1e-2,
            trials: 8,
            scan_frame: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialGuess {
    /// Thermal populations on the diagonal (rotational only).
    Thermal,
    /// Maximally mixed state.
    Mixed,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QtRotConfig {
    pub max_iterations: usize,
    pub plateau_tolerance: f64,
    pub plateau_window: usize,
    pub divergence_factor: f64,
    pub hio_beta: f64,
    pub thermal_partial_traces: bool,
    pub initial_guess: InitialGuess,
    pub enforce_resolution: bool,
    /// Report errors against previous iterates even when ground truth exists.
    pub experiment_mode: bool,
}

impl Default for QtRotConfig {
    fn default() -> Self {
        let q = QtConfig::default();
        QtRotConfig {
            max_iterations: q.max_iterations,
            plateau_tolerance: q.plateau_tolerance,
            plateau_window: q.plateau_window,
            divergence_factor: q.divergence_factor,
            hio_beta: q.constraints.hio_beta,
            thermal_partial_traces: true,
            initial_guess: InitialGuess::Thermal,
            enforce_resolution: true,
            experiment_mode: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VibrationalConfig {
    pub base_frequency_cm: f64,
    pub ratios: Vec<u32>,
    pub masses_amu: Vec<f64>,
    pub n_max: usize,
    pub grid_half_width: f64,
    pub grid_points: usize,
    /// `0` selects the minimal compliant count.
    pub time_samples: usize,
    /// Rank and seed of the simulated state.
    pub state_rank: usize,
    pub state_seed: u64,
    pub max_iterations: usize,
    pub initial_guess: InitialGuess,
    pub enforce_resolution: bool,
    pub experiment_mode: bool,
}

impl Default for VibrationalConfig {
    fn default() -> Self {
        VibrationalConfig {
            base_frequency_cm: 1209.8,
            ratios: vec![1, 3],
            masses_amu: vec![12.0, 12.0],
            n_max: 2,
            grid_half_width: 7.5,
            grid_points: 64,
            time_samples: 0,
            state_rank: 3,
            state_seed: 0,
            max_iterations: 10,
            initial_guess: InitialGuess::Random,
            enforce_resolution: true,
            experiment_mode: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SystemKind {
    #[default]
    Rotational,
    Vibrational,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub system: SystemKind,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub molecule: MoleculeConfig,
    pub rotor: RotorConfig,
    pub pulse: PulseConfig,
    pub probe: ProbeConfig,
    pub grid: GridConfig,
    pub noise: NoiseConfig,
    pub regularization: RegularizationConfig,
    pub qt: QtRotConfig,
    pub vibrational: VibrationalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            system: SystemKind::Rotational,
            seed: 0,
            output_dir: PathBuf::from("run"),
            molecule: MoleculeConfig::default(),
            rotor: RotorConfig::default(),
            pulse: PulseConfig::default(),
            probe: ProbeConfig::default(),
            grid: GridConfig::default(),
            noise: NoiseConfig::default(),
            regularization: RegularizationConfig::default(),
            qt: QtRotConfig::default(),
            vibrational: VibrationalConfig::default(),
        }
    }
}

fn field_error(path: &str, message: impl Into<String>) -> Error {
    Error::Validation {
        path: path.into(),
        message: message.into(),
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| field_error("<root>", e.to_string()))?;
        let cfg: PipelineConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            field_error(&path, e.into_inner().message().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64, p: &str| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(field_error(p, format!("must be positive, got {v}")))
            }
        };
        pos(self.molecule.bond_length_angstrom, "molecule.bond_length_angstrom")?;
        pos(self.molecule.rotational_constant_cm, "molecule.rotational_constant_cm")?;
        pos(self.probe.energy_kev, "probe.energy_kev")?;
        pos(self.probe.s_max_inv_angstrom, "probe.s_max_inv_angstrom")?;
        if self.pulse.peak_intensity_w_cm2 < 0.0 {
            return Err(field_error("pulse.peak_intensity_w_cm2", "must be non-negative"));
        }
        pos(self.pulse.fwhm_fs, "pulse.fwhm_fs")?;
        if !(self.rotor.temperature_k >= 0.0) {
            return Err(field_error("rotor.temperature_k", "must be non-negative"));
        }
        if self.rotor.j_max == 0 {
            return Err(field_error("rotor.j_max", "must be at least 1"));
        }
        if let Some(c) = self.noise.counts_per_frame {
            pos(c, "noise.counts_per_frame")?;
        }
        let r = &self.regularization;
        if r.policy == LambdaPolicy::LCurve
            && (r.lambda_points < 10 || !(r.lambda_min > 0.0) || r.lambda_max <= r.lambda_min)
        {
            return Err(field_error(
                "regularization",
                "L-curve needs >= 10 points on 0 < lambda_min < lambda_max",
            ));
        }
        if r.policy == LambdaPolicy::Fixed && r.lambda < 0.0 {
            return Err(field_error("regularization.lambda", "must be non-negative"));
        }
        if !(self.qt.hio_beta > 0.0 && self.qt.hio_beta <= 1.0) {
            return Err(field_error("qt.hio_beta", "outside (0, 1]"));
        }
        let v = &self.vibrational;
        if v.ratios.len() != v.masses_amu.len() {
            return Err(field_error("vibrational.masses_amu", "one mass per frequency ratio"));
        }
        Ok(())
    }

    /// Output directory, placed under the environment root when relative.
    pub fn resolved_output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if self.output_dir.is_relative() => PathBuf::from(root).join(&self.output_dir),
            _ => self.output_dir.clone(),
        }
    }

    pub fn rotor_spec(&self) -> Result<RotorSpec> {
        let m = &self.molecule;
        RotorSpec::from_wavenumber(
            m.rotational_constant_cm,
            m.alpha_parallel_angstrom3,
            m.alpha_perp_angstrom3,
            (m.spin_weights[0], m.spin_weights[1]),
            self.rotor.temperature_k,
        )
    }

    pub fn pulse(&self) -> LaserPulse {
        LaserPulse::new(self.pulse.fwhm_fs, self.pulse.peak_intensity_w_cm2)
    }

    pub fn molecule(&self) -> Result<MoleculeGeometry> {
        MoleculeGeometry::diatomic(&self.molecule.element, self.molecule.bond_length_angstrom)
    }

    pub fn scattering_geometry(&self) -> Result<ScatteringGeometry> {
        let p = &self.probe;
        ScatteringGeometry::flat_square(p.kind, p.energy_kev, p.detector_pixels, p.s_max_inv_angstrom)
    }

    pub fn kernel_grid(&self) -> Result<AngularGrid> {
        AngularGrid::gauss_legendre(self.grid.kernel_n_theta, self.grid.kernel_n_phi)
    }

    pub fn qt_grid(&self) -> Result<AngularGrid> {
        AngularGrid::gauss_legendre(self.grid.qt_n_theta, 1)
    }

    pub fn time_samples(&self) -> usize {
        if self.grid.time_samples == 0 {
            default_time_samples(self.rotor.j_max)
        } else {
            self.grid.time_samples
        }
    }

    pub fn lambda_grid(&self) -> Result<Vec<f64>> {
        let r = &self.regularization;
        log_lambda_grid(r.lambda_min, r.lambda_max, r.lambda_points)
    }

    pub fn lcurve_options(&self) -> LCurveOptions {
        LCurveOptions {
            noise: NoiseModel::Gaussian {
                relative: self.regularization.relative_noise,
            },
            trials: self.regularization.trials,
            seed: self.seed,
            ..Default::default()
        }
    }

    pub fn qt_config(&self) -> QtConfig {
        let mut c = QtConfig {
            j_max: self.rotor.j_max,
            max_iterations: self.qt.max_iterations,
            plateau_tolerance: self.qt.plateau_tolerance,
            plateau_window: self.qt.plateau_window,
            divergence_factor: self.qt.divergence_factor,
            ..Default::default()
        };
        c.constraints.hio_beta = self.qt.hio_beta;
        c.inversion.enforce_resolution = self.qt.enforce_resolution;
        c
    }

    pub fn oscillator_basis(&self) -> Result<OscillatorBasis> {
        let v = &self.vibrational;
        let b = OscillatorBasis {
            base_frequency: v.base_frequency_cm * WAVENUMBER_TO_RAD_PER_FS,
            ratios: v.ratios.clone(),
            masses: v.masses_amu.clone(),
            n_max: v.n_max,
            grid: OscillatorBasis::uniform_grid(v.grid_half_width, v.grid_points),
            enforce_resolution: v.enforce_resolution,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn vib_time_samples(&self, basis: &OscillatorBasis) -> usize {
        if self.vibrational.time_samples == 0 {
            basis.default_time_samples()
        } else {
            self.vibrational.time_samples
        }
    }

    pub fn vib_qt_config(&self) -> VibQtConfig {
        VibQtConfig {
            max_iterations: self.vibrational.max_iterations,
            ..Default::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_benchmark() {
        let c = PipelineConfig::from_toml("").unwrap();
        assert_eq!(c, PipelineConfig::default());
        assert_eq!(PipelineConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn unknown_field_reports_path() {
        let err = PipelineConfig::from_toml("[rotor]\ntemperature = 30.0\n").unwrap_err();
        match err {
            Error::Validation { path, .. } => assert!(path.starts_with("rotor"), "{path}"),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn bad_value_reports_path() {
        let err = PipelineConfig::from_toml("[probe]\nenergy_kev = -1.0\n").unwrap_err();
        assert!(matches!(err, Error::Validation { ref path, .. } if path == "probe.energy_kev"));
    }
}
