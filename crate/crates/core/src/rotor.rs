//! Linear rigid rotor: thermal ensembles, impulsive laser alignment and the
//! time-dependent orientation probability.
//!
//! Internal units: ħ = 1, time in ps, energies as angular frequencies in
//! rad/ps. Constructors take spectroscopic inputs and convert once.

use std::f64::consts::PI;

use log::debug;
use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::angular::{coupling_coefficient, evaluate_legendre_on, AngularGrid};
use crate::error::{Error, Result};

/// Speed of light in cm/ps.
pub const LIGHT_SPEED_CM_PER_PS: f64 = 0.029_979_245_8;
/// Boltzmann constant over ħ, rad/ps per kelvin.
pub const BOLTZMANN_RAD_PER_PS_K: f64 = 0.130_920_3;
/// Polarizability volume conversion Å³ → atomic units.
pub const ANGSTROM3_TO_AU: f64 = 6.748_334;
/// Hartree energy as an angular frequency in rad/ps.
pub const HARTREE_RAD_PER_PS: f64 = 4.134_137e4;
/// Peak intensity in W/cm² corresponding to a unit field amplitude squared (a.u.).
pub const AU_INTENSITY_W_CM2: f64 = 3.509_447_58e16;
/// Rotational constant (cm⁻¹) times moment of inertia (amu·Å²).
pub const ROTATIONAL_CONSTANT_TIMES_INERTIA: f64 = 16.857_629;

/// Default acceptable thermal mass beyond the basis cutoff.
pub const DEFAULT_MAX_TAIL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RotorSpec {
    /// Rotational constant `B = 1/(2𝓘)` in rad/ps.
    pub rotational_constant: f64,
    /// Centrifugal distortion `D` in rad/ps (`E_J = BJ(J+1) - DJ²(J+1)²`).
    pub centrifugal_distortion: f64,
    /// Polarizability volume along the axis, Å³.
    pub alpha_parallel: f64,
    /// Polarizability volume perpendicular to the axis, Å³.
    pub alpha_perp: f64,
    pub spin_weight_even: f64,
    pub spin_weight_odd: f64,
    /// Kelvin.
    pub temperature: f64,
}

impl RotorSpec {
    /// Builds a spec from a rotational constant given in cm⁻¹.
    pub fn from_wavenumber(
        b_cm: f64,
        alpha_parallel: f64,
        alpha_perp: f64,
        spin_weights: (f64, f64),
        temperature: f64,
    ) -> Result<Self> {
        let spec = RotorSpec {
            rotational_constant: 2.0 * PI * LIGHT_SPEED_CM_PER_PS * b_cm,
            centrifugal_distortion: 0.0,
            alpha_parallel,
            alpha_perp,
            spin_weight_even: spin_weights.0,
            spin_weight_odd: spin_weights.1,
            temperature,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Builds a spec from a moment of inertia in amu·Å².
    pub fn from_inertia_amu_a2(
        inertia: f64,
        alpha_parallel: f64,
        alpha_perp: f64,
        spin_weights: (f64, f64),
        temperature: f64,
    ) -> Result<Self> {
        if inertia <= 0.0 {
            return Err(Error::InvalidArgument("moment of inertia must be positive".into()));
        }
        Self::from_wavenumber(
            ROTATIONAL_CONSTANT_TIMES_INERTIA / inertia,
            alpha_parallel,
            alpha_perp,
            spin_weights,
            temperature,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rotational_constant > 0.0) || !self.rotational_constant.is_finite() {
            return Err(Error::InvalidArgument("rotational constant must be positive".into()));
        }
        if !(self.temperature >= 0.0) {
            return Err(Error::InvalidArgument("temperature must be nonnegative".into()));
        }
        if !(self.spin_weight_even >= 0.0 && self.spin_weight_odd >= 0.0) {
            return Err(Error::InvalidArgument("spin weights must be nonnegative".into()));
        }
        if self.spin_weight_even == 0.0 && self.spin_weight_odd == 0.0 {
            return Err(Error::InvalidArgument("all spin weights are zero".into()));
        }
        Ok(())
    }

    /// Moment of inertia `𝓘 = 1/(2B)` in ps/rad (ħ = 1).
    pub fn inertia(&self) -> f64 {
        0.5 / self.rotational_constant
    }

    /// Revival period `T = 4π𝓘 = 2π/B`, ps.
    pub fn period(&self) -> f64 {
        4.0 * PI * self.inertia()
    }

    pub fn energy(&self, j: usize) -> f64 {
        let x = (j * (j + 1)) as f64;
        self.rotational_constant * x - self.centrifugal_distortion * x * x
    }

    pub fn spin_weight(&self, j: usize) -> f64 {
        if j % 2 == 0 {
            self.spin_weight_even
        } else {
            self.spin_weight_odd
        }
    }

    /// Anisotropic polarizability `α∥ - α⊥` in atomic units.
    pub fn delta_alpha_au(&self) -> f64 {
        (self.alpha_parallel - self.alpha_perp) * ANGSTROM3_TO_AU
    }
}

/// Gaussian alignment pulse polarized along lab z.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaserPulse {
    /// Intensity FWHM duration, fs.
    pub fwhm_duration: f64,
    /// W/cm².
    pub peak_intensity: f64,
    /// Time of the pulse peak, ps.
    #[serde(default)]
    pub center: f64,
}

impl LaserPulse {
    pub fn new(fwhm_fs: f64, peak_intensity: f64) -> Self {
        LaserPulse {
            fwhm_duration: fwhm_fs,
            peak_intensity,
            center: 0.0,
        }
    }

    fn fwhm_ps(&self) -> f64 {
        self.fwhm_duration * 1e-3
    }

    /// Normalized envelope of the field squared, 1 at the peak.
    pub fn envelope(&self, t: f64) -> f64 {
        let tau = self.fwhm_ps();
        if tau <= 0.0 {
            return 0.0;
        }
        let x = (t - self.center) / tau;
        (-4.0 * std::f64::consts::LN_2 * x * x).exp()
    }

    /// Field amplitude squared in atomic units at time `t`.
    pub fn field_squared(&self, t: f64) -> f64 {
        self.peak_intensity / AU_INTENSITY_W_CM2 * self.envelope(t)
    }

    /// Time window holding the pulse to below `1e-12` of its peak.
    pub fn support(&self) -> (f64, f64) {
        let half = 3.2 * self.fwhm_ps();
        (self.center - half, self.center + half)
    }

    /// Uniform propagation grid over [`Self::support`].
    pub fn default_time_grid(&self, intervals: usize) -> Vec<f64> {
        let (a, b) = self.support();
        let n = intervals.max(1);
        (0..=n).map(|i| a + (b - a) * i as f64 / n as f64).collect()
    }

    fn validate(&self) -> Result<()> {
        if !(self.peak_intensity >= 0.0) || !(self.fwhm_duration >= 0.0) {
            return Err(Error::InvalidArgument(
                "pulse intensity and duration must be nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// Thermal state weights `ω_J` per magnetic sublevel, normalized over the basis.
#[derive(Debug, Clone, PartialEq)]
pub struct ThermalWeights {
    pub weights: Vec<f64>,
    /// Mass beyond the cutoff before renormalization.
    pub tail: f64,
}

impl ThermalWeights {
    pub fn j_max(&self) -> usize {
        self.weights.len() - 1
    }

    /// Total weight of states with `J >= |m|` and the given parity of `J`.
    pub fn class_weight(&self, m: i32, parity: usize) -> f64 {
        let am = m.unsigned_abs() as usize;
        self.weights
            .iter()
            .enumerate()
            .filter(|(j, _)| *j >= am && j % 2 == parity)
            .map(|(_, w)| w)
            .sum()
    }
}

/// Per-sublevel Boltzmann weights with nuclear-spin statistics.
pub fn thermal_weights(spec: &RotorSpec, j_max: usize, max_tail: f64) -> Result<ThermalWeights> {
    spec.validate()?;
    if spec.temperature == 0.0 {
        let ground = if spec.spin_weight_even > 0.0 { 0 } else { 1 };
        if ground > j_max {
            return Err(Error::JMaxTooSmall {
                tail: 1.0,
                limit: max_tail,
            });
        }
        let mut w = vec![0.0; j_max + 1];
        w[ground] = 1.0;
        return Ok(ThermalWeights { weights: w, tail: 0.0 });
    }
    let kt = BOLTZMANN_RAD_PER_PS_K * spec.temperature;
    let e_ref = spec.energy(0);
    let boltz = |j: usize| spec.spin_weight(j) * (-(spec.energy(j) - e_ref) / kt).exp();
    let mut inside = 0.0;
    let mut w = Vec::with_capacity(j_max + 1);
    for j in 0..=j_max {
        let b = boltz(j);
        w.push(b);
        inside += b * (2 * j + 1) as f64;
    }
    let mut outside = 0.0;
    let mut j = j_max + 1;
    loop {
        let term = boltz(j) * (2 * j + 1) as f64;
        outside += term;
        if term < 1e-18 * (inside + outside) || j > j_max + 2000 {
            break;
        }
        j += 1;
    }
    let tail = outside / (inside + outside);
    if tail > max_tail {
        return Err(Error::JMaxTooSmall { tail, limit: max_tail });
    }
    for v in &mut w {
        *v /= inside;
    }
    Ok(ThermalWeights { weights: w, tail })
}

/// Block-diagonal rotational density matrix restricted to `Δm = 0`.
///
/// `blocks[m + j_max]` holds `⟨J1 m|ρ|J2 m⟩` for `J1, J2 = |m|..=j_max`.
#[derive(Debug, Clone, PartialEq)]
pub struct RotationalDensityMatrix {
    pub j_max: usize,
    pub blocks: Vec<DMatrix<Complex64>>,
    /// Time (ps) at which the matrix elements are given.
    pub reference_time: f64,
}

impl RotationalDensityMatrix {
    pub fn zeros(j_max: usize) -> Self {
        let blocks = (-(j_max as i32)..=(j_max as i32))
            .map(|m| {
                let n = j_max + 1 - m.unsigned_abs() as usize;
                DMatrix::zeros(n, n)
            })
            .collect();
        RotationalDensityMatrix {
            j_max,
            blocks,
            reference_time: 0.0,
        }
    }

    /// Diagonal state with `ω_J` on every sublevel `|J m⟩`.
    pub fn diagonal(weights: &[f64]) -> Self {
        let j_max = weights.len() - 1;
        let mut rho = Self::zeros(j_max);
        for m in rho.m_values() {
            let am = m.unsigned_abs() as usize;
            let b = rho.block_mut(m);
            for j in am..=j_max {
                b[(j - am, j - am)] = Complex64::new(weights[j], 0.0);
            }
        }
        rho
    }

    pub fn m_values(&self) -> std::ops::RangeInclusive<i32> {
        -(self.j_max as i32)..=(self.j_max as i32)
    }

    pub fn block(&self, m: i32) -> &DMatrix<Complex64> {
        &self.blocks[(m + self.j_max as i32) as usize]
    }

    pub fn block_mut(&mut self, m: i32) -> &mut DMatrix<Complex64> {
        &mut self.blocks[(m + self.j_max as i32) as usize]
    }

    /// `⟨J1 m|ρ|J2 m⟩`, zero outside the basis.
    pub fn element(&self, j1: usize, j2: usize, m: i32) -> Complex64 {
        let am = m.unsigned_abs() as usize;
        if j1 < am || j2 < am || j1 > self.j_max || j2 > self.j_max {
            return Complex64::new(0.0, 0.0);
        }
        self.block(m)[(j1 - am, j2 - am)]
    }

    pub fn trace(&self) -> Complex64 {
        self.blocks.iter().map(|b| b.trace()).sum()
    }

    /// Sum of `⟨J m|ρ|J m⟩` over `J` with the given parity.
    pub fn partial_trace(&self, m: i32, parity: usize) -> f64 {
        let am = m.unsigned_abs() as usize;
        let b = self.block(m);
        (am..=self.j_max)
            .filter(|j| j % 2 == parity)
            .map(|j| b[(j - am, j - am)].re)
            .sum()
    }

    pub fn hermiticity_error(&self) -> f64 {
        self.blocks
            .iter()
            .map(|b| (b - b.adjoint()).iter().map(|z| z.norm()).fold(0.0, f64::max))
            .fold(0.0, f64::max)
    }

    pub fn m_symmetry_error(&self) -> f64 {
        (1..=self.j_max as i32)
            .map(|m| {
                (self.block(m) - self.block(-m))
                    .iter()
                    .map(|z| z.norm())
                    .fold(0.0, f64::max)
            })
            .fold(0.0, f64::max)
    }

    /// Smallest eigenvalue over all blocks (of the Hermitian part).
    pub fn min_eigenvalue(&self) -> f64 {
        self.blocks
            .iter()
            .map(|b| {
                let h = (b + b.adjoint()) * Complex64::new(0.5, 0.0);
                h.symmetric_eigenvalues().iter().cloned().fold(f64::INFINITY, f64::min)
            })
            .fold(f64::INFINITY, f64::min)
    }

    /// Elementwise L1 norm over all blocks.
    pub fn l1_norm(&self) -> f64 {
        self.blocks.iter().flat_map(|b| b.iter()).map(|z| z.norm()).sum()
    }

    pub fn l1_distance(&self, other: &Self) -> f64 {
        self.blocks
            .iter()
            .zip(&other.blocks)
            .flat_map(|(a, b)| a.iter().zip(b.iter()))
            .map(|(x, y)| (x - y).norm())
            .sum()
    }

    /// Matrix elements evolved freely to time `t` (ps).
    pub fn at_time(&self, spec: &RotorSpec, t: f64) -> Self {
        let dt = t - self.reference_time;
        let mut out = self.clone();
        for m in self.m_values() {
            let am = m.unsigned_abs() as usize;
            let b = out.block_mut(m);
            for j1 in am..=self.j_max {
                for j2 in am..=self.j_max {
                    let w = spec.energy(j1) - spec.energy(j2);
                    b[(j1 - am, j2 - am)] *= Complex64::from_polar(1.0, -w * dt);
                }
            }
        }
        out.reference_time = t;
        out
    }

    /// Checks the physical invariants and reports the first violation.
    pub fn check(&self, herm_tol: f64, trace_tol: f64, psd_tol: f64) -> Result<()> {
        let h = self.hermiticity_error();
        if h > herm_tol {
            return Err(Error::Validation {
                path: "rho".into(),
                message: format!("not Hermitian ({h:.3e})"),
            });
        }
        let tr = self.trace();
        if (tr.re - 1.0).abs() > trace_tol || tr.im.abs() > trace_tol {
            return Err(Error::Validation {
                path: "rho".into(),
                message: format!("trace {tr} differs from 1"),
            });
        }
        let e = self.min_eigenvalue();
        if e < -psd_tol {
            return Err(Error::Validation {
                path: "rho".into(),
                message: format!("negative eigenvalue {e:.3e}"),
            });
        }
        Ok(())
    }
}

/// Thermal density matrix truncated at `j_max`, renormalized to unit trace.
pub fn thermal_density(spec: &RotorSpec, j_max: usize) -> Result<RotationalDensityMatrix> {
    thermal_density_with_tail(spec, j_max, DEFAULT_MAX_TAIL)
}

pub fn thermal_density_with_tail(spec: &RotorSpec, j_max: usize, max_tail: f64) -> Result<RotationalDensityMatrix> {
    let w = thermal_weights(spec, j_max, max_tail)?;
    Ok(RotationalDensityMatrix::diagonal(&w.weights))
}

/// `⟨J1 m|cos²θ|J2 m⟩`.
pub fn cos2theta_element(j1: usize, j2: usize, m: i32) -> f64 {
    let am = m.unsigned_abs() as usize;
    if am > j1.min(j2) || j1.abs_diff(j2) > 2 || j1.abs_diff(j2) == 1 {
        return 0.0;
    }
    let iso = if j1 == j2 { 1.0 / 3.0 } else { 0.0 };
    // cos²θ = 1/3 + (2/3)·√(2/5)·P̃_2^0
    iso + (2.0 / 3.0) * (0.4f64).sqrt() * coupling_coefficient(j1, j2, m, 2, 0)
}

/// `⟨cos²θ⟩` of a density matrix, by matrix trace.
pub fn expectation_cos2(rho: &RotationalDensityMatrix) -> f64 {
    let mut acc = 0.0;
    for m in rho.m_values() {
        let am = m.unsigned_abs() as usize;
        let b = rho.block(m);
        for j1 in am..=rho.j_max {
            for j2 in am..=rho.j_max {
                let c = cos2theta_element(j1, j2, m);
                if c != 0.0 {
                    acc += (b[(j2 - am, j1 - am)] * c).re;
                }
            }
        }
    }
    acc
}

/// Post-pulse expansion coefficients `d_J^{(J0 m0)}` in the interaction picture
/// referenced to `t = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct PendularCoefficients {
    pub j_max: usize,
    /// `coeffs[J0][m0 + J0][J - |m0|]`.
    coeffs: Vec<Vec<Vec<Complex64>>>,
}

impl PendularCoefficients {
    /// Coefficients for the initial state `|J0 m0⟩`, indexed by `J - |m0|`.
    pub fn get(&self, j0: usize, m0: i32) -> &[Complex64] {
        &self.coeffs[j0][(m0 + j0 as i32) as usize]
    }

    pub fn identity(j_max: usize) -> Self {
        let coeffs = (0..=j_max)
            .map(|j0| {
                (-(j0 as i32)..=(j0 as i32))
                    .map(|m0| {
                        let am = m0.unsigned_abs() as usize;
                        let mut v = vec![Complex64::new(0.0, 0.0); j_max + 1 - am];
                        v[j0 - am] = Complex64::new(1.0, 0.0);
                        v
                    })
                    .collect()
            })
            .collect();
        PendularCoefficients { j_max, coeffs }
    }

    /// Largest deviation of `Σ_J |d_J|²` from 1.
    pub fn normalization_error(&self) -> f64 {
        self.coeffs
            .iter()
            .flatten()
            .map(|v| (v.iter().map(|z| z.norm_sqr()).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Population in the two highest `J` shells, weighted by `weights`.
    pub fn top_shell_population(&self, weights: &[f64]) -> f64 {
        let mut pop = 0.0;
        for (j0, row) in self.coeffs.iter().enumerate() {
            for v in row {
                let am = self.j_max + 1 - v.len();
                for (k, z) in v.iter().enumerate() {
                    if k + am + 2 > self.j_max {
                        pop += weights[j0] * z.norm_sqr();
                    }
                }
            }
        }
        pop
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PropagationOptions {
    pub rtol: f64,
    pub atol: f64,
    /// One Dormand-Prince step per grid interval, no error control.
    pub fixed_step: bool,
    pub max_steps: usize,
}

impl Default for PropagationOptions {
    fn default() -> Self {
        PropagationOptions {
            rtol: 1e-10,
            atol: 1e-12,
            fixed_step: false,
            max_steps: 1_000_000,
        }
    }
}

/// Propagates every `|J0 m0⟩` through the pulse on `time_grid` (ps).
pub fn propagate_alignment(
    spec: &RotorSpec,
    pulse: &LaserPulse,
    j_max: usize,
    time_grid: &[f64],
) -> Result<PendularCoefficients> {
    propagate_alignment_with(spec, pulse, j_max, time_grid, &PropagationOptions::default())
}

pub fn propagate_alignment_with(
    spec: &RotorSpec,
    pulse: &LaserPulse,
    j_max: usize,
    time_grid: &[f64],
    opts: &PropagationOptions,
) -> Result<PendularCoefficients> {
    spec.validate()?;
    pulse.validate()?;
    if time_grid.len() < 2 || time_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument(
            "propagation grid must be increasing with at least two nodes".into(),
        ));
    }
    if pulse.peak_intensity == 0.0 {
        return Ok(PendularCoefficients::identity(j_max));
    }
    let edge = pulse
        .envelope(time_grid[0])
        .max(pulse.envelope(time_grid[time_grid.len() - 1]));
    if edge > 1e-8 {
        return Err(Error::InvalidArgument(format!(
            "propagation grid does not cover the pulse (edge envelope {edge:.2e})"
        )));
    }
    // strength of -¼E²Δα in rad/ps per unit envelope
    let coupling = 0.25 * pulse.peak_intensity / AU_INTENSITY_W_CM2 * spec.delta_alpha_au() * HARTREE_RAD_PER_PS;

    // Each m0 >= 0 defines one Hamiltonian shared by all J0 with that m0.
    let tasks: Vec<(usize, i32)> = (0..=j_max)
        .flat_map(|j0| (0..=j0 as i32).map(move |m0| (j0, m0)))
        .collect();
    let results: Vec<Result<((usize, i32), Vec<Complex64>)>> = tasks
        .par_iter()
        .map(|&(j0, m0)| {
            let am = m0 as usize;
            // same-parity subspace containing J0
            let js: Vec<usize> = (am..=j_max).filter(|j| (j + j0) % 2 == 0).collect();
            let n = js.len();
            let mut cos2 = DMatrix::<f64>::zeros(n, n);
            for (a, &ja) in js.iter().enumerate() {
                for (b, &jb) in js.iter().enumerate() {
                    cos2[(a, b)] = cos2theta_element(ja, jb, m0);
                }
            }
            let energies: Vec<f64> = js.iter().map(|&j| spec.energy(j)).collect();
            let rhs = |t: f64, y: &[Complex64], dy: &mut [Complex64]| {
                let u = coupling * pulse.envelope(t);
                for a in 0..n {
                    let mut acc = Complex64::new(0.0, 0.0);
                    for b in 0..n {
                        let c = cos2[(a, b)];
                        if c != 0.0 {
                            let phase = Complex64::from_polar(1.0, (energies[a] - energies[b]) * t);
                            acc += phase * y[b] * c;
                        }
                    }
                    // i ḋ = -U cos² d  =>  ḋ = i U cos² d
                    dy[a] = Complex64::new(0.0, u) * acc;
                }
            };
            let mut y = vec![Complex64::new(0.0, 0.0); n];
            let start = js.iter().position(|&j| j == j0).unwrap();
            y[start] = Complex64::new(1.0, 0.0);
            integrate(rhs, time_grid, &mut y, opts)?;
            let mut full = vec![Complex64::new(0.0, 0.0); j_max + 1 - am];
            for (k, &j) in js.iter().enumerate() {
                full[j - am] = y[k];
            }
            Ok(((j0, m0), full))
        })
        .collect();

    let mut coeffs: Vec<Vec<Vec<Complex64>>> = (0..=j_max).map(|j0| vec![Vec::new(); 2 * j0 + 1]).collect();
    for r in results {
        let ((j0, m0), v) = r?;
        coeffs[j0][(j0 as i32 + m0) as usize] = v.clone();
        coeffs[j0][(j0 as i32 - m0) as usize] = v;
    }
    let out = PendularCoefficients { j_max, coeffs };
    debug!(
        "alignment propagated, normalization error {:.2e}",
        out.normalization_error()
    );
    Ok(out)
}

// Dormand-Prince 5(4) tableau
const DP_C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
const DP_A: [[f64; 6]; 7] = [
    [0.0; 6],
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
const DP_B: [f64; 7] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];
const DP_E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

fn dp_step<F>(f: &F, t: f64, h: f64, y: &[Complex64], out: &mut [Complex64], err: &mut [Complex64])
where
    F: Fn(f64, &[Complex64], &mut [Complex64]),
{
    let n = y.len();
    let mut k = vec![vec![Complex64::new(0.0, 0.0); n]; 7];
    let mut tmp = vec![Complex64::new(0.0, 0.0); n];
    for s in 0..7 {
        for i in 0..n {
            let mut acc = y[i];
            for (r, kr) in k.iter().enumerate().take(s) {
                acc += kr[i] * (h * DP_A[s][r]);
            }
            tmp[i] = acc;
        }
        f(t + DP_C[s] * h, &tmp, &mut k[s]);
    }
    for i in 0..n {
        let mut acc = y[i];
        let mut e = Complex64::new(0.0, 0.0);
        for s in 0..7 {
            acc += k[s][i] * (h * DP_B[s]);
            e += k[s][i] * (h * DP_E[s]);
        }
        out[i] = acc;
        err[i] = e;
    }
}

fn integrate<F>(f: F, grid: &[f64], y: &mut [Complex64], opts: &PropagationOptions) -> Result<()>
where
    F: Fn(f64, &[Complex64], &mut [Complex64]),
{
    let n = y.len();
    let mut next = vec![Complex64::new(0.0, 0.0); n];
    let mut err = vec![Complex64::new(0.0, 0.0); n];
    let mut h = (grid[1] - grid[0]).min(1e-3);
    let mut steps = 0usize;
    for w in grid.windows(2) {
        let (mut t, t_end) = (w[0], w[1]);
        if opts.fixed_step {
            dp_step(&f, t, t_end - t, y, &mut next, &mut err);
            y.copy_from_slice(&next);
        } else {
            while t < t_end {
                let step = h.min(t_end - t);
                dp_step(&f, t, step, y, &mut next, &mut err);
                let mut e_norm: f64 = 0.0;
                for i in 0..n {
                    let sc = opts.atol + opts.rtol * y[i].norm().max(next[i].norm());
                    e_norm = e_norm.max(err[i].norm() / sc);
                }
                steps += 1;
                if steps > opts.max_steps {
                    return Err(Error::StepTooCoarse { drift: f64::NAN });
                }
                if e_norm <= 1.0 {
                    t += step;
                    y.copy_from_slice(&next);
                }
                let factor = if e_norm == 0.0 {
                    5.0
                } else {
                    (0.9 * e_norm.powf(-0.2)).clamp(0.2, 5.0)
                };
                h = step * factor;
            }
        }
        let norm: f64 = y.iter().map(|z| z.norm_sqr()).sum();
        let drift = (norm - 1.0).abs();
        if drift > 1e-6 || !norm.is_finite() {
            return Err(Error::StepTooCoarse { drift });
        }
    }
    Ok(())
}

/// Density matrix of the aligned ensemble at time `t` (ps, measured from the
/// pulse peak), using the frozen post-pulse coefficients.
pub fn density_from_pendular(
    coeffs: &PendularCoefficients,
    weights: &ThermalWeights,
    spec: &RotorSpec,
    t: f64,
) -> RotationalDensityMatrix {
    let j_max = coeffs.j_max;
    let mut rho = RotationalDensityMatrix::zeros(j_max);
    for m in rho.m_values() {
        let am = m.unsigned_abs() as usize;
        let dim = j_max + 1 - am;
        let mut b = DMatrix::<Complex64>::zeros(dim, dim);
        for j0 in am..=j_max {
            let w = weights.weights[j0];
            if w == 0.0 {
                continue;
            }
            let d = coeffs.get(j0, m);
            for a in 0..dim {
                if d[a] == Complex64::new(0.0, 0.0) {
                    continue;
                }
                for c in 0..dim {
                    b[(a, c)] += d[a] * d[c].conj() * w;
                }
            }
        }
        *rho.block_mut(m) = b;
    }
    rho.at_time(spec, t)
}

/// Time-resolved orientation probability per steradian.
#[derive(Debug, Clone, PartialEq)]
pub struct AngularDistribution {
    pub grid: AngularGrid,
    pub time_nodes: Vec<f64>,
    /// `values[k * grid.len() + grid.cell(i_phi, j_theta)]`.
    pub values: Vec<f64>,
}

impl AngularDistribution {
    pub fn frame(&self, k: usize) -> &[f64] {
        let n = self.grid.len();
        &self.values[k * n..(k + 1) * n]
    }

    pub fn frame_mut(&mut self, k: usize) -> &mut [f64] {
        let n = self.grid.len();
        &mut self.values[k * n..(k + 1) * n]
    }

    pub fn n_times(&self) -> usize {
        self.time_nodes.len()
    }

    /// Quadrature `∬ Pr sinθ dθ dφ` of frame `k`.
    pub fn normalization(&self, k: usize) -> f64 {
        let f = self.frame(k);
        let mut acc = 0.0;
        for i in 0..self.grid.n_phi() {
            for j in 0..self.grid.n_theta() {
                acc += f[self.grid.cell(i, j)] * self.grid.cell_weight(i, j);
            }
        }
        acc
    }

    /// Azimuthal Fourier component `(1/2π) ∫ Pr e^{-ikφ} dφ` on the polar
    /// nodes of frame `frame`.
    pub fn azimuthal_component(&self, frame: usize, order: i32) -> Vec<Complex64> {
        let f = self.frame(frame);
        let g = &self.grid;
        (0..g.n_theta())
            .map(|j| {
                let mut acc = Complex64::new(0.0, 0.0);
                for i in 0..g.n_phi() {
                    acc += Complex64::from_polar(f[g.cell(i, j)], -(order as f64) * g.phi[i]) * g.weights_phi[i];
                }
                acc / (2.0 * PI)
            })
            .collect()
    }

    pub fn validate(&self, tol: f64) -> Result<()> {
        if self.values.len() != self.grid.len() * self.time_nodes.len() {
            return Err(Error::GridMismatch(format!(
                "{} values for {} cells x {} times",
                self.values.len(),
                self.grid.len(),
                self.time_nodes.len()
            )));
        }
        for k in 0..self.n_times() {
            let n = self.normalization(k);
            if (n - 1.0).abs() > tol {
                return Err(Error::Validation {
                    path: format!("distribution.frame[{k}]"),
                    message: format!("normalization {n}"),
                });
            }
        }
        Ok(())
    }
}

/// `Pr(θ, φ, t)` from a `Δm = 0` density matrix.
pub fn synthesize_probability(
    rho: &RotationalDensityMatrix,
    spec: &RotorSpec,
    grid: &AngularGrid,
    time_nodes: &[f64],
) -> Result<AngularDistribution> {
    let j_max = rho.j_max;
    let table = evaluate_legendre_on(j_max, grid)?;
    let nt = grid.n_theta();
    let ncell = grid.len();
    let frames: Vec<Vec<f64>> = time_nodes
        .par_iter()
        .map(|&t| {
            let r = rho.at_time(spec, t);
            let mut line = vec![0.0; nt];
            for m in r.m_values() {
                let am = m.unsigned_abs() as usize;
                let b = r.block(m);
                for j1 in am..=j_max {
                    let p1 = table.row(j1, m);
                    for j2 in am..=j_max {
                        let z = b[(j1 - am, j2 - am)];
                        if z.re == 0.0 {
                            continue;
                        }
                        let p2 = table.row(j2, m);
                        // imaginary parts cancel between (J1,J2) and (J2,J1)
                        for i in 0..nt {
                            line[i] += z.re * p1[i] * p2[i];
                        }
                    }
                }
            }
            let mut frame = vec![0.0; ncell];
            for ip in 0..grid.n_phi() {
                for j in 0..nt {
                    frame[grid.cell(ip, j)] = line[j] / (2.0 * PI);
                }
            }
            frame
        })
        .collect();
    Ok(AngularDistribution {
        grid: grid.clone(),
        time_nodes: time_nodes.to_vec(),
        values: frames.concat(),
    })
}

/// Uniform sampling of one revival period starting at `start` (ps).
pub fn period_time_nodes(spec: &RotorSpec, start: f64, samples: usize) -> Vec<f64> {
    let period = spec.period();
    (0..samples)
        .map(|k| start + period * k as f64 / samples as f64)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn n2(temperature: f64) -> RotorSpec {
        RotorSpec::from_wavenumber(1.98958, 2.38, 1.45, (6.0, 3.0), temperature).unwrap()
    }

    #[test]
    fn ground_state_at_zero_temperature() {
        let rho = thermal_density(&n2(0.0), 4).unwrap();
        assert_eq!(rho.element(0, 0, 0), Complex64::new(1.0, 0.0));
        assert_abs_diff_eq!(rho.trace().re, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn tail_guard() {
        assert!(matches!(
            thermal_density(&n2(300.0), 5),
            Err(Error::JMaxTooSmall { .. })
        ));
    }

    #[test]
    fn degeneracy_counting_flat_spectrum() {
        let mut spec = RotorSpec::from_wavenumber(1e-9, 1.0, 1.0, (1.0, 1.0), 300.0).unwrap();
        spec.rotational_constant = 1e-12;
        let w = thermal_weights(&spec, 3, 1.0).unwrap();
        for j in 1..=3 {
            assert_abs_diff_eq!(w.weights[j] / w.weights[0], 1.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn cos2_elements() {
        assert_abs_diff_eq!(cos2theta_element(0, 0, 0), 1.0 / 3.0, epsilon = 1e-14);
        assert_eq!(cos2theta_element(0, 4, 0), 0.0);
        assert_abs_diff_eq!(cos2theta_element(1, 1, 0), 0.6, epsilon = 1e-14);
        assert!(cos2theta_element(1, 3, 0).abs() > 0.1);
        assert_abs_diff_eq!(cos2theta_element(3, 5, 2), cos2theta_element(3, 5, -2));
    }

    #[test]
    fn zero_intensity_is_identity() {
        let pulse = LaserPulse::new(50.0, 0.0);
        let d = propagate_alignment(&n2(30.0), &pulse, 4, &pulse.default_time_grid(10)).unwrap();
        assert_eq!(d, PendularCoefficients::identity(4));
    }

    #[test]
    fn coarse_fixed_step_is_detected() {
        let pulse = LaserPulse::new(50.0, 5e14);
        let opts = PropagationOptions {
            fixed_step: true,
            ..Default::default()
        };
        let r = propagate_alignment_with(&n2(30.0), &pulse, 8, &pulse.default_time_grid(2), &opts);
        assert!(matches!(r, Err(Error::StepTooCoarse { .. })));
    }

    #[test]
    fn grid_must_cover_pulse() {
        let pulse = LaserPulse::new(50.0, 1e13);
        let r = propagate_alignment(&n2(30.0), &pulse, 4, &[-0.01, 0.01]);
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn uniform_probability_for_ground_state() {
        let spec = n2(0.0);
        let rho = thermal_density(&spec, 2).unwrap();
        let grid = AngularGrid::gauss_legendre(8, 4).unwrap();
        let pr = synthesize_probability(&rho, &spec, &grid, &[0.0, 3.0]).unwrap();
        for v in &pr.values {
            assert_abs_diff_eq!(*v, 1.0 / (4.0 * PI), epsilon = 1e-14);
        }
    }

    #[test]
    fn two_level_beat_period() {
        let spec = n2(0.0);
        let mut rho = RotationalDensityMatrix::zeros(2);
        let b = rho.block_mut(0);
        for v in b.iter_mut() {
            *v = Complex64::new(0.0, 0.0);
        }
        b[(0, 0)] = Complex64::new(0.5, 0.0);
        b[(2, 2)] = Complex64::new(0.5, 0.0);
        b[(0, 2)] = Complex64::new(0.5, 0.0);
        b[(2, 0)] = Complex64::new(0.5, 0.0);
        let grid = AngularGrid::gauss_legendre(6, 1).unwrap();
        let tp = spec.period() / 6.0;
        let pr = synthesize_probability(&rho, &spec, &grid, &[0.123, 0.123 + tp, 0.123 + tp / 2.0]).unwrap();
        for j in 0..6 {
            assert_abs_diff_eq!(pr.frame(0)[j], pr.frame(1)[j], epsilon = 1e-12);
        }
        // closed form: (1/2π)[½P̃00² + ½P̃20² + P̃00 P̃20 cos 6Bt]
        let x = grid.cos_theta()[1];
        let p0 = std::f64::consts::FRAC_1_SQRT_2;
        let p2 = (2.5f64).sqrt() * 0.5 * (3.0 * x * x - 1.0);
        let t = 0.123 + tp / 2.0;
        let expect =
            (0.5 * p0 * p0 + 0.5 * p2 * p2 + p0 * p2 * (6.0 * spec.rotational_constant * t).cos()) / (2.0 * PI);
        assert_abs_diff_eq!(pr.frame(2)[1], expect, epsilon = 1e-12);
    }
}
