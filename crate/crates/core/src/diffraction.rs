//! Forward model for gas-phase diffraction from oriented linear molecules.
//!
//! Lab frame: probe beam along `x`, alignment polarization along `z`. A
//! detector pixel at scattering angle `Θ` and azimuth `Φ` collects
//! `k_f = k(cos Θ, sin Θ cos Φ, sin Θ sin Φ)`, so `Φ = π/2` points along the
//! polarization.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::sync::OnceLock;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::angular::AngularGrid;
use crate::error::{Error, Result};
use crate::rotor::{synthesize_probability, AngularDistribution, RotationalDensityMatrix, RotorSpec};

/// Default cap on kernel entries (8 bytes each).
pub const DEFAULT_KERNEL_CAP: usize = 200_000_000;

#[derive(Debug, Clone, Deserialize)]
struct FormFactorFile {
    elements: BTreeMap<String, AtomicFormFactor>,
}

/// Four-Gaussian parameterization of an X-ray atomic form factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtomicFormFactor {
    pub z: u32,
    pub a: [f64; 4],
    pub b: [f64; 4],
    pub c: f64,
}

impl AtomicFormFactor {
    /// `f(s)` for momentum transfer `s` in Å⁻¹.
    pub fn eval(&self, s: f64) -> f64 {
        let q = s / (4.0 * PI);
        let q2 = q * q;
        self.a
            .iter()
            .zip(&self.b)
            .map(|(a, b)| a * (-b * q2).exp())
            .sum::<f64>()
            + self.c
    }
}

fn form_factor_table() -> &'static BTreeMap<String, AtomicFormFactor> {
    static TABLE: OnceLock<BTreeMap<String, AtomicFormFactor>> = OnceLock::new();
    TABLE.get_or_init(|| {
        let file: FormFactorFile = serde_json::from_str(include_str!("../data/atomic_form_factors.json"))
            .expect("bundled form-factor table parses");
        file.elements
    })
}

/// Looks up the tabulated form factor parameters of an element.
pub fn atomic_form_factor(symbol: &str) -> Result<AtomicFormFactor> {
    form_factor_table()
        .get(symbol)
        .cloned()
        .ok_or_else(|| Error::InvalidArgument(format!("no form factor for element {symbol}")))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Probe {
    Xray,
    Electron,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatteringGeometry {
    pub probe: Probe,
    /// Photon energy (X-ray) or kinetic energy (electron), keV.
    pub probe_energy: f64,
    /// Detector nodes `(Θ, Φ)` in radians, rows of the kernel.
    pub pixels: Vec<(f64, f64)>,
}

impl ScatteringGeometry {
    pub fn new(probe: Probe, probe_energy: f64, pixels: Vec<(f64, f64)>) -> Result<Self> {
        let g = ScatteringGeometry {
            probe,
            probe_energy,
            pixels,
        };
        g.validate()?;
        Ok(g)
    }

    /// Product grid of `n_theta` scattering angles up to `s_max` (Å⁻¹) and
    /// `n_phi` azimuths; `Θ` outer, `Φ` inner.
    pub fn polar(probe: Probe, probe_energy: f64, n_theta: usize, n_phi: usize, s_max: f64) -> Result<Self> {
        let k = wavenumber(probe, probe_energy);
        let theta_max = scattering_angle(k, s_max)?;
        let mut pixels = Vec::with_capacity(n_theta * n_phi);
        for a in 0..n_theta {
            let th = theta_max * (a as f64 + 0.5) / n_theta as f64;
            for b in 0..n_phi {
                pixels.push((th, 2.0 * PI * b as f64 / n_phi as f64));
            }
        }
        Self::new(probe, probe_energy, pixels)
    }

    /// Flat square detector of `n × n` pixels normal to the beam, sized so
    /// that the edge midpoints reach `s_max`.
    pub fn flat_square(probe: Probe, probe_energy: f64, n: usize, s_max: f64) -> Result<Self> {
        let k = wavenumber(probe, probe_energy);
        let half = scattering_angle(k, s_max)?.tan();
        let mut pixels = Vec::with_capacity(n * n);
        for r in 0..n {
            let z = -half + 2.0 * half * (r as f64 + 0.5) / n as f64;
            for c in 0..n {
                let y = -half + 2.0 * half * (c as f64 + 0.5) / n as f64;
                let rho = (y * y + z * z).sqrt();
                pixels.push((rho.atan(), z.atan2(y).rem_euclid(2.0 * PI)));
            }
        }
        Self::new(probe, probe_energy, pixels)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.probe_energy > 0.0) {
            return Err(Error::InvalidArgument("probe energy must be positive".into()));
        }
        if self.pixels.is_empty() {
            return Err(Error::InvalidGrid("detector has no pixels".into()));
        }
        let mut keys: Vec<(u64, u64)> = self.pixels.iter().map(|(a, b)| (a.to_bits(), b.to_bits())).collect();
        keys.sort_unstable();
        if keys.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidGrid("duplicate detector nodes".into()));
        }
        Ok(())
    }

    pub fn wavenumber(&self) -> f64 {
        wavenumber(self.probe, self.probe_energy)
    }

    /// Momentum transfer vector of pixel `p`, Å⁻¹.
    pub fn s_vector(&self, p: usize) -> [f64; 3] {
        let k = self.wavenumber();
        let (th, ph) = self.pixels[p];
        [k * (th.cos() - 1.0), k * th.sin() * ph.cos(), k * th.sin() * ph.sin()]
    }

    pub fn s_magnitude(&self, p: usize) -> f64 {
        2.0 * self.wavenumber() * (self.pixels[p].0 / 2.0).sin()
    }
}

/// Wavelength in Å.
pub fn wavelength(probe: Probe, energy_kev: f64) -> f64 {
    match probe {
        Probe::Xray => 12.398_419_843 / energy_kev,
        Probe::Electron => {
            let ev = energy_kev * 1e3;
            12.264_3 / (ev * (1.0 + 0.978_48e-6 * ev)).sqrt()
        }
    }
}

/// `k = 2π/λ` in Å⁻¹.
pub fn wavenumber(probe: Probe, energy_kev: f64) -> f64 {
    2.0 * PI / wavelength(probe, energy_kev)
}

fn scattering_angle(k: f64, s: f64) -> Result<f64> {
    let x = s / (2.0 * k);
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::InvalidArgument(format!(
            "momentum transfer {s} unreachable with k = {k}"
        )));
    }
    Ok(2.0 * x.asin())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub element: String,
    /// Molecular-frame position, Å; the molecular axis is `z`.
    pub position: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoleculeGeometry {
    pub atoms: Vec<Atom>,
    form_factors: Vec<AtomicFormFactor>,
}

impl MoleculeGeometry {
    pub fn new(atoms: Vec<Atom>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::InvalidArgument("molecule has no atoms".into()));
        }
        let form_factors = atoms
            .iter()
            .map(|a| atomic_form_factor(&a.element))
            .collect::<Result<Vec<_>>>()?;
        for (a, f) in atoms.iter().zip(&form_factors) {
            if f.eval(0.0) <= 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "nonpositive form factor at s=0 for {}",
                    a.element
                )));
            }
        }
        Ok(MoleculeGeometry { atoms, form_factors })
    }

    /// Homonuclear diatomic centred at the origin with bond length `r` (Å).
    pub fn diatomic(element: &str, r: f64) -> Result<Self> {
        Self::new(vec![
            Atom {
                element: element.into(),
                position: [0.0, 0.0, -r / 2.0],
            },
            Atom {
                element: element.into(),
                position: [0.0, 0.0, r / 2.0],
            },
        ])
    }

    /// Lab positions after rotating the molecular axis to `(θ, φ)`.
    fn oriented_positions(&self, theta: f64, phi: f64) -> Vec<[f64; 3]> {
        let (st, ct) = theta.sin_cos();
        let (sp, cp) = phi.sin_cos();
        self.atoms
            .iter()
            .map(|a| {
                let [x, y, z] = a.position;
                // Ry(θ) then Rz(φ)
                let x1 = ct * x + st * z;
                let z1 = -st * x + ct * z;
                [cp * x1 - sp * y, sp * x1 + cp * y, z1]
            })
            .collect()
    }
}

/// Scattering amplitude of the oriented molecule for momentum transfer `s`.
pub fn molecular_form_factor(
    mol: &MoleculeGeometry,
    probe: Probe,
    s: [f64; 3],
    theta: f64,
    phi: f64,
) -> Result<Complex64> {
    let smag = (s[0] * s[0] + s[1] * s[1] + s[2] * s[2]).sqrt();
    if probe == Probe::Electron && smag == 0.0 {
        return Err(Error::SingularMomentumTransfer);
    }
    let pos = mol.oriented_positions(theta, phi);
    let mut acc = Complex64::new(0.0, 0.0);
    for (r, ff) in pos.iter().zip(&mol.form_factors) {
        let phase = s[0] * r[0] + s[1] * r[1] + s[2] * r[2];
        let amp = match probe {
            Probe::Xray => ff.eval(smag),
            Probe::Electron => ff.z as f64 - ff.eval(smag),
        };
        acc += Complex64::from_polar(amp, phase);
    }
    if probe == Probe::Electron {
        acc /= smag * smag;
    }
    Ok(acc)
}

/// Discretized Fredholm kernel: rows are detector pixels, columns are
/// orientation cells with `θ` fastest within `φ`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix {
    pub matrix: DMatrix<f64>,
    pub grid: AngularGrid,
    /// Detector pixel index of each row.
    pub pixel_rows: Vec<usize>,
}

impl KernelMatrix {
    pub fn rows(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn cols(&self) -> usize {
        self.matrix.ncols()
    }

    /// Drops the rows of pixels where `keep` is false.
    pub fn masked(&self, keep: &[bool]) -> Result<KernelMatrix> {
        let sel: Vec<usize> = (0..self.rows())
            .filter(|&r| keep.get(self.pixel_rows[r]).copied().unwrap_or(false))
            .collect();
        if sel.is_empty() {
            return Err(Error::InvalidArgument("mask removes every pixel".into()));
        }
        let matrix = DMatrix::from_fn(sel.len(), self.cols(), |r, c| self.matrix[(sel[r], c)]);
        log::info!("mask keeps {} of {} kernel rows", sel.len(), self.rows());
        Ok(KernelMatrix {
            matrix,
            grid: self.grid.clone(),
            pixel_rows: sel.iter().map(|&r| self.pixel_rows[r]).collect(),
        })
    }
}

pub fn build_kernel(mol: &MoleculeGeometry, geometry: &ScatteringGeometry, grid: &AngularGrid) -> Result<KernelMatrix> {
    build_kernel_capped(mol, geometry, grid, DEFAULT_KERNEL_CAP)
}

pub fn build_kernel_capped(
    mol: &MoleculeGeometry,
    geometry: &ScatteringGeometry,
    grid: &AngularGrid,
    cap: usize,
) -> Result<KernelMatrix> {
    geometry.validate()?;
    grid.validate()?;
    let rows = geometry.pixels.len();
    let cols = grid.len();
    let entries = rows.saturating_mul(cols);
    if entries > cap {
        return Err(Error::KernelTooLarge {
            rows,
            cols,
            entries,
            cap,
        });
    }
    let row_data: Vec<Result<Vec<f64>>> = (0..rows)
        .into_par_iter()
        .map(|p| {
            let s = geometry.s_vector(p);
            let mut row = vec![0.0; cols];
            for ip in 0..grid.n_phi() {
                for jt in 0..grid.n_theta() {
                    let f = molecular_form_factor(mol, geometry.probe, s, grid.theta[jt], grid.phi[ip])?;
                    row[grid.cell(ip, jt)] = f.norm_sqr() * grid.cell_weight(ip, jt);
                }
            }
            Ok(row)
        })
        .collect();
    let mut matrix = DMatrix::zeros(rows, cols);
    for (r, row) in row_data.into_iter().enumerate() {
        for (c, v) in row?.into_iter().enumerate() {
            matrix[(r, c)] = v;
        }
    }
    Ok(KernelMatrix {
        matrix,
        grid: grid.clone(),
        pixel_rows: (0..rows).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseMetadata {
    /// Expected total counts per frame.
    pub counts_per_frame: f64,
    pub seed: u64,
    /// Counts per unit intensity; stored frames are counts divided by this.
    pub counts_scale: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffractionDataset {
    pub geometry: ScatteringGeometry,
    pub time_nodes: Vec<f64>,
    /// `frames[t * pixels + p]`, intensity units.
    pub frames: Vec<f64>,
    pub noise: Option<NoiseMetadata>,
}

impl DiffractionDataset {
    pub fn n_pixels(&self) -> usize {
        self.geometry.pixels.len()
    }

    pub fn frame(&self, k: usize) -> &[f64] {
        let n = self.n_pixels();
        &self.frames[k * n..(k + 1) * n]
    }

    /// `(S_H - S_V)/(S_H + S_V)` over pixels with `s_lo <= s <= s_hi`, using
    /// cones of half-opening `half_angle` around the horizontal and vertical
    /// detector axes.
    pub fn anisotropy(&self, k: usize, s_lo: f64, s_hi: f64, half_angle: f64) -> f64 {
        let f = self.frame(k);
        let (mut sh, mut sv) = (0.0, 0.0);
        for p in 0..self.n_pixels() {
            let s = self.geometry.s_magnitude(p);
            if s < s_lo || s > s_hi {
                continue;
            }
            let phi = self.geometry.pixels[p].1;
            // angular distance to the horizontal axis (Φ = 0 or π)
            let dh = phi.sin().abs().asin();
            let dv = phi.cos().abs().asin();
            if dh <= half_angle {
                sh += f[p];
            }
            if dv <= half_angle {
                sv += f[p];
            }
        }
        (sh - sv) / (sh + sv)
    }
}

/// `I = K·Pr` for every frame of `distribution`.
pub fn forward_intensity(
    kernel: &KernelMatrix,
    geometry: &ScatteringGeometry,
    distribution: &AngularDistribution,
) -> Result<DiffractionDataset> {
    if distribution.grid != kernel.grid {
        return Err(Error::GridMismatch(
            "distribution grid differs from kernel columns".into(),
        ));
    }
    if kernel.rows() != geometry.pixels.len() {
        return Err(Error::GridMismatch("kernel rows differ from detector pixels".into()));
    }
    let frames: Vec<Vec<f64>> = (0..distribution.n_times())
        .into_par_iter()
        .map(|k| {
            let pr = nalgebra::DVector::from_column_slice(distribution.frame(k));
            (&kernel.matrix * pr).iter().copied().collect()
        })
        .collect();
    Ok(DiffractionDataset {
        geometry: geometry.clone(),
        time_nodes: distribution.time_nodes.clone(),
        frames: frames.concat(),
        noise: None,
    })
}

/// Replaces each frame by Poisson counts with `counts_per_frame` expected in
/// total, stored back in intensity units. An infinite budget is a no-op.
pub fn apply_poisson_noise(dataset: &mut DiffractionDataset, counts_per_frame: f64, seed: u64) -> Result<()> {
    if counts_per_frame.is_infinite() {
        return Ok(());
    }
    if !(counts_per_frame > 0.0) {
        return Err(Error::InvalidArgument("photon budget must be positive".into()));
    }
    let n = dataset.n_pixels();
    let mut scales = Vec::with_capacity(dataset.time_nodes.len());
    for k in 0..dataset.time_nodes.len() {
        let frame = &mut dataset.frames[k * n..(k + 1) * n];
        let total: f64 = frame.iter().sum();
        if total <= 0.0 {
            scales.push(0.0);
            continue;
        }
        let scale = counts_per_frame / total;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64));
        for v in frame.iter_mut() {
            let mean = *v * scale;
            let c = if mean > 0.0 {
                Poisson::new(mean)
                    .map_err(|e| Error::InvalidArgument(e.to_string()))?
                    .sample(&mut rng)
            } else {
                0.0
            };
            *v = c / scale;
        }
        scales.push(scale);
    }
    dataset.noise = Some(NoiseMetadata {
        counts_per_frame,
        seed,
        counts_scale: scales,
    });
    Ok(())
}

/// Full simulation: density matrix → `Pr(θ, φ, t)` → diffraction frames.
#[allow(clippy::too_many_arguments)]
pub fn simulate_dataset(
    rho: &RotationalDensityMatrix,
    spec: &RotorSpec,
    mol: &MoleculeGeometry,
    geometry: &ScatteringGeometry,
    grid: &AngularGrid,
    time_nodes: &[f64],
    noise: Option<(f64, u64)>,
) -> Result<(DiffractionDataset, KernelMatrix, AngularDistribution)> {
    let kernel = build_kernel(mol, geometry, grid)?;
    let pr = synthesize_probability(rho, spec, grid, time_nodes)?;
    let mut ds = forward_intensity(&kernel, geometry, &pr)?;
    if let Some((budget, seed)) = noise {
        apply_poisson_noise(&mut ds, budget, seed)?;
    }
    Ok((ds, kernel, pr))
}

/// Isotropic two-centre pattern `2 f² (1 + sin(sR)/(sR))` of a homonuclear
/// diatomic (X-ray).
pub fn debye_homonuclear(ff: &AtomicFormFactor, s: f64, r: f64) -> f64 {
    let f = ff.eval(s);
    let x = s * r;
    let sinc = if x == 0.0 { 1.0 } else { x.sin() / x };
    2.0 * f * f * (1.0 + sinc)
}
