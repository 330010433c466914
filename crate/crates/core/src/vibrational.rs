//! Tomography of separable harmonic vibrational wavepackets.
//!
//! Positions are in oscillator units `x = q/ℓ_i` with `ℓ_i = √(ħ/(μ_i ω_i))`
//! and times in fs. Mode frequencies are integer multiples `ω_i = r_i ω₀`.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use log::{debug, info, warn};
use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::iterative::{hermitize, hio_positivity, plateaued, IterationRecord};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// `ħ/amu` in Å²·rad/fs.
pub const HBAR_OVER_AMU: f64 = 6.350_780e-3;
/// Converts cm⁻¹ to rad/fs.
pub const WAVENUMBER_TO_RAD_PER_FS: f64 = 2.0 * PI * 2.997_924_58e-5;
/// Cap on dense product-grid points.
pub const MAX_GRID_POINTS: usize = 4_000_000;
/// ODE step used for the irregular solution.
const ODE_STEP: f64 = 2e-3;

fn gcd(a: u32, b: u32) -> u32 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OscillatorBasis {
    /// `ω₀` in rad/fs.
    pub base_frequency: f64,
    pub ratios: Vec<u32>,
    /// Reduced masses, amu.
    pub masses: Vec<f64>,
    pub n_max: usize,
    /// Uniform position grid shared by all modes, oscillator units.
    pub grid: Vec<f64>,
    /// Reject grids violating the spacing bound.
    #[serde(default = "default_true")]
    pub enforce_resolution: bool,
}

fn default_true() -> bool {
    true
}

impl OscillatorBasis {
    pub fn new(base_frequency: f64, ratios: Vec<u32>, masses: Vec<f64>, n_max: usize, grid: Vec<f64>) -> Result<Self> {
        let b = OscillatorBasis {
            base_frequency,
            ratios,
            masses,
            n_max,
            grid,
            enforce_resolution: true,
        };
        b.validate()?;
        Ok(b)
    }

    /// Uniform grid of `points` nodes on `[-half_width, half_width]`.
    pub fn uniform_grid(half_width: f64, points: usize) -> Vec<f64> {
        (0..points)
            .map(|i| -half_width + 2.0 * half_width * i as f64 / (points - 1) as f64)
            .collect()
    }

    /// Largest admissible grid spacing `π/(2√(2 n_max + 1))`.
    pub fn max_spacing(n_max: usize) -> f64 {
        PI / (2.0 * ((2 * n_max + 1) as f64).sqrt())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_frequency > 0.0) {
            return Err(Error::InvalidArgument("base frequency must be positive".into()));
        }
        if self.ratios.is_empty() || self.ratios.contains(&0) {
            return Err(Error::InvalidArgument(
                "frequency ratios must be positive integers".into(),
            ));
        }
        if self.ratios.iter().fold(0, |g, &r| gcd(g, r)) != 1 {
            return Err(Error::InvalidArgument(format!(
                "frequency ratios {:?} are not reduced",
                self.ratios
            )));
        }
        if self.masses.len() != self.ratios.len() || self.masses.iter().any(|&m| !(m > 0.0)) {
            return Err(Error::InvalidArgument("one positive mass per mode required".into()));
        }
        check_grid(&self.grid, self.n_max, self.enforce_resolution)?;
        let points = self
            .grid
            .len()
            .checked_pow(self.mode_count() as u32)
            .unwrap_or(usize::MAX);
        if points > MAX_GRID_POINTS {
            return Err(Error::InvalidGrid(format!(
                "dense grid of {points} points exceeds {MAX_GRID_POINTS}"
            )));
        }
        Ok(())
    }

    pub fn mode_count(&self) -> usize {
        self.ratios.len()
    }

    pub fn levels(&self) -> usize {
        self.n_max + 1
    }

    /// Dimension of the product basis.
    pub fn dim(&self) -> usize {
        self.levels().pow(self.mode_count() as u32)
    }

    pub fn grid_points(&self) -> usize {
        self.grid.len().pow(self.mode_count() as u32)
    }

    pub fn spacing(&self) -> f64 {
        self.grid[1] - self.grid[0]
    }

    /// `T = 2π/ω₀`, fs.
    pub fn period(&self) -> f64 {
        2.0 * PI / self.base_frequency
    }

    /// `ℓ_i = √(ħ/(μ_i r_i ω₀))`, Å.
    pub fn length_scale(&self, mode: usize) -> f64 {
        (HBAR_OVER_AMU / (self.masses[mode] * self.ratios[mode] as f64 * self.base_frequency)).sqrt()
    }

    /// Flat index of a quantum-number tuple (first mode slowest).
    pub fn index(&self, quanta: &[usize]) -> usize {
        quanta.iter().fold(0, |acc, &n| acc * self.levels() + n)
    }

    pub fn quanta(&self, index: usize) -> Vec<usize> {
        let mut q = vec![0; self.mode_count()];
        let mut r = index;
        for i in (0..self.mode_count()).rev() {
            q[i] = r % self.levels();
            r /= self.levels();
        }
        q
    }

    /// Beat index `k = Σ Δ_i r_i`.
    pub fn offset_frequency(&self, offset: &[i32]) -> i64 {
        offset
            .iter()
            .zip(&self.ratios)
            .map(|(&d, &r)| d as i64 * r as i64)
            .sum()
    }

    pub fn max_beat(&self) -> i64 {
        self.n_max as i64 * self.ratios.iter().map(|&r| r as i64).sum::<i64>()
    }

    /// Samples per period meeting `δt ≤ T/(2 (n_max+1) Σ r_i)`.
    pub fn default_time_samples(&self) -> usize {
        2 * self.levels() * self.ratios.iter().map(|&r| r as usize).sum::<usize>()
    }

    pub fn time_nodes(&self, samples: usize) -> Vec<f64> {
        let t = self.period();
        (0..samples).map(|k| t * k as f64 / samples as f64).collect()
    }

    /// Offset tuples grouped by beat index.
    pub fn frequency_classes(&self) -> BTreeMap<i64, Vec<Vec<i32>>> {
        let n = self.n_max as i32;
        let mut out: BTreeMap<i64, Vec<Vec<i32>>> = BTreeMap::new();
        let mut cur = vec![-n; self.mode_count()];
        loop {
            out.entry(self.offset_frequency(&cur)).or_default().push(cur.clone());
            let mut i = self.mode_count();
            loop {
                if i == 0 {
                    return out;
                }
                i -= 1;
                if cur[i] < n {
                    cur[i] += 1;
                    break;
                }
                cur[i] = -n;
            }
        }
    }

    fn point_coords(&self, p: usize) -> Vec<usize> {
        let nx = self.grid.len();
        let mut c = vec![0; self.mode_count()];
        let mut r = p;
        for i in (0..self.mode_count()).rev() {
            c[i] = r % nx;
            r /= nx;
        }
        c
    }
}

fn check_grid(grid: &[f64], n_max: usize, enforce: bool) -> Result<()> {
    if grid.len() < 3 {
        return Err(Error::InvalidGrid("position grid needs at least 3 nodes".into()));
    }
    let h = grid[1] - grid[0];
    if !(h > 0.0) || grid.windows(2).any(|w| ((w[1] - w[0]) - h).abs() > 1e-9 * h.max(1.0)) {
        return Err(Error::InvalidGrid(
            "position grid must be uniform and increasing".into(),
        ));
    }
    let bound = OscillatorBasis::max_spacing(n_max);
    if enforce && h > bound {
        return Err(Error::GridTooCoarse { spacing: h, bound });
    }
    let reach = ((2 * n_max + 1) as f64).sqrt() + 5.0;
    if enforce && (grid[0] > -reach || grid[grid.len() - 1] < reach) {
        return Err(Error::InvalidGrid(format!(
            "grid [{:.3}, {:.3}] does not reach ±{reach:.3}",
            grid[0],
            grid[grid.len() - 1]
        )));
    }
    Ok(())
}

/// Hermite functions `ψ_0..=ψ_n_max` at `x`.
pub fn hermite_functions(n_max: usize, x: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(n_max + 1);
    let p0 = PI.powf(-0.25) * (-0.5 * x * x).exp();
    out.push(p0);
    if n_max >= 1 {
        out.push(2f64.sqrt() * x * p0);
    }
    for n in 2..=n_max {
        let v = (2.0 / n as f64).sqrt() * x * out[n - 1] - ((n - 1) as f64 / n as f64).sqrt() * out[n - 2];
        out.push(v);
    }
    out
}

/// `ψ_n` on `grid`.
pub fn regular_wavefunction(n: usize, grid: &[f64]) -> Vec<f64> {
    grid.iter().map(|&x| hermite_functions(n, x)[n]).collect()
}

fn regular_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let h = hermite_functions(n + 1, x);
    let d = if n == 0 {
        0.0
    } else {
        (n as f64 / 2.0).sqrt() * h[n - 1]
    } - ((n + 1) as f64 / 2.0).sqrt() * h[n + 1];
    (h[n], d)
}

/// Second solution of `y'' = (x² - 2n - 1) y` with parity opposite to
/// `ψ_n` and unit Wronskian `ψ_n y' - ψ_n' y = 1`; values and derivatives.
fn irregular_unnormalized(n: usize, grid: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let e = (2 * n + 1) as f64;
    let (p0, d0) = regular_with_derivative(n, 0.0);
    // even n: y(0) = 0, y'(0) = 1/ψ(0); odd n: y(0) = -1/ψ'(0), y'(0) = 0
    let start = if n % 2 == 0 { (0.0, 1.0 / p0) } else { (-1.0 / d0, 0.0) };
    let odd_solution = n % 2 == 0;
    let rhs = |x: f64, y: (f64, f64)| (y.1, (x * x - e) * y.0);
    let mut order: Vec<usize> = (0..grid.len()).collect();
    order.sort_by(|&a, &b| grid[a].abs().total_cmp(&grid[b].abs()));
    let mut vals = vec![0.0; grid.len()];
    let mut ders = vec![0.0; grid.len()];
    let (mut x, mut y) = (0.0f64, start);
    for &i in &order {
        let target = grid[i].abs();
        while x < target {
            let h = ODE_STEP.min(target - x);
            let k1 = rhs(x, y);
            let k2 = rhs(x + h / 2.0, (y.0 + h / 2.0 * k1.0, y.1 + h / 2.0 * k1.1));
            let k3 = rhs(x + h / 2.0, (y.0 + h / 2.0 * k2.0, y.1 + h / 2.0 * k2.1));
            let k4 = rhs(x + h, (y.0 + h * k3.0, y.1 + h * k3.1));
            y = (
                y.0 + h / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0),
                y.1 + h / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1),
            );
            x += h;
        }
        if grid[i] < 0.0 {
            // odd function: y(-x) = -y(x), y'(-x) = y'(x); even: the reverse
            if odd_solution {
                vals[i] = -y.0;
                ders[i] = y.1;
            } else {
                vals[i] = y.0;
                ders[i] = -y.1;
            }
        } else {
            vals[i] = y.0;
            ders[i] = y.1;
        }
    }
    (vals, ders)
}

/// Trapezoid weight of node `i` on a uniform grid.
fn trapezoid(grid: &[f64], i: usize) -> f64 {
    let h = grid[1] - grid[0];
    if i == 0 || i == grid.len() - 1 {
        h / 2.0
    } else {
        h
    }
}

/// Irregular solution `𝜑_n` and its derivative, scaled so that
/// `∫ f_nn ψ_n² dx = 1` on `grid`.
pub fn irregular_wavefunction(n: usize, grid: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    check_grid(grid, n, true)?;
    irregular_on(n, grid)
}

fn irregular_on(n: usize, grid: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let (mut v, mut d) = irregular_unnormalized(n, grid);
    let mut acc = 0.0;
    for (i, &x) in grid.iter().enumerate() {
        let (p, dp) = regular_with_derivative(n, x);
        let f = dp * v[i] + p * d[i];
        acc += f * p * p * trapezoid(grid, i);
    }
    if acc.abs() < 1e-300 {
        return Err(Error::SingularSystem(format!(
            "irregular solution {n} cannot be normalized"
        )));
    }
    for z in v.iter_mut().chain(d.iter_mut()) {
        *z /= acc;
    }
    Ok((v, d))
}

/// Wronskian `ψ_n 𝜑_n' - ψ_n' 𝜑_n` at every grid node.
pub fn wronskian(n: usize, grid: &[f64]) -> Result<Vec<f64>> {
    let (v, d) = irregular_wavefunction(n, grid)?;
    Ok(grid
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let (p, dp) = regular_with_derivative(n, x);
            p * d[i] - dp * v[i]
        })
        .collect())
}

fn pattern_from(m: usize, n: usize, grid: &[f64], irregular: &(Vec<f64>, Vec<f64>)) -> Vec<f64> {
    let (hi, _) = (m.max(n), m.min(n));
    grid.iter()
        .enumerate()
        .map(|(i, &x)| {
            let (p, dp) = regular_with_derivative(hi, x);
            dp * irregular.0[i] + p * irregular.1[i]
        })
        .collect()
}

/// `f_mn = d/dx (ψ_max(m,n) 𝜑_min(m,n))` on `grid`.
pub fn pattern_function(m: usize, n: usize, grid: &[f64]) -> Result<Vec<f64>> {
    check_grid(grid, m.max(n), true)?;
    let irr = irregular_on(m.min(n), grid)?;
    Ok(pattern_from(m, n, grid, &irr))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatternFunctionTable {
    pub n_max: usize,
    pub grid: Vec<f64>,
    values: Vec<Vec<f64>>,
}

impl PatternFunctionTable {
    pub fn new(n_max: usize, grid: &[f64], enforce_resolution: bool) -> Result<Self> {
        check_grid(grid, n_max, enforce_resolution)?;
        let irr: Vec<(Vec<f64>, Vec<f64>)> = (0..=n_max)
            .into_par_iter()
            .map(|n| irregular_on(n, grid))
            .collect::<Result<_>>()?;
        let l = n_max + 1;
        let values = (0..l * l)
            .into_par_iter()
            .map(|idx| {
                let (m, n) = (idx / l, idx % l);
                pattern_from(m, n, grid, &irr[m.min(n)])
            })
            .collect();
        Ok(PatternFunctionTable {
            n_max,
            grid: grid.to_vec(),
            values,
        })
    }

    pub fn get(&self, m: usize, n: usize) -> &[f64] {
        &self.values[m * (self.n_max + 1) + n]
    }

    /// `∫ f_mn ψ_a ψ_b dx` on the table grid.
    pub fn overlap(&self, m: usize, n: usize, a: usize, b: usize) -> f64 {
        let f = self.get(m, n);
        self.grid
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let h = hermite_functions(a.max(b), x);
                f[i] * h[a] * h[b] * trapezoid(&self.grid, i)
            })
            .sum()
    }
}

/// Density matrix over the product basis of [`OscillatorBasis`].
#[derive(Debug, Clone, PartialEq)]
pub struct VibrationalDensityMatrix {
    pub matrix: DMatrix<Complex64>,
}

impl VibrationalDensityMatrix {
    pub fn new(matrix: DMatrix<Complex64>) -> Result<Self> {
        if matrix.nrows() != matrix.ncols() {
            return Err(Error::InvalidArgument("density matrix must be square".into()));
        }
        Ok(VibrationalDensityMatrix { matrix })
    }

    pub fn pure(amplitudes: &[Complex64]) -> Self {
        let v = nalgebra::DVector::from_column_slice(amplitudes);
        let n = v.norm_squared();
        VibrationalDensityMatrix {
            matrix: &v * v.adjoint() / Complex64::new(n, 0.0),
        }
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn trace(&self) -> Complex64 {
        self.matrix.trace()
    }

    pub fn hermiticity_error(&self) -> f64 {
        (&self.matrix - self.matrix.adjoint())
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max)
    }

    pub fn min_eigenvalue(&self) -> f64 {
        let h = (&self.matrix + self.matrix.adjoint()) * Complex64::new(0.5, 0.0);
        h.symmetric_eigenvalues().iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn l1_norm(&self) -> f64 {
        self.matrix.iter().map(|z| z.norm()).sum()
    }

    pub fn l1_distance(&self, other: &Self) -> f64 {
        self.matrix
            .iter()
            .zip(other.matrix.iter())
            .map(|(a, b)| (a - b).norm())
            .sum()
    }

    pub fn check(&self, herm_tol: f64, trace_tol: f64, psd_tol: f64) -> Result<()> {
        let bad = |m: String| {
            Err(Error::Validation {
                path: "density".into(),
                message: m,
            })
        };
        if self.hermiticity_error() > herm_tol {
            return bad(format!("hermiticity error {:e}", self.hermiticity_error()));
        }
        if (self.trace() - 1.0).norm() > trace_tol {
            return bad(format!("trace {}", self.trace()));
        }
        if self.min_eigenvalue() < -psd_tol {
            return bad(format!("minimum eigenvalue {:e}", self.min_eigenvalue()));
        }
        Ok(())
    }
}

/// Seeded random density matrix of the given rank.
pub fn random_vibrational_density(dim: usize, rank: usize, seed: u64) -> VibrationalDensityMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = DMatrix::<Complex64>::from_fn(dim, rank.max(1), |_, _| {
        Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal))
    });
    let p = &g * g.adjoint();
    let tr = p.trace();
    VibrationalDensityMatrix { matrix: p / tr }
}

/// `Pr_Δ(x⃗)` per offset tuple on the dense product grid.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockwiseVibProbability {
    pub blocks: BTreeMap<Vec<i32>, Vec<Complex64>>,
}

impl BlockwiseVibProbability {
    /// Largest pointwise violation of `Pr_{-Δ} = conj(Pr_Δ)`.
    pub fn conjugation_error(&self) -> f64 {
        let mut e: f64 = 0.0;
        for (d, v) in &self.blocks {
            let neg: Vec<i32> = d.iter().map(|x| -x).collect();
            if let Some(w) = self.blocks.get(&neg) {
                for (a, b) in v.iter().zip(w) {
                    e = e.max((a - b.conj()).norm());
                }
            }
        }
        e
    }
}

/// Products `ψ_a ψ_b` per grid node: `table[a][b][i]`.
fn product_table(basis: &OscillatorBasis) -> Vec<Vec<Vec<f64>>> {
    let l = basis.levels();
    let h: Vec<Vec<f64>> = basis.grid.iter().map(|&x| hermite_functions(basis.n_max, x)).collect();
    (0..l)
        .map(|a| (0..l).map(|b| h.iter().map(|hx| hx[a] * hx[b]).collect()).collect())
        .collect()
}

/// Blockwise probabilities of `rho` at `t = 0`.
pub fn synthesize_blockwise(
    rho: &VibrationalDensityMatrix,
    basis: &OscillatorBasis,
) -> Result<BlockwiseVibProbability> {
    if rho.dim() != basis.dim() {
        return Err(Error::GridMismatch(format!(
            "density of dimension {} for basis of dimension {}",
            rho.dim(),
            basis.dim()
        )));
    }
    let prods = product_table(basis);
    let npts = basis.grid_points();
    let coords: Vec<Vec<usize>> = (0..npts).map(|p| basis.point_coords(p)).collect();
    let mut by_offset: BTreeMap<Vec<i32>, Vec<(usize, usize)>> = BTreeMap::new();
    for r in 0..rho.dim() {
        for c in 0..rho.dim() {
            let (n, m) = (basis.quanta(r), basis.quanta(c));
            let d: Vec<i32> = m.iter().zip(&n).map(|(&a, &b)| a as i32 - b as i32).collect();
            by_offset.entry(d).or_default().push((r, c));
        }
    }
    let blocks = by_offset
        .into_par_iter()
        .map(|(d, elems)| {
            let mut v = vec![ZERO; npts];
            for (r, c) in elems {
                let z = rho.matrix[(r, c)];
                if z == ZERO {
                    continue;
                }
                let (n, m) = (basis.quanta(r), basis.quanta(c));
                for (p, co) in coords.iter().enumerate() {
                    let mut w = 1.0;
                    for i in 0..co.len() {
                        w *= prods[n[i]][m[i]][co[i]];
                    }
                    v[p] += z * w;
                }
            }
            (d, v)
        })
        .collect();
    Ok(BlockwiseVibProbability { blocks })
}

/// `Pr(x⃗, t_k)` on the dense grid, `values[k * points + p]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VibrationalMeasurement {
    pub time_nodes: Vec<f64>,
    pub values: Vec<f64>,
}

impl VibrationalMeasurement {
    pub fn frame(&self, k: usize, points: usize) -> &[f64] {
        &self.values[k * points..(k + 1) * points]
    }
}

/// `Pr(x⃗, t) = Re Σ_Δ Pr_Δ e^{i k ω₀ t}` on `times`.
pub fn probability_from_blockwise(
    bw: &BlockwiseVibProbability,
    basis: &OscillatorBasis,
    times: &[f64],
) -> VibrationalMeasurement {
    let npts = basis.grid_points();
    let frames: Vec<Vec<f64>> = times
        .par_iter()
        .map(|&t| {
            let mut f = vec![0.0; npts];
            for (d, v) in &bw.blocks {
                let ph = Complex64::from_polar(1.0, basis.offset_frequency(d) as f64 * basis.base_frequency * t);
                for (fp, z) in f.iter_mut().zip(v) {
                    *fp += (z * ph).re;
                }
            }
            f
        })
        .collect();
    VibrationalMeasurement {
        time_nodes: times.to_vec(),
        values: frames.concat(),
    }
}

pub fn synthesize_measurement(
    rho: &VibrationalDensityMatrix,
    basis: &OscillatorBasis,
    times: &[f64],
) -> Result<VibrationalMeasurement> {
    Ok(probability_from_blockwise(
        &synthesize_blockwise(rho, basis)?,
        basis,
        times,
    ))
}

/// Time-Fourier components of a measurement and the offsets sharing each.
#[derive(Debug, Clone, PartialEq)]
pub struct VibComponents {
    /// `Pr_k(x⃗) = (1/T) ∫ e^{-ikω₀t} Pr dt`.
    pub components: BTreeMap<i64, Vec<Complex64>>,
    pub classes: BTreeMap<i64, Vec<Vec<i32>>>,
}

impl VibComponents {
    /// Beat indices whose component sums several offsets.
    pub fn ambiguous(&self) -> Vec<i64> {
        self.classes
            .iter()
            .filter(|(_, v)| v.len() > 1)
            .map(|(k, _)| *k)
            .collect()
    }
}

fn check_time_sampling(basis: &OscillatorBasis, times: &[f64]) -> Result<()> {
    let n = times.len();
    if n < 2 {
        return Err(Error::InvalidGrid("at least two time samples required".into()));
    }
    let t = basis.period();
    let dt = t / n as f64;
    for (k, &tk) in times.iter().enumerate() {
        if (tk - times[0] - k as f64 * dt).abs() > 1e-9 * t {
            return Err(Error::InvalidGrid("time nodes must sample one period uniformly".into()));
        }
    }
    let bound = t / basis.default_time_samples() as f64;
    if basis.enforce_resolution && dt > bound * (1.0 + 1e-12) {
        return Err(Error::Aliasing {
            harmonic: basis.max_beat(),
            limit: ((n - 1) / 2) as i64,
            samples: n,
        });
    }
    Ok(())
}

/// Separates the measurement into beat components and assigns every beat
/// produced by a single offset directly.
pub fn blockwise_from_measurement(
    measured: &VibrationalMeasurement,
    basis: &OscillatorBasis,
) -> Result<(BlockwiseVibProbability, VibComponents)> {
    check_time_sampling(basis, &measured.time_nodes)?;
    let npts = basis.grid_points();
    if measured.values.len() != npts * measured.time_nodes.len() {
        return Err(Error::GridMismatch("measurement size differs from grid".into()));
    }
    let classes = basis.frequency_classes();
    let nt = measured.time_nodes.len() as f64;
    let components: BTreeMap<i64, Vec<Complex64>> = classes
        .keys()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|&&k| {
            let mut v = vec![ZERO; npts];
            for (ti, &t) in measured.time_nodes.iter().enumerate() {
                let ph = Complex64::from_polar(1.0 / nt, -(k as f64) * basis.base_frequency * t);
                for (z, &p) in v.iter_mut().zip(measured.frame(ti, npts)) {
                    *z += ph * p;
                }
            }
            (k, v)
        })
        .collect();
    let mut blocks = BTreeMap::new();
    for (k, offs) in &classes {
        if offs.len() == 1 {
            blocks.insert(offs[0].clone(), components[k].clone());
        }
    }
    Ok((
        BlockwiseVibProbability { blocks },
        VibComponents { components, classes },
    ))
}

/// `⟨n⃗|ρ|m⃗⟩ = ∫ Pr_Δ Π f_{m_i n_i}(x_i) d^N x` for every offset present.
pub fn density_from_blockwise(
    bw: &BlockwiseVibProbability,
    table: &PatternFunctionTable,
    basis: &OscillatorBasis,
) -> Result<VibrationalDensityMatrix> {
    if table.grid != basis.grid || table.n_max != basis.n_max {
        return Err(Error::GridMismatch("pattern table differs from basis".into()));
    }
    let dim = basis.dim();
    let npts = basis.grid_points();
    let coords: Vec<Vec<usize>> = (0..npts).map(|p| basis.point_coords(p)).collect();
    let wts: Vec<f64> = coords
        .iter()
        .map(|c| c.iter().map(|&i| trapezoid(&basis.grid, i)).product())
        .collect();
    let elems: Vec<(usize, usize, Complex64)> = (0..dim * dim)
        .into_par_iter()
        .filter_map(|idx| {
            let (r, c) = (idx / dim, idx % dim);
            let (n, m) = (basis.quanta(r), basis.quanta(c));
            let d: Vec<i32> = m.iter().zip(&n).map(|(&a, &b)| a as i32 - b as i32).collect();
            let v = bw.blocks.get(&d)?;
            let fs: Vec<&[f64]> = (0..n.len()).map(|i| table.get(m[i], n[i])).collect();
            let mut acc = ZERO;
            for (p, co) in coords.iter().enumerate() {
                let mut w = wts[p];
                for i in 0..co.len() {
                    w *= fs[i][co[i]];
                }
                acc += v[p] * w;
            }
            Some((r, c, acc))
        })
        .collect();
    let mut mat = DMatrix::from_element(dim, dim, ZERO);
    for (r, c, z) in elems {
        mat[(r, c)] = z;
    }
    Ok(VibrationalDensityMatrix { matrix: mat })
}

/// Product of mode-momentum powers `Π p_i^{k_i}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MomentumObservable {
    pub powers: Vec<u32>,
}

fn momentum_power(levels: usize, k: u32) -> DMatrix<Complex64> {
    // build in an enlarged basis so truncation does not touch kept elements
    let big = levels + k as usize + 1;
    let mut p = DMatrix::from_element(big, big, ZERO);
    for n in 0..big - 1 {
        let s = ((n + 1) as f64 / 2.0).sqrt();
        // p = i (a† - a)/√2
        p[(n + 1, n)] = Complex64::new(0.0, s);
        p[(n, n + 1)] = Complex64::new(0.0, -s);
    }
    let mut acc = DMatrix::<Complex64>::identity(big, big);
    for _ in 0..k {
        acc = &acc * &p;
    }
    acc.view((0, 0), (levels, levels)).into_owned()
}

impl MomentumObservable {
    /// Operator matrix over the product basis.
    pub fn operator(&self, basis: &OscillatorBasis) -> Result<DMatrix<Complex64>> {
        if self.powers.len() != basis.mode_count() {
            return Err(Error::InvalidArgument("one momentum power per mode required".into()));
        }
        let l = basis.levels();
        let factors: Vec<DMatrix<Complex64>> = self.powers.iter().map(|&k| momentum_power(l, k)).collect();
        let mut out = factors[0].clone();
        for f in &factors[1..] {
            out = out.kronecker(f);
        }
        Ok(out)
    }
}

/// Extra constraint fixing the coherence between two degenerate states
/// through a measured momentum expectation value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentumConstraint {
    pub observable: MomentumObservable,
    pub bra: Vec<usize>,
    pub ket: Vec<usize>,
    pub measured: f64,
}

/// `|Tr(ρA) - measured|`.
pub fn degenerate_momentum_constraint(
    rho: &VibrationalDensityMatrix,
    observable: &DMatrix<Complex64>,
    measured: f64,
) -> Result<f64> {
    if observable.shape() != rho.matrix.shape() {
        return Err(Error::GridMismatch("observable and density differ in shape".into()));
    }
    Ok(((&rho.matrix * observable).trace() - measured).norm())
}

impl MomentumConstraint {
    /// Moves `⟨bra|ρ|ket⟩` and its conjugate along the observable so that
    /// `Tr(ρA)` equals the measurement. Returns the residual before the step.
    pub fn project(&self, rho: &mut VibrationalDensityMatrix, basis: &OscillatorBasis) -> Result<f64> {
        let a = self.observable.operator(basis)?;
        let residual = (&rho.matrix * &a).trace().re - self.measured;
        let (i, j) = (basis.index(&self.bra), basis.index(&self.ket));
        // Tr(ρA) depends on ρ_ij through ρ_ij A_ji + ρ_ji A_ij
        let g = a[(j, i)].conj();
        let norm = 2.0 * g.norm_sqr();
        if norm < 1e-14 {
            warn!(
                "uninformative constraint: observable does not couple {:?} and {:?}",
                self.bra, self.ket
            );
            return Ok(residual.abs());
        }
        let step = g * (residual / norm);
        rho.matrix[(i, j)] -= step;
        rho.matrix[(j, i)] = rho.matrix[(i, j)].conj();
        Ok(residual.abs())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VibConstraintSet {
    pub hio_beta: f64,
    pub psd_tolerance: f64,
    pub hio_max_steps: usize,
    /// Known populations in basis order.
    #[serde(default)]
    pub diagonal: Option<Vec<f64>>,
    #[serde(default)]
    pub momentum: Vec<MomentumConstraint>,
    pub zero_guard: f64,
}

impl Default for VibConstraintSet {
    fn default() -> Self {
        VibConstraintSet {
            hio_beta: 0.9,
            psd_tolerance: 1e-8,
            hio_max_steps: 200,
            diagonal: None,
            momentum: Vec::new(),
            zero_guard: 1e-14,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VibQtConfig {
    pub max_iterations: usize,
    pub plateau_tolerance: f64,
    pub plateau_window: usize,
    pub divergence_factor: f64,
    pub constraints: VibConstraintSet,
}

impl Default for VibQtConfig {
    fn default() -> Self {
        VibQtConfig {
            max_iterations: 10,
            plateau_tolerance: 1e-6,
            plateau_window: 5,
            divergence_factor: 10.0,
            constraints: VibConstraintSet::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct VibQtOutcome {
    pub history: Vec<IterationRecord>,
    pub rho: VibrationalDensityMatrix,
    pub blockwise: BlockwiseVibProbability,
}

/// Rescales the offsets of every beat class onto the measured component.
fn vib_probability_constraint(bw: &mut BlockwiseVibProbability, comps: &VibComponents, guard: f64) -> usize {
    let mut guarded = 0;
    for (k, offs) in &comps.classes {
        let target = &comps.components[k];
        let npts = target.len();
        for p in 0..npts {
            let sum: Complex64 = offs.iter().map(|d| bw.blocks[d][p]).sum();
            if sum.norm() < guard {
                let share = target[p] / offs.len() as f64;
                for d in offs {
                    bw.blocks.get_mut(d).expect("offset present")[p] = share;
                }
                guarded += 1;
            } else {
                let beta = target[p] / sum;
                for d in offs {
                    bw.blocks.get_mut(d).expect("offset present")[p] *= beta;
                }
            }
        }
    }
    guarded
}

fn vib_density_constraints(
    rho: &mut VibrationalDensityMatrix,
    c: &VibConstraintSet,
    basis: &OscillatorBasis,
) -> Result<(usize, bool)> {
    hermitize(&mut rho.matrix);
    if let Some(d) = &c.diagonal {
        if d.len() != rho.dim() {
            return Err(Error::GridMismatch("diagonal constraint length differs".into()));
        }
        for (i, &v) in d.iter().enumerate() {
            rho.matrix[(i, i)] = Complex64::new(v, 0.0);
        }
    }
    for mc in &c.momentum {
        mc.project(rho, basis)?;
    }
    let (steps, ok) = hio_positivity(&mut rho.matrix, c.hio_beta, c.psd_tolerance, c.hio_max_steps);
    let tr = rho.trace().re;
    if tr.abs() > 1e-300 {
        rho.matrix /= Complex64::new(tr, 0.0);
    }
    Ok((steps, ok))
}

pub fn vib_density_error(a: &VibrationalDensityMatrix, reference: &VibrationalDensityMatrix) -> Result<f64> {
    if a.dim() != reference.dim() {
        return Err(Error::GridMismatch("density matrices differ in dimension".into()));
    }
    let n = reference.l1_norm();
    if n == 0.0 {
        return Err(Error::ZeroNormReference);
    }
    Ok(a.l1_distance(reference) / n)
}

/// Iterative tomography between the density matrix and the blockwise
/// probabilities. `reference = None` measures `ε(ρ)` against the previous
/// iterate.
pub fn iterative_vib_qt(
    initial: &VibrationalDensityMatrix,
    measured: &VibrationalMeasurement,
    basis: &OscillatorBasis,
    config: &VibQtConfig,
    reference: Option<&VibrationalDensityMatrix>,
) -> Result<VibQtOutcome> {
    basis.validate()?;
    let (_, comps) = blockwise_from_measurement(measured, basis)?;
    let table = PatternFunctionTable::new(basis.n_max, &basis.grid, basis.enforce_resolution)?;
    debug!("ambiguous beat classes: {:?}", comps.ambiguous());
    let mut rho = initial.clone();
    let mut history = Vec::new();
    let mut min_err = f64::INFINITY;
    let mut last_bw = synthesize_blockwise(&rho, basis)?;
    for it in 1..=config.max_iterations {
        let mut bw = synthesize_blockwise(&rho, basis)?;
        let guarded = vib_probability_constraint(&mut bw, &comps, config.constraints.zero_guard);
        let mut next = density_from_blockwise(&bw, &table, basis)?;
        let (_, hio_ok) = vib_density_constraints(&mut next, &config.constraints, basis)?;
        let synth = synthesize_blockwise(&next, basis)?;
        let pr = probability_from_blockwise(&synth, basis, &measured.time_nodes);
        let error_pr = crate::iterative::probability_error(&pr.values, &measured.values)?;
        let error_rho = match reference {
            Some(r) => vib_density_error(&next, r)?,
            None => vib_density_error(&next, &rho).unwrap_or(0.0),
        };
        info!("iteration {it}: eps_rho {error_rho:.4e} eps_pr {error_pr:.4e}");
        history.push(IterationRecord {
            iteration: it,
            error_rho,
            error_pr,
            hio_converged: hio_ok,
            guarded_nodes: guarded,
        });
        rho = next;
        last_bw = synth;
        min_err = min_err.min(error_pr);
        if min_err > 0.0 && error_pr > config.divergence_factor * min_err {
            return Err(Error::Diverged {
                iteration: it,
                error: error_pr,
                minimum: min_err,
                history,
            });
        }
        if error_pr < 1e-14 || plateaued(&history, config.plateau_tolerance, config.plateau_window) {
            break;
        }
    }
    Ok(VibQtOutcome {
        history,
        rho,
        blockwise: last_bw,
    })
}

/// Generalized Laguerre polynomial `L_n^α(x)`.
pub fn laguerre(n: usize, alpha: usize, x: f64) -> f64 {
    let a = alpha as f64;
    if n == 0 {
        return 1.0;
    }
    let (mut l0, mut l1) = (1.0, 1.0 + a - x);
    for k in 1..n {
        let kf = k as f64;
        let l2 = ((2.0 * kf + 1.0 + a - x) * l1 - (kf + a) * l0) / (kf + 1.0);
        l0 = l1;
        l1 = l2;
    }
    l1
}

fn factorial_ratio(n: usize, m: usize) -> f64 {
    // n!/m! for n <= m
    (n + 1..=m).fold(1.0, |acc, k| acc / k as f64)
}

/// Wigner function of the operator `|m⟩⟨n|` at `(q, p)`.
pub fn wigner_basis_element(m: usize, n: usize, q: f64, p: f64) -> Complex64 {
    if m < n {
        return wigner_basis_element(n, m, q, p).conj();
    }
    let r2 = q * q + p * p;
    let sign = if n % 2 == 0 { 1.0 } else { -1.0 };
    let z = Complex64::new(2f64.sqrt() * q, -(2f64.sqrt()) * p).powu((m - n) as u32);
    z * (sign / PI * factorial_ratio(n, m).sqrt() * (-r2).exp() * laguerre(n, m - n, 2.0 * r2))
}

/// Square phase-space grid with uniform spacing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseSpaceGrid {
    pub q: Vec<f64>,
    pub p: Vec<f64>,
}

impl PhaseSpaceGrid {
    /// Grid over `±(√(2 n_max + 1) + 4)` with `points` nodes per axis.
    pub fn covering(n_max: usize, points: usize) -> Self {
        let r = ((2 * n_max + 1) as f64).sqrt() + 4.0;
        let axis = OscillatorBasis::uniform_grid(r, points);
        PhaseSpaceGrid {
            q: axis.clone(),
            p: axis,
        }
    }

    fn reach(&self) -> f64 {
        let e = |v: &[f64]| v[0].abs().min(v[v.len() - 1].abs());
        e(&self.q).min(e(&self.p))
    }

    fn cell(&self) -> f64 {
        (self.q[1] - self.q[0]) * (self.p[1] - self.p[0])
    }
}

/// `W(q, p)` of a single-mode density matrix, `values[iq * n_p + ip]`.
pub fn wigner_from_density(rho: &DMatrix<Complex64>, grid: &PhaseSpaceGrid) -> Vec<f64> {
    let l = rho.nrows();
    let pts: Vec<(f64, f64)> = grid
        .q
        .iter()
        .flat_map(|&q| grid.p.iter().map(move |&p| (q, p)))
        .collect();
    pts.par_iter()
        .map(|&(q, p)| {
            let mut acc = ZERO;
            for m in 0..l {
                for n in 0..l {
                    let z = rho[(m, n)];
                    if z != ZERO {
                        acc += z * wigner_basis_element(m, n, q, p);
                    }
                }
            }
            acc.re
        })
        .collect()
}

/// `ρ_mn = 2π ∬ W W_{|n⟩⟨m|} dq dp` for `m, n ≤ n_max`.
pub fn density_from_wigner(w: &[f64], grid: &PhaseSpaceGrid, n_max: usize) -> Result<DMatrix<Complex64>> {
    if w.len() != grid.q.len() * grid.p.len() {
        return Err(Error::GridMismatch("Wigner samples differ from grid".into()));
    }
    let need = ((2 * n_max + 1) as f64).sqrt() + 4.0;
    if grid.reach() < need - 1e-12 {
        return Err(Error::InvalidGrid(format!(
            "phase-space grid reaches {:.3}, truncation needs {need:.3}",
            grid.reach()
        )));
    }
    let l = n_max + 1;
    let da = grid.cell();
    let np = grid.p.len();
    let vals: Vec<Complex64> = (0..l * l)
        .into_par_iter()
        .map(|idx| {
            let (m, n) = (idx / l, idx % l);
            let mut acc = ZERO;
            for (iq, &q) in grid.q.iter().enumerate() {
                for (ip, &p) in grid.p.iter().enumerate() {
                    acc += wigner_basis_element(n, m, q, p) * w[iq * np + ip];
                }
            }
            acc * (2.0 * PI * da)
        })
        .collect();
    Ok(DMatrix::from_fn(l, l, |m, n| vals[m * l + n]))
}

/// `∫ W dp` at every `q` node.
pub fn position_marginal(w: &[f64], grid: &PhaseSpaceGrid) -> Vec<f64> {
    let np = grid.p.len();
    let dp = grid.p[1] - grid.p[0];
    (0..grid.q.len())
        .map(|iq| w[iq * np..(iq + 1) * np].iter().sum::<f64>() * dp)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn grid(n_max: usize) -> Vec<f64> {
        let r = ((2 * n_max + 1) as f64).sqrt() + 5.5;
        OscillatorBasis::uniform_grid(r, 601)
    }

    #[test]
    fn ground_state_normalized() {
        let g = grid(0);
        let psi = regular_wavefunction(0, &g);
        let norm: f64 = psi.iter().enumerate().map(|(i, v)| v * v * trapezoid(&g, i)).sum();
        assert_abs_diff_eq!(norm, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(psi[300], PI.powf(-0.25), epsilon = 1e-14);
    }

    #[test]
    fn wronskian_constant() {
        for n in 0..5 {
            let w = wronskian(n, &grid(4)).unwrap();
            let w0 = w[w.len() / 2];
            for v in &w {
                assert!((v - w0).abs() <= 1e-6 * w0.abs(), "n={n}: {v} vs {w0}");
            }
        }
    }

    #[test]
    fn pattern_function_small_cases() {
        let g = grid(1);
        let t = PatternFunctionTable::new(1, &g, true).unwrap();
        assert_abs_diff_eq!(t.overlap(0, 0, 0, 0), 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(t.overlap(0, 0, 1, 1), 0.0, epsilon = 1e-6);
        assert_abs_diff_eq!(t.overlap(1, 0, 1, 0), 1.0, epsilon = 1e-6);
    }

    #[test]
    fn coarse_grid_rejected() {
        let g = OscillatorBasis::uniform_grid(8.0, 9);
        assert!(matches!(
            irregular_wavefunction(2, &g),
            Err(Error::GridTooCoarse { .. })
        ));
    }

    #[test]
    fn beat_classes() {
        let b = OscillatorBasis::new(0.2, vec![1, 3], vec![12.0, 12.0], 2, grid(2)).unwrap();
        let c = b.frequency_classes();
        assert_eq!(c[&0], vec![vec![0, 0]]);
        assert_eq!(c[&1], vec![vec![-2, 1], vec![1, 0]]);
        assert_eq!(c[&3], vec![vec![0, 1]]);
        assert_eq!(b.default_time_samples(), 24);
        assert!(OscillatorBasis::new(0.2, vec![2, 4], vec![1.0, 1.0], 2, grid(2)).is_err());
    }

    #[test]
    fn momentum_matrix_element() {
        let b = OscillatorBasis::new(0.2, vec![1, 2], vec![1.0, 1.0], 2, grid(2)).unwrap();
        let a = MomentumObservable { powers: vec![2, 1] }.operator(&b).unwrap();
        let z = a[(b.index(&[2, 0]), b.index(&[0, 1]))];
        assert_abs_diff_eq!(z.re, 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(z.im, 0.5, epsilon = 1e-14);
        assert_abs_diff_eq!((&a - a.adjoint()).norm(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn wigner_fock_states() {
        let w0 = wigner_basis_element(0, 0, 0.3, -0.2);
        assert_abs_diff_eq!(w0.re, (-(0.09f64 + 0.04)).exp() / PI, epsilon = 1e-15);
        assert_abs_diff_eq!(wigner_basis_element(1, 1, 0.0, 0.0).re, -1.0 / PI, epsilon = 1e-15);
    }

    #[test]
    fn laguerre_values() {
        assert_abs_diff_eq!(laguerre(2, 1, 0.5), 0.5 * 0.25 - 3.0 * 0.5 + 3.0, epsilon = 1e-14);
        assert_abs_diff_eq!(laguerre(1, 0, 0.0), 1.0, epsilon = 1e-15);
    }
}
