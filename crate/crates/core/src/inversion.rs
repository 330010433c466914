//! Tikhonov-regularized recovery of `Pr(θ, φ)` from diffraction frames.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffraction::{DiffractionDataset, KernelMatrix};
use crate::error::{Error, Result};
use crate::rotor::AngularDistribution;

/// Relative eigenvalue floor below which `KᵀK` counts as rank deficient.
const RANK_TOLERANCE: f64 = 1e-13;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SolverBackend {
    /// Cholesky factorization of `KᵀK + λE`.
    #[default]
    NormalEquations,
    /// QR of the stacked system `[K; √λ E]`.
    AugmentedLeastSquares,
}

/// Factorized `KᵀK + λE` for repeated solves at fixed `λ`.
pub struct TikhonovSolver<'a> {
    kernel: &'a DMatrix<f64>,
    lambda: f64,
    backend: SolverBackend,
    cholesky: Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
    qr: Option<(DMatrix<f64>, DMatrix<f64>)>,
}

impl<'a> TikhonovSolver<'a> {
    pub fn new(kernel: &'a DMatrix<f64>, lambda: f64, backend: SolverBackend) -> Result<Self> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {lambda}")));
        }
        let n = kernel.ncols();
        if lambda == 0.0 {
            let ktk = kernel.transpose() * kernel;
            let eig = SymmetricEigen::new(ktk);
            let max = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
            let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
            if kernel.nrows() < n || max <= 0.0 || min <= RANK_TOLERANCE * max {
                return Err(Error::SingularSystem(format!(
                    "K^T K rank deficient at lambda = 0 (eigenvalue range {min:e}..{max:e})"
                )));
            }
        }
        let mut solver = TikhonovSolver {
            kernel,
            lambda,
            backend,
            cholesky: None,
            qr: None,
        };
        match backend {
            SolverBackend::NormalEquations => {
                let mut a = kernel.transpose() * kernel;
                for i in 0..n {
                    a[(i, i)] += lambda;
                }
                solver.cholesky = Some(
                    a.cholesky()
                        .ok_or_else(|| Error::SingularSystem("Cholesky factorization failed".into()))?,
                );
            }
            SolverBackend::AugmentedLeastSquares => {
                let m = kernel.nrows();
                let mut aug = DMatrix::zeros(m + n, n);
                aug.view_mut((0, 0), (m, n)).copy_from(kernel);
                let sl = lambda.sqrt();
                for i in 0..n {
                    aug[(m + i, i)] = sl;
                }
                let qr = aug.qr();
                let r = qr.r();
                if (0..n).any(|i| r[(i, i)] == 0.0) {
                    return Err(Error::SingularSystem("triangular factor has a zero pivot".into()));
                }
                solver.qr = Some((qr.q(), r));
            }
        }
        Ok(solver)
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn backend(&self) -> SolverBackend {
        self.backend
    }

    pub fn solve(&self, frame: &[f64]) -> Result<DVector<f64>> {
        if frame.len() != self.kernel.nrows() {
            return Err(Error::GridMismatch(format!(
                "frame has {} pixels, kernel has {} rows",
                frame.len(),
                self.kernel.nrows()
            )));
        }
        let b = DVector::from_column_slice(frame);
        if let Some(ch) = &self.cholesky {
            return Ok(ch.solve(&(self.kernel.transpose() * b)));
        }
        let (q, r) = self.qr.as_ref().expect("one backend is initialized");
        let mut rhs = DVector::zeros(q.nrows());
        rhs.rows_mut(0, b.len()).copy_from(&b);
        let qtb = q.transpose() * rhs;
        r.solve_upper_triangular(&qtb)
            .ok_or_else(|| Error::SingularSystem("back substitution failed".into()))
    }
}

/// `Pr = (KᵀK + λE)⁻¹ KᵀI` for a single frame.
pub fn tikhonov_solve(kernel: &KernelMatrix, frame: &[f64], lambda: f64) -> Result<Vec<f64>> {
    let solver = TikhonovSolver::new(&kernel.matrix, lambda, SolverBackend::NormalEquations)?;
    Ok(solver.solve(frame)?.iter().copied().collect())
}

/// Selects the kernel rows out of a full detector frame.
fn masked_frame(kernel: &KernelMatrix, frame: &[f64]) -> Vec<f64> {
    kernel.pixel_rows.iter().map(|&p| frame[p]).collect()
}

/// Inverts every frame of `dataset` independently at a common `λ`.
pub fn invert_dataset(kernel: &KernelMatrix, dataset: &DiffractionDataset, lambda: f64) -> Result<AngularDistribution> {
    if kernel.pixel_rows.iter().any(|&p| p >= dataset.n_pixels()) {
        return Err(Error::GridMismatch("kernel rows exceed detector pixels".into()));
    }
    let solver = TikhonovSolver::new(&kernel.matrix, lambda, SolverBackend::NormalEquations)?;
    let frames: Vec<Result<Vec<f64>>> = (0..dataset.time_nodes.len())
        .into_par_iter()
        .map(|k| {
            let f = masked_frame(kernel, dataset.frame(k));
            Ok(solver.solve(&f)?.iter().copied().collect())
        })
        .collect();
    let mut values = Vec::with_capacity(kernel.cols() * dataset.time_nodes.len());
    for f in frames {
        values.extend(f?);
    }
    Ok(AngularDistribution {
        grid: kernel.grid.clone(),
        time_nodes: dataset.time_nodes.clone(),
        values,
    })
}

/// Perturbation used for empirical condition numbers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseModel {
    /// White Gaussian noise with standard deviation `relative · rms(I)`.
    Gaussian { relative: f64 },
    /// Shot noise with `counts` expected per frame.
    Poisson { counts: f64 },
}

impl NoiseModel {
    fn perturbation(&self, frame: &[f64], rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        match *self {
            NoiseModel::Gaussian { relative } => {
                let rms = (frame.iter().map(|v| v * v).sum::<f64>() / frame.len() as f64).sqrt();
                Ok(frame
                    .iter()
                    .map(|_| relative * rms * rng.sample::<f64, _>(StandardNormal))
                    .collect())
            }
            NoiseModel::Poisson { counts } => {
                let total: f64 = frame.iter().sum();
                if !(total > 0.0) || !(counts > 0.0) {
                    return Err(Error::InvalidArgument(
                        "Poisson perturbation needs positive counts".into(),
                    ));
                }
                let scale = counts / total;
                frame
                    .iter()
                    .map(|&v| {
                        let mean = (v * scale).max(0.0);
                        if mean == 0.0 {
                            return Ok(0.0);
                        }
                        let c: f64 = Poisson::new(mean)
                            .map_err(|e| Error::InvalidArgument(e.to_string()))?
                            .sample(rng);
                        Ok(c / scale - v)
                    })
                    .collect()
            }
        }
    }
}

/// Eigendecomposition of `KᵀK`, used to sweep `λ` without refactorizing.
#[derive(Debug, Clone)]
pub struct KernelSpectrum {
    kernel: DMatrix<f64>,
    /// Eigenvalues `σ²` of `KᵀK`.
    pub sigma2: DVector<f64>,
    vectors: DMatrix<f64>,
}

impl KernelSpectrum {
    pub fn new(kernel: &DMatrix<f64>) -> Self {
        let eig = SymmetricEigen::new(kernel.transpose() * kernel);
        KernelSpectrum {
            kernel: kernel.clone(),
            sigma2: eig.eigenvalues.map(|v| v.max(0.0)),
            vectors: eig.eigenvectors,
        }
    }

    /// Coordinates of `KᵀI` in the eigenbasis.
    fn project(&self, frame: &[f64]) -> DVector<f64> {
        self.vectors.transpose() * (self.kernel.transpose() * DVector::from_column_slice(frame))
    }

    fn filtered(&self, coeffs: &DVector<f64>, lambda: f64) -> Result<DVector<f64>> {
        let mut y = coeffs.clone();
        for (i, v) in y.iter_mut().enumerate() {
            let d = self.sigma2[i] + lambda;
            if d <= 0.0 {
                return Err(Error::SingularSystem("zero mode at lambda = 0".into()));
            }
            *v /= d;
        }
        Ok(&self.vectors * y)
    }

    pub fn solve(&self, frame: &[f64], lambda: f64) -> Result<DVector<f64>> {
        self.filtered(&self.project(frame), lambda)
    }

    /// `(‖I − K·Pr‖², ‖Pr‖²)` at `λ`.
    pub fn norms(&self, frame: &[f64], lambda: f64) -> Result<(f64, f64)> {
        let x = self.solve(frame, lambda)?;
        let r = &self.kernel * &x - DVector::from_column_slice(frame);
        Ok((r.norm_squared(), x.norm_squared()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionEstimate {
    pub mean: f64,
    /// Sample standard deviation over trials (0 for a single trial).
    pub spread: f64,
    pub min: f64,
    pub max: f64,
}

fn condition_from_spectrum(
    spectrum: &KernelSpectrum,
    frame: &[f64],
    lambda: f64,
    noise: NoiseModel,
    trials: usize,
    seed: u64,
) -> Result<ConditionEstimate> {
    if trials == 0 {
        return Err(Error::InvalidArgument(
            "condition estimate needs at least one trial".into(),
        ));
    }
    let pr = spectrum.solve(frame, lambda)?;
    let pr_norm = pr.norm();
    let i_norm = frame.iter().map(|v| v * v).sum::<f64>().sqrt();
    if pr_norm == 0.0 || i_norm == 0.0 {
        return Err(Error::ZeroNormReference);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(trials);
    for _ in 0..trials {
        let di = noise.perturbation(frame, &mut rng)?;
        let di_norm = di.iter().map(|v| v * v).sum::<f64>().sqrt();
        if di_norm == 0.0 {
            continue;
        }
        let dpr = spectrum.solve(&di, lambda)?;
        samples.push((dpr.norm() / pr_norm) / (di_norm / i_norm));
    }
    if samples.is_empty() {
        return Err(Error::ZeroNormReference);
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let spread = if samples.len() > 1 {
        (samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Ok(ConditionEstimate {
        mean,
        spread,
        min: samples.iter().cloned().fold(f64::INFINITY, f64::min),
        max: samples.iter().cloned().fold(0.0, f64::max),
    })
}

/// Empirical `(‖ΔPr‖/‖Pr‖)/(‖ΔI‖/‖I‖)` around the reference `frame`.
pub fn condition_number(
    kernel: &KernelMatrix,
    frame: &[f64],
    lambda: f64,
    noise: NoiseModel,
    trials: usize,
    seed: u64,
) -> Result<ConditionEstimate> {
    let spectrum = KernelSpectrum::new(&kernel.matrix);
    condition_from_spectrum(&spectrum, frame, lambda, noise, trials, seed)
}

/// `n` log-spaced values from `lo` to `hi` inclusive.
pub fn log_lambda_grid(lo: f64, hi: f64, n: usize) -> Result<Vec<f64>> {
    if !(lo > 0.0 && hi > lo) || n < 2 {
        return Err(Error::InvalidArgument(
            "lambda grid needs 0 < lo < hi and n >= 2".into(),
        ));
    }
    let (a, b) = (lo.log10(), hi.log10());
    Ok((0..n)
        .map(|i| 10f64.powf(a + (b - a) * i as f64 / (n - 1) as f64))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LCurveOptions {
    pub noise: NoiseModel,
    pub trials: usize,
    pub seed: u64,
    /// Condition-number ceiling that opens the admissible band.
    pub max_condition: f64,
    /// Smallest signed curvature accepted as a corner.
    pub min_curvature: f64,
    /// Frame around which conditioning is measured; the scanned frame when
    /// absent.
    #[serde(skip)]
    pub reference: Option<Vec<f64>>,
}

impl Default for LCurveOptions {
    fn default() -> Self {
        LCurveOptions {
            noise: NoiseModel::Gaussian { relative: 1e-2 },
            trials: 8,
            seed: 0,
            max_condition: 10.0,
            min_curvature: 1e-2,
            reference: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegularizationReport {
    pub lambda_grid: Vec<f64>,
    pub residual_norms: Vec<f64>,
    pub solution_norms: Vec<f64>,
    pub condition_numbers: Vec<f64>,
    pub condition_spread: Vec<f64>,
    /// Signed Menger curvature at interior points (0 at the ends).
    pub curvature: Vec<f64>,
    pub turning_point_lambda: Option<f64>,
    pub selected_lambda: f64,
    pub admissible_band: Option<(f64, f64)>,
}

impl RegularizationReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "lambda [1],residual_norm_sq [intensity^2],solution_norm_sq [1],cond [1],cond_spread [1],curvature [1]\n",
        );
        for i in 0..self.lambda_grid.len() {
            out.push_str(&format!(
                "{:e},{:e},{:e},{:e},{:e},{:e}\n",
                self.lambda_grid[i],
                self.residual_norms[i],
                self.solution_norms[i],
                self.condition_numbers[i],
                self.condition_spread[i],
                self.curvature[i]
            ));
        }
        out
    }
}

/// Signed curvature of the circle through three points; positive for a
/// counter-clockwise turn.
pub fn menger_curvature(a: (f64, f64), b: (f64, f64), c: (f64, f64)) -> f64 {
    let cross = (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0);
    let d = |p: (f64, f64), q: (f64, f64)| ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt();
    let denom = d(a, b) * d(b, c) * d(a, c);
    if denom == 0.0 {
        0.0
    } else {
        2.0 * cross / denom
    }
}

/// L-curve over `lambda_grid` with conditioning at each point.
///
/// The corner is the interior point of largest positive Menger curvature of
/// `(log ‖res‖, log ‖Pr‖)`; this is a heuristic. Without one, the smallest
/// `λ` is selected and a warning is logged.
pub fn l_curve_scan(
    kernel: &KernelMatrix,
    frame: &[f64],
    lambda_grid: &[f64],
    options: &LCurveOptions,
) -> Result<RegularizationReport> {
    if lambda_grid.len() < 10 {
        return Err(Error::InvalidArgument("L-curve needs at least 10 lambda values".into()));
    }
    if lambda_grid.windows(2).any(|w| !(w[1] > w[0])) || lambda_grid[0] <= 0.0 {
        return Err(Error::InvalidArgument(
            "lambda grid must be positive and increasing".into(),
        ));
    }
    if frame.len() != kernel.rows() {
        return Err(Error::GridMismatch("frame length differs from kernel rows".into()));
    }
    let reference = options.reference.as_deref().unwrap_or(frame);
    if reference.len() != frame.len() {
        return Err(Error::GridMismatch(
            "reference frame length differs from kernel rows".into(),
        ));
    }
    let spectrum = KernelSpectrum::new(&kernel.matrix);
    let points: Vec<Result<(f64, f64, ConditionEstimate)>> = lambda_grid
        .par_iter()
        .map(|&l| {
            let (r, s) = spectrum.norms(frame, l)?;
            let c = condition_from_spectrum(&spectrum, reference, l, options.noise, options.trials, options.seed)?;
            Ok((r, s, c))
        })
        .collect();
    let mut residual_norms = Vec::new();
    let mut solution_norms = Vec::new();
    let mut condition_numbers = Vec::new();
    let mut condition_spread = Vec::new();
    for p in points {
        let (r, s, c) = p?;
        residual_norms.push(r);
        solution_norms.push(s);
        condition_numbers.push(c.mean);
        condition_spread.push(c.spread);
    }
    let n = lambda_grid.len();
    let xy: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            (
                residual_norms[i].max(f64::MIN_POSITIVE).log10(),
                solution_norms[i].max(f64::MIN_POSITIVE).log10(),
            )
        })
        .collect();
    let mut curvature = vec![0.0; n];
    for i in 1..n - 1 {
        curvature[i] = menger_curvature(xy[i - 1], xy[i], xy[i + 1]);
    }
    let corner = (1..n - 1)
        .filter(|&i| curvature[i] > options.min_curvature)
        .max_by(|&a, &b| curvature[a].total_cmp(&curvature[b]));
    let turning_point_lambda = corner.map(|i| lambda_grid[i]);
    let selected_lambda = match turning_point_lambda {
        Some(l) => l,
        None => {
            log::warn!("L-curve has no corner; selecting smallest lambda {:e}", lambda_grid[0]);
            lambda_grid[0]
        }
    };
    let lower = (0..n)
        .find(|&i| condition_numbers[i] <= options.max_condition)
        .map(|i| lambda_grid[i]);
    let admissible_band = match (lower, turning_point_lambda) {
        (Some(lo), Some(hi)) if lo <= hi => Some((lo, hi)),
        _ => None,
    };
    Ok(RegularizationReport {
        lambda_grid: lambda_grid.to_vec(),
        residual_norms,
        solution_norms,
        condition_numbers,
        condition_spread,
        curvature,
        turning_point_lambda,
        selected_lambda,
        admissible_band,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::angular::AngularGrid;
    use approx::assert_abs_diff_eq;

    fn identity_kernel(n: usize) -> KernelMatrix {
        KernelMatrix {
            matrix: DMatrix::identity(n, n),
            grid: AngularGrid::riemann(n, 1).unwrap(),
            pixel_rows: (0..n).collect(),
        }
    }

    #[test]
    fn identity_solves() {
        let k = identity_kernel(4);
        let i = vec![1.0, -2.0, 0.5, 3.0];
        assert_eq!(tikhonov_solve(&k, &i, 0.0).unwrap(), i);
        let half = tikhonov_solve(&k, &i, 1.0).unwrap();
        for (a, b) in half.iter().zip(&i) {
            assert_abs_diff_eq!(*a, b / 2.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn rank_deficient_at_zero_lambda() {
        let mut m = DMatrix::zeros(3, 2);
        m[(0, 0)] = 1.0;
        m[(1, 0)] = 2.0;
        let k = KernelMatrix {
            matrix: m,
            grid: AngularGrid::riemann(2, 1).unwrap(),
            pixel_rows: vec![0, 1, 2],
        };
        assert!(matches!(
            tikhonov_solve(&k, &[1.0, 1.0, 1.0], 0.0),
            Err(Error::SingularSystem(_))
        ));
        assert!(tikhonov_solve(&k, &[1.0, 1.0, 1.0], 1e-3).is_ok());
        assert!(tikhonov_solve(&k, &[1.0, 1.0, 1.0], -1.0).is_err());
    }

    #[test]
    fn orthogonal_kernel_is_perfectly_conditioned() {
        let q = DMatrix::from_fn(5, 5, |i, j| ((i * 7 + j * 3) as f64).sin()).qr().q();
        let k = KernelMatrix {
            matrix: q,
            grid: AngularGrid::riemann(5, 1).unwrap(),
            pixel_rows: (0..5).collect(),
        };
        let frame = vec![1.0, 2.0, 3.0, 4.0, 5.0];
        let c = condition_number(&k, &frame, 0.0, NoiseModel::Gaussian { relative: 0.1 }, 4, 3).unwrap();
        assert_abs_diff_eq!(c.mean, 1.0, epsilon = 1e-10);
        assert!(condition_number(&k, &frame, 0.0, NoiseModel::Gaussian { relative: 0.1 }, 0, 3).is_err());
    }

    #[test]
    fn menger_sign() {
        // down then right turns counter-clockwise
        assert!(menger_curvature((0.0, 1.0), (0.0, 0.0), (1.0, 0.0)) > 0.0);
        assert!(menger_curvature((0.0, 0.0), (1.0, 0.0), (1.0, -1.0)) < 0.0);
        assert_eq!(menger_curvature((0.0, 0.0), (1.0, 1.0), (2.0, 2.0)), 0.0);
    }

    #[test]
    fn identity_curve_falls_back() {
        let k = identity_kernel(6);
        let frame = vec![1.0, 0.5, 2.0, 1.5, 0.2, 0.9];
        let grid = log_lambda_grid(1e-8, 1e-3, 12).unwrap();
        let rep = l_curve_scan(&k, &frame, &grid, &LCurveOptions::default()).unwrap();
        assert_eq!(rep.turning_point_lambda, None);
        assert_eq!(rep.selected_lambda, grid[0]);
        assert!(l_curve_scan(&k, &frame, &grid[..5], &LCurveOptions::default()).is_err());
    }

    #[test]
    fn masking_selects_rows() {
        let k = identity_kernel(3);
        let keep = [true, false, true];
        let m = k.masked(&keep).unwrap();
        assert_eq!(m.pixel_rows, vec![0, 2]);
        assert_eq!(masked_frame(&m, &[4.0, 5.0, 6.0]), vec![4.0, 6.0]);
    }
}
