use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use uedqt::angular::AngularGrid;
use uedqt::diffraction::{
    apply_poisson_noise, atomic_form_factor, build_kernel, debye_homonuclear, forward_intensity, KernelMatrix,
    MoleculeGeometry, Probe, ScatteringGeometry,
};
use uedqt::inversion::{
    condition_number, l_curve_scan, log_lambda_grid, tikhonov_solve, LCurveOptions, NoiseModel, SolverBackend,
    TikhonovSolver,
};
use uedqt::rotor::AngularDistribution;

fn isotropic(grid: &AngularGrid, frames: usize) -> AngularDistribution {
    AngularDistribution {
        grid: grid.clone(),
        time_nodes: (0..frames).map(|k| k as f64).collect(),
        values: vec![1.0 / (4.0 * std::f64::consts::PI); grid.len() * frames],
    }
}

#[test]
fn isotropic_pattern_matches_two_centre_formula() {
    let grid = AngularGrid::gauss_legendre(40, 40).unwrap();
    let geometry = ScatteringGeometry::flat_square(Probe::Xray, 20.0, 16, 4.5).unwrap();
    let mol = MoleculeGeometry::diatomic("N", 1.0977).unwrap();
    let kernel = build_kernel(&mol, &geometry, &grid).unwrap();
    let ds = forward_intensity(&kernel, &geometry, &isotropic(&grid, 1)).unwrap();
    let ff = atomic_form_factor("N").unwrap();
    let mut worst: f64 = 0.0;
    for p in 0..ds.n_pixels() {
        let expected = debye_homonuclear(&ff, geometry.s_magnitude(p), 1.0977);
        worst = worst.max((ds.frame(0)[p] - expected).abs() / expected);
    }
    assert!(worst <= 1e-8, "worst relative deviation {worst:e}");
    assert!(ds.anisotropy(0, 1.0, 4.0, 0.3).abs() <= 1e-8);
}

fn well_conditioned(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

#[test]
fn tikhonov_recovers_under_percent_noise() {
    let k = well_conditioned(80, 12, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let truth = DVector::from_fn(12, |_, _| rng.random_range(0.5..1.5));
    let clean = &k * &truth;
    let rms = clean.norm() / (clean.len() as f64).sqrt();
    let noisy: Vec<f64> = clean
        .iter()
        .map(|v| v + 1e-2 * rms * rng.sample::<f64, _>(StandardNormal))
        .collect();
    for backend in [SolverBackend::NormalEquations, SolverBackend::AugmentedLeastSquares] {
        let x = TikhonovSolver::new(&k, 1e-3, backend).unwrap().solve(&noisy).unwrap();
        let err = (&x - &truth).norm() / truth.norm();
        assert!(err < 5e-2, "{backend:?}: relative error {err:e}");
    }
}

#[test]
fn backends_agree() {
    let k = well_conditioned(30, 10, 8);
    let b: Vec<f64> = (0..30).map(|i| (i as f64 * 0.37).sin()).collect();
    let a = TikhonovSolver::new(&k, 0.1, SolverBackend::NormalEquations)
        .unwrap()
        .solve(&b)
        .unwrap();
    let q = TikhonovSolver::new(&k, 0.1, SolverBackend::AugmentedLeastSquares)
        .unwrap()
        .solve(&b)
        .unwrap();
    assert!((&a - &q).norm() <= 1e-10 * a.norm());
    assert!(TikhonovSolver::new(&k, -1.0, SolverBackend::NormalEquations).is_err());
}

fn identity_kernel(n: usize) -> KernelMatrix {
    KernelMatrix {
        matrix: DMatrix::identity(n, n),
        grid: AngularGrid::gauss_legendre(n, 1).unwrap(),
        pixel_rows: (0..n).collect(),
    }
}

#[test]
fn identity_kernel_is_perfectly_conditioned() {
    let kernel = identity_kernel(20);
    let frame: Vec<f64> = (0..20).map(|i| 1.0 + i as f64).collect();
    assert_eq!(tikhonov_solve(&kernel, &frame, 0.0).unwrap(), frame);
    let c = condition_number(&kernel, &frame, 0.0, NoiseModel::Gaussian { relative: 1e-2 }, 6, 1).unwrap();
    assert!((c.mean - 1.0).abs() <= 1e-12 && c.spread <= 1e-12);
    // shrinkage by λ leaves relative sensitivity unchanged
    let c = condition_number(&kernel, &frame, 3.0, NoiseModel::Poisson { counts: 1e4 }, 4, 1).unwrap();
    assert!((c.mean - 1.0).abs() <= 1e-12);
}

#[test]
fn l_curve_reports_every_lambda() {
    let kernel = KernelMatrix {
        matrix: well_conditioned(40, 8, 2)
            * DMatrix::from_diagonal(&DVector::from_fn(8, |i, _| 10f64.powi(-(i as i32)))),
        grid: AngularGrid::gauss_legendre(8, 1).unwrap(),
        pixel_rows: (0..40).collect(),
    };
    let frame: Vec<f64> = (0..40).map(|i| 1.0 + 0.1 * (i as f64).cos()).collect();
    let grid = log_lambda_grid(1e-12, 1e2, 29).unwrap();
    let r = l_curve_scan(&kernel, &frame, &grid, &LCurveOptions::default()).unwrap();
    assert_eq!(r.residual_norms.len(), 29);
    assert!(r.residual_norms.windows(2).all(|w| w[1] >= w[0] * (1.0 - 1e-9)));
    assert!(r.solution_norms.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-9)));
    assert!(grid.contains(&r.selected_lambda));
    assert_eq!(r.to_csv().lines().count(), 30);
    assert!(l_curve_scan(&kernel, &frame, &grid[..5], &LCurveOptions::default()).is_err());
}

#[test]
fn poisson_noise_is_seeded() {
    let grid = AngularGrid::gauss_legendre(12, 12).unwrap();
    let geometry = ScatteringGeometry::flat_square(Probe::Xray, 20.0, 12, 4.5).unwrap();
    let mol = MoleculeGeometry::diatomic("N", 1.0977).unwrap();
    let kernel = build_kernel(&mol, &geometry, &grid).unwrap();
    let clean = forward_intensity(&kernel, &geometry, &isotropic(&grid, 3)).unwrap();
    let noisy = |seed| {
        let mut d = clean.clone();
        apply_poisson_noise(&mut d, 1e4, seed).unwrap();
        d
    };
    let (a, b, c) = (noisy(7), noisy(7), noisy(8));
    assert_eq!(a.frames, b.frames);
    assert_ne!(a.frames, c.frames);
    // frames use per-frame streams
    assert_ne!(a.frame(0), a.frame(1));
    let scale = a.noise.as_ref().unwrap().counts_scale[0];
    let counts: f64 = a.frame(0).iter().map(|v| v * scale).sum();
    assert!((counts - 1e4).abs() < 5.0 * 1e2, "total counts {counts}");
    assert!(a
        .frame(0)
        .iter()
        .all(|v| (v * scale - (v * scale).round()).abs() < 1e-6));

    let mut same = clean.clone();
    apply_poisson_noise(&mut same, f64::INFINITY, 1).unwrap();
    assert_eq!(same.frames, clean.frames);
    assert!(apply_poisson_noise(&mut same, 0.0, 1).is_err());
}

#[test]
fn masked_pixels_drop_kernel_rows() {
    let grid = AngularGrid::gauss_legendre(8, 8).unwrap();
    let geometry = ScatteringGeometry::flat_square(Probe::Electron, 3000.0, 6, 4.0).unwrap();
    let mol = MoleculeGeometry::diatomic("N", 1.0977).unwrap();
    let kernel = build_kernel(&mol, &geometry, &grid).unwrap();
    let keep: Vec<bool> = (0..36).map(|p| p % 5 != 0).collect();
    let masked = kernel.masked(&keep).unwrap();
    assert_eq!(masked.rows(), keep.iter().filter(|&&k| k).count());
    assert!(masked.pixel_rows.iter().all(|&p| keep[p]));
    assert!(kernel.masked(&[false; 36]).is_err());
}
