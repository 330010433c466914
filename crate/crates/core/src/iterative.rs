//! Iterative projection tomography for rotational density matrices.
//!
//! Each iteration synthesizes the blockwise probabilities of the current
//! estimate, rescales them onto the measured azimuthal components, inverts
//! every block analytically and then enforces the density-matrix constraints.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use log::{debug, info, warn};
use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::angular::AngularGrid;
use crate::error::{Error, Result};
use crate::mblock::{BlockInverter, BlockwiseProbability, InversionOptions, MBlock};
use crate::rotor::{AngularDistribution, RotationalDensityMatrix, RotorSpec, ThermalWeights};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// Steps of the density-matrix constraint pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintStep {
    Hermitize,
    PartialTrace,
    Positivity,
    MSymmetry,
    Trace,
}

pub const DEFAULT_ORDER: [ConstraintStep; 5] = [
    ConstraintStep::Hermitize,
    ConstraintStep::PartialTrace,
    ConstraintStep::Positivity,
    ConstraintStep::MSymmetry,
    ConstraintStep::Trace,
];

/// Target `Σ_J ⟨J m|ρ|J m⟩` for each `(m, parity of J)` class.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PartialTraceTargets {
    pub targets: BTreeMap<(i32, usize), f64>,
}

impl PartialTraceTargets {
    pub fn from_weights(weights: &ThermalWeights) -> Self {
        let j = weights.j_max() as i32;
        let mut targets = BTreeMap::new();
        for m in -j..=j {
            for p in 0..2 {
                targets.insert((m, p), weights.class_weight(m, p));
            }
        }
        PartialTraceTargets { targets }
    }

    /// Targets read off the diagonal of a reference matrix.
    pub fn from_density(rho: &RotationalDensityMatrix) -> Self {
        let mut targets = BTreeMap::new();
        for m in rho.m_values() {
            for p in 0..2 {
                targets.insert((m, p), rho.partial_trace(m, p));
            }
        }
        PartialTraceTargets { targets }
    }

    pub fn total(&self) -> f64 {
        self.targets.values().sum()
    }
}

/// Physical side conditions imposed on every iterate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSet {
    pub partial_traces: Option<PartialTraceTargets>,
    /// Measured `P̃r_k(θ, t)` on the `(t, θ)` grid, keyed by `k = m1 - m2`.
    #[serde(skip)]
    pub measured: BTreeMap<i32, Vec<Complex64>>,
    pub hio_beta: f64,
    /// Allowed deviation of a class partial trace before rescaling.
    pub trace_tolerance: f64,
    pub psd_tolerance: f64,
    pub hio_max_steps: usize,
    pub m_symmetry: bool,
    /// Highest `J` kept in block `m`; blocks beyond the list or with a cutoff
    /// below `|m|` are zero. `None` keeps the full basis.
    pub support: Option<BTreeMap<i32, usize>>,
    pub order: Vec<ConstraintStep>,
    /// Sums below this are treated as zero in the probability rescaling.
    pub zero_guard: f64,
}

impl Default for ConstraintSet {
    fn default() -> Self {
        ConstraintSet {
            partial_traces: None,
            measured: BTreeMap::new(),
            hio_beta: 0.9,
            trace_tolerance: 1e-3,
            psd_tolerance: 1e-8,
            hio_max_steps: 200,
            m_symmetry: true,
            support: None,
            order: DEFAULT_ORDER.to_vec(),
            zero_guard: 1e-14,
        }
    }
}

impl ConstraintSet {
    pub fn validate(&self) -> Result<()> {
        if !(self.hio_beta > 0.0 && self.hio_beta <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "hio_beta {} outside (0, 1]",
                self.hio_beta
            )));
        }
        if let Some(pt) = &self.partial_traces {
            let s = pt.total();
            if (s - 1.0).abs() > 1e-8 {
                return Err(Error::InvalidArgument(format!("partial-trace targets sum to {s}")));
            }
        }
        Ok(())
    }
}

/// Result of rescaling blockwise probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityConstraintReport {
    /// Nodes where the current sum vanished and the measurement was split.
    pub guarded_nodes: usize,
}

/// Rescales every block so that each coherence-index sum equals the
/// measured azimuthal component.
pub fn probability_constraint(
    blockwise: &mut BlockwiseProbability,
    measured: &BTreeMap<i32, Vec<Complex64>>,
    zero_guard: f64,
) -> Result<ProbabilityConstraintReport> {
    let n = blockwise.len_per_block();
    let mut guarded = 0usize;
    for (&k, target) in measured {
        if target.len() != n {
            return Err(Error::GridMismatch(format!(
                "measured component {k} has {} values, expected {n}",
                target.len()
            )));
        }
        let keys: Vec<(i32, i32)> = blockwise.blocks.keys().filter(|(a, b)| a - b == k).cloned().collect();
        if keys.is_empty() {
            continue;
        }
        let sum = blockwise.coherence_sum(k);
        for (idx, (s, t)) in sum.iter().zip(target).enumerate() {
            if s.norm() < zero_guard {
                guarded += 1;
                let share = t / keys.len() as f64;
                for key in &keys {
                    blockwise.blocks.get_mut(key).unwrap()[idx] = share;
                }
            } else {
                let beta = t / s;
                for key in &keys {
                    blockwise.blocks.get_mut(key).unwrap()[idx] *= beta;
                }
            }
        }
    }
    if guarded > 0 {
        debug!("probability constraint split the measurement at {guarded} zero-sum nodes");
    }
    Ok(ProbabilityConstraintReport { guarded_nodes: guarded })
}

/// Outcome of the density-matrix constraint pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityConstraintReport {
    pub hio_steps: usize,
    pub hio_converged: bool,
}

pub(crate) fn hermitize(b: &mut DMatrix<Complex64>) {
    let h = (&*b + b.adjoint()) * Complex64::new(0.5, 0.0);
    *b = h;
}

fn apply_support(rho: &mut RotationalDensityMatrix, support: &BTreeMap<i32, usize>) {
    let j_max = rho.j_max;
    for m in rho.m_values() {
        let am = m.unsigned_abs() as usize;
        let cut = support.get(&m).copied();
        let b = rho.block_mut(m);
        for j1 in am..=j_max {
            for j2 in am..=j_max {
                let keep = matches!(cut, Some(c) if j1 <= c && j2 <= c);
                if !keep {
                    b[(j1 - am, j2 - am)] = ZERO;
                }
            }
        }
    }
}

fn scale_partial_traces(rho: &mut RotationalDensityMatrix, targets: &PartialTraceTargets, tol: f64) {
    let j_max = rho.j_max;
    for m in rho.m_values() {
        let am = m.unsigned_abs() as usize;
        let mut scale = [1.0f64; 2];
        let mut shift = [0.0f64; 2];
        for p in 0..2 {
            let Some(&target) = targets.targets.get(&(m, p)) else {
                continue;
            };
            let current = rho.partial_trace(m, p);
            if (current - target).abs() <= tol {
                continue;
            }
            if current > 1e-14 {
                scale[p] = target / current;
            } else {
                let count = (am..=j_max).filter(|j| j % 2 == p).count();
                if count > 0 {
                    shift[p] = (target - current) / count as f64;
                }
            }
        }
        let b = rho.block_mut(m);
        let d: Vec<f64> = (am..=j_max).map(|j| scale[j % 2].max(0.0).sqrt()).collect();
        for r in 0..d.len() {
            for c in 0..d.len() {
                b[(r, c)] *= d[r] * d[c];
            }
        }
        for j in am..=j_max {
            b[(j - am, j - am)] += shift[j % 2];
        }
    }
}

/// HIO relaxation of the negative-eigenvalue subspace: repeatedly replaces
/// each negative eigenvalue `λ` by `λ - β·λ` until the spectrum clears
/// `-psd_tolerance`.
pub(crate) fn hio_positivity(b: &mut DMatrix<Complex64>, beta: f64, tol: f64, max_steps: usize) -> (usize, bool) {
    let n = b.nrows();
    if n == 0 {
        return (0, true);
    }
    let mut steps = 0;
    loop {
        let eig = b.clone().symmetric_eigen();
        let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
        if min >= -tol {
            return (steps, true);
        }
        if steps >= max_steps {
            return (steps, false);
        }
        let mut vals = eig.eigenvalues.clone();
        for v in vals.iter_mut() {
            if *v < 0.0 {
                *v -= beta * *v;
            }
        }
        let u = &eig.eigenvectors;
        let d = DMatrix::from_diagonal(&vals.map(|x| Complex64::new(x, 0.0)));
        *b = u * d * u.adjoint();
        hermitize(b);
        steps += 1;
    }
}

/// Applies the density-matrix constraints in `constraints.order`.
pub fn density_constraints(
    rho: &RotationalDensityMatrix,
    constraints: &ConstraintSet,
) -> Result<(RotationalDensityMatrix, DensityConstraintReport)> {
    if rho
        .blocks
        .iter()
        .any(|b| b.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()))
    {
        return Err(Error::InvalidArgument("density matrix has non-finite entries".into()));
    }
    let mut out = rho.clone();
    let mut report = DensityConstraintReport {
        hio_steps: 0,
        hio_converged: true,
    };
    if let Some(s) = &constraints.support {
        apply_support(&mut out, s);
    }
    for step in &constraints.order {
        match step {
            ConstraintStep::Hermitize => out.blocks.iter_mut().for_each(hermitize),
            ConstraintStep::PartialTrace => {
                if let Some(t) = &constraints.partial_traces {
                    scale_partial_traces(&mut out, t, constraints.trace_tolerance);
                }
            }
            ConstraintStep::Positivity => {
                let results: Vec<(usize, bool)> = out
                    .blocks
                    .par_iter_mut()
                    .map(|b| {
                        hio_positivity(
                            b,
                            constraints.hio_beta,
                            constraints.psd_tolerance,
                            constraints.hio_max_steps,
                        )
                    })
                    .collect();
                for (s, ok) in results {
                    report.hio_steps = report.hio_steps.max(s);
                    report.hio_converged &= ok;
                }
            }
            ConstraintStep::MSymmetry => {
                if constraints.m_symmetry {
                    for m in 1..=out.j_max as i32 {
                        let avg = (out.block(m) + out.block(-m)) * Complex64::new(0.5, 0.0);
                        *out.block_mut(m) = avg.clone();
                        *out.block_mut(-m) = avg;
                    }
                }
            }
            ConstraintStep::Trace => {
                let tr = out.trace().re;
                if tr > 0.0 {
                    let s = Complex64::new(1.0 / tr, 0.0);
                    out.blocks.iter_mut().for_each(|b| *b *= s);
                }
            }
        }
    }
    if !report.hio_converged {
        warn!(
            "positivity relaxation stopped after {} steps with negative eigenvalues left",
            report.hio_steps
        );
    }
    Ok((out, report))
}

/// `(ε(ρ), ε(Pr))` as normalized L1 distances.
pub fn error_metrics(
    rho_n: &RotationalDensityMatrix,
    rho_ref: &RotationalDensityMatrix,
    pr_n: &[f64],
    pr_ref: &[f64],
) -> Result<(f64, f64)> {
    Ok((density_error(rho_n, rho_ref)?, probability_error(pr_n, pr_ref)?))
}

pub fn density_error(rho_n: &RotationalDensityMatrix, rho_ref: &RotationalDensityMatrix) -> Result<f64> {
    if rho_n.j_max != rho_ref.j_max {
        return Err(Error::GridMismatch("density matrices differ in j_max".into()));
    }
    let norm = rho_ref.l1_norm();
    if norm == 0.0 {
        return Err(Error::ZeroNormReference);
    }
    Ok(rho_n.l1_distance(rho_ref) / norm)
}

pub fn probability_error(pr_n: &[f64], pr_ref: &[f64]) -> Result<f64> {
    if pr_n.len() != pr_ref.len() {
        return Err(Error::GridMismatch(format!(
            "probabilities have {} and {} samples",
            pr_n.len(),
            pr_ref.len()
        )));
    }
    let norm: f64 = pr_ref.iter().map(|v| v.abs()).sum();
    if norm == 0.0 {
        return Err(Error::ZeroNormReference);
    }
    Ok(pr_n.iter().zip(pr_ref).map(|(a, b)| (a - b).abs()).sum::<f64>() / norm)
}

/// Resolution bounds `(δt_max, δθ_max)` for a basis of order `j_max` and a
/// moment of inertia `𝓘` (ps/rad, ħ = 1).
///
/// The fastest beat is `h_max/(2𝓘)` with `h_max = j_max(j_max+1)`; sampling
/// it without aliasing over one period needs `δt ≤ 2π𝓘/h_max`.
pub fn resolution_requirements(j_max: usize, inertia: f64) -> Result<(f64, f64)> {
    if j_max < 1 {
        return Err(Error::InvalidArgument("j_max must be at least 1".into()));
    }
    let h_max = (j_max * (j_max + 1)) as f64;
    Ok((2.0 * PI * inertia / h_max, PI / (2.0 * j_max as f64)))
}

/// One row of the convergence history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Against ground truth, or against the previous iterate in experiment mode.
    pub error_rho: f64,
    pub error_pr: f64,
    pub hio_converged: bool,
    pub guarded_nodes: usize,
}

#[derive(Debug, Clone)]
pub struct IterationState {
    pub rho: RotationalDensityMatrix,
    pub blockwise: BlockwiseProbability,
    pub iteration: usize,
    pub error_rho: f64,
    pub error_pr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QtConfig {
    pub j_max: usize,
    pub max_iterations: usize,
    pub plateau_tolerance: f64,
    pub plateau_window: usize,
    pub divergence_factor: f64,
    pub constraints: ConstraintSet,
    pub inversion: InversionOptions,
}

impl Default for QtConfig {
    fn default() -> Self {
        QtConfig {
            j_max: 8,
            max_iterations: 50,
            plateau_tolerance: 1e-6,
            plateau_window: 5,
            divergence_factor: 10.0,
            constraints: ConstraintSet::default(),
            inversion: InversionOptions::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct QtOutcome {
    pub history: Vec<IterationRecord>,
    pub state: IterationState,
}

/// Shared precomputation for a tomography run on one measurement.
struct QtContext {
    inverter: BlockInverter,
    n_phi: usize,
    measured_full: Vec<f64>,
}

impl QtContext {
    fn synthesize_all(&self, rho: &RotationalDensityMatrix) -> BlockwiseProbability {
        let mut bw = BlockwiseProbability {
            grid: self.inverter.grid.clone(),
            times: self.inverter.times.clone(),
            period: 2.0 * PI / self.inverter.rotational_constant,
            blocks: BTreeMap::new(),
        };
        let blocks: Vec<(i32, Vec<Complex64>)> = rho
            .m_values()
            .collect::<Vec<_>>()
            .par_iter()
            .map(|&m| {
                let blk = MBlock {
                    m1: m,
                    m2: m,
                    j_max: rho.j_max,
                    data: rho.block(m).clone(),
                };
                (m, self.inverter.synthesize(&blk))
            })
            .collect();
        for (m, v) in blocks {
            bw.blocks.insert((m, m), v);
        }
        bw
    }

    fn invert_all(&self, bw: &BlockwiseProbability, j_max: usize) -> Result<RotationalDensityMatrix> {
        let ms: Vec<i32> = (-(j_max as i32)..=(j_max as i32)).collect();
        let blocks: Vec<Result<DMatrix<Complex64>>> = ms
            .par_iter()
            .map(|&m| {
                let v = bw.get(m, m).expect("block synthesized");
                self.inverter.invert(v, m, m).map(|b| b.data)
            })
            .collect();
        let mut rho = RotationalDensityMatrix::zeros(j_max);
        for (m, b) in ms.iter().zip(blocks) {
            *rho.block_mut(*m) = b?;
        }
        Ok(rho)
    }

    /// Synthesized `Pr` on the full `(t, φ, θ)` measurement layout.
    fn full_probability(&self, bw: &BlockwiseProbability) -> Vec<f64> {
        let line: Vec<Complex64> = bw.coherence_sum(0);
        let nt = self.inverter.n_theta();
        let mut out = Vec::with_capacity(line.len() * self.n_phi);
        for k in 0..self.inverter.times.len() {
            for _ in 0..self.n_phi {
                out.extend(line[k * nt..(k + 1) * nt].iter().map(|z| z.re));
            }
        }
        out
    }
}

/// Measured `k = 0` azimuthal component on the `(t, θ)` layout.
pub fn measured_components(measured: &AngularDistribution) -> BTreeMap<i32, Vec<Complex64>> {
    let comp: Vec<Complex64> = (0..measured.n_times())
        .flat_map(|k| measured.azimuthal_component(k, 0))
        .collect();
    let mut map = BTreeMap::new();
    map.insert(0, comp);
    map
}

/// Runs the iterative tomography on a measured one-period distribution.
///
/// With `reference = None` the density error is measured against the
/// previous iterate.
pub fn qt_iterate(
    initial: &RotationalDensityMatrix,
    measured: &AngularDistribution,
    spec: &RotorSpec,
    config: &QtConfig,
    reference: Option<&RotationalDensityMatrix>,
) -> Result<QtOutcome> {
    config.constraints.validate()?;
    if spec.centrifugal_distortion != 0.0 {
        return Err(Error::InvalidArgument(
            "block inversion assumes rigid-rotor harmonics (centrifugal distortion must be 0)".into(),
        ));
    }
    if initial.j_max != config.j_max {
        return Err(Error::GridMismatch(format!(
            "initial guess has j_max {}, config {}",
            initial.j_max, config.j_max
        )));
    }
    let grid: &AngularGrid = &measured.grid;
    let inverter = BlockInverter::new(
        grid,
        &measured.time_nodes,
        spec.rotational_constant,
        config.j_max,
        config.inversion,
    )?;
    if config.inversion.enforce_resolution {
        inverter.check_resolution(0, 0)?;
    }
    let ctx = QtContext {
        inverter,
        n_phi: grid.n_phi(),
        measured_full: measured.values.clone(),
    };
    let mut constraints = config.constraints.clone();
    if constraints.measured.is_empty() {
        constraints.measured = measured_components(measured);
    }

    let mut rho = initial.at_time(spec, 0.0);
    let mut history: Vec<IterationRecord> = Vec::new();
    let mut min_err = f64::INFINITY;
    let mut last_bw = ctx.synthesize_all(&rho);
    for it in 1..=config.max_iterations {
        let mut bw = ctx.synthesize_all(&rho);
        let pc = probability_constraint(&mut bw, &constraints.measured, constraints.zero_guard)?;
        let raw = ctx.invert_all(&bw, config.j_max)?;
        let (next, dc) = density_constraints(&raw, &constraints)?;

        let synth = ctx.synthesize_all(&next);
        let pr_full = ctx.full_probability(&synth);
        let error_pr = probability_error(&pr_full, &ctx.measured_full)?;
        let error_rho = match reference {
            Some(r) => density_error(&next, &r.at_time(spec, 0.0))?,
            None => density_error(&next, &rho).unwrap_or(0.0),
        };
        history.push(IterationRecord {
            iteration: it,
            error_rho,
            error_pr,
            hio_converged: dc.hio_converged,
            guarded_nodes: pc.guarded_nodes,
        });
        info!("iteration {it}: eps_rho {error_rho:.4e} eps_pr {error_pr:.4e}");
        rho = next;
        last_bw = synth;

        min_err = min_err.min(error_pr);
        if error_pr > config.divergence_factor * min_err && min_err > 0.0 {
            return Err(Error::Diverged {
                iteration: it,
                error: error_pr,
                minimum: min_err,
                history,
            });
        }
        if error_pr < 1e-14 {
            break;
        }
        if plateaued(&history, config.plateau_tolerance, config.plateau_window) {
            debug!("plateau reached at iteration {it}");
            break;
        }
    }
    let last = history.last().cloned().unwrap_or(IterationRecord {
        iteration: 0,
        error_rho: 0.0,
        error_pr: 0.0,
        hio_converged: true,
        guarded_nodes: 0,
    });
    Ok(QtOutcome {
        history,
        state: IterationState {
            rho,
            blockwise: last_bw,
            iteration: last.iteration,
            error_rho: last.error_rho,
            error_pr: last.error_pr,
        },
    })
}

pub(crate) fn plateaued(history: &[IterationRecord], tol: f64, window: usize) -> bool {
    if window == 0 || history.len() <= window {
        return false;
    }
    let tail = &history[history.len() - window - 1..];
    tail.windows(2).all(|w| {
        let a = w[0].error_pr;
        let b = w[1].error_pr;
        (a - b).abs() <= tol * a.abs().max(f64::MIN_POSITIVE)
    })
}

/// Random positive semidefinite unit-trace matrix, seeded. Blocks outside
/// `support` are zero when a support map is given.
pub fn random_density(j_max: usize, seed: u64, support: Option<&BTreeMap<i32, usize>>) -> RotationalDensityMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rho = RotationalDensityMatrix::zeros(j_max);
    for m in rho.m_values() {
        let am = m.unsigned_abs() as usize;
        let top = match support {
            Some(s) => match s.get(&m) {
                Some(&c) if c >= am => c.min(j_max),
                _ => continue,
            },
            None => j_max,
        };
        let n = top + 1 - am;
        let g = DMatrix::<Complex64>::from_fn(n, n, |_, _| {
            Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal))
        });
        let p = &g * g.adjoint();
        let b = rho.block_mut(m);
        for r in 0..n {
            for c in 0..n {
                b[(r, c)] = p[(r, c)];
            }
        }
    }
    let tr = rho.trace().re;
    for b in &mut rho.blocks {
        *b *= Complex64::new(1.0 / tr, 0.0);
    }
    rho
}

/// Diagonal of `rho` with all coherences removed.
pub fn diagonal_part(rho: &RotationalDensityMatrix) -> RotationalDensityMatrix {
    let mut out = rho.clone();
    for b in &mut out.blocks {
        let n = b.nrows();
        for r in 0..n {
            for c in 0..n {
                if r != c {
                    b[(r, c)] = ZERO;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn grid_bw() -> BlockwiseProbability {
        let grid = AngularGrid::gauss_legendre(2, 1).unwrap();
        BlockwiseProbability::new(grid, vec![0.0], 1.0).unwrap()
    }

    #[test]
    fn matching_sums_are_untouched() {
        let mut bw = grid_bw();
        bw.insert(0, 0, vec![Complex64::new(0.2, 0.0); 2]).unwrap();
        bw.insert(1, 1, vec![Complex64::new(0.3, 0.0); 2]).unwrap();
        let before = bw.clone();
        let mut measured = BTreeMap::new();
        measured.insert(0, vec![Complex64::new(0.5, 0.0); 2]);
        probability_constraint(&mut bw, &measured, 1e-14).unwrap();
        for (k, v) in &bw.blocks {
            for (a, b) in v.iter().zip(&before.blocks[k]) {
                assert_abs_diff_eq!((a - b).norm(), 0.0, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn two_equal_blocks_split_target() {
        let mut bw = grid_bw();
        bw.insert(0, 0, vec![Complex64::new(1.0, 0.0), Complex64::new(2.0, 0.0)])
            .unwrap();
        bw.insert(1, 1, vec![Complex64::new(1.0, 0.0), Complex64::new(2.0, 0.0)])
            .unwrap();
        let mut measured = BTreeMap::new();
        measured.insert(0, vec![Complex64::new(0.6, 0.0), Complex64::new(0.6, 0.0)]);
        probability_constraint(&mut bw, &measured, 1e-14).unwrap();
        for v in bw.blocks.values() {
            assert_abs_diff_eq!(v[0].re, 0.3, epsilon = 1e-15);
            assert_abs_diff_eq!(v[1].re, 0.3, epsilon = 1e-15);
        }
    }

    #[test]
    fn zero_sum_splits_equally() {
        let mut bw = grid_bw();
        bw.insert(0, 0, vec![ZERO; 2]).unwrap();
        bw.insert(1, 1, vec![ZERO; 2]).unwrap();
        let mut measured = BTreeMap::new();
        measured.insert(0, vec![Complex64::new(0.8, 0.0); 2]);
        let r = probability_constraint(&mut bw, &measured, 1e-14).unwrap();
        assert_eq!(r.guarded_nodes, 2);
        assert_abs_diff_eq!(bw.get(1, 1).unwrap()[0].re, 0.4, epsilon = 1e-15);
    }

    #[test]
    fn feasible_state_is_fixed_point() {
        let rho = RotationalDensityMatrix::diagonal(&[0.5 / 1.0, 0.5 / 3.0]);
        let mut c = ConstraintSet::default();
        c.partial_traces = Some(PartialTraceTargets::from_density(&rho));
        let (out, rep) = density_constraints(&rho, &c).unwrap();
        assert!(rep.hio_converged);
        assert!(out.l1_distance(&rho) < 1e-12);
    }

    #[test]
    fn hio_clears_negative_eigenvalue() {
        let mut rho = RotationalDensityMatrix::zeros(1);
        let b = rho.block_mut(0);
        b[(0, 0)] = Complex64::new(1.1, 0.0);
        b[(1, 1)] = Complex64::new(-0.1, 0.0);
        let c = ConstraintSet {
            m_symmetry: false,
            ..Default::default()
        };
        let (out, rep) = density_constraints(&rho, &c).unwrap();
        assert!(rep.hio_converged);
        assert!(rep.hio_steps >= 7);
        assert!(out.min_eigenvalue() >= -1e-8);
        assert_abs_diff_eq!(out.trace().re, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn partial_trace_halving() {
        let mut rho = RotationalDensityMatrix::zeros(1);
        rho.block_mut(0)[(0, 0)] = Complex64::new(0.5, 0.0);
        rho.block_mut(0)[(1, 1)] = Complex64::new(0.5, 0.0);
        let mut targets = PartialTraceTargets::from_density(&rho);
        targets.targets.insert((0, 0), 0.25);
        targets.targets.insert((0, 1), 0.75);
        let c = ConstraintSet {
            partial_traces: Some(targets),
            order: vec![ConstraintStep::PartialTrace],
            ..Default::default()
        };
        let (out, _) = density_constraints(&rho, &c).unwrap();
        assert_abs_diff_eq!(out.element(0, 0, 0).re, 0.25, epsilon = 1e-15);
    }

    #[test]
    fn metric_examples() {
        let rho = RotationalDensityMatrix::diagonal(&[0.4, 0.2]);
        let mut twice = rho.clone();
        twice.blocks.iter_mut().for_each(|b| *b *= Complex64::new(2.0, 0.0));
        let pr = vec![0.1, 0.3, 0.2];
        let (a, b) = error_metrics(&rho, &rho, &pr, &pr).unwrap();
        assert_eq!((a, b), (0.0, 0.0));
        assert_abs_diff_eq!(density_error(&twice, &rho).unwrap(), 1.0, epsilon = 1e-15);
        assert!(matches!(
            density_error(&rho, &RotationalDensityMatrix::zeros(1)),
            Err(Error::ZeroNormReference)
        ));
    }

    #[test]
    fn resolution_examples() {
        let (_, dtheta) = resolution_requirements(1, 1.0).unwrap();
        assert_abs_diff_eq!(dtheta, PI / 2.0, epsilon = 1e-15);
        let (a, _) = resolution_requirements(5, 1.0).unwrap();
        let (b, _) = resolution_requirements(5, 3.0).unwrap();
        assert_abs_diff_eq!(b / a, 3.0, epsilon = 1e-12);
        assert!(resolution_requirements(0, 1.0).is_err());
    }
}
