//! Analytic inversion of blockwise probabilities `Pr_{m1,m2}(θ, t)` into the
//! density-matrix block `⟨J1 m1|ρ|J2 m2⟩`.
//!
//! A pair `(J1, J2)` oscillates at the harmonic `h = J1(J1+1) - J2(J2+1)` of
//! the rotational constant, i.e. `e^{-iBht}`. Pairs sharing `h` have distinct
//! `J1 + J2`, so projecting onto `P̃_{J1+J2}^{m1+m2}` gives an upper
//! triangular system in that family, solved by back-substitution.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use log::debug;
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::angular::{evaluate_legendre_on, AngularGrid, CouplingCoefficients, LegendreTable};
use crate::error::{Error, Result};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// A general `(m1, m2)` block, elements referenced to `t = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct MBlock {
    pub m1: i32,
    pub m2: i32,
    pub j_max: usize,
    /// Rows `J1 = |m1|..=j_max`, columns `J2 = |m2|..=j_max`.
    pub data: DMatrix<Complex64>,
}

impl MBlock {
    pub fn zeros(m1: i32, m2: i32, j_max: usize) -> Self {
        let r = j_max + 1 - m1.unsigned_abs() as usize;
        let c = j_max + 1 - m2.unsigned_abs() as usize;
        MBlock {
            m1,
            m2,
            j_max,
            data: DMatrix::zeros(r, c),
        }
    }

    pub fn get(&self, j1: usize, j2: usize) -> Complex64 {
        self.data[(
            j1 - self.m1.unsigned_abs() as usize,
            j2 - self.m2.unsigned_abs() as usize,
        )]
    }

    pub fn set(&mut self, j1: usize, j2: usize, v: Complex64) {
        let r = j1 - self.m1.unsigned_abs() as usize;
        let c = j2 - self.m2.unsigned_abs() as usize;
        self.data[(r, c)] = v;
    }

    /// Block `(m2, m1)` of the same Hermitian matrix.
    pub fn adjoint(&self) -> Self {
        MBlock {
            m1: self.m2,
            m2: self.m1,
            j_max: self.j_max,
            data: self.data.adjoint(),
        }
    }
}

/// Harmonic index of the pair `(J1, J2)`.
#[inline]
pub fn harmonic(j1: usize, j2: usize) -> i64 {
    (j1 * (j1 + 1)) as i64 - (j2 * (j2 + 1)) as i64
}

/// Pairs of the `(m1, m2)` block grouped by harmonic, each family sorted by
/// decreasing `J1 + J2`.
pub fn harmonic_families(m1: i32, m2: i32, j_max: usize) -> BTreeMap<i64, Vec<(usize, usize)>> {
    let mut out: BTreeMap<i64, Vec<(usize, usize)>> = BTreeMap::new();
    for j1 in m1.unsigned_abs() as usize..=j_max {
        for j2 in m2.unsigned_abs() as usize..=j_max {
            out.entry(harmonic(j1, j2)).or_default().push((j1, j2));
        }
    }
    for fam in out.values_mut() {
        fam.sort_by(|a, b| (b.0 + b.1).cmp(&(a.0 + a.1)));
    }
    out
}

/// Coherence-resolved probabilities on the polar nodes of a grid over one
/// revival period.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockwiseProbability {
    pub grid: AngularGrid,
    pub times: Vec<f64>,
    pub period: f64,
    /// `values[t * n_theta + i]` per `(m1, m2)`.
    pub blocks: BTreeMap<(i32, i32), Vec<Complex64>>,
}

impl BlockwiseProbability {
    pub fn new(grid: AngularGrid, times: Vec<f64>, period: f64) -> Result<Self> {
        validate_period_sampling(&times, period)?;
        Ok(BlockwiseProbability {
            grid,
            times,
            period,
            blocks: BTreeMap::new(),
        })
    }

    pub fn n_theta(&self) -> usize {
        self.grid.n_theta()
    }

    pub fn len_per_block(&self) -> usize {
        self.times.len() * self.grid.n_theta()
    }

    pub fn get(&self, m1: i32, m2: i32) -> Option<&[Complex64]> {
        self.blocks.get(&(m1, m2)).map(|v| v.as_slice())
    }

    pub fn insert(&mut self, m1: i32, m2: i32, values: Vec<Complex64>) -> Result<()> {
        if values.len() != self.len_per_block() {
            return Err(Error::GridMismatch(format!(
                "block ({m1},{m2}) has {} values, expected {}",
                values.len(),
                self.len_per_block()
            )));
        }
        self.blocks.insert((m1, m2), values);
        Ok(())
    }

    /// `Σ_{m1 - m2 = k} Pr_{m1,m2}` on the `(t, θ)` grid.
    pub fn coherence_sum(&self, k: i32) -> Vec<Complex64> {
        let mut acc = vec![ZERO; self.len_per_block()];
        for ((m1, m2), v) in &self.blocks {
            if m1 - m2 == k {
                for (a, b) in acc.iter_mut().zip(v) {
                    *a += b;
                }
            }
        }
        acc
    }
}

fn validate_period_sampling(times: &[f64], period: f64) -> Result<()> {
    if times.is_empty() || !(period > 0.0) {
        return Err(Error::InvalidGrid("empty time grid or nonpositive period".into()));
    }
    let dt = period / times.len() as f64;
    for (n, t) in times.iter().enumerate() {
        if (t - times[0] - dt * n as f64).abs() > 1e-9 * period {
            return Err(Error::InvalidGrid(
                "time nodes must sample exactly one period uniformly".into(),
            ));
        }
    }
    Ok(())
}

/// Largest projection order resolvable with the polar spacing of `grid`.
pub fn max_resolvable_order(grid: &AngularGrid) -> usize {
    let d = grid.max_theta_spacing();
    let bound = PI / d;
    // strict inequality α·δθ < π
    let mut a = bound.floor() as usize;
    if (a as f64) * d >= PI {
        a = a.saturating_sub(1);
    }
    a
}

fn check_order(alpha: usize, grid: &AngularGrid) -> Result<()> {
    let limit = max_resolvable_order(grid);
    if alpha > limit {
        return Err(Error::Unresolvable(format!(
            "order {alpha} exceeds {limit} resolvable with polar spacing {:.4} rad",
            grid.max_theta_spacing()
        )));
    }
    Ok(())
}

fn project_series(values: &[Complex64], grid: &AngularGrid, n_times: usize, legendre: &[f64]) -> Vec<Complex64> {
    let nt = grid.n_theta();
    (0..n_times)
        .map(|k| {
            let row = &values[k * nt..(k + 1) * nt];
            let mut acc = ZERO;
            for i in 0..nt {
                acc += row[i] * (legendre[i] * grid.weights_theta[i]);
            }
            acc
        })
        .collect()
}

/// `I_{m1m2}(α, t) = ∫ sinθ dθ P̃_α^{m1+m2} Pr_{m1,m2}` at every time node.
pub fn project_theta(
    blockwise: &BlockwiseProbability,
    alpha: usize,
    m1: i32,
    m2: i32,
    enforce_resolution: bool,
) -> Result<Vec<Complex64>> {
    let order = m1 + m2;
    if alpha < order.unsigned_abs() as usize {
        return Err(Error::InvalidArgument(format!(
            "projection order {alpha} below |m1+m2| = {}",
            order.abs()
        )));
    }
    if enforce_resolution {
        check_order(alpha, &blockwise.grid)?;
    }
    let values = blockwise
        .get(m1, m2)
        .ok_or_else(|| Error::InvalidArgument(format!("block ({m1},{m2}) absent")))?;
    let table = evaluate_legendre_on(alpha, &blockwise.grid)?;
    Ok(project_series(
        values,
        &blockwise.grid,
        blockwise.times.len(),
        &table.row(alpha, order),
    ))
}

/// Discrete `(1/T)∫ I(t) e^{iBht} dt` over uniformly sampled one-period data.
pub fn time_fourier(series: &[Complex64], times: &[f64], harmonic: i64, rotational_constant: f64) -> Result<Complex64> {
    let n = series.len();
    if n == 0 || n != times.len() {
        return Err(Error::GridMismatch("series and time nodes differ in length".into()));
    }
    let limit = ((n - 1) / 2) as i64;
    if harmonic.abs() > limit {
        return Err(Error::Aliasing {
            harmonic,
            limit,
            samples: n,
        });
    }
    Ok(fourier_unchecked(series, times, harmonic, rotational_constant))
}

fn fourier_unchecked(series: &[Complex64], times: &[f64], harmonic: i64, b: f64) -> Complex64 {
    let w = b * harmonic as f64;
    let mut acc = ZERO;
    for (v, t) in series.iter().zip(times) {
        acc += v * Complex64::from_polar(1.0, w * t);
    }
    acc / series.len() as f64
}

fn pair_coefficient(coeffs: Option<&CouplingCoefficients>, l: usize, j1: usize, m1: i32, j2: usize, m2: i32) -> f64 {
    let c = match coeffs {
        Some(t) => t.get(l, j1, m1, j2, m2),
        None => crate::angular::coupling_coefficient(l, j1, m1, j2, m2),
    };
    c / (2.0 * PI)
}

/// Recovers `⟨(α+β)/2, m1|ρ|(α-β)/2, m2⟩` from `I(α, β)` when `β(α+1)` is
/// produced by a single pair of the block.
pub fn solve_unique_factorization(
    value: Complex64,
    alpha: usize,
    beta: i64,
    m1: i32,
    m2: i32,
    j_max: usize,
) -> Result<Complex64> {
    let h = beta * (alpha as i64 + 1);
    if (alpha as i64 + beta) % 2 != 0 || beta.abs() > alpha as i64 {
        return Err(Error::InvalidArgument(format!(
            "alpha {alpha} and beta {beta} do not index a pair"
        )));
    }
    let j1 = ((alpha as i64 + beta) / 2) as usize;
    let j2 = ((alpha as i64 - beta) / 2) as usize;
    if j1 < m1.unsigned_abs() as usize || j2 < m2.unsigned_abs() as usize || j1.max(j2) > j_max {
        return Err(Error::InvalidArgument(format!(
            "pair ({j1},{j2}) outside block ({m1},{m2}) with j_max {j_max}"
        )));
    }
    // enumerate every admissible pair of the block
    let mut count = 0usize;
    for a in m1.unsigned_abs() as usize..=j_max {
        for b in m2.unsigned_abs() as usize..=j_max {
            if harmonic(a, b) == h {
                count += 1;
            }
        }
    }
    if beta == 0 || count != 1 {
        return Err(Error::AmbiguousFactorization {
            harmonic: h,
            pairs: count,
        });
    }
    let c = pair_coefficient(None, alpha, j1, m1, j2, m2);
    if c == 0.0 {
        return Err(Error::SingularSystem(format!(
            "vanishing coupling for pair ({j1},{j2})"
        )));
    }
    Ok(value / c)
}

/// Back-substitution for one harmonic family.
///
/// `family` lists pairs in decreasing `J1 + J2`; `projections[q]` holds
/// `I(J1_q + J2_q, h)`.
pub fn solve_triangular(
    family: &[(usize, usize)],
    projections: &[Complex64],
    m1: i32,
    m2: i32,
) -> Result<Vec<Complex64>> {
    solve_family(family, projections, m1, m2, None)
}

fn solve_family(
    family: &[(usize, usize)],
    projections: &[Complex64],
    m1: i32,
    m2: i32,
    coeffs: Option<&CouplingCoefficients>,
) -> Result<Vec<Complex64>> {
    if family.len() != projections.len() {
        return Err(Error::GridMismatch("family and projection counts differ".into()));
    }
    if family.windows(2).any(|w| w[0].0 + w[0].1 <= w[1].0 + w[1].1) {
        return Err(Error::InvalidArgument(
            "family must be ordered by strictly decreasing J1+J2".into(),
        ));
    }
    let mut out = vec![ZERO; family.len()];
    for q in 0..family.len() {
        let (j1, j2) = family[q];
        let s = j1 + j2;
        let mut rhs = projections[q];
        for p in 0..q {
            let (a, b) = family[p];
            rhs -= out[p] * pair_coefficient(coeffs, s, a, m1, b, m2);
        }
        let diag = pair_coefficient(coeffs, s, j1, m1, j2, m2);
        if diag == 0.0 {
            return Err(Error::SingularSystem(format!("zero diagonal for pair ({j1},{j2})")));
        }
        out[q] = rhs / diag;
    }
    if cfg!(debug_assertions) {
        for q in 0..family.len() {
            let s = family[q].0 + family[q].1;
            let r: Complex64 = (0..family.len())
                .map(|p| out[p] * pair_coefficient(coeffs, s, family[p].0, m1, family[p].1, m2))
                .sum();
            let scale = projections.iter().map(|z| z.norm()).fold(1.0, f64::max);
            debug_assert!((r - projections[q]).norm() <= 1e-8 * scale);
        }
    }
    Ok(out)
}

/// How each harmonic family is solved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FamilySolve {
    /// One projection order per pair (`α = J1 + J2`), square triangular system.
    Triangular,
    /// All projection orders the family touches, QR then back-substitution.
    /// Resynthesis is then the orthogonal projection onto the block's range.
    #[default]
    LeastSquares,
}

/// Options for [`BlockInverter`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InversionOptions {
    /// Reject grids that violate the polar or temporal sampling bounds.
    pub enforce_resolution: bool,
    #[serde(default)]
    pub method: FamilySolve,
}

impl Default for InversionOptions {
    fn default() -> Self {
        InversionOptions {
            enforce_resolution: true,
            method: FamilySolve::LeastSquares,
        }
    }
}

/// Precomputed Legendre and coupling tables for repeated block inversion.
#[derive(Debug, Clone)]
pub struct BlockInverter {
    pub grid: AngularGrid,
    pub times: Vec<f64>,
    pub rotational_constant: f64,
    pub j_max: usize,
    pub options: InversionOptions,
    table: LegendreTable,
    coeffs: CouplingCoefficients,
    /// `phases[t][h + h_max] = e^{-iBht}`
    phases: Vec<Vec<Complex64>>,
    h_max: i64,
}

impl BlockInverter {
    pub fn new(
        grid: &AngularGrid,
        times: &[f64],
        rotational_constant: f64,
        j_max: usize,
        options: InversionOptions,
    ) -> Result<Self> {
        let period = 2.0 * PI / rotational_constant;
        validate_period_sampling(times, period)?;
        let table = evaluate_legendre_on(2 * j_max, grid)?;
        let coeffs = CouplingCoefficients::new(j_max, j_max);
        let h_max = (j_max * (j_max + 1)) as i64;
        let phases = times
            .iter()
            .map(|&t| {
                (-h_max..=h_max)
                    .map(|h| Complex64::from_polar(1.0, -rotational_constant * h as f64 * t))
                    .collect()
            })
            .collect();
        Ok(BlockInverter {
            grid: grid.clone(),
            times: times.to_vec(),
            rotational_constant,
            j_max,
            options,
            table,
            coeffs,
            phases,
            h_max,
        })
    }

    pub fn n_theta(&self) -> usize {
        self.grid.n_theta()
    }

    fn phase(&self, t: usize, h: i64) -> Complex64 {
        self.phases[t][(h + self.h_max) as usize]
    }

    /// Checks that distinct harmonics of the block stay distinct on the
    /// sampled time grid and that every projection order is resolvable.
    pub fn check_resolution(&self, m1: i32, m2: i32) -> Result<()> {
        let fams = harmonic_families(m1, m2, self.j_max);
        let n = self.times.len() as i64;
        let mut seen: BTreeMap<i64, i64> = BTreeMap::new();
        for &h in fams.keys() {
            if let Some(prev) = seen.insert(h.rem_euclid(n), h) {
                return Err(Error::Aliasing {
                    harmonic: h.abs().max(prev.abs()),
                    limit: (n - 1) / 2,
                    samples: n as usize,
                });
            }
        }
        check_order(2 * self.j_max, &self.grid)
    }

    /// Forward model: `Pr_{m1,m2}(θ, t)` on the `(t, θ)` grid.
    pub fn synthesize(&self, block: &MBlock) -> Vec<Complex64> {
        let nt = self.n_theta();
        let (m1, m2) = (block.m1, block.m2);
        let fams = harmonic_families(m1, m2, self.j_max);
        // G_h(θ) = (1/2π) Σ_{pairs in h} ρ P̃_{J1}^{m1} P̃_{J2}^{m2}
        let mut spatial: Vec<(i64, Vec<Complex64>)> = Vec::with_capacity(fams.len());
        for (&h, fam) in &fams {
            let mut g = vec![ZERO; nt];
            let mut any = false;
            for &(j1, j2) in fam {
                let z = block.get(j1, j2);
                if z == ZERO {
                    continue;
                }
                any = true;
                for (i, gi) in g.iter_mut().enumerate() {
                    *gi += z * (self.table.value(j1, m1, i) * self.table.value(j2, m2, i));
                }
            }
            if any {
                for gi in &mut g {
                    *gi /= 2.0 * PI;
                }
                spatial.push((h, g));
            }
        }
        let mut out = vec![ZERO; self.times.len() * nt];
        for k in 0..self.times.len() {
            let row = &mut out[k * nt..(k + 1) * nt];
            for (h, g) in &spatial {
                let ph = self.phase(k, *h);
                for i in 0..nt {
                    row[i] += g[i] * ph;
                }
            }
        }
        out
    }

    /// Least-squares fit of one family against every projection order it
    /// touches, by QR and back-substitution. Pairs with odd and even `J1+J2`
    /// decouple.
    fn fit_family(&self, fam: &[(usize, usize)], spectrum: &[Complex64], m1: i32, m2: i32) -> Result<Vec<Complex64>> {
        let order = m1 + m2;
        let nt = self.n_theta();
        let mut out = vec![ZERO; fam.len()];
        for parity in 0..2 {
            let idx: Vec<usize> = (0..fam.len())
                .filter(|&q| (fam[q].0 + fam[q].1) % 2 == parity)
                .collect();
            let Some(top) = idx.iter().map(|&q| fam[q].0 + fam[q].1).max() else {
                continue;
            };
            let alphas: Vec<usize> = (order.unsigned_abs() as usize..=top)
                .filter(|a| a % 2 == parity)
                .collect();
            let a = DMatrix::<f64>::from_fn(alphas.len(), idx.len(), |r, c| {
                let (j1, j2) = fam[idx[c]];
                pair_coefficient(Some(&self.coeffs), alphas[r], j1, m1, j2, m2)
            });
            let (mut re, mut im) = (DVector::zeros(alphas.len()), DVector::zeros(alphas.len()));
            for (r, &al) in alphas.iter().enumerate() {
                let mut acc = ZERO;
                for i in 0..nt {
                    acc += spectrum[i] * (self.table.value(al, order, i) * self.grid.weights_theta[i]);
                }
                re[r] = acc.re;
                im[r] = acc.im;
            }
            let qr = a.qr();
            let (q, r) = (qr.q(), qr.r());
            if (0..idx.len()).any(|i| r[(i, i)] == 0.0) {
                return Err(Error::SingularSystem(format!(
                    "rank-deficient family in block ({m1},{m2})"
                )));
            }
            let xr = r.solve_upper_triangular(&(q.transpose() * re)).expect("nonzero pivots");
            let xi = r.solve_upper_triangular(&(q.transpose() * im)).expect("nonzero pivots");
            for (c, &qi) in idx.iter().enumerate() {
                out[qi] = Complex64::new(xr[c], xi[c]);
            }
        }
        Ok(out)
    }

    /// Recovers the `(m1, m2)` block from its blockwise probability.
    pub fn invert(&self, values: &[Complex64], m1: i32, m2: i32) -> Result<MBlock> {
        let nt = self.n_theta();
        let n_times = self.times.len();
        if values.len() != nt * n_times {
            return Err(Error::GridMismatch(format!(
                "block has {} values, expected {}",
                values.len(),
                nt * n_times
            )));
        }
        if self.options.enforce_resolution {
            self.check_resolution(m1, m2)?;
        }
        let order = m1 + m2;
        let fams = harmonic_families(m1, m2, self.j_max);
        let mut block = MBlock::zeros(m1, m2, self.j_max);
        let mut spectrum = vec![ZERO; nt];
        for (&h, fam) in &fams {
            // time Fourier at every θ node, then project
            spectrum.iter_mut().for_each(|z| *z = ZERO);
            for k in 0..n_times {
                let ph = self.phase(k, h).conj();
                let row = &values[k * nt..(k + 1) * nt];
                for i in 0..nt {
                    spectrum[i] += row[i] * ph;
                }
            }
            for z in &mut spectrum {
                *z /= n_times as f64;
            }
            let solved = match self.options.method {
                FamilySolve::LeastSquares => self.fit_family(fam, &spectrum, m1, m2)?,
                FamilySolve::Triangular => {
                    let projections: Vec<Complex64> = fam
                        .iter()
                        .map(|&(j1, j2)| {
                            let s = j1 + j2;
                            let mut acc = ZERO;
                            for i in 0..nt {
                                acc += spectrum[i] * (self.table.value(s, order, i) * self.grid.weights_theta[i]);
                            }
                            acc
                        })
                        .collect();
                    solve_family(fam, &projections, m1, m2, Some(&self.coeffs))?
                }
            };
            for (&(j1, j2), z) in fam.iter().zip(solved) {
                block.set(j1, j2, z);
            }
        }
        debug!("inverted block ({m1},{m2}) with {} harmonic families", fams.len());
        Ok(block)
    }
}

/// One-shot inversion of a block held in `blockwise`.
pub fn invert_block(
    blockwise: &BlockwiseProbability,
    m1: i32,
    m2: i32,
    j_max: usize,
    options: InversionOptions,
) -> Result<MBlock> {
    let b = 2.0 * PI / blockwise.period;
    let inv = BlockInverter::new(&blockwise.grid, &blockwise.times, b, j_max, options)?;
    let values = blockwise
        .get(m1, m2)
        .ok_or_else(|| Error::InvalidArgument(format!("block ({m1},{m2}) absent")))?;
    inv.invert(values, m1, m2)
}

/// Default number of time samples per period for a basis of order `j_max`.
pub fn default_time_samples(j_max: usize) -> usize {
    2 * j_max * (j_max + 1) + 1
}
