//! Angular special functions: quadrature grids on the sphere, normalized
//! associated Legendre polynomials, spherical harmonics and Clebsch-Gordan
//! coupling coefficients.
//!
//! Normalization convention: `P̃_J^m(cos θ)` is orthonormal on `[0, π]` with
//! weight `sin θ` and carries the Condon-Shortley phase, so that
//! `Y_Jm(θ, φ) = P̃_J^m(cos θ) e^{imφ} / √(2π)` are the standard spherical
//! harmonics. For negative order `P̃_J^{-m} = (-1)^m P̃_J^m`.

use std::f64::consts::PI;
use std::sync::OnceLock;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest angular momentum handled by the factorial tables and recurrences.
pub const MAX_BASIS_ORDER: usize = 160;

/// How the polar integral is discretized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuadratureRule {
    /// Gauss-Legendre nodes in `τ = -cos θ`.
    GaussLegendre,
    /// Midpoint Riemann sum in `τ = -cos θ` with `Δτ = 2/b`.
    Riemann,
}

/// Product quadrature grid over orientations `(θ, φ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AngularGrid {
    pub rule: QuadratureRule,
    pub theta: Vec<f64>,
    pub phi: Vec<f64>,
    pub weights_theta: Vec<f64>,
    pub weights_phi: Vec<f64>,
}

impl AngularGrid {
    pub fn new(rule: QuadratureRule, n_theta: usize, n_phi: usize) -> Result<Self> {
        match rule {
            QuadratureRule::GaussLegendre => Self::gauss_legendre(n_theta, n_phi),
            QuadratureRule::Riemann => Self::riemann(n_theta, n_phi),
        }
    }

    pub fn gauss_legendre(n_theta: usize, n_phi: usize) -> Result<Self> {
        if n_theta == 0 || n_phi == 0 {
            return Err(Error::InvalidGrid("grid needs at least one node per axis".into()));
        }
        let (tau, w) = gauss_legendre_nodes(n_theta);
        // τ = -cos θ increasing <=> θ increasing
        let theta = tau.iter().map(|&t| (-t).acos()).collect();
        let grid = AngularGrid {
            rule: QuadratureRule::GaussLegendre,
            theta,
            phi: uniform_phi(n_phi),
            weights_theta: w,
            weights_phi: vec![2.0 * PI / n_phi as f64; n_phi],
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn riemann(n_theta: usize, n_phi: usize) -> Result<Self> {
        if n_theta == 0 || n_phi == 0 {
            return Err(Error::InvalidGrid("grid needs at least one node per axis".into()));
        }
        let dtau = 2.0 / n_theta as f64;
        let theta = (0..n_theta)
            .map(|j| {
                let tau = -1.0 + (j as f64 + 0.5) * dtau;
                (-tau).acos()
            })
            .collect();
        let grid = AngularGrid {
            rule: QuadratureRule::Riemann,
            theta,
            phi: uniform_phi(n_phi),
            weights_theta: vec![dtau; n_theta],
            weights_phi: vec![2.0 * PI / n_phi as f64; n_phi],
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn n_theta(&self) -> usize {
        self.theta.len()
    }

    pub fn n_phi(&self) -> usize {
        self.phi.len()
    }

    /// Number of orientation cells, `a·b`.
    pub fn len(&self) -> usize {
        self.theta.len() * self.phi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cos_theta(&self) -> Vec<f64> {
        self.theta.iter().map(|t| t.cos()).collect()
    }

    /// Largest polar spacing, including the gaps to the poles.
    pub fn max_theta_spacing(&self) -> f64 {
        let mut worst = self.theta[0].max(PI - self.theta[self.theta.len() - 1]);
        for w in self.theta.windows(2) {
            worst = worst.max(w[1] - w[0]);
        }
        worst
    }

    /// Flat index of cell `(i_phi, j_theta)`; θ runs fastest within φ.
    #[inline]
    pub fn cell(&self, i_phi: usize, j_theta: usize) -> usize {
        i_phi * self.theta.len() + j_theta
    }

    /// Solid-angle weight of a cell.
    #[inline]
    pub fn cell_weight(&self, i_phi: usize, j_theta: usize) -> f64 {
        self.weights_phi[i_phi] * self.weights_theta[j_theta]
    }

    pub fn validate(&self) -> Result<()> {
        if self.theta.len() != self.weights_theta.len() || self.phi.len() != self.weights_phi.len() {
            return Err(Error::InvalidGrid("node and weight counts differ".into()));
        }
        if self.theta.is_empty() || self.phi.is_empty() {
            return Err(Error::InvalidGrid("empty axis".into()));
        }
        let strictly_increasing = |v: &[f64]| v.windows(2).all(|w| w[1] > w[0]);
        if !strictly_increasing(&self.theta) || !strictly_increasing(&self.phi) {
            return Err(Error::InvalidGrid("nodes must be strictly increasing".into()));
        }
        if self.theta[0] < 0.0 || *self.theta.last().unwrap() > PI {
            return Err(Error::InvalidGrid("theta outside [0, pi]".into()));
        }
        if self.phi[0] < 0.0 || *self.phi.last().unwrap() >= 2.0 * PI {
            return Err(Error::InvalidGrid("phi outside [0, 2pi)".into()));
        }
        let st: f64 = self.weights_theta.iter().sum();
        let sp: f64 = self.weights_phi.iter().sum();
        if (st - 2.0).abs() > 1e-10 || (sp - 2.0 * PI).abs() > 1e-10 {
            return Err(Error::InvalidGrid(format!(
                "weights sum to {st} (theta) and {sp} (phi)"
            )));
        }
        Ok(())
    }
}

fn uniform_phi(n: usize) -> Vec<f64> {
    let d = 2.0 * PI / n as f64;
    (0..n).map(|i| i as f64 * d).collect()
}

/// Gauss-Legendre nodes (ascending) and weights on `[-1, 1]`.
pub fn gauss_legendre_nodes(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let half = n.div_ceil(2);
    for i in 0..half {
        // Tricomi initial guess, then Newton on P_n
        let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_and_derivative(n, z);
            dp = d;
            let dz = p / d;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre_and_derivative(n, z);
        if d != 0.0 {
            dp = d;
        }
        let weight = 2.0 / ((1.0 - z * z) * dp * dp);
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = weight;
        w[n - 1 - i] = weight;
    }
    if n % 2 == 1 {
        x[n / 2] = 0.0;
    }
    (x, w)
}

fn legendre_and_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Normalized associated Legendre values `P̃_J^m(x)` for `0 <= m <= J <= j_max`
/// at a single argument, written into `out[idx(J, m)]` (triangular layout).
fn legendre_column(j_max: usize, x: f64, out: &mut [f64]) {
    let s = (1.0 - x * x).max(0.0).sqrt();
    let tri = |j: usize, m: usize| j * (j + 1) / 2 + m;
    let mut pmm = std::f64::consts::FRAC_1_SQRT_2;
    for m in 0..=j_max {
        if m > 0 {
            pmm *= -((2 * m + 1) as f64 / (2 * m) as f64).sqrt() * s;
        }
        out[tri(m, m)] = pmm;
        if m == j_max {
            break;
        }
        let mut p_prev = pmm;
        let mut p_cur = ((2 * m + 3) as f64).sqrt() * x * pmm;
        out[tri(m + 1, m)] = p_cur;
        for j in (m + 2)..=j_max {
            let jf = j as f64;
            let mf = m as f64;
            let a = ((4.0 * jf * jf - 1.0) / (jf * jf - mf * mf)).sqrt();
            let b = (((jf - 1.0).powi(2) - mf * mf) / (4.0 * (jf - 1.0).powi(2) - 1.0)).sqrt();
            let p_next = a * (x * p_cur - b * p_prev);
            out[tri(j, m)] = p_next;
            p_prev = p_cur;
            p_cur = p_next;
        }
    }
}

/// `P̃_J^m(x)` for a single `(J, m)` and argument. Any sign of `m` is accepted.
pub fn normalized_legendre(j: usize, m: i32, x: f64) -> f64 {
    let am = m.unsigned_abs() as usize;
    if am > j {
        return 0.0;
    }
    let mut col = vec![0.0; (j + 1) * (j + 2) / 2];
    legendre_column(j, x, &mut col);
    let v = col[j * (j + 1) / 2 + am];
    if m < 0 && am % 2 == 1 {
        -v
    } else {
        v
    }
}

/// Spherical harmonic `Y_Jm(θ, φ)`.
pub fn spherical_harmonic(j: usize, m: i32, theta: f64, phi: f64) -> Complex64 {
    let p = normalized_legendre(j, m, theta.cos());
    Complex64::from_polar(p / (2.0 * PI).sqrt(), m as f64 * phi)
}

/// Table of `P̃_J^m(cos θ_i)` for all `J <= j_max`, `|m| <= J` and grid nodes.
#[derive(Debug, Clone)]
pub struct LegendreTable {
    j_max: usize,
    n_nodes: usize,
    /// `values[tri(J,|m|) * n_nodes + i]` for `m >= 0`.
    values: Vec<f64>,
}

impl LegendreTable {
    pub fn j_max(&self) -> usize {
        self.j_max
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    /// Values of `P̃_J^m` over all nodes. Negative `m` uses the parity relation,
    /// so callers receive an owned buffer only in that case.
    pub fn row(&self, j: usize, m: i32) -> std::borrow::Cow<'_, [f64]> {
        let am = m.unsigned_abs() as usize;
        assert!(j <= self.j_max && am <= j, "({j},{m}) outside table");
        let start = (j * (j + 1) / 2 + am) * self.n_nodes;
        let slice = &self.values[start..start + self.n_nodes];
        if m < 0 && am % 2 == 1 {
            std::borrow::Cow::Owned(slice.iter().map(|v| -v).collect())
        } else {
            std::borrow::Cow::Borrowed(slice)
        }
    }

    #[inline]
    pub fn value(&self, j: usize, m: i32, node: usize) -> f64 {
        let am = m.unsigned_abs() as usize;
        let v = self.values[(j * (j + 1) / 2 + am) * self.n_nodes + node];
        if m < 0 && am % 2 == 1 {
            -v
        } else {
            v
        }
    }
}

/// Evaluate the normalized associated Legendre table on the polar nodes.
pub fn evaluate_legendre(j_max: usize, cos_theta: &[f64]) -> Result<LegendreTable> {
    if j_max > MAX_BASIS_ORDER {
        return Err(Error::BasisOrderTooLarge(format!(
            "j_max = {j_max} exceeds supported maximum {MAX_BASIS_ORDER}"
        )));
    }
    let tri_len = (j_max + 1) * (j_max + 2) / 2;
    let n = cos_theta.len();
    let mut values = vec![0.0; tri_len * n];
    let mut col = vec![0.0; tri_len];
    for (i, &x) in cos_theta.iter().enumerate() {
        legendre_column(j_max, x, &mut col);
        for (k, v) in col.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::BasisOrderTooLarge(format!(
                    "non-finite Legendre value at order index {k}"
                )));
            }
            values[k * n + i] = *v;
        }
    }
    Ok(LegendreTable {
        j_max,
        n_nodes: n,
        values,
    })
}

/// Convenience: table on the polar nodes of an [`AngularGrid`].
pub fn evaluate_legendre_on(j_max: usize, grid: &AngularGrid) -> Result<LegendreTable> {
    evaluate_legendre(j_max, &grid.cos_theta())
}

fn ln_factorials() -> &'static [f64] {
    static TABLE: OnceLock<Vec<f64>> = OnceLock::new();
    TABLE.get_or_init(|| {
        let n = 4 * MAX_BASIS_ORDER + 8;
        let mut t = vec![0.0; n];
        for k in 1..n {
            t[k] = t[k - 1] + (k as f64).ln();
        }
        t
    })
}

#[inline]
fn lnf(n: i64) -> f64 {
    ln_factorials()[n as usize]
}

/// Clebsch-Gordan coefficient `⟨j1 m1 j2 m2 | J M⟩` for integer angular momenta.
///
/// Returns 0 whenever the triangle rule, projection bounds or `M = m1 + m2`
/// are violated.
pub fn clebsch_gordan(j1: i64, m1: i64, j2: i64, m2: i64, j: i64, m: i64) -> f64 {
    if j1 < 0 || j2 < 0 || j < 0 {
        return 0.0;
    }
    if m1.abs() > j1 || m2.abs() > j2 || m.abs() > j || m1 + m2 != m {
        return 0.0;
    }
    if j < (j1 - j2).abs() || j > j1 + j2 {
        return 0.0;
    }
    if (j1 + j2 + j) as usize > 4 * MAX_BASIS_ORDER {
        return f64::NAN;
    }
    // ⟨j1 0 j2 0|J 0⟩ vanishes for odd j1+j2+J
    if m1 == 0 && m2 == 0 && (j1 + j2 + j) % 2 == 1 {
        return 0.0;
    }
    let prefactor = 0.5 * ((2 * j + 1) as f64).ln()
        + 0.5 * (lnf(j1 + j2 - j) + lnf(j1 - j2 + j) + lnf(-j1 + j2 + j) - lnf(j1 + j2 + j + 1))
        + 0.5 * (lnf(j1 + m1) + lnf(j1 - m1) + lnf(j2 + m2) + lnf(j2 - m2) + lnf(j + m) + lnf(j - m));
    let k_min = 0.max(j2 - j - m1).max(j1 - j + m2);
    let k_max = (j1 + j2 - j).min(j1 - m1).min(j2 + m2);
    let mut sum = 0.0;
    for k in k_min..=k_max {
        let denom = lnf(k)
            + lnf(j1 + j2 - j - k)
            + lnf(j1 - m1 - k)
            + lnf(j2 + m2 - k)
            + lnf(j - j2 + m1 + k)
            + lnf(j - j1 - m2 + k);
        let term = (prefactor - denom).exp();
        if k % 2 == 0 {
            sum += term;
        } else {
            sum -= term;
        }
    }
    sum
}

/// Coefficient `C^{L, m1+m2}_{J1 m1 J2 m2}` of the expansion
/// `P̃_{J1}^{m1} P̃_{J2}^{m2} = Σ_L C P̃_L^{m1+m2}`.
pub fn coupling_coefficient(l: usize, j1: usize, m1: i32, j2: usize, m2: i32) -> f64 {
    let (j1i, j2i, li) = (j1 as i64, j2 as i64, l as i64);
    let cg_m = clebsch_gordan(j1i, m1 as i64, j2i, m2 as i64, li, (m1 + m2) as i64);
    if cg_m == 0.0 {
        return 0.0;
    }
    let cg_0 = clebsch_gordan(j1i, 0, j2i, 0, li, 0);
    if cg_0 == 0.0 {
        return 0.0;
    }
    (((2 * j1 + 1) * (2 * j2 + 1)) as f64 / (2.0 * (2 * l + 1) as f64)).sqrt() * cg_m * cg_0
}

/// Expansion of a product of two normalized Legendre functions into single
/// ones of order `m1 + m2`: pairs `(L, C^{L,m1+m2}_{J1 m1 J2 m2})` for
/// `L = |J1-J2| ..= J1+J2`.
pub fn product_expansion(j1: usize, m1: i32, j2: usize, m2: i32) -> Vec<(usize, f64)> {
    let lo = j1.abs_diff(j2);
    (lo..=j1 + j2)
        .map(|l| (l, coupling_coefficient(l, j1, m1, j2, m2)))
        .collect()
}

/// Precomputed coupling coefficients for all index tuples up to `j_max`.
#[derive(Debug, Clone)]
pub struct CouplingCoefficients {
    j_max: usize,
    m_max: usize,
    table: Vec<f64>,
}

impl CouplingCoefficients {
    /// Builds the table for `J1, J2 <= j_max`, `|m1|,|m2| <= m_max`.
    pub fn new(j_max: usize, m_max: usize) -> Self {
        let nj = j_max + 1;
        let nm = 2 * m_max + 1;
        let nl = 2 * j_max + 1;
        let mut table = vec![0.0; nj * nj * nm * nm * nl];
        let mut out = CouplingCoefficients {
            j_max,
            m_max,
            table: Vec::new(),
        };
        for j1 in 0..nj {
            for j2 in 0..nj {
                for m1 in -(m_max as i32)..=(m_max as i32) {
                    for m2 in -(m_max as i32)..=(m_max as i32) {
                        if m1.unsigned_abs() as usize > j1 || m2.unsigned_abs() as usize > j2 {
                            continue;
                        }
                        for l in j1.abs_diff(j2)..=(j1 + j2) {
                            let idx = out.index(l, j1, m1, j2, m2);
                            table[idx] = coupling_coefficient(l, j1, m1, j2, m2);
                        }
                    }
                }
            }
        }
        out.table = table;
        out
    }

    fn index(&self, l: usize, j1: usize, m1: i32, j2: usize, m2: i32) -> usize {
        let nj = self.j_max + 1;
        let nm = 2 * self.m_max + 1;
        let nl = 2 * self.j_max + 1;
        let mi1 = (m1 + self.m_max as i32) as usize;
        let mi2 = (m2 + self.m_max as i32) as usize;
        (((j1 * nj + j2) * nm + mi1) * nm + mi2) * nl + l
    }

    pub fn j_max(&self) -> usize {
        self.j_max
    }

    /// Returns the coefficient, or 0 outside the table or the triangle rule.
    #[inline]
    pub fn get(&self, l: usize, j1: usize, m1: i32, j2: usize, m2: i32) -> f64 {
        if j1 > self.j_max
            || j2 > self.j_max
            || m1.unsigned_abs() as usize > self.m_max
            || m2.unsigned_abs() as usize > self.m_max
            || l > j1 + j2
            || l < j1.abs_diff(j2)
        {
            return 0.0;
        }
        self.table[self.index(l, j1, m1, j2, m2)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn grid_weight_sums() {
        for rule in [QuadratureRule::GaussLegendre, QuadratureRule::Riemann] {
            let g = AngularGrid::new(rule, 37, 12).unwrap();
            assert_abs_diff_eq!(g.weights_theta.iter().sum::<f64>(), 2.0, epsilon = 1e-10);
            assert_abs_diff_eq!(g.weights_phi.iter().sum::<f64>(), 2.0 * PI, epsilon = 1e-10);
            assert!(g.theta.windows(2).all(|w| w[1] > w[0]));
        }
    }

    #[test]
    fn empty_grid_rejected() {
        assert!(AngularGrid::gauss_legendre(0, 4).is_err());
        assert!(AngularGrid::riemann(4, 0).is_err());
    }

    #[test]
    fn constant_polynomial() {
        for x in [-1.0, -0.3, 0.0, 0.7, 1.0] {
            assert_abs_diff_eq!(normalized_legendre(0, 0, x), 0.7071067811865476, epsilon = 1e-15);
        }
    }

    #[test]
    fn p20_at_pole() {
        assert_abs_diff_eq!(normalized_legendre(2, 0, 1.0), 1.5811388300841898, epsilon = 1e-14);
        // quadrature cross-check of the normalization
        let g = AngularGrid::gauss_legendre(40, 1).unwrap();
        let t = evaluate_legendre_on(2, &g).unwrap();
        let norm: f64 = (0..40).map(|i| t.value(2, 0, i).powi(2) * g.weights_theta[i]).sum();
        assert_abs_diff_eq!(norm, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn orthogonality_example() {
        let g = AngularGrid::gauss_legendre(64, 1).unwrap();
        let t = evaluate_legendre_on(5, &g).unwrap();
        let ip: f64 = (0..64)
            .map(|i| t.value(3, 1, i) * t.value(5, 1, i) * g.weights_theta[i])
            .sum();
        assert_abs_diff_eq!(ip, 0.0, epsilon = 1e-8);
    }

    #[test]
    fn condon_shortley_phase() {
        // Y_11 = -sqrt(3/8π) sinθ e^{iφ}
        let th: f64 = 0.7;
        let y = spherical_harmonic(1, 1, th, 0.0);
        assert_abs_diff_eq!(y.re, -(3.0 / (8.0 * PI)).sqrt() * th.sin(), epsilon = 1e-14);
        // Y_{J,-m} = (-1)^m conj(Y_Jm)
        let a = spherical_harmonic(3, -2, 0.4, 1.1);
        let b = spherical_harmonic(3, 2, 0.4, 1.1).conj();
        assert_abs_diff_eq!((a - b).norm(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn basis_order_guard() {
        assert!(matches!(
            evaluate_legendre(MAX_BASIS_ORDER + 1, &[0.0]),
            Err(Error::BasisOrderTooLarge(_))
        ));
    }

    #[test]
    fn cg_examples() {
        assert_abs_diff_eq!(clebsch_gordan(0, 0, 0, 0, 0, 0), 1.0, epsilon = 1e-15);
        assert_eq!(clebsch_gordan(1, 0, 1, 0, 1, 0), 0.0);
        assert_abs_diff_eq!(clebsch_gordan(1, 0, 1, 0, 0, 0), -0.5773502691896258, epsilon = 1e-14);
        // invalid quantum numbers
        assert_eq!(clebsch_gordan(1, 2, 1, 0, 2, 2), 0.0);
        assert_eq!(clebsch_gordan(1, 0, 1, 0, 3, 0), 0.0);
        assert_eq!(clebsch_gordan(1, 1, 1, 0, 2, 0), 0.0);
    }

    #[test]
    fn product_of_constants() {
        let e = product_expansion(0, 0, 0, 0);
        assert_eq!(e.len(), 1);
        assert_abs_diff_eq!(e[0].1, std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-15);
    }

    #[test]
    fn parity_selection_in_expansion() {
        let e = product_expansion(1, 0, 1, 0);
        for (l, c) in e {
            if l == 1 {
                assert_eq!(c, 0.0);
            } else {
                assert!(c.abs() > 1e-3, "L={l}");
            }
        }
    }

    #[test]
    fn coupling_table_matches_direct() {
        let t = CouplingCoefficients::new(4, 2);
        assert_abs_diff_eq!(t.get(3, 2, 1, 3, -1), coupling_coefficient(3, 2, 1, 3, -1));
        assert_eq!(t.get(9, 2, 1, 3, -1), 0.0);
    }
}
