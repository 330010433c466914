use proptest::prelude::*;

use uedqt::angular::{
    clebsch_gordan, coupling_coefficient, evaluate_legendre, gauss_legendre_nodes, normalized_legendre, AngularGrid,
};

mod common;
use common::worst_cg_deviation;

#[test]
fn clebsch_gordan_matches_lowering_oracle() {
    let worst = worst_cg_deviation(4);
    assert!(worst <= 1e-10, "worst CG deviation {worst:e}");
}

#[test]
fn coupling_matches_triple_product_quadrature() {
    let (x, w) = gauss_legendre_nodes(40);
    let mut worst: f64 = 0.0;
    for j1 in 0..=8usize {
        for j2 in 0..=8usize {
            for m1 in -(j1 as i32)..=(j1 as i32) {
                for m2 in -(j2 as i32)..=(j2 as i32) {
                    let m = m1 + m2;
                    for l in j1.abs_diff(j2)..=j1 + j2 {
                        if (m.unsigned_abs() as usize) > l {
                            continue;
                        }
                        let q: f64 = x
                            .iter()
                            .zip(&w)
                            .map(|(&xi, &wi)| {
                                wi * normalized_legendre(j1, m1, xi)
                                    * normalized_legendre(j2, m2, xi)
                                    * normalized_legendre(l, m, xi)
                            })
                            .sum();
                        worst = worst.max((coupling_coefficient(l, j1, m1, j2, m2) - q).abs());
                    }
                }
            }
        }
    }
    assert!(worst <= 1e-10, "worst coupling deviation {worst:e}");
}

#[test]
fn legendre_orthonormal_on_gauss_grid() {
    let j_max = 24;
    let (x, w) = gauss_legendre_nodes(j_max + 1);
    let table = evaluate_legendre(j_max, &x).unwrap();
    let mut worst: f64 = 0.0;
    for m in 0..=j_max as i32 {
        for j in (m as usize)..=j_max {
            for k in (m as usize)..=j_max {
                let (a, b) = (table.row(j, m), table.row(k, m));
                let s: f64 = (0..x.len()).map(|i| w[i] * a[i] * b[i]).sum();
                worst = worst.max((s - if j == k { 1.0 } else { 0.0 }).abs());
            }
        }
    }
    assert!(worst <= 1e-8, "worst orthonormality deviation {worst:e}");
}

#[test]
fn riemann_grid_converges_slowly() {
    let g = AngularGrid::riemann(400, 1).unwrap();
    let x = g.cos_theta();
    let s: f64 = (0..x.len())
        .map(|i| g.weights_theta[i] * normalized_legendre(4, 0, x[i]).powi(2))
        .sum();
    assert!((s - 1.0).abs() < 1e-3);
}

proptest! {
    #[test]
    fn negative_order_symmetry(j in 0usize..20, m in 0i32..20, x in -1.0f64..1.0) {
        prop_assume!(m as usize <= j);
        let sign = if m % 2 == 0 { 1.0 } else { -1.0 };
        prop_assert!((normalized_legendre(j, -m, x) - sign * normalized_legendre(j, m, x)).abs() <= 1e-12);
    }

    #[test]
    fn cg_orthogonality(j1 in 0i64..5, j2 in 0i64..5, m in -4i64..5) {
        // Σ_{m1} ⟨j1 m1 j2 m-m1|J M⟩⟨j1 m1 j2 m-m1|J' M⟩ = δ_JJ'
        let lo = (j1 - j2).abs();
        for j in lo..=j1 + j2 {
            for jp in lo..=j1 + j2 {
                if m.abs() > j.min(jp) {
                    continue;
                }
                let s: f64 = (-j1..=j1)
                    .map(|m1| clebsch_gordan(j1, m1, j2, m - m1, j, m) * clebsch_gordan(j1, m1, j2, m - m1, jp, m))
                    .sum();
                let expected = if j == jp { 1.0 } else { 0.0 };
                prop_assert!((s - expected).abs() <= 1e-10, "J={} J'={}: {}", j, jp, s);
            }
        }
    }
}
