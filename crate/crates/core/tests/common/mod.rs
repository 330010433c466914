use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// `J_-` coefficient `√(j(j+1) - m(m-1))`.
fn lower(j: i64, m: i64) -> f64 {
    (((j * (j + 1)) - m * (m - 1)) as f64).sqrt()
}

/// Coupled states `|J M⟩` over the product basis `|m1⟩|m2⟩`, built by
/// diagonalizing `J²` in the `M = J` sector and lowering.
pub fn coupled_state(j1: i64, j2: i64, j: i64, m: i64) -> Vec<((i64, i64), f64)> {
    let sector: Vec<(i64, i64)> = (-j1..=j1)
        .filter(|m1| (j - m1).abs() <= j2)
        .map(|m1| (m1, j - m1))
        .collect();
    let n = sector.len();
    let mut h = DMatrix::<f64>::zeros(n, n);
    for (a, &(m1, m2)) in sector.iter().enumerate() {
        h[(a, a)] = (j1 * (j1 + 1) + j2 * (j2 + 1) + 2 * m1 * m2) as f64;
        for (b, &(n1, n2)) in sector.iter().enumerate() {
            // J1+ J2- and J1- J2+
            if n1 == m1 + 1 && n2 == m2 - 1 {
                let v = lower(j1, n1) * lower(j2, m2);
                h[(a, b)] += v;
                h[(b, a)] += v;
            }
        }
    }
    let eig = SymmetricEigen::new(h);
    let target = (j * (j + 1)) as f64;
    let k = (0..n)
        .min_by(|&a, &b| {
            (eig.eigenvalues[a] - target)
                .abs()
                .total_cmp(&(eig.eigenvalues[b] - target).abs())
        })
        .unwrap();
    let mut v: DVector<f64> = eig.eigenvectors.column(k).into_owned();
    let top = sector.iter().position(|&(m1, _)| m1 == j1).unwrap();
    if v[top] < 0.0 {
        v = -v;
    }
    let mut state: Vec<((i64, i64), f64)> = sector.iter().cloned().zip(v.iter().cloned()).collect();
    let mut cur = j;
    while cur > m {
        let mut next: Vec<((i64, i64), f64)> = Vec::new();
        let mut add = |key: (i64, i64), c: f64| match next.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => *v += c,
            None => next.push((key, c)),
        };
        for &((m1, m2), c) in &state {
            if m1 > -j1 {
                add((m1 - 1, m2), c * lower(j1, m1));
            }
            if m2 > -j2 {
                add((m1, m2 - 1), c * lower(j2, m2));
            }
        }
        let norm = lower(j, cur);
        state = next.into_iter().map(|(k, c)| (k, c / norm)).collect();
        cur -= 1;
    }
    state
}

/// Largest deviation of `clebsch_gordan` from the oracle for `j1, j2 ≤ j_limit`.
pub fn worst_cg_deviation(j_limit: i64) -> f64 {
    let mut worst: f64 = 0.0;
    for j1 in 0..=j_limit {
        for j2 in 0..=j_limit {
            for j in (j1 - j2).abs()..=j1 + j2 {
                for m in -j..=j {
                    for ((m1, m2), c) in coupled_state(j1, j2, j, m) {
                        worst = worst.max((uedqt::angular::clebsch_gordan(j1, m1, j2, m2, j, m) - c).abs());
                    }
                }
            }
        }
    }
    worst
}
