//! Reference quadrature rules.

/// Gauss–Legendre rule on `[0, 1]` exact to degree `degree`:
/// `(points, weights)` with weights summing to 1.
pub fn gauss_legendre(degree: usize) -> (Vec<f64>, Vec<f64>) {
    let n = (degree + 2) / 2;
    let (p, w): (Vec<f64>, Vec<f64>) = match n {
        0 | 1 => (vec![0.0], vec![2.0]),
        2 => {
            let a = 1.0 / 3f64.sqrt();
            (vec![-a, a], vec![1.0, 1.0])
        }
        _ => {
            let a = (3.0f64 / 5.0).sqrt();
            (vec![-a, 0.0, a], vec![5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0])
        }
    };
    (
        p.iter().map(|x| 0.5 * (x + 1.0)).collect(),
        w.iter().map(|x| 0.5 * x).collect(),
    )
}

/// Rule on the reference triangle `{ξ, η ≥ 0, ξ + η ≤ 1}` exact to degree
/// `degree` (capped at 4): `(points [(ξ, η)], weights)` with weights
/// summing to the reference area 1/2.
pub fn triangle(degree: usize) -> (Vec<[f64; 2]>, Vec<f64>) {
    match degree {
        0 | 1 => (vec![[1.0 / 3.0, 1.0 / 3.0]], vec![0.5]),
        2 => (
            vec![[1.0 / 6.0, 1.0 / 6.0], [2.0 / 3.0, 1.0 / 6.0], [1.0 / 6.0, 2.0 / 3.0]],
            vec![1.0 / 6.0; 3],
        ),
        _ => {
            let (a1, b1, w1) = (0.445_948_490_915_965, 0.108_103_018_168_070, 0.223_381_589_678_011);
            let (a2, b2, w2) = (0.091_576_213_509_771, 0.816_847_572_980_459, 0.109_951_743_655_322);
            (
                vec![[a1, a1], [b1, a1], [a1, b1], [a2, a2], [b2, a2], [a2, b2]],
                [w1, w1, w1, w2, w2, w2].iter().map(|w| 0.5 * w).collect(),
            )
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// ∫ ξ^a η^b over the reference triangle = a! b! / (a + b + 2)!.
    fn exact(a: u32, b: u32) -> f64 {
        let f = |n: u32| (1..=n).map(f64::from).product::<f64>();
        f(a) * f(b) / f(a + b + 2)
    }

    #[test]
    fn triangle_rules_are_exact() {
        for (deg, max) in [(1, 1), (2, 2), (3, 4), (4, 4)] {
            let (p, w) = triangle(deg);
            for a in 0..=max {
                for b in 0..=(max - a) {
                    let q: f64 = p
                        .iter()
                        .zip(&w)
                        .map(|(x, w)| w * x[0].powi(a as i32) * x[1].powi(b as i32))
                        .sum();
                    assert!((q - exact(a, b)).abs() < 1e-12, "deg {deg}: {a},{b}");
                }
            }
        }
    }

    #[test]
    fn gauss_legendre_is_exact() {
        for deg in 1..=5 {
            let (p, w) = gauss_legendre(deg);
            for k in 0..=deg {
                let q: f64 = p.iter().zip(&w).map(|(x, w)| w * x.powi(k as i32)).sum();
                assert!((q - 1.0 / (k as f64 + 1.0)).abs() < 1e-14);
            }
        }
    }
}
