//! Gauss–Legendre rules on [0, 1] and collapsed (Duffy) product rules on the
//! reference triangle with vertices (0,0), (1,0), (0,1).

use crate::mesh::Point;

/// Gauss–Legendre rule on the unit interval [0, 1].
#[derive(Clone, Debug)]
pub struct GaussRule {
    pub points: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussRule {
    /// `n`-point rule, exact for polynomials of degree `2n - 1`.
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "Gauss rule needs at least one point");
        let mut points = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let nf = n as f64;
        for i in 0..(n + 1) / 2 {
            // Chebyshev-like initial guess, then Newton on P_n.
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
            let mut dp = 1.0;
            for _ in 0..100 {
                let (p, d) = legendre(n, x);
                dp = d;
                let dx = p / d;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let (_, d) = legendre(n, x);
            if d != 0.0 {
                dp = d;
            }
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            // map [-1, 1] -> [0, 1]
            points[i] = 0.5 * (1.0 - x);
            points[n - 1 - i] = 0.5 * (1.0 + x);
            weights[i] = 0.5 * w;
            weights[n - 1 - i] = 0.5 * w;
        }
        Self { points, weights }
    }

    /// Smallest rule integrating degree `degree` exactly.
    pub fn with_degree(degree: usize) -> Self {
        Self::new(degree / 2 + 1)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Returns `(P_n(x), P_n'(x))`.
fn legendre(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let nf = n as f64;
    let dp = nf * (x * p1 - p0) / (x * x - 1.0);
    (p1, dp)
}

/// Quadrature rule on the reference triangle. Weights sum to 1/2.
#[derive(Clone, Debug)]
pub struct TriangleRule {
    pub points: Vec<Point>,
    pub weights: Vec<f64>,
    pub degree: usize,
}

impl TriangleRule {
    /// Collapsed Gauss rule exact for all polynomials of total degree `degree`.
    ///
    /// The map `(u, v) -> (u, v (1 - u))` carries the unit square onto the
    /// triangle with Jacobian `1 - u`, which raises the degree in `u` by one.
    pub fn with_degree(degree: usize) -> Self {
        let gu = GaussRule::with_degree(degree + 1);
        let gv = GaussRule::with_degree(degree);
        let mut points = Vec::with_capacity(gu.len() * gv.len());
        let mut weights = Vec::with_capacity(gu.len() * gv.len());
        for (&u, &wu) in gu.points.iter().zip(&gu.weights) {
            for (&v, &wv) in gv.points.iter().zip(&gv.weights) {
                points.push([u, v * (1.0 - u)]);
                weights.push(wu * wv * (1.0 - u));
            }
        }
        Self {
            points,
            weights,
            degree,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn factorial(n: u32) -> f64 {
        (1..=n).map(f64::from).product()
    }

    #[test]
    fn gauss_integrates_monomials() {
        for n in 1..8 {
            let rule = GaussRule::new(n);
            for k in 0..(2 * n) as i32 {
                let q: f64 = rule
                    .points
                    .iter()
                    .zip(&rule.weights)
                    .map(|(x, w)| w * x.powi(k))
                    .sum();
                let exact = 1.0 / (k as f64 + 1.0);
                assert!((q - exact).abs() < 1e-14, "n={n} k={k}: {q} vs {exact}");
            }
        }
    }

    #[test]
    fn triangle_rule_exactness_up_to_degree() {
        for degree in [2, 4, 6, 8, 12, 16] {
            let rule = TriangleRule::with_degree(degree);
            assert!(rule.weights.iter().all(|&w| w > 0.0));
            for a in 0..=degree as u32 {
                for b in 0..=(degree as u32 - a) {
                    let q: f64 = rule
                        .points
                        .iter()
                        .zip(&rule.weights)
                        .map(|(p, w)| w * p[0].powi(a as i32) * p[1].powi(b as i32))
                        .sum();
                    // int_T x^a y^b = a! b! / (a + b + 2)!
                    let exact = factorial(a) * factorial(b) / factorial(a + b + 2);
                    assert!(
                        ((q - exact) / exact).abs() < 1e-13,
                        "degree {degree}, x^{a} y^{b}: {q} vs {exact}"
                    );
                }
            }
        }
    }
}
