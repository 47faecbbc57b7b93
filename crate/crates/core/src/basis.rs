//! Lagrange basis of P_r on the reference triangle.

use crate::error::{FemError, Result};
use crate::mesh::Point;

pub const MIN_DEGREE: usize = 2;
pub const MAX_DEGREE: usize = 4;

/// Nodal basis on the equispaced lattice `(i/r, j/r)`, `i + j <= r`.
///
/// Node `k` carries barycentric lattice indices `(r - i - j, i, j)` with
/// respect to the reference vertices `(0,0)`, `(1,0)`, `(0,1)`, and the basis
/// function is the product `Π_v Π_{s < l_v} (r λ_v - s)/(s + 1)`.
#[derive(Clone, Debug)]
pub struct LagrangeBasis {
    degree: usize,
    nodes: Vec<Point>,
    lattice: Vec<[usize; 3]>,
}

/// Value, first and second derivative of `Π_{s < l} (r t - s)/(s + 1)`.
fn factor(r: f64, l: usize, t: f64) -> [f64; 3] {
    let (mut p, mut dp, mut ddp) = (1.0, 0.0, 0.0);
    for s in 0..l {
        let d = (s + 1) as f64;
        let (f, df) = ((r * t - s as f64) / d, r / d);
        ddp = ddp * f + 2.0 * dp * df;
        dp = dp * f + p * df;
        p *= f;
    }
    [p, dp, ddp]
}

impl LagrangeBasis {
    pub fn new(degree: usize) -> Result<Self> {
        if !(MIN_DEGREE..=MAX_DEGREE).contains(&degree) {
            return Err(FemError::UnsupportedDegree(degree));
        }
        let r = degree as f64;
        let mut nodes = Vec::new();
        let mut lattice = Vec::new();
        for j in 0..=degree {
            for i in 0..=degree - j {
                nodes.push([i as f64 / r, j as f64 / r]);
                lattice.push([degree - i - j, i, j]);
            }
        }
        Ok(Self { degree, nodes, lattice })
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[Point] {
        &self.nodes
    }

    pub fn lattice(&self, k: usize) -> [usize; 3] {
        self.lattice[k]
    }

    fn factors(&self, xi: Point) -> impl Iterator<Item = [[f64; 3]; 3]> + '_ {
        let r = self.degree as f64;
        let bary = [1.0 - xi[0] - xi[1], xi[0], xi[1]];
        self.lattice
            .iter()
            .map(move |l| std::array::from_fn(|v| factor(r, l[v], bary[v])))
    }

    pub fn values(&self, xi: Point) -> Vec<f64> {
        self.factors(xi).map(|[a, b, c]| a[0] * b[0] * c[0]).collect()
    }

    pub fn gradients(&self, xi: Point) -> Vec<[f64; 2]> {
        self.factors(xi)
            .map(|[a, b, c]| {
                let d0 = a[1] * b[0] * c[0];
                [b[1] * a[0] * c[0] - d0, c[1] * a[0] * b[0] - d0]
            })
            .collect()
    }

    pub fn hessians(&self, xi: Point) -> Vec<[[f64; 2]; 2]> {
        self.factors(xi)
            .map(|[a, b, c]| {
                let a00 = a[2] * b[0] * c[0];
                let xx = a00 - 2.0 * a[1] * b[1] * c[0] + a[0] * b[2] * c[0];
                let yy = a00 - 2.0 * a[1] * b[0] * c[1] + a[0] * b[0] * c[2];
                let xy = a00 - a[1] * b[0] * c[1] - a[1] * b[1] * c[0] + a[0] * b[1] * c[1];
                [[xx, xy], [xy, yy]]
            })
            .collect()
    }
}

/// Whether `xi` lies in the closed reference triangle (tolerance 1e-12).
pub fn in_reference_triangle(xi: Point) -> bool {
    let tol = 1e-12;
    xi[0] >= -tol && xi[1] >= -tol && xi[0] + xi[1] <= 1.0 + tol
}
