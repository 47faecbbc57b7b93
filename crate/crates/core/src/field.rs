//! Piecewise-smooth fields evaluated cell by cell at physical points.
//!
//! Evaluation takes the owning cell so that one-sided traces of broken
//! functions are well defined on faces.

use std::sync::Arc;

use crate::fe_space::FeFunction;
use crate::mesh::{Mesh, Point};

pub type Matrix2 = [[f64; 2]; 2];

/// A function in `W^{1,1}(T_h)`: cellwise values and gradients.
pub trait BrokenField: Sync {
    /// Mesh the field lives on, when it is tied to one.
    fn mesh(&self) -> Option<&Arc<Mesh>> {
        None
    }
    fn value(&self, cell: usize, x: Point) -> f64;
    fn gradient(&self, cell: usize, x: Point) -> [f64; 2];

    /// Value when the reference coordinates `xi` of `x` in `cell` are known.
    fn value_at(&self, cell: usize, x: Point, _xi: Point) -> f64 {
        self.value(cell, x)
    }

    fn gradient_at(&self, cell: usize, x: Point, _xi: Point) -> [f64; 2] {
        self.gradient(cell, x)
    }
}

/// A function in `W^{2,1}(T_h)`.
pub trait BrokenH2Field: BrokenField {
    fn hessian(&self, cell: usize, x: Point) -> Matrix2;
}

impl BrokenField for FeFunction {
    fn mesh(&self) -> Option<&Arc<Mesh>> {
        Some(self.space().mesh())
    }

    fn value(&self, cell: usize, x: Point) -> f64 {
        let xi = self.space().mesh().cell_map(cell).to_reference(x);
        self.eval_unchecked(cell, xi)
    }

    fn gradient(&self, cell: usize, x: Point) -> [f64; 2] {
        let xi = self.space().mesh().cell_map(cell).to_reference(x);
        self.gradient_unchecked(cell, xi)
    }

    fn value_at(&self, cell: usize, _: Point, xi: Point) -> f64 {
        self.eval_unchecked(cell, xi)
    }

    fn gradient_at(&self, cell: usize, _: Point, xi: Point) -> [f64; 2] {
        self.gradient_unchecked(cell, xi)
    }
}

impl BrokenH2Field for FeFunction {
    fn hessian(&self, cell: usize, x: Point) -> Matrix2 {
        let xi = self.space().mesh().cell_map(cell).to_reference(x);
        self.hessian_unchecked(cell, xi)
    }
}

/// `(∇u_h)_i` as a broken field; its gradient is row `i` of the elementwise
/// Hessian.
pub struct GradientComponent<'a> {
    pub function: &'a FeFunction,
    pub axis: usize,
}

impl BrokenField for GradientComponent<'_> {
    fn mesh(&self) -> Option<&Arc<Mesh>> {
        Some(self.function.space().mesh())
    }

    fn value(&self, cell: usize, x: Point) -> f64 {
        self.function.gradient(cell, x)[self.axis]
    }

    fn gradient(&self, cell: usize, x: Point) -> [f64; 2] {
        self.function.hessian(cell, x)[self.axis]
    }

    fn value_at(&self, cell: usize, _: Point, xi: Point) -> f64 {
        self.function.gradient_unchecked(cell, xi)[self.axis]
    }

    fn gradient_at(&self, cell: usize, _: Point, xi: Point) -> [f64; 2] {
        self.function.hessian_unchecked(cell, xi)[self.axis]
    }
}

/// A globally smooth function with analytic derivatives.
pub trait ExactSolution: Sync {
    fn value(&self, x: Point) -> f64;
    fn gradient(&self, x: Point) -> [f64; 2];
    fn hessian(&self, x: Point) -> Matrix2;
}

/// Adapts an [`ExactSolution`] (or any smooth function) to the broken traits.
pub struct Smooth<'a>(pub &'a dyn ExactSolution);

impl BrokenField for Smooth<'_> {
    fn value(&self, _: usize, x: Point) -> f64 {
        self.0.value(x)
    }
    fn gradient(&self, _: usize, x: Point) -> [f64; 2] {
        self.0.gradient(x)
    }
}

impl BrokenH2Field for Smooth<'_> {
    fn hessian(&self, _: usize, x: Point) -> Matrix2 {
        self.0.hessian(x)
    }
}

/// Cellwise closure field `f(cell, x) -> (value, gradient)`.
pub struct CellwiseFn<F>(pub F);

impl<F> BrokenField for CellwiseFn<F>
where
    F: Fn(usize, Point) -> (f64, [f64; 2]) + Sync,
{
    fn value(&self, cell: usize, x: Point) -> f64 {
        (self.0)(cell, x).0
    }
    fn gradient(&self, cell: usize, x: Point) -> [f64; 2] {
        (self.0)(cell, x).1
    }
}

/// `a - b`.
pub struct Difference<'a, A: ?Sized, B: ?Sized>(pub &'a A, pub &'a B);

impl<A: BrokenField + ?Sized, B: BrokenField + ?Sized> BrokenField for Difference<'_, A, B> {
    fn mesh(&self) -> Option<&Arc<Mesh>> {
        self.0.mesh().or_else(|| self.1.mesh())
    }
    fn value(&self, cell: usize, x: Point) -> f64 {
        self.0.value(cell, x) - self.1.value(cell, x)
    }
    fn gradient(&self, cell: usize, x: Point) -> [f64; 2] {
        let (a, b) = (self.0.gradient(cell, x), self.1.gradient(cell, x));
        [a[0] - b[0], a[1] - b[1]]
    }
}

impl<A: BrokenH2Field + ?Sized, B: BrokenH2Field + ?Sized> BrokenH2Field for Difference<'_, A, B> {
    fn hessian(&self, cell: usize, x: Point) -> Matrix2 {
        let (a, b) = (self.0.hessian(cell, x), self.1.hessian(cell, x));
        [
            [a[0][0] - b[0][0], a[0][1] - b[0][1]],
            [a[1][0] - b[1][0], a[1][1] - b[1][1]],
        ]
    }
}

/// Closure-backed [`ExactSolution`].
pub struct ClosureSolution<V, G, H> {
    pub value: V,
    pub gradient: G,
    pub hessian: H,
}

impl<V, G, H> ExactSolution for ClosureSolution<V, G, H>
where
    V: Fn(Point) -> f64 + Sync,
    G: Fn(Point) -> [f64; 2] + Sync,
    H: Fn(Point) -> Matrix2 + Sync,
{
    fn value(&self, x: Point) -> f64 {
        (self.value)(x)
    }
    fn gradient(&self, x: Point) -> [f64; 2] {
        (self.gradient)(x)
    }
    fn hessian(&self, x: Point) -> Matrix2 {
        (self.hessian)(x)
    }
}

pub fn frobenius(m: &Matrix2) -> f64 {
    (m[0][0] * m[0][0] + m[0][1] * m[0][1] + m[1][0] * m[1][0] + m[1][1] * m[1][1]).sqrt()
}

pub fn contract(a: &Matrix2, b: &Matrix2) -> f64 {
    a[0][0] * b[0][0] + a[0][1] * b[0][1] + a[1][0] * b[1][0] + a[1][1] * b[1][1]
}
