//! Problem data `(A, b, c, f)` for a finite control set, the weights
//! `γ`, `γ^α`, `γ^{λ,α}` and the Cordès feasibility checks.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{FemError, Result};
use crate::expr::Expr;
use crate::field::{contract, ExactSolution, Matrix2};
use crate::mesh::Point;

type PointFn = Arc<dyn Fn(Point) -> f64 + Send + Sync>;

/// A scalar coefficient.
#[derive(Clone)]
pub enum ScalarField {
    Constant(f64),
    /// One value per mesh cell, in cell order.
    PerCell(Vec<f64>),
    Expr(Expr),
    Fn(PointFn),
}

impl fmt::Debug for ScalarField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Constant(v) => write!(f, "Constant({v})"),
            Self::PerCell(v) => write!(f, "PerCell({} cells)", v.len()),
            Self::Expr(e) => write!(f, "Expr({e})"),
            Self::Fn(_) => write!(f, "Fn(..)"),
        }
    }
}

impl ScalarField {
    pub fn zero() -> Self {
        Self::Constant(0.0)
    }

    pub fn from_fn(f: impl Fn(Point) -> f64 + Send + Sync + 'static) -> Self {
        Self::Fn(Arc::new(f))
    }

    /// Parses `"const v"`, a plain number, or an expression in `x`, `y`.
    pub fn parse(src: &str) -> Result<Self> {
        let t = src.trim();
        if let Some(rest) = t.strip_prefix("const") {
            return rest.trim().parse::<f64>().map(Self::Constant).map_err(|_| FemError::Parse {
                offset: 5,
                message: format!("bad constant '{}'", rest.trim()),
            });
        }
        let e = Expr::parse(t)?;
        Ok(match e {
            Expr::Num(v) => Self::Constant(v),
            e => Self::Expr(e),
        })
    }

    pub fn eval(&self, cell: usize, x: Point) -> f64 {
        match self {
            Self::Constant(v) => *v,
            Self::PerCell(v) => v.get(cell).copied().unwrap_or(f64::NAN),
            Self::Expr(e) => e.eval(x),
            Self::Fn(f) => f(x),
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Self::Constant(v) if *v == 0.0)
    }
}

impl From<f64> for ScalarField {
    fn from(v: f64) -> Self {
        Self::Constant(v)
    }
}

#[derive(Clone, Debug)]
pub struct MatrixField(pub [[ScalarField; 2]; 2]);

impl MatrixField {
    pub fn constant(a: Matrix2) -> Self {
        Self(a.map(|row| row.map(ScalarField::Constant)))
    }

    pub fn identity() -> Self {
        Self::constant([[1.0, 0.0], [0.0, 1.0]])
    }

    pub fn eval(&self, cell: usize, x: Point) -> Matrix2 {
        let m = &self.0;
        [
            [m[0][0].eval(cell, x), m[0][1].eval(cell, x)],
            [m[1][0].eval(cell, x), m[1][1].eval(cell, x)],
        ]
    }
}

#[derive(Clone, Debug)]
pub struct VectorField(pub [ScalarField; 2]);

impl VectorField {
    pub fn zero() -> Self {
        Self([ScalarField::zero(), ScalarField::zero()])
    }

    pub fn eval(&self, cell: usize, x: Point) -> [f64; 2] {
        [self.0[0].eval(cell, x), self.0[1].eval(cell, x)]
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(ScalarField::is_zero)
    }
}

/// Coefficients of one control evaluated at a point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CoefficientSample {
    pub a: Matrix2,
    pub b: [f64; 2],
    pub c: f64,
    pub f: f64,
}

#[derive(Clone, Debug)]
pub struct Control {
    pub label: String,
    pub a: MatrixField,
    pub b: VectorField,
    pub c: ScalarField,
    pub f: ScalarField,
}

impl Control {
    pub fn new(label: impl Into<String>, a: MatrixField, f: ScalarField) -> Self {
        Self {
            label: label.into(),
            a,
            b: VectorField::zero(),
            c: ScalarField::zero(),
            f,
        }
    }

    pub fn with_drift(mut self, b: VectorField) -> Self {
        self.b = b;
        self
    }

    pub fn with_reaction(mut self, c: ScalarField) -> Self {
        self.c = c;
        self
    }

    /// Evaluates all coefficients, rejecting non-finite values.
    pub fn sample(&self, cell: usize, x: Point) -> Result<CoefficientSample> {
        let s = CoefficientSample {
            a: self.a.eval(cell, x),
            b: self.b.eval(cell, x),
            c: self.c.eval(cell, x),
            f: self.f.eval(cell, x),
        };
        let finite = s.a.iter().flatten().chain(&s.b).chain([&s.c, &s.f]).all(|v| v.is_finite());
        if !finite {
            return Err(FemError::Coefficient {
                x: x[0],
                y: x[1],
                message: format!("non-finite coefficient for control '{}'", self.label),
            });
        }
        Ok(s)
    }

    /// `f = A:D²u + b·∇u + cu` for a manufactured solution.
    pub fn manufactured_source(&self, cell: usize, x: Point, u: &dyn ExactSolution) -> f64 {
        let (a, b, c) = (self.a.eval(cell, x), self.b.eval(cell, x), self.c.eval(cell, x));
        let g = u.gradient(x);
        contract(&a, &u.hessian(x)) + b[0] * g[0] + b[1] * g[1] + c * u.value(x)
    }
}

/// Non-empty finite set of controls.
#[derive(Clone, Debug)]
pub struct ControlSet {
    controls: Vec<Control>,
    /// Declared lower bound on the eigenvalues of every `A^α`.
    pub ellipticity: f64,
}

impl ControlSet {
    pub fn new(controls: Vec<Control>) -> Result<Self> {
        if controls.is_empty() {
            return Err(FemError::EmptyControlSet);
        }
        Ok(Self {
            controls,
            ellipticity: 1e-8,
        })
    }

    pub fn single(control: Control) -> Self {
        Self::new(vec![control]).expect("one control")
    }

    pub fn with_ellipticity(mut self, nu: f64) -> Self {
        self.ellipticity = nu;
        self
    }

    pub fn controls(&self) -> &[Control] {
        &self.controls
    }

    pub fn len(&self) -> usize {
        self.controls.len()
    }

    pub fn is_empty(&self) -> bool {
        self.controls.is_empty()
    }

    /// Checks symmetry, ellipticity and `c ≤ 0` at every sample point.
    pub fn validate(&self, samples: &[(usize, Point)]) -> Result<()> {
        for ctrl in &self.controls {
            for &(cell, x) in samples {
                let s = ctrl.sample(cell, x)?;
                let bad = |message: String| FemError::Coefficient {
                    x: x[0],
                    y: x[1],
                    message: format!("control '{}': {message}", ctrl.label),
                };
                let a = s.a;
                let scale = 1.0 + a[0][1].abs().max(a[1][0].abs());
                if (a[0][1] - a[1][0]).abs() > 1e-12 * scale {
                    return Err(bad(format!("A is not symmetric ({} vs {})", a[0][1], a[1][0])));
                }
                let min_eig = min_eigenvalue(&a);
                if min_eig < self.ellipticity {
                    return Err(bad(format!(
                        "smallest eigenvalue of A is {min_eig}, below the ellipticity bound {}",
                        self.ellipticity
                    )));
                }
                if s.c > 0.0 {
                    return Err(bad(format!("c = {} is positive", s.c)));
                }
            }
        }
        Ok(())
    }
}

pub fn min_eigenvalue(a: &Matrix2) -> f64 {
    let m = 0.5 * (a[0][0] + a[1][1]);
    let off = 0.5 * (a[0][1] + a[1][0]);
    let r = (0.25 * (a[0][0] - a[1][1]).powi(2) + off * off).sqrt();
    m - r
}

fn trace(a: &Matrix2) -> f64 {
    a[0][0] + a[1][1]
}

fn frobenius_sq(a: &Matrix2) -> f64 {
    a.iter().flatten().map(|v| v * v).sum()
}

/// `Tr A / |A|²` with the Frobenius norm; `None` when `|A| = 0`.
pub fn gamma(a: &Matrix2) -> Option<f64> {
    let n2 = frobenius_sq(a);
    (n2 > 0.0).then(|| trace(a) / n2)
}

/// Per-control weight used by the HJB scheme; same formula as [`gamma`].
pub fn gamma_alpha(a: &Matrix2) -> Option<f64> {
    gamma(a)
}

/// `(Tr A + |c|/λ) / (|A|² + |b|²/(2λ) + (c/λ)²)`.
pub fn gamma_lambda_alpha(a: &Matrix2, b: [f64; 2], c: f64, lambda: f64) -> Result<f64> {
    if !(lambda > 0.0) {
        return Err(FemError::NonPositiveLambda(lambda));
    }
    let den = frobenius_sq(a) + (b[0] * b[0] + b[1] * b[1]) / (2.0 * lambda) + (c / lambda).powi(2);
    if den == 0.0 {
        return Err(FemError::ZeroMatrix(f64::NAN, f64::NAN));
    }
    Ok((trace(a) + c.abs() / lambda) / den)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConditionId {
    PdeGeneral,
    FemGeneral,
    PdeSpecial,
    FemSpecial,
}

impl ConditionId {
    pub fn is_special(self) -> bool {
        matches!(self, Self::PdeSpecial | Self::FemSpecial)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::PdeGeneral => "pde-general",
            Self::FemGeneral => "fem-general",
            Self::PdeSpecial => "pde-special",
            Self::FemSpecial => "fem-special",
        }
    }
}

impl FromStr for ConditionId {
    type Err = FemError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "pde-general" => Self::PdeGeneral,
            "fem-general" => Self::FemGeneral,
            "pde-special" => Self::PdeSpecial,
            "fem-special" => Self::FemSpecial,
            other => {
                return Err(FemError::InvalidArgument(format!("unknown Cordès condition '{other}'")))
            }
        })
    }
}

/// Left-hand side of a Cordès condition at one sample; `None` when the
/// denominator of the fem-general form is not positive.
pub fn cordes_lhs(id: ConditionId, s: &CoefficientSample, lambda: f64) -> Option<f64> {
    let tr = trace(&s.a);
    let a2 = frobenius_sq(&s.a);
    let b2 = s.b[0] * s.b[0] + s.b[1] * s.b[1];
    let c = s.c.abs();
    match id {
        ConditionId::PdeGeneral => {
            let num = a2 + b2 / (2.0 * lambda) + (c / lambda).powi(2);
            Some(num / (tr + c / lambda).powi(2))
        }
        ConditionId::FemGeneral => {
            let den = 1.0 + 2.0 * c / (lambda * tr) - ((c / lambda).powi(2) + b2 / (2.0 * lambda)) / a2;
            (den > 0.0).then(|| a2 / (tr * tr) / den)
        }
        ConditionId::PdeSpecial | ConditionId::FemSpecial => Some(a2 / (tr * tr)),
    }
}

/// Largest ε with `lhs ≤ 1/(d + ε)` (general) or `1/(d - 1 + ε)` (special).
pub fn epsilon_bound(id: ConditionId, lhs: f64, dim: usize) -> f64 {
    let shift = if id.is_special() { dim as f64 - 1.0 } else { dim as f64 };
    1.0 / lhs - shift
}

/// Upper end of the admissible ε range `[κ, 1)`; bounds at or above 1 are
/// reported just below it.
pub const EPSILON_CAP: f64 = 1.0 - 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorstPoint {
    pub x: f64,
    pub y: f64,
    pub cell: usize,
    pub control: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CordesReport {
    pub condition: ConditionId,
    pub lambda: f64,
    pub dimension: usize,
    pub samples: usize,
    /// Largest left-hand side over feasible samples.
    pub worst_lhs: Option<f64>,
    /// Largest feasible ε, capped at [`EPSILON_CAP`]; `None` stands for −∞
    /// (some sample has a non-positive denominator).
    pub max_epsilon: Option<f64>,
    /// Uncapped `1/lhs - shift` at the worst sample.
    pub epsilon_bound: Option<f64>,
    pub worst_point: Option<WorstPoint>,
    pub infeasible_points: usize,
    pub first_infeasible: Option<WorstPoint>,
    /// The special form was requested but some control has b ≠ 0 or c ≠ 0.
    pub special_form_inapplicable: bool,
}

impl CordesReport {
    pub fn feasible(&self, epsilon: f64) -> bool {
        self.max_epsilon.is_some_and(|e| e >= epsilon - 1e-12)
    }
}

/// Evaluates the chosen condition over all controls and samples.
pub fn check_cordes(
    id: ConditionId,
    controls: &ControlSet,
    lambda: f64,
    samples: &[(usize, Point)],
    dim: usize,
) -> Result<CordesReport> {
    if !id.is_special() && !(lambda > 0.0) {
        return Err(FemError::NonPositiveLambda(lambda));
    }
    if samples.is_empty() {
        return Err(FemError::InvalidArgument("no sample points for the Cordès check".into()));
    }
    let mut worst: Option<(f64, WorstPoint)> = None;
    let mut infeasible = 0;
    let mut first_infeasible = None;
    let mut inapplicable = false;
    for ctrl in controls.controls() {
        for &(cell, x) in samples {
            let s = ctrl.sample(cell, x)?;
            if id.is_special() && (s.b != [0.0, 0.0] || s.c != 0.0) {
                inapplicable = true;
            }
            let here = || WorstPoint {
                x: x[0],
                y: x[1],
                cell,
                control: ctrl.label.clone(),
            };
            match cordes_lhs(id, &s, lambda) {
                None => {
                    infeasible += 1;
                    if first_infeasible.is_none() {
                        first_infeasible = Some(here());
                    }
                }
                Some(lhs) => {
                    if worst.as_ref().map_or(true, |(w, _)| lhs > *w) {
                        worst = Some((lhs, here()));
                    }
                }
            }
        }
    }
    let bound = worst.as_ref().map(|(lhs, _)| epsilon_bound(id, *lhs, dim));
    let max_epsilon = if infeasible > 0 {
        None
    } else {
        bound.map(|b| b.min(EPSILON_CAP))
    };
    Ok(CordesReport {
        condition: id,
        lambda,
        dimension: dim,
        samples: samples.len(),
        worst_lhs: worst.as_ref().map(|(l, _)| *l),
        max_epsilon,
        epsilon_bound: bound,
        worst_point: worst.map(|(_, p)| p),
        infeasible_points: infeasible,
        first_infeasible,
        special_form_inapplicable: inapplicable,
    })
}

/// Min over samples and controls of the uncapped ε bound; −∞ if infeasible.
fn margin(
    id: ConditionId,
    controls: &ControlSet,
    lambda: f64,
    samples: &[CoefficientSample],
    dim: usize,
) -> f64 {
    let _ = controls;
    samples
        .iter()
        .map(|s| match cordes_lhs(id, s, lambda) {
            Some(lhs) => epsilon_bound(id, lhs, dim),
            None => f64::NEG_INFINITY,
        })
        .fold(f64::INFINITY, f64::min)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaSearch {
    pub lambda: f64,
    /// Uncapped feasibility margin at `lambda`; `≤ 0` means no admissible ε.
    pub epsilon: f64,
}

/// Maximizes the feasibility margin over `λ ∈ [lo, hi]` with a 64-point
/// logarithmic grid followed by golden-section refinement.
pub fn search_lambda(
    id: ConditionId,
    controls: &ControlSet,
    range: (f64, f64),
    samples: &[(usize, Point)],
    dim: usize,
) -> Result<LambdaSearch> {
    let (lo, hi) = range;
    if !(lo > 0.0 && hi > lo) {
        return Err(FemError::InvalidArgument(format!(
            "lambda range [{lo}, {hi}] must satisfy 0 < lo < hi"
        )));
    }
    if samples.is_empty() {
        return Err(FemError::InvalidArgument("no sample points for the lambda search".into()));
    }
    let mut evaluated = Vec::with_capacity(samples.len() * controls.len());
    for ctrl in controls.controls() {
        for &(cell, x) in samples {
            evaluated.push(ctrl.sample(cell, x)?);
        }
    }
    let objective = |log_l: f64| margin(id, controls, log_l.exp(), &evaluated, dim);
    let (a, b) = (lo.ln(), hi.ln());
    const GRID: usize = 64;
    let grid: Vec<f64> = (0..GRID).map(|i| a + (b - a) * i as f64 / (GRID - 1) as f64).collect();
    let values: Vec<f64> = grid.iter().map(|&t| objective(t)).collect();
    let mut best = 0;
    for i in 1..GRID {
        if values[i] > values[best] {
            best = i;
        }
    }
    let mut left = grid[best.saturating_sub(1)];
    let mut right = grid[(best + 1).min(GRID - 1)];
    let (mut best_t, mut best_v) = (grid[best], values[best]);
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = right - ratio * (right - left);
    let mut x2 = left + ratio * (right - left);
    let (mut f1, mut f2) = (objective(x1), objective(x2));
    // relative width of the λ bracket is exp(right - left) - 1
    while (right - left) > 1e-6 {
        if f1 >= f2 {
            right = x2;
            x2 = x1;
            f2 = f1;
            x1 = right - ratio * (right - left);
            f1 = objective(x1);
        } else {
            left = x1;
            x1 = x2;
            f1 = f2;
            x2 = left + ratio * (right - left);
            f2 = objective(x2);
        }
    }
    for (t, v) in [(x1, f1), (x2, f2)] {
        if v > best_v {
            best_t = t;
            best_v = v;
        }
    }
    Ok(LambdaSearch {
        lambda: best_t.exp(),
        epsilon: best_v,
    })
}

/// Rotation-diagonal matrix with eigenvalues `(1 ± sin θ)/2` and eigenvector
/// angle `φ`; trace 1 and `|A|² = (1 + sin²θ)/2`.
pub fn example1_matrix(theta: f64, phi: f64) -> Matrix2 {
    let (l1, l2) = ((1.0 + theta.sin()) / 2.0, (1.0 - theta.sin()) / 2.0);
    let (s, c) = phi.sin_cos();
    [
        [c * c * l1 + s * s * l2, c * s * (l1 - l2)],
        [c * s * (l1 - l2), s * s * l1 + c * c * l2],
    ]
}

/// Parameters of the anisotropic rotated family with constant reaction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example1Family {
    /// Largest anisotropy angle; controls use θ equispaced in `[0, beta]`.
    pub beta: f64,
    /// Reaction strength, `c = -c0`.
    pub c0: f64,
    pub n_controls: usize,
}

impl Example1Family {
    pub fn thetas(&self) -> Vec<f64> {
        if self.n_controls == 1 {
            return vec![0.0];
        }
        (0..self.n_controls)
            .map(|k| self.beta * k as f64 / (self.n_controls - 1) as f64)
            .collect()
    }

    /// Eigenvector angle of control `k`; spread over a half turn so the
    /// controls are genuinely different.
    pub fn phi(&self, k: usize) -> f64 {
        PI * k as f64 / self.n_controls as f64
    }

    /// Controls with the given source for every member.
    pub fn controls(&self, source: impl Fn(usize, f64) -> ScalarField) -> Result<ControlSet> {
        let controls = self
            .thetas()
            .into_iter()
            .enumerate()
            .map(|(k, theta)| {
                Control::new(
                    format!("theta{k}"),
                    MatrixField::constant(example1_matrix(theta, self.phi(k))),
                    source(k, theta),
                )
                .with_reaction(ScalarField::Constant(-self.c0))
            })
            .collect();
        Ok(ControlSet::new(controls)?.with_ellipticity((1.0 - self.beta.sin()) / 2.0 * 0.999))
    }

    /// Sources making `u` the exact HJB solution: control `k` gets
    /// `A^k:D²u + c u + s_k(x)` with `s_k = (θ_k - θ*)² - min_j (θ_j - θ*)² ≥ 0`,
    /// `θ*(x, y) = β(x + y)/2`, so the supremum of the residuals is zero and
    /// attained at the control nearest to `θ*`.
    pub fn manufactured(&self, u: Arc<dyn ExactSolution + Send + Sync>) -> Result<ControlSet> {
        let thetas = self.thetas();
        let fam = *self;
        self.controls(|k, theta| {
            let a = example1_matrix(theta, fam.phi(k));
            let u = u.clone();
            let thetas = thetas.clone();
            ScalarField::from_fn(move |x| {
                let target = fam.beta * (x[0] + x[1]) / 2.0;
                let nearest = thetas
                    .iter()
                    .map(|t| (t - target).powi(2))
                    .fold(f64::INFINITY, f64::min);
                contract(&a, &u.hessian(x)) - fam.c0 * u.value(x) + ((theta - target).powi(2) - nearest)
            })
        })
    }
}
