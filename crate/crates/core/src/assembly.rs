//! Assembly of the weighted non-divergence operator
//! `(γ(A:H(u) + b·∇u + cu), v)`, the shifted Laplacian `-(∇·,∇·) - λ(·,·)`
//! and the constant-coefficient operator `L_{A0,h}`.

use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coefficients::{gamma, Control};
use crate::error::{FemError, Result};
use crate::fe_space::{FeFunction, FeSpace, L2Projector};
use crate::field::{contract, ExactSolution, Matrix2};
use crate::lifting::LiftingOperator;
use crate::norms::{error_report, ErrorReport};
use crate::sparse::{inf_norm, residual, CsrMatrix, LinearSolver};

/// Coefficients and weight sampled at every quadrature point (cell-major).
#[derive(Clone, Debug, PartialEq)]
pub struct QuadCoefficients {
    pub a: Vec<Matrix2>,
    pub b: Vec<[f64; 2]>,
    pub c: Vec<f64>,
    pub f: Vec<f64>,
    /// `γ = Tr A / |A|²` per point.
    pub weight: Vec<f64>,
}

impl QuadCoefficients {
    pub fn sample(space: &FeSpace, control: &Control) -> Result<Self> {
        let n_cells = space.mesh().n_cells();
        let per_cell: Vec<Result<Vec<_>>> = (0..n_cells)
            .into_par_iter()
            .map(|cell| {
                let (pts, _) = space.cell_quadrature(cell);
                pts.into_iter()
                    .map(|x| {
                        let s = control.sample(cell, x)?;
                        let g = gamma(&s.a).ok_or(FemError::ZeroMatrix(x[0], x[1]))?;
                        Ok((s, g))
                    })
                    .collect()
            })
            .collect();
        let n = n_cells * space.n_quad();
        let mut out = Self {
            a: Vec::with_capacity(n),
            b: Vec::with_capacity(n),
            c: Vec::with_capacity(n),
            f: Vec::with_capacity(n),
            weight: Vec::with_capacity(n),
        };
        for cell in per_cell {
            for (s, g) in cell? {
                out.a.push(s.a);
                out.b.push(s.b);
                out.c.push(s.c);
                out.f.push(s.f);
                out.weight.push(g);
            }
        }
        Ok(out)
    }

    /// Picks, point by point, the coefficients of control `choice[q]`.
    pub fn select(tables: &[QuadCoefficients], choice: &[usize]) -> Self {
        let pick = |q: usize| &tables[choice[q]];
        let n = choice.len();
        Self {
            a: (0..n).map(|q| pick(q).a[q]).collect(),
            b: (0..n).map(|q| pick(q).b[q]).collect(),
            c: (0..n).map(|q| pick(q).c[q]).collect(),
            f: (0..n).map(|q| pick(q).f[q]).collect(),
            weight: (0..n).map(|q| pick(q).weight[q]).collect(),
        }
    }

    /// Replaces the weight by 1 (unweighted operator).
    pub fn unweighted(mut self) -> Self {
        self.weight.iter_mut().for_each(|w| *w = 1.0);
        self
    }

    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }

    /// `γ(A:H + b·∇u + cu - f)` at point `q`; `with_source = false` drops `f`.
    pub fn residual_at(&self, q: usize, hess: &Matrix2, grad: [f64; 2], val: f64, with_source: bool) -> f64 {
        let b = self.b[q];
        let f = if with_source { self.f[q] } else { 0.0 };
        self.weight[q] * (contract(&self.a[q], hess) + b[0] * grad[0] + b[1] * grad[1] + self.c[q] * val - f)
    }
}

/// `H(u)`, `∇u` and `u` at all quadrature points.
pub struct QuadState {
    pub hessian: Vec<Matrix2>,
    pub gradient: Vec<[f64; 2]>,
    pub value: Vec<f64>,
}

impl QuadState {
    pub fn new(lifting: &LiftingOperator, u: &FeFunction) -> Self {
        Self {
            hessian: lifting.hessian_at_quadrature(u.coefficients()),
            gradient: u.gradients_at_quadrature(),
            value: u.values_at_quadrature(),
        }
    }

    /// `γ(A:H(u) + b·∇u + cu - f)` at every point.
    pub fn residual(&self, coeffs: &QuadCoefficients, with_source: bool) -> Vec<f64> {
        (0..self.value.len())
            .map(|q| coeffs.residual_at(q, &self.hessian[q], self.gradient[q], self.value[q], with_source))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OperatorKind {
    Nondiv,
    ConstantA,
    ShiftedLaplacian,
}

#[derive(Clone, Debug)]
pub struct AssembledOperator {
    pub matrix: CsrMatrix,
    pub kind: OperatorKind,
    /// Human-readable summary of the coefficients used.
    pub description: String,
}

/// Matrix `M[i][j] = Σ_q w γ (A:H(φ_j) + b·∇φ_j + cφ_j) φ_i` and load
/// `F[i] = Σ_q w γ f φ_i`.
pub fn assemble_from_qp(lifting: &LiftingOperator, coeffs: &QuadCoefficients) -> (CsrMatrix, Vec<f64>) {
    let vh = lifting.vh();
    let mesh = vh.mesh();
    let n_loc = vh.n_local();
    let nq = vh.n_quad();
    assert_eq!(coeffs.len(), mesh.n_cells() * nq, "coefficient table size");
    let local: Vec<(DMatrix<f64>, Vec<f64>)> = (0..mesh.n_cells())
        .into_par_iter()
        .map(|cell| {
            let block = lifting.block(cell);
            let map = mesh.cell_map(cell);
            let (_, weights) = vh.cell_quadrature(cell);
            let mut w_kl: [[DMatrix<f64>; 2]; 2] =
                std::array::from_fn(|_| std::array::from_fn(|_| DMatrix::zeros(n_loc, n_loc)));
            let mut own = DMatrix::<f64>::zeros(n_loc, n_loc);
            let mut load = vec![0.0; n_loc];
            for (q, &w) in weights.iter().enumerate() {
                let i = cell * nq + q;
                let wg = w * coeffs.weight[i];
                let phi = vh.ref_values(q);
                let grads: Vec<[f64; 2]> = vh.ref_gradients(q).iter().map(|&g| map.push_gradient(g)).collect();
                let (a, b, c) = (coeffs.a[i], coeffs.b[i], coeffs.c[i]);
                for r in 0..n_loc {
                    let t = wg * phi[r];
                    load[r] += t * coeffs.f[i];
                    for m in 0..n_loc {
                        let pm = t * phi[m];
                        for k in 0..2 {
                            for l in 0..2 {
                                w_kl[k][l][(r, m)] += pm * a[k][l];
                            }
                        }
                        own[(r, m)] += t * (b[0] * grads[m][0] + b[1] * grads[m][1] + c * phi[m]);
                    }
                }
            }
            let mut out = DMatrix::zeros(n_loc, block.cols.len());
            for k in 0..2 {
                for l in 0..2 {
                    out += &w_kl[k][l] * &block.maps[k][l];
                }
            }
            for (m, dof) in vh.cell_dofs(cell).iter().enumerate() {
                let Some(dof) = dof else { continue };
                let col = block.cols.iter().position(|c| c == dof).expect("own dof in stencil");
                for r in 0..n_loc {
                    out[(r, col)] += own[(r, m)];
                }
            }
            (out, load)
        })
        .collect();

    let mut trip = Vec::new();
    let mut rhs = vec![0.0; vh.n_dofs()];
    for (cell, (block_vals, load)) in local.iter().enumerate() {
        let cols = &lifting.block(cell).cols;
        for (r, row) in vh.cell_dofs(cell).iter().enumerate() {
            let Some(row) = row else { continue };
            rhs[*row] += load[r];
            for (c, &col) in cols.iter().enumerate() {
                trip.push((*row, col, block_vals[(r, c)]));
            }
        }
    }
    (CsrMatrix::from_triplets(vh.n_dofs(), vh.n_dofs(), &trip), rhs)
}

/// The weighted non-divergence system for one control.
pub fn assemble_nondiv(lifting: &LiftingOperator, control: &Control) -> Result<(AssembledOperator, Vec<f64>)> {
    let coeffs = QuadCoefficients::sample(lifting.vh(), control)?;
    let (matrix, load) = assemble_from_qp(lifting, &coeffs);
    Ok((
        AssembledOperator {
            matrix,
            kind: OperatorKind::Nondiv,
            description: format!("nondiv, control '{}', weighted by gamma", control.label),
        },
        load,
    ))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LinearSolveReport {
    pub n_cells: usize,
    pub n_dofs: usize,
    pub h: f64,
    pub degree: usize,
    pub nnz: usize,
    /// `‖M u - F‖_∞`.
    pub residual: f64,
    pub load_norm: f64,
    pub errors: Option<ErrorReport>,
}

pub struct LinearSolution {
    pub solution: FeFunction,
    pub report: LinearSolveReport,
}

/// Assembles and solves; attaches error norms when `exact` is given.
pub fn solve_linear_nondiv(
    lifting: &LiftingOperator,
    control: &Control,
    exact: Option<&dyn ExactSolution>,
    p: f64,
) -> Result<LinearSolution> {
    let coeffs = QuadCoefficients::sample(lifting.vh(), control)?;
    solve_from_qp(lifting, &coeffs, exact, p)
}

pub fn solve_from_qp(
    lifting: &LiftingOperator,
    coeffs: &QuadCoefficients,
    exact: Option<&dyn ExactSolution>,
    p: f64,
) -> Result<LinearSolution> {
    let (matrix, load) = assemble_from_qp(lifting, coeffs);
    let solver = LinearSolver::new(matrix.clone()).map_err(|e| {
        FemError::SingularSystem(format!(
            "{e}; the discrete operator may violate the Cordès or ellipticity assumptions"
        ))
    })?;
    let u = solver.solve(&load)?;
    let res = inf_norm(&residual(&matrix, &u, &load));
    let load_norm = inf_norm(&load);
    if res > 1e-9 * load_norm.max(f64::MIN_POSITIVE) {
        return Err(FemError::SingularSystem(format!(
            "residual {res:e} exceeds 1e-9 relative to the load"
        )));
    }
    let vh = lifting.vh();
    let solution = FeFunction::new(vh.clone(), u)?;
    let errors = match exact {
        Some(e) => Some(error_report(&solution, e, p, 0)?),
        None => None,
    };
    let mesh = vh.mesh();
    Ok(LinearSolution {
        solution,
        report: LinearSolveReport {
            n_cells: mesh.n_cells(),
            n_dofs: vh.n_dofs(),
            h: mesh.h_max(),
            degree: vh.degree(),
            nnz: matrix.nnz(),
            residual: res,
            load_norm,
            errors,
        },
    })
}

/// `-(∇w, ∇v) - λ(w, v)` with its factorization; applying it is `M_{λ,h}`.
pub struct ShiftedLaplacian {
    pub lambda: f64,
    pub operator: AssembledOperator,
    space: Arc<FeSpace>,
    mass: CsrMatrix,
    stiffness: CsrMatrix,
    solver: LinearSolver,
}

impl ShiftedLaplacian {
    pub fn space(&self) -> &Arc<FeSpace> {
        &self.space
    }

    pub fn mass(&self) -> &CsrMatrix {
        &self.mass
    }

    pub fn stiffness(&self) -> &CsrMatrix {
        &self.stiffness
    }

    /// Solves `-(∇z,∇v) - λ(z,v) = ℓ(v)` for a load vector `ℓ`.
    pub fn solve_load(&self, load: &[f64]) -> Result<FeFunction> {
        FeFunction::new(self.space.clone(), self.solver.solve(load)?)
    }

    /// `M_{λ,h}(g)` for `g ∈ V_h`.
    pub fn apply(&self, g: &FeFunction) -> Result<FeFunction> {
        self.solve_load(&self.mass.mul_vec(g.coefficients()))
    }
}

pub fn assemble_shifted_laplacian(space: &Arc<FeSpace>, lambda: f64) -> Result<ShiftedLaplacian> {
    if !(lambda > 0.0) {
        return Err(FemError::NonPositiveLambda(lambda));
    }
    let mass = space.mass_matrix();
    let stiffness = space.stiffness_matrix();
    let trip: Vec<(usize, usize, f64)> = stiffness
        .triplets()
        .map(|(r, c, v)| (r, c, -v))
        .chain(mass.triplets().map(|(r, c, v)| (r, c, -lambda * v)))
        .collect();
    let matrix = CsrMatrix::from_triplets(space.n_dofs(), space.n_dofs(), &trip);
    let solver = LinearSolver::new(matrix.clone())?;
    Ok(ShiftedLaplacian {
        lambda,
        operator: AssembledOperator {
            matrix,
            kind: OperatorKind::ShiftedLaplacian,
            description: format!("-(grad, grad) - {lambda} (., .)"),
        },
        space: space.clone(),
        mass,
        stiffness,
        solver,
    })
}

/// `L_{A0,h} w`: the `V_h` representer of `v ↦ (A0 : H(w), v)`.
pub fn apply_l_constant(
    lifting: &LiftingOperator,
    projector: &L2Projector,
    a0: &Matrix2,
    w: &FeFunction,
) -> Result<FeFunction> {
    if !Arc::ptr_eq(w.space(), lifting.vh()) || !Arc::ptr_eq(projector.space(), lifting.vh()) {
        return Err(FemError::SpaceMismatch("operands must share V_h".into()));
    }
    let values: Vec<f64> = lifting
        .hessian_at_quadrature(w.coefficients())
        .iter()
        .map(|h| contract(a0, h))
        .collect();
    projector.project_quad(&values)
}

/// Matrix of `(A0 : H(φ_j), φ_i)` for constant `A0` (unweighted).
pub fn assemble_constant_a(lifting: &LiftingOperator, a0: Matrix2) -> AssembledOperator {
    let n = lifting.vh().mesh().n_cells() * lifting.vh().n_quad();
    let coeffs = QuadCoefficients {
        a: vec![a0; n],
        b: vec![[0.0; 2]; n],
        c: vec![0.0; n],
        f: vec![0.0; n],
        weight: vec![1.0; n],
    };
    AssembledOperator {
        matrix: assemble_from_qp(lifting, &coeffs).0,
        kind: OperatorKind::ConstantA,
        description: format!("constant A = {a0:?}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::{MatrixField, ScalarField, VectorField};
    use crate::fe_space::SpaceKind;
    use crate::mesh::{DomainTag, Mesh};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn lifting(n: usize, r: usize) -> LiftingOperator {
        let mesh = Arc::new(Mesh::build_structured(DomainTag::UnitSquare, n).unwrap());
        let vh = Arc::new(FeSpace::new(mesh, r, SpaceKind::ContinuousZeroTrace).unwrap());
        LiftingOperator::for_space(vh).unwrap()
    }

    fn random(space: &Arc<FeSpace>, rng: &mut ChaCha8Rng) -> FeFunction {
        let c = (0..space.n_dofs()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        FeFunction::new(space.clone(), c).unwrap()
    }

    #[test]
    fn identity_operator_is_negative_stiffness() {
        let op = lifting(4, 2);
        let control = Control::new("i", MatrixField::identity(), ScalarField::Constant(1.0));
        let (m, _) = assemble_nondiv(&op, &control).unwrap();
        let k = op.vh().stiffness_matrix();
        let scale = k.max_abs();
        for (r, c, v) in k.triplets() {
            assert!((m.matrix.get(r, c) + v).abs() < 1e-10 * scale);
        }
        for (r, c, v) in m.matrix.triplets() {
            assert!((k.get(r, c) + v).abs() < 1e-10 * scale);
        }
    }

    #[test]
    fn poisson_solution_matches_standard_fem() {
        let op = lifting(4, 2);
        let f = |p: [f64; 2]| -2.0 * PI * PI * (PI * p[0]).sin() * (PI * p[1]).sin();
        let control = Control::new("p", MatrixField::identity(), ScalarField::from_fn(f));
        let sol = solve_linear_nondiv(&op, &control, None, 2.0).unwrap();
        let k = op.vh().stiffness_matrix();
        let load: Vec<f64> = op.vh().load_from_quad(&op.vh().sample(f)).iter().map(|v| -v).collect();
        let direct = LinearSolver::new(k).unwrap().solve(&load).unwrap();
        for (a, b) in sol.solution.coefficients().iter().zip(&direct) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn keystone_identity_for_constant_spd_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for a0 in [[[1.0, 0.0], [0.0, 2.0]], [[2.0, 0.5], [0.5, 1.0]]] {
            for (n, r) in [(2, 2), (3, 3)] {
                let op = lifting(n, r);
                let m = assemble_constant_a(&op, a0).matrix;
                for _ in 0..3 {
                    let (w, v) = (random(op.vh(), &mut rng), random(op.vh(), &mut rng));
                    let lhs: f64 = m.mul_vec(w.coefficients()).iter().zip(v.coefficients()).map(|(a, b)| a * b).sum();
                    let gw = w.gradients_at_quadrature();
                    let gv = v.gradients_at_quadrature();
                    let nq = op.vh().n_quad();
                    let mut rhs = 0.0;
                    for cell in 0..op.vh().mesh().n_cells() {
                        let (_, wts) = op.vh().cell_quadrature(cell);
                        for (q, wt) in wts.iter().enumerate() {
                            let (a, b) = (gw[cell * nq + q], gv[cell * nq + q]);
                            let aw = [a0[0][0] * a[0] + a0[0][1] * a[1], a0[1][0] * a[0] + a0[1][1] * a[1]];
                            rhs -= wt * (aw[0] * b[0] + aw[1] * b[1]);
                        }
                    }
                    assert!((lhs - rhs).abs() < 1e-10 * (1.0 + lhs.abs() + rhs.abs()));
                }
            }
        }
    }

    #[test]
    fn scaling_coefficients_leaves_solution_unchanged() {
        let op = lifting(4, 2);
        let a = |s: f64| {
            MatrixField([
                [ScalarField::Constant(2.0 * s), ScalarField::Constant(0.3 * s)],
                [ScalarField::Constant(0.3 * s), ScalarField::from_fn(move |p| s * (1.0 + p[0]))],
            ])
        };
        let mk = |s: f64| {
            Control::new("s", a(s), ScalarField::from_fn(move |p| s * (p[0] + p[1])))
                .with_drift(VectorField([ScalarField::Constant(0.5 * s), ScalarField::zero()]))
                .with_reaction(ScalarField::Constant(-s))
        };
        let u1 = solve_linear_nondiv(&op, &mk(1.0), None, 2.0).unwrap().solution;
        let u2 = solve_linear_nondiv(&op, &mk(2.0), None, 2.0).unwrap().solution;
        for (a, b) in u1.coefficients().iter().zip(u2.coefficients()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn shifted_laplacian_properties() {
        let op = lifting(3, 2);
        let vh = op.vh();
        let shifted = assemble_shifted_laplacian(vh, 1.0).unwrap();
        assert_eq!(shifted.operator.matrix.max_asymmetry(), 0.0);
        assert!(assemble_shifted_laplacian(vh, 0.0).is_err());
        let zero = shifted.apply(&FeFunction::zero(vh.clone())).unwrap();
        assert!(zero.coefficients().iter().all(|v| *v == 0.0));

        // M_λ(L_I w - λ w) = w
        let proj = L2Projector::new(vh.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = random(vh, &mut rng);
        let lw = apply_l_constant(&op, &proj, &[[1.0, 0.0], [0.0, 1.0]], &w).unwrap();
        let back = shifted.apply(&lw.axpy(-1.0, &w)).unwrap();
        for (a, b) in back.coefficients().iter().zip(w.coefficients()) {
            assert!((a - b).abs() < 1e-9);
        }
        // negative definite
        let x = random(vh, &mut rng);
        let q: f64 = shifted.operator.matrix.mul_vec(x.coefficients()).iter().zip(x.coefficients()).map(|(a, b)| a * b).sum();
        assert!(q < 0.0);
    }

    #[test]
    fn l_constant_is_linear_and_matches_stiffness_representer() {
        let op = lifting(3, 2);
        let vh = op.vh();
        let proj = L2Projector::new(vh.clone()).unwrap();
        let a0 = [[1.0, 0.0], [0.0, 2.0]];
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (u, w) = (random(vh, &mut rng), random(vh, &mut rng));
        let lu = apply_l_constant(&op, &proj, &a0, &u).unwrap();
        let lw = apply_l_constant(&op, &proj, &a0, &w).unwrap();
        let lc = apply_l_constant(&op, &proj, &a0, &u.scaled(2.0).axpy(-3.0, &w)).unwrap();
        for ((a, b), c) in lu.coefficients().iter().zip(lw.coefficients()).zip(lc.coefficients()) {
            assert!((2.0 * a - 3.0 * b - c).abs() < 1e-12 * (1.0 + c.abs()));
        }
        // representer of -(A0 ∇u, ∇v): solve M x = -K_A u
        let gu = u.gradients_at_quadrature();
        let nq = vh.n_quad();
        let mut load = vec![0.0; vh.n_dofs()];
        for cell in 0..vh.mesh().n_cells() {
            let map = vh.mesh().cell_map(cell);
            let (_, wts) = vh.cell_quadrature(cell);
            for (q, wt) in wts.iter().enumerate() {
                let g = gu[cell * nq + q];
                let ag = [a0[0][0] * g[0] + a0[0][1] * g[1], a0[1][0] * g[0] + a0[1][1] * g[1]];
                for (i, dof) in vh.cell_dofs(cell).iter().enumerate() {
                    let Some(dof) = dof else { continue };
                    let gi = map.push_gradient(vh.ref_gradients(q)[i]);
                    load[*dof] -= wt * (ag[0] * gi[0] + ag[1] * gi[1]);
                }
            }
        }
        let rep = proj.solve_load(&load).unwrap();
        for (a, b) in rep.coefficients().iter().zip(lu.coefficients()) {
            assert!((a - b).abs() < 1e-10 * (1.0 + b.abs()));
        }
    }
}
