//! Discrete partial derivatives onto `V̄_h` and the discrete Hessian
//! `H(u_h) = ∇̄_h(∇u_h)`.
//!
//! `∂̄_{h,x_i} v` is the element of `V̄_h` with
//!
//! ```text
//! (∂̄v, ψ) = <{v} n_i, [ψ]>_{all faces} - (v, ∂_i ψ)          (face form)
//!         = (∂_i v, ψ) - <[v] n_i, {ψ}>_{interior faces}      (jump form)
//! ```
//!
//! for every `ψ ∈ V̄_h`. Both forms are implemented literally; they agree for
//! piecewise polynomial data because the quadrature is exact.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::compensated::Accum;
use crate::error::{FemError, Result};
use crate::fe_space::{FeFunction, FeSpace, MatrixFunction, SpaceKind};
use crate::field::{BrokenField, GradientComponent, Matrix2};
use crate::mesh::{Mesh, Point};
use crate::sparse::CsrMatrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LiftForm {
    /// Averages against jumps of the test function over all faces.
    Face,
    /// Jumps of the data against averages over interior faces.
    Jump,
}

fn check_target(target: &FeSpace, v: &dyn BrokenField) -> Result<()> {
    if target.kind() != SpaceKind::Discontinuous {
        return Err(FemError::SpaceMismatch("lifting targets V̄_h".into()));
    }
    if let Some(m) = v.mesh() {
        if !Arc::ptr_eq(m, target.mesh()) {
            return Err(FemError::SpaceMismatch(
                "field and target space live on different meshes".into(),
            ));
        }
    }
    Ok(())
}

/// Right-hand sides `(∂̄v, ψ_m)` for every cell and local basis function.
pub(crate) fn lift_rhs(
    target: &FeSpace,
    v: &dyn BrokenField,
    axis: usize,
    form: LiftForm,
) -> Vec<DVector<f64>> {
    let mesh = target.mesh();
    let basis = target.basis();
    let n_loc = target.n_local();
    (0..mesh.n_cells())
        .into_par_iter()
        .map(|cell| {
            let map = mesh.cell_map(cell);
            let mut rhs = vec![Accum::default(); n_loc];
            let (points, weights) = target.cell_quadrature(cell);
            let ref_points = &target.cell_rule().points;
            for (q, (&x, &w)) in points.iter().zip(&weights).enumerate() {
                let xi = ref_points[q];
                match form {
                    LiftForm::Face => {
                        let val = v.value_at(cell, x, xi);
                        for (m, g) in target.ref_gradients(q).iter().enumerate() {
                            rhs[m].add_prod(-w * val, map.push_gradient(*g)[axis]);
                        }
                    }
                    LiftForm::Jump => {
                        let d = v.gradient_at(cell, x, xi)[axis];
                        for (m, psi) in target.ref_values(q).iter().enumerate() {
                            rhs[m].add_prod(w * d, *psi);
                        }
                    }
                }
            }
            let rule = target.face_rule();
            for fid in mesh.cell_faces(cell) {
                let face = &mesh.faces()[fid];
                if form == LiftForm::Jump && face.is_boundary() {
                    continue;
                }
                let geo = mesh.face_geometry(fid, rule).expect("face of a cell exists");
                let ref_in = |k: usize| mesh.face_reference_points(fid, k, rule).expect("face of a cell");
                let own = ref_in(cell);
                let plus = ref_in(face.plus);
                let minus = face.minus.map(ref_in);
                let sign = if face.plus == cell { 1.0 } else { -1.0 };
                for (t, (&x, &w)) in geo.points.iter().zip(&geo.weights).enumerate() {
                    let psi = basis.values(own[t]);
                    let vp = v.value_at(face.plus, x, plus[t]);
                    let coeff = match (form, face.minus, &minus) {
                        (LiftForm::Face, None, _) => sign * vp,
                        (LiftForm::Face, Some(m), Some(mr)) => sign * 0.5 * (vp + v.value_at(m, x, mr[t])),
                        (LiftForm::Jump, Some(m), Some(mr)) => -0.5 * (vp - v.value_at(m, x, mr[t])),
                        _ => unreachable!(),
                    };
                    let c = w * coeff * geo.normal[axis];
                    for (m, p) in psi.iter().enumerate() {
                        rhs[m].add_prod(c, *p);
                    }
                }
            }
            DVector::from_iterator(n_loc, rhs.into_iter().map(Accum::value))
        })
        .collect()
}

fn solve_cells(target: &Arc<FeSpace>, rhs: Vec<DVector<f64>>) -> (FeFunction, f64) {
    let n_loc = target.n_local();
    let mut coeffs = vec![0.0; target.n_dofs()];
    let mut worst = 0.0f64;
    for (cell, b) in rhs.into_iter().enumerate() {
        let (mass, inv) = (target.local_mass(cell), target.local_mass_inverse(cell));
        let mut c = &inv * &b;
        // one step of iterative refinement
        c += &inv * (&b - &mass * &c);
        let res = (mass * &c - &b).amax();
        let scale = b.amax();
        if scale > 0.0 {
            worst = worst.max(res / scale);
        }
        coeffs[cell * n_loc..(cell + 1) * n_loc].copy_from_slice(c.as_slice());
    }
    (
        FeFunction::new(target.clone(), coeffs).expect("length matches"),
        worst,
    )
}

/// `∂̄_{h,x_axis} v` via the face form. `axis` is 0 for x, 1 for y.
pub fn lift_partial(target: &Arc<FeSpace>, v: &dyn BrokenField, axis: usize) -> Result<FeFunction> {
    lift_partial_with_residual(target, v, axis, LiftForm::Face).map(|(f, _)| f)
}

/// `∂̄_{h,x_axis} v` via the jump form.
pub fn lift_partial_equivalent(
    target: &Arc<FeSpace>,
    v: &dyn BrokenField,
    axis: usize,
) -> Result<FeFunction> {
    lift_partial_with_residual(target, v, axis, LiftForm::Jump).map(|(f, _)| f)
}

/// Lifting plus the worst relative residual of the cell-local mass solves.
pub fn lift_partial_with_residual(
    target: &Arc<FeSpace>,
    v: &dyn BrokenField,
    axis: usize,
    form: LiftForm,
) -> Result<(FeFunction, f64)> {
    if axis > 1 {
        return Err(FemError::InvalidArgument(format!("axis {axis} out of range")));
    }
    check_target(target, v)?;
    Ok(solve_cells(target, lift_rhs(target, v, axis, form)))
}

/// Discrete Hessian by pointwise application of the face form to the
/// components of `∇u_h`; `H_ij = ∂̄_j (∇u_h)_i`.
pub fn discrete_hessian_pointwise(target: &Arc<FeSpace>, u: &FeFunction) -> Result<MatrixFunction> {
    let comp = |i: usize, j: usize| {
        lift_partial(
            target,
            &GradientComponent {
                function: u,
                axis: i,
            },
            j,
        )
    };
    Ok(MatrixFunction {
        components: [[comp(0, 0)?, comp(0, 1)?], [comp(1, 0)?, comp(1, 1)?]],
    })
}

/// Per-cell slice of the materialized lifting maps.
#[derive(Clone, Debug)]
pub struct CellBlock {
    /// Global `V_h` DOFs the cell's lifted coefficients depend on (the cell
    /// and its face neighbours).
    pub cols: Vec<usize>,
    /// `maps[i][j]`: `n_loc × cols.len()` block of `H_ij`.
    pub maps: [[DMatrix<f64>; 2]; 2],
}

/// Linear maps from `V_h` coefficients to `V̄_h` coefficients of each
/// discrete Hessian component, built once per mesh and degree.
#[derive(Debug)]
pub struct LiftingOperator {
    vh: Arc<FeSpace>,
    vbar: Arc<FeSpace>,
    blocks: Vec<CellBlock>,
}

impl LiftingOperator {
    pub fn new(vh: Arc<FeSpace>, vbar: Arc<FeSpace>) -> Result<Self> {
        if vh.kind() != SpaceKind::ContinuousZeroTrace || vbar.kind() != SpaceKind::Discontinuous {
            return Err(FemError::SpaceMismatch(
                "lifting maps V_h (continuous) into V̄_h (discontinuous)".into(),
            ));
        }
        if !vh.same_mesh(&vbar) || vh.degree() != vbar.degree() {
            return Err(FemError::SpaceMismatch(
                "V_h and V̄_h must share mesh and degree".into(),
            ));
        }
        let mesh = vh.mesh().clone();
        let blocks = (0..mesh.n_cells())
            .into_par_iter()
            .map(|cell| build_block(&vh, &mesh, cell))
            .collect();
        Ok(Self { vh, vbar, blocks })
    }

    /// Builds `V̄_h` from `V_h` and assembles the maps.
    pub fn for_space(vh: Arc<FeSpace>) -> Result<Self> {
        let vbar = Arc::new(vh.broken());
        Self::new(vh, vbar)
    }

    pub fn vh(&self) -> &Arc<FeSpace> {
        &self.vh
    }

    pub fn vbar(&self) -> &Arc<FeSpace> {
        &self.vbar
    }

    pub fn block(&self, cell: usize) -> &CellBlock {
        &self.blocks[cell]
    }

    /// Local `V̄_h` coefficients of `H_ij(u)` on a cell.
    pub fn local_hessian(&self, cell: usize, u: &[f64]) -> [[DVector<f64>; 2]; 2] {
        let b = &self.blocks[cell];
        let uc = DVector::from_iterator(b.cols.len(), b.cols.iter().map(|&d| u[d]));
        let comp = |i: usize, j: usize| &b.maps[i][j] * &uc;
        [[comp(0, 0), comp(0, 1)], [comp(1, 0), comp(1, 1)]]
    }

    /// `H(u_h)` as a matrix of `V̄_h` functions.
    pub fn discrete_hessian(&self, u: &FeFunction) -> Result<MatrixFunction> {
        if !Arc::ptr_eq(u.space(), &self.vh) {
            return Err(FemError::SpaceMismatch(
                "function does not belong to this operator's V_h".into(),
            ));
        }
        let n_loc = self.vbar.n_local();
        let mut coeffs = vec![vec![0.0; self.vbar.n_dofs()]; 4];
        for cell in 0..self.blocks.len() {
            let h = self.local_hessian(cell, u.coefficients());
            for i in 0..2 {
                for j in 0..2 {
                    coeffs[2 * i + j][cell * n_loc..(cell + 1) * n_loc]
                        .copy_from_slice(h[i][j].as_slice());
                }
            }
        }
        let mut it = coeffs
            .into_iter()
            .map(|c| FeFunction::new(self.vbar.clone(), c).expect("length matches"));
        let mut next = || it.next().unwrap();
        Ok(MatrixFunction {
            components: [[next(), next()], [next(), next()]],
        })
    }

    /// `H(u)` at every quadrature point (cell-major).
    pub fn hessian_at_quadrature(&self, u: &[f64]) -> Vec<Matrix2> {
        let nq = self.vbar.n_quad();
        (0..self.blocks.len())
            .into_par_iter()
            .flat_map_iter(|cell| {
                let h = self.local_hessian(cell, u);
                (0..nq).map(move |q| {
                    let psi = self.vbar.ref_values(q);
                    let mut out = [[0.0; 2]; 2];
                    for i in 0..2 {
                        for j in 0..2 {
                            out[i][j] = psi.iter().zip(h[i][j].iter()).map(|(a, b)| a * b).sum();
                        }
                    }
                    out
                })
            })
            .collect()
    }

    /// Global sparse matrix of component `H_ij` (rows: `V̄_h`, cols: `V_h`).
    pub fn component_matrix(&self, i: usize, j: usize) -> CsrMatrix {
        let n_loc = self.vbar.n_local();
        let mut trip = Vec::new();
        for (cell, b) in self.blocks.iter().enumerate() {
            let m = &b.maps[i][j];
            for r in 0..n_loc {
                for (c, &dof) in b.cols.iter().enumerate() {
                    let v = m[(r, c)];
                    if v != 0.0 {
                        trip.push((cell * n_loc + r, dof, v));
                    }
                }
            }
        }
        CsrMatrix::from_triplets(self.vbar.n_dofs(), self.vh.n_dofs(), &trip)
    }

    /// Coordinate-format dump of all four component matrices.
    pub fn to_coordinate_text(&self) -> String {
        let mut s = String::new();
        for i in 0..2 {
            for j in 0..2 {
                s.push_str(&format!("% H_{}{}\n", i + 1, j + 1));
                s.push_str(&self.component_matrix(i, j).to_coordinate_text());
            }
        }
        s
    }
}

fn build_block(vh: &FeSpace, mesh: &Mesh, cell: usize) -> CellBlock {
    let basis = vh.basis();
    let n_loc = vh.n_local();
    let mut cols: Vec<usize> = Vec::new();
    let push_cols = |c: usize, cols: &mut Vec<usize>| {
        for d in vh.cell_dofs(c).iter().flatten() {
            if !cols.contains(d) {
                cols.push(*d);
            }
        }
    };
    push_cols(cell, &mut cols);
    for fid in mesh.cell_faces(cell) {
        let face = &mesh.faces()[fid];
        if let Some(minus) = face.minus {
            let other = if face.plus == cell { minus } else { face.plus };
            push_cols(other, &mut cols);
        }
    }
    let col_of = |d: usize| cols.iter().position(|&c| c == d).unwrap();
    let mut rhs: [[DMatrix<f64>; 2]; 2] = std::array::from_fn(|_| {
        std::array::from_fn(|_| DMatrix::zeros(n_loc, cols.len()))
    });

    let map = mesh.cell_map(cell);
    let own = vh.cell_dofs(cell);
    let (_, weights) = vh.cell_quadrature(cell);
    for (q, &w) in weights.iter().enumerate() {
        let g: Vec<[f64; 2]> = vh
            .ref_gradients(q)
            .iter()
            .map(|&g| map.push_gradient(g))
            .collect();
        // -(∂_i φ_a, ∂_j ψ_m)
        for (a, dof) in own.iter().enumerate() {
            let Some(dof) = dof else { continue };
            let c = col_of(*dof);
            for i in 0..2 {
                for j in 0..2 {
                    for m in 0..n_loc {
                        rhs[i][j][(m, c)] -= w * g[a][i] * g[m][j];
                    }
                }
            }
        }
    }

    let rule = vh.face_rule();
    for fid in mesh.cell_faces(cell) {
        let face = &mesh.faces()[fid];
        let geo = mesh.face_geometry(fid, rule).expect("face of a cell exists");
        let ref_in = |k: usize| mesh.face_reference_points(fid, k, rule).expect("face of a cell");
        let own_ref = ref_in(cell);
        let sign = if face.plus == cell { 1.0 } else { -1.0 };
        // <{∂_i u} n_j, [ψ_m]>
        let sides: Vec<(usize, f64, Vec<Point>)> = match face.minus {
            None => vec![(face.plus, 1.0, ref_in(face.plus))],
            Some(minus) => vec![(face.plus, 0.5, ref_in(face.plus)), (minus, 0.5, ref_in(minus))],
        };
        for (t, &w) in geo.weights.iter().enumerate() {
            let psi = basis.values(own_ref[t]);
            for (k, avg, refs) in &sides {
                let mk = mesh.cell_map(*k);
                let g: Vec<[f64; 2]> = basis.gradients(refs[t]).into_iter().map(|g| mk.push_gradient(g)).collect();
                for (a, dof) in vh.cell_dofs(*k).iter().enumerate() {
                    let Some(dof) = dof else { continue };
                    let c = col_of(*dof);
                    for i in 0..2 {
                        for j in 0..2 {
                            let f = sign * w * avg * g[a][i] * geo.normal[j];
                            for m in 0..n_loc {
                                rhs[i][j][(m, c)] += f * psi[m];
                            }
                        }
                    }
                }
            }
        }
    }

    let minv = vh.local_mass_inverse(cell);
    let maps = std::array::from_fn(|i| std::array::from_fn(|j| &minv * &rhs[i][j]));
    CellBlock { cols, maps }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::CellwiseFn;
    use crate::mesh::DomainTag;
    use crate::quadrature::{GaussRule, TriangleRule};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(n: usize, r: usize) -> LiftingOperator {
        let mesh = Arc::new(Mesh::build_structured(DomainTag::UnitSquare, n).unwrap());
        let vh = Arc::new(FeSpace::new(mesh, r, SpaceKind::ContinuousZeroTrace).unwrap());
        LiftingOperator::for_space(vh).unwrap()
    }

    fn random_function(space: &Arc<FeSpace>, rng: &mut ChaCha8Rng) -> FeFunction {
        let c = (0..space.n_dofs()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        FeFunction::new(space.clone(), c).unwrap()
    }

    /// P2 Lagrange basis written in barycentric form, independent of the
    /// Vandermonde construction.
    fn p2_oracle(node: Point, xi: Point) -> (f64, [f64; 2]) {
        let l = [1.0 - xi[0] - xi[1], xi[0], xi[1]];
        let dl = [[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]];
        let ln = [1.0 - node[0] - node[1], node[0], node[1]];
        let at = |v: f64| (v - 1.0).abs() < 1e-12;
        let half = |v: f64| (v - 0.5).abs() < 1e-12;
        if let Some(a) = (0..3).find(|&a| at(ln[a])) {
            let v = l[a] * (2.0 * l[a] - 1.0);
            let d = 4.0 * l[a] - 1.0;
            return (v, [d * dl[a][0], d * dl[a][1]]);
        }
        let pair: Vec<usize> = (0..3).filter(|&a| half(ln[a])).collect();
        let (a, b) = (pair[0], pair[1]);
        (
            4.0 * l[a] * l[b],
            [
                4.0 * (dl[a][0] * l[b] + l[a] * dl[b][0]),
                4.0 * (dl[a][1] * l[b] + l[a] * dl[b][1]),
            ],
        )
    }

    /// Dense global assembly of the face form with the barycentric basis and
    /// a different quadrature, solved as one system.
    fn dense_face_form_oracle(
        mesh: &Mesh,
        nodes: &[Point],
        v: &dyn Fn(usize, Point) -> f64,
        axis: usize,
    ) -> Vec<f64> {
        let n_loc = nodes.len();
        let n = mesh.n_cells() * n_loc;
        let mut mass = DMatrix::<f64>::zeros(n, n);
        let mut rhs = DVector::<f64>::zeros(n);
        let rule = TriangleRule::with_degree(10);
        for k in 0..mesh.n_cells() {
            let map = mesh.cell_map(k);
            for (xi, w) in rule.points.iter().zip(&rule.weights) {
                let w = w * map.det.abs();
                let x = map.to_physical(*xi);
                for a in 0..n_loc {
                    let (pa, ga) = p2_oracle(nodes[a], *xi);
                    let ga = map.push_gradient(ga);
                    rhs[k * n_loc + a] -= w * v(k, x) * ga[axis];
                    for b in 0..n_loc {
                        let (pb, _) = p2_oracle(nodes[b], *xi);
                        mass[(k * n_loc + a, k * n_loc + b)] += w * pa * pb;
                    }
                }
            }
        }
        let g = GaussRule::new(6);
        for face in mesh.faces() {
            let (p0, p1) = (mesh.vertices()[face.vertices[0]], mesh.vertices()[face.vertices[1]]);
            for (t, w) in g.points.iter().zip(&g.weights) {
                let x = [p0[0] + t * (p1[0] - p0[0]), p0[1] + t * (p1[1] - p0[1])];
                let w = w * face.length;
                let avg = match face.minus {
                    None => v(face.plus, x),
                    Some(m) => 0.5 * (v(face.plus, x) + v(m, x)),
                };
                let mut sides = vec![(face.plus, 1.0)];
                if let Some(m) = face.minus {
                    sides.push((m, -1.0));
                }
                for (k, s) in sides {
                    let xi = mesh.cell_map(k).to_reference(x);
                    for a in 0..n_loc {
                        let (pa, _) = p2_oracle(nodes[a], xi);
                        rhs[k * n_loc + a] += w * avg * face.normal[axis] * s * pa;
                    }
                }
            }
        }
        mass.lu().solve(&rhs).unwrap().as_slice().to_vec()
    }

    #[test]
    fn constant_and_linear_fields_match_dense_oracle() {
        let op = setup(1, 2);
        let vbar = op.vbar();
        let mesh = vbar.mesh().clone();
        let nodes = vbar.basis().nodes().to_vec();
        let one = CellwiseFn(|_, _| (1.0, [0.0, 0.0]));
        let x = CellwiseFn(|_, p: Point| (p[0], [1.0, 0.0]));
        for axis in 0..2 {
            let lifted = lift_partial(vbar, &one, axis).unwrap();
            let oracle = dense_face_form_oracle(&mesh, &nodes, &|_, _| 1.0, axis);
            for (a, b) in lifted.coefficients().iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-11, "{a} vs {b}");
            }
            let lifted = lift_partial(vbar, &x, axis).unwrap();
            let equiv = lift_partial_equivalent(vbar, &x, axis).unwrap();
            let oracle = dense_face_form_oracle(&mesh, &nodes, &|_, p| p[0], axis);
            for ((a, b), c) in lifted.coefficients().iter().zip(&oracle).zip(equiv.coefficients()) {
                assert!((a - b).abs() < 1e-11 && (a - c).abs() < 1e-11);
            }
            // v = x has no jumps, so the lift is its elementwise derivative
            let want = if axis == 0 { 1.0 } else { 0.0 };
            assert!(equiv.coefficients().iter().all(|c| (c - want).abs() < 1e-12));
        }
        // boundary averages cancel the volume term for continuous data
        let lifted = lift_partial(vbar, &one, 0).unwrap();
        assert!(lifted.coefficients().iter().all(|c| c.abs() < 1e-12));
        let equiv = lift_partial_equivalent(vbar, &one, 0).unwrap();
        assert!(equiv.coefficients().iter().all(|c| c.abs() < 1e-12));
    }

    #[test]
    fn constant_lift_vanishes_away_from_the_boundary() {
        let op = setup(4, 2);
        let vbar = op.vbar();
        let mesh = vbar.mesh();
        let one = CellwiseFn(|_, _| (1.0, [0.0, 0.0]));
        let lifted = lift_partial(vbar, &one, 1).unwrap();
        let n_loc = vbar.n_local();
        for cell in 0..mesh.n_cells() {
            let touches_boundary = mesh
                .cell_faces(cell)
                .iter()
                .any(|&f| mesh.faces()[f].is_boundary());
            if !touches_boundary {
                let c = &lifted.coefficients()[cell * n_loc..(cell + 1) * n_loc];
                assert!(c.iter().all(|v| v.abs() < 1e-11));
            }
        }
    }

    #[test]
    fn unit_jump_matches_hand_assembly() {
        let op = setup(1, 2);
        let vbar = op.vbar();
        let mesh = vbar.mesh();
        let face = mesh.interior_faces().next().unwrap().clone();
        let plus = face.plus;
        let v = CellwiseFn(move |k, _| (if k == plus { 1.0 } else { 0.0 }, [0.0, 0.0]));
        let rhs = lift_rhs(vbar, &v, 0, LiftForm::Jump);
        let h = face.length;
        for cell in 0..2 {
            let map = mesh.cell_map(cell);
            for (m, &node) in vbar.basis().nodes().iter().enumerate() {
                let x = map.to_physical(node);
                // nodes on the diagonal y = x
                let on_face = (x[0] - x[1]).abs() < 1e-12;
                let is_vertex = vbar.basis().lattice(m).iter().any(|&l| l == 2);
                let integral = match (on_face, is_vertex) {
                    (false, _) => 0.0,
                    (true, true) => h / 6.0,
                    (true, false) => 2.0 * h / 3.0,
                };
                let expect = -face.normal[0] * 0.5 * integral;
                assert!((rhs[cell][m] - expect).abs() < 1e-14, "{} vs {}", rhs[cell][m], expect);
            }
        }
        // summed over both cells the contribution is -h_F n (mean of ψ ≡ 1)
        let total: f64 = rhs.iter().map(|r| r.sum()).sum();
        assert!((total + h * face.normal[0]).abs() < 1e-14);
    }

    #[test]
    fn two_forms_agree_on_random_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for n in [2, 4, 8] {
            let op = setup(n, 2);
            let u = random_function(op.vh(), &mut rng);
            for i in 0..2 {
                let g = GradientComponent { function: &u, axis: i };
                for j in 0..2 {
                    let (a, ra) = lift_partial_with_residual(op.vbar(), &g, j, LiftForm::Face).unwrap();
                    let (b, rb) = lift_partial_with_residual(op.vbar(), &g, j, LiftForm::Jump).unwrap();
                    assert!(ra < 1e-12 && rb < 1e-12);
                    let diff = a
                        .coefficients()
                        .iter()
                        .zip(b.coefficients())
                        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
                    assert!(diff < 1e-10, "n={n}: {diff}");
                }
            }
        }
    }

    #[test]
    fn materialized_maps_match_pointwise_application() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let op = setup(3, 3);
        let u = random_function(op.vh(), &mut rng);
        let fast = op.discrete_hessian(&u).unwrap();
        let slow = discrete_hessian_pointwise(op.vbar(), &u).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                for (a, b) in fast
                    .component(i, j)
                    .coefficients()
                    .iter()
                    .zip(slow.component(i, j).coefficients())
                {
                    assert!((a - b).abs() < 1e-12 * (1.0 + b.abs()));
                }
                let csr = op.component_matrix(i, j).mul_vec(u.coefficients());
                for (a, b) in csr.iter().zip(fast.component(i, j).coefficients()) {
                    assert!((a - b).abs() < 1e-12 * (1.0 + b.abs()));
                }
            }
        }
    }

    #[test]
    fn hessian_of_c1_interpolant_is_elementwise() {
        let op = setup(3, 4);
        let u = op
            .vh()
            .interpolate(|p| p[0] * (1.0 - p[0]) * p[1] * (1.0 - p[1]));
        let h = op.discrete_hessian(&u).unwrap();
        let exact = |p: Point| {
            let (x, y) = (p[0], p[1]);
            [
                [-2.0 * y * (1.0 - y), (1.0 - 2.0 * x) * (1.0 - 2.0 * y)],
                [(1.0 - 2.0 * x) * (1.0 - 2.0 * y), -2.0 * x * (1.0 - x)],
            ]
        };
        let mesh = op.vh().mesh();
        for cell in 0..mesh.n_cells() {
            for xi in [[0.2, 0.3], [0.0, 1.0], [0.5, 0.25]] {
                let want = exact(mesh.cell_map(cell).to_physical(xi));
                for i in 0..2 {
                    for j in 0..2 {
                        let got = h.component(i, j).eval(cell, xi).unwrap();
                        assert!((got - want[i][j]).abs() < 1e-11, "{got} vs {}", want[i][j]);
                    }
                }
            }
        }
    }

    #[test]
    fn zero_linearity_and_identity_contraction() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let op = setup(4, 2);
        let vh = op.vh();
        let zero = FeFunction::zero(vh.clone());
        let h0 = op.hessian_at_quadrature(zero.coefficients());
        assert!(h0.iter().flatten().flatten().all(|&v| v == 0.0));

        let (u, w) = (random_function(vh, &mut rng), random_function(vh, &mut rng));
        let (a, b) = (1.7, -0.3);
        let comb = u.scaled(a).axpy(b, &w);
        let (hu, hw, hc) = (
            op.hessian_at_quadrature(u.coefficients()),
            op.hessian_at_quadrature(w.coefficients()),
            op.hessian_at_quadrature(comb.coefficients()),
        );
        for q in 0..hc.len() {
            for i in 0..2 {
                for j in 0..2 {
                    let want = a * hu[q][i][j] + b * hw[q][i][j];
                    assert!((hc[q][i][j] - want).abs() < 1e-12 * (1.0 + want.abs()));
                }
            }
        }

        // ∫ (I : H(w)) v = -(∇w, ∇v)
        let v = random_function(vh, &mut rng);
        let vq = v.values_at_quadrature();
        let mut lhs = 0.0;
        let nq = vh.n_quad();
        for cell in 0..vh.mesh().n_cells() {
            let (_, wts) = vh.cell_quadrature(cell);
            for q in 0..nq {
                let i = cell * nq + q;
                lhs += wts[q] * (hw[i][0][0] + hw[i][1][1]) * vq[i];
            }
        }
        let k = vh.stiffness_matrix();
        let rhs: f64 = -k.mul_vec(w.coefficients()).iter().zip(v.coefficients()).map(|(a, b)| a * b).sum::<f64>();
        assert!((lhs - rhs).abs() < 1e-10 * (1.0 + lhs.abs() + rhs.abs()));
    }

    #[test]
    fn lifting_is_local() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let op = setup(6, 2);
        let vh = op.vh();
        let mesh = vh.mesh();
        let centre = mesh.n_cells() / 2;
        let u = random_function(vh, &mut rng);
        let patch_dofs: Vec<usize> = vh.cell_dofs(centre).iter().flatten().copied().collect();
        let mut c = vec![0.0; vh.n_dofs()];
        for &d in &patch_dofs {
            c[d] = u.coefficients()[d];
        }
        let restricted = FeFunction::new(vh.clone(), c).unwrap();
        let h = op.discrete_hessian(&restricted).unwrap();
        // cells touching a patch DOF, plus their face neighbours
        let support: Vec<usize> = (0..mesh.n_cells())
            .filter(|&k| vh.cell_dofs(k).iter().flatten().any(|d| patch_dofs.contains(d)))
            .collect();
        let mut allowed = support.clone();
        for &k in &support {
            for f in mesh.cell_faces(k) {
                let face = &mesh.faces()[f];
                allowed.push(face.plus);
                if let Some(m) = face.minus {
                    allowed.push(m);
                }
            }
        }
        let n_loc = op.vbar().n_local();
        for cell in 0..mesh.n_cells() {
            if allowed.contains(&cell) {
                continue;
            }
            for i in 0..2 {
                for j in 0..2 {
                    let block = &h.component(i, j).coefficients()[cell * n_loc..(cell + 1) * n_loc];
                    assert!(block.iter().all(|v| *v == 0.0));
                }
            }
        }
    }

    #[test]
    fn rejects_foreign_mesh_and_bad_axis() {
        let a = setup(2, 2);
        let b = setup(2, 2);
        let u = a.vh().interpolate(|p| p[0] * p[1]);
        let g = GradientComponent { function: &u, axis: 0 };
        assert!(lift_partial(b.vbar(), &g, 0).is_err());
        assert!(lift_partial(a.vbar(), &g, 2).is_err());
        assert!(lift_partial(a.vh(), &g, 0).is_err());
        assert!(b.discrete_hessian(&u).is_err());
    }
}
