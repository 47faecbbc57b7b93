//! Lagrange spaces `V_h = H^1_0 ∩ P_r` and `V̄_h = P_r(T_h)`, finite element
//! functions and the L²-orthogonal projections onto them.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::basis::{in_reference_triangle, LagrangeBasis};
use crate::compensated::dot;
use crate::error::{FemError, Result};
use crate::mesh::{Mesh, Point};
use crate::quadrature::{GaussRule, TriangleRule};
use crate::sparse::{inf_norm, residual, CsrMatrix, LinearSolver};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpaceKind {
    ContinuousZeroTrace,
    Discontinuous,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
enum NodeKey {
    Vertex(usize),
    /// endpoints (smaller index first) and lattice weight on the first one
    Edge(usize, usize, usize),
    Interior(usize, usize),
}

/// Coefficient smoothness degree assumed when the caller does not declare
/// one: `2r + 2`.
pub fn default_coefficient_degree(degree: usize) -> usize {
    2 * degree + 2
}

#[derive(Debug)]
pub struct FeSpace {
    mesh: Arc<Mesh>,
    basis: LagrangeBasis,
    kind: SpaceKind,
    n_loc: usize,
    dof_map: Vec<Option<usize>>,
    n_dofs: usize,
    dof_points: Vec<Point>,
    cell_rule: TriangleRule,
    face_rule: GaussRule,
    ref_values: Vec<Vec<f64>>,
    ref_gradients: Vec<Vec<[f64; 2]>>,
    ref_mass: DMatrix<f64>,
    ref_mass_inv: DMatrix<f64>,
}

impl FeSpace {
    pub fn new(mesh: Arc<Mesh>, degree: usize, kind: SpaceKind) -> Result<Self> {
        Self::with_coefficient_degree(mesh, degree, kind, default_coefficient_degree(degree))
    }

    /// Quadrature exactness is `max(2r, 2r - 2 + coefficient_degree)` on cells
    /// and faces.
    pub fn with_coefficient_degree(
        mesh: Arc<Mesh>,
        degree: usize,
        kind: SpaceKind,
        coefficient_degree: usize,
    ) -> Result<Self> {
        let basis = LagrangeBasis::new(degree)?;
        let quad_degree = (2 * degree).max(2 * degree - 2 + coefficient_degree);
        let cell_rule = TriangleRule::with_degree(quad_degree);
        let face_rule = GaussRule::with_degree(quad_degree);
        let n_loc = basis.len();
        let (dof_map, n_dofs) = match kind {
            SpaceKind::Discontinuous => {
                let map = (0..mesh.n_cells() * n_loc).map(Some).collect();
                (map, mesh.n_cells() * n_loc)
            }
            SpaceKind::ContinuousZeroTrace => continuous_dofs(&mesh, &basis),
        };
        let mut dof_points = vec![[0.0; 2]; n_dofs];
        for cell in 0..mesh.n_cells() {
            let map = mesh.cell_map(cell);
            for (k, &node) in basis.nodes().iter().enumerate() {
                if let Some(d) = dof_map[cell * n_loc + k] {
                    dof_points[d] = map.to_physical(node);
                }
            }
        }
        let ref_values: Vec<Vec<f64>> = cell_rule.points.iter().map(|&p| basis.values(p)).collect();
        let ref_gradients = cell_rule
            .points
            .iter()
            .map(|&p| basis.gradients(p))
            .collect();
        let mut ref_mass = DMatrix::zeros(n_loc, n_loc);
        for (vals, w) in ref_values.iter().zip(&cell_rule.weights) {
            for i in 0..n_loc {
                for j in 0..n_loc {
                    ref_mass[(i, j)] += w * vals[i] * vals[j];
                }
            }
        }
        let ref_mass_inv = ref_mass
            .clone()
            .cholesky()
            .expect("reference mass matrix is SPD")
            .inverse();
        Ok(Self {
            mesh,
            basis,
            kind,
            n_loc,
            dof_map,
            n_dofs,
            dof_points,
            cell_rule,
            face_rule,
            ref_values,
            ref_gradients,
            ref_mass,
            ref_mass_inv,
        })
    }

    /// Discontinuous companion of this space on the same mesh and quadrature.
    pub fn broken(&self) -> Self {
        let mut dof_points = Vec::with_capacity(self.mesh.n_cells() * self.n_loc);
        for cell in 0..self.mesh.n_cells() {
            let map = self.mesh.cell_map(cell);
            dof_points.extend(self.basis.nodes().iter().map(|&n| map.to_physical(n)));
        }
        Self {
            mesh: self.mesh.clone(),
            basis: self.basis.clone(),
            kind: SpaceKind::Discontinuous,
            n_loc: self.n_loc,
            dof_map: (0..self.mesh.n_cells() * self.n_loc).map(Some).collect(),
            n_dofs: self.mesh.n_cells() * self.n_loc,
            dof_points,
            cell_rule: self.cell_rule.clone(),
            face_rule: self.face_rule.clone(),
            ref_values: self.ref_values.clone(),
            ref_gradients: self.ref_gradients.clone(),
            ref_mass: self.ref_mass.clone(),
            ref_mass_inv: self.ref_mass_inv.clone(),
        }
    }

    pub fn mesh(&self) -> &Arc<Mesh> {
        &self.mesh
    }

    pub fn basis(&self) -> &LagrangeBasis {
        &self.basis
    }

    pub fn degree(&self) -> usize {
        self.basis.degree()
    }

    pub fn kind(&self) -> SpaceKind {
        self.kind
    }

    pub fn n_dofs(&self) -> usize {
        self.n_dofs
    }

    pub fn n_local(&self) -> usize {
        self.n_loc
    }

    /// Global DOFs of a cell's local nodes; `None` marks a node fixed to zero.
    pub fn cell_dofs(&self, cell: usize) -> &[Option<usize>] {
        &self.dof_map[cell * self.n_loc..(cell + 1) * self.n_loc]
    }

    pub fn dof_points(&self) -> &[Point] {
        &self.dof_points
    }

    pub fn cell_rule(&self) -> &TriangleRule {
        &self.cell_rule
    }

    pub fn face_rule(&self) -> &GaussRule {
        &self.face_rule
    }

    pub fn n_quad(&self) -> usize {
        self.cell_rule.len()
    }

    /// Basis values at reference quadrature point `q`.
    pub fn ref_values(&self, q: usize) -> &[f64] {
        &self.ref_values[q]
    }

    pub fn ref_gradients(&self, q: usize) -> &[[f64; 2]] {
        &self.ref_gradients[q]
    }

    /// Physical quadrature points and weights of a cell.
    pub fn cell_quadrature(&self, cell: usize) -> (Vec<Point>, Vec<f64>) {
        let map = self.mesh.cell_map(cell);
        let jac = map.det.abs();
        (
            self.cell_rule.points.iter().map(|&p| map.to_physical(p)).collect(),
            self.cell_rule.weights.iter().map(|w| w * jac).collect(),
        )
    }

    /// All physical quadrature points, cell-major.
    pub fn quadrature_points(&self) -> Vec<Point> {
        (0..self.mesh.n_cells())
            .flat_map(|c| self.cell_quadrature(c).0)
            .collect()
    }

    pub fn local_mass(&self, cell: usize) -> DMatrix<f64> {
        &self.ref_mass * self.mesh.cell_map(cell).det.abs()
    }

    pub fn local_mass_inverse(&self, cell: usize) -> DMatrix<f64> {
        &self.ref_mass_inv / self.mesh.cell_map(cell).det.abs()
    }

    pub fn same_mesh(&self, other: &FeSpace) -> bool {
        Arc::ptr_eq(&self.mesh, &other.mesh)
    }

    pub fn mass_matrix(&self) -> CsrMatrix {
        self.assemble_bilinear(|vi, vj, _, _| vi * vj)
    }

    /// `(∇φ_j, ∇φ_i)`.
    pub fn stiffness_matrix(&self) -> CsrMatrix {
        self.assemble_bilinear(|_, _, gi, gj| gi[0] * gj[0] + gi[1] * gj[1])
    }

    fn assemble_bilinear<F>(&self, kernel: F) -> CsrMatrix
    where
        F: Fn(f64, f64, [f64; 2], [f64; 2]) -> f64,
    {
        let mut trip = Vec::new();
        let mut local = vec![0.0; self.n_loc * self.n_loc];
        for cell in 0..self.mesh.n_cells() {
            let map = self.mesh.cell_map(cell);
            let jac = map.det.abs();
            local.iter_mut().for_each(|v| *v = 0.0);
            for q in 0..self.n_quad() {
                let w = self.cell_rule.weights[q] * jac;
                let vals = &self.ref_values[q];
                let grads: Vec<[f64; 2]> = self.ref_gradients[q]
                    .iter()
                    .map(|&g| map.push_gradient(g))
                    .collect();
                for i in 0..self.n_loc {
                    for j in 0..self.n_loc {
                        local[i * self.n_loc + j] += w * kernel(vals[i], vals[j], grads[i], grads[j]);
                    }
                }
            }
            let dofs = self.cell_dofs(cell);
            for (i, di) in dofs.iter().enumerate() {
                let Some(di) = di else { continue };
                for (j, dj) in dofs.iter().enumerate() {
                    let Some(dj) = dj else { continue };
                    trip.push((*di, *dj, local[i * self.n_loc + j]));
                }
            }
        }
        CsrMatrix::from_triplets(self.n_dofs, self.n_dofs, &trip)
    }

    /// `(g, φ_i)` for data given at every quadrature point (cell-major).
    pub fn load_from_quad(&self, values: &[f64]) -> Vec<f64> {
        let nq = self.n_quad();
        assert_eq!(values.len(), self.mesh.n_cells() * nq);
        let mut rhs = vec![0.0; self.n_dofs];
        for cell in 0..self.mesh.n_cells() {
            let jac = self.mesh.cell_map(cell).det.abs();
            let dofs = self.cell_dofs(cell);
            for q in 0..nq {
                let wg = self.cell_rule.weights[q] * jac * values[cell * nq + q];
                for (k, d) in dofs.iter().enumerate() {
                    if let Some(d) = d {
                        rhs[*d] += wg * self.ref_values[q][k];
                    }
                }
            }
        }
        rhs
    }

    /// Samples `f` at all quadrature points (cell-major).
    pub fn sample<F: Fn(Point) -> f64>(&self, f: F) -> Vec<f64> {
        self.quadrature_points().into_iter().map(f).collect()
    }

    /// Nodal interpolant; nodes on the boundary stay zero for `V_h`.
    pub fn interpolate<F: Fn(Point) -> f64>(self: &Arc<Self>, f: F) -> FeFunction {
        let coefficients = self.dof_points.iter().map(|&p| f(p)).collect();
        FeFunction::new(self.clone(), coefficients).expect("length matches")
    }

    /// Exact L² integral of products of two coefficient vectors: `u^T M v`.
    pub fn l2_inner(&self, mass: &CsrMatrix, u: &[f64], v: &[f64]) -> f64 {
        mass.mul_vec(u).iter().zip(v).map(|(a, b)| a * b).sum()
    }
}

fn continuous_dofs(mesh: &Mesh, basis: &LagrangeBasis) -> (Vec<Option<usize>>, usize) {
    let n_loc = basis.len();
    let mut ids: HashMap<NodeKey, Option<usize>> = HashMap::new();
    let mut map = Vec::with_capacity(mesh.n_cells() * n_loc);
    let mut next = 0usize;
    for (cell, verts) in mesh.cells().iter().enumerate() {
        let faces = mesh.cell_faces(cell);
        for k in 0..n_loc {
            let lat = basis.lattice(k);
            let nonzero: Vec<usize> = (0..3).filter(|&e| lat[e] > 0).collect();
            let (key, on_boundary) = match nonzero.as_slice() {
                [e] => (
                    NodeKey::Vertex(verts[*e]),
                    mesh.is_boundary_vertex(verts[*e]),
                ),
                [e1, e2] => {
                    let zero = 3 - e1 - e2;
                    let (va, vb) = (verts[*e1], verts[*e2]);
                    let key = if va < vb {
                        NodeKey::Edge(va, vb, lat[*e1])
                    } else {
                        NodeKey::Edge(vb, va, lat[*e2])
                    };
                    (key, mesh.faces()[faces[zero]].is_boundary())
                }
                _ => (NodeKey::Interior(cell, k), false),
            };
            let id = *ids.entry(key).or_insert_with(|| {
                if on_boundary {
                    None
                } else {
                    next += 1;
                    Some(next - 1)
                }
            });
            map.push(id);
        }
    }
    (map, next)
}

/// Element of a finite element space.
#[derive(Clone, Debug)]
pub struct FeFunction {
    space: Arc<FeSpace>,
    coefficients: Vec<f64>,
}

impl FeFunction {
    pub fn new(space: Arc<FeSpace>, coefficients: Vec<f64>) -> Result<Self> {
        if coefficients.len() != space.n_dofs() {
            return Err(FemError::SpaceMismatch(format!(
                "{} coefficients for a space with {} DOFs",
                coefficients.len(),
                space.n_dofs()
            )));
        }
        Ok(Self {
            space,
            coefficients,
        })
    }

    pub fn zero(space: Arc<FeSpace>) -> Self {
        let n = space.n_dofs();
        Self {
            space,
            coefficients: vec![0.0; n],
        }
    }

    pub fn space(&self) -> &Arc<FeSpace> {
        &self.space
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn into_coefficients(self) -> Vec<f64> {
        self.coefficients
    }

    pub fn local_coefficients(&self, cell: usize) -> Vec<f64> {
        self.space
            .cell_dofs(cell)
            .iter()
            .map(|d| d.map_or(0.0, |d| self.coefficients[d]))
            .collect()
    }

    fn check(&self, cell: usize, xi: Point) -> Result<()> {
        if cell >= self.space.mesh().n_cells() {
            return Err(FemError::CellLookup(cell));
        }
        if !in_reference_triangle(xi) {
            return Err(FemError::OutsideReference(xi[0], xi[1]));
        }
        Ok(())
    }

    /// Value at a reference point of a cell.
    pub fn eval(&self, cell: usize, xi: Point) -> Result<f64> {
        self.check(cell, xi)?;
        Ok(self.eval_unchecked(cell, xi))
    }

    /// Physical gradient at a reference point of a cell.
    pub fn eval_gradient(&self, cell: usize, xi: Point) -> Result<[f64; 2]> {
        self.check(cell, xi)?;
        Ok(self.gradient_unchecked(cell, xi))
    }

    pub(crate) fn eval_unchecked(&self, cell: usize, xi: Point) -> f64 {
        let c = self.local_coefficients(cell);
        dot(self.space.basis().values(xi), c)
    }

    pub(crate) fn gradient_unchecked(&self, cell: usize, xi: Point) -> [f64; 2] {
        let c = self.local_coefficients(cell);
        let grads = self.space.basis().gradients(xi);
        let g = [0, 1].map(|a| dot(grads.iter().map(|g| g[a]), c.iter().copied()));
        self.space.mesh().cell_map(cell).push_gradient(g)
    }

    pub(crate) fn hessian_unchecked(&self, cell: usize, xi: Point) -> [[f64; 2]; 2] {
        let c = self.local_coefficients(cell);
        let hs = self.space.basis().hessians(xi);
        let h = [0, 1].map(|a| [0, 1].map(|b| dot(hs.iter().map(|h| h[a][b]), c.iter().copied())));
        self.space.mesh().cell_map(cell).push_hessian(h)
    }

    /// Values at every quadrature point (cell-major).
    pub fn values_at_quadrature(&self) -> Vec<f64> {
        let nq = self.space.n_quad();
        let mut out = Vec::with_capacity(self.space.mesh().n_cells() * nq);
        for cell in 0..self.space.mesh().n_cells() {
            let c = self.local_coefficients(cell);
            for q in 0..nq {
                out.push(
                    self.space
                        .ref_values(q)
                        .iter()
                        .zip(&c)
                        .map(|(a, b)| a * b)
                        .sum(),
                );
            }
        }
        out
    }

    /// Physical gradients at every quadrature point (cell-major).
    pub fn gradients_at_quadrature(&self) -> Vec<[f64; 2]> {
        let nq = self.space.n_quad();
        let mut out = Vec::with_capacity(self.space.mesh().n_cells() * nq);
        for cell in 0..self.space.mesh().n_cells() {
            let c = self.local_coefficients(cell);
            let map = self.space.mesh().cell_map(cell);
            for q in 0..nq {
                let mut g = [0.0; 2];
                for (gr, ck) in self.space.ref_gradients(q).iter().zip(&c) {
                    g[0] += gr[0] * ck;
                    g[1] += gr[1] * ck;
                }
                out.push(map.push_gradient(g));
            }
        }
        out
    }

    pub fn axpy(&self, a: f64, other: &FeFunction) -> FeFunction {
        let coefficients = self
            .coefficients
            .iter()
            .zip(&other.coefficients)
            .map(|(x, y)| x + a * y)
            .collect();
        FeFunction {
            space: self.space.clone(),
            coefficients,
        }
    }

    pub fn scaled(&self, a: f64) -> FeFunction {
        FeFunction {
            space: self.space.clone(),
            coefficients: self.coefficients.iter().map(|x| a * x).collect(),
        }
    }

    /// Quadrature L² norm.
    pub fn l2_norm(&self) -> f64 {
        let nq = self.space.n_quad();
        let vals = self.values_at_quadrature();
        let mut s = 0.0;
        for cell in 0..self.space.mesh().n_cells() {
            let jac = self.space.mesh().cell_map(cell).det.abs();
            for q in 0..nq {
                s += self.space.cell_rule().weights[q] * jac * vals[cell * nq + q].powi(2);
            }
        }
        s.sqrt()
    }

    /// `{"space": {"degree", "kind"}, "coefficients": [...]}`
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "space": { "degree": self.space.degree(), "kind": self.space.kind() },
            "coefficients": self.coefficients,
        })
    }

    /// Legacy ASCII VTK sampling the function at mesh vertices.
    pub fn to_vtk(&self, title: &str) -> String {
        let mesh = self.space.mesh();
        let nv = mesh.vertices().len();
        let mut vertex_value = vec![None; nv];
        let corners = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
        for (cell, verts) in mesh.cells().iter().enumerate() {
            for (e, &v) in verts.iter().enumerate() {
                if vertex_value[v].is_none() {
                    vertex_value[v] = Some(self.eval_unchecked(cell, corners[e]));
                }
            }
        }
        let mut s = String::new();
        let _ = writeln!(s, "# vtk DataFile Version 3.0\n{title}\nASCII\nDATASET UNSTRUCTURED_GRID");
        let _ = writeln!(s, "POINTS {nv} double");
        for p in mesh.vertices() {
            let _ = writeln!(s, "{:.16e} {:.16e} 0", p[0], p[1]);
        }
        let nc = mesh.n_cells();
        let _ = writeln!(s, "CELLS {nc} {}", 4 * nc);
        for c in mesh.cells() {
            let _ = writeln!(s, "3 {} {} {}", c[0], c[1], c[2]);
        }
        let _ = writeln!(s, "CELL_TYPES {nc}");
        for _ in 0..nc {
            let _ = writeln!(s, "5");
        }
        let _ = writeln!(s, "POINT_DATA {nv}\nSCALARS u double 1\nLOOKUP_TABLE default");
        for v in vertex_value {
            let _ = writeln!(s, "{:.16e}", v.unwrap_or(0.0));
        }
        s
    }
}

/// A 2×2 matrix of functions in the same space (e.g. a discrete Hessian).
#[derive(Clone, Debug)]
pub struct MatrixFunction {
    pub components: [[FeFunction; 2]; 2],
}

impl MatrixFunction {
    pub fn component(&self, i: usize, j: usize) -> &FeFunction {
        &self.components[i][j]
    }
}

/// `P_h`: L²-orthogonal projection onto `V_h`, with the mass matrix factorized
/// once.
#[derive(Debug)]
pub struct L2Projector {
    space: Arc<FeSpace>,
    mass: CsrMatrix,
    solver: LinearSolver,
}

impl L2Projector {
    pub fn new(space: Arc<FeSpace>) -> Result<Self> {
        let mass = space.mass_matrix();
        let solver = LinearSolver::new(mass.clone()).map_err(|e| {
            FemError::SingularSystem(format!("mass matrix (corrupt DOF map?): {e}"))
        })?;
        Ok(Self {
            space,
            mass,
            solver,
        })
    }

    pub fn space(&self) -> &Arc<FeSpace> {
        &self.space
    }

    pub fn mass(&self) -> &CsrMatrix {
        &self.mass
    }

    /// Riesz representer of a load vector `(g, φ_i)`.
    pub fn solve_load(&self, load: &[f64]) -> Result<FeFunction> {
        let c = self.solver.solve(load)?;
        let res = inf_norm(&residual(&self.mass, &c, load));
        if res > 1e-10 * inf_norm(load).max(f64::MIN_POSITIVE) {
            return Err(FemError::SingularSystem(format!(
                "mass solve residual {res:e} too large"
            )));
        }
        FeFunction::new(self.space.clone(), c)
    }

    /// Projection of data given at quadrature points.
    pub fn project_quad(&self, values: &[f64]) -> Result<FeFunction> {
        self.solve_load(&self.space.load_from_quad(values))
    }

    pub fn project<F: Fn(Point) -> f64>(&self, f: F) -> Result<FeFunction> {
        self.project_quad(&self.space.sample(f))
    }

    /// `‖v‖_{L²}` of a member of the space, exact via the mass matrix.
    pub fn norm(&self, v: &FeFunction) -> f64 {
        self.space
            .l2_inner(&self.mass, v.coefficients(), v.coefficients())
            .max(0.0)
            .sqrt()
    }
}

/// `P_h f` for `f` given pointwise.
pub fn project_ph<F: Fn(Point) -> f64>(space: &Arc<FeSpace>, f: F) -> Result<FeFunction> {
    if space.kind() != SpaceKind::ContinuousZeroTrace {
        return Err(FemError::SpaceMismatch("P_h targets V_h".into()));
    }
    L2Projector::new(space.clone())?.project(f)
}

/// Cell-local L² projection of quadrature data onto a discontinuous space.
pub fn project_broken_quad(space: &Arc<FeSpace>, values: &[f64]) -> Result<FeFunction> {
    if space.kind() != SpaceKind::Discontinuous {
        return Err(FemError::SpaceMismatch("P̄_h targets V̄_h".into()));
    }
    let nq = space.n_quad();
    let n_loc = space.n_local();
    let mut coeffs = vec![0.0; space.n_dofs()];
    for cell in 0..space.mesh().n_cells() {
        let jac = space.mesh().cell_map(cell).det.abs();
        let mut rhs = DVector::zeros(n_loc);
        for q in 0..nq {
            let wg = space.cell_rule().weights[q] * jac * values[cell * nq + q];
            for k in 0..n_loc {
                rhs[k] += wg * space.ref_values(q)[k];
            }
        }
        let c = space.local_mass_inverse(cell) * rhs;
        coeffs[cell * n_loc..(cell + 1) * n_loc].copy_from_slice(c.as_slice());
    }
    FeFunction::new(space.clone(), coeffs)
}

/// `P̄_h` of a matrix-valued field, component by component.
pub fn project_pbar<F: Fn(Point) -> [[f64; 2]; 2]>(
    space: &Arc<FeSpace>,
    field: F,
) -> Result<MatrixFunction> {
    let values: Vec<[[f64; 2]; 2]> = space.quadrature_points().into_iter().map(field).collect();
    let comp = |i: usize, j: usize| -> Result<FeFunction> {
        let v: Vec<f64> = values.iter().map(|m| m[i][j]).collect();
        project_broken_quad(space, &v)
    };
    Ok(MatrixFunction {
        components: [[comp(0, 0)?, comp(0, 1)?], [comp(1, 0)?, comp(1, 1)?]],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::DomainTag;
    use std::f64::consts::PI;

    fn spaces(n: usize, r: usize) -> (Arc<FeSpace>, Arc<FeSpace>) {
        let mesh = Arc::new(Mesh::build_structured(DomainTag::UnitSquare, n).unwrap());
        let vh = Arc::new(FeSpace::new(mesh, r, SpaceKind::ContinuousZeroTrace).unwrap());
        let vbar = Arc::new(vh.broken());
        (vh, vbar)
    }

    #[test]
    fn dof_counts() {
        for r in 2..=4 {
            let n = 4;
            let (vh, vbar) = spaces(n, r);
            // interior lattice points of an (rn+1)^2 grid
            assert_eq!(vh.n_dofs(), (r * n - 1) * (r * n - 1));
            assert_eq!(vbar.n_dofs(), 2 * n * n * (r + 1) * (r + 2) / 2);
        }
    }

    #[test]
    fn eval_constant_and_linear() {
        let (_, vbar) = spaces(2, 2);
        let one = vbar.interpolate(|_| 1.0);
        let x = vbar.interpolate(|p| p[0]);
        for cell in 0..vbar.mesh().n_cells() {
            for xi in [[0.1, 0.2], [0.5, 0.5], [0.0, 0.0]] {
                assert!((one.eval(cell, xi).unwrap() - 1.0).abs() < 1e-13);
                let g = x.eval_gradient(cell, xi).unwrap();
                assert!((g[0] - 1.0).abs() < 1e-12 && g[1].abs() < 1e-12);
            }
        }
        assert!(matches!(
            one.eval(0, [0.8, 0.8]),
            Err(FemError::OutsideReference(..))
        ));
    }

    #[test]
    fn vertex_values_match_nodal_coefficients() {
        let (vh, _) = spaces(3, 2);
        let coeffs: Vec<f64> = (0..vh.n_dofs()).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
        let f = FeFunction::new(vh.clone(), coeffs).unwrap();
        for cell in 0..vh.mesh().n_cells() {
            let local = f.local_coefficients(cell);
            for (k, &node) in vh.basis().nodes().iter().enumerate() {
                assert!((f.eval(cell, node).unwrap() - local[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn continuity_across_faces() {
        let (vh, _) = spaces(3, 3);
        let coeffs: Vec<f64> = (0..vh.n_dofs()).map(|i| (i as f64 * 0.37).sin()).collect();
        let f = FeFunction::new(vh.clone(), coeffs).unwrap();
        let mesh = vh.mesh();
        for fid in mesh.interior_face_ids() {
            let g = mesh.face_geometry(*fid, vh.face_rule()).unwrap();
            let face = &mesh.faces()[*fid];
            for &p in &g.points {
                let a = f.eval_unchecked(face.plus, mesh.cell_map(face.plus).to_reference(p));
                let m = face.minus.unwrap();
                let b = f.eval_unchecked(m, mesh.cell_map(m).to_reference(p));
                assert!((a - b).abs() < 1e-12);
            }
        }
        for face in mesh.boundary_faces() {
            let g = mesh
                .face_geometry(mesh.faces().iter().position(|f| std::ptr::eq(f, face)).unwrap(), vh.face_rule())
                .unwrap();
            for &p in &g.points {
                let v = f.eval_unchecked(face.plus, mesh.cell_map(face.plus).to_reference(p));
                assert!(v.abs() < 1e-13);
            }
        }
    }

    #[test]
    fn mass_matrix_properties() {
        let (vh, _) = spaces(2, 2);
        let m = vh.mass_matrix();
        assert_eq!(m.max_asymmetry(), 0.0);
        assert!(LinearSolver::new(m.clone()).is_ok());
        // quadrature-exact: sum of all entries of the broken mass = area
        let (_, vbar) = spaces(2, 3);
        let mb = vbar.mass_matrix();
        let total: f64 = mb.triplets().map(|(_, _, v)| v).sum();
        assert!((total - 1.0).abs() < 1e-13);
        // block diagonal
        let n_loc = vbar.n_local();
        assert!(mb.triplets().all(|(r, c, _)| r / n_loc == c / n_loc));
    }

    #[test]
    fn projection_fixes_members_and_is_contractive() {
        let (vh, _) = spaces(4, 2);
        let proj = L2Projector::new(vh.clone()).unwrap();
        let u = vh.interpolate(|p| (p[0] * (1.0 - p[0]) * p[1] * (1.0 - p[1])) * (3.0 * p[0]).cos());
        let quad = u.values_at_quadrature();
        let pu = proj.project_quad(&quad).unwrap();
        for (a, b) in pu.coefficients().iter().zip(u.coefficients()) {
            assert!((a - b).abs() < 1e-12);
        }
        let f = |p: Point| (7.0 * p[0]).sin() + p[1] * p[1];
        let pf = proj.project(f).unwrap();
        let fl2: f64 = {
            let vals = vh.sample(f);
            let mut s = 0.0;
            for cell in 0..vh.mesh().n_cells() {
                let (_, w) = vh.cell_quadrature(cell);
                for (q, wq) in w.iter().enumerate() {
                    s += wq * vals[cell * vh.n_quad() + q].powi(2);
                }
            }
            s.sqrt()
        };
        assert!(proj.norm(&pf) <= fl2 * (1.0 + 1e-12));
    }

    #[test]
    fn projection_error_decreases_cubically() {
        let f = |p: Point| (PI * p[0]).sin() * (PI * p[1]).sin();
        let mut errs = Vec::new();
        for n in [4, 8, 16] {
            let (vh, _) = spaces(n, 2);
            let pf = project_ph(&vh, f).unwrap();
            let vals = pf.values_at_quadrature();
            let exact = vh.sample(f);
            let mut s = 0.0;
            for cell in 0..vh.mesh().n_cells() {
                let (_, w) = vh.cell_quadrature(cell);
                for (q, wq) in w.iter().enumerate() {
                    let i = cell * vh.n_quad() + q;
                    s += wq * (vals[i] - exact[i]).powi(2);
                }
            }
            errs.push(s.sqrt());
        }
        assert!(errs[0] / errs[1] >= 6.0, "{errs:?}");
        assert!(errs[1] / errs[2] >= 6.0, "{errs:?}");
    }

    #[test]
    fn pbar_reproduces_constants_and_members() {
        let (_, vbar) = spaces(2, 2);
        let c = [[1.5, -0.25], [-0.25, 3.0]];
        let p = project_pbar(&vbar, |_| c).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                for v in p.component(i, j).coefficients() {
                    assert!((v - c[i][j]).abs() < 1e-13);
                }
            }
        }
        let field = |x: Point| [[x[0] * x[1], x[0] * x[0]], [x[1] - 2.0, 1.0 + x[1] * x[1]]];
        let p = project_pbar(&vbar, field).unwrap();
        for cell in 0..vbar.mesh().n_cells() {
            let xi = [0.3, 0.2];
            let x = vbar.mesh().cell_map(cell).to_physical(xi);
            let want = field(x);
            for i in 0..2 {
                for j in 0..2 {
                    let got = p.component(i, j).eval(cell, xi).unwrap();
                    assert!((got - want[i][j]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn interpolation_exact_for_members_and_not_beyond_degree() {
        let (vh, _) = spaces(3, 2);
        let u = |p: Point| p[0] * (1.0 - p[0]) * p[1] * (1.0 - p[1]);
        let iu = vh.interpolate(u);
        for (d, &p) in vh.dof_points().iter().enumerate() {
            assert_eq!(iu.coefficients()[d], u(p));
        }
        // x(1-x) y(1-y) is degree 4 > r = 2: not reproduced between nodes
        let cell = 4;
        let xi = [0.2, 0.3];
        let x = vh.mesh().cell_map(cell).to_physical(xi);
        assert!((iu.eval(cell, xi).unwrap() - u(x)).abs() > 1e-6);
        // and at r = 4 it is
        let (vh4, _) = spaces(3, 4);
        let iu4 = vh4.interpolate(u);
        assert!((iu4.eval(cell, xi).unwrap() - u(x)).abs() < 1e-13);
    }

    #[test]
    fn vtk_and_json_exports() {
        let (vh, _) = spaces(2, 2);
        let f = vh.interpolate(|p| p[0] * p[1] * (1.0 - p[0]) * (1.0 - p[1]));
        let vtk = f.to_vtk("test");
        assert!(vtk.contains("POINTS 9 double"));
        assert!(vtk.contains("CELL_TYPES 8"));
        let j = f.to_json();
        assert_eq!(j["space"]["degree"], 2);
        assert_eq!(j["space"]["kind"], "continuous-zero-trace");
        assert_eq!(j["coefficients"].as_array().unwrap().len(), vh.n_dofs());
    }
}
