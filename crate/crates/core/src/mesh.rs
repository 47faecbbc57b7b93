//! Conforming triangulations of polygonal domains.
//!
//! Cells are numbered lexicographically by centroid. For an interior face the
//! neighbour with the larger index is `K+`, the other `K-`, and the stored
//! normal points out of `K+` (towards the smaller-index cell). Jumps are
//! `v+ - v-`; on boundary faces the only neighbour is `K+` and the normal is
//! the outward domain normal.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{FemError, Result};
use crate::quadrature::GaussRule;

pub type Point = [f64; 2];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum DomainTag {
    UnitSquare,
    LShape,
    CustomPolygon,
}

impl std::str::FromStr for DomainTag {
    type Err = FemError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unit-square" => Ok(Self::UnitSquare),
            "l-shape" => Ok(Self::LShape),
            "custom-polygon" => Ok(Self::CustomPolygon),
            other => Err(FemError::InvalidArgument(format!(
                "unknown domain tag '{other}' (expected unit-square, l-shape or custom-polygon)"
            ))),
        }
    }
}

/// Affine map `x = origin + J * xi` from the reference triangle.
#[derive(Clone, Copy, Debug)]
pub struct AffineMap {
    pub origin: Point,
    pub jacobian: [[f64; 2]; 2],
    pub inverse: [[f64; 2]; 2],
    pub det: f64,
}

impl AffineMap {
    fn new(a: Point, b: Point, c: Point) -> Self {
        let j = [[b[0] - a[0], c[0] - a[0]], [b[1] - a[1], c[1] - a[1]]];
        let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
        let inverse = [
            [j[1][1] / det, -j[0][1] / det],
            [-j[1][0] / det, j[0][0] / det],
        ];
        Self {
            origin: a,
            jacobian: j,
            inverse,
            det,
        }
    }

    pub fn to_physical(&self, xi: Point) -> Point {
        let j = &self.jacobian;
        [
            self.origin[0] + j[0][0] * xi[0] + j[0][1] * xi[1],
            self.origin[1] + j[1][0] * xi[0] + j[1][1] * xi[1],
        ]
    }

    pub fn to_reference(&self, x: Point) -> Point {
        let d = [x[0] - self.origin[0], x[1] - self.origin[1]];
        let g = &self.inverse;
        [g[0][0] * d[0] + g[0][1] * d[1], g[1][0] * d[0] + g[1][1] * d[1]]
    }

    /// Physical gradient from a reference gradient: `J^{-T} g`.
    pub fn push_gradient(&self, g: [f64; 2]) -> [f64; 2] {
        let inv = &self.inverse;
        [
            inv[0][0] * g[0] + inv[1][0] * g[1],
            inv[0][1] * g[0] + inv[1][1] * g[1],
        ]
    }

    /// Physical Hessian from a reference Hessian: `J^{-T} H J^{-1}`.
    pub fn push_hessian(&self, h: [[f64; 2]; 2]) -> [[f64; 2]; 2] {
        let g = &self.inverse;
        let mut out = [[0.0; 2]; 2];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                let mut s = 0.0;
                for a in 0..2 {
                    for b in 0..2 {
                        s += g[a][i] * h[a][b] * g[b][j];
                    }
                }
                *v = s;
            }
        }
        out
    }

    pub fn area(&self) -> f64 {
        0.5 * self.det.abs()
    }
}

#[derive(Clone, Debug)]
pub struct Face {
    /// Endpoints, smaller global vertex index first. Face quadrature uses the
    /// parameterisation `x(t) = v[0] + t (v[1] - v[0])` from both sides.
    pub vertices: [usize; 2],
    pub plus: usize,
    pub minus: Option<usize>,
    pub normal: Point,
    pub length: f64,
}

impl Face {
    pub fn is_boundary(&self) -> bool {
        self.minus.is_none()
    }
}

/// Geometry of a face together with physical quadrature nodes and weights
/// (weights already scaled by the face length).
#[derive(Clone, Debug)]
pub struct FaceGeometry {
    pub normal: Point,
    pub length: f64,
    pub points: Vec<Point>,
    pub weights: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Mesh {
    vertices: Vec<Point>,
    cells: Vec<[usize; 3]>,
    faces: Vec<Face>,
    interior: Vec<usize>,
    boundary: Vec<usize>,
    cell_faces: Vec<[usize; 3]>,
    maps: Vec<AffineMap>,
    boundary_vertex: Vec<bool>,
    centroids: Vec<Point>,
    h_max: f64,
    domain: DomainTag,
}

impl Mesh {
    /// Structured triangulation with `n` subdivisions per unit edge, each
    /// square split along its (0,0)-(1,1) diagonal.
    pub fn build_structured(domain: DomainTag, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(FemError::InvalidArgument("n must be at least 1".into()));
        }
        let keep: Box<dyn Fn(usize, usize) -> bool> = match domain {
            DomainTag::UnitSquare => Box::new(|_, _| true),
            DomainTag::LShape => {
                if n % 2 != 0 {
                    return Err(FemError::OddLShape(n));
                }
                let half = n / 2;
                Box::new(move |i, j| !(i >= half && j >= half))
            }
            DomainTag::CustomPolygon => {
                return Err(FemError::InvalidArgument(
                    "custom polygons are imported, not generated".into(),
                ))
            }
        };
        let h = 1.0 / n as f64;
        let grid = |i: usize, j: usize| j * (n + 1) + i;
        let mut used = vec![usize::MAX; (n + 1) * (n + 1)];
        let mut vertices = Vec::new();
        let mut cells = Vec::new();
        let mut id = |i: usize, j: usize, vertices: &mut Vec<Point>| {
            let g = grid(i, j);
            if used[g] == usize::MAX {
                used[g] = vertices.len();
                vertices.push([i as f64 * h, j as f64 * h]);
            }
            used[g]
        };
        for j in 0..n {
            for i in 0..n {
                if !keep(i, j) {
                    continue;
                }
                let v00 = id(i, j, &mut vertices);
                let v10 = id(i + 1, j, &mut vertices);
                let v11 = id(i + 1, j + 1, &mut vertices);
                let v01 = id(i, j + 1, &mut vertices);
                cells.push([v00, v10, v11]);
                cells.push([v00, v11, v01]);
            }
        }
        Self::from_parts(vertices, cells, domain)
    }

    /// Builds a mesh from raw vertices and cells: orients cells
    /// counter-clockwise, renumbers them by centroid and derives faces.
    pub fn from_parts(
        vertices: Vec<Point>,
        mut cells: Vec<[usize; 3]>,
        domain: DomainTag,
    ) -> Result<Self> {
        if cells.is_empty() {
            return Err(FemError::InvalidMesh("no cells".into()));
        }
        for (k, c) in cells.iter_mut().enumerate() {
            if c.iter().any(|&v| v >= vertices.len()) {
                return Err(FemError::InvalidMesh(format!(
                    "cell {k} references a missing vertex"
                )));
            }
            if c[0] == c[1] || c[1] == c[2] || c[0] == c[2] {
                return Err(FemError::InvalidMesh(format!("cell {k} repeats a vertex")));
            }
            let m = AffineMap::new(vertices[c[0]], vertices[c[1]], vertices[c[2]]);
            let scale = edge_lengths(&vertices, c)
                .iter()
                .fold(0.0f64, |a, &b| a.max(b));
            if m.det.abs() <= 1e-14 * scale * scale {
                return Err(FemError::InvalidMesh(format!("cell {k} has zero area")));
            }
            if m.det < 0.0 {
                c.swap(1, 2);
            }
        }

        let centroid = |c: &[usize; 3]| -> Point {
            let mut p = [0.0; 2];
            for &v in c {
                p[0] += vertices[v][0] / 3.0;
                p[1] += vertices[v][1] / 3.0;
            }
            p
        };
        cells.sort_by(|a, b| {
            let (pa, pb) = (centroid(a), centroid(b));
            pa[0]
                .total_cmp(&pb[0])
                .then(pa[1].total_cmp(&pb[1]))
                .then(a.cmp(b))
        });

        let maps: Vec<AffineMap> = cells
            .iter()
            .map(|c| AffineMap::new(vertices[c[0]], vertices[c[1]], vertices[c[2]]))
            .collect();
        let centroids: Vec<Point> = cells.iter().map(centroid).collect();

        // local edge e is opposite local vertex e
        let mut edges: BTreeMap<(usize, usize), Vec<(usize, usize)>> = BTreeMap::new();
        for (k, c) in cells.iter().enumerate() {
            for e in 0..3 {
                let (a, b) = (c[(e + 1) % 3], c[(e + 2) % 3]);
                edges.entry((a.min(b), a.max(b))).or_default().push((k, e));
            }
        }

        let mut faces = Vec::with_capacity(edges.len());
        let mut interior = Vec::new();
        let mut boundary = Vec::new();
        let mut cell_faces = vec![[usize::MAX; 3]; cells.len()];
        let mut boundary_vertex = vec![false; vertices.len()];
        for (&(a, b), owners) in &edges {
            let (pa, pb) = (vertices[a], vertices[b]);
            let t = [pb[0] - pa[0], pb[1] - pa[1]];
            let length = (t[0] * t[0] + t[1] * t[1]).sqrt();
            let mut normal = [t[1] / length, -t[0] / length];
            let id = faces.len();
            let face = match owners.as_slice() {
                [(k, _)] => {
                    let mid = [0.5 * (pa[0] + pb[0]), 0.5 * (pa[1] + pb[1])];
                    let to_mid = [mid[0] - centroids[*k][0], mid[1] - centroids[*k][1]];
                    if normal[0] * to_mid[0] + normal[1] * to_mid[1] < 0.0 {
                        normal = [-normal[0], -normal[1]];
                    }
                    boundary.push(id);
                    boundary_vertex[a] = true;
                    boundary_vertex[b] = true;
                    Face {
                        vertices: [a, b],
                        plus: *k,
                        minus: None,
                        normal,
                        length,
                    }
                }
                [(k1, _), (k2, _)] => {
                    let (plus, minus) = ((*k1).max(*k2), (*k1).min(*k2));
                    let d = [
                        centroids[minus][0] - centroids[plus][0],
                        centroids[minus][1] - centroids[plus][1],
                    ];
                    if normal[0] * d[0] + normal[1] * d[1] < 0.0 {
                        normal = [-normal[0], -normal[1]];
                    }
                    interior.push(id);
                    Face {
                        vertices: [a, b],
                        plus,
                        minus: Some(minus),
                        normal,
                        length,
                    }
                }
                _ => {
                    return Err(FemError::InvalidMesh(format!(
                        "edge ({a}, {b}) is shared by {} cells",
                        owners.len()
                    )))
                }
            };
            for &(k, e) in owners {
                cell_faces[k][e] = id;
            }
            faces.push(face);
        }

        check_no_hanging_vertices(&vertices, &faces, &boundary)?;

        let h_max = cells
            .iter()
            .flat_map(|c| edge_lengths(&vertices, c))
            .fold(0.0f64, f64::max);

        Ok(Self {
            vertices,
            cells,
            faces,
            interior,
            boundary,
            cell_faces,
            maps,
            boundary_vertex,
            centroids,
            h_max,
            domain,
        })
    }

    /// Splits every triangle into four congruent children through the edge
    /// midpoints; cell numbering is re-derived from the new centroids.
    pub fn refine_uniform(&self) -> Self {
        let mut vertices = self.vertices.clone();
        let mut mids: HashMap<(usize, usize), usize> = HashMap::new();
        let mut midpoint = |a: usize, b: usize, vertices: &mut Vec<Point>| {
            *mids.entry((a.min(b), a.max(b))).or_insert_with(|| {
                let (pa, pb) = (vertices[a], vertices[b]);
                vertices.push([0.5 * (pa[0] + pb[0]), 0.5 * (pa[1] + pb[1])]);
                vertices.len() - 1
            })
        };
        let mut cells = Vec::with_capacity(4 * self.cells.len());
        for &[v0, v1, v2] in &self.cells {
            let m0 = midpoint(v1, v2, &mut vertices);
            let m1 = midpoint(v2, v0, &mut vertices);
            let m2 = midpoint(v0, v1, &mut vertices);
            cells.push([v0, m2, m1]);
            cells.push([v1, m0, m2]);
            cells.push([v2, m1, m0]);
            cells.push([m0, m1, m2]);
        }
        Self::from_parts(vertices, cells, self.domain)
            .expect("refinement of a valid mesh is valid")
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn cells(&self) -> &[[usize; 3]] {
        &self.cells
    }

    pub fn n_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn faces(&self) -> &[Face] {
        &self.faces
    }

    pub fn face(&self, id: usize) -> Result<&Face> {
        self.faces.get(id).ok_or(FemError::FaceLookup(id))
    }

    pub fn interior_faces(&self) -> impl Iterator<Item = &Face> + '_ {
        self.interior.iter().map(move |&i| &self.faces[i])
    }

    pub fn boundary_faces(&self) -> impl Iterator<Item = &Face> + '_ {
        self.boundary.iter().map(move |&i| &self.faces[i])
    }

    pub fn interior_face_ids(&self) -> &[usize] {
        &self.interior
    }

    pub fn boundary_face_ids(&self) -> &[usize] {
        &self.boundary
    }

    /// Face ids of a cell, indexed by the opposite local vertex.
    pub fn cell_faces(&self, cell: usize) -> [usize; 3] {
        self.cell_faces[cell]
    }

    pub fn cell_map(&self, cell: usize) -> &AffineMap {
        &self.maps[cell]
    }

    pub fn is_boundary_vertex(&self, v: usize) -> bool {
        self.boundary_vertex[v]
    }

    pub fn h_max(&self) -> f64 {
        self.h_max
    }

    pub fn domain(&self) -> DomainTag {
        self.domain
    }

    /// Vertex average; the key cells are numbered by.
    pub fn centroid(&self, cell: usize) -> Point {
        self.centroids[cell]
    }

    pub fn area(&self) -> f64 {
        self.maps.iter().map(AffineMap::area).sum()
    }

    pub fn boundary_length(&self) -> f64 {
        self.boundary_faces().map(|f| f.length).sum()
    }

    /// Largest cell diameter over smallest inradius.
    pub fn quasi_uniformity(&self) -> f64 {
        let min_inradius = self
            .cells
            .iter()
            .zip(&self.maps)
            .map(|(c, m)| {
                let perimeter: f64 = edge_lengths(&self.vertices, c).iter().sum();
                2.0 * m.area() / perimeter
            })
            .fold(f64::INFINITY, f64::min);
        self.h_max / min_inradius
    }

    /// `cells + vertices - edges`; equals 1 for simply connected domains.
    pub fn euler_characteristic(&self) -> i64 {
        self.cells.len() as i64 + self.vertices.len() as i64 - self.faces.len() as i64
    }

    /// Unit normal, length and physical quadrature nodes of a face, sampled
    /// along the shared parameterisation.
    pub fn face_geometry(&self, face_id: usize, rule: &GaussRule) -> Result<FaceGeometry> {
        let face = self.face(face_id)?;
        let (a, b) = (self.vertices[face.vertices[0]], self.vertices[face.vertices[1]]);
        let points = rule
            .points
            .iter()
            .map(|&t| [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])])
            .collect();
        let weights = rule.weights.iter().map(|w| w * face.length).collect();
        Ok(FaceGeometry {
            normal: face.normal,
            length: face.length,
            points,
            weights,
        })
    }

    /// Reference coordinates, in `cell`, of the points `a + t(b - a)` of a
    /// face of that cell. Computed from the reference vertices, so they carry
    /// no physical-to-reference rounding.
    pub fn face_reference_points(&self, face_id: usize, cell: usize, rule: &GaussRule) -> Result<Vec<Point>> {
        const CORNERS: [Point; 3] = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
        let face = self.face(face_id)?;
        let local = |v: usize| {
            self.cells[cell]
                .iter()
                .position(|&w| w == v)
                .ok_or(FemError::FaceLookup(face_id))
        };
        let (a, b) = (CORNERS[local(face.vertices[0])?], CORNERS[local(face.vertices[1])?]);
        Ok(rule
            .points
            .iter()
            .map(|&t| [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])])
            .collect())
    }

    /// Line-oriented text export: `mesh 2 nv nc`, `v x y`, `c i j k`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "mesh 2 {} {}", self.vertices.len(), self.cells.len());
        for v in &self.vertices {
            let _ = writeln!(s, "v {:.16e} {:.16e}", v[0], v[1]);
        }
        for c in &self.cells {
            let _ = writeln!(s, "c {} {} {}", c[0], c[1], c[2]);
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        let err = |line: usize, message: &str| FemError::MeshParse {
            line,
            message: message.to_string(),
        };
        let (hl, header) = lines.next().ok_or_else(|| err(1, "empty input"))?;
        let h: Vec<&str> = header.split_whitespace().collect();
        if h.len() != 4 || h[0] != "mesh" || h[1] != "2" {
            return Err(err(hl, "expected header 'mesh 2 <nv> <nc>'"));
        }
        let nv: usize = h[2].parse().map_err(|_| err(hl, "bad vertex count"))?;
        let nc: usize = h[3].parse().map_err(|_| err(hl, "bad cell count"))?;
        let mut vertices = Vec::with_capacity(nv);
        let mut cells = Vec::with_capacity(nc);
        for (ln, line) in lines {
            let t: Vec<&str> = line.split_whitespace().collect();
            match t.first().copied() {
                Some("v") if t.len() == 3 => {
                    let x = t[1].parse().map_err(|_| err(ln, "bad coordinate"))?;
                    let y = t[2].parse().map_err(|_| err(ln, "bad coordinate"))?;
                    vertices.push([x, y]);
                }
                Some("c") if t.len() == 4 => {
                    let mut c = [0usize; 3];
                    for (slot, tok) in c.iter_mut().zip(&t[1..]) {
                        *slot = tok.parse().map_err(|_| err(ln, "bad vertex index"))?;
                    }
                    cells.push(c);
                }
                _ => return Err(err(ln, "expected 'v x y' or 'c i j k'")),
            }
        }
        if vertices.len() != nv || cells.len() != nc {
            return Err(err(
                hl,
                &format!(
                    "header announces {nv} vertices and {nc} cells, found {} and {}",
                    vertices.len(),
                    cells.len()
                ),
            ));
        }
        Self::from_parts(vertices, cells, DomainTag::CustomPolygon)
    }
}

fn edge_lengths(vertices: &[Point], c: &[usize; 3]) -> [f64; 3] {
    let d = |a: usize, b: usize| {
        let (p, q) = (vertices[a], vertices[b]);
        ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt()
    };
    [d(c[1], c[2]), d(c[2], c[0]), d(c[0], c[1])]
}

/// A vertex lying in the relative interior of a boundary edge signals a
/// hanging node.
fn check_no_hanging_vertices(vertices: &[Point], faces: &[Face], boundary: &[usize]) -> Result<()> {
    let mut bverts: Vec<usize> = boundary
        .iter()
        .flat_map(|&f| faces[f].vertices)
        .collect();
    bverts.sort_unstable();
    bverts.dedup();
    for &f in boundary {
        let [a, b] = faces[f].vertices;
        let (pa, pb) = (vertices[a], vertices[b]);
        let t = [pb[0] - pa[0], pb[1] - pa[1]];
        let len2 = t[0] * t[0] + t[1] * t[1];
        for &v in &bverts {
            if v == a || v == b {
                continue;
            }
            let p = vertices[v];
            let d = [p[0] - pa[0], p[1] - pa[1]];
            let s = (d[0] * t[0] + d[1] * t[1]) / len2;
            let cross = d[0] * t[1] - d[1] * t[0];
            if s > 1e-12 && s < 1.0 - 1e-12 && cross.abs() <= 1e-12 * len2 {
                return Err(FemError::InvalidMesh(format!(
                    "hanging vertex {v} on edge ({a}, {b})"
                )));
            }
        }
    }
    Ok(())
}
