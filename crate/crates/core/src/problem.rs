//! Problem files: TOML describing the domain, discretization, controls,
//! an optional exact solution and solver settings.

use std::path::Path;
use std::sync::Arc;

use serde::Deserialize;

use crate::coefficients::{
    search_lambda, Control, ControlSet, ConditionId, Example1Family, LambdaSearch, MatrixField, ScalarField,
    VectorField,
};
use crate::error::{FemError, Result};
use crate::expr::{Expr, Var};
use crate::assembly::{solve_linear_nondiv, LinearSolveReport};
use crate::fe_space::{FeFunction, FeSpace, SpaceKind};
use crate::field::{contract, ExactSolution, Matrix2};
use crate::hjb::{solve_hjb, HjbReport, Method, SolveOptions, DEFAULT_MAX_ITER, DEFAULT_TOL};
use crate::lifting::LiftingOperator;
use crate::norms::{error_report, ConvergenceTable};
use crate::mesh::{DomainTag, Mesh, Point};

pub const DEFAULT_LAMBDA_RANGE: (f64, f64) = (0.01, 100.0);

const BUNDLED: &[(&str, &str)] = &[
    ("poisson-square", include_str!("../problems/poisson-square.toml")),
    ("continuous-A-square", include_str!("../problems/continuous-A-square.toml")),
    ("discontinuous-A-cordes", include_str!("../problems/discontinuous-A-cordes.toml")),
    ("hjb-example1", include_str!("../problems/hjb-example1.toml")),
    ("hjb-dominance", include_str!("../problems/hjb-dominance.toml")),
    ("example1-pi3", include_str!("../problems/example1-pi3.toml")),
];

/// Smooth function given by an expression, differentiated symbolically.
#[derive(Clone, Debug)]
pub struct ExprSolution {
    pub source: String,
    value: Expr,
    gradient: [Expr; 2],
    hessian: [[Expr; 2]; 2],
}

impl ExprSolution {
    pub fn parse(src: &str) -> Result<Self> {
        let value = Expr::parse(src)?;
        let gx = value.diff(Var::X)?;
        let gy = value.diff(Var::Y)?;
        let hessian = [[gx.diff(Var::X)?, gx.diff(Var::Y)?], [gy.diff(Var::X)?, gy.diff(Var::Y)?]];
        Ok(Self {
            source: src.to_string(),
            value,
            gradient: [gx, gy],
            hessian,
        })
    }
}

impl ExactSolution for ExprSolution {
    fn value(&self, x: Point) -> f64 {
        self.value.eval(x)
    }
    fn gradient(&self, x: Point) -> [f64; 2] {
        [self.gradient[0].eval(x), self.gradient[1].eval(x)]
    }
    fn hessian(&self, x: Point) -> Matrix2 {
        std::array::from_fn(|i| std::array::from_fn(|j| self.hessian[i][j].eval(x)))
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Number {
    Value(f64),
    Text(String),
}

#[derive(Deserialize)]
#[serde(untagged)]
enum MatrixSpec {
    Entries(Vec<Number>),
    Text(String),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawProblem {
    name: Option<String>,
    description: Option<String>,
    ellipticity: Option<Number>,
    domain: RawDomain,
    #[serde(default)]
    discretization: RawDiscretization,
    solution: Option<RawSolution>,
    #[serde(default)]
    controls: Vec<RawControl>,
    family: Option<RawFamily>,
    #[serde(default)]
    cordes: RawCordes,
    #[serde(default)]
    hjb: RawHjb,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDomain {
    kind: String,
    n: usize,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawDiscretization {
    degree: Option<usize>,
    levels: Option<usize>,
    p: Option<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSolution {
    u: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawControl {
    label: Option<String>,
    a: MatrixSpec,
    b: Option<Vec<Number>>,
    c: Option<Number>,
    f: Number,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFamily {
    kind: String,
    beta: Number,
    c0: Number,
    controls: usize,
    source: String,
    f: Option<String>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawCordes {
    condition: Option<String>,
    lambda: Option<Number>,
    lambda_range: Option<[Number; 2]>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawHjb {
    lambda: Option<Number>,
    tol: Option<f64>,
    max_iter: Option<usize>,
    method: Option<String>,
}

#[derive(Clone, Debug)]
pub struct CordesSettings {
    pub condition: ConditionId,
    pub lambda: Option<f64>,
    pub lambda_range: (f64, f64),
}

#[derive(Clone, Debug)]
pub struct HjbSettings {
    pub lambda: Option<f64>,
    pub options: SolveOptions,
}

/// A fully resolved problem.
#[derive(Clone, Debug)]
pub struct Problem {
    pub name: String,
    pub description: String,
    pub domain: DomainTag,
    /// Subdivisions of the coarsest mesh; level `k` uses `n · 2^k`.
    pub n: usize,
    pub degree: usize,
    pub levels: usize,
    pub p: f64,
    pub controls: ControlSet,
    pub solution: Option<Arc<ExprSolution>>,
    pub family: Option<Example1Family>,
    pub cordes: CordesSettings,
    pub hjb: HjbSettings,
}

/// Byte offset of `needle` in `text`, if it occurs.
fn locate(text: &str, needle: &str) -> usize {
    text.find(needle).unwrap_or(0)
}

struct Ctx<'a> {
    text: &'a str,
}

impl Ctx<'_> {
    fn fail(&self, src: &str, what: &str, err: FemError) -> FemError {
        let base = locate(self.text, src);
        match err {
            FemError::Parse { offset, message } => FemError::Parse {
                offset: base + offset,
                message: format!("{what}: {message}"),
            },
            other => FemError::Parse {
                offset: base,
                message: format!("{what}: {other}"),
            },
        }
    }

    fn scalar(&self, n: &Number, what: &str) -> Result<ScalarField> {
        match n {
            Number::Value(v) => Ok(ScalarField::Constant(*v)),
            Number::Text(s) => ScalarField::parse(s).map_err(|e| self.fail(s, what, e)),
        }
    }

    fn constant(&self, n: &Number, what: &str) -> Result<f64> {
        match self.scalar(n, what)? {
            ScalarField::Constant(v) => Ok(v),
            ScalarField::Expr(e) if e.is_constant() => Ok(e.eval([0.0, 0.0])),
            _ => Err(FemError::Parse {
                offset: match n {
                    Number::Text(s) => locate(self.text, s),
                    Number::Value(_) => 0,
                },
                message: format!("{what}: expected a constant"),
            }),
        }
    }

    fn matrix(&self, spec: &MatrixSpec, what: &str) -> Result<MatrixField> {
        let entries: Vec<ScalarField> = match spec {
            MatrixSpec::Entries(v) => v
                .iter()
                .map(|e| self.scalar(e, what))
                .collect::<Result<_>>()?,
            MatrixSpec::Text(s) => {
                let rest = s.trim().strip_prefix("const").ok_or_else(|| FemError::Parse {
                    offset: locate(self.text, s),
                    message: format!("{what}: expected 4 entries or \"const a11 a12 a21 a22\""),
                })?;
                rest.split_whitespace()
                    .map(|t| {
                        t.parse::<f64>().map(ScalarField::Constant).map_err(|_| FemError::Parse {
                            offset: locate(self.text, s),
                            message: format!("{what}: bad number '{t}'"),
                        })
                    })
                    .collect::<Result<_>>()?
            }
        };
        let [a11, a12, a21, a22]: [ScalarField; 4] = entries.try_into().map_err(|v: Vec<_>| FemError::Parse {
            offset: 0,
            message: format!("{what}: expected 4 entries, got {}", v.len()),
        })?;
        Ok(MatrixField([[a11, a12], [a21, a22]]))
    }
}

fn manufactured_field(a: MatrixField, b: VectorField, c: ScalarField, u: Arc<ExprSolution>) -> ScalarField {
    ScalarField::from_fn(move |x| {
        // fields read from files never depend on the cell index
        let (am, bv, cv) = (a.eval(0, x), b.eval(0, x), c.eval(0, x));
        let g = u.gradient(x);
        contract(&am, &u.hessian(x)) + bv[0] * g[0] + bv[1] * g[1] + cv * u.value(x)
    })
}

impl Problem {
    pub fn bundled_names() -> Vec<&'static str> {
        BUNDLED.iter().map(|(n, _)| *n).collect()
    }

    pub fn bundled(name: &str) -> Result<Self> {
        let (_, text) = BUNDLED
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| FemError::InvalidArgument(format!("no bundled problem named '{name}'")))?;
        Self::from_toml_str(text)
    }

    /// Reads a file, or a bundled problem when `path` is `bundled:<name>`.
    pub fn load(path: &str) -> Result<Self> {
        if let Some(name) = path.strip_prefix("bundled:") {
            return Self::bundled(name);
        }
        Self::from_path(Path::new(path))
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let raw: RawProblem = toml::from_str(text).map_err(|e| FemError::Parse {
            offset: e.span().map(|s| s.start).unwrap_or(0),
            message: e.message().to_string(),
        })?;
        let ctx = Ctx { text };
        let domain: DomainTag = raw.domain.kind.parse()?;
        let solution = match &raw.solution {
            Some(s) => Some(Arc::new(ExprSolution::parse(&s.u).map_err(|e| ctx.fail(&s.u, "solution.u", e))?)),
            None => None,
        };

        let mut family = None;
        let mut controls = match (&raw.family, raw.controls.is_empty()) {
            (Some(_), false) => {
                return Err(FemError::Problem("give either [[controls]] or [family], not both".into()));
            }
            (None, true) => return Err(FemError::EmptyControlSet),
            (Some(fam), true) => {
                if fam.kind != "example1" {
                    return Err(FemError::Problem(format!("unknown family kind '{}'", fam.kind)));
                }
                let params = Example1Family {
                    beta: ctx.constant(&fam.beta, "family.beta")?,
                    c0: ctx.constant(&fam.c0, "family.c0")?,
                    n_controls: fam.controls,
                };
                if !(0.0..std::f64::consts::FRAC_PI_2).contains(&params.beta) || params.n_controls == 0 {
                    return Err(FemError::Problem("family needs 0 <= beta < pi/2 and at least one control".into()));
                }
                family = Some(params);
                match fam.source.as_str() {
                    "manufactured" => {
                        let u = solution.clone().ok_or_else(|| {
                            FemError::Problem("family source 'manufactured' needs a [solution]".into())
                        })?;
                        params.manufactured(u)?
                    }
                    "expression" => {
                        let src = fam
                            .f
                            .as_deref()
                            .ok_or_else(|| FemError::Problem("family source 'expression' needs f".into()))?;
                        let f = ScalarField::parse(src).map_err(|e| ctx.fail(src, "family.f", e))?;
                        params.controls(|_, _| f.clone())?
                    }
                    other => return Err(FemError::Problem(format!("unknown family source '{other}'"))),
                }
            }
            (None, false) => {
                let mut out = Vec::new();
                for (k, rc) in raw.controls.iter().enumerate() {
                    let label = rc.label.clone().unwrap_or_else(|| format!("control{k}"));
                    let what = |field: &str| format!("controls[{k}].{field}");
                    let a = ctx.matrix(&rc.a, &what("a"))?;
                    let b = match &rc.b {
                        None => VectorField::zero(),
                        Some(v) if v.len() == 2 => VectorField([ctx.scalar(&v[0], &what("b"))?, ctx.scalar(&v[1], &what("b"))?]),
                        Some(v) => {
                            return Err(FemError::Problem(format!("{}: expected 2 entries, got {}", what("b"), v.len())));
                        }
                    };
                    let c = match &rc.c {
                        None => ScalarField::zero(),
                        Some(n) => ctx.scalar(n, &what("c"))?,
                    };
                    let f = match &rc.f {
                        Number::Text(s) if s.trim() == "auto" => {
                            let u = solution
                                .clone()
                                .ok_or_else(|| FemError::Problem(format!("{}: 'auto' needs a [solution]", what("f"))))?;
                            manufactured_field(a.clone(), b.clone(), c.clone(), u)
                        }
                        n => ctx.scalar(n, &what("f"))?,
                    };
                    out.push(Control::new(label, a, f).with_drift(b).with_reaction(c));
                }
                ControlSet::new(out)?
            }
        };
        if let Some(nu) = &raw.ellipticity {
            controls = controls.with_ellipticity(ctx.constant(nu, "ellipticity")?);
        }

        let condition = match &raw.cordes.condition {
            Some(s) => s.parse()?,
            None => ConditionId::FemGeneral,
        };
        let lambda_range = match &raw.cordes.lambda_range {
            Some([lo, hi]) => (ctx.constant(lo, "cordes.lambda_range")?, ctx.constant(hi, "cordes.lambda_range")?),
            None => DEFAULT_LAMBDA_RANGE,
        };
        let cordes = CordesSettings {
            condition,
            lambda: raw.cordes.lambda.as_ref().map(|l| ctx.constant(l, "cordes.lambda")).transpose()?,
            lambda_range,
        };
        let method = match raw.hjb.method.as_deref() {
            None | Some("contraction") => Method::Contraction,
            Some("policy") => Method::Policy,
            Some(other) => return Err(FemError::Problem(format!("unknown hjb.method '{other}'"))),
        };
        let hjb = HjbSettings {
            lambda: raw.hjb.lambda.as_ref().map(|l| ctx.constant(l, "hjb.lambda")).transpose()?,
            options: SolveOptions {
                tol: raw.hjb.tol.unwrap_or(DEFAULT_TOL),
                max_iter: raw.hjb.max_iter.unwrap_or(DEFAULT_MAX_ITER),
                method,
            },
        };

        let problem = Self {
            name: raw.name.unwrap_or_else(|| "unnamed".into()),
            description: raw.description.unwrap_or_default(),
            domain,
            n: raw.domain.n,
            degree: raw.discretization.degree.unwrap_or(2),
            levels: raw.discretization.levels.unwrap_or(1),
            p: raw.discretization.p.unwrap_or(2.0),
            controls,
            solution,
            family,
            cordes,
            hjb,
        };
        problem.check_settings()?;
        problem.validate()?;
        Ok(problem)
    }

    /// Range checks shared by file values and command-line overrides.
    pub fn check_settings(&self) -> Result<()> {
        let bad = |m: String| Err(FemError::InvalidArgument(m));
        if self.n == 0 {
            return bad("domain.n must be positive".into());
        }
        if !(crate::basis::MIN_DEGREE..=crate::basis::MAX_DEGREE).contains(&self.degree) {
            return Err(FemError::UnsupportedDegree(self.degree));
        }
        if self.levels == 0 {
            return bad("levels must be at least 1".into());
        }
        if !(self.p > 1.0) {
            return bad(format!("p must exceed 1, got {}", self.p));
        }
        if !(self.hjb.options.tol > 0.0) {
            return bad(format!("tol must be positive, got {}", self.hjb.options.tol));
        }
        for l in [self.cordes.lambda, self.hjb.lambda].into_iter().flatten() {
            if !(l > 0.0) {
                return Err(FemError::NonPositiveLambda(l));
            }
        }
        let (lo, hi) = self.cordes.lambda_range;
        if !(lo > 0.0 && hi > lo) {
            return bad(format!("lambda range [{lo}, {hi}] must satisfy 0 < lo < hi"));
        }
        Ok(())
    }

    pub fn mesh(&self, level: usize) -> Result<Mesh> {
        Mesh::build_structured(self.domain, self.n << level)
    }

    pub fn space(&self, level: usize) -> Result<Arc<FeSpace>> {
        Ok(Arc::new(FeSpace::new(
            Arc::new(self.mesh(level)?),
            self.degree,
            SpaceKind::ContinuousZeroTrace,
        )?))
    }

    /// Coefficient sample points: the quadrature points of `space`.
    pub fn samples(space: &FeSpace) -> Vec<(usize, Point)> {
        let mut out = Vec::new();
        for cell in 0..space.mesh().n_cells() {
            let (pts, _) = space.cell_quadrature(cell);
            out.extend(pts.into_iter().map(|p| (cell, p)));
        }
        out
    }

    /// Ellipticity, symmetry and sign checks on the coarsest mesh.
    pub fn validate(&self) -> Result<()> {
        let space = self.space(0)?;
        self.controls.validate(&Self::samples(&space))
    }

    pub fn search_lambda(&self, samples: &[(usize, Point)]) -> Result<LambdaSearch> {
        search_lambda(self.cordes.condition, &self.controls, self.cordes.lambda_range, samples, 2)
    }

    /// `λ` for the HJB iteration: pinned value or the Cordès search optimum.
    pub fn hjb_lambda(&self, samples: &[(usize, Point)]) -> Result<f64> {
        match self.hjb.lambda {
            Some(l) => Ok(l),
            None => Ok(self.search_lambda(samples)?.lambda),
        }
    }

    pub fn exact(&self) -> Option<&dyn ExactSolution> {
        self.solution.as_deref().map(|s| s as &dyn ExactSolution)
    }

    /// Linear solve for one control, the HJB iteration otherwise.
    pub fn solve_level(&self, level: usize, lambda: Option<f64>) -> Result<LevelSolution> {
        let space = self.space(level)?;
        let lifting = Arc::new(LiftingOperator::for_space(space.clone())?);
        if self.controls.len() == 1 {
            let sol = solve_linear_nondiv(&lifting, &self.controls.controls()[0], None, self.p)?;
            return Ok(LevelSolution {
                solution: sol.solution,
                linear: Some(sol.report),
                hjb: None,
            });
        }
        let lambda = match lambda {
            Some(l) => l,
            None => self.hjb_lambda(&Self::samples(&space))?,
        };
        let sol = solve_hjb(lifting, &self.controls, lambda, &self.hjb.options, None)?;
        Ok(LevelSolution {
            solution: sol.state.u,
            linear: None,
            hjb: Some(sol.report),
        })
    }

    /// Solves on `levels` successive meshes and tabulates errors and orders.
    pub fn convergence(&self, levels: usize, lambda: Option<f64>) -> Result<ConvergenceTable> {
        let exact = self
            .exact()
            .ok_or_else(|| FemError::Problem(format!("problem '{}' has no [solution]", self.name)))?;
        let mut rows = Vec::with_capacity(levels);
        for level in 0..levels {
            let sol = self.solve_level(level, lambda)?;
            rows.push(error_report(&sol.solution, exact, self.p, level)?);
        }
        ConvergenceTable::new(rows)
    }
}

pub struct LevelSolution {
    pub solution: FeFunction,
    pub linear: Option<LinearSolveReport>,
    pub hjb: Option<HjbReport>,
}
