//! Broken Sobolev norms, the discrete dual norm at p = 2, error reports and
//! convergence tables.

use std::fmt::Write as _;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{FemError, Result};
use crate::fe_space::{project_pbar, FeFunction, FeSpace, L2Projector};
use crate::field::{frobenius, BrokenField, BrokenH2Field, Difference, ExactSolution, Smooth};
use crate::report::{format_float, format_opt};

fn check_p(p: f64) -> Result<()> {
    if !(p > 1.0) || !p.is_finite() {
        return Err(FemError::InvalidArgument(format!("p must lie in (1, ∞), got {p}")));
    }
    Ok(())
}

/// Sum of `Σ_q w f(cell, x_q)` over all cells, in cell order.
fn integrate<F: Fn(usize, [f64; 2]) -> f64>(space: &FeSpace, f: F) -> f64 {
    let mut total = 0.0;
    for cell in 0..space.mesh().n_cells() {
        let (pts, wts) = space.cell_quadrature(cell);
        for (x, w) in pts.into_iter().zip(wts) {
            total += w * f(cell, x);
        }
    }
    total
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct W2phNorm {
    /// `‖D²_h v‖_{L^p}`.
    pub volume: f64,
    /// `(Σ_F h_F^{1-p} ‖[∇v]‖^p_{L^p(F)})^{1/p}` over interior faces.
    pub jump: f64,
    pub total: f64,
}

/// Broken `W^{2,p}_h` norm with quadrature from `space`.
pub fn w2ph_norm(space: &FeSpace, v: &dyn BrokenH2Field, p: f64) -> Result<W2phNorm> {
    check_p(p)?;
    let volume = integrate(space, |cell, x| frobenius(&v.hessian(cell, x)).powf(p)).powf(1.0 / p);
    let mesh = space.mesh();
    let mut jump_sum = 0.0;
    for &fid in mesh.interior_face_ids() {
        let face = &mesh.faces()[fid];
        let minus = face.minus.expect("interior face");
        let geo = mesh.face_geometry(fid, space.face_rule())?;
        let mut s = 0.0;
        for (&x, &w) in geo.points.iter().zip(&geo.weights) {
            let (gp, gm) = (v.gradient(face.plus, x), v.gradient(minus, x));
            let j = ((gp[0] - gm[0]).powi(2) + (gp[1] - gm[1]).powi(2)).sqrt();
            s += w * j.powf(p);
        }
        jump_sum += face.length.powf(1.0 - p) * s;
    }
    let jump = jump_sum.powf(1.0 / p);
    Ok(W2phNorm {
        volume,
        jump,
        total: volume + jump,
    })
}

pub fn lp_norm(space: &FeSpace, v: &dyn BrokenField, p: f64) -> Result<f64> {
    check_p(p)?;
    Ok(integrate(space, |cell, x| v.value(cell, x).abs().powf(p)).powf(1.0 / p))
}

/// `‖∇_h v‖_{L^p}` with the Euclidean norm of the gradient.
pub fn w1p_seminorm(space: &FeSpace, v: &dyn BrokenField, p: f64) -> Result<f64> {
    check_p(p)?;
    Ok(integrate(space, |cell, x| {
        let g = v.gradient(cell, x);
        (g[0] * g[0] + g[1] * g[1]).sqrt().powf(p)
    })
    .powf(1.0 / p))
}

/// `(‖v‖²_{W^{2,2}_h} + 2λ‖∇v‖² + λ²‖v‖²)^{1/2}`.
pub fn w22h_lambda_norm(v: &FeFunction, lambda: f64) -> Result<f64> {
    let space = v.space();
    let w2 = w2ph_norm(space, v, 2.0)?.total;
    let g = w1p_seminorm(space, v, 2.0)?;
    let l2 = lp_norm(space, v, 2.0)?;
    Ok((w2 * w2 + 2.0 * lambda * g * g + lambda * lambda * l2 * l2).sqrt())
}

/// `λ`-weighted H¹ norm `(‖∇v‖² + λ‖v‖²)^{1/2}`.
pub fn h1_lambda_norm(v: &FeFunction, lambda: f64) -> Result<f64> {
    let g = w1p_seminorm(v.space(), v, 2.0)?;
    let l2 = lp_norm(v.space(), v, 2.0)?;
    Ok((g * g + lambda * l2 * l2).sqrt())
}

/// The mesh-dependent dual norm `‖w‖_{L^p_h}`, available for p = 2 only,
/// where it equals `‖P_h w‖_{L²}`. `values` are samples of `w` at the
/// quadrature points of the projector's space.
pub fn lph_dual_norm(projector: &L2Projector, values: &[f64], p: f64) -> Result<f64> {
    if p != 2.0 {
        return Err(FemError::UnsupportedExponent(p));
    }
    let pw = projector.project_quad(values)?;
    Ok(projector.norm(&pw))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub p: f64,
    pub level: usize,
    pub h: f64,
    pub n_cells: usize,
    pub n_dofs: usize,
    pub lp: f64,
    pub w1p: f64,
    pub w2ph_volume: f64,
    pub w2ph_jump: f64,
    pub w2ph: f64,
    /// `‖u - I_h u‖_{W^{2,p}_h}`.
    pub interpolation_w2ph: f64,
    /// `‖P̄_h D²u - D²u‖_{L^p}`.
    pub hessian_projection: f64,
}

/// Errors of `u_h` against an exact solution with analytic derivatives.
pub fn error_report(
    u_h: &FeFunction,
    exact: &dyn ExactSolution,
    p: f64,
    level: usize,
) -> Result<ErrorReport> {
    check_p(p)?;
    let space = u_h.space();
    let smooth = Smooth(exact);
    let e = Difference(&smooth, u_h);
    let w2 = w2ph_norm(space, &e, p)?;
    let ih = space.interpolate(|x| exact.value(x));
    let interp = w2ph_norm(space, &Difference(&smooth, &ih), p)?.total;

    let vbar = Arc::new(space.broken());
    let proj = project_pbar(&vbar, |x| exact.hessian(x))?;
    let comps: Vec<Vec<f64>> = (0..4)
        .map(|k| proj.component(k / 2, k % 2).values_at_quadrature())
        .collect();
    let pts = space.quadrature_points();
    let nq = space.n_quad();
    let mut acc = 0.0;
    for cell in 0..space.mesh().n_cells() {
        let (_, wts) = space.cell_quadrature(cell);
        for (q, w) in wts.into_iter().enumerate() {
            let i = cell * nq + q;
            let h = exact.hessian(pts[i]);
            let d = [
                [comps[0][i] - h[0][0], comps[1][i] - h[0][1]],
                [comps[2][i] - h[1][0], comps[3][i] - h[1][1]],
            ];
            acc += w * frobenius(&d).powf(p);
        }
    }
    let mesh = space.mesh();
    Ok(ErrorReport {
        p,
        level,
        h: mesh.h_max(),
        n_cells: mesh.n_cells(),
        n_dofs: space.n_dofs(),
        lp: lp_norm(space, &e, p)?,
        w1p: w1p_seminorm(space, &e, p)?,
        w2ph_volume: w2.volume,
        w2ph_jump: w2.jump,
        w2ph: w2.total,
        interpolation_w2ph: interp,
        hessian_projection: acc.powf(1.0 / p),
    })
}

/// `EOC_k = log(e_k / e_{k+1}) / log(h_k / h_{k+1})`; `None` where an error
/// is not positive.
pub fn estimate_order(errors: &[f64], h: &[f64]) -> Result<Vec<Option<f64>>> {
    if errors.len() != h.len() || errors.len() < 2 {
        return Err(FemError::InvalidArgument(
            "need at least two levels with matching errors and mesh sizes".into(),
        ));
    }
    Ok(errors
        .windows(2)
        .zip(h.windows(2))
        .map(|(e, h)| {
            (e[0] > 0.0 && e[1] > 0.0 && h[0] != h[1])
                .then(|| (e[0] / e[1]).ln() / (h[0] / h[1]).ln())
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceTable {
    pub rows: Vec<ErrorReport>,
    pub eoc_lp: Vec<Option<f64>>,
    pub eoc_w1p: Vec<Option<f64>>,
    pub eoc_w2ph: Vec<Option<f64>>,
}

impl ConvergenceTable {
    pub fn new(rows: Vec<ErrorReport>) -> Result<Self> {
        let h: Vec<f64> = rows.iter().map(|r| r.h).collect();
        let col = |f: fn(&ErrorReport) -> f64| -> Result<Vec<Option<f64>>> {
            if rows.len() < 2 {
                return Ok(vec![]);
            }
            estimate_order(&rows.iter().map(f).collect::<Vec<_>>(), &h)
        };
        Ok(Self {
            eoc_lp: col(|r| r.lp)?,
            eoc_w1p: col(|r| r.w1p)?,
            eoc_w2ph: col(|r| r.w2ph)?,
            rows,
        })
    }

    pub fn final_w2ph_order(&self) -> Option<f64> {
        self.eoc_w2ph.last().copied().flatten()
    }

    /// One row per level; EOC columns are empty on the first level.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "level,h,n_dofs,lp,w1p,w2ph_volume,w2ph_jump,w2ph,interpolation_w2ph,hessian_projection,eoc_lp,eoc_w1p,eoc_w2ph\n",
        );
        for (k, r) in self.rows.iter().enumerate() {
            let eoc = |v: &[Option<f64>]| if k == 0 { String::new() } else { format_opt(v[k - 1]) };
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.level,
                format_float(r.h),
                r.n_dofs,
                format_float(r.lp),
                format_float(r.w1p),
                format_float(r.w2ph_volume),
                format_float(r.w2ph_jump),
                format_float(r.w2ph),
                format_float(r.interpolation_w2ph),
                format_float(r.hessian_projection),
                eoc(&self.eoc_lp),
                eoc(&self.eoc_w1p),
                eoc(&self.eoc_w2ph),
            );
        }
        s
    }
}
