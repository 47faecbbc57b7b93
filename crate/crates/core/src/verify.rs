//! Invariant suite: identities and audits the discretization must satisfy,
//! each reported as a measured value against a tolerance.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assembly::{solve_linear_nondiv, QuadCoefficients, QuadState};
use crate::coefficients::{
    check_cordes, example1_matrix, Control, ControlSet, ConditionId, MatrixField, ScalarField,
};
use crate::error::Result;
use crate::fe_space::{FeFunction, FeSpace, L2Projector, SpaceKind};
use crate::field::{contract, GradientComponent, Matrix2};
use crate::hjb::{solve_hjb, HjbSolver, Method, SolveOptions};
use crate::lifting::{lift_partial, lift_partial_equivalent, LiftingOperator};
use crate::mesh::{DomainTag, Mesh};
use crate::norms::{w22h_lambda_norm, w2ph_norm};
use crate::problem::Problem;

pub const DEFAULT_SEED: u64 = 42;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// Worst measured quantity; compared against `tolerance`.
    pub measured: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl CheckResult {
    fn at_most(name: &str, measured: f64, tolerance: f64, detail: String) -> Self {
        Self {
            name: name.to_string(),
            passed: measured <= tolerance,
            measured,
            tolerance,
            detail,
        }
    }

    pub fn line(&self) -> String {
        format!(
            "[{}] {}: measured {:.3e} (tolerance {:.1e}) {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.measured,
            self.tolerance,
            self.detail
        )
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub checks: Vec<CheckResult>,
    pub all_passed: bool,
}

fn unit_square_space(n: usize, degree: usize) -> Result<Arc<FeSpace>> {
    let mesh = Arc::new(Mesh::build_structured(DomainTag::UnitSquare, n)?);
    Ok(Arc::new(FeSpace::new(mesh, degree, SpaceKind::ContinuousZeroTrace)?))
}

pub fn random_function(space: &Arc<FeSpace>, rng: &mut ChaCha8Rng) -> FeFunction {
    let c = (0..space.n_dofs()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    FeFunction::new(space.clone(), c).expect("length matches")
}

/// `Σ_q w_q f_q g_q` over the quadrature of `space`.
pub fn quad_inner(space: &FeSpace, f: &[f64], g: &[f64]) -> f64 {
    let nq = space.n_quad();
    (0..space.mesh().n_cells())
        .map(|cell| {
            let (_, w) = space.cell_quadrature(cell);
            (0..nq).map(|q| w[q] * f[cell * nq + q] * g[cell * nq + q]).sum::<f64>()
        })
        .sum()
}

pub const KEYSTONE_MATRICES: [Matrix2; 3] = [[[1.0, 0.0], [0.0, 1.0]], [[1.0, 0.0], [0.0, 2.0]], [[2.0, 0.5], [0.5, 1.0]]];

/// `|∫(A0:H(w))v + (A0∇w,∇v)| / (1 + |both terms|)`, worst over the sweep.
pub fn keystone_check(ns: &[usize], degrees: &[usize], pairs: usize, rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let mut worst = 0.0f64;
    for &n in ns {
        for &r in degrees {
            let space = unit_square_space(n, r)?;
            let op = LiftingOperator::for_space(space.clone())?;
            for _ in 0..pairs {
                let (w, v) = (random_function(&space, rng), random_function(&space, rng));
                let hess = op.hessian_at_quadrature(w.coefficients());
                let vq = v.values_at_quadrature();
                let (gw, gv) = (w.gradients_at_quadrature(), v.gradients_at_quadrature());
                for a0 in &KEYSTONE_MATRICES {
                    let ah: Vec<f64> = hess.iter().map(|h| contract(a0, h)).collect();
                    let lhs = quad_inner(&space, &ah, &vq);
                    let agw: Vec<f64> = gw
                        .iter()
                        .zip(&gv)
                        .map(|(a, b)| {
                            (a0[0][0] * a[0] + a0[0][1] * a[1]) * b[0] + (a0[1][0] * a[0] + a0[1][1] * a[1]) * b[1]
                        })
                        .collect();
                    let ones = vec![1.0; agw.len()];
                    let rhs = quad_inner(&space, &agw, &ones);
                    worst = worst.max((lhs + rhs).abs() / (1.0 + lhs.abs() + rhs.abs()));
                }
            }
        }
    }
    Ok(CheckResult::at_most(
        "lifting keystone identity",
        worst,
        1e-10,
        format!("n in {ns:?}, r in {degrees:?}, {pairs} pairs, 3 matrices"),
    ))
}

/// Max-norm difference between the face-average and jump forms of the
/// discrete Hessian of random functions.
pub fn two_form_check(ns: &[usize], degrees: &[usize], samples: usize, rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let mut worst = 0.0f64;
    for &n in ns {
        for &r in degrees {
            let space = unit_square_space(n, r)?;
            let vbar = Arc::new(space.broken());
            for _ in 0..samples {
                let w = random_function(&space, rng);
                for i in 0..2 {
                    let g = GradientComponent { function: &w, axis: i };
                    for j in 0..2 {
                        let face = lift_partial(&vbar, &g, j)?;
                        let jump = lift_partial_equivalent(&vbar, &g, j)?;
                        for (a, b) in face.coefficients().iter().zip(jump.coefficients()) {
                            worst = worst.max((a - b).abs());
                        }
                    }
                }
            }
        }
    }
    Ok(CheckResult::at_most(
        "two-form equivalence",
        worst,
        1e-10,
        format!("n in {ns:?}, r in {degrees:?}, {samples} functions"),
    ))
}

/// `max (‖P_h f‖ / ‖f‖ - 1)` over random quadrature-point fields.
pub fn projection_check(ns: &[usize], fields: usize, rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let mut worst = f64::NEG_INFINITY;
    for &n in ns {
        let space = unit_square_space(n, 2)?;
        let proj = L2Projector::new(space.clone())?;
        let nq = space.n_quad() * space.mesh().n_cells();
        for _ in 0..fields {
            let f: Vec<f64> = (0..nq).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let norm_f = quad_inner(&space, &f, &f).sqrt();
            let pf = proj.project_quad(&f)?;
            worst = worst.max(proj.norm(&pf) / norm_f - 1.0);
        }
    }
    Ok(CheckResult::at_most(
        "L2 projection non-expansive",
        worst,
        1e-12,
        format!("n in {ns:?}, {fields} fields each; measured is max(|Pf|/|f|) - 1"),
    ))
}

/// Single-control HJB iteration versus the direct linear solve.
pub fn scheme_reduction_check(problem: &Problem, level: usize) -> Result<CheckResult> {
    let space = problem.space(level)?;
    let lifting = Arc::new(LiftingOperator::for_space(space)?);
    let control = &problem.controls.controls()[0];
    let linear = solve_linear_nondiv(&lifting, control, None, 2.0)?.solution;
    let options = SolveOptions {
        tol: 1e-12,
        max_iter: 1000,
        method: Method::Contraction,
    };
    let hjb = solve_hjb(lifting, &ControlSet::single(control.clone()), 1.0, &options, None)?;
    let diff = hjb.state.u.axpy(-1.0, &linear);
    let w2 = w22h_lambda_norm(&diff, 0.0)?;
    let max = diff.coefficients().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    Ok(CheckResult::at_most(
        "scheme reduction",
        w2.max(max),
        1e-8,
        format!(
            "{}, n = {}, {} iterations, W2h {w2:.3e}, max {max:.3e}",
            problem.name,
            problem.n << level,
            hjb.report.iterations
        ),
    ))
}

/// Feasible ε for the anisotropic family at `θ = 0, λ = 2c0` and
/// `θ = π/3, λ = 8c0/7`; measured is the worst deviation from the bounds.
pub fn cordes_family_check(c0: f64) -> Result<CheckResult> {
    let samples: Vec<(usize, [f64; 2])> = (0..4).flat_map(|i| (0..4).map(move |j| (0, [0.1 + 0.25 * i as f64, 0.1 + 0.25 * j as f64]))).collect();
    let family = |theta: f64| {
        ControlSet::single(
            Control::new("theta", MatrixField::constant(example1_matrix(theta, 0.3)), ScalarField::zero())
                .with_reaction(ScalarField::Constant(-c0)),
        )
    };
    let eps0 = check_cordes(ConditionId::FemGeneral, &family(0.0), 2.0 * c0, &samples, 2)?
        .max_epsilon
        .unwrap_or(f64::NEG_INFINITY);
    let eps1 = check_cordes(ConditionId::FemGeneral, &family(std::f64::consts::FRAC_PI_3), 8.0 / 7.0 * c0, &samples, 2)?
        .max_epsilon
        .unwrap_or(f64::NEG_INFINITY);
    let dev = ((1.0 - 1e-9) - eps0).max(0.0).max((eps1 - 1.0 / 7.0).abs());
    Ok(CheckResult::at_most(
        "Cordes feasibility of the anisotropic family",
        dev,
        1e-9,
        format!("theta = 0: eps = {eps0:.15}; theta = pi/3: eps = {eps1:.15}"),
    ))
}

/// `max_w ‖w‖_{W²₂h} / ‖P_h γ(A:H + b·∇ + c)w‖` on each mesh; measured is
/// the spread max/min across meshes.
pub fn stability_check(problem: &Problem, ns: &[usize], samples: usize, rng: &mut ChaCha8Rng) -> Result<(CheckResult, Vec<f64>)> {
    let mut ratios = Vec::new();
    for &n in ns {
        let space = unit_square_space(n, problem.degree)?;
        let lifting = LiftingOperator::for_space(space.clone())?;
        let proj = L2Projector::new(space.clone())?;
        let coeffs = QuadCoefficients::sample(&space, &problem.controls.controls()[0])?;
        let mut worst = 0.0f64;
        for _ in 0..samples {
            let w = random_function(&space, rng);
            let lw = QuadState::new(&lifting, &w).residual(&coeffs, false);
            let denom = proj.norm(&proj.project_quad(&lw)?);
            worst = worst.max(w2ph_norm(&space, &w, 2.0)?.total / denom);
        }
        ratios.push(worst);
    }
    let hi = ratios.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lo = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
    let finite = ratios.iter().all(|r| r.is_finite());
    let spread = if finite { hi / lo } else { f64::INFINITY };
    Ok((
        CheckResult::at_most(
            "stability ratio audit",
            spread,
            2.0,
            format!("max ratios {ratios:?} for n in {ns:?}; measured is max/min"),
        ),
        ratios,
    ))
}

/// Contraction audit on an HJB problem: strictly decreasing increments
/// after iteration 3 and the final residual.
pub fn contraction_check(problem: &Problem, level: usize, residual_tol: f64) -> Result<CheckResult> {
    let space = problem.space(level)?;
    let lambda = problem.hjb_lambda(&Problem::samples(&space))?;
    let lifting = Arc::new(LiftingOperator::for_space(space)?);
    let options = SolveOptions {
        method: Method::Contraction,
        ..problem.hjb.options
    };
    let sol = HjbSolver::new(lifting, &problem.controls, lambda)?.solve(&options, problem.exact())?;
    let inc = sol.state.increments_h1();
    let monotone = inc.iter().skip(3).collect::<Vec<_>>().windows(2).all(|w| w[1] < w[0]);
    let r = sol.report.final_residual;
    let mut out = CheckResult::at_most(
        "HJB contraction",
        r,
        residual_tol,
        format!(
            "{}: lambda = {lambda:.6}, {} iterations, last ratio {:.4}, increments decreasing after 3: {monotone}",
            problem.name,
            sol.report.iterations,
            sol.report.last_ratio.unwrap_or(f64::NAN)
        ),
    );
    out.passed &= monotone;
    Ok(out)
}

/// Policy and contraction solves of a dominance problem against the linear
/// solve with the first control.
pub fn dominance_check(problem: &Problem) -> Result<CheckResult> {
    let space = problem.space(0)?;
    let lifting = Arc::new(LiftingOperator::for_space(space.clone())?);
    let linear = solve_linear_nondiv(&lifting, &problem.controls.controls()[0], None, 2.0)?.solution;
    let lambda = problem.hjb_lambda(&Problem::samples(&space))?;
    let solver = HjbSolver::new(lifting, &problem.controls, lambda)?;
    let base = SolveOptions {
        tol: 1e-10,
        max_iter: 50,
        method: Method::Policy,
    };
    let policy = solver.solve(&SolveOptions { max_iter: 2, ..base }, None)?;
    let contraction = solver.solve(&SolveOptions { method: Method::Contraction, ..base }, None)?;
    let dev = |u: &FeFunction| u.axpy(-1.0, &linear).coefficients().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let (dp, dc) = (dev(&policy.state.u), dev(&contraction.state.u));
    let mut out = CheckResult::at_most(
        "HJB dominance",
        dp.max(dc),
        1e-7,
        format!(
            "policy: {} steps (converged {}), contraction: {} steps (converged {}), deviations {dp:.3e} / {dc:.3e}",
            policy.report.iterations, policy.report.converged, contraction.report.iterations, contraction.report.converged
        ),
    );
    out.passed &= policy.report.converged && contraction.report.converged;
    Ok(out)
}

/// The quick invariant suite; `full` adds the slower solver audits.
pub fn run_suite(seed: u64, full: bool) -> Result<VerifyReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = vec![
        keystone_check(&[2, 4], &[2, 3], 5, &mut rng)?,
        two_form_check(&[2, 4], &[2, 3], 2, &mut rng)?,
        projection_check(&[2, 4, 8], 20, &mut rng)?,
        cordes_family_check(1.0)?,
        scheme_reduction_check(&Problem::bundled("continuous-A-square")?, 0)?,
    ];
    if full {
        checks.push(stability_check(&Problem::bundled("continuous-A-square")?, &[4, 8, 16], 50, &mut rng)?.0);
        checks.push(contraction_check(&Problem::bundled("hjb-example1")?, 0, 1e-7)?);
        checks.push(dominance_check(&Problem::bundled("hjb-dominance")?)?);
    }
    let all_passed = checks.iter().all(|c| c.passed);
    Ok(VerifyReport {
        seed,
        checks,
        all_passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quick_suite_passes() {
        let report = run_suite(DEFAULT_SEED, false).unwrap();
        for c in &report.checks {
            assert!(c.passed, "{}", c.line());
        }
        assert!(report.all_passed);
    }

    #[test]
    fn suite_is_deterministic() {
        let mut a = ChaCha8Rng::seed_from_u64(1);
        let mut b = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(
            projection_check(&[2], 3, &mut a).unwrap(),
            projection_check(&[2], 3, &mut b).unwrap()
        );
    }

    #[test]
    fn failing_check_is_reported() {
        let c = CheckResult::at_most("x", 2.0, 1.0, String::new());
        assert!(!c.passed && c.line().starts_with("[FAIL]"));
    }
}
