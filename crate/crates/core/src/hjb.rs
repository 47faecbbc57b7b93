//! Discrete HJB solver: contraction fixed-point iteration with an optional
//! Howard-type policy iteration.

use std::fmt::Write as _;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assembly::{assemble_from_qp, assemble_shifted_laplacian, QuadCoefficients, QuadState, ShiftedLaplacian};
use crate::coefficients::ControlSet;
use crate::error::{FemError, Result};
use crate::fe_space::{FeFunction, L2Projector};
use crate::field::ExactSolution;
use crate::lifting::LiftingOperator;
use crate::norms::{error_report, h1_lambda_norm, w22h_lambda_norm, ErrorReport};
use crate::report::format_float;
use crate::sparse::LinearSolver;

pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITER: usize = 500;

/// `g(x_q) = max_α γ^α(L^α u - f^α)(x_q)` and the maximizing control.
#[derive(Clone, Debug, PartialEq)]
pub struct SupResidual {
    pub values: Vec<f64>,
    pub argmax: Vec<usize>,
}

/// Pointwise supremum over pre-sampled control tables; ties go to the
/// smallest control index.
pub fn sup_over_tables(state: &QuadState, tables: &[QuadCoefficients]) -> Result<SupResidual> {
    if tables.is_empty() {
        return Err(FemError::EmptyControlSet);
    }
    let n = state.value.len();
    let (values, argmax): (Vec<f64>, Vec<usize>) = (0..n)
        .into_par_iter()
        .map(|q| {
            let mut best = (f64::NEG_INFINITY, 0);
            for (k, t) in tables.iter().enumerate() {
                let v = t.residual_at(q, &state.hessian[q], state.gradient[q], state.value[q], true);
                if v > best.0 {
                    best = (v, k);
                }
            }
            best
        })
        .unzip();
    if let Some(q) = values.iter().position(|v| !v.is_finite()) {
        return Err(FemError::Problem(format!("non-finite HJB residual at quadrature point {q}")));
    }
    Ok(SupResidual { values, argmax })
}

pub fn sample_tables(lifting: &LiftingOperator, controls: &ControlSet) -> Result<Vec<QuadCoefficients>> {
    controls
        .controls()
        .iter()
        .map(|c| QuadCoefficients::sample(lifting.vh(), c))
        .collect()
}

/// Samples the controls and evaluates the supremum residual at `u`.
pub fn eval_sup_residual(lifting: &LiftingOperator, controls: &ControlSet, u: &FeFunction) -> Result<SupResidual> {
    if !Arc::ptr_eq(u.space(), lifting.vh()) {
        return Err(FemError::SpaceMismatch("iterate is not in the lifting's V_h".into()));
    }
    sup_over_tables(&QuadState::new(lifting, u), &sample_tables(lifting, controls)?)
}

/// One line of the iteration log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub k: usize,
    pub increment_h1_lambda: f64,
    pub increment_w22h_lambda: f64,
    /// `‖P_h g‖_{L²}` at the new iterate.
    pub residual: f64,
    /// Number of quadrature points where each control is active.
    pub histogram: Vec<usize>,
    pub policy_step: bool,
}

#[derive(Clone, Debug)]
pub struct HjbState {
    pub u: FeFunction,
    pub iteration: usize,
    pub lambda: f64,
    /// `‖P_h g‖_{L²}` at `u`.
    pub residual: f64,
    pub argmax: Vec<usize>,
    pub history: Vec<IterationRecord>,
    load: Vec<f64>,
}

impl HjbState {
    pub fn increments_h1(&self) -> Vec<f64> {
        self.history.iter().map(|r| r.increment_h1_lambda).collect()
    }

    pub fn increments_w2(&self) -> Vec<f64> {
        self.history.iter().map(|r| r.increment_w22h_lambda).collect()
    }
}

/// Discretization, sampled controls and the factorized `K + λM`.
pub struct HjbSolver {
    lifting: Arc<LiftingOperator>,
    projector: L2Projector,
    shifted: ShiftedLaplacian,
    tables: Vec<QuadCoefficients>,
}

impl HjbSolver {
    pub fn new(lifting: Arc<LiftingOperator>, controls: &ControlSet, lambda: f64) -> Result<Self> {
        let tables = sample_tables(&lifting, controls)?;
        let shifted = assemble_shifted_laplacian(lifting.vh(), lambda)?;
        let projector = L2Projector::new(lifting.vh().clone())?;
        Ok(Self {
            lifting,
            projector,
            shifted,
            tables,
        })
    }

    pub fn lambda(&self) -> f64 {
        self.shifted.lambda
    }

    pub fn lifting(&self) -> &Arc<LiftingOperator> {
        &self.lifting
    }

    pub fn projector(&self) -> &L2Projector {
        &self.projector
    }

    pub fn tables(&self) -> &[QuadCoefficients] {
        &self.tables
    }

    pub fn n_controls(&self) -> usize {
        self.tables.len()
    }

    pub fn sup_residual(&self, u: &FeFunction) -> Result<SupResidual> {
        sup_over_tables(&QuadState::new(&self.lifting, u), &self.tables)
    }

    /// State at `u` with an empty history.
    pub fn state_at(&self, u: FeFunction) -> Result<HjbState> {
        if !Arc::ptr_eq(u.space(), self.lifting.vh()) {
            return Err(FemError::SpaceMismatch("iterate is not in the lifting's V_h".into()));
        }
        let sup = self.sup_residual(&u)?;
        let load = self.lifting.vh().load_from_quad(&sup.values);
        let residual = self.projector.norm(&self.projector.solve_load(&load)?);
        Ok(HjbState {
            u,
            iteration: 0,
            lambda: self.lambda(),
            residual,
            argmax: sup.argmax,
            history: Vec::new(),
            load,
        })
    }

    pub fn initial_state(&self) -> Result<HjbState> {
        self.state_at(FeFunction::zero(self.lifting.vh().clone()))
    }

    fn advance(&self, state: HjbState, next: FeFunction, policy_step: bool) -> Result<HjbState> {
        let increment = next.axpy(-1.0, &state.u);
        let lambda = self.lambda();
        let mut new = self.state_at(next)?;
        let mut histogram = vec![0; self.n_controls()];
        for &k in &new.argmax {
            histogram[k] += 1;
        }
        new.iteration = state.iteration + 1;
        new.history = state.history;
        new.history.push(IterationRecord {
            k: new.iteration,
            increment_h1_lambda: h1_lambda_norm(&increment, lambda)?,
            increment_w22h_lambda: w22h_lambda_norm(&increment, lambda)?,
            residual: new.residual,
            histogram,
            policy_step,
        });
        Ok(new)
    }

    /// `u ← u + (K + λM)^{-1}(g, φ_i)`, i.e. `u ← -M_λ(F_h(u) - (L_I u - λu))`.
    pub fn fixed_point_step(&self, state: HjbState) -> Result<HjbState> {
        let neg: Vec<f64> = state.load.iter().map(|v| -v).collect();
        let delta = self.shifted.solve_load(&neg)?;
        let next = state.u.axpy(1.0, &delta);
        self.advance(state, next, false)
    }

    /// Freezes the active controls, solves the linear system and
    /// re-evaluates; falls back to a fixed-point step if the frozen system
    /// is singular.
    pub fn policy_iteration_step(&self, state: HjbState) -> Result<HjbState> {
        let frozen = QuadCoefficients::select(&self.tables, &state.argmax);
        let (matrix, load) = assemble_from_qp(&self.lifting, &frozen);
        let solved = LinearSolver::new(matrix).and_then(|s| s.solve(&load));
        match solved {
            Ok(coeffs) if coeffs.iter().all(|v| v.is_finite()) => {
                let next = FeFunction::new(self.lifting.vh().clone(), coeffs)?;
                self.advance(state, next, true)
            }
            _ => self.fixed_point_step(state),
        }
    }

    pub fn solve(&self, options: &SolveOptions, exact: Option<&dyn ExactSolution>) -> Result<HjbSolution> {
        let mut state = self.initial_state()?;
        let initial_residual = state.residual;
        let mut converged = false;
        while state.iteration < options.max_iter {
            let before = state.argmax.clone();
            state = match options.method {
                Method::Contraction => self.fixed_point_step(state)?,
                Method::Policy => self.policy_iteration_step(state)?,
            };
            let last = state.history.last().expect("one step taken");
            let stable_policy = options.method == Method::Policy && last.policy_step && state.argmax == before;
            if last.increment_h1_lambda <= options.tol || stable_policy {
                converged = true;
                break;
            }
        }
        let report = self.report(&state, options, initial_residual, converged, exact)?;
        Ok(HjbSolution { state, report })
    }

    fn report(
        &self,
        state: &HjbState,
        options: &SolveOptions,
        initial_residual: f64,
        converged: bool,
        exact: Option<&dyn ExactSolution>,
    ) -> Result<HjbReport> {
        let inc = state.increments_h1();
        let last_ratio = match inc.as_slice() {
            [.., a, b] if *a > 0.0 => Some(b / a),
            _ => None,
        };
        let vh = self.lifting.vh();
        let errors = match exact {
            Some(e) => Some(error_report(&state.u, e, 2.0, 0)?),
            None => None,
        };
        Ok(HjbReport {
            method: options.method,
            lambda: self.lambda(),
            tol: options.tol,
            max_iter: options.max_iter,
            iterations: state.iteration,
            converged,
            diverged_or_slow: !converged,
            last_ratio,
            final_increment_h1_lambda: inc.last().copied(),
            initial_residual,
            final_residual: state.residual,
            n_cells: vh.mesh().n_cells(),
            n_dofs: vh.n_dofs(),
            h: vh.mesh().h_max(),
            degree: vh.degree(),
            n_controls: self.n_controls(),
            active_controls: majority_per_cell(&state.argmax, vh.n_quad(), self.n_controls()),
            history: state.history.clone(),
            errors,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Contraction,
    Policy,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolveOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub method: Method,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
            method: Method::Contraction,
        }
    }
}

impl SolveOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(FemError::InvalidArgument(format!("tol must be positive, got {}", self.tol)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HjbReport {
    pub method: Method,
    pub lambda: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub iterations: usize,
    pub converged: bool,
    pub diverged_or_slow: bool,
    /// Ratio of the last two H¹_λ increments.
    pub last_ratio: Option<f64>,
    pub final_increment_h1_lambda: Option<f64>,
    pub initial_residual: f64,
    pub final_residual: f64,
    pub n_cells: usize,
    pub n_dofs: usize,
    pub h: f64,
    pub degree: usize,
    pub n_controls: usize,
    /// Majority active control per cell.
    pub active_controls: Vec<usize>,
    pub history: Vec<IterationRecord>,
    pub errors: Option<ErrorReport>,
}

impl HjbReport {
    /// CSV: `k,increment_h1_lambda,increment_w22h_lambda,residual,policy_step,active_histogram`
    /// with the histogram as `;`-separated counts.
    pub fn iteration_log_csv(&self) -> String {
        let mut out = String::from("k,increment_h1_lambda,increment_w22h_lambda,residual,policy_step,active_histogram\n");
        for r in &self.history {
            let hist: Vec<String> = r.histogram.iter().map(|c| c.to_string()).collect();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.k,
                format_float(r.increment_h1_lambda),
                format_float(r.increment_w22h_lambda),
                format_float(r.residual),
                r.policy_step,
                hist.join(";")
            );
        }
        out
    }
}

pub struct HjbSolution {
    pub state: HjbState,
    pub report: HjbReport,
}

/// Validates inputs and runs the solver.
pub fn solve_hjb(
    lifting: Arc<LiftingOperator>,
    controls: &ControlSet,
    lambda: f64,
    options: &SolveOptions,
    exact: Option<&dyn ExactSolution>,
) -> Result<HjbSolution> {
    options.validate()?;
    HjbSolver::new(lifting, controls, lambda)?.solve(options, exact)
}

/// Most frequent active control on each cell, smallest index on ties.
pub fn majority_per_cell(argmax: &[usize], n_quad: usize, n_controls: usize) -> Vec<usize> {
    argmax
        .chunks(n_quad)
        .map(|cell| {
            let mut counts = vec![0usize; n_controls];
            for &k in cell {
                counts[k] += 1;
            }
            let mut best = 0;
            for k in 1..n_controls {
                if counts[k] > counts[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}
