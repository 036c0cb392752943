//! Line-search SQP for the transcribed trajectory problems.
//!
//! Each iteration solves the QP
//! `min 1/2 d'Hd + grad f'd  s.t.  g + Jg d = 0,  h + Jh d <= 0,  l - x <= d <= u - x`
//! and backtracks on the l1 merit `f + nu (|g|_1 + |h+|_1)`. Variable bounds
//! are kept hard, so every iterate satisfies them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, inf_norm, CsrMatrix};
use crate::qp::{solve_qp, QpProblem, QpSettings, QpSolution, QpStatus};
use crate::transcription::{ConstraintEval, NonlinearProgram};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HessianMode {
    /// Regularized objective Hessian only.
    Objective,
    /// Lagrangian Hessian with multiplier estimates, convexified blockwise.
    Lagrangian,
}

#[derive(Debug, Clone)]
pub struct SqpConfig {
    pub tol_kkt: f64,
    pub tol_feas: f64,
    pub max_iter: usize,
    pub alpha_min: f64,
    pub armijo: f64,
    pub hessian: HessianMode,
    pub qp: QpSettings,
    /// Penalty kept at least this factor above the largest multiplier.
    pub penalty_factor: f64,
    /// Slack weight of the restoration QP, relative to the penalty.
    pub restoration_weight: f64,
}

impl Default for SqpConfig {
    fn default() -> Self {
        SqpConfig {
            tol_kkt: 1e-6,
            tol_feas: 1e-6,
            max_iter: 100,
            alpha_min: 1e-8,
            armijo: 1e-4,
            hessian: HessianMode::Objective,
            qp: QpSettings::default(),
            penalty_factor: 1.1,
            restoration_weight: 100.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SqpStatus {
    Converged,
    MaxIter,
    LineSearchFailure,
    InfeasibleQp,
}

/// Multipliers in the convention `grad f + Jg' eq + Jh' ineq - lower + upper = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NlpDuals {
    pub eq: Vec<f64>,
    pub ineq: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl NlpDuals {
    pub fn zeros(n: usize, me: usize, mi: usize) -> Self {
        NlpDuals {
            eq: vec![0.0; me],
            ineq: vec![0.0; mi],
            lower: vec![0.0; n],
            upper: vec![0.0; n],
        }
    }

    fn blend(&mut self, target: &NlpDuals, alpha: f64) {
        let mix = |a: &mut Vec<f64>, b: &Vec<f64>| {
            for (x, y) in a.iter_mut().zip(b) {
                *x += alpha * (y - *x);
            }
        };
        mix(&mut self.eq, &target.eq);
        mix(&mut self.ineq, &target.ineq);
        mix(&mut self.lower, &target.lower);
        mix(&mut self.upper, &target.upper);
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SqpReport {
    pub status: SqpStatus,
    pub iterations: usize,
    pub kkt_residual: f64,
    pub constraint_violation: f64,
    pub objective: f64,
    /// `alpha * |d|_inf` of every accepted step.
    pub step_norms: Vec<f64>,
    /// Merit value after every accepted step, at that step's penalty.
    pub merits: Vec<(f64, f64)>,
    pub qp_iterations: usize,
    pub restorations: usize,
    /// Constraint rows (equalities first, then inequalities) left violated
    /// by the restoration QP when it was needed.
    pub infeasible_rows: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct SqpOutcome {
    pub x: Vec<f64>,
    pub duals: NlpDuals,
    pub report: SqpReport,
}

/// Residual components of the first-order conditions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NlpResiduals {
    pub stationarity: f64,
    pub primal: f64,
    pub dual: f64,
    pub complementarity: f64,
}

impl NlpResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity.max(self.primal).max(self.dual).max(self.complementarity)
    }
}

fn residuals(
    x: &[f64],
    grad: &[f64],
    cons: &ConstraintEval,
    lower: &[f64],
    upper: &[f64],
    duals: &NlpDuals,
) -> NlpResiduals {
    let mut stat = grad.to_vec();
    cons.eq_jac.tr_mul_add(&duals.eq, &mut stat);
    cons.ineq_jac.tr_mul_add(&duals.ineq, &mut stat);
    for i in 0..x.len() {
        stat[i] += duals.upper[i] - duals.lower[i];
    }
    let mut compl = 0.0f64;
    for (h, m) in cons.ineq.iter().zip(&duals.ineq) {
        compl = compl.max((h * m).abs());
    }
    for i in 0..x.len() {
        if lower[i].is_finite() {
            compl = compl.max((duals.lower[i] * (x[i] - lower[i])).abs());
        }
        if upper[i].is_finite() {
            compl = compl.max((duals.upper[i] * (upper[i] - x[i])).abs());
        }
    }
    let dual = duals
        .ineq
        .iter()
        .chain(&duals.lower)
        .chain(&duals.upper)
        .fold(0.0f64, |m, &v| m.max(-v));
    NlpResiduals {
        stationarity: inf_norm(&stat),
        primal: violation(x, &cons.eq, &cons.ineq, lower, upper),
        dual,
        complementarity: compl,
    }
}

fn violation(x: &[f64], eq: &[f64], ineq: &[f64], lower: &[f64], upper: &[f64]) -> f64 {
    let mut v = inf_norm(eq);
    for h in ineq {
        v = v.max(*h);
    }
    for i in 0..x.len() {
        v = v.max(lower[i] - x[i]).max(x[i] - upper[i]);
    }
    v.max(0.0)
}

fn l1_infeasibility(eq: &[f64], ineq: &[f64]) -> f64 {
    eq.iter().map(|g| g.abs()).sum::<f64>() + ineq.iter().map(|h| h.max(0.0)).sum::<f64>()
}

struct Step {
    d: Vec<f64>,
    duals: NlpDuals,
    qp_iterations: usize,
    restored: bool,
    infeasible_rows: Vec<usize>,
}

fn subproblem(
    hess: &CsrMatrix,
    grad: &[f64],
    cons: &ConstraintEval,
    x: &[f64],
    lower: &[f64],
    upper: &[f64],
) -> QpProblem {
    QpProblem::unconstrained(hess.clone(), grad.to_vec())
        .with_equalities(cons.eq_jac.clone(), cons.eq.iter().map(|g| -g).collect())
        .with_inequalities(cons.ineq_jac.clone(), cons.ineq.iter().map(|h| -h).collect())
        .with_bounds(
            lower.iter().zip(x).map(|(l, xi)| l - xi).collect(),
            upper.iter().zip(x).map(|(u, xi)| u - xi).collect(),
        )
}

fn duals_from_qp(sol: &QpSolution, n: usize) -> NlpDuals {
    NlpDuals {
        eq: sol.duals_eq.iter().map(|l| -l).collect(),
        ineq: sol.duals_ineq.clone(),
        lower: sol.duals_lower[..n].to_vec(),
        upper: sol.duals_upper[..n].to_vec(),
    }
}

/// Elastic QP: constraint rows get nonnegative slacks priced at `weight`.
fn restoration(
    qp: &QpProblem,
    weight: f64,
    settings: &QpSettings,
) -> Result<(QpSolution, Vec<usize>)> {
    let n = qp.dim();
    let me = qp.b_eq.len();
    let mi = qp.b_ineq.len();
    let dim = n + 2 * me + mi;
    let hess = CsrMatrix::from_triplets(dim, dim, &qp.hessian.triplets().collect::<Vec<_>>());
    let mut lin = qp.linear.clone();
    lin.resize(dim, weight);
    let mut eq_trip: Vec<(usize, usize, f64)> = qp.a_eq.triplets().collect();
    for r in 0..me {
        eq_trip.push((r, n + r, -1.0));
        eq_trip.push((r, n + me + r, 1.0));
    }
    let mut in_trip: Vec<(usize, usize, f64)> = qp.a_ineq.triplets().collect();
    for r in 0..mi {
        in_trip.push((r, n + 2 * me + r, -1.0));
    }
    let mut lower = qp.lower.clone();
    let mut upper = qp.upper.clone();
    lower.resize(dim, 0.0);
    upper.resize(dim, f64::INFINITY);
    let elastic = QpProblem::unconstrained(hess, lin)
        .with_equalities(CsrMatrix::from_triplets(me, dim, &eq_trip), qp.b_eq.clone())
        .with_inequalities(CsrMatrix::from_triplets(mi, dim, &in_trip), qp.b_ineq.clone())
        .with_bounds(lower, upper);
    let sol = solve_qp(&elastic, settings)?;
    let slack = &sol.primal[n..];
    let mut rows = Vec::new();
    for r in 0..me {
        if slack[r] + slack[me + r] > 1e-8 {
            rows.push(r);
        }
    }
    for r in 0..mi {
        if slack[2 * me + r] > 1e-8 {
            rows.push(me + r);
        }
    }
    Ok((sol, rows))
}

pub fn solve_nlp(problem: &dyn NonlinearProgram, initial: &[f64], config: &SqpConfig) -> Result<SqpOutcome> {
    let n = problem.dim();
    if initial.len() != n {
        return Err(Error::Dimension(format!(
            "initial guess has {} entries, problem has {n}",
            initial.len()
        )));
    }
    let lower = problem.lower_bounds();
    let upper = problem.upper_bounds();
    let mut x: Vec<f64> = initial
        .iter()
        .zip(lower.iter().zip(&upper))
        .map(|(&v, (&l, &u))| v.max(l).min(u))
        .collect();

    let mut f = problem.objective(&x)?;
    let mut grad = problem.objective_gradient(&x)?;
    let mut cons = problem.constraints(&x)?;
    let mut duals = NlpDuals::zeros(n, cons.eq.len(), cons.ineq.len());
    let mut have_duals = false;
    let mut penalty = 0.0f64;

    let mut report = SqpReport {
        status: SqpStatus::MaxIter,
        iterations: 0,
        kkt_residual: f64::INFINITY,
        constraint_violation: f64::INFINITY,
        objective: f,
        step_norms: Vec::new(),
        merits: Vec::new(),
        qp_iterations: 0,
        restorations: 0,
        infeasible_rows: Vec::new(),
    };

    loop {
        let res = residuals(&x, &grad, &cons, &lower, &upper, &duals);
        report.kkt_residual = res.max();
        report.constraint_violation = res.primal;
        report.objective = f;
        if have_duals && res.max() <= config.tol_kkt && res.primal <= config.tol_feas {
            report.status = SqpStatus::Converged;
            break;
        }
        if report.iterations >= config.max_iter {
            report.status = SqpStatus::MaxIter;
            break;
        }
        report.iterations += 1;

        let hess = match config.hessian {
            HessianMode::Lagrangian if have_duals => problem.model_hessian(&x, Some((&duals.eq, &duals.ineq)))?,
            _ => problem.model_hessian(&x, None)?,
        };
        let step = match compute_step(&hess, &grad, &cons, &x, &lower, &upper, penalty, config)? {
            Some(s) => s,
            None => {
                report.status = SqpStatus::InfeasibleQp;
                break;
            }
        };
        report.qp_iterations += step.qp_iterations;
        if step.restored {
            report.restorations += 1;
            report.infeasible_rows = step.infeasible_rows.clone();
        }

        let max_dual = inf_norm(&step.duals.eq).max(inf_norm(&step.duals.ineq));
        penalty = penalty.max(config.penalty_factor * max_dual + 1e-8);

        let theta = l1_infeasibility(&cons.eq, &cons.ineq);
        let lin_eq: Vec<f64> = cons.eq.iter().zip(cons.eq_jac.mul_vec(&step.d)).map(|(g, j)| g + j).collect();
        let lin_in: Vec<f64> = cons
            .ineq
            .iter()
            .zip(cons.ineq_jac.mul_vec(&step.d))
            .map(|(h, j)| h + j)
            .collect();
        let theta_lin = l1_infeasibility(&lin_eq, &lin_in);
        let slope = dot(&grad, &step.d) + penalty * (theta_lin - theta);
        let merit = f + penalty * theta;
        let slack = 1e-13 * (1.0 + merit.abs());

        let mut alpha = 1.0;
        let accepted = loop {
            let trial: Vec<f64> = x.iter().zip(&step.d).map(|(xi, di)| xi + alpha * di).collect();
            let eval = problem
                .objective(&trial)
                .and_then(|ft| problem.constraint_values(&trial).map(|(e, i)| (ft, e, i)));
            if let Ok((ft, eq, ineq)) = eval {
                let phi = ft + penalty * l1_infeasibility(&eq, &ineq);
                let decrease = config.armijo * alpha * slope.min(0.0);
                if phi <= merit + decrease + slack {
                    break Some((trial, phi));
                }
            }
            alpha *= 0.5;
            if alpha < config.alpha_min {
                break None;
            }
        };
        let Some((trial, phi)) = accepted else {
            report.status = SqpStatus::LineSearchFailure;
            break;
        };
        report.step_norms.push(alpha * inf_norm(&step.d));
        report.merits.push((penalty, phi));
        x = trial;
        if have_duals {
            duals.blend(&step.duals, alpha);
        } else {
            duals = step.duals;
            have_duals = true;
        }
        f = problem.objective(&x)?;
        grad = problem.objective_gradient(&x)?;
        cons = problem.constraints(&x)?;
    }
    Ok(SqpOutcome { x, duals, report })
}

#[allow(clippy::too_many_arguments)]
fn compute_step(
    hess: &CsrMatrix,
    grad: &[f64],
    cons: &ConstraintEval,
    x: &[f64],
    lower: &[f64],
    upper: &[f64],
    penalty: f64,
    config: &SqpConfig,
) -> Result<Option<Step>> {
    let n = x.len();
    let qp = subproblem(hess, grad, cons, x, lower, upper);
    let sol = solve_qp(&qp, &config.qp)?;
    let usable = sol.status == QpStatus::Optimal || (sol.status == QpStatus::MaxIter && sol.kkt_residual <= 1e-6);
    if usable {
        return Ok(Some(Step {
            duals: duals_from_qp(&sol, n),
            d: sol.primal,
            qp_iterations: sol.iterations,
            restored: false,
            infeasible_rows: Vec::new(),
        }));
    }
    let weight = config.restoration_weight * (1.0 + penalty);
    let (rest, rows) = restoration(&qp, weight, &config.qp)?;
    if rest.status == QpStatus::Infeasible || !(rest.status == QpStatus::Optimal || rest.kkt_residual <= 1e-6) {
        return Ok(None);
    }
    log::debug!("restoration step relaxed {} rows", rows.len());
    Ok(Some(Step {
        duals: duals_from_qp(&rest, n),
        d: rest.primal[..n].to_vec(),
        qp_iterations: sol.iterations + rest.iterations,
        restored: true,
        infeasible_rows: rows,
    }))
}
