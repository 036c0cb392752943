//! Convex quadratic programming kernel.
//!
//! Solves
//!
//! ```text
//! minimize    1/2 x'Hx + q'x
//! subject to  A_eq x = b_eq,   A_ineq x <= b_ineq,   lower <= x <= upper
//! ```
//!
//! with a primal-dual interior-point method (Mehrotra predictor-corrector)
//! on the condensed, quasi-definite KKT system, followed by an active-set
//! polish that recovers exact complementarity.
//!
//! Dual sign convention: at a solution
//! `Hx + q - A_eq' lambda + A_ineq' mu - z_lower + z_upper = 0` with
//! `mu, z_lower, z_upper >= 0`.

use std::collections::HashMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{dot, inf_norm, CsrMatrix, LdlSolver};

#[derive(Debug, Clone)]
pub struct QpProblem {
    /// Full symmetric Hessian (both triangles stored).
    pub hessian: CsrMatrix,
    pub linear: Vec<f64>,
    pub a_eq: CsrMatrix,
    pub b_eq: Vec<f64>,
    pub a_ineq: CsrMatrix,
    pub b_ineq: Vec<f64>,
    /// `-inf` for free.
    pub lower: Vec<f64>,
    /// `+inf` for free.
    pub upper: Vec<f64>,
}

impl QpProblem {
    /// Problem without constraints or bounds.
    pub fn unconstrained(hessian: CsrMatrix, linear: Vec<f64>) -> Self {
        let n = linear.len();
        QpProblem {
            hessian,
            linear,
            a_eq: CsrMatrix::zeros(0, n),
            b_eq: Vec::new(),
            a_ineq: CsrMatrix::zeros(0, n),
            b_ineq: Vec::new(),
            lower: vec![f64::NEG_INFINITY; n],
            upper: vec![f64::INFINITY; n],
        }
    }

    pub fn with_equalities(mut self, a: CsrMatrix, b: Vec<f64>) -> Self {
        self.a_eq = a;
        self.b_eq = b;
        self
    }

    pub fn with_inequalities(mut self, a: CsrMatrix, b: Vec<f64>) -> Self {
        self.a_ineq = a;
        self.b_ineq = b;
        self
    }

    pub fn with_bounds(mut self, lower: Vec<f64>, upper: Vec<f64>) -> Self {
        self.lower = lower;
        self.upper = upper;
        self
    }

    pub fn dim(&self) -> usize {
        self.linear.len()
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        0.5 * dot(x, &self.hessian.mul_vec(x)) + dot(&self.linear, x)
    }

    pub fn check(&self, symmetry_tol: f64) -> Result<()> {
        let n = self.dim();
        let dims_ok = self.hessian.nrows() == n
            && self.hessian.ncols() == n
            && self.a_eq.ncols() == n
            && self.a_eq.nrows() == self.b_eq.len()
            && self.a_ineq.ncols() == n
            && self.a_ineq.nrows() == self.b_ineq.len()
            && self.lower.len() == n
            && self.upper.len() == n;
        if !dims_ok {
            return Err(Error::Dimension(format!(
                "QP with {n} variables: H {}x{}, A_eq {}x{} / {}, A_ineq {}x{} / {}, bounds {}/{}",
                self.hessian.nrows(),
                self.hessian.ncols(),
                self.a_eq.nrows(),
                self.a_eq.ncols(),
                self.b_eq.len(),
                self.a_ineq.nrows(),
                self.a_ineq.ncols(),
                self.b_ineq.len(),
                self.lower.len(),
                self.upper.len()
            )));
        }
        let scale = self
            .hessian
            .triplets()
            .fold(1.0f64, |m, (_, _, v)| m.max(v.abs()));
        let asym = self.hessian.asymmetry();
        if asym > symmetry_tol * scale {
            return Err(Error::Input(format!(
                "Hessian is not symmetric (max asymmetry {asym:e})"
            )));
        }
        let finite = self.linear.iter().chain(&self.b_eq).chain(&self.b_ineq).all(|v| v.is_finite())
            && self.hessian.triplets().all(|t| t.2.is_finite())
            && self.a_eq.triplets().all(|t| t.2.is_finite())
            && self.a_ineq.triplets().all(|t| t.2.is_finite())
            && self.lower.iter().all(|v| !v.is_nan() && *v != f64::INFINITY)
            && self.upper.iter().all(|v| !v.is_nan() && *v != f64::NEG_INFINITY);
        if !finite {
            return Err(Error::Input("QP data contains non-finite values".into()));
        }
        Ok(())
    }

    /// KKT residuals of a primal-dual point under the module's sign
    /// convention.
    pub fn kkt(&self, sol: &QpPoint<'_>) -> KktResiduals {
        let x = sol.primal;
        let mut stat = self.hessian.mul_vec(x);
        for (s, q) in stat.iter_mut().zip(&self.linear) {
            *s += q;
        }
        let neg: Vec<f64> = sol.duals_eq.iter().map(|l| -l).collect();
        self.a_eq.tr_mul_add(&neg, &mut stat);
        self.a_ineq.tr_mul_add(sol.duals_ineq, &mut stat);
        for i in 0..x.len() {
            stat[i] += sol.duals_upper[i] - sol.duals_lower[i];
        }

        let mut primal = 0.0f64;
        let mut compl = 0.0f64;
        for (r, v) in self.a_eq.mul_vec(x).iter().zip(&self.b_eq) {
            primal = primal.max((r - v).abs());
        }
        for ((r, v), m) in self.a_ineq.mul_vec(x).iter().zip(&self.b_ineq).zip(sol.duals_ineq) {
            primal = primal.max(r - v);
            compl = compl.max((m * (v - r)).abs());
        }
        for i in 0..x.len() {
            if self.lower[i].is_finite() {
                primal = primal.max(self.lower[i] - x[i]);
                compl = compl.max((sol.duals_lower[i] * (x[i] - self.lower[i])).abs());
            } else {
                compl = compl.max(sol.duals_lower[i].abs());
            }
            if self.upper[i].is_finite() {
                primal = primal.max(x[i] - self.upper[i]);
                compl = compl.max((sol.duals_upper[i] * (self.upper[i] - x[i])).abs());
            } else {
                compl = compl.max(sol.duals_upper[i].abs());
            }
        }
        let dual = sol
            .duals_ineq
            .iter()
            .chain(sol.duals_lower)
            .chain(sol.duals_upper)
            .fold(0.0f64, |m, &v| m.max(-v));
        KktResiduals {
            stationarity: inf_norm(&stat),
            primal: primal.max(0.0),
            dual,
            complementarity: compl,
        }
    }
}

/// Borrowed primal-dual point.
#[derive(Debug, Clone, Copy)]
pub struct QpPoint<'a> {
    pub primal: &'a [f64],
    pub duals_eq: &'a [f64],
    pub duals_ineq: &'a [f64],
    pub duals_lower: &'a [f64],
    pub duals_upper: &'a [f64],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub primal: f64,
    pub dual: f64,
    pub complementarity: f64,
}

impl KktResiduals {
    /// Largest component; NaN anywhere yields infinity.
    pub fn max(&self) -> f64 {
        let parts = [self.stationarity, self.primal, self.dual, self.complementarity];
        if parts.iter().any(|v| v.is_nan()) {
            return f64::INFINITY;
        }
        parts.into_iter().fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone)]
pub struct QpSettings {
    /// Absolute tolerance on every KKT residual.
    pub tol: f64,
    pub max_iter: usize,
    pub polish: bool,
    pub reg_primal: f64,
    pub reg_dual: f64,
    pub refine_steps: usize,
    /// Minimum certified violation for an infeasibility verdict.
    pub infeasibility_tol: f64,
    pub symmetry_tol: f64,
}

impl Default for QpSettings {
    fn default() -> Self {
        QpSettings {
            tol: 1e-8,
            max_iter: 20000,
            polish: true,
            reg_primal: 1e-9,
            reg_dual: 1e-9,
            refine_steps: 8,
            infeasibility_tol: 1e-7,
            symmetry_tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum QpStatus {
    Optimal,
    Infeasible,
    MaxIter,
}

/// Farkas certificate: nonnegative `y_ineq`, `y_lower`, `y_upper` and free
/// `y_eq` with
/// `A_ineq' y_ineq - A_eq' y_eq - y_lower + y_upper = 0` and
/// `b_ineq' y_ineq - b_eq' y_eq - lower' y_lower + upper' y_upper < 0`.
#[derive(Debug, Clone, Serialize)]
pub struct InfeasibilityCertificate {
    pub y_eq: Vec<f64>,
    pub y_ineq: Vec<f64>,
    pub y_lower: Vec<f64>,
    pub y_upper: Vec<f64>,
    /// Value of the certificate's right-hand-side combination (negative).
    pub margin: f64,
    /// `|| A' y ||_inf` of the certificate.
    pub residual: f64,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub primal: Vec<f64>,
    pub duals_eq: Vec<f64>,
    pub duals_ineq: Vec<f64>,
    pub duals_lower: Vec<f64>,
    pub duals_upper: Vec<f64>,
    pub status: QpStatus,
    pub kkt_residual: f64,
    pub residuals: KktResiduals,
    pub objective: f64,
    pub iterations: usize,
    pub polished: bool,
    pub certificate: Option<InfeasibilityCertificate>,
}

impl QpSolution {
    pub fn point(&self) -> QpPoint<'_> {
        QpPoint {
            primal: &self.primal,
            duals_eq: &self.duals_eq,
            duals_ineq: &self.duals_ineq,
            duals_lower: &self.duals_lower,
            duals_upper: &self.duals_upper,
        }
    }

    pub fn is_optimal(&self) -> bool {
        self.status == QpStatus::Optimal
    }
}

pub fn solve_qp(problem: &QpProblem, settings: &QpSettings) -> Result<QpSolution> {
    Solver::new(problem, settings)?.run(None)
}

/// Re-solve starting from a previous primal-dual point of a problem with the
/// same dimensions. If the point already meets the tolerance it is returned
/// after zero iterations.
pub fn solve_qp_warm(problem: &QpProblem, settings: &QpSettings, warm: &QpSolution) -> Result<QpSolution> {
    let n = problem.dim();
    if warm.primal.len() != n
        || warm.duals_eq.len() != problem.b_eq.len()
        || warm.duals_ineq.len() != problem.b_ineq.len()
    {
        return Err(Error::Dimension("warm start does not match the problem".into()));
    }
    Solver::new(problem, settings)?.run(Some(warm))
}

/// Where a standard-form inequality row came from.
#[derive(Debug, Clone, Copy)]
enum IneqOrigin {
    Row(usize),
    Upper(usize),
    Lower(usize),
}

#[derive(Debug, Clone, Copy)]
enum EqOrigin {
    Row(usize),
    Fixed(usize),
}

/// `min 1/2 x'Hx + q'x  s.t.  E x = e,  G x <= h`.
#[derive(Debug, Clone)]
struct StdForm {
    h: CsrMatrix,
    q: Vec<f64>,
    e: CsrMatrix,
    e_rhs: Vec<f64>,
    g: CsrMatrix,
    g_rhs: Vec<f64>,
}

impl StdForm {
    fn n(&self) -> usize {
        self.q.len()
    }

    fn residuals(&self, x: &[f64], lam: &[f64], z: &[f64]) -> KktResiduals {
        let mut stat = self.h.mul_vec(x);
        for (s, q) in stat.iter_mut().zip(&self.q) {
            *s += q;
        }
        let neg: Vec<f64> = lam.iter().map(|l| -l).collect();
        self.e.tr_mul_add(&neg, &mut stat);
        self.g.tr_mul_add(z, &mut stat);
        let mut primal = 0.0f64;
        for (r, v) in self.e.mul_vec(x).iter().zip(&self.e_rhs) {
            primal = primal.max((r - v).abs());
        }
        let mut compl = 0.0f64;
        for ((r, v), zi) in self.g.mul_vec(x).iter().zip(&self.g_rhs).zip(z) {
            primal = primal.max(r - v);
            compl = compl.max((zi * (v - r)).abs());
        }
        KktResiduals {
            stationarity: inf_norm(&stat),
            primal,
            dual: z.iter().fold(0.0f64, |m, &v| m.max(-v)),
            complementarity: compl,
        }
    }
}

/// Condensed KKT matrix `[H + G'WG + rho I, E'; E, -delta I]`.
struct Kkt {
    n: usize,
    me: usize,
    solver: LdlSolver,
    n_entries: usize,
    h_terms: Vec<(usize, f64)>,
    g_terms: Vec<(usize, usize, f64)>,
    e_terms: Vec<(usize, f64)>,
    reg_primal: f64,
    reg_dual: f64,
    refine_steps: usize,
}

impl Kkt {
    fn new(h: &CsrMatrix, e: &CsrMatrix, g: &CsrMatrix, settings: &QpSettings) -> Self {
        let n = h.nrows();
        let me = e.nrows();
        let mut index: HashMap<(usize, usize), usize> = HashMap::new();
        let mut entries = Vec::new();
        let mut slot = |i: usize, j: usize| {
            let key = if i <= j { (i, j) } else { (j, i) };
            *index.entry(key).or_insert_with(|| {
                entries.push(key);
                entries.len() - 1
            })
        };
        let mut h_terms = Vec::new();
        for (r, c, v) in h.triplets() {
            if r <= c {
                h_terms.push((slot(r, c), v));
            }
        }
        let mut g_terms = Vec::new();
        for row in 0..g.nrows() {
            let cols: Vec<(usize, f64)> = g.row(row).collect();
            for a in 0..cols.len() {
                for b in a..cols.len() {
                    g_terms.push((row, slot(cols[a].0, cols[b].0), cols[a].1 * cols[b].1));
                }
            }
        }
        let mut e_terms = Vec::new();
        for (r, c, v) in e.triplets() {
            e_terms.push((slot(c, n + r), v));
        }
        let signs = (0..n + me).map(|i| if i < n { 1.0 } else { -1.0 }).collect();
        let solver = LdlSolver::new(n + me, &entries, signs);
        Kkt {
            n,
            me,
            solver,
            n_entries: entries.len(),
            h_terms,
            g_terms,
            e_terms,
            reg_primal: settings.reg_primal,
            reg_dual: settings.reg_dual,
            refine_steps: settings.refine_steps,
        }
    }

    fn factor(&mut self, w: &[f64]) -> Result<()> {
        let mut values = vec![0.0; self.n_entries];
        for &(k, v) in &self.h_terms {
            values[k] += v;
        }
        for &(row, k, v) in &self.g_terms {
            values[k] += w[row] * v;
        }
        for &(k, v) in &self.e_terms {
            values[k] += v;
        }
        let shift: Vec<f64> = (0..self.n + self.me)
            .map(|i| if i < self.n { self.reg_primal } else { -self.reg_dual })
            .collect();
        self.solver
            .factor(&values, &shift, 1e-14, 1e-8)
            .map(|_| ())
            .map_err(|e| Error::Input(format!("KKT factorization failed: {e}")))
    }

    /// Unregularized product `[H + G'WG, E'; E, 0] v`.
    fn apply(&self, std: &KktOperands<'_>, w: &[f64], v: &[f64]) -> Vec<f64> {
        let (x, y) = v.split_at(self.n);
        let mut top = std.h.mul_vec(x);
        if std.g.nrows() > 0 {
            let gx: Vec<f64> = std.g.mul_vec(x).iter().zip(w).map(|(a, b)| a * b).collect();
            std.g.tr_mul_add(&gx, &mut top);
        }
        std.e.tr_mul_add(y, &mut top);
        top.extend(std.e.mul_vec(x));
        top
    }

    fn solve(&self, ops: &KktOperands<'_>, w: &[f64], rhs: &[f64]) -> Vec<f64> {
        let mut sol = rhs.to_vec();
        self.solver.solve(&mut sol);
        let scale = 1.0 + inf_norm(rhs);
        let mut best_res = f64::INFINITY;
        for _ in 0..self.refine_steps {
            let kx = self.apply(ops, w, &sol);
            let mut res: Vec<f64> = rhs.iter().zip(&kx).map(|(b, k)| b - k).collect();
            let norm = inf_norm(&res);
            if norm <= 1e-15 * scale || norm >= best_res {
                break;
            }
            best_res = norm;
            self.solver.solve(&mut res);
            for (s, d) in sol.iter_mut().zip(&res) {
                *s += d;
            }
        }
        sol
    }
}

struct KktOperands<'a> {
    h: &'a CsrMatrix,
    e: &'a CsrMatrix,
    g: &'a CsrMatrix,
}

struct IpmOutcome {
    x: Vec<f64>,
    lam: Vec<f64>,
    z: Vec<f64>,
    s: Vec<f64>,
    iterations: usize,
    residuals: KktResiduals,
    converged: bool,
}

struct IpmStart {
    x: Vec<f64>,
    lam: Vec<f64>,
    z: Vec<f64>,
}

fn step_to_boundary(v: &[f64], dv: &[f64]) -> f64 {
    v.iter()
        .zip(dv)
        .filter(|(_, d)| **d < 0.0)
        .map(|(x, d)| -x / d)
        .fold(f64::INFINITY, f64::min)
}

fn ipm(std: &StdForm, settings: &QpSettings, start: Option<IpmStart>) -> Result<IpmOutcome> {
    let n = std.n();
    let me = std.e.nrows();
    let mg = std.g.nrows();
    let ops = KktOperands {
        h: &std.h,
        e: &std.e,
        g: &std.g,
    };
    let mut kkt = Kkt::new(&std.h, &std.e, &std.g, settings);

    let (mut x, mut lam, mut z, mut s);
    match start {
        Some(st) => {
            x = st.x;
            lam = st.lam;
            let gx = std.g.mul_vec(&x);
            s = gx.iter().zip(&std.g_rhs).map(|(g, h)| (h - g).max(1e-4)).collect::<Vec<_>>();
            z = st.z.iter().map(|v| v.max(1e-4)).collect::<Vec<_>>();
        }
        None => {
            kkt.factor(&vec![1.0; mg])?;
            let mut rhs: Vec<f64> = std.q.iter().map(|v| -v).collect();
            std.g.tr_mul_add(&std.g_rhs, &mut rhs);
            rhs.extend_from_slice(&std.e_rhs);
            let sol = kkt.solve(&ops, &vec![1.0; mg], &rhs);
            x = sol[..n].to_vec();
            lam = sol[n..].iter().map(|y| -y).collect();
            let gx = std.g.mul_vec(&x);
            s = gx.iter().zip(&std.g_rhs).map(|(g, h)| (h - g).max(1.0)).collect();
            z = vec![1.0; mg];
        }
    }

    let mut best: Option<(f64, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> = None;
    let mut small_steps = 0;
    let mut iter = 0;
    loop {
        let finite = x.iter().chain(&z).chain(&lam).chain(&s).all(|v| v.is_finite() && v.abs() < 1e13);
        if !finite {
            break;
        }
        let res = std.residuals(&x, &lam, &z);
        let merit = res.max().max(s.iter().zip(&z).fold(0.0f64, |m, (a, b)| m.max(a * b)));
        if best.as_ref().is_none_or(|b| merit < b.0 || b.0.is_nan()) {
            best = Some((merit, x.clone(), lam.clone(), z.clone(), s.clone()));
        }
        if res.max() <= settings.tol {
            return Ok(IpmOutcome {
                x,
                lam,
                z,
                s,
                iterations: iter,
                residuals: res,
                converged: true,
            });
        }
        if iter >= settings.max_iter || small_steps >= 5 {
            break;
        }
        iter += 1;

        // Residuals of the perturbed KKT conditions.
        let mut r_d = std.h.mul_vec(&x);
        for (r, q) in r_d.iter_mut().zip(&std.q) {
            *r += q;
        }
        let neg: Vec<f64> = lam.iter().map(|l| -l).collect();
        std.e.tr_mul_add(&neg, &mut r_d);
        std.g.tr_mul_add(&z, &mut r_d);
        let r_e: Vec<f64> = std.e.mul_vec(&x).iter().zip(&std.e_rhs).map(|(a, b)| a - b).collect();
        let gx = std.g.mul_vec(&x);
        let r_g: Vec<f64> = (0..mg).map(|i| gx[i] + s[i] - std.g_rhs[i]).collect();
        let mu = if mg > 0 { dot(&s, &z) / mg as f64 } else { 0.0 };

        let w: Vec<f64> = z.iter().zip(&s).map(|(zi, si)| zi / si).collect();
        kkt.factor(&w)?;

        let direction = |r_c: &[f64]| -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
            let t: Vec<f64> = (0..mg).map(|i| w[i] * r_g[i] - r_c[i] / s[i]).collect();
            let mut rhs: Vec<f64> = r_d.iter().map(|v| -v).collect();
            let neg_t: Vec<f64> = t.iter().map(|v| -v).collect();
            std.g.tr_mul_add(&neg_t, &mut rhs);
            rhs.extend(r_e.iter().map(|v| -v));
            let sol = kkt.solve(&ops, &w, &rhs);
            let dx = sol[..n].to_vec();
            let dlam: Vec<f64> = sol[n..].iter().map(|y| -y).collect();
            let gdx = std.g.mul_vec(&dx);
            let dz: Vec<f64> = (0..mg).map(|i| w[i] * (gdx[i] + r_g[i]) - r_c[i] / s[i]).collect();
            let ds: Vec<f64> = (0..mg).map(|i| -r_g[i] - gdx[i]).collect();
            (dx, dlam, dz, ds)
        };

        let rc_aff: Vec<f64> = s.iter().zip(&z).map(|(a, b)| a * b).collect();
        let (dx_a, dlam_a, dz_a, ds_a) = direction(&rc_aff);
        let (dx, dlam, dz, ds) = if mg > 0 {
            let alpha_aff = step_to_boundary(&s, &ds_a).min(step_to_boundary(&z, &dz_a)).min(1.0);
            let mu_aff = (0..mg)
                .map(|i| (s[i] + alpha_aff * ds_a[i]) * (z[i] + alpha_aff * dz_a[i]))
                .sum::<f64>()
                / mg as f64;
            let sigma = (mu_aff / mu).powi(3).clamp(0.0, 1.0);
            let rc: Vec<f64> = (0..mg)
                .map(|i| s[i] * z[i] + ds_a[i] * dz_a[i] - sigma * mu)
                .collect();
            direction(&rc)
        } else {
            (dx_a, dlam_a, dz_a, ds_a)
        };

        let alpha_max = step_to_boundary(&s, &ds).min(step_to_boundary(&z, &dz));
        let alpha = (0.995 * alpha_max).min(1.0);
        if alpha < 1e-10 {
            small_steps += 1;
        } else {
            small_steps = 0;
        }
        for i in 0..n {
            x[i] += alpha * dx[i];
        }
        for i in 0..me {
            lam[i] += alpha * dlam[i];
        }
        for i in 0..mg {
            z[i] += alpha * dz[i];
            s[i] += alpha * ds[i];
        }
    }
    let Some((_, x, lam, z, s)) = best else {
        return Err(Error::Input("QP iteration produced non-finite values at the start point".into()));
    };
    let residuals = std.residuals(&x, &lam, &z);
    Ok(IpmOutcome {
        x,
        lam,
        z,
        s,
        iterations: iter,
        residuals,
        converged: false,
    })
}

/// Equality-constrained re-solve on the active set guessed from an interior
/// iterate. Returns `(x, lam, z)` if the result is primal and dual feasible.
fn polish(std: &StdForm, settings: &QpSettings, it: &IpmOutcome) -> Option<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let n = std.n();
    let me = std.e.nrows();
    let active: Vec<usize> = (0..std.g.nrows()).filter(|&i| it.z[i] > it.s[i]).collect();
    let e_aug = std.e.vstack(&std.g.select_rows(&active));
    let mut rhs_e = std.e_rhs.clone();
    rhs_e.extend(active.iter().map(|&i| std.g_rhs[i]));
    let empty = CsrMatrix::zeros(0, n);
    let mut kkt = Kkt::new(&std.h, &e_aug, &empty, settings);
    kkt.factor(&[]).ok()?;
    let ops = KktOperands {
        h: &std.h,
        e: &e_aug,
        g: &empty,
    };
    let mut rhs: Vec<f64> = std.q.iter().map(|v| -v).collect();
    rhs.extend_from_slice(&rhs_e);
    let sol = kkt.solve(&ops, &[], &rhs);
    let x = sol[..n].to_vec();
    let lam: Vec<f64> = sol[n..n + me].iter().map(|y| -y).collect();
    let mut z = vec![0.0; std.g.nrows()];
    for (k, &i) in active.iter().enumerate() {
        let v = sol[n + me + k];
        if v < -settings.tol {
            return None;
        }
        z[i] = v.max(0.0);
    }
    if !x.iter().chain(&lam).chain(&z).all(|v| v.is_finite()) {
        return None;
    }
    Some((x, lam, z))
}

struct Solver<'a> {
    problem: &'a QpProblem,
    settings: &'a QpSettings,
    std: StdForm,
    ineq_origin: Vec<IneqOrigin>,
    eq_origin: Vec<EqOrigin>,
}

impl<'a> Solver<'a> {
    fn new(problem: &'a QpProblem, settings: &'a QpSettings) -> Result<Self> {
        problem.check(settings.symmetry_tol)?;
        let n = problem.dim();
        let mut eq_trip: Vec<(usize, usize, f64)> = problem.a_eq.triplets().collect();
        let mut e_rhs = problem.b_eq.clone();
        let mut eq_origin: Vec<EqOrigin> = (0..problem.b_eq.len()).map(EqOrigin::Row).collect();
        let mut g_trip: Vec<(usize, usize, f64)> = problem.a_ineq.triplets().collect();
        let mut g_rhs = problem.b_ineq.clone();
        let mut ineq_origin: Vec<IneqOrigin> = (0..problem.b_ineq.len()).map(IneqOrigin::Row).collect();
        for i in 0..n {
            let (l, u) = (problem.lower[i], problem.upper[i]);
            if l == u {
                eq_trip.push((e_rhs.len(), i, 1.0));
                e_rhs.push(l);
                eq_origin.push(EqOrigin::Fixed(i));
                continue;
            }
            if u.is_finite() {
                g_trip.push((g_rhs.len(), i, 1.0));
                g_rhs.push(u);
                ineq_origin.push(IneqOrigin::Upper(i));
            }
            if l.is_finite() {
                g_trip.push((g_rhs.len(), i, -1.0));
                g_rhs.push(-l);
                ineq_origin.push(IneqOrigin::Lower(i));
            }
        }
        let std = StdForm {
            h: problem.hessian.clone(),
            q: problem.linear.clone(),
            e: CsrMatrix::from_triplets(e_rhs.len(), n, &eq_trip),
            e_rhs,
            g: CsrMatrix::from_triplets(g_rhs.len(), n, &g_trip),
            g_rhs,
        };
        Ok(Solver {
            problem,
            settings,
            std,
            ineq_origin,
            eq_origin,
        })
    }

    fn to_std_start(&self, warm: &QpSolution) -> IpmStart {
        let lam = self
            .eq_origin
            .iter()
            .map(|o| match *o {
                EqOrigin::Row(r) => warm.duals_eq[r],
                EqOrigin::Fixed(i) => warm.duals_lower[i] - warm.duals_upper[i],
            })
            .collect();
        let z = self
            .ineq_origin
            .iter()
            .map(|o| match *o {
                IneqOrigin::Row(r) => warm.duals_ineq[r],
                IneqOrigin::Upper(i) => warm.duals_upper[i],
                IneqOrigin::Lower(i) => warm.duals_lower[i],
            })
            .collect();
        IpmStart {
            x: warm.primal.clone(),
            lam,
            z,
        }
    }

    fn finish(&self, mut x: Vec<f64>, lam: &[f64], z: &[f64], status: QpStatus, iterations: usize, polished: bool) -> QpSolution {
        let n = self.problem.dim();
        for o in &self.eq_origin {
            if let EqOrigin::Fixed(i) = *o {
                x[i] = self.problem.lower[i];
            }
        }
        let mut duals_eq = vec![0.0; self.problem.b_eq.len()];
        let mut duals_ineq = vec![0.0; self.problem.b_ineq.len()];
        let mut duals_lower = vec![0.0; n];
        let mut duals_upper = vec![0.0; n];
        for (k, o) in self.eq_origin.iter().enumerate() {
            match *o {
                EqOrigin::Row(r) => duals_eq[r] = lam[k],
                EqOrigin::Fixed(i) => {
                    if lam[k] >= 0.0 {
                        duals_lower[i] = lam[k];
                    } else {
                        duals_upper[i] = -lam[k];
                    }
                }
            }
        }
        for (k, o) in self.ineq_origin.iter().enumerate() {
            match *o {
                IneqOrigin::Row(r) => duals_ineq[r] = z[k],
                IneqOrigin::Upper(i) => duals_upper[i] = z[k],
                IneqOrigin::Lower(i) => duals_lower[i] = z[k],
            }
        }
        let mut sol = QpSolution {
            objective: self.problem.objective(&x),
            primal: x,
            duals_eq,
            duals_ineq,
            duals_lower,
            duals_upper,
            status,
            kkt_residual: 0.0,
            residuals: KktResiduals {
                stationarity: 0.0,
                primal: 0.0,
                dual: 0.0,
                complementarity: 0.0,
            },
            iterations,
            polished,
            certificate: None,
        };
        sol.residuals = self.problem.kkt(&sol.point());
        sol.kkt_residual = sol.residuals.max();
        if sol.status == QpStatus::Optimal && sol.kkt_residual > self.settings.tol {
            sol.status = QpStatus::MaxIter;
        }
        sol
    }

    fn run(&self, warm: Option<&QpSolution>) -> Result<QpSolution> {
        let tol = self.settings.tol;
        if let Some(w) = warm {
            let start = self.to_std_start(w);
            let res = self.std.residuals(&start.x, &start.lam, &start.z);
            if res.max() <= tol {
                let sol = self.finish(start.x.clone(), &start.lam, &start.z, QpStatus::Optimal, 0, w.polished);
                if sol.kkt_residual <= tol {
                    return Ok(sol);
                }
            }
        }
        let start = warm.map(|w| self.to_std_start(w));
        let out = ipm(&self.std, self.settings, start)?;

        let near_optimal = out.converged || out.residuals.max() <= 1e3 * tol.max(1e-6);
        if self.settings.polish && near_optimal {
            if let Some((x, lam, z)) = polish(&self.std, self.settings, &out) {
                let res = self.std.residuals(&x, &lam, &z);
                if res.max() <= out.residuals.max() || (res.max() <= tol && !out.converged) {
                    let status = if res.max() <= tol { QpStatus::Optimal } else { QpStatus::MaxIter };
                    let sol = self.finish(x, &lam, &z, status, out.iterations, true);
                    if status == QpStatus::Optimal || !out.converged {
                        return Ok(sol);
                    }
                }
            }
        }
        if out.converged {
            return Ok(self.finish(out.x, &out.lam, &out.z, QpStatus::Optimal, out.iterations, false));
        }

        if let Some(cert) = self.infeasibility_certificate()? {
            let mut sol = self.finish(out.x, &out.lam, &out.z, QpStatus::Infeasible, out.iterations, false);
            sol.certificate = Some(cert);
            return Ok(sol);
        }
        Ok(self.finish(out.x, &out.lam, &out.z, QpStatus::MaxIter, out.iterations, false))
    }

    /// Minimizes the l1 constraint violation; a positive optimum yields a
    /// Farkas certificate from its duals.
    fn infeasibility_certificate(&self) -> Result<Option<InfeasibilityCertificate>> {
        let std = &self.std;
        let n = std.n();
        let me = std.e.nrows();
        let mg = std.g.nrows();
        let nv = n + 2 * me + mg;
        let prox = 1e-10;
        let h_trip: Vec<(usize, usize, f64)> = (0..n).map(|i| (i, i, prox)).collect();
        let mut q = vec![0.0; nv];
        q[n..].iter_mut().for_each(|v| *v = 1.0);

        let mut e_trip: Vec<(usize, usize, f64)> = std.e.triplets().collect();
        for r in 0..me {
            e_trip.push((r, n + r, 1.0));
            e_trip.push((r, n + me + r, -1.0));
        }
        let mut g_trip: Vec<(usize, usize, f64)> = std.g.triplets().collect();
        for r in 0..mg {
            g_trip.push((r, n + 2 * me + r, -1.0));
        }
        let mut g_rhs = std.g_rhs.clone();
        for k in 0..2 * me + mg {
            g_trip.push((mg + k, n + k, -1.0));
            g_rhs.push(0.0);
        }
        let phase1 = StdForm {
            h: CsrMatrix::from_triplets(nv, nv, &h_trip),
            q,
            e: CsrMatrix::from_triplets(me, nv, &e_trip),
            e_rhs: std.e_rhs.clone(),
            g: CsrMatrix::from_triplets(mg + 2 * me + mg, nv, &g_trip),
            g_rhs,
        };
        let mut settings = self.settings.clone();
        settings.max_iter = settings.max_iter.min(500);
        let out = ipm(&phase1, &settings, None)?;

        let lam = &out.lam[..me];
        let z = &out.z[..mg];
        // Certificate residual G'z - E'lam and margin h'z - e'lam.
        let mut resid = vec![0.0; n];
        std.g.tr_mul_add(z, &mut resid);
        let neg: Vec<f64> = lam.iter().map(|l| -l).collect();
        std.e.tr_mul_add(&neg, &mut resid);
        let margin = dot(&std.g_rhs, z) - dot(&std.e_rhs, lam);
        let residual = inf_norm(&resid);
        if !(margin < -self.settings.infeasibility_tol && residual <= 1e-6 * (1.0 + margin.abs())) {
            return Ok(None);
        }
        let nn = self.problem.dim();
        let mut cert = InfeasibilityCertificate {
            y_eq: vec![0.0; self.problem.b_eq.len()],
            y_ineq: vec![0.0; self.problem.b_ineq.len()],
            y_lower: vec![0.0; nn],
            y_upper: vec![0.0; nn],
            margin,
            residual,
        };
        for (k, o) in self.eq_origin.iter().enumerate() {
            match *o {
                EqOrigin::Row(r) => cert.y_eq[r] = lam[k],
                EqOrigin::Fixed(i) => {
                    if lam[k] >= 0.0 {
                        cert.y_lower[i] += lam[k];
                    } else {
                        cert.y_upper[i] -= lam[k];
                    }
                }
            }
        }
        for (k, o) in self.ineq_origin.iter().enumerate() {
            match *o {
                IneqOrigin::Row(r) => cert.y_ineq[r] = z[k].max(0.0),
                IneqOrigin::Upper(i) => cert.y_upper[i] += z[k].max(0.0),
                IneqOrigin::Lower(i) => cert.y_lower[i] += z[k].max(0.0),
            }
        }
        Ok(Some(cert))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_h(v: f64) -> CsrMatrix {
        CsrMatrix::from_dense(&[vec![v]])
    }

    #[test]
    fn lower_bound_active() {
        // min 1/2 x^2 s.t. x >= 1 written as -x <= -1.
        let p = QpProblem::unconstrained(scalar_h(1.0), vec![0.0])
            .with_inequalities(CsrMatrix::from_dense(&[vec![-1.0]]), vec![-1.0]);
        let s = solve_qp(&p, &QpSettings::default()).unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        assert!((s.primal[0] - 1.0).abs() < 1e-9);
        assert!((s.duals_ineq[0] - 1.0).abs() < 1e-9);
        assert!(s.kkt_residual <= 1e-8);
    }

    #[test]
    fn same_problem_as_variable_bound() {
        let p = QpProblem::unconstrained(scalar_h(1.0), vec![0.0]).with_bounds(vec![1.0], vec![f64::INFINITY]);
        let s = solve_qp(&p, &QpSettings::default()).unwrap();
        assert!((s.primal[0] - 1.0).abs() < 1e-9);
        assert!((s.duals_lower[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn equality_projection() {
        // min (x-2)^2 + (y-2)^2 s.t. x + y = 1.
        let h = CsrMatrix::from_dense(&[vec![2.0, 0.0], vec![0.0, 2.0]]);
        let p = QpProblem::unconstrained(h, vec![-4.0, -4.0])
            .with_equalities(CsrMatrix::from_dense(&[vec![1.0, 1.0]]), vec![1.0]);
        let s = solve_qp(&p, &QpSettings::default()).unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        assert!((s.primal[0] - 0.5).abs() < 1e-9 && (s.primal[1] - 0.5).abs() < 1e-9);
        // 2(x-2) - lambda = 0 -> lambda = -3.
        assert!((s.duals_eq[0] + 3.0).abs() < 1e-8);
    }

    #[test]
    fn contradictory_bounds_are_certified_infeasible() {
        // x >= 1 and x <= 0.
        let a = CsrMatrix::from_dense(&[vec![-1.0], vec![1.0]]);
        let p = QpProblem::unconstrained(scalar_h(1.0), vec![0.0]).with_inequalities(a, vec![-1.0, 0.0]);
        let s = solve_qp(&p, &QpSettings::default()).unwrap();
        assert_eq!(s.status, QpStatus::Infeasible);
        let c = s.certificate.unwrap();
        assert!(c.margin < 0.0);
        assert!(c.y_ineq.iter().all(|&y| y >= 0.0));
    }

    #[test]
    fn non_symmetric_hessian_rejected() {
        let h = CsrMatrix::from_dense(&[vec![1.0, 1.0], vec![0.0, 1.0]]);
        let p = QpProblem::unconstrained(h, vec![0.0, 0.0]);
        assert!(matches!(solve_qp(&p, &QpSettings::default()), Err(Error::Input(_))));
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let p = QpProblem::unconstrained(scalar_h(1.0), vec![0.0])
            .with_equalities(CsrMatrix::from_dense(&[vec![1.0, 1.0]]), vec![1.0]);
        assert!(matches!(solve_qp(&p, &QpSettings::default()), Err(Error::Dimension(_))));
    }

    #[test]
    fn lp_with_zero_hessian() {
        // min -x - y s.t. x + 2y <= 4, 3x + y <= 6, x, y >= 0 -> (1.6, 1.2).
        let p = QpProblem::unconstrained(CsrMatrix::zeros(2, 2), vec![-1.0, -1.0])
            .with_inequalities(CsrMatrix::from_dense(&[vec![1.0, 2.0], vec![3.0, 1.0]]), vec![4.0, 6.0])
            .with_bounds(vec![0.0, 0.0], vec![f64::INFINITY; 2]);
        let s = solve_qp(&p, &QpSettings::default()).unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        assert!((s.primal[0] - 1.6).abs() < 1e-8 && (s.primal[1] - 1.2).abs() < 1e-8);
    }

    #[test]
    fn fixed_variable_bounds() {
        let h = CsrMatrix::from_dense(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let p = QpProblem::unconstrained(h, vec![-3.0, -3.0]).with_bounds(vec![2.0, 0.0], vec![2.0, 1.0]);
        let s = solve_qp(&p, &QpSettings::default()).unwrap();
        assert_eq!(s.primal[0], 2.0);
        assert!((s.primal[1] - 1.0).abs() < 1e-9);
        assert!((s.duals_upper[0] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn warm_restart_of_solution_takes_no_iterations() {
        let a = CsrMatrix::from_dense(&[vec![-1.0, -1.0]]);
        let h = CsrMatrix::from_dense(&[vec![2.0, 0.5], vec![0.5, 1.0]]);
        let p = QpProblem::unconstrained(h, vec![1.0, 1.0]).with_inequalities(a, vec![-2.0]);
        let cold = solve_qp(&p, &QpSettings::default()).unwrap();
        let warm = solve_qp_warm(&p, &QpSettings::default(), &cold).unwrap();
        assert!(warm.iterations <= cold.iterations);
        assert_eq!(warm.iterations, 0);
        assert_eq!(warm.primal, cold.primal);
    }
}
