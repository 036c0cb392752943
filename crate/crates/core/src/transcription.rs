//! Multiple-shooting transcription of the coordination problem.
//!
//! Each vehicle owns a contiguous block of the decision vector,
//! `[t_0, v_0, a_0, ..., t_K, v_K, a_K, j_0, ..., j_{K-1}]`.
//!
//! Constraint conventions: equalities `g(x) = 0`, inequalities `h(x) <= 0`,
//! variable bounds `lower <= x <= upper`. Per vehicle the equality rows are
//! the three initial conditions followed by three shooting defects per
//! interval; inequality rows are one friction ellipse per node. Safety rows
//! of all zones follow the per-vehicle inequalities.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dynamics::{erk4_integrate, step_sensitivity, Control, EllipseTerms, LateralModel, SpatialState, V_FLOOR};
use crate::error::{Error, Result};
use crate::linalg::{clip_eigenvalues3, min_eigenvalue3, CsrMatrix};
use crate::qp::QpProblem;
use crate::scenario::{ConflictZoneSpec, PositionGrid, Scenario, VehicleSpec, ZoneKind};

/// Eigenvalue floor for the model Hessian blocks.
pub const HESSIAN_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TranscriptionConfig {
    pub lateral: LateralModel,
    /// RK4 steps per shooting interval.
    pub substeps: usize,
    pub initial_acceleration: f64,
}

impl Default for TranscriptionConfig {
    fn default() -> Self {
        TranscriptionConfig {
            lateral: LateralModel::Centripetal,
            substeps: 1,
            initial_acceleration: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Field {
    Time,
    Speed,
    Accel,
    Jerk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Block {
    offset: usize,
    nodes: usize,
}

/// Index map from `(vehicle slot, node, field)` to the stacked vector.
/// Vehicle slots follow the order the problem was built with.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecisionLayout {
    blocks: Vec<Block>,
    dim: usize,
}

impl DecisionLayout {
    /// Layout for vehicles with the given node counts.
    pub fn new(nodes: &[usize]) -> Self {
        let mut blocks = Vec::with_capacity(nodes.len());
        let mut offset = 0;
        for &n in nodes {
            assert!(n >= 2, "a vehicle block needs at least two nodes");
            blocks.push(Block { offset, nodes: n });
            offset += 4 * n - 1;
        }
        DecisionLayout { blocks, dim: offset }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vehicles(&self) -> usize {
        self.blocks.len()
    }

    pub fn nodes(&self, i: usize) -> usize {
        self.blocks[i].nodes
    }

    pub fn block(&self, i: usize) -> std::ops::Range<usize> {
        let b = self.blocks[i];
        b.offset..b.offset + 4 * b.nodes - 1
    }

    pub fn t(&self, i: usize, k: usize) -> usize {
        debug_assert!(k < self.blocks[i].nodes);
        self.blocks[i].offset + 3 * k
    }

    pub fn v(&self, i: usize, k: usize) -> usize {
        self.t(i, k) + 1
    }

    pub fn a(&self, i: usize, k: usize) -> usize {
        self.t(i, k) + 2
    }

    pub fn j(&self, i: usize, k: usize) -> usize {
        let b = self.blocks[i];
        debug_assert!(k + 1 < b.nodes);
        b.offset + 3 * b.nodes + k
    }

    pub fn index(&self, i: usize, k: usize, field: Field) -> usize {
        match field {
            Field::Time => self.t(i, k),
            Field::Speed => self.v(i, k),
            Field::Accel => self.a(i, k),
            Field::Jerk => self.j(i, k),
        }
    }

    /// Inverse of [`DecisionLayout::index`].
    pub fn locate(&self, flat: usize) -> Option<(usize, usize, Field)> {
        let i = self.blocks.iter().rposition(|b| b.offset <= flat)?;
        let b = self.blocks[i];
        let local = flat - b.offset;
        if local >= 4 * b.nodes - 1 {
            return None;
        }
        if local < 3 * b.nodes {
            let field = [Field::Time, Field::Speed, Field::Accel][local % 3];
            Some((i, local / 3, field))
        } else {
            Some((i, local - 3 * b.nodes, Field::Jerk))
        }
    }
}

/// Per-zone crossing orders and the binaries they came from.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CrossingOrders {
    /// Zone id to vehicle ids in crossing order.
    pub zones: BTreeMap<usize, Vec<usize>>,
    #[serde(default)]
    pub binaries: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SafetyKind {
    /// First vehicle leaves before the second enters.
    Exclusive,
    /// Headway at the zone entry.
    MergeEntry,
    /// Headway at a leader grid point strictly inside the zone.
    MergeInterior,
    /// Headway at the zone exit.
    MergeExit,
}

/// Linear safety row `sum(coef * x) <= rhs` for an ordered pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SafetyRow {
    pub zone: usize,
    pub kind: SafetyKind,
    pub leader: usize,
    pub follower: usize,
    pub terms: Vec<(usize, f64)>,
    pub rhs: f64,
}

impl SafetyRow {
    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|&(c, v)| v * x[c]).sum::<f64>() - self.rhs
    }
}

/// Linear-interpolation terms for `sign * t_i(p)`.
fn time_terms(layout: &DecisionLayout, grid: &PositionGrid, slot: usize, p: f64, sign: f64) -> Vec<(usize, f64)> {
    if let Some(k) = grid.index_of(p) {
        return vec![(layout.t(slot, k), sign)];
    }
    let (k, w) = grid.stencil(p);
    let mut out = Vec::with_capacity(2);
    if w < 1.0 {
        out.push((layout.t(slot, k), sign * (1.0 - w)));
    }
    if w > 0.0 {
        out.push((layout.t(slot, k + 1), sign * w));
    }
    out
}

fn row_terms(mut a: Vec<(usize, f64)>, b: Vec<(usize, f64)>) -> Vec<(usize, f64)> {
    for (c, v) in b {
        match a.iter_mut().find(|(cc, _)| *cc == c) {
            Some(e) => e.1 += v,
            None => a.push((c, v)),
        }
    }
    a
}

/// Safety rows requiring `first` to precede `second` in `zone`.
/// `slot_of` maps vehicle ids to layout slots.
pub fn ordered_pair_rows(
    layout: &DecisionLayout,
    grids: &[PositionGrid],
    slot_of: &dyn Fn(usize) -> Option<usize>,
    zone: &ConflictZoneSpec,
    first: usize,
    second: usize,
) -> Result<Vec<SafetyRow>> {
    let missing = |v: usize| Error::Input(format!("zone {}: vehicle {v} is not a member", zone.id));
    let mf = zone.member(first).ok_or_else(|| missing(first))?;
    let ms = zone.member(second).ok_or_else(|| missing(second))?;
    let sf = slot_of(first).ok_or_else(|| missing(first))?;
    let ss = slot_of(second).ok_or_else(|| missing(second))?;
    let (gf, gs) = (&grids[sf], &grids[ss]);
    let row = |kind, terms, rhs| SafetyRow {
        zone: zone.id,
        kind,
        leader: first,
        follower: second,
        terms,
        rhs,
    };
    if zone.kind.is_mutex() {
        let terms = row_terms(
            time_terms(layout, gf, sf, mf.p_out, 1.0),
            time_terms(layout, gs, ss, ms.p_in, -1.0),
        );
        return Ok(vec![row(SafetyKind::Exclusive, terms, 0.0)]);
    }
    let (dt, c) = zone.headway();
    let follower_end = gs.end();
    let pair = |p_leader: f64, p_follower: f64| {
        row_terms(
            time_terms(layout, gf, sf, p_leader, 1.0),
            time_terms(layout, gs, ss, p_follower.clamp(0.0, follower_end), -1.0),
        )
    };
    let mut rows = vec![row(SafetyKind::MergeEntry, pair(mf.p_in, ms.p_in + c), -dt)];
    for &p in gf.points() {
        if p > mf.p_in && p < mf.p_out {
            rows.push(row(SafetyKind::MergeInterior, pair(p, p - mf.p_in + ms.p_in + c), -dt));
        }
    }
    rows.push(row(SafetyKind::MergeExit, pair(mf.p_out, ms.p_out + c), -dt));
    Ok(rows)
}

#[derive(Debug, Clone)]
pub struct ObjectiveEval {
    pub value: f64,
    pub gradient: Vec<f64>,
    /// Exact Hessian, full symmetric storage.
    pub hessian: CsrMatrix,
}

#[derive(Debug, Clone)]
pub struct ConstraintEval {
    pub eq: Vec<f64>,
    pub eq_jac: CsrMatrix,
    pub ineq: Vec<f64>,
    pub ineq_jac: CsrMatrix,
}

/// Smooth program with bounds, `g(x) = 0`, `h(x) <= 0`, as consumed by the
/// SQP solver. Lagrangian: `f + lambda' g + mu' h`.
pub trait NonlinearProgram: Sync {
    fn dim(&self) -> usize;
    fn lower_bounds(&self) -> Vec<f64>;
    fn upper_bounds(&self) -> Vec<f64>;
    fn objective(&self, x: &[f64]) -> Result<f64>;
    fn objective_gradient(&self, x: &[f64]) -> Result<Vec<f64>>;
    fn constraints(&self, x: &[f64]) -> Result<ConstraintEval>;
    /// Constraint values only.
    fn constraint_values(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.constraints(x).map(|c| (c.eq, c.ineq))
    }
    /// Positive-definite model Hessian for the QP subproblem. Without
    /// duals only the objective curvature is used.
    fn model_hessian(&self, x: &[f64], duals: Option<(&[f64], &[f64])>) -> Result<CsrMatrix>;
}

/// Transcribed trajectory problem for a set of vehicles.
#[derive(Debug, Clone)]
pub struct NlpProblem {
    pub layout: DecisionLayout,
    pub vehicles: Vec<VehicleSpec>,
    pub grids: Vec<PositionGrid>,
    pub config: TranscriptionConfig,
    pub safety: Vec<SafetyRow>,
    kappa: Vec<Vec<f64>>,
}

fn check_speeds(layout: &DecisionLayout, x: &[f64]) -> Result<()> {
    for i in 0..layout.vehicles() {
        for k in 0..layout.nodes(i) {
            let v = x[layout.v(i, k)];
            if !(v >= V_FLOOR) {
                return Err(Error::Singularity { speed: v, floor: V_FLOOR });
            }
        }
    }
    Ok(())
}

/// Value, gradient and Hessian of `(P a^2 + Q j^2) h / v` over `(v, a, j)`.
fn interval_cost(p: f64, q: f64, h: f64, v: f64, a: f64, j: f64) -> (f64, [f64; 3], [[f64; 3]; 3]) {
    let s = p * a * a + q * j * j;
    let iv = 1.0 / v;
    let value = s * h * iv;
    let grad = [-s * h * iv * iv, 2.0 * p * a * h * iv, 2.0 * q * j * h * iv];
    let hvv = 2.0 * s * h * iv * iv * iv;
    let hva = -2.0 * p * a * h * iv * iv;
    let hvj = -2.0 * q * j * h * iv * iv;
    let hess = [[hvv, hva, hvj], [hva, 2.0 * p * h * iv, 0.0], [hvj, 0.0, 2.0 * q * h * iv]];
    (value, grad, hess)
}

impl NlpProblem {
    fn assemble(
        vehicles: Vec<VehicleSpec>,
        grids: Vec<PositionGrid>,
        config: TranscriptionConfig,
    ) -> Result<Self> {
        if vehicles.len() != grids.len() {
            return Err(Error::Dimension(format!(
                "{} vehicles but {} grids",
                vehicles.len(),
                grids.len()
            )));
        }
        for (v, g) in vehicles.iter().zip(&grids) {
            if g.len() < 2 || g.points()[0] != 0.0 || (g.end() - v.path_length).abs() > 1e-9 * v.path_length {
                return Err(Error::Dimension(format!(
                    "grid of vehicle {} does not span [0, {}]",
                    v.id, v.path_length
                )));
            }
        }
        let layout = DecisionLayout::new(&grids.iter().map(|g| g.len()).collect::<Vec<_>>());
        let kappa = vehicles
            .iter()
            .zip(&grids)
            .map(|(v, g)| g.points().iter().map(|&p| v.curvature.at(p)).collect())
            .collect();
        Ok(NlpProblem {
            layout,
            vehicles,
            grids,
            config,
            safety: Vec::new(),
            kappa,
        })
    }

    pub fn slot_of(&self, vehicle: usize) -> Option<usize> {
        self.vehicles.iter().position(|v| v.id == vehicle)
    }

    pub fn eq_count(&self) -> usize {
        (0..self.layout.vehicles()).map(|i| 3 * self.layout.nodes(i)).sum()
    }

    pub fn ineq_count(&self) -> usize {
        self.ellipse_count() + self.safety.len()
    }

    fn ellipse_count(&self) -> usize {
        (0..self.layout.vehicles()).map(|i| self.layout.nodes(i)).sum()
    }

    /// First equality row of vehicle slot `i`.
    pub fn eq_offset(&self, i: usize) -> usize {
        (0..i).map(|s| 3 * self.layout.nodes(s)).sum()
    }

    /// First ellipse row of vehicle slot `i`.
    pub fn ellipse_offset(&self, i: usize) -> usize {
        (0..i).map(|s| self.layout.nodes(s)).sum()
    }

    pub fn state(&self, x: &[f64], i: usize, k: usize) -> SpatialState {
        SpatialState {
            t: x[self.layout.t(i, k)],
            v: x[self.layout.v(i, k)],
            a: x[self.layout.a(i, k)],
        }
    }

    /// Constant-speed initial point: `v = v0`, `t` from cumulative
    /// `dp / v0`, zero acceleration and jerk.
    pub fn initial_guess(&self) -> Vec<f64> {
        let mut x = vec![0.0; self.layout.dim()];
        for (i, veh) in self.vehicles.iter().enumerate() {
            let pts = self.grids[i].points();
            for (k, &p) in pts.iter().enumerate() {
                x[self.layout.t(i, k)] = veh.initial_time + p / veh.initial_speed;
                x[self.layout.v(i, k)] = veh.initial_speed;
                x[self.layout.a(i, k)] = self.config.initial_acceleration;
            }
        }
        x
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.layout.dim() {
            return Err(Error::Dimension(format!(
                "point has {} entries, problem has {}",
                x.len(),
                self.layout.dim()
            )));
        }
        check_speeds(&self.layout, x)
    }

    pub fn eval_objective(&self, x: &[f64]) -> Result<ObjectiveEval> {
        self.eval_objective_inner(x, true)
    }

    fn eval_objective_inner(&self, x: &[f64], with_hessian: bool) -> Result<ObjectiveEval> {
        self.check_point(x)?;
        let n = self.layout.dim();
        let mut value = 0.0;
        let mut gradient = vec![0.0; n];
        let mut trip = Vec::new();
        for (i, veh) in self.vehicles.iter().enumerate() {
            let w = &veh.weights;
            let pts = self.grids[i].points();
            for k in 0..pts.len() - 1 {
                let idx = [self.layout.v(i, k), self.layout.a(i, k), self.layout.j(i, k)];
                let (f, g, h) = interval_cost(w.accel, w.jerk, pts[k + 1] - pts[k], x[idx[0]], x[idx[1]], x[idx[2]]);
                value += f;
                for r in 0..3 {
                    gradient[idx[r]] += g[r];
                    if with_hessian {
                        for c in 0..3 {
                            trip.push((idx[r], idx[c], h[r][c]));
                        }
                    }
                }
            }
            let tk = self.layout.t(i, pts.len() - 1);
            value += w.time * x[tk];
            gradient[tk] += w.time;
        }
        Ok(ObjectiveEval {
            value,
            gradient,
            hessian: CsrMatrix::from_triplets(n, n, &trip),
        })
    }

    pub fn eval_constraints(&self, x: &[f64]) -> Result<ConstraintEval> {
        self.eval_constraints_inner(x, true)
    }

    fn eval_constraints_inner(&self, x: &[f64], with_jac: bool) -> Result<ConstraintEval> {
        self.check_point(x)?;
        let n = self.layout.dim();
        let mut eq = Vec::with_capacity(self.eq_count());
        let mut eq_trip = Vec::new();
        let mut ineq = Vec::with_capacity(self.ineq_count());
        let mut ineq_trip = Vec::new();
        for (i, veh) in self.vehicles.iter().enumerate() {
            let pts = self.grids[i].points();
            let init = [veh.initial_time, veh.initial_speed, self.config.initial_acceleration];
            for (r, target) in init.iter().enumerate() {
                let col = self.layout.t(i, 0) + r;
                if with_jac {
                    eq_trip.push((eq.len(), col, 1.0));
                }
                eq.push(x[col] - target);
            }
            for k in 0..pts.len() - 1 {
                let s = self.state(x, i, k);
                let j = x[self.layout.j(i, k)];
                let control = Control { jerk: j };
                let next = self.state(x, i, k + 1);
                if !with_jac {
                    let end = erk4_integrate(&s, &control, pts[k], pts[k + 1], self.config.substeps)?;
                    eq.extend([next.t - end.t, next.v - end.v, next.a - end.a]);
                    continue;
                }
                let sens = step_sensitivity(&s, &control, pts[k + 1] - pts[k], self.config.substeps)?;
                let vals = [next.t - sens.next.t, next.v - sens.next.v, next.a - sens.next.a];
                let cols = [self.layout.t(i, k), self.layout.v(i, k), self.layout.a(i, k), self.layout.j(i, k)];
                for r in 0..3 {
                    eq_trip.push((eq.len(), self.layout.t(i, k + 1) + r, 1.0));
                    for c in 0..4 {
                        eq_trip.push((eq.len(), cols[c], -sens.jac[r][c]));
                    }
                    eq.push(vals[r]);
                }
            }
            for k in 0..pts.len() {
                let s = self.state(x, i, k);
                let b = &veh.bounds;
                let e = EllipseTerms::new(s.v, s.a, self.kappa[i][k], b.a_lon_max, b.a_lat_max, self.config.lateral);
                if with_jac {
                    ineq_trip.push((ineq.len(), self.layout.v(i, k), e.grad[0]));
                    ineq_trip.push((ineq.len(), self.layout.a(i, k), e.grad[1]));
                }
                ineq.push(e.value);
            }
        }
        for row in &self.safety {
            if with_jac {
                for &(c, v) in &row.terms {
                    ineq_trip.push((ineq.len(), c, v));
                }
            }
            ineq.push(row.eval(x));
        }
        let (eq_jac, ineq_jac) = if with_jac {
            (
                CsrMatrix::from_triplets(eq.len(), n, &eq_trip),
                CsrMatrix::from_triplets(ineq.len(), n, &ineq_trip),
            )
        } else {
            (CsrMatrix::zeros(0, n), CsrMatrix::zeros(0, n))
        };
        Ok(ConstraintEval {
            eq,
            eq_jac,
            ineq,
            ineq_jac,
        })
    }

    pub fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.layout.dim();
        let mut lo = vec![f64::NEG_INFINITY; n];
        let mut hi = vec![f64::INFINITY; n];
        for (i, veh) in self.vehicles.iter().enumerate() {
            let b = &veh.bounds;
            for k in 0..self.layout.nodes(i) {
                lo[self.layout.v(i, k)] = b.v_min;
                hi[self.layout.v(i, k)] = b.v_max;
                lo[self.layout.a(i, k)] = -b.a_lon_max;
                hi[self.layout.a(i, k)] = b.a_lon_max;
            }
        }
        (lo, hi)
    }

    /// Objective Hessian with every vehicle block shifted by
    /// `max(0, HESSIAN_FLOOR - lambda_min)`.
    pub fn regularized_objective_hessian(&self, x: &[f64]) -> Result<CsrMatrix> {
        self.check_point(x)?;
        let n = self.layout.dim();
        let mut trip = Vec::new();
        for (i, veh) in self.vehicles.iter().enumerate() {
            let w = &veh.weights;
            let pts = self.grids[i].points();
            // Time and the last node carry no curvature, so the block's
            // spectrum always includes zero.
            let mut lambda_min = 0.0f64;
            for k in 0..pts.len() - 1 {
                let idx = [self.layout.v(i, k), self.layout.a(i, k), self.layout.j(i, k)];
                let (_, _, h) = interval_cost(w.accel, w.jerk, pts[k + 1] - pts[k], x[idx[0]], x[idx[1]], x[idx[2]]);
                lambda_min = lambda_min.min(min_eigenvalue3(&h));
                for r in 0..3 {
                    for c in 0..3 {
                        trip.push((idx[r], idx[c], h[r][c]));
                    }
                }
            }
            let delta = (HESSIAN_FLOOR - lambda_min).max(0.0);
            for c in self.layout.block(i) {
                trip.push((c, c, delta));
            }
        }
        Ok(CsrMatrix::from_triplets(n, n, &trip))
    }

    /// Lagrangian Hessian with each node's `(v, a, j)` block projected onto
    /// eigenvalues `>= HESSIAN_FLOOR`.
    pub fn convexified_lagrangian_hessian(&self, x: &[f64], lam: &[f64], mu: &[f64]) -> Result<CsrMatrix> {
        self.check_point(x)?;
        if lam.len() != self.eq_count() || mu.len() != self.ineq_count() {
            return Err(Error::Dimension("dual vector sizes do not match the constraints".into()));
        }
        let n = self.layout.dim();
        let mut trip = Vec::new();
        for (i, veh) in self.vehicles.iter().enumerate() {
            let w = &veh.weights;
            let b = &veh.bounds;
            let pts = self.grids[i].points();
            let eo = self.eq_offset(i);
            let io = self.ellipse_offset(i);
            for k in 0..pts.len() {
                let s = self.state(x, i, k);
                let e = EllipseTerms::new(s.v, s.a, self.kappa[i][k], b.a_lon_max, b.a_lat_max, self.config.lateral);
                let m = mu[io + k];
                let mut block = [[0.0; 3]; 3];
                block[0][0] = m * e.hess[0][0];
                block[0][1] = m * e.hess[0][1];
                block[1][0] = m * e.hess[1][0];
                block[1][1] = m * e.hess[1][1];
                let last = k + 1 == pts.len();
                if !last {
                    let h = pts[k + 1] - pts[k];
                    let j = x[self.layout.j(i, k)];
                    let (_, _, hc) = interval_cost(w.accel, w.jerk, h, s.v, s.a, j);
                    let sens = step_sensitivity(&s, &Control { jerk: j }, h, self.config.substeps)?;
                    for r in 0..3 {
                        let l = lam[eo + 3 + 3 * k + r];
                        for p in 0..3 {
                            for q in 0..3 {
                                block[p][q] -= l * sens.hess[r][p][q];
                            }
                        }
                    }
                    for p in 0..3 {
                        for q in 0..3 {
                            block[p][q] += hc[p][q];
                        }
                    }
                } else {
                    block[2][2] = HESSIAN_FLOOR;
                }
                let clipped = clip_eigenvalues3(&block, HESSIAN_FLOOR);
                let idx = [self.layout.v(i, k), self.layout.a(i, k), if last { usize::MAX } else { self.layout.j(i, k) }];
                let dims = if last { 2 } else { 3 };
                for p in 0..dims {
                    for q in 0..dims {
                        trip.push((idx[p], idx[q], clipped[p][q]));
                    }
                }
                trip.push((self.layout.t(i, k), self.layout.t(i, k), HESSIAN_FLOOR));
            }
        }
        Ok(CsrMatrix::from_triplets(n, n, &trip))
    }

    /// Time of vehicle slot `i` at path position `p`, interpolated.
    pub fn time_at(&self, x: &[f64], i: usize, p: f64) -> f64 {
        time_terms(&self.layout, &self.grids[i], i, p, 1.0)
            .iter()
            .map(|&(c, w)| w * x[c])
            .sum()
    }
}

impl NonlinearProgram for NlpProblem {
    fn dim(&self) -> usize {
        self.layout.dim()
    }

    fn lower_bounds(&self) -> Vec<f64> {
        self.bounds().0
    }

    fn upper_bounds(&self) -> Vec<f64> {
        self.bounds().1
    }

    fn objective(&self, x: &[f64]) -> Result<f64> {
        self.eval_objective_inner(x, false).map(|o| o.value)
    }

    fn objective_gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.eval_objective_inner(x, false).map(|o| o.gradient)
    }

    fn constraints(&self, x: &[f64]) -> Result<ConstraintEval> {
        self.eval_constraints(x)
    }

    fn constraint_values(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.eval_constraints_inner(x, false).map(|c| (c.eq, c.ineq))
    }

    fn model_hessian(&self, x: &[f64], duals: Option<(&[f64], &[f64])>) -> Result<CsrMatrix> {
        match duals {
            None => self.regularized_objective_hessian(x),
            Some((lam, mu)) => self.convexified_lagrangian_hessian(x, lam, mu),
        }
    }
}

/// Single-vehicle problem without safety constraints.
pub fn build_unconstrained_nlp(
    vehicle: &VehicleSpec,
    grid: &PositionGrid,
    config: &TranscriptionConfig,
) -> Result<NlpProblem> {
    NlpProblem::assemble(vec![vehicle.clone()], vec![grid.clone()], config.clone())
}

/// All vehicles of the scenario, no safety constraints.
pub fn build_joint_nlp(scenario: &Scenario, grids: &[PositionGrid], config: &TranscriptionConfig) -> Result<NlpProblem> {
    NlpProblem::assemble(scenario.vehicles.clone(), grids.to_vec(), config.clone())
}

fn check_order(zone: &ConflictZoneSpec, order: &[usize]) -> Result<()> {
    for &v in order {
        if zone.member(v).is_none() {
            return Err(Error::Input(format!("zone {}: order references vehicle {v}, not a member", zone.id)));
        }
    }
    let mut got: Vec<usize> = order.to_vec();
    got.sort_unstable();
    let mut want: Vec<usize> = zone.members.iter().map(|m| m.vehicle).collect();
    want.sort_unstable();
    if got != want {
        return Err(Error::Input(format!(
            "zone {}: order {order:?} is not a permutation of the members {want:?}",
            zone.id
        )));
    }
    Ok(())
}

/// Coupled problem with every zone's crossing order fixed: consecutive
/// vehicles in each order get the zone's safety rows.
pub fn build_fixed_order_nlp(
    scenario: &Scenario,
    grids: &[PositionGrid],
    orders: &CrossingOrders,
    config: &TranscriptionConfig,
) -> Result<NlpProblem> {
    let mut nlp = build_joint_nlp(scenario, grids, config)?;
    let mut safety = Vec::new();
    for zone in &scenario.zones {
        let order = orders
            .zones
            .get(&zone.id)
            .ok_or_else(|| Error::Input(format!("no crossing order for zone {}", zone.id)))?;
        check_order(zone, order)?;
        for w in order.windows(2) {
            safety.extend(ordered_pair_rows(
                &nlp.layout,
                &nlp.grids,
                &|v| nlp.slot_of(v),
                zone,
                w[0],
                w[1],
            )?);
        }
    }
    if let Some(extra) = orders.zones.keys().find(|z| !scenario.zones.iter().any(|s| s.id == **z)) {
        return Err(Error::Input(format!("crossing order given for unknown zone {extra}")));
    }
    nlp.safety = safety;
    Ok(nlp)
}

/// One binary of the MIQP: `b = 0` means `first` precedes `second`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairBinary {
    pub zone: usize,
    pub first: usize,
    pub second: usize,
    /// Column of the binary in the MIQP vector.
    pub column: usize,
}

/// Quadratic model over `[dW; b]`: minimize
/// `1/2 y'Hy + linear'y + alpha` subject to linear rows and bounds, with
/// `binary_mask` marking the 0/1 columns.
#[derive(Debug, Clone)]
pub struct MiqpProblem {
    pub hessian: CsrMatrix,
    pub linear: Vec<f64>,
    pub alpha: f64,
    pub a_eq: CsrMatrix,
    pub b_eq: Vec<f64>,
    pub a_ineq: CsrMatrix,
    pub b_ineq: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub binary_mask: Vec<bool>,
    /// Big-M constant per zone id.
    pub big_m: BTreeMap<usize, f64>,
    pub pairs: Vec<PairBinary>,
    /// Linearization point `W**`.
    pub base: Vec<f64>,
    /// The joint problem the model was built from.
    pub nlp: NlpProblem,
    pub zones: Vec<ConflictZoneSpec>,
    /// Range of safety rows within the inequality block.
    pub safety_rows: std::ops::Range<usize>,
}

impl MiqpProblem {
    pub fn dim(&self) -> usize {
        self.linear.len()
    }

    pub fn binaries(&self) -> Vec<usize> {
        (0..self.dim()).filter(|&c| self.binary_mask[c]).collect()
    }

    pub fn objective(&self, y: &[f64]) -> f64 {
        0.5 * crate::linalg::dot(y, &self.hessian.mul_vec(y)) + crate::linalg::dot(&self.linear, y) + self.alpha
    }

    /// Continuous relaxation with binaries in `[0, 1]`.
    pub fn as_qp(&self) -> QpProblem {
        QpProblem::unconstrained(self.hessian.clone(), self.linear.clone())
            .with_equalities(self.a_eq.clone(), self.b_eq.clone())
            .with_inequalities(self.a_ineq.clone(), self.b_ineq.clone())
            .with_bounds(self.lower.clone(), self.upper.clone())
    }

    /// `W** + dW` for a solution vector.
    pub fn trajectory_point(&self, y: &[f64]) -> Vec<f64> {
        self.base.iter().zip(y).map(|(b, d)| b + d).collect()
    }

    /// Entry time of `vehicle` into `zone` at a solution vector.
    pub fn entry_time(&self, y: &[f64], zone: &ConflictZoneSpec, vehicle: usize) -> Option<f64> {
        let slot = self.nlp.slot_of(vehicle)?;
        let m = zone.member(vehicle)?;
        let w = self.trajectory_point(&y[..self.nlp.layout.dim()]);
        Some(self.nlp.time_at(&w, slot, m.p_in))
    }
}

/// Big-M constant: twice the spread between the earliest start and the
/// latest possible finish (plus the headway for merge zones).
pub fn zone_big_m(scenario: &Scenario, zone: &ConflictZoneSpec) -> f64 {
    let members: Vec<&VehicleSpec> = zone.members.iter().filter_map(|m| scenario.vehicle(m.vehicle)).collect();
    let latest = members
        .iter()
        .map(|v| v.initial_time + v.path_length / v.bounds.v_min)
        .fold(f64::NEG_INFINITY, f64::max);
    let earliest = members.iter().map(|v| v.initial_time).fold(f64::INFINITY, f64::min);
    let headway = if zone.kind == ZoneKind::MergeSplit { zone.headway().0 } else { 0.0 };
    2.0 * (latest - earliest) + headway
}

/// Quadratic approximation around `base` (stacked over the scenario's
/// vehicles): objective-only Hessian, linearized dynamics and ellipse
/// rows, and a pair of big-M safety row groups per unordered zone pair.
pub fn build_quadratic_approximation(
    scenario: &Scenario,
    grids: &[PositionGrid],
    base: &[f64],
    config: &TranscriptionConfig,
) -> Result<MiqpProblem> {
    let nlp = build_joint_nlp(scenario, grids, config)?;
    let n = nlp.layout.dim();
    if base.len() != n {
        return Err(Error::Dimension(format!("guess has {} entries, problem has {n}", base.len())));
    }
    let obj = nlp.eval_objective(base)?;
    let hess_w = nlp.regularized_objective_hessian(base)?;
    let cons = nlp.eval_constraints(base)?;

    let pairs_per_zone: Vec<Vec<(usize, usize)>> = scenario.zones.iter().map(|z| z.pairs()).collect();
    let nb: usize = pairs_per_zone.iter().map(|p| p.len()).sum();
    let dim = n + nb;

    let hessian = hess_w.widen(dim);
    let hessian = CsrMatrix::from_triplets(dim, dim, &hessian.triplets().collect::<Vec<_>>());
    let mut linear = obj.gradient.clone();
    linear.resize(dim, 0.0);

    let a_eq = CsrMatrix::from_triplets(cons.eq.len(), dim, &cons.eq_jac.triplets().collect::<Vec<_>>());
    let b_eq: Vec<f64> = cons.eq.iter().map(|g| -g).collect();

    let mut ineq_trip: Vec<(usize, usize, f64)> = cons.ineq_jac.triplets().collect();
    let mut b_ineq: Vec<f64> = cons.ineq.iter().map(|h| -h).collect();
    let safety_start = b_ineq.len();
    let mut pairs = Vec::with_capacity(nb);
    let mut big_m = BTreeMap::new();
    let mut column = n;
    for (zone, zone_pairs) in scenario.zones.iter().zip(&pairs_per_zone) {
        let m = zone_big_m(scenario, zone);
        big_m.insert(zone.id, m);
        for &(first, second) in zone_pairs {
            // b = 0: `first` leads, rows relaxed by b M.
            // b = 1: `second` leads, rows relaxed by (1 - b) M.
            for (lead, follow, coef, shift) in [(first, second, -m, 0.0), (second, first, m, m)] {
                for row in ordered_pair_rows(&nlp.layout, &nlp.grids, &|v| nlp.slot_of(v), zone, lead, follow)? {
                    let r = b_ineq.len();
                    for &(c, v) in &row.terms {
                        ineq_trip.push((r, c, v));
                    }
                    ineq_trip.push((r, column, coef));
                    b_ineq.push(shift - row.eval(base));
                }
            }
            pairs.push(PairBinary {
                zone: zone.id,
                first,
                second,
                column,
            });
            column += 1;
        }
    }
    let safety_end = b_ineq.len();
    let a_ineq = CsrMatrix::from_triplets(b_ineq.len(), dim, &ineq_trip);

    let (lo, hi) = nlp.bounds();
    let mut lower: Vec<f64> = lo.iter().zip(base).map(|(l, b)| l - b).collect();
    let mut upper: Vec<f64> = hi.iter().zip(base).map(|(u, b)| u - b).collect();
    lower.resize(dim, 0.0);
    upper.resize(dim, 1.0);
    let mut binary_mask = vec![false; n];
    binary_mask.resize(dim, true);

    Ok(MiqpProblem {
        hessian,
        linear,
        alpha: obj.value,
        a_eq,
        b_eq,
        a_ineq,
        b_ineq,
        lower,
        upper,
        binary_mask,
        big_m,
        pairs,
        base: base.to_vec(),
        nlp,
        zones: scenario.zones.clone(),
        safety_rows: safety_start..safety_end,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::erk4_step;
    use crate::scenario::tests::vehicle;
    use crate::scenario::ZoneMember;

    fn grid(points: &[f64]) -> PositionGrid {
        PositionGrid::from_points(points.to_vec()).unwrap()
    }

    fn uniform(length: f64, intervals: usize) -> PositionGrid {
        grid(&(0..=intervals).map(|k| length * k as f64 / intervals as f64).collect::<Vec<_>>())
    }

    fn pair_scenario(kind: ZoneKind, a: (f64, f64), b: (f64, f64)) -> Scenario {
        Scenario {
            vehicles: vec![vehicle(1, 100.0), vehicle(2, 100.0)],
            zones: vec![ConflictZoneSpec {
                id: 0,
                kind,
                members: vec![
                    ZoneMember { vehicle: 1, p_in: a.0, p_out: a.1 },
                    ZoneMember { vehicle: 2, p_in: b.0, p_out: b.1 },
                ],
                headway_time: (kind == ZoneKind::MergeSplit).then_some(0.5),
                headway_distance: (kind == ZoneKind::MergeSplit).then_some(5.0),
            }],
            grid_points: 10,
        }
    }

    #[test]
    fn layout_is_a_bijection() {
        let l = DecisionLayout::new(&[11, 4, 2]);
        assert_eq!(l.dim(), 43 + 15 + 7);
        let mut seen = vec![false; l.dim()];
        for i in 0..3 {
            for k in 0..l.nodes(i) {
                for f in [Field::Time, Field::Speed, Field::Accel, Field::Jerk] {
                    if f == Field::Jerk && k + 1 == l.nodes(i) {
                        continue;
                    }
                    let flat = l.index(i, k, f);
                    assert!(!seen[flat]);
                    seen[flat] = true;
                    assert_eq!(l.locate(flat), Some((i, k, f)));
                }
            }
        }
        assert!(seen.iter().all(|&s| s));
        assert_eq!(l.locate(l.dim()), None);
    }

    #[test]
    fn ten_intervals_give_43_variables_and_33_equalities() {
        let nlp = build_unconstrained_nlp(&vehicle(1, 100.0), &uniform(100.0, 10), &TranscriptionConfig::default()).unwrap();
        assert_eq!(nlp.layout.dim(), 43);
        assert_eq!(nlp.eq_count(), 33);
        assert_eq!(nlp.ineq_count(), 11);
    }

    #[test]
    fn single_interval_objective_and_hessian_block() {
        let nlp = build_unconstrained_nlp(&vehicle(1, 10.0), &grid(&[0.0, 10.0]), &TranscriptionConfig::default()).unwrap();
        let l = &nlp.layout;
        let mut x = vec![0.0; l.dim()];
        x[l.v(0, 0)] = 10.0;
        x[l.a(0, 0)] = 2.0;
        x[l.j(0, 0)] = 1.0;
        x[l.v(0, 1)] = 10.0;
        x[l.t(0, 1)] = 5.0;
        let obj = nlp.eval_objective(&x).unwrap();
        assert!((obj.value - 55.0).abs() < 1e-12);
        let (v, a) = (l.v(0, 0), l.a(0, 0));
        let h = |r, c| obj.hessian.get(r, c);
        assert!((h(v, v) - 2.0 * 5.0 * 10.0 / 1000.0).abs() < 1e-12);
        assert!((h(v, a) + 2.0 * 2.0 * 10.0 / 100.0).abs() < 1e-12);
        assert!((h(a, v) - h(v, a)).abs() < 1e-15);
        assert!((h(a, a) - 2.0 * 10.0 / 10.0).abs() < 1e-12);
        assert!((obj.gradient[l.t(0, 1)] - 10.0).abs() < 1e-12);
    }

    #[test]
    fn objective_refuses_speeds_below_the_floor() {
        let nlp = build_unconstrained_nlp(&vehicle(1, 10.0), &grid(&[0.0, 10.0]), &TranscriptionConfig::default()).unwrap();
        let x = vec![0.0; nlp.layout.dim()];
        assert!(matches!(nlp.eval_objective(&x), Err(Error::Singularity { .. })));
    }

    #[test]
    fn straight_path_ellipse_is_longitudinal_only() {
        let nlp = build_unconstrained_nlp(&vehicle(1, 100.0), &uniform(100.0, 4), &TranscriptionConfig::default()).unwrap();
        let mut x = nlp.initial_guess();
        for k in 0..5 {
            x[nlp.layout.a(0, k)] = 2.0;
        }
        let c = nlp.eval_constraints(&x).unwrap();
        for h in &c.ineq {
            assert!((h - (0.25 - 1.0)).abs() < 1e-12, "{h}");
        }
    }

    #[test]
    fn chained_rk4_steps_have_zero_defects() {
        let mut veh = vehicle(1, 120.0);
        veh.initial_time = 2.0;
        let g = uniform(120.0, 12);
        let nlp = build_unconstrained_nlp(&veh, &g, &TranscriptionConfig::default()).unwrap();
        let l = &nlp.layout;
        let mut x = vec![0.0; l.dim()];
        let mut s = SpatialState { t: 2.0, v: 10.0, a: 0.0 };
        for k in 0..=12 {
            x[l.t(0, k)] = s.t;
            x[l.v(0, k)] = s.v;
            x[l.a(0, k)] = s.a;
            if k < 12 {
                let j = 0.004 * (k as f64 - 6.0);
                x[l.j(0, k)] = j;
                s = erk4_step(&s, &Control { jerk: j }, g.points()[k], g.points()[k + 1]).unwrap();
            }
        }
        let c = nlp.eval_constraints(&x).unwrap();
        assert!(c.eq.iter().all(|d| d.abs() <= 1e-12), "{:?}", c.eq);
    }

    #[test]
    fn intersection_pair_adds_one_row() {
        let s = pair_scenario(ZoneKind::Intersection, (40.0, 50.0), (60.0, 70.0));
        let grids = crate::scenario::build_grids(&s).unwrap();
        let orders = CrossingOrders {
            zones: BTreeMap::from([(0, vec![1, 2])]),
            binaries: vec![],
        };
        let nlp = build_fixed_order_nlp(&s, &grids, &orders, &TranscriptionConfig::default()).unwrap();
        assert_eq!(nlp.safety.len(), 1);
        let row = &nlp.safety[0];
        let out1 = nlp.layout.t(0, grids[0].index_of(50.0).unwrap());
        let in2 = nlp.layout.t(1, grids[1].index_of(60.0).unwrap());
        let mut terms = row.terms.clone();
        terms.sort_by_key(|t| t.0);
        assert_eq!(terms, vec![(out1, 1.0), (in2, -1.0)]);
        assert_eq!(row.rhs, 0.0);
    }

    #[test]
    fn merge_pair_adds_interior_points_plus_two() {
        let s = pair_scenario(ZoneKind::MergeSplit, (30.0, 70.0), (20.0, 60.0));
        let grids = crate::scenario::build_grids(&s).unwrap();
        let m = grids[0].points().iter().filter(|&&p| p > 30.0 && p < 70.0).count();
        assert!(m > 0);
        let orders = CrossingOrders {
            zones: BTreeMap::from([(0, vec![1, 2])]),
            binaries: vec![],
        };
        let nlp = build_fixed_order_nlp(&s, &grids, &orders, &TranscriptionConfig::default()).unwrap();
        assert_eq!(nlp.safety.len(), m + 2);
        assert!(nlp.safety.iter().all(|r| r.rhs == -0.5));
    }

    #[test]
    fn shifted_position_on_a_grid_point_uses_one_time() {
        let s = pair_scenario(ZoneKind::MergeSplit, (30.0, 70.0), (25.0, 65.0));
        let g = vec![uniform(100.0, 10), uniform(100.0, 10)];
        let layout = DecisionLayout::new(&[11, 11]);
        let rows = ordered_pair_rows(&layout, &g, &|v| Some(v - 1), &s.zones[0], 1, 2).unwrap();
        // Follower entry 25 + c = 30 is grid point 3.
        assert_eq!(rows[0].kind, SafetyKind::MergeEntry);
        let follower: Vec<_> = rows[0].terms.iter().filter(|t| t.1 < 0.0).collect();
        assert_eq!(follower, vec![&(layout.t(1, 3), -1.0)]);
        // Interior leader point 40 maps to 40 - 30 + 30 = 40.
        let interior = &rows[1];
        assert_eq!(interior.kind, SafetyKind::MergeInterior);
        assert!(interior.terms.contains(&(layout.t(1, 4), -1.0)));
    }

    #[test]
    fn order_must_be_a_permutation_of_members() {
        let s = pair_scenario(ZoneKind::Intersection, (40.0, 50.0), (60.0, 70.0));
        let grids = crate::scenario::build_grids(&s).unwrap();
        let cfg = TranscriptionConfig::default();
        for bad in [vec![1], vec![1, 3], vec![1, 1]] {
            let orders = CrossingOrders {
                zones: BTreeMap::from([(0, bad)]),
                binaries: vec![],
            };
            assert!(build_fixed_order_nlp(&s, &grids, &orders, &cfg).is_err());
        }
        assert!(build_fixed_order_nlp(&s, &grids, &CrossingOrders::default(), &cfg).is_err());
    }

    #[test]
    fn fixed_binary_rows_reproduce_the_ordered_constraints() {
        let s = pair_scenario(ZoneKind::MergeSplit, (30.0, 70.0), (20.0, 60.0));
        let grids = crate::scenario::build_grids(&s).unwrap();
        let cfg = TranscriptionConfig::default();
        let base = build_joint_nlp(&s, &grids, &cfg).unwrap().initial_guess();
        let miqp = build_quadratic_approximation(&s, &grids, &base, &cfg).unwrap();
        assert_eq!(miqp.binaries().len(), 1);
        let col = miqp.pairs[0].column;
        let m = miqp.big_m[&0];
        let n = base.len();
        let dw: Vec<f64> = (0..n).map(|c| 0.01 * ((c * 7 % 13) as f64 - 6.0)).collect();
        let w: Vec<f64> = base.iter().zip(&dw).map(|(a, b)| a + b).collect();

        for (b, lead, follow) in [(0.0, 1, 2), (1.0, 2, 1)] {
            let mut y = dw.clone();
            y.push(b);
            let nlp = build_fixed_order_nlp(
                &s,
                &grids,
                &CrossingOrders {
                    zones: BTreeMap::from([(0, vec![lead, follow])]),
                    binaries: vec![],
                },
                &cfg,
            )
            .unwrap();
            let want: Vec<f64> = nlp.safety.iter().map(|r| r.eval(&w)).collect();
            let ay = miqp.a_ineq.mul_vec(&y);
            let mut active = Vec::new();
            let mut relaxed = Vec::new();
            for r in miqp.safety_rows.clone() {
                let value = ay[r] - miqp.b_ineq[r];
                let relax = miqp.a_ineq.get(r, col) * b + if miqp.a_ineq.get(r, col) > 0.0 { -m } else { 0.0 };
                if relax == 0.0 {
                    active.push(value);
                } else {
                    relaxed.push(value - relax);
                    assert_eq!(relax, -m);
                }
            }
            assert_eq!(active.len(), want.len());
            for (a, e) in active.iter().zip(&want) {
                assert!((a - e).abs() < 1e-9, "{a} vs {e}");
            }
            assert_eq!(relaxed.len(), want.len());
        }
    }

    #[test]
    fn binary_count_is_pairwise() {
        let mut s = pair_scenario(ZoneKind::Intersection, (40.0, 50.0), (60.0, 70.0));
        s.vehicles.push(vehicle(3, 100.0));
        s.zones[0].members.push(ZoneMember { vehicle: 3, p_in: 20.0, p_out: 30.0 });
        let grids = crate::scenario::build_grids(&s).unwrap();
        let cfg = TranscriptionConfig::default();
        let base = build_joint_nlp(&s, &grids, &cfg).unwrap().initial_guess();
        let miqp = build_quadratic_approximation(&s, &grids, &base, &cfg).unwrap();
        assert_eq!(miqp.binaries().len(), 3);
        assert_eq!(miqp.safety_rows.len(), 6);
        let h = miqp.hessian.to_dense();
        for &c in &miqp.binaries() {
            assert!(h.iter().all(|row| row[c] == 0.0) && h[c].iter().all(|&v| v == 0.0));
        }
    }
}
