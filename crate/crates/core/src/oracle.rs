//! Independent checks: collision validation of realized trajectories, a
//! KKT residual checker, and exhaustive enumeration oracles for small
//! instances.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::coordinator::{solve_uncoordinated, CoordinatorConfig, Trajectory};
use crate::error::{Error, Result};
use crate::qp::{solve_qp, QpProblem, QpSettings, QpStatus};
use crate::scenario::{build_grids, Scenario, ZoneKind};
use crate::sqp::{solve_nlp, NlpDuals, NlpResiduals, SqpStatus};
use crate::transcription::{build_fixed_order_nlp, CrossingOrders, NonlinearProgram, SafetyKind};

/// Default checker tolerance in seconds.
pub const CHECK_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct Violation {
    pub leader: usize,
    pub follower: usize,
    pub kind: SafetyKind,
    /// Leader path position the violated condition refers to.
    pub position: f64,
    /// Amount by which the condition fails, in seconds.
    pub magnitude: f64,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct ZoneCheck {
    pub zone: usize,
    pub kind: ZoneKind,
    pub passed: bool,
    /// Members sorted by realized entry time.
    pub realized_order: Vec<usize>,
    /// Merge zones: smallest realized time gap over all headway conditions.
    pub min_headway: Option<f64>,
    pub violations: Vec<Violation>,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct CollisionReport {
    pub passed: bool,
    pub tol: f64,
    pub zones: Vec<ZoneCheck>,
}

impl CollisionReport {
    pub fn violation_count(&self) -> usize {
        self.zones.iter().map(|z| z.violations.len()).sum()
    }

    pub fn zone(&self, id: usize) -> Option<&ZoneCheck> {
        self.zones.iter().find(|z| z.zone == id)
    }
}

/// Piecewise-linear time along a trajectory, clamped at the ends.
fn time_at(tr: &Trajectory, p: f64) -> f64 {
    let ps = &tr.positions;
    let n = ps.len();
    if p <= ps[0] {
        return tr.times[0];
    }
    if p >= ps[n - 1] {
        return tr.times[n - 1];
    }
    let hi = ps.partition_point(|&x| x < p);
    if ps[hi] == p {
        return tr.times[hi];
    }
    let lo = hi - 1;
    let w = (p - ps[lo]) / (ps[hi] - ps[lo]);
    tr.times[lo] + w * (tr.times[hi] - tr.times[lo])
}

/// `(kind, leader position, slack)` of every headway condition with
/// `slack >= 0` meaning satisfied.
fn merge_slacks(
    lead: &Trajectory,
    follow: &Trajectory,
    (l_in, l_out): (f64, f64),
    (f_in, f_out): (f64, f64),
    dt: f64,
    c: f64,
) -> Vec<(SafetyKind, f64, f64)> {
    let end = *follow.positions.last().unwrap();
    let gap = |pl: f64, pf: f64| time_at(follow, pf.clamp(0.0, end)) - time_at(lead, pl) - dt;
    let mut out = vec![(SafetyKind::MergeEntry, l_in, gap(l_in, f_in + c))];
    for &p in &lead.positions {
        if p > l_in && p < l_out {
            out.push((SafetyKind::MergeInterior, p, gap(p, p - l_in + f_in + c)));
        }
    }
    out.push((SafetyKind::MergeExit, l_out, gap(l_out, f_out + c)));
    out
}

fn check_trajectory(tr: &Trajectory) -> Result<()> {
    let n = tr.positions.len();
    if n < 2 || tr.times.len() != n || tr.speeds.len() != n || tr.accels.len() != n {
        return Err(Error::Dimension(format!("trajectory of vehicle {} has inconsistent lengths", tr.vehicle)));
    }
    if tr.positions.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Input(format!("trajectory of vehicle {}: positions not increasing", tr.vehicle)));
    }
    if tr.times.iter().chain(&tr.positions).any(|v| !v.is_finite()) {
        return Err(Error::Input(format!("trajectory of vehicle {}: non-finite values", tr.vehicle)));
    }
    Ok(())
}

/// Re-derives each zone's occupancy order from the realized entry times and
/// checks the separation conditions between consecutive vehicles.
pub fn check_collisions(scenario: &Scenario, trajectories: &[Trajectory], tol: f64) -> Result<CollisionReport> {
    let mut by_id: BTreeMap<usize, &Trajectory> = BTreeMap::new();
    for tr in trajectories {
        check_trajectory(tr)?;
        if by_id.insert(tr.vehicle, tr).is_some() {
            return Err(Error::Input(format!("duplicate trajectory for vehicle {}", tr.vehicle)));
        }
    }
    for v in &scenario.vehicles {
        let tr = by_id
            .get(&v.id)
            .ok_or_else(|| Error::Input(format!("no trajectory for vehicle {}", v.id)))?;
        let end = *tr.positions.last().unwrap();
        if tr.positions[0] != 0.0 || (end - v.path_length).abs() > 1e-9 * v.path_length.max(1.0) {
            return Err(Error::Dimension(format!(
                "trajectory of vehicle {} spans [{}, {end}], path is [0, {}]",
                v.id, tr.positions[0], v.path_length
            )));
        }
    }

    let mut zones = Vec::new();
    for zone in &scenario.zones {
        let mut entries: Vec<(f64, usize)> = zone
            .members
            .iter()
            .map(|m| (time_at(by_id[&m.vehicle], m.p_in), m.vehicle))
            .collect();
        entries.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let order: Vec<usize> = entries.iter().map(|e| e.1).collect();
        let mut violations = Vec::new();
        let mut min_headway: Option<f64> = None;
        for w in order.windows(2) {
            let (a, b) = (w[0], w[1]);
            let (ma, mb) = (zone.member(a).unwrap(), zone.member(b).unwrap());
            let (ta, tb) = (by_id[&a], by_id[&b]);
            if zone.kind.is_mutex() {
                let over = time_at(ta, ma.p_out) - time_at(tb, mb.p_in);
                if over > tol {
                    violations.push(Violation {
                        leader: a,
                        follower: b,
                        kind: SafetyKind::Exclusive,
                        position: ma.p_out,
                        magnitude: over,
                    });
                }
                continue;
            }
            let (dt, c) = zone.headway();
            let forward = merge_slacks(ta, tb, (ma.p_in, ma.p_out), (mb.p_in, mb.p_out), dt, c);
            let backward = merge_slacks(tb, ta, (mb.p_in, mb.p_out), (ma.p_in, ma.p_out), dt, c);
            let worst = |s: &[(SafetyKind, f64, f64)]| s.iter().map(|x| x.2).fold(f64::INFINITY, f64::min);
            let (slacks, leader, follower) = if worst(&forward) >= worst(&backward) {
                (forward, a, b)
            } else {
                (backward, b, a)
            };
            let gap = worst(&slacks) + dt;
            min_headway = Some(min_headway.map_or(gap, |g: f64| g.min(gap)));
            for (kind, position, slack) in slacks {
                if slack < -tol {
                    violations.push(Violation {
                        leader,
                        follower,
                        kind,
                        position,
                        magnitude: -slack,
                    });
                }
            }
        }
        zones.push(ZoneCheck {
            zone: zone.id,
            kind: zone.kind,
            passed: violations.is_empty(),
            realized_order: order,
            min_headway,
            violations,
        });
    }
    Ok(CollisionReport {
        passed: zones.iter().all(|z| z.passed),
        tol,
        zones,
    })
}

/// First-order residuals of `problem` at `(x, duals)` under the convention
/// `grad f + Jg' eq + Jh' ineq - lower + upper = 0`.
pub fn check_kkt(problem: &dyn NonlinearProgram, x: &[f64], duals: &NlpDuals) -> Result<NlpResiduals> {
    let n = problem.dim();
    let cons = problem.constraints(x)?;
    if x.len() != n
        || duals.lower.len() != n
        || duals.upper.len() != n
        || duals.eq.len() != cons.eq.len()
        || duals.ineq.len() != cons.ineq.len()
    {
        return Err(Error::Dimension("point or duals do not match the problem".into()));
    }
    let grad = problem.objective_gradient(x)?;
    let lo = problem.lower_bounds();
    let hi = problem.upper_bounds();

    let mut stat = grad;
    for (r, c, v) in cons.eq_jac.triplets() {
        stat[c] += v * duals.eq[r];
    }
    for (r, c, v) in cons.ineq_jac.triplets() {
        stat[c] += v * duals.ineq[r];
    }
    let mut stationarity = 0.0f64;
    let mut primal = 0.0f64;
    let mut dual = 0.0f64;
    let mut compl = 0.0f64;
    for i in 0..n {
        stationarity = stationarity.max((stat[i] - duals.lower[i] + duals.upper[i]).abs());
        primal = primal.max(lo[i] - x[i]).max(x[i] - hi[i]);
        dual = dual.max(-duals.lower[i]).max(-duals.upper[i]);
        let gl = if lo[i].is_finite() { x[i] - lo[i] } else { 1.0 };
        let gu = if hi[i].is_finite() { hi[i] - x[i] } else { 1.0 };
        compl = compl.max((duals.lower[i] * gl).abs()).max((duals.upper[i] * gu).abs());
    }
    for g in &cons.eq {
        primal = primal.max(g.abs());
    }
    for (h, m) in cons.ineq.iter().zip(&duals.ineq) {
        primal = primal.max(*h);
        dual = dual.max(-m);
        compl = compl.max((h * m).abs());
    }
    let all = [stationarity, primal, dual, compl];
    if all.iter().any(|v| v.is_nan()) {
        return Ok(NlpResiduals {
            stationarity: f64::INFINITY,
            primal: f64::INFINITY,
            dual: f64::INFINITY,
            complementarity: f64::INFINITY,
        });
    }
    Ok(NlpResiduals {
        stationarity,
        primal: primal.max(0.0),
        dual: dual.max(0.0),
        complementarity: compl,
    })
}

/// All permutations of `items` in lexicographic order of positions.
fn permutations(items: &[usize]) -> Vec<Vec<usize>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let head = rest.remove(i);
        for mut tail in permutations(&rest) {
            tail.insert(0, head);
            out.push(tail);
        }
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleRow {
    pub orders: CrossingOrders,
    pub status: SqpStatus,
    pub objective: f64,
    pub kkt_residual: f64,
    pub collision_free: bool,
    pub feasible: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleResult {
    pub best: Option<usize>,
    pub rows: Vec<OracleRow>,
}

impl OracleResult {
    pub fn best_row(&self) -> Option<&OracleRow> {
        self.best.map(|i| &self.rows[i])
    }

    pub fn best_objective(&self) -> Option<f64> {
        self.best_row().map(|r| r.objective)
    }

    pub fn best_orders(&self) -> Option<&CrossingOrders> {
        self.best_row().map(|r| &r.orders)
    }
}

pub fn format_orders(orders: &CrossingOrders) -> String {
    orders
        .zones
        .iter()
        .map(|(z, o)| format!("{z}:{}", o.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(">")))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Solves the fixed-order problem for every combination of per-zone
/// permutations, starting each solve from the uncoordinated optimum.
pub fn brute_force_coordination(scenario: &Scenario, config: &CoordinatorConfig, budget: usize) -> Result<OracleResult> {
    let mut combos: usize = 1;
    for z in &scenario.zones {
        let f: usize = (1..=z.members.len()).product();
        combos = combos.saturating_mul(f);
    }
    if combos > budget {
        return Err(Error::Budget(format!("{combos} order combinations exceed the budget of {budget}")));
    }
    let grids = build_grids(scenario)?;
    let guess = solve_uncoordinated(scenario, config)?;
    let start = guess.stacked;

    let mut all: Vec<CrossingOrders> = vec![CrossingOrders::default()];
    for z in &scenario.zones {
        let ids: Vec<usize> = z.members.iter().map(|m| m.vehicle).collect();
        let perms = permutations(&ids);
        all = all
            .into_iter()
            .flat_map(|o| {
                perms.iter().map(move |p| {
                    let mut next = o.clone();
                    next.zones.insert(z.id, p.clone());
                    next
                })
            })
            .collect();
    }

    let rows: Vec<Result<OracleRow>> = all
        .into_par_iter()
        .map(|orders| {
            let nlp = build_fixed_order_nlp(scenario, &grids, &orders, &config.transcription)?;
            let out = solve_nlp(&nlp, &start, &config.sqp)?;
            let trajectories = Trajectory::from_solution(&nlp, &out.x);
            let collision_free = check_collisions(scenario, &trajectories, CHECK_TOL)?.passed;
            let converged = out.report.status == SqpStatus::Converged;
            Ok(OracleRow {
                feasible: converged && collision_free,
                orders,
                status: out.report.status,
                objective: out.report.objective,
                kkt_residual: out.report.kkt_residual,
                collision_free,
            })
        })
        .collect();
    let rows: Vec<OracleRow> = rows.into_iter().collect::<Result<_>>()?;
    let mut best: Option<usize> = None;
    for (i, r) in rows.iter().enumerate() {
        if r.feasible && best.is_none_or(|b| r.objective < rows[b].objective) {
            best = Some(i);
        }
    }
    Ok(OracleResult { best, rows })
}

/// CSV table of an oracle run: one row per order combination.
pub fn write_oracle_csv<W: Write>(result: &OracleResult, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::Input(format!("writing oracle table: {e}"));
    w.write_record(["combination", "orders", "status", "objective", "kkt_residual", "collision_free", "feasible", "best"])
        .map_err(csv_err)?;
    for (i, r) in result.rows.iter().enumerate() {
        let status = serde_json::to_value(r.status)
            .ok()
            .and_then(|v| v.as_str().map(str::to_owned))
            .unwrap_or_default();
        w.write_record([
            i.to_string(),
            format_orders(&r.orders),
            status,
            crate::coordinator::num(r.objective),
            crate::coordinator::num(r.kkt_residual),
            r.collision_free.to_string(),
            r.feasible.to_string(),
            (result.best == Some(i)).to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Objective (with `alpha`) of every 0/1 assignment of `binaries`, `None`
/// where the fixed QP is infeasible. Assignment `m` sets binary `b` to bit
/// `b` of `m`.
pub fn enumerate_binaries(base: &QpProblem, binaries: &[usize], alpha: f64, settings: &QpSettings) -> Result<Vec<(Vec<f64>, Option<f64>)>> {
    if binaries.len() > 16 {
        return Err(Error::Budget(format!("{} binaries are too many to enumerate", binaries.len())));
    }
    (0..1usize << binaries.len())
        .into_par_iter()
        .map(|mask| {
            let mut qp = base.clone();
            let values: Vec<f64> = (0..binaries.len()).map(|b| ((mask >> b) & 1) as f64).collect();
            for (&c, &v) in binaries.iter().zip(&values) {
                qp.lower[c] = v;
                qp.upper[c] = v;
            }
            let sol = solve_qp(&qp, settings)?;
            let obj = match sol.status {
                QpStatus::Optimal => Some(sol.objective + alpha),
                _ => None,
            };
            Ok((values, obj))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{ConflictZoneSpec, ZoneMember};

    fn straight(vehicle: usize, times: &[f64], positions: &[f64]) -> Trajectory {
        let n = times.len();
        Trajectory {
            vehicle,
            positions: positions.to_vec(),
            times: times.to_vec(),
            speeds: vec![10.0; n],
            accels: vec![0.0; n],
            jerks: vec![0.0; n - 1],
        }
    }

    fn two_vehicle(kind: ZoneKind) -> Scenario {
        let mut s = Scenario {
            vehicles: vec![crate::scenario::tests::vehicle(1, 100.0), crate::scenario::tests::vehicle(2, 100.0)],
            zones: vec![ConflictZoneSpec {
                id: 0,
                kind,
                members: vec![
                    ZoneMember { vehicle: 1, p_in: 40.0, p_out: 60.0 },
                    ZoneMember { vehicle: 2, p_in: 40.0, p_out: 60.0 },
                ],
                headway_time: None,
                headway_distance: None,
            }],
            grid_points: 10,
        };
        if kind == ZoneKind::MergeSplit {
            s.zones[0].headway_time = Some(0.5);
            s.zones[0].headway_distance = Some(0.0);
        }
        s
    }

    #[test]
    fn touching_occupancy_intervals_pass() {
        let s = two_vehicle(ZoneKind::Intersection);
        let p = [0.0, 40.0, 60.0, 100.0];
        let a = straight(1, &[-4.0, 0.0, 5.0, 9.0], &p);
        let b = straight(2, &[1.0, 5.0, 10.0, 14.0], &p);
        let r = check_collisions(&s, &[a, b], CHECK_TOL).unwrap();
        assert!(r.passed);
        assert_eq!(r.zones[0].realized_order, vec![1, 2]);
    }

    #[test]
    fn overlapping_occupancy_fails_by_one_second() {
        let s = two_vehicle(ZoneKind::NarrowRoad);
        let p = [0.0, 40.0, 60.0, 100.0];
        let a = straight(1, &[-4.0, 0.0, 6.0, 9.0], &p);
        let b = straight(2, &[1.0, 5.0, 10.0, 14.0], &p);
        let r = check_collisions(&s, &[a, b], CHECK_TOL).unwrap();
        assert!(!r.passed);
        let v = &r.zones[0].violations[0];
        assert_eq!((v.leader, v.follower, v.kind), (1, 2, SafetyKind::Exclusive));
        assert!((v.magnitude - 1.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_half_second_gap_passes_merge() {
        let s = two_vehicle(ZoneKind::MergeSplit);
        let p: Vec<f64> = (0..=10).map(|k| 10.0 * k as f64).collect();
        let ta: Vec<f64> = p.iter().map(|x| x / 10.0).collect();
        let tb: Vec<f64> = ta.iter().map(|t| t + 0.5).collect();
        let r = check_collisions(&s, &[straight(1, &ta, &p), straight(2, &tb, &p)], CHECK_TOL).unwrap();
        assert!(r.passed, "{r:?}");
        assert!((r.zones[0].min_headway.unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn missing_trajectory_is_an_error() {
        let s = two_vehicle(ZoneKind::Intersection);
        let p = [0.0, 40.0, 60.0, 100.0];
        assert!(check_collisions(&s, &[straight(1, &[0.0, 1.0, 2.0, 3.0], &p)], CHECK_TOL).is_err());
    }

    #[test]
    fn permutation_counts() {
        assert_eq!(permutations(&[1, 2]).len(), 2);
        assert_eq!(permutations(&[1, 2, 3]).len(), 6);
        assert_eq!(permutations(&[3, 1, 2])[0], vec![3, 1, 2]);
    }
}
