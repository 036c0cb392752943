//! The two-stage pipeline: uncoordinated guess, quadratic approximation,
//! order selection by branch and bound, fixed-order trajectory solve.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::bnb::{solve_miqp, BnbConfig, BnbStats};
use crate::error::{Error, Result};
use crate::oracle::{check_collisions, check_kkt, CollisionReport, CHECK_TOL};
use crate::scenario::{build_grids, PositionGrid, Scenario};
use crate::sqp::{solve_nlp, NlpDuals, SqpConfig, SqpOutcome, SqpReport, SqpStatus};
use crate::transcription::{
    build_fixed_order_nlp, build_quadratic_approximation, build_unconstrained_nlp, MiqpProblem, NlpProblem,
    TranscriptionConfig,
};

pub use crate::transcription::CrossingOrders;

#[derive(Debug, Clone)]
pub struct CoordinatorConfig {
    pub transcription: TranscriptionConfig,
    pub sqp: SqpConfig,
    pub bnb: BnbConfig,
    /// Further B&B incumbents tried when the chosen order fails in stage two.
    pub retry_orders: usize,
    /// Start stage two from `W** + dW` of the MIQP instead of `W**`.
    pub shifted_start: bool,
    /// Stage-two initial trajectories, e.g. a previous result.
    pub warm_start: Option<Vec<Trajectory>>,
    pub collision_tol: f64,
}

impl Default for CoordinatorConfig {
    fn default() -> Self {
        CoordinatorConfig {
            transcription: TranscriptionConfig::default(),
            sqp: SqpConfig::default(),
            bnb: BnbConfig::default(),
            retry_orders: 3,
            shifted_start: false,
            warm_start: None,
            collision_tol: CHECK_TOL,
        }
    }
}

/// States on a vehicle's grid; `jerks` has one entry per interval.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trajectory {
    pub vehicle: usize,
    pub positions: Vec<f64>,
    pub times: Vec<f64>,
    pub speeds: Vec<f64>,
    pub accels: Vec<f64>,
    pub jerks: Vec<f64>,
}

impl Trajectory {
    pub fn from_solution(nlp: &NlpProblem, x: &[f64]) -> Vec<Trajectory> {
        let l = &nlp.layout;
        nlp.vehicles
            .iter()
            .enumerate()
            .map(|(i, veh)| {
                let n = l.nodes(i);
                Trajectory {
                    vehicle: veh.id,
                    positions: nlp.grids[i].points().to_vec(),
                    times: (0..n).map(|k| x[l.t(i, k)]).collect(),
                    speeds: (0..n).map(|k| x[l.v(i, k)]).collect(),
                    accels: (0..n).map(|k| x[l.a(i, k)]).collect(),
                    jerks: (0..n - 1).map(|k| x[l.j(i, k)]).collect(),
                }
            })
            .collect()
    }

    /// Decision vector of `nlp` holding `trajectories`, which must sit on
    /// the problem's grids.
    pub fn stack(nlp: &NlpProblem, trajectories: &[Trajectory]) -> Result<Vec<f64>> {
        let l = &nlp.layout;
        let mut x = vec![0.0; l.dim()];
        for (i, veh) in nlp.vehicles.iter().enumerate() {
            let tr = trajectories
                .iter()
                .find(|t| t.vehicle == veh.id)
                .ok_or_else(|| Error::Input(format!("no trajectory for vehicle {}", veh.id)))?;
            let n = l.nodes(i);
            if tr.positions.len() != n || tr.jerks.len() + 1 != n {
                return Err(Error::Dimension(format!(
                    "trajectory of vehicle {} has {} nodes, grid has {n}",
                    veh.id,
                    tr.positions.len()
                )));
            }
            let grid = nlp.grids[i].points();
            if tr.positions.iter().zip(grid).any(|(a, b)| (a - b).abs() > 1e-9 * b.abs().max(1.0)) {
                return Err(Error::Dimension(format!("trajectory of vehicle {} is on a different grid", veh.id)));
            }
            for k in 0..n {
                x[l.t(i, k)] = tr.times[k];
                x[l.v(i, k)] = tr.speeds[k];
                x[l.a(i, k)] = tr.accels[k];
                if k + 1 < n {
                    x[l.j(i, k)] = tr.jerks[k];
                }
            }
        }
        Ok(x)
    }
}

/// Shortest representation that parses back to the same value.
pub(crate) fn num(v: f64) -> String {
    format!("{v:?}")
}

/// Writes `vehicle,k,p,t,v,a,j` rows; the last node of each vehicle has an
/// empty jerk.
pub fn write_trajectories_csv<W: Write>(trajectories: &[Trajectory], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::Input(format!("writing trajectories: {e}"));
    w.write_record(["vehicle", "k", "p", "t", "v", "a", "j"]).map_err(csv_err)?;
    for tr in trajectories {
        for k in 0..tr.positions.len() {
            w.write_record([
                tr.vehicle.to_string(),
                k.to_string(),
                num(tr.positions[k]),
                num(tr.times[k]),
                num(tr.speeds[k]),
                num(tr.accels[k]),
                tr.jerks.get(k).copied().map(num).unwrap_or_default(),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_trajectories_csv<R: Read>(source: R) -> Result<Vec<Trajectory>> {
    let mut rd = csv::Reader::from_reader(source);
    let headers = rd.headers().map_err(|e| Error::Parse(e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["vehicle", "k", "p", "t", "v", "a", "j"] {
        return Err(Error::Parse(format!("unexpected trajectory header {headers:?}")));
    }
    let mut by_vehicle: BTreeMap<usize, Trajectory> = BTreeMap::new();
    let mut order = Vec::new();
    for (line, rec) in rd.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse(e.to_string()))?;
        let field = |c: usize| -> Result<f64> {
            rec[c]
                .trim()
                .parse::<f64>()
                .map_err(|e| Error::Parse(format!("row {}, column {}: {e}", line + 2, headers[c].to_owned())))
        };
        let vehicle: usize = rec[0].trim().parse().map_err(|e| Error::Parse(format!("row {}: vehicle: {e}", line + 2)))?;
        let k: usize = rec[1].trim().parse().map_err(|e| Error::Parse(format!("row {}: k: {e}", line + 2)))?;
        let tr = by_vehicle.entry(vehicle).or_insert_with(|| {
            order.push(vehicle);
            Trajectory {
                vehicle,
                positions: vec![],
                times: vec![],
                speeds: vec![],
                accels: vec![],
                jerks: vec![],
            }
        });
        if k != tr.positions.len() {
            return Err(Error::Parse(format!("row {}: vehicle {vehicle} node {k} out of sequence", line + 2)));
        }
        if tr.jerks.len() + 1 == tr.positions.len() {
            return Err(Error::Parse(format!(
                "row {}: vehicle {vehicle} continues after a node without jerk",
                line + 2
            )));
        }
        tr.positions.push(field(2)?);
        tr.times.push(field(3)?);
        tr.speeds.push(field(4)?);
        tr.accels.push(field(5)?);
        if !rec[6].trim().is_empty() {
            tr.jerks.push(field(6)?);
        }
    }
    if order.is_empty() {
        return Err(Error::Parse("no trajectory rows".into()));
    }
    let mut out = Vec::with_capacity(order.len());
    for v in order {
        let tr = by_vehicle.remove(&v).unwrap();
        if tr.jerks.len() + 1 != tr.positions.len() {
            return Err(Error::Parse(format!("vehicle {v}: expected an empty jerk on the last node only")));
        }
        out.push(tr);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct UncoordinatedResult {
    pub trajectories: Vec<Trajectory>,
    pub objective: f64,
    pub reports: Vec<SqpReport>,
    /// Per-vehicle optima stacked in scenario vehicle order.
    pub stacked: Vec<f64>,
    /// Their multipliers, stacked the same way.
    pub duals: NlpDuals,
    pub seconds: f64,
}

/// Optimal trajectory of every vehicle alone; no safety constraints.
pub fn solve_uncoordinated(scenario: &Scenario, config: &CoordinatorConfig) -> Result<UncoordinatedResult> {
    let start = Instant::now();
    let grids = build_grids(scenario)?;
    let solves: Vec<Result<(NlpProblem, SqpOutcome)>> = scenario
        .vehicles
        .par_iter()
        .zip(grids.par_iter())
        .map(|(veh, grid)| {
            let nlp = build_unconstrained_nlp(veh, grid, &config.transcription)?;
            let out = solve_nlp(&nlp, &nlp.initial_guess(), &config.sqp)?;
            if out.report.status != SqpStatus::Converged {
                log::warn!(
                    "vehicle {}: unconstrained solve ended with {:?} (kkt {:e})",
                    veh.id,
                    out.report.status,
                    out.report.kkt_residual
                );
            }
            Ok((nlp, out))
        })
        .collect();
    let mut trajectories = Vec::new();
    let mut reports = Vec::new();
    let mut stacked = Vec::new();
    let mut duals = NlpDuals::zeros(0, 0, 0);
    let mut objective = 0.0;
    for s in solves {
        let (nlp, out) = s.map_err(|e| e.in_stage("uncoordinated"))?;
        trajectories.extend(Trajectory::from_solution(&nlp, &out.x));
        objective += out.report.objective;
        stacked.extend_from_slice(&out.x);
        duals.eq.extend_from_slice(&out.duals.eq);
        duals.ineq.extend_from_slice(&out.duals.ineq);
        duals.lower.extend_from_slice(&out.duals.lower);
        duals.upper.extend_from_slice(&out.duals.upper);
        reports.push(out.report);
    }
    Ok(UncoordinatedResult {
        trajectories,
        objective,
        reports,
        stacked,
        duals,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Orders one zone's members by entry time (ties by id), falling back to
/// the pairwise binaries when the sort contradicts them. `binaries` holds
/// `(first, second, b)` with `b = 0` meaning `first` precedes.
pub fn order_zone(entries: &[(usize, f64)], binaries: &[(usize, usize, f64)]) -> Result<Vec<usize>> {
    let mut sorted = entries.to_vec();
    sorted.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let order: Vec<usize> = sorted.iter().map(|e| e.0).collect();
    let rank = |o: &[usize], v: usize| o.iter().position(|&x| x == v);
    let consistent = |o: &[usize]| {
        binaries.iter().all(|&(f, s, b)| {
            let (rf, rs) = (rank(o, f), rank(o, s));
            rf.is_some() && rs.is_some() && ((b < 0.5) == (rf < rs))
        })
    };
    if consistent(&order) {
        return Ok(order);
    }
    let mut wins: Vec<(usize, usize)> = order.iter().map(|&v| (v, 0)).collect();
    for &(f, s, b) in binaries {
        let winner = if b < 0.5 { f } else { s };
        if let Some(w) = wins.iter_mut().find(|w| w.0 == winner) {
            w.1 += 1;
        }
    }
    wins.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let fallback: Vec<usize> = wins.iter().map(|w| w.0).collect();
    if consistent(&fallback) {
        log::warn!("entry-time order {order:?} contradicts the binaries; using {fallback:?}");
        return Ok(fallback);
    }
    Err(Error::Input(format!("binaries encode no total order over {order:?}")))
}

/// Crossing orders of an integral MIQP point.
pub fn extract_orders(problem: &MiqpProblem, primal: &[f64], integrality_tol: f64) -> Result<CrossingOrders> {
    if primal.len() != problem.dim() {
        return Err(Error::Dimension(format!(
            "MIQP point has {} entries, problem has {}",
            primal.len(),
            problem.dim()
        )));
    }
    let mut binaries = Vec::with_capacity(problem.pairs.len());
    for p in &problem.pairs {
        let b = primal[p.column];
        if (b - b.round()).abs() > integrality_tol || !(-integrality_tol..=1.0 + integrality_tol).contains(&b) {
            return Err(Error::Input(format!(
                "binary of pair ({}, {}) in zone {} is {b}, not integral",
                p.first, p.second, p.zone
            )));
        }
        binaries.push(b.round());
    }
    let mut zones = BTreeMap::new();
    for zone in &problem.zones {
        let entries: Vec<(usize, f64)> = zone
            .members
            .iter()
            .map(|m| {
                problem
                    .entry_time(primal, zone, m.vehicle)
                    .map(|t| (m.vehicle, t))
                    .ok_or_else(|| Error::Input(format!("vehicle {} of zone {} not in the problem", m.vehicle, zone.id)))
            })
            .collect::<Result<_>>()?;
        let pair_bins: Vec<(usize, usize, f64)> = problem
            .pairs
            .iter()
            .zip(&binaries)
            .filter(|(p, _)| p.zone == zone.id)
            .map(|(p, &b)| (p.first, p.second, b))
            .collect();
        zones.insert(zone.id, order_zone(&entries, &pair_bins)?);
    }
    Ok(CrossingOrders { zones, binaries })
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct StageTimings {
    pub uncoordinated: f64,
    pub approximation: f64,
    pub miqp: f64,
    pub fixed_order: f64,
    pub total: f64,
}

/// One stage-two solve.
#[derive(Debug, Clone, Serialize)]
pub struct OrderAttempt {
    pub orders: CrossingOrders,
    pub status: SqpStatus,
    pub objective: f64,
    pub kkt_residual: f64,
    pub constraint_violation: f64,
    pub collision_free: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct StageReports {
    pub uncoordinated: Vec<SqpReport>,
    pub bnb: BnbStats,
    pub fixed_order: SqpReport,
    pub attempts: Vec<OrderAttempt>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CoordinationResult {
    pub orders: CrossingOrders,
    pub trajectories: Vec<Trajectory>,
    pub objective: f64,
    /// Sum of the per-vehicle unconstrained optima.
    pub uncoordinated_objective: f64,
    /// Objective of the quadratic model at the MIQP incumbent.
    pub miqp_objective: Option<f64>,
    /// Stage two converged and the trajectories passed the collision check.
    pub certified: bool,
    pub collisions: CollisionReport,
    pub timings: StageTimings,
    pub reports: StageReports,
    #[serde(skip)]
    pub x: Vec<f64>,
    #[serde(skip)]
    pub duals: NlpDuals,
}

impl CoordinationResult {
    /// The fixed-order problem the result solves.
    pub fn problem(&self, scenario: &Scenario, config: &CoordinatorConfig) -> Result<NlpProblem> {
        let grids = build_grids(scenario)?;
        build_fixed_order_nlp(scenario, &grids, &self.orders, &config.transcription)
    }
}

fn member_orders(scenario: &Scenario) -> CrossingOrders {
    CrossingOrders {
        zones: scenario
            .zones
            .iter()
            .map(|z| (z.id, z.members.iter().map(|m| m.vehicle).collect()))
            .collect(),
        binaries: vec![],
    }
}

struct Candidate {
    orders: CrossingOrders,
    /// MIQP point the orders came from.
    point: Option<Vec<f64>>,
}

/// Without safety rows the coupled problem separates per vehicle, so the
/// stage-one optima already solve it.
fn decoupled_outcome(nlp: &NlpProblem, guess: &UncoordinatedResult, config: &CoordinatorConfig) -> Result<Option<SqpOutcome>> {
    let converged = guess.reports.iter().all(|r| r.status == SqpStatus::Converged);
    if !nlp.safety.is_empty() || config.warm_start.is_some() || !converged {
        return Ok(None);
    }
    let kkt = check_kkt(nlp, &guess.stacked, &guess.duals)?;
    if kkt.max() > config.sqp.tol_kkt {
        return Ok(None);
    }
    let violation = guess.reports.iter().map(|r| r.constraint_violation).fold(0.0, f64::max);
    Ok(Some(SqpOutcome {
        x: guess.stacked.clone(),
        duals: guess.duals.clone(),
        report: SqpReport {
            status: SqpStatus::Converged,
            iterations: 0,
            kkt_residual: kkt.max(),
            constraint_violation: violation,
            objective: guess.objective,
            step_norms: Vec::new(),
            merits: Vec::new(),
            qp_iterations: 0,
            restorations: 0,
            infeasible_rows: Vec::new(),
        },
    }))
}

pub fn solve_coordination(scenario: &Scenario, config: &CoordinatorConfig) -> Result<CoordinationResult> {
    let start = Instant::now();
    scenario.validate()?;
    let grids: Vec<PositionGrid> = build_grids(scenario)?;
    let guess = solve_uncoordinated(scenario, config)?;
    let mut timings = StageTimings {
        uncoordinated: guess.seconds,
        ..StageTimings::default()
    };

    let has_pairs = scenario.zones.iter().any(|z| z.members.len() > 1);
    let mut bnb_stats = BnbStats::default();
    let mut miqp_objective = None;
    let mut candidates = Vec::new();
    let mut miqp: Option<MiqpProblem> = None;
    if has_pairs {
        let t = Instant::now();
        let problem = build_quadratic_approximation(scenario, &grids, &guess.stacked, &config.transcription)
            .map_err(|e| e.in_stage("approximation"))?;
        timings.approximation = t.elapsed().as_secs_f64();

        let t = Instant::now();
        let sol = solve_miqp(&problem, &config.bnb).map_err(|e| e.in_stage("miqp"))?;
        timings.miqp = t.elapsed().as_secs_f64();
        miqp_objective = Some(sol.objective());
        bnb_stats = sol.stats.clone();
        let tol = config.bnb.integrality_tol;
        for s in std::iter::once(&sol.best).chain(&sol.alternates) {
            let orders = match extract_orders(&problem, &s.primal, tol) {
                Ok(o) => o,
                Err(e) if candidates.is_empty() => return Err(e.in_stage("order extraction")),
                Err(e) => {
                    log::warn!("skipping alternate assignment: {e}");
                    continue;
                }
            };
            if candidates.iter().any(|c: &Candidate| c.orders.zones == orders.zones) {
                continue;
            }
            candidates.push(Candidate {
                orders,
                point: Some(s.primal.clone()),
            });
            if candidates.len() > config.retry_orders {
                break;
            }
        }
        miqp = Some(problem);
    } else {
        candidates.push(Candidate {
            orders: member_orders(scenario),
            point: None,
        });
    }

    let t = Instant::now();
    let mut attempts = Vec::new();
    let mut best: Option<(usize, NlpProblem, SqpOutcome, CollisionReport)> = None;
    for (idx, cand) in candidates.iter().enumerate() {
        let nlp = build_fixed_order_nlp(scenario, &grids, &cand.orders, &config.transcription)
            .map_err(|e| e.in_stage("fixed-order"))?;
        let x0 = if let Some(warm) = &config.warm_start {
            Trajectory::stack(&nlp, warm).map_err(|e| e.in_stage("warm start"))?
        } else if let (true, Some(y), Some(p)) = (config.shifted_start, &cand.point, &miqp) {
            p.trajectory_point(&y[..nlp.layout.dim()])
        } else {
            guess.stacked.clone()
        };
        let out = match decoupled_outcome(&nlp, &guess, config)? {
            Some(out) => out,
            None => solve_nlp(&nlp, &x0, &config.sqp).map_err(|e| e.in_stage("fixed-order"))?,
        };
        let trajectories = Trajectory::from_solution(&nlp, &out.x);
        let collisions = check_collisions(scenario, &trajectories, config.collision_tol)?;
        let converged = out.report.status == SqpStatus::Converged;
        attempts.push(OrderAttempt {
            orders: cand.orders.clone(),
            status: out.report.status,
            objective: out.report.objective,
            kkt_residual: out.report.kkt_residual,
            constraint_violation: out.report.constraint_violation,
            collision_free: collisions.passed,
        });
        let ok = converged && collisions.passed;
        let better = match &best {
            None => true,
            Some((_, _, b, bc)) => {
                let b_ok = b.report.status == SqpStatus::Converged && bc.passed;
                (ok && !b_ok) || (!b_ok && out.report.constraint_violation < b.report.constraint_violation)
            }
        };
        if better {
            best = Some((idx, nlp, out, collisions));
        }
        if ok {
            break;
        }
        log::warn!(
            "orders {:?} failed in stage two ({:?}, violation {:e})",
            cand.orders.zones,
            attempts.last().unwrap().status,
            attempts.last().unwrap().constraint_violation
        );
    }
    timings.fixed_order = t.elapsed().as_secs_f64();
    let (idx, nlp, out, collisions) = best.expect("at least one candidate order");
    let certified = out.report.status == SqpStatus::Converged && collisions.passed;
    timings.total = start.elapsed().as_secs_f64();
    Ok(CoordinationResult {
        orders: candidates[idx].orders.clone(),
        trajectories: Trajectory::from_solution(&nlp, &out.x),
        objective: out.report.objective,
        uncoordinated_objective: guess.objective,
        miqp_objective,
        certified,
        collisions,
        timings,
        reports: StageReports {
            uncoordinated: guess.reports,
            bnb: bnb_stats,
            fixed_order: out.report,
            attempts,
        },
        x: out.x,
        duals: out.duals,
    })
}
