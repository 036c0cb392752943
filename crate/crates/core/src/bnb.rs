//! Branch and bound over the binary columns of a convex MIQP.
//!
//! Relaxations are solved with the QP kernel, binaries relaxed to `[0, 1]`.
//! Node selection dives depth-first until the first incumbent, then goes
//! best-first; ties are broken by lower depth, then lower node id.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::qp::{solve_qp, QpProblem, QpSettings, QpSolution, QpStatus};
use crate::transcription::MiqpProblem;

#[derive(Debug, Clone)]
pub struct BnbConfig {
    pub integrality_tol: f64,
    /// Absolute optimality gap.
    pub gap_tol: f64,
    /// Node budget; `None` means the full tree.
    pub max_nodes: Option<usize>,
    pub qp: QpSettings,
    /// Number of distinct integer solutions kept besides the incumbent.
    pub alternates: usize,
}

impl Default for BnbConfig {
    fn default() -> Self {
        BnbConfig {
            integrality_tol: 1e-5,
            gap_tol: 1e-6,
            max_nodes: None,
            qp: QpSettings::default(),
            alternates: 16,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct BnbStats {
    pub nodes: usize,
    pub relaxations: usize,
    pub qp_iterations: usize,
    pub incumbent_updates: usize,
    pub pruned_infeasible: usize,
    pub pruned_bound: usize,
    /// Nodes whose relaxation neither converged nor proved infeasible.
    pub unresolved: usize,
    pub lower_bound: f64,
    pub gap: f64,
    pub budget_exhausted: bool,
}

/// Integer-feasible point with its objective (including the constant).
#[derive(Debug, Clone)]
pub struct IntegerSolution {
    pub objective: f64,
    pub primal: Vec<f64>,
    /// Binary values in column order, exactly 0.0 or 1.0.
    pub binaries: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct MiqpSolution {
    pub best: IntegerSolution,
    /// Other integer solutions found, ascending by objective.
    pub alternates: Vec<IntegerSolution>,
    pub stats: BnbStats,
}

impl MiqpSolution {
    pub fn objective(&self) -> f64 {
        self.best.objective
    }

    pub fn primal(&self) -> &[f64] {
        &self.best.primal
    }
}

#[derive(Debug, Clone)]
struct Node {
    id: usize,
    depth: usize,
    bound: f64,
    /// Per binary: `None` free, `Some(v)` fixed.
    fixed: Vec<Option<f64>>,
}

pub fn solve_miqp(problem: &MiqpProblem, config: &BnbConfig) -> Result<MiqpSolution> {
    branch_and_bound(&problem.as_qp(), &problem.binaries(), problem.alpha, config)
}

fn node_qp(base: &QpProblem, binaries: &[usize], fixed: &[Option<f64>]) -> QpProblem {
    let mut qp = base.clone();
    for (b, &col) in binaries.iter().enumerate() {
        let (lo, hi) = match fixed[b] {
            Some(v) => (v, v),
            None => (0.0, 1.0),
        };
        qp.lower[col] = lo;
        qp.upper[col] = hi;
    }
    qp
}

fn usable(sol: &QpSolution) -> bool {
    sol.status == QpStatus::Optimal || (sol.status == QpStatus::MaxIter && sol.kkt_residual <= 1e-6)
}

/// Minimizes `1/2 x'Hx + q'x + alpha` over `base` with the listed columns
/// restricted to `{0, 1}`.
pub fn branch_and_bound(base: &QpProblem, binaries: &[usize], alpha: f64, config: &BnbConfig) -> Result<MiqpSolution> {
    let nb = binaries.len();
    for &c in binaries {
        if c >= base.dim() {
            return Err(Error::Dimension(format!("binary column {c} outside {} variables", base.dim())));
        }
    }
    let mut stats = BnbStats::default();
    let mut incumbent: Option<IntegerSolution> = None;
    let mut found: Vec<IntegerSolution> = Vec::new();
    let mut open: Vec<Node> = vec![Node {
        id: 0,
        depth: 0,
        bound: f64::NEG_INFINITY,
        fixed: vec![None; nb],
    }];
    let mut next_id = 1;
    let tree_limit = if nb >= usize::BITS as usize - 1 {
        usize::MAX
    } else {
        1usize << (nb + 1)
    };
    let budget = config.max_nodes.unwrap_or(usize::MAX).min(tree_limit);

    while !open.is_empty() {
        if stats.nodes >= budget {
            stats.budget_exhausted = true;
            break;
        }
        let pick = if incumbent.is_none() {
            select(&open, |a, b| {
                b.depth
                    .cmp(&a.depth)
                    .then(a.bound.total_cmp(&b.bound))
                    .then(a.id.cmp(&b.id))
            })
        } else {
            select(&open, |a, b| {
                a.bound
                    .total_cmp(&b.bound)
                    .then(a.depth.cmp(&b.depth))
                    .then(a.id.cmp(&b.id))
            })
        };
        let node = open.swap_remove(pick);
        if let Some(inc) = &incumbent {
            if node.bound >= inc.objective - config.gap_tol {
                stats.pruned_bound += 1;
                continue;
            }
        }
        stats.nodes += 1;

        let qp = node_qp(base, binaries, &node.fixed);
        let sol = solve_qp(&qp, &config.qp)?;
        stats.relaxations += 1;
        stats.qp_iterations += sol.iterations;
        if sol.status == QpStatus::Infeasible {
            stats.pruned_infeasible += 1;
            continue;
        }
        let free: Vec<usize> = (0..nb).filter(|&b| node.fixed[b].is_none()).collect();
        let bound = if usable(&sol) {
            (sol.objective + alpha).max(node.bound)
        } else {
            stats.unresolved += 1;
            if free.is_empty() {
                log::warn!("node {} relaxation unresolved ({:e}); dropped", node.id, sol.kkt_residual);
                continue;
            }
            node.bound
        };
        if let Some(inc) = &incumbent {
            if bound >= inc.objective - config.gap_tol {
                stats.pruned_bound += 1;
                continue;
            }
        }

        let frac = |b: usize| {
            let v = sol.primal[binaries[b]];
            (v - v.round()).abs()
        };
        let integral = usable(&sol) && free.iter().all(|&b| frac(b) <= config.integrality_tol);
        let mut tight = false;
        if integral {
            let rounded: Vec<Option<f64>> = (0..nb)
                .map(|b| Some(node.fixed[b].unwrap_or_else(|| sol.primal[binaries[b]].round().clamp(0.0, 1.0))))
                .collect();
            let fixed_qp = node_qp(base, binaries, &rounded);
            let fsol = solve_qp(&fixed_qp, &config.qp)?;
            stats.relaxations += 1;
            stats.qp_iterations += fsol.iterations;
            if usable(&fsol) {
                let cand = IntegerSolution {
                    objective: fsol.objective + alpha,
                    binaries: binaries.iter().map(|&c| fsol.primal[c]).collect(),
                    primal: fsol.primal,
                };
                tight = cand.objective <= bound + config.gap_tol;
                record(&mut found, &cand, config.alternates + 1);
                if incumbent.as_ref().is_none_or(|inc| cand.objective < inc.objective) {
                    stats.incumbent_updates += 1;
                    incumbent = Some(cand);
                }
            }
            if tight || free.is_empty() {
                continue;
            }
        }
        if free.is_empty() {
            continue;
        }

        // Most fractional free binary, lowest index on ties.
        let mut branch = free[0];
        for &b in &free[1..] {
            if frac(b) > frac(branch) {
                branch = b;
            }
        }
        let value = sol.primal[binaries[branch]];
        let preferred = if value >= 0.5 { 1.0 } else { 0.0 };
        for v in [preferred, 1.0 - preferred] {
            let mut fixed = node.fixed.clone();
            fixed[branch] = Some(v);
            open.push(Node {
                id: next_id,
                depth: node.depth + 1,
                bound,
                fixed,
            });
            next_id += 1;
        }
    }

    let Some(best) = incumbent else {
        if stats.budget_exhausted {
            return Err(Error::Budget(format!(
                "node budget of {budget} exhausted without an integer-feasible point"
            )));
        }
        return Err(Error::Infeasible("no binary assignment admits a feasible point".into()));
    };
    let open_bound = open.iter().map(|n| n.bound).fold(f64::INFINITY, f64::min);
    stats.lower_bound = open_bound.min(best.objective);
    stats.gap = (best.objective - stats.lower_bound).max(0.0);
    let alternates = found.into_iter().filter(|s| s.binaries != best.binaries).collect();
    Ok(MiqpSolution { best, alternates, stats })
}

fn select(open: &[Node], cmp: impl Fn(&Node, &Node) -> std::cmp::Ordering) -> usize {
    let mut best = 0;
    for i in 1..open.len() {
        if cmp(&open[i], &open[best]).is_lt() {
            best = i;
        }
    }
    best
}

/// Keeps the `keep` best distinct assignments, ascending by objective.
fn record(found: &mut Vec<IntegerSolution>, cand: &IntegerSolution, keep: usize) {
    if let Some(existing) = found.iter_mut().find(|s| s.binaries == cand.binaries) {
        if cand.objective < existing.objective {
            *existing = cand.clone();
        }
    } else {
        found.push(cand.clone());
    }
    found.sort_by(|a, b| a.objective.total_cmp(&b.objective).then(a.binaries.partial_cmp(&b.binaries).unwrap()));
    found.truncate(keep);
}
