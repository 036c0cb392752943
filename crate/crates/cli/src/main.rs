use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use serde_json::{json, Value};

use avcoord::coordinator::{
    read_trajectories_csv, solve_coordination, solve_uncoordinated, write_trajectories_csv, CoordinatorConfig,
};
use avcoord::dynamics::LateralModel;
use avcoord::oracle::{brute_force_coordination, check_collisions, format_orders, write_oracle_csv, CHECK_TOL};
use avcoord::scenario::{load_scenario, Scenario};
use avcoord::sqp::HessianMode;
use avcoord::Error;

const EXIT_OK: u8 = 0;
const EXIT_ERROR: u8 = 1;
const EXIT_UNCERTIFIED: u8 = 2;
const EXIT_COLLISION: u8 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    /// Two-stage coordination.
    Coordinate,
    /// Per-vehicle optima without safety constraints; collisions are reported.
    Uncoordinated,
    /// Exhaustive order enumeration compared against the heuristic.
    Oracle,
    /// Collision check of an existing trajectories file.
    Validate,
}

impl Mode {
    fn name(self) -> &'static str {
        match self {
            Mode::Coordinate => "coordinate",
            Mode::Uncoordinated => "uncoordinated",
            Mode::Oracle => "oracle",
            Mode::Validate => "validate",
        }
    }
}

/// Coordinates automated vehicles through shared conflict zones.
#[derive(Debug, Parser)]
#[command(name = "avcoord", version)]
struct Args {
    /// Scenario JSON file.
    #[arg(long)]
    scenario: PathBuf,
    /// Output directory, created if missing.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Mode::Coordinate)]
    mode: Mode,
    /// Worker threads; 1 gives byte-identical outputs across runs.
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// KKT and feasibility tolerance of the trajectory solves.
    #[arg(long, default_value_t = 1e-6)]
    tol_kkt: f64,
    /// Use `kappa * v` instead of `kappa * v^2` as lateral acceleration.
    #[arg(long)]
    paper_literal_lateral: bool,
    /// Further branch-and-bound incumbents tried if the chosen order fails.
    #[arg(long, default_value_t = 3)]
    retry_orders: usize,
    /// Recorded in the report; the solvers are deterministic.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Trajectories to check in validate mode (default: OUT/trajectories.csv).
    #[arg(long)]
    trajectories: Option<PathBuf>,
    /// Start the trajectory solve from these trajectories.
    #[arg(long)]
    warm_start: Option<PathBuf>,
    /// Convexified Lagrangian Hessian in the SQP instead of the objective Hessian.
    #[arg(long)]
    lagrangian_hessian: bool,
    /// Start the trajectory solve from the shifted MIQP point.
    #[arg(long)]
    shifted_start: bool,
    /// Maximum number of order combinations in oracle mode.
    #[arg(long, default_value_t = 720)]
    oracle_budget: usize,
}

struct Run {
    args: Args,
    scenario: Scenario,
    config: CoordinatorConfig,
}

fn read_scenario(path: &Path) -> Result<Scenario, Error> {
    let file = File::open(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    load_scenario(file)
}

fn build_config(args: &Args) -> Result<CoordinatorConfig, Error> {
    if !(args.tol_kkt > 0.0) {
        return Err(Error::Input(format!("--tol-kkt must be positive, got {}", args.tol_kkt)));
    }
    let mut config = CoordinatorConfig::default();
    config.sqp.tol_kkt = args.tol_kkt;
    config.sqp.tol_feas = args.tol_kkt;
    config.retry_orders = args.retry_orders;
    config.shifted_start = args.shifted_start;
    if args.paper_literal_lateral {
        config.transcription.lateral = LateralModel::Linear;
    }
    if args.lagrangian_hessian {
        config.sqp.hessian = HessianMode::Lagrangian;
    }
    if let Some(path) = &args.warm_start {
        let file = File::open(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
        config.warm_start = Some(read_trajectories_csv(file)?);
    }
    Ok(config)
}

fn write_json(path: &Path, value: &Value) -> Result<(), Error> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Input(e.to_string()))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn header(run: &Run) -> Value {
    json!({
        "mode": run.args.mode.name(),
        "scenario": run.args.scenario.display().to_string(),
        "seed": run.args.seed,
        "threads": run.args.threads,
        "tol_kkt": run.args.tol_kkt,
        "lateral": run.config.transcription.lateral,
        "hessian": run.config.sqp.hessian,
    })
}

fn merge(mut base: Value, extra: Value) -> Value {
    if let (Some(b), Value::Object(e)) = (base.as_object_mut(), extra) {
        b.extend(e);
    }
    base
}

fn to_value<T: serde::Serialize>(v: &T) -> Value {
    serde_json::to_value(v).unwrap_or(Value::Null)
}

fn cmd_coordinate(run: &Run) -> Result<u8, Error> {
    let result = solve_coordination(&run.scenario, &run.config)?;
    let out = &run.args.out;
    write_trajectories_csv(&result.trajectories, BufWriter::new(File::create(out.join("trajectories.csv"))?))?;
    write_json(&out.join("orders.json"), &to_value(&result.orders))?;
    let r = &result.reports;
    let report = json!({
        "certified": result.certified,
        "objective": result.objective,
        "uncoordinated_objective": result.uncoordinated_objective,
        "miqp_objective": result.miqp_objective,
        "orders": to_value(&result.orders),
        "timings": to_value(&result.timings),
        "iterations": {
            "uncoordinated": r.uncoordinated.iter().map(|s| s.iterations).collect::<Vec<_>>(),
            "bnb_nodes": r.bnb.nodes,
            "bnb_qp_iterations": r.bnb.qp_iterations,
            "fixed_order": r.fixed_order.iterations,
            "fixed_order_qp_iterations": r.fixed_order.qp_iterations,
        },
        "fixed_order": {
            "status": to_value(&r.fixed_order.status),
            "kkt_residual": r.fixed_order.kkt_residual,
            "constraint_violation": r.fixed_order.constraint_violation,
            "restorations": r.fixed_order.restorations,
        },
        "bnb": to_value(&r.bnb),
        "attempts": to_value(&r.attempts),
        "collisions": to_value(&result.collisions),
    });
    write_json(&out.join("report.json"), &merge(header(run), report))?;
    println!(
        "objective {:.6} orders [{}] certified {}",
        result.objective,
        format_orders(&result.orders),
        result.certified
    );
    Ok(if result.certified { EXIT_OK } else { EXIT_UNCERTIFIED })
}

fn cmd_uncoordinated(run: &Run) -> Result<u8, Error> {
    let result = solve_uncoordinated(&run.scenario, &run.config)?;
    let collisions = check_collisions(&run.scenario, &result.trajectories, CHECK_TOL)?;
    let out = &run.args.out;
    write_trajectories_csv(&result.trajectories, BufWriter::new(File::create(out.join("trajectories.csv"))?))?;
    let report = json!({
        "objective": result.objective,
        "seconds": result.seconds,
        "solves": result.reports.iter().map(|r| json!({
            "status": to_value(&r.status),
            "iterations": r.iterations,
            "kkt_residual": r.kkt_residual,
        })).collect::<Vec<_>>(),
        "collisions": to_value(&collisions),
    });
    write_json(&out.join("report.json"), &merge(header(run), report))?;
    println!(
        "objective {:.6} collision violations {}",
        result.objective,
        collisions.violation_count()
    );
    Ok(EXIT_OK)
}

fn cmd_oracle(run: &Run) -> Result<u8, Error> {
    let oracle = brute_force_coordination(&run.scenario, &run.config, run.args.oracle_budget)?;
    let out = &run.args.out;
    write_oracle_csv(&oracle, BufWriter::new(File::create(out.join("oracle.csv"))?))?;
    let heuristic = solve_coordination(&run.scenario, &run.config)?;
    let best = oracle.best_row();
    let gap = best.map(|b| heuristic.objective - b.objective);
    let report = json!({
        "combinations": oracle.rows.len(),
        "feasible_combinations": oracle.rows.iter().filter(|r| r.feasible).count(),
        "oracle_objective": best.map(|b| b.objective),
        "oracle_orders": best.map(|b| to_value(&b.orders.zones)),
        "heuristic_objective": heuristic.objective,
        "heuristic_orders": to_value(&heuristic.orders.zones),
        "heuristic_certified": heuristic.certified,
        "gap": gap,
        "same_orders": best.map(|b| b.orders.zones == heuristic.orders.zones),
    });
    write_json(&out.join("report.json"), &merge(header(run), report))?;
    match (best, gap) {
        (Some(b), Some(g)) => {
            println!(
                "oracle {:.6} [{}], heuristic {:.6} [{}], gap {:.3e}",
                b.objective,
                format_orders(&b.orders),
                heuristic.objective,
                format_orders(&heuristic.orders),
                g
            );
            Ok(EXIT_OK)
        }
        _ => {
            eprintln!("no order combination gave a feasible trajectory solve");
            Ok(EXIT_UNCERTIFIED)
        }
    }
}

fn cmd_validate(run: &Run) -> Result<u8, Error> {
    let path = run
        .args
        .trajectories
        .clone()
        .unwrap_or_else(|| run.args.out.join("trajectories.csv"));
    let file = File::open(&path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    let trajectories = read_trajectories_csv(file)?;
    let report = check_collisions(&run.scenario, &trajectories, CHECK_TOL)?;
    println!("{}", serde_json::to_string_pretty(&report).unwrap_or_default());
    if report.passed {
        Ok(EXIT_OK)
    } else {
        for z in report.zones.iter().filter(|z| !z.passed) {
            for v in &z.violations {
                eprintln!(
                    "zone {}: vehicles {} -> {} violate {:?} at p = {} by {:.6} s",
                    z.zone, v.leader, v.follower, v.kind, v.position, v.magnitude
                );
            }
        }
        Ok(EXIT_COLLISION)
    }
}

fn execute(args: Args) -> Result<u8, Error> {
    if args.threads == 0 {
        return Err(Error::Input("--threads must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(args.threads)
        .build_global()
        .map_err(|e| Error::Input(format!("thread pool: {e}")))?;
    let scenario = read_scenario(&args.scenario)?;
    let config = build_config(&args)?;
    if args.mode != Mode::Validate {
        fs::create_dir_all(&args.out)?;
    }
    let run = Run { args, scenario, config };
    match run.args.mode {
        Mode::Coordinate => cmd_coordinate(&run),
        Mode::Uncoordinated => cmd_uncoordinated(&run),
        Mode::Oracle => cmd_oracle(&run),
        Mode::Validate => cmd_validate(&run),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_ERROR } else { EXIT_OK });
        }
    };
    match execute(args) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_ERROR)
        }
    }
}
