use std::fs::File;
use std::path::PathBuf;

use avcoord::bnb::solve_miqp;
use avcoord::coordinator::{solve_coordination, solve_uncoordinated, CoordinatorConfig, Trajectory};
use avcoord::oracle::{brute_force_coordination, check_collisions, check_kkt, CHECK_TOL};
use avcoord::scenario::{build_grids, load_scenario, Scenario};
use avcoord::sqp::{solve_nlp, SqpStatus};
use avcoord::transcription::{build_quadratic_approximation, build_unconstrained_nlp, NonlinearProgram};

fn load(name: &str) -> Scenario {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name);
    load_scenario(File::open(path).unwrap()).unwrap()
}

fn straight_vehicle(id: usize, length: f64, p: f64, q: f64, r: f64) -> String {
    format!(
        r#"{{"id": {id}, "path_length": {length}, "curvature": [[0.0, 0.0]], "t0": 0.0, "v0": 10.0,
            "v_min": 1.0, "v_max": 25.0, "a_lon_max": 4.0, "a_lat_max": 2.0, "P": {p}, "Q": {q}, "R": {r}}}"#
    )
}

fn arrival(t: &Trajectory) -> f64 {
    *t.times.last().unwrap()
}

#[test]
fn single_vehicle_coordination_is_the_unconstrained_optimum() {
    let scenario = load("single_straight.json");
    let config = CoordinatorConfig::default();
    let alone = solve_uncoordinated(&scenario, &config).unwrap();
    let result = solve_coordination(&scenario, &config).unwrap();
    assert!(result.certified);
    assert!(result.orders.zones.is_empty());
    assert!((result.objective - alone.objective).abs() <= 1e-9, "{} vs {}", result.objective, alone.objective);
}

#[test]
fn pure_time_objective_rides_the_speed_limit() {
    let text = format!(
        r#"{{"vehicles": [{}], "zones": [], "grid_points": 40}}"#,
        straight_vehicle(0, 300.0, 0.0, 0.0, 10.0)
    );
    let scenario = Scenario::from_json_str(&text).unwrap();
    let grids = build_grids(&scenario).unwrap();
    let config = CoordinatorConfig::default();
    let nlp = build_unconstrained_nlp(&scenario.vehicles[0], &grids[0], &config.transcription).unwrap();
    let out = solve_nlp(&nlp, &nlp.initial_guess(), &config.sqp).unwrap();
    assert_eq!(out.report.status, SqpStatus::Converged);
    let traj = &Trajectory::from_solution(&nlp, &out.x)[0];
    // From 10 m/s at 4 m/s^2 the limit is reached after about 66 m.
    let at_limit = traj.speeds.iter().filter(|&&v| v >= 25.0 - 1e-5).count();
    assert!(at_limit >= traj.speeds.len() / 2, "{:?}", traj.speeds);
    assert!((traj.speeds.last().unwrap() - 25.0).abs() <= 1e-5);
    assert!(traj.speeds.windows(2).all(|w| w[1] >= w[0] - 1e-6), "speed never drops");
}

#[test]
fn converged_single_vehicle_passes_the_kkt_check_and_a_perturbation_fails() {
    let scenario = load("curved_1v.json");
    let grids = build_grids(&scenario).unwrap();
    let config = CoordinatorConfig::default();
    let nlp = build_unconstrained_nlp(&scenario.vehicles[0], &grids[0], &config.transcription).unwrap();
    let out = solve_nlp(&nlp, &nlp.initial_guess(), &config.sqp).unwrap();
    assert_eq!(out.report.status, SqpStatus::Converged);
    let res = check_kkt(&nlp, &out.x, &out.duals).unwrap();
    assert!(res.max() <= 1e-6, "{res:?}");
    let mut moved = out.x.clone();
    moved[nlp.layout.v(0, nlp.layout.nodes(0) / 2)] += 0.1;
    let res = check_kkt(&nlp, &moved, &out.duals).unwrap();
    assert!(res.max() > 1e-3, "{res:?}");
}

#[test]
fn crossing_delays_exactly_one_vehicle() {
    let scenario = load("cross_2v.json");
    let config = CoordinatorConfig::default();
    let alone = solve_uncoordinated(&scenario, &config).unwrap();
    let result = solve_coordination(&scenario, &config).unwrap();
    assert!(result.certified);
    let delayed = alone
        .trajectories
        .iter()
        .zip(&result.trajectories)
        .filter(|(a, c)| arrival(c) > arrival(a) + 1e-3)
        .count();
    assert_eq!(delayed, 1);
    let order = &result.orders.zones[&0];
    let follower = result.trajectories.iter().find(|t| t.vehicle == order[1]).unwrap();
    let free = alone.trajectories.iter().find(|t| t.vehicle == order[1]).unwrap();
    assert!(arrival(follower) > arrival(free) + 1e-3);
}

#[test]
fn coordination_never_beats_the_uncoordinated_sum() {
    for name in ["cross_2v.json", "merge_2v.json", "narrow_2v.json", "three_2zones.json"] {
        let scenario = load(name);
        let config = CoordinatorConfig::default();
        let result = solve_coordination(&scenario, &config).unwrap();
        assert!(result.certified, "{name}");
        assert!(result.objective >= result.uncoordinated_objective - 1e-6, "{name}");
        let nlp = result.problem(&scenario, &config).unwrap();
        let f = nlp.objective(&result.x).unwrap();
        assert!((f - result.objective).abs() <= 1e-9 * f.abs().max(1.0), "{name}");
        let check = check_collisions(&scenario, &result.trajectories, CHECK_TOL).unwrap();
        assert_eq!(check, result.collisions, "{name}");
    }
}

#[test]
fn warm_start_from_the_result_reproduces_it() {
    let scenario = load("narrow_2v.json");
    let config = CoordinatorConfig::default();
    let first = solve_coordination(&scenario, &config).unwrap();
    let warm = CoordinatorConfig { warm_start: Some(first.trajectories.clone()), ..CoordinatorConfig::default() };
    let second = solve_coordination(&scenario, &warm).unwrap();
    assert_eq!(first.orders.zones, second.orders.zones);
    assert!((first.objective - second.objective).abs() <= 1e-6);
    assert!(second.reports.fixed_order.iterations <= first.reports.fixed_order.iterations);
}

#[test]
fn reference_parameters_load_and_round_trip() {
    let scenario = load("reference_params.json");
    assert_eq!(scenario.grid_points, 100);
    for v in &scenario.vehicles {
        assert_eq!((v.bounds.v_min, v.bounds.v_max), (1.0, 25.0));
        assert_eq!((v.bounds.a_lon_max, v.bounds.a_lat_max), (4.0, 2.0));
        assert_eq!((v.weights.accel, v.weights.jerk, v.weights.time), (1.0, 1.0, 10.0));
    }
    let again = Scenario::from_json_str(&scenario.to_json_string()).unwrap();
    assert_eq!(again, scenario);
}

#[test]
fn oracle_enumerates_every_order_combination() {
    let config = CoordinatorConfig::default();
    let cross = brute_force_coordination(&load("cross_2v.json"), &config, 720).unwrap();
    assert_eq!(cross.rows.len(), 2);
    let three = load("three_2zones.json");
    let combos: usize = three.zones.iter().map(|z| (1..=z.members.len()).product::<usize>()).product();
    let all = brute_force_coordination(&three, &config, 720).unwrap();
    assert_eq!(all.rows.len(), combos);
    let mut seen: Vec<_> = all.rows.iter().map(|r| r.orders.zones.clone()).collect();
    seen.sort();
    seen.dedup();
    assert_eq!(seen.len(), combos);
    assert!(brute_force_coordination(&three, &config, combos - 1).is_err());
}

#[test]
fn miqp_incumbent_is_integral_and_satisfies_its_big_m_rows() {
    for name in ["cross_2v.json", "merge_2v.json", "three_2zones.json"] {
        let scenario = load(name);
        let config = CoordinatorConfig::default();
        let grids = build_grids(&scenario).unwrap();
        let alone = solve_uncoordinated(&scenario, &config).unwrap();
        let miqp = build_quadratic_approximation(&scenario, &grids, &alone.stacked, &config.transcription).unwrap();
        let sol = solve_miqp(&miqp, &config.bnb).unwrap();
        let nb = miqp.binaries().len();
        assert!(sol.stats.nodes <= 1 << (nb + 1), "{name}: {} nodes", sol.stats.nodes);
        let y = sol.primal();
        for &c in &miqp.binaries() {
            assert!(y[c] == 0.0 || y[c] == 1.0, "{name}: binary {}", y[c]);
        }
        let rows = miqp.a_ineq.mul_vec(y);
        for r in miqp.safety_rows.clone() {
            assert!(rows[r] <= miqp.b_ineq[r] + 1e-6, "{name}: row {r}");
        }
    }
}
