use proptest::prelude::*;

use avcoord::coordinator::order_zone;
use avcoord::dynamics::{erk4_step, Control, SpatialState};
use avcoord::scenario::{build_grid, Scenario};

fn vehicle(id: usize, length: f64, v0: f64) -> String {
    format!(
        r#"{{"id": {id}, "path_length": {length:?}, "curvature": [[0.0, 0.0], [{length:?}, 0.01]], "t0": 0.0, "v0": {v0:?},
            "v_min": 1.0, "v_max": 25.0, "a_lon_max": 4.0, "a_lat_max": 2.0, "P": 1.0, "Q": 1.0, "R": 10.0}}"#
    )
}

/// Two vehicles of equal length sharing one zone at `[p_in, p_out]`.
fn shared_zone(length: f64, p_in: f64, p_out: f64, kind: &str, n: usize) -> String {
    let headway = if kind == "merge_split" { r#", "dt": 0.5, "c": 0.0"# } else { "" };
    format!(
        r#"{{"vehicles": [{}, {}], "zones": [{{"id": 0, "kind": "{kind}", "members": [
            {{"vehicle": 0, "p_in": {p_in:?}, "p_out": {p_out:?}}},
            {{"vehicle": 1, "p_in": {p_in:?}, "p_out": {p_out:?}}}]{headway}}}], "grid_points": {n}}}"#,
        vehicle(0, length, 10.0),
        vehicle(1, length, 12.0)
    )
}

fn zone_case() -> impl Strategy<Value = (f64, f64, f64, usize)> {
    (20.0..400.0f64, 0.0..0.9f64, 0.01..0.5f64, 2usize..80).prop_map(|(length, a, w, n)| {
        let p_in = a * length;
        let p_out = (p_in + w * length).min(length);
        (length, p_in, p_out, n)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn scenario_json_round_trips(case in zone_case(), merge in any::<bool>()) {
        let (length, p_in, p_out, n) = case;
        let kind = if merge { "merge_split" } else { "intersection" };
        let scenario = Scenario::from_json_str(&shared_zone(length, p_in, p_out, kind, n)).unwrap();
        let again = Scenario::from_json_str(&scenario.to_json_string()).unwrap();
        prop_assert_eq!(again, scenario);
    }

    #[test]
    fn grid_hits_zone_boundaries_exactly(case in zone_case()) {
        let (length, p_in, p_out, n) = case;
        let scenario = Scenario::from_json_str(&shared_zone(length, p_in, p_out, "intersection", n)).unwrap();
        let grid = build_grid(&scenario.vehicles[0], &scenario.zones, n).unwrap();
        let pts = grid.points();
        prop_assert_eq!(pts[0], 0.0);
        prop_assert_eq!(*pts.last().unwrap(), length);
        prop_assert!(pts.contains(&p_in) && pts.contains(&p_out));
        prop_assert!(pts.len() <= n + 1 + 2 * 2);
        for w in pts.windows(2) {
            prop_assert!(w[1] - w[0] >= 1e-6, "spacing {} at {}", w[1] - w[0], w[0]);
        }
    }

    #[test]
    fn time_increases_over_every_step(v in 2.0..25.0f64, a in -1.0..1.0f64, j in -0.2..0.2f64, h in 0.1..5.0f64) {
        let s = SpatialState { t: 3.0, v, a };
        let next = erk4_step(&s, &Control { jerk: j }, 10.0, 10.0 + h).unwrap();
        prop_assert!(next.t > s.t);
        let again = erk4_step(&s, &Control { jerk: j }, 10.0, 10.0 + h).unwrap();
        prop_assert_eq!(next.t.to_bits(), again.t.to_bits());
        prop_assert_eq!(next.v.to_bits(), again.v.to_bits());
        prop_assert_eq!(next.a.to_bits(), again.a.to_bits());
    }

    #[test]
    fn distinct_entry_times_are_ordered_by_time(times in prop::collection::vec(0.0..100.0f64, 2..7)) {
        let entries: Vec<(usize, f64)> = times.iter().enumerate().map(|(i, &t)| (i + 1, t)).collect();
        let mut expected = entries.clone();
        expected.sort_by(|x, y| x.1.total_cmp(&y.1).then(x.0.cmp(&y.0)));
        let mut binaries = Vec::new();
        for (x, &(i, ti)) in entries.iter().enumerate() {
            for &(k, tk) in &entries[x + 1..] {
                let b = if (ti, i) < (tk, k) { 0.0 } else { 1.0 };
                binaries.push((i, k, b));
            }
        }
        let order = order_zone(&entries, &binaries).unwrap();
        prop_assert_eq!(order, expected.iter().map(|e| e.0).collect::<Vec<_>>());
    }
}
