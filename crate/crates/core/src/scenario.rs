//! Site data model: vehicles with their path profiles, conflict zones, and
//! the position grid each vehicle is transcribed on.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default merge-split time headway in seconds.
pub const DEFAULT_HEADWAY_TIME: f64 = 0.5;
/// Default merge-split distance offset in meters.
pub const DEFAULT_HEADWAY_DISTANCE: f64 = 5.0;
/// Distinct zone boundaries closer than this are rejected when gridding.
pub const MIN_BOUNDARY_SEPARATION: f64 = 1e-6;

/// Piecewise-linear curvature as `[[p, kappa], ...]`, held constant beyond
/// its first and last breakpoints. An empty profile is a straight path.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CurvatureProfile(pub Vec<[f64; 2]>);

impl CurvatureProfile {
    pub fn straight() -> Self {
        Self(Vec::new())
    }

    pub fn at(&self, p: f64) -> f64 {
        let pts = &self.0;
        match pts.len() {
            0 => 0.0,
            1 => pts[0][1],
            _ => {
                if p <= pts[0][0] {
                    return pts[0][1];
                }
                let last = pts[pts.len() - 1];
                if p >= last[0] {
                    return last[1];
                }
                let k = pts.partition_point(|q| q[0] <= p);
                let (a, b) = (pts[k - 1], pts[k]);
                let w = (p - a[0]) / (b[0] - a[0]);
                a[1] + w * (b[1] - a[1])
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionBounds {
    pub v_min: f64,
    pub v_max: f64,
    pub a_lon_max: f64,
    pub a_lat_max: f64,
}

/// Objective weights on squared acceleration, squared jerk and arrival time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    #[serde(rename = "P")]
    pub accel: f64,
    #[serde(rename = "Q")]
    pub jerk: f64,
    #[serde(rename = "R")]
    pub time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleSpec {
    pub id: usize,
    pub path_length: f64,
    #[serde(default)]
    pub curvature: CurvatureProfile,
    #[serde(rename = "t0")]
    pub initial_time: f64,
    #[serde(rename = "v0")]
    pub initial_speed: f64,
    #[serde(flatten)]
    pub bounds: MotionBounds,
    #[serde(flatten)]
    pub weights: Weights,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZoneKind {
    Intersection,
    NarrowRoad,
    MergeSplit,
}

impl ZoneKind {
    /// Intersections and narrow roads admit a single occupant at a time.
    pub fn is_mutex(self) -> bool {
        !matches!(self, ZoneKind::MergeSplit)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZoneMember {
    pub vehicle: usize,
    pub p_in: f64,
    pub p_out: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConflictZoneSpec {
    pub id: usize,
    pub kind: ZoneKind,
    pub members: Vec<ZoneMember>,
    #[serde(rename = "dt", default, skip_serializing_if = "Option::is_none")]
    pub headway_time: Option<f64>,
    #[serde(rename = "c", default, skip_serializing_if = "Option::is_none")]
    pub headway_distance: Option<f64>,
}

impl ConflictZoneSpec {
    pub fn member(&self, vehicle: usize) -> Option<&ZoneMember> {
        self.members.iter().find(|m| m.vehicle == vehicle)
    }

    /// `(dt, c)` for merge-split zones, falling back to the defaults.
    pub fn headway(&self) -> (f64, f64) {
        (
            self.headway_time.unwrap_or(DEFAULT_HEADWAY_TIME),
            self.headway_distance.unwrap_or(DEFAULT_HEADWAY_DISTANCE),
        )
    }

    /// Unordered member pairs in member-list order; the pair index is the
    /// position in this list.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        let ids: Vec<usize> = self.members.iter().map(|m| m.vehicle).collect();
        let mut out = Vec::new();
        for a in 0..ids.len() {
            for b in a + 1..ids.len() {
                out.push((ids[a], ids[b]));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub vehicles: Vec<VehicleSpec>,
    #[serde(default)]
    pub zones: Vec<ConflictZoneSpec>,
    pub grid_points: usize,
}

impl Scenario {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let mut scenario: Scenario =
            serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        scenario.fill_defaults();
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn vehicle(&self, id: usize) -> Option<&VehicleSpec> {
        self.vehicles.iter().find(|v| v.id == id)
    }

    pub fn vehicle_index(&self, id: usize) -> Option<usize> {
        self.vehicles.iter().position(|v| v.id == id)
    }

    /// Zones that list `vehicle` as a member.
    pub fn zones_of(&self, vehicle: usize) -> impl Iterator<Item = &ConflictZoneSpec> {
        self.zones.iter().filter(move |z| z.member(vehicle).is_some())
    }

    fn fill_defaults(&mut self) {
        for zone in &mut self.zones {
            if zone.kind == ZoneKind::MergeSplit {
                zone.headway_time.get_or_insert(DEFAULT_HEADWAY_TIME);
                zone.headway_distance.get_or_insert(DEFAULT_HEADWAY_DISTANCE);
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_points < 2 {
            return Err(Error::Validation(format!(
                "grid_points must be at least 2, got {}",
                self.grid_points
            )));
        }
        if self.vehicles.is_empty() {
            return Err(Error::Validation("scenario has no vehicles".into()));
        }
        let mut ids = BTreeSet::new();
        for v in &self.vehicles {
            if !ids.insert(v.id) {
                return Err(Error::Validation(format!("duplicate vehicle {}", v.id)));
            }
            validate_vehicle(v)?;
        }

        let mut zone_ids = BTreeSet::new();
        let mut intervals: BTreeMap<usize, Vec<(f64, f64, usize)>> = BTreeMap::new();
        for z in &self.zones {
            if !zone_ids.insert(z.id) {
                return Err(Error::Validation(format!("duplicate zone {}", z.id)));
            }
            if z.members.len() < 2 {
                return Err(Error::Validation(format!(
                    "zone {} needs at least 2 members, has {}",
                    z.id,
                    z.members.len()
                )));
            }
            match z.kind {
                ZoneKind::MergeSplit => {
                    let (dt, c) = z.headway();
                    if !(dt.is_finite() && dt >= 0.0 && c.is_finite() && c >= 0.0) {
                        return Err(Error::Validation(format!(
                            "zone {}: headway dt={dt}, c={c} must be finite and non-negative",
                            z.id
                        )));
                    }
                }
                _ => {
                    if z.headway_time.is_some() || z.headway_distance.is_some() {
                        return Err(Error::Validation(format!(
                            "zone {}: dt/c are only allowed on merge_split zones",
                            z.id
                        )));
                    }
                }
            }
            let mut seen = BTreeSet::new();
            for m in &z.members {
                let vehicle = self.vehicle(m.vehicle).ok_or_else(|| {
                    Error::Validation(format!("zone {}: unknown vehicle {}", z.id, m.vehicle))
                })?;
                if !seen.insert(m.vehicle) {
                    return Err(Error::Validation(format!(
                        "zone {}: vehicle {} listed twice",
                        z.id, m.vehicle
                    )));
                }
                if !(m.p_in.is_finite() && m.p_out.is_finite())
                    || m.p_in < 0.0
                    || m.p_in >= m.p_out
                    || m.p_out > vehicle.path_length
                {
                    return Err(Error::Validation(format!(
                        "zone {}: vehicle {} interval [{}, {}] must satisfy 0 <= p_in < p_out <= {}",
                        z.id, m.vehicle, m.p_in, m.p_out, vehicle.path_length
                    )));
                }
                if z.kind == ZoneKind::MergeSplit {
                    let (_, c) = z.headway();
                    if m.p_out + c > vehicle.path_length {
                        return Err(Error::Validation(format!(
                            "zone {}: vehicle {} needs p_out + c = {} within its path length {}",
                            z.id,
                            m.vehicle,
                            m.p_out + c,
                            vehicle.path_length
                        )));
                    }
                }
                intervals
                    .entry(m.vehicle)
                    .or_default()
                    .push((m.p_in, m.p_out, z.id));
            }
        }

        for (vehicle, mut list) in intervals {
            list.sort_by(|a, b| a.0.total_cmp(&b.0));
            for w in list.windows(2) {
                if w[1].0 < w[0].1 {
                    return Err(Error::Validation(format!(
                        "vehicle {vehicle}: zones {} and {} overlap on its path",
                        w[0].2, w[1].2
                    )));
                }
            }
        }
        Ok(())
    }
}

fn validate_vehicle(v: &VehicleSpec) -> Result<()> {
    let id = v.id;
    let finite = [
        v.path_length,
        v.initial_time,
        v.initial_speed,
        v.bounds.v_min,
        v.bounds.v_max,
        v.bounds.a_lon_max,
        v.bounds.a_lat_max,
        v.weights.accel,
        v.weights.jerk,
        v.weights.time,
    ]
    .iter()
    .all(|x| x.is_finite());
    if !finite {
        return Err(Error::Validation(format!("vehicle {id}: non-finite field")));
    }
    if v.path_length <= 0.0 {
        return Err(Error::Validation(format!(
            "vehicle {id}: path_length must be positive"
        )));
    }
    let b = &v.bounds;
    if !(0.0 < b.v_min && b.v_min <= v.initial_speed && v.initial_speed <= b.v_max) {
        return Err(Error::Validation(format!(
            "vehicle {id}: need 0 < v_min <= v0 <= v_max (got {}, {}, {})",
            b.v_min, v.initial_speed, b.v_max
        )));
    }
    if b.a_lon_max <= 0.0 || b.a_lat_max <= 0.0 {
        return Err(Error::Validation(format!(
            "vehicle {id}: acceleration limits must be positive"
        )));
    }
    let w = &v.weights;
    if w.accel < 0.0 || w.jerk < 0.0 || w.time < 0.0 || w.accel + w.jerk + w.time <= 0.0 {
        return Err(Error::Validation(format!(
            "vehicle {id}: weights must be non-negative with a positive sum"
        )));
    }
    let pts = &v.curvature.0;
    for p in pts {
        if !(p[0].is_finite() && p[1].is_finite()) || p[0] < 0.0 || p[0] > v.path_length {
            return Err(Error::Validation(format!(
                "vehicle {id}: curvature breakpoint {} outside [0, {}]",
                p[0], v.path_length
            )));
        }
    }
    if pts.windows(2).any(|w| w[1][0] <= w[0][0]) {
        return Err(Error::Validation(format!(
            "vehicle {id}: curvature breakpoints must be strictly increasing"
        )));
    }
    Ok(())
}

pub fn load_scenario<R: Read>(mut source: R) -> Result<Scenario> {
    let mut text = String::new();
    source
        .read_to_string(&mut text)
        .map_err(|e| Error::Parse(e.to_string()))?;
    Scenario::from_json_str(&text)
}

/// Strictly increasing path positions from 0 to the path length.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionGrid(Vec<f64>);

impl PositionGrid {
    pub fn from_points(points: Vec<f64>) -> Result<Self> {
        if points.len() < 2 || points.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Input(
                "grid needs at least 2 strictly increasing points".into(),
            ));
        }
        Ok(Self(points))
    }

    pub fn points(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Number of shooting intervals.
    pub fn intervals(&self) -> usize {
        self.0.len() - 1
    }

    pub fn end(&self) -> f64 {
        self.0[self.0.len() - 1]
    }

    /// Index of a grid point equal to `p` bit-for-bit.
    pub fn index_of(&self, p: f64) -> Option<usize> {
        let k = self.0.partition_point(|&x| x < p);
        (k < self.0.len() && self.0[k] == p).then_some(k)
    }

    /// Linear interpolation stencil for position `p`, clamped to the grid:
    /// `(k, w)` such that the value at `p` is `(1 - w) x_k + w x_{k+1}`.
    /// Exact grid hits return `w = 0`.
    pub fn stencil(&self, p: f64) -> (usize, f64) {
        let n = self.0.len();
        if p <= self.0[0] {
            return (0, 0.0);
        }
        if p >= self.0[n - 1] {
            return (n - 2, 1.0);
        }
        let k = self.0.partition_point(|&x| x <= p) - 1;
        let w = (p - self.0[k]) / (self.0[k + 1] - self.0[k]);
        (k, w)
    }
}

/// Uniform grid with `intervals` steps, adjusted so that every zone entry and
/// exit of the vehicle is a grid point. Uniform points closer than a third of
/// the nominal spacing to a zone boundary are dropped in favor of it.
pub fn build_grid(
    vehicle: &VehicleSpec,
    zones: &[ConflictZoneSpec],
    intervals: usize,
) -> Result<PositionGrid> {
    if intervals < 2 {
        return Err(Error::Input(format!(
            "grid needs at least 2 intervals, got {intervals}"
        )));
    }
    let length = vehicle.path_length;
    let h = length / intervals as f64;

    let mut boundaries: Vec<f64> = zones
        .iter()
        .filter_map(|z| z.member(vehicle.id))
        .flat_map(|m| [m.p_in, m.p_out])
        .collect();
    boundaries.sort_by(f64::total_cmp);
    boundaries.dedup();
    for &b in &boundaries {
        if !(0.0..=length).contains(&b) {
            return Err(Error::Input(format!(
                "vehicle {}: zone boundary {b} outside path [0, {length}]",
                vehicle.id
            )));
        }
    }
    let mut anchors = vec![0.0];
    anchors.extend(boundaries.iter().copied().filter(|&b| b > 0.0 && b < length));
    anchors.push(length);
    for w in anchors.windows(2) {
        if w[1] - w[0] < MIN_BOUNDARY_SEPARATION {
            return Err(Error::DegenerateZone {
                vehicle: vehicle.id,
                first: w[0],
                second: w[1],
                tol: MIN_BOUNDARY_SEPARATION,
            });
        }
    }

    let keep_out = h / 3.0;
    let mut points = anchors.clone();
    for k in 1..intervals {
        let p = length * k as f64 / intervals as f64;
        let near = anchors.iter().any(|&b| (p - b).abs() < keep_out);
        if !near {
            points.push(p);
        }
    }
    points.sort_by(f64::total_cmp);
    points.dedup();
    PositionGrid::from_points(points)
}

/// Grids for every vehicle, in scenario vehicle order.
pub fn build_grids(scenario: &Scenario) -> Result<Vec<PositionGrid>> {
    scenario
        .vehicles
        .iter()
        .map(|v| build_grid(v, &scenario.zones, scenario.grid_points))
        .collect()
}
