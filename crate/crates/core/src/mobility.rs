//! Vehicle movement: synthetic trips over a road graph, piecewise-linear
//! trajectories, and a SUMO-style CSV trace format.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{secs_to_ticks, ticks_to_secs, Point, Pose, VehicleLength};
use crate::road::{RoadError, RoadGraph};

const ROUTE_ATTEMPTS: usize = 100;
/// Slack on the displacement check, covering 1 mm coordinate rounding.
const DISPLACEMENT_SLACK_M: f64 = 0.01;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MobilityError {
    #[error("no route found after {ROUTE_ATTEMPTS} attempts")]
    SynthesisFailed,
    #[error("vehicle {vehicle}: sample at {time} s does not follow {prev} s")]
    TraceOrderError { vehicle: u32, time: f64, prev: f64 },
    #[error("vehicle {vehicle}: displacement {moved:.3} m in {dt} s exceeds the speed bound")]
    ImplausibleDisplacement { vehicle: u32, dt: f64, moved: f64 },
    #[error(transparent)]
    Road(#[from] RoadError),
    #[error("trace parse error: {0}")]
    Parse(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// Discrete vehicle-length distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthDistribution {
    /// `(length_m, weight)` pairs.
    pub classes: Vec<(f64, f64)>,
}

impl Default for LengthDistribution {
    fn default() -> Self {
        LengthDistribution {
            classes: vec![(4.5, 0.8), (7.5, 0.12), (12.0, 0.08)],
        }
    }
}

impl LengthDistribution {
    pub fn validate(&self) -> Result<Vec<(VehicleLength, f64)>, MobilityError> {
        if self.classes.is_empty() {
            return Err(MobilityError::InvalidParameter("empty length distribution".into()));
        }
        let mut out = Vec::new();
        for &(m, w) in &self.classes {
            let len = VehicleLength::from_meters(m)
                .ok()
                .filter(|l| (3.0..=18.0).contains(&l.meters()))
                .ok_or_else(|| MobilityError::InvalidParameter(format!("vehicle length {m} m")))?;
            if !(w > 0.0) {
                return Err(MobilityError::InvalidParameter(format!("length weight {w}")));
            }
            out.push((len, w));
        }
        Ok(out)
    }

    /// Maps `u ∈ [0, 1)` to a length by inverse CDF.
    pub fn pick(&self, u: f64) -> VehicleLength {
        let classes = self.validate().expect("validated distribution");
        let total: f64 = classes.iter().map(|c| c.1).sum();
        let mut acc = 0.0;
        for &(len, w) in &classes {
            acc += w / total;
            if u < acc {
                return len;
            }
        }
        classes.last().unwrap().0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trip {
    pub vehicle: u32,
    pub departure: f64,
    pub edges: Vec<usize>,
    pub speeds: Vec<f64>,
    pub length: VehicleLength,
}

/// One trajectory vertex. `edge` is the edge the vehicle drives on from
/// this knot until the next one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Knot {
    pub t: f64,
    pub pos: Point,
    pub speed: f64,
    pub heading: f64,
    pub edge: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct State {
    pub pos: Point,
    pub speed: f64,
    pub heading: f64,
    pub edge: Option<usize>,
}

impl State {
    pub fn pose(&self) -> Pose {
        Pose::new(self.pos, self.heading)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub vehicle: u32,
    pub length: VehicleLength,
    pub knots: Vec<Knot>,
}

impl Trajectory {
    pub fn from_trip(g: &RoadGraph, trip: &Trip) -> Self {
        let mut knots: Vec<Knot> = Vec::new();
        let mut t = trip.departure;
        for (&e, &v) in trip.edges.iter().zip(&trip.speeds) {
            let edge = &g.edges[e];
            for w in edge.shape.windows(2) {
                let heading = (w[1] - w[0]).heading();
                let knot = Knot {
                    t,
                    pos: w[0],
                    speed: v,
                    heading,
                    edge: Some(e),
                };
                // the junction vertex is shared by consecutive edges
                match knots.last_mut() {
                    Some(k) if k.t == t => *k = knot,
                    _ => knots.push(knot),
                }
                t += w[0].dist(w[1]) / v;
            }
        }
        if let Some(&last) = trip.edges.last() {
            let edge = &g.edges[last];
            let n = edge.shape.len();
            knots.push(Knot {
                t,
                pos: edge.shape[n - 1],
                speed: *trip.speeds.last().unwrap(),
                heading: (edge.shape[n - 1] - edge.shape[n - 2]).heading(),
                edge: None,
            });
        }
        Trajectory {
            vehicle: trip.vehicle,
            length: trip.length,
            knots,
        }
    }

    pub fn start(&self) -> f64 {
        self.knots.first().map_or(0.0, |k| k.t)
    }

    pub fn end(&self) -> f64 {
        self.knots.last().map_or(0.0, |k| k.t)
    }

    /// State at `t`, or `None` outside `[start, end]`. Knot times return the
    /// knot exactly.
    pub fn sample(&self, t: f64) -> Option<State> {
        if self.knots.is_empty() || t < self.start() || t > self.end() {
            return None;
        }
        let i = match self.knots.binary_search_by(|k| k.t.total_cmp(&t)) {
            Ok(i) => {
                let k = self.knots[i];
                return Some(State {
                    pos: k.pos,
                    speed: k.speed,
                    heading: k.heading,
                    edge: k.edge,
                });
            }
            Err(i) => i - 1,
        };
        let (a, b) = (self.knots[i], self.knots[i + 1]);
        let f = (t - a.t) / (b.t - a.t);
        Some(State {
            pos: a.pos + (b.pos - a.pos) * f,
            speed: a.speed,
            heading: a.heading,
            edge: a.edge,
        })
    }
}

/// Deterministic trips with Poisson departures and shortest-path routes
/// between uniformly chosen junction pairs.
pub fn synthesize_trips(
    g: &RoadGraph,
    n_vehicles: usize,
    arrival_rate: f64,
    seed: u64,
    lengths: &LengthDistribution,
) -> Result<Vec<Trip>, MobilityError> {
    if n_vehicles == 0 || !(arrival_rate > 0.0) {
        return Err(MobilityError::InvalidParameter(
            "need at least one vehicle and a positive arrival rate".into(),
        ));
    }
    lengths.validate()?;
    let n_junctions = g.junctions.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut clock = 0.0;
    let mut trips = Vec::with_capacity(n_vehicles);
    for vehicle in 0..n_vehicles as u32 {
        let u: f64 = 1.0 - rng.random::<f64>();
        clock += -u.ln() / arrival_rate;
        let departure = ticks_to_secs(secs_to_ticks(clock));
        if n_junctions < 2 {
            return Err(MobilityError::SynthesisFailed);
        }
        let mut route = None;
        for _ in 0..ROUTE_ATTEMPTS {
            let a = rng.random_range(0..n_junctions);
            let b = rng.random_range(0..n_junctions - 1);
            let b = if b >= a { b + 1 } else { b };
            if let Some(r) = g.shortest_route(a, b) {
                route = Some(r);
                break;
            }
        }
        let edges = route.ok_or(MobilityError::SynthesisFailed)?;
        let speeds = edges
            .iter()
            .map(|&e| g.edges[e].speed_limit * rng.random_range(0.7..=1.0))
            .collect();
        let length = lengths.pick(rng.random());
        trips.push(Trip {
            vehicle,
            departure,
            edges,
            speeds,
            length,
        });
    }
    Ok(trips)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceSample {
    pub time: f64,
    pub vehicle: u32,
    pub pos: Point,
    pub speed: f64,
    pub heading: f64,
}

/// Samples every trajectory on the shared grid of multiples of `step_s`.
pub fn sample_trace(trajectories: &[Trajectory], step_s: f64) -> Vec<TraceSample> {
    let step = secs_to_ticks(step_s).max(1);
    let mut out = Vec::new();
    for tr in trajectories {
        let first = secs_to_ticks(tr.start()).div_ceil(step) * step;
        let mut tick = first;
        while ticks_to_secs(tick) <= tr.end() {
            let t = ticks_to_secs(tick);
            if let Some(s) = tr.sample(t) {
                out.push(TraceSample {
                    time: t,
                    vehicle: tr.vehicle,
                    pos: s.pos,
                    speed: s.speed,
                    heading: s.heading,
                });
            }
            tick += step;
        }
    }
    out.sort_by(|a, b| a.time.total_cmp(&b.time).then(a.vehicle.cmp(&b.vehicle)));
    out
}

pub fn write_trace(samples: &[TraceSample]) -> String {
    let mut s = String::from("time,vehicle,x,y,speed,heading\n");
    for t in samples {
        writeln!(
            s,
            "{:.1},{},{:.3},{:.3},{:.3},{:.6}",
            t.time, t.vehicle, t.pos.x, t.pos.y, t.speed, t.heading
        )
        .unwrap();
    }
    s
}

#[derive(Debug, Deserialize)]
struct TraceRow {
    time: f64,
    vehicle: u32,
    x: f64,
    y: f64,
    speed: f64,
    heading: f64,
}

/// Stable per-vehicle length for traces that carry no dimensions.
pub fn traced_vehicle_length(vehicle: u32, lengths: &LengthDistribution) -> VehicleLength {
    let mut z = (vehicle as u64).wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    lengths.pick((z >> 11) as f64 / (1u64 << 53) as f64)
}

/// Parses a trace and turns each vehicle's samples into a trajectory.
pub fn ingest_trace(g: &RoadGraph, csv_text: &str, lengths: &LengthDistribution) -> Result<Vec<Trajectory>, MobilityError> {
    lengths.validate()?;
    let mut reader = csv::Reader::from_reader(csv_text.as_bytes());
    let mut per_vehicle: std::collections::BTreeMap<u32, Vec<Knot>> = Default::default();
    for row in reader.deserialize::<TraceRow>() {
        let row = row.map_err(|e| MobilityError::Parse(e.to_string()))?;
        if !(row.speed >= 0.0) {
            return Err(MobilityError::Parse(format!("negative speed at {} s", row.time)));
        }
        let pos = Point::new(row.x, row.y);
        let snap = g.snap(Pose::new(pos, row.heading))?;
        let knots = per_vehicle.entry(row.vehicle).or_default();
        if let Some(prev) = knots.last() {
            if !(row.time > prev.t) {
                return Err(MobilityError::TraceOrderError {
                    vehicle: row.vehicle,
                    time: row.time,
                    prev: prev.t,
                });
            }
            let dt = row.time - prev.t;
            let moved = prev.pos.dist(pos);
            if moved > prev.speed.max(row.speed) * dt * 1.5 + DISPLACEMENT_SLACK_M {
                return Err(MobilityError::ImplausibleDisplacement {
                    vehicle: row.vehicle,
                    dt,
                    moved,
                });
            }
        }
        knots.push(Knot {
            t: row.time,
            pos,
            speed: row.speed,
            heading: row.heading,
            edge: Some(snap.edge),
        });
    }
    Ok(per_vehicle
        .into_iter()
        .map(|(vehicle, knots)| Trajectory {
            vehicle,
            length: traced_vehicle_length(vehicle, lengths),
            knots,
        })
        .collect())
}
