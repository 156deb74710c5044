//! Road graph, mix-zone geometry and the reachability questions the linking
//! attack asks about them.
//!
//! Edges are directed polylines. Two opposite lanes of the same street share
//! geometry, so snapping a position to an edge uses the heading to pick the
//! lane the vehicle is actually driving on.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Point, Pose};

/// Positions farther than this from every edge are off-network.
pub const SNAP_TOLERANCE_M: f64 = 5.0;
/// An exiting beacon must be this close to an exit point.
pub const EXIT_GATE_M: f64 = 50.0;
/// Creeping speed used for the maximum traverse time (5 km/h).
pub const DEFAULT_V_MIN_MPS: f64 = 1.39;
/// 50 km/h.
pub const URBAN_SPEED_LIMIT_MPS: f64 = 50.0 / 3.6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RoadError {
    #[error("position ({x:.3}, {y:.3}) is more than {SNAP_TOLERANCE_M} m from every edge")]
    OffNetwork { x: f64, y: f64 },
    #[error("unknown junction {0:?}")]
    UnknownJunction(String),
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("invalid edge {0:?}: {1}")]
    BadEdge(String, String),
    #[error("mix-zone has no internal path")]
    NoInternalPath,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("cannot parse road graph: {0}")]
    Parse(String),
    #[error("cannot read road graph: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JunctionRecord {
    pub id: String,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeRecord {
    pub id: String,
    pub from: String,
    pub to: String,
    /// Polyline from `from` to `to`; empty means a straight segment.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub shape: Vec<[f64; 2]>,
    pub speed_limit: f64,
}

/// On-disk road graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphFile {
    pub junctions: Vec<JunctionRecord>,
    pub edges: Vec<EdgeRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Junction {
    pub id: String,
    pub pos: Point,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    pub id: String,
    pub from: usize,
    pub to: usize,
    pub shape: Vec<Point>,
    pub speed_limit: f64,
    cum: Vec<f64>,
}

impl Edge {
    pub fn length(&self) -> f64 {
        *self.cum.last().unwrap()
    }

    /// Point and segment heading at arc offset `s`, clamped to the edge.
    pub fn point_at(&self, s: f64) -> (Point, f64) {
        let s = s.clamp(0.0, self.length());
        let seg = match self.cum.binary_search_by(|c| c.total_cmp(&s)) {
            Ok(i) => i.min(self.shape.len() - 2),
            Err(i) => i.saturating_sub(1).min(self.shape.len() - 2),
        };
        let (a, b) = (self.shape[seg], self.shape[seg + 1]);
        let seg_len = self.cum[seg + 1] - self.cum[seg];
        let heading = (b - a).heading();
        if seg_len == 0.0 {
            return (a, heading);
        }
        let t = (s - self.cum[seg]) / seg_len;
        (a + (b - a) * t, heading)
    }

    /// Closest point on the polyline: `(offset, distance, heading there)`.
    pub fn project(&self, p: Point) -> (f64, f64, f64) {
        let mut best = (0.0, f64::INFINITY, 0.0);
        for i in 0..self.shape.len() - 1 {
            let (a, b) = (self.shape[i], self.shape[i + 1]);
            let d = b - a;
            let len2 = d.dot(d);
            let t = if len2 == 0.0 { 0.0 } else { ((p - a).dot(d) / len2).clamp(0.0, 1.0) };
            let q = a + d * t;
            let dist = p.dist(q);
            if dist < best.1 {
                best = (self.cum[i] + t * (self.cum[i + 1] - self.cum[i]), dist, d.heading());
            }
        }
        best
    }
}

/// Where a pose lands on the network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Snap {
    pub edge: usize,
    pub offset: f64,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoadGraph {
    pub junctions: Vec<Junction>,
    pub edges: Vec<Edge>,
    out_edges: Vec<Vec<usize>>,
    junction_ids: HashMap<String, usize>,
}

impl RoadGraph {
    pub fn from_file_struct(file: &GraphFile) -> Result<Self, RoadError> {
        let mut junction_ids = HashMap::new();
        let mut junctions = Vec::with_capacity(file.junctions.len());
        for j in &file.junctions {
            if junction_ids.insert(j.id.clone(), junctions.len()).is_some() {
                return Err(RoadError::DuplicateId(j.id.clone()));
            }
            junctions.push(Junction {
                id: j.id.clone(),
                pos: Point::new(j.x, j.y),
            });
        }
        let mut edge_ids = HashMap::new();
        let mut edges = Vec::with_capacity(file.edges.len());
        let mut out_edges = vec![Vec::new(); junctions.len()];
        for e in &file.edges {
            if edge_ids.insert(e.id.clone(), edges.len()).is_some() {
                return Err(RoadError::DuplicateId(e.id.clone()));
            }
            let lookup = |id: &String| {
                junction_ids
                    .get(id)
                    .copied()
                    .ok_or_else(|| RoadError::UnknownJunction(id.clone()))
            };
            let (from, to) = (lookup(&e.from)?, lookup(&e.to)?);
            if !(e.speed_limit > 0.0) {
                return Err(RoadError::BadEdge(e.id.clone(), "speed limit must be positive".into()));
            }
            let shape: Vec<Point> = if e.shape.is_empty() {
                vec![junctions[from].pos, junctions[to].pos]
            } else {
                e.shape.iter().map(|&[x, y]| Point::new(x, y)).collect()
            };
            if shape.len() < 2 {
                return Err(RoadError::BadEdge(e.id.clone(), "shape needs two points".into()));
            }
            let mut cum = vec![0.0];
            for w in shape.windows(2) {
                cum.push(cum.last().unwrap() + w[0].dist(w[1]));
            }
            if !(*cum.last().unwrap() > 0.0) {
                return Err(RoadError::BadEdge(e.id.clone(), "zero length".into()));
            }
            out_edges[from].push(edges.len());
            edges.push(Edge {
                id: e.id.clone(),
                from,
                to,
                shape,
                speed_limit: e.speed_limit,
                cum,
            });
        }
        Ok(RoadGraph {
            junctions,
            edges,
            out_edges,
            junction_ids,
        })
    }

    pub fn from_json(s: &str) -> Result<Self, RoadError> {
        let file: GraphFile = serde_json::from_str(s).map_err(|e| RoadError::Parse(e.to_string()))?;
        Self::from_file_struct(&file)
    }

    pub fn load(path: &Path) -> Result<Self, RoadError> {
        let s = std::fs::read_to_string(path).map_err(|e| RoadError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&s)
    }

    pub fn to_file_struct(&self) -> GraphFile {
        GraphFile {
            junctions: self
                .junctions
                .iter()
                .map(|j| JunctionRecord {
                    id: j.id.clone(),
                    x: j.pos.x,
                    y: j.pos.y,
                })
                .collect(),
            edges: self
                .edges
                .iter()
                .map(|e| {
                    let straight = e.shape.len() == 2
                        && e.shape[0] == self.junctions[e.from].pos
                        && e.shape[1] == self.junctions[e.to].pos;
                    EdgeRecord {
                        id: e.id.clone(),
                        from: self.junctions[e.from].id.clone(),
                        to: self.junctions[e.to].id.clone(),
                        shape: if straight {
                            Vec::new()
                        } else {
                            e.shape.iter().map(|p| [p.x, p.y]).collect()
                        },
                        speed_limit: e.speed_limit,
                    }
                })
                .collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file_struct()).expect("graph serializes")
    }

    pub fn junction(&self, id: &str) -> Option<usize> {
        self.junction_ids.get(id).copied()
    }

    pub fn out_edges(&self, junction: usize) -> &[usize] {
        &self.out_edges[junction]
    }

    /// True when `b` drives straight back along `a`.
    pub fn is_u_turn(&self, a: usize, b: usize) -> bool {
        let (ea, eb) = (&self.edges[a], &self.edges[b]);
        ea.from == eb.to && ea.to == eb.from
    }

    /// Snaps a pose to the best-aligned edge within [`SNAP_TOLERANCE_M`],
    /// breaking ties by distance and then by edge index.
    pub fn snap(&self, pose: Pose) -> Result<Snap, RoadError> {
        let dir = Point::from_heading(pose.heading);
        let mut best: Option<(f64, f64, Snap)> = None;
        for (i, e) in self.edges.iter().enumerate() {
            let (offset, distance, heading) = e.project(pose.pos);
            if distance > SNAP_TOLERANCE_M {
                continue;
            }
            // quantize alignment so float noise cannot reorder equal lanes
            let align = (dir.dot(Point::from_heading(heading)) * 1e6).round();
            let better = match &best {
                None => true,
                Some((ba, bd, _)) => align > *ba || (align == *ba && distance < *bd - 1e-9),
            };
            if better {
                best = Some((align, distance, Snap { edge: i, offset, distance }));
            }
        }
        best.map(|b| b.2).ok_or(RoadError::OffNetwork {
            x: pose.pos.x,
            y: pose.pos.y,
        })
    }

    /// Length-shortest junction route as an edge list.
    pub fn shortest_route(&self, from: usize, to: usize) -> Option<Vec<usize>> {
        if from == to {
            return None;
        }
        let n = self.junctions.len();
        let mut dist = vec![f64::INFINITY; n];
        let mut via: Vec<Option<usize>> = vec![None; n];
        let mut heap = BinaryHeap::new();
        dist[from] = 0.0;
        heap.push(Queued { cost: 0.0, node: from });
        while let Some(Queued { cost, node }) = heap.pop() {
            if cost > dist[node] {
                continue;
            }
            if node == to {
                break;
            }
            for &e in &self.out_edges[node] {
                let next = self.edges[e].to;
                let c = cost + self.edges[e].length();
                if c < dist[next] {
                    dist[next] = c;
                    via[next] = Some(e);
                    heap.push(Queued { cost: c, node: next });
                }
            }
        }
        via[to]?;
        let mut route = Vec::new();
        let mut cur = to;
        while let Some(e) = via[cur] {
            route.push(e);
            cur = self.edges[e].from;
            if cur == from {
                break;
            }
        }
        route.reverse();
        Some(route)
    }
}

#[derive(PartialEq)]
struct Queued {
    cost: f64,
    node: usize,
}

impl Eq for Queued {}

impl Ord for Queued {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .cost
            .total_cmp(&self.cost)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// A point where an edge crosses the zone boundary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundaryPoint {
    pub edge: usize,
    pub offset: f64,
    pub pos: Point,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InternalPath {
    /// Index into `entry_points`.
    pub entry: usize,
    /// Index into `exit_points`.
    pub exit: usize,
    pub length: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixZoneGeometry {
    pub center: Point,
    pub radius: f64,
    pub entry_points: Vec<BoundaryPoint>,
    pub exit_points: Vec<BoundaryPoint>,
    pub internal_paths: Vec<InternalPath>,
    pub allow_u_turns: bool,
    /// Junctions strictly inside the circle.
    inner: Vec<bool>,
    /// Edges touching the zone (crossing the boundary or joining inner junctions).
    pub zone_edges: Vec<usize>,
}

impl MixZoneGeometry {
    pub fn from_graph(g: &RoadGraph, center: Point, radius: f64, allow_u_turns: bool) -> Result<Self, RoadError> {
        if !(radius > 0.0) {
            return Err(RoadError::InvalidParameter(format!("zone radius {radius}")));
        }
        let inner: Vec<bool> = g.junctions.iter().map(|j| j.pos.dist(center) < radius).collect();
        let mut entry_points = Vec::new();
        let mut exit_points = Vec::new();
        let mut zone_edges = Vec::new();
        for (i, e) in g.edges.iter().enumerate() {
            let crossings = circle_crossings(e, center, radius);
            let touches = !crossings.is_empty() || inner[e.from] || inner[e.to];
            for (offset, pos, entering) in crossings {
                let bp = BoundaryPoint { edge: i, offset, pos };
                if entering {
                    entry_points.push(bp);
                } else {
                    exit_points.push(bp);
                }
            }
            if touches {
                zone_edges.push(i);
            }
        }
        let mut zone = MixZoneGeometry {
            center,
            radius,
            entry_points,
            exit_points,
            internal_paths: Vec::new(),
            allow_u_turns,
            inner,
            zone_edges,
        };
        zone.internal_paths = zone.compute_internal_paths(g);
        Ok(zone)
    }

    /// Builds a zone from explicit parts; no graph-derived inner junctions.
    pub fn from_parts(
        center: Point,
        radius: f64,
        entry_points: Vec<BoundaryPoint>,
        exit_points: Vec<BoundaryPoint>,
        internal_paths: Vec<InternalPath>,
        zone_edges: Vec<usize>,
    ) -> Self {
        MixZoneGeometry {
            center,
            radius,
            entry_points,
            exit_points,
            internal_paths,
            allow_u_turns: false,
            inner: Vec::new(),
            zone_edges,
        }
    }

    pub fn contains(&self, p: Point) -> bool {
        p.dist(self.center) < self.radius
    }

    pub fn is_inner_junction(&self, j: usize) -> bool {
        self.inner.get(j).copied().unwrap_or(false)
    }

    /// Costs to reach the start of every edge after leaving `start` through
    /// at least one in-zone junction transition. Cost counts full edge
    /// lengths after `start`.
    fn reach_from(&self, g: &RoadGraph, start: usize) -> Vec<Option<f64>> {
        let mut dist: Vec<Option<f64>> = vec![None; g.edges.len()];
        let mut heap = BinaryHeap::new();
        let push_succ = |from_edge: usize, cost: f64, dist: &mut Vec<Option<f64>>, heap: &mut BinaryHeap<Queued>| {
            let j = g.edges[from_edge].to;
            if !self.is_inner_junction(j) {
                return;
            }
            for &next in g.out_edges(j) {
                if !self.allow_u_turns && g.is_u_turn(from_edge, next) {
                    continue;
                }
                if dist[next].is_none_or(|d| cost < d) {
                    dist[next] = Some(cost);
                    heap.push(Queued { cost, node: next });
                }
            }
        };
        push_succ(start, 0.0, &mut dist, &mut heap);
        while let Some(Queued { cost, node }) = heap.pop() {
            if dist[node].is_some_and(|d| cost > d) {
                continue;
            }
            push_succ(node, cost + g.edges[node].length(), &mut dist, &mut heap);
        }
        dist
    }

    fn compute_internal_paths(&self, g: &RoadGraph) -> Vec<InternalPath> {
        let mut out = Vec::new();
        for (ei, entry) in self.entry_points.iter().enumerate() {
            let reach = self.reach_from(g, entry.edge);
            let head = g.edges[entry.edge].length() - entry.offset;
            for (xi, exit) in self.exit_points.iter().enumerate() {
                let len = if exit.edge == entry.edge && exit.offset > entry.offset {
                    Some(exit.offset - entry.offset)
                } else {
                    reach[exit.edge].map(|d| head + d + exit.offset)
                };
                if let Some(length) = len {
                    out.push(InternalPath { entry: ei, exit: xi, length });
                }
            }
        }
        out
    }

    /// Exits reachable from an entry point through the zone.
    pub fn exits_from_entry(&self, entry: usize) -> Vec<usize> {
        self.internal_paths
            .iter()
            .filter(|p| p.entry == entry)
            .map(|p| p.exit)
            .collect()
    }

    pub fn nearest_entry(&self, p: Point) -> Option<(usize, f64)> {
        nearest(&self.entry_points, p)
    }

    pub fn nearest_exit(&self, p: Point) -> Option<(usize, f64)> {
        nearest(&self.exit_points, p)
    }

    /// Entry point lying on `edge`, if the edge enters the zone.
    pub fn entry_on_edge(&self, edge: usize) -> Option<usize> {
        self.entry_points.iter().position(|b| b.edge == edge)
    }

    pub fn exit_on_edge(&self, edge: usize) -> Option<usize> {
        self.exit_points.iter().position(|b| b.edge == edge)
    }
}

fn nearest(points: &[BoundaryPoint], p: Point) -> Option<(usize, f64)> {
    points
        .iter()
        .enumerate()
        .map(|(i, b)| (i, b.pos.dist(p)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
}

/// `(offset, point, entering)` for each boundary crossing along an edge.
fn circle_crossings(e: &Edge, c: Point, r: f64) -> Vec<(f64, Point, bool)> {
    let mut out = Vec::new();
    for i in 0..e.shape.len() - 1 {
        let (a, b) = (e.shape[i], e.shape[i + 1]);
        let d = b - a;
        let f = a - c;
        let qa = d.dot(d);
        let qb = 2.0 * f.dot(d);
        let qc = f.dot(f) - r * r;
        let disc = qb * qb - 4.0 * qa * qc;
        if qa == 0.0 || disc <= 0.0 {
            continue;
        }
        let sq = disc.sqrt();
        for (t, entering) in [((-qb - sq) / (2.0 * qa), true), ((-qb + sq) / (2.0 * qa), false)] {
            // half-open so a crossing exactly at a vertex is counted once
            if (0.0..1.0).contains(&t) || (i == e.shape.len() - 2 && t == 1.0) {
                let seg_len = e.cum[i + 1] - e.cum[i];
                out.push((e.cum[i] + t * seg_len, a + d * t, entering));
            }
        }
    }
    out
}

/// `(min_s, max_s)` a vehicle can spend crossing the zone.
pub fn traverse_time_bounds(zone: &MixZoneGeometry, g: &RoadGraph, v_min: f64) -> Result<(f64, f64), RoadError> {
    if !(v_min > 0.0) {
        return Err(RoadError::InvalidParameter(format!("v_min {v_min}")));
    }
    let shortest = zone.internal_paths.iter().map(|p| p.length).min_by(f64::total_cmp);
    let longest = zone.internal_paths.iter().map(|p| p.length).max_by(f64::total_cmp);
    let v_max = zone
        .zone_edges
        .iter()
        .map(|&e| g.edges[e].speed_limit)
        .max_by(f64::total_cmp);
    match (shortest, longest, v_max) {
        (Some(s), Some(l), Some(v)) => Ok((s / v, l / v_min)),
        _ => Err(RoadError::NoInternalPath),
    }
}

/// Whether a vehicle last seen at `from` could reappear at `to` having
/// driven through `zone`.
pub fn path_exists(g: &RoadGraph, from: Pose, to: Pose, zone: &MixZoneGeometry) -> Result<bool, RoadError> {
    let a = g.snap(from)?;
    let b = g.snap(to)?;
    Ok(edge_path_exists(g, a, b, zone))
}

/// [`path_exists`] on already-snapped positions.
pub fn edge_path_exists(g: &RoadGraph, from: Snap, to: Snap, zone: &MixZoneGeometry) -> bool {
    if from.edge == to.edge && to.offset > from.offset {
        let crosses = |pts: &[BoundaryPoint]| {
            pts.iter()
                .any(|b| b.edge == from.edge && b.offset > from.offset && b.offset < to.offset)
        };
        if crosses(&zone.entry_points) && crosses(&zone.exit_points) {
            return true;
        }
    }
    zone.reach_from(g, from.edge)[to.edge].is_some()
}

/// Outside the zone, heading away from its center, and near an exit point.
pub fn exit_direction_consistent(pose: Pose, zone: &MixZoneGeometry) -> bool {
    let radial = pose.pos - zone.center;
    radial.norm() >= zone.radius
        && Point::from_heading(pose.heading).dot(radial) > 0.0
        && zone.nearest_exit(pose.pos).is_some_and(|(_, d)| d <= EXIT_GATE_M)
}

/// Mirror of [`exit_direction_consistent`] for the last beacon before a
/// zone: outside, heading toward the center, near an entry point.
pub fn entry_direction_consistent(pose: Pose, zone: &MixZoneGeometry) -> bool {
    let radial = pose.pos - zone.center;
    radial.norm() >= zone.radius
        && Point::from_heading(pose.heading).dot(radial) < 0.0
        && zone.nearest_entry(pose.pos).is_some_and(|(_, d)| d <= EXIT_GATE_M)
}

/// Bidirectional `rows × cols` grid with straight edges.
pub fn generate_grid(rows: usize, cols: usize, spacing_m: f64, speed_limit: f64) -> Result<RoadGraph, RoadError> {
    if rows < 2 || cols < 2 {
        return Err(RoadError::InvalidParameter(format!("grid {rows}x{cols} needs at least 2x2")));
    }
    if !(spacing_m > 0.0) || !(speed_limit > 0.0) {
        return Err(RoadError::InvalidParameter("spacing and speed limit must be positive".into()));
    }
    let jid = |r: usize, c: usize| format!("j{r}_{c}");
    let mut junctions = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            junctions.push(JunctionRecord {
                id: jid(r, c),
                x: c as f64 * spacing_m,
                y: r as f64 * spacing_m,
            });
        }
    }
    let mut edges = Vec::new();
    let mut link = |a: String, b: String| {
        for (f, t) in [(&a, &b), (&b, &a)] {
            edges.push(EdgeRecord {
                id: format!("{f}-{t}"),
                from: f.clone(),
                to: t.clone(),
                shape: Vec::new(),
                speed_limit,
            });
        }
    };
    for r in 0..rows {
        for c in 0..cols {
            if c + 1 < cols {
                link(jid(r, c), jid(r, c + 1));
            }
            if r + 1 < rows {
                link(jid(r, c), jid(r + 1, c));
            }
        }
    }
    RoadGraph::from_file_struct(&GraphFile { junctions, edges })
}

/// Centers for `k` zones on the most central interior junctions of a grid,
/// skipping any that would overlap an already placed zone.
pub fn central_zone_sites(rows: usize, cols: usize, spacing_m: f64, k: usize, radius_m: f64) -> Result<Vec<Point>, RoadError> {
    let mut interior: Vec<(usize, usize)> = (1..rows.saturating_sub(1))
        .flat_map(|r| (1..cols.saturating_sub(1)).map(move |c| (r, c)))
        .collect();
    if k > interior.len() {
        return Err(RoadError::InvalidParameter(format!(
            "{k} zones requested but the grid has {} interior junctions",
            interior.len()
        )));
    }
    let mid = |n: usize| (n as f64 - 1.0) / 2.0;
    let centrality = |&(r, c): &(usize, usize)| (r as f64 - mid(rows)).hypot(c as f64 - mid(cols));
    interior.sort_by(|a, b| centrality(a).total_cmp(&centrality(b)).then(a.cmp(b)));
    let mut sites: Vec<Point> = Vec::new();
    for (r, c) in interior {
        let p = Point::new(c as f64 * spacing_m, r as f64 * spacing_m);
        if sites.iter().all(|s| s.dist(p) >= 2.0 * radius_m) {
            sites.push(p);
        }
        if sites.len() == k {
            return Ok(sites);
        }
    }
    Err(RoadError::InvalidParameter(format!(
        "cannot place {k} non-overlapping zones of radius {radius_m} m"
    )))
}
