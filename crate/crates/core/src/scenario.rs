//! Scenario files: JSON with unit-suffixed field names.
//!
//! ```json
//! {
//!   "graph": {"grid": {"rows": 4, "cols": 4, "spacing_m": 500.0}},
//!   "mobility": {"synthetic": {"n_vehicles": 200, "arrival_rate_per_s": 0.1, "seed": 7}},
//!   "zones": [{"x_m": 500.0, "y_m": 500.0}],
//!   "relay_fraction": 0.5
//! }
//! ```
//!
//! Everything except `graph`, `mobility` and `zones` has a default. Relative
//! paths resolve against the scenario file's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::filter::SizingModel;
use crate::model::{secs_to_ticks, Point, VehicleLength, TICKS_PER_SECOND};
use crate::mobility::{ingest_trace, synthesize_trips, LengthDistribution, MobilityError, Trajectory, Trip};
use crate::road::{generate_grid, MixZoneGeometry, RoadError, RoadGraph, DEFAULT_V_MIN_MPS, URBAN_SPEED_LIMIT_MPS};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("scenario parse error: {0}")]
    Parse(String),
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error(transparent)]
    Road(#[from] RoadError),
    #[error(transparent)]
    Mobility(#[from] MobilityError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum GraphSource {
    File(PathBuf),
    Grid {
        rows: usize,
        cols: usize,
        spacing_m: f64,
        #[serde(default = "default_speed_limit")]
        speed_limit_mps: f64,
    },
}

fn default_speed_limit() -> f64 {
    URBAN_SPEED_LIMIT_MPS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TripSpec {
    pub vehicle: u32,
    pub departure_s: f64,
    /// Junction ids along the route.
    pub junctions: Vec<String>,
    pub speed_mps: f64,
    pub length_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum MobilitySource {
    Synthetic {
        n_vehicles: usize,
        arrival_rate_per_s: f64,
        seed: u64,
    },
    Trace(PathBuf),
    Trips(Vec<TripSpec>),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteConfig {
    pub x_m: f64,
    pub y_m: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub range_m: Option<f64>,
}

impl SiteConfig {
    pub fn at(p: Point) -> Self {
        SiteConfig {
            x_m: p.x,
            y_m: p.y,
            range_m: None,
        }
    }

    pub fn point(&self) -> Point {
        Point::new(self.x_m, self.y_m)
    }
}

macro_rules! defaults {
    ($($name:ident: $ty:ty = $val:expr;)*) => {
        $(fn $name() -> $ty { $val })*
    };
}

defaults! {
    d_gamma_v: f64 = 0.5;
    d_gamma_mz: f64 = 1.0;
    d_zone_radius: f64 = 100.0;
    d_rsu_range: f64 = 600.0;
    d_vehicle_range: f64 = 300.0;
    d_eavesdropper_range: f64 = 250.0;
    d_bandwidth: f64 = 50.0;
    d_tx_interval: f64 = 1.0;
    d_capacity: usize = 1000;
    d_fpr: f64 = 1e-25;
    d_threshold: usize = 2;
    d_seed: u64 = 1;
    d_v_min: f64 = DEFAULT_V_MIN_MPS;
    d_chaff_per_hour: usize = 256;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub graph: GraphSource,
    pub mobility: MobilitySource,
    pub zones: Vec<SiteConfig>,
    /// Defaults to one eavesdropper on every zone center.
    #[serde(default)]
    pub eavesdroppers: Vec<SiteConfig>,
    #[serde(default = "d_gamma_v")]
    pub gamma_v_s: f64,
    #[serde(default = "d_gamma_mz")]
    pub gamma_mz_s: f64,
    #[serde(default = "d_zone_radius")]
    pub zone_radius_m: f64,
    #[serde(default = "d_rsu_range")]
    pub rsu_range_m: f64,
    #[serde(default = "d_vehicle_range")]
    pub vehicle_range_m: f64,
    #[serde(default = "d_eavesdropper_range")]
    pub eavesdropper_range_m: f64,
    /// KiB per second.
    #[serde(default = "d_bandwidth")]
    pub filter_bandwidth_kib_per_s: f64,
    #[serde(default = "d_tx_interval")]
    pub filter_tx_interval_s: f64,
    #[serde(default = "d_capacity")]
    pub filter_capacity: usize,
    #[serde(default = "d_fpr")]
    pub filter_fpr: f64,
    #[serde(default)]
    pub filter_sizing: SizingModel,
    #[serde(default)]
    pub relay_fraction: f64,
    #[serde(default)]
    pub non_coop_fraction: f64,
    #[serde(default)]
    pub hbc_rsu_fraction: f64,
    #[serde(default = "d_threshold")]
    pub sparse_threshold: usize,
    #[serde(default = "d_seed")]
    pub rng_seed: u64,
    #[serde(default = "d_v_min")]
    pub v_min_mps: f64,
    #[serde(default)]
    pub allow_u_turns: bool,
    #[serde(default = "d_chaff_per_hour")]
    pub chaff_per_zone_per_hour: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration_s: Option<f64>,
    #[serde(default)]
    pub lengths: LengthDistribution,
}

impl ScenarioConfig {
    pub fn new(graph: GraphSource, mobility: MobilitySource, zones: Vec<Point>) -> Self {
        let v = serde_json::json!({
            "graph": graph,
            "mobility": mobility,
            "zones": zones.into_iter().map(SiteConfig::at).collect::<Vec<_>>(),
        });
        serde_json::from_value(v).expect("defaults fill the rest")
    }

    pub fn from_json(s: &str) -> Result<Self, ConfigError> {
        let c: ScenarioConfig = serde_json::from_str(s).map_err(|e| ConfigError::Parse(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Overrides one top-level numeric or boolean field by name, as used by
    /// sweeps.
    pub fn with_override(&self, key: &str, value: &str) -> Result<Self, ConfigError> {
        let mut v = serde_json::to_value(self).expect("config serializes");
        let obj = v.as_object_mut().expect("config is an object");
        let slot = obj
            .get_mut(key)
            .filter(|s| s.is_number() || s.is_boolean())
            .ok_or_else(|| ConfigError::Invalid(format!("cannot sweep `{key}`")))?;
        *slot = serde_json::from_str::<Value>(value)
            .ok()
            .filter(|n| n.is_number() || n.is_boolean())
            .ok_or_else(|| ConfigError::Invalid(format!("`{key}={value}` is not a number")))?;
        let c: ScenarioConfig = serde_json::from_value(v).map_err(|e| ConfigError::Parse(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        for (name, f) in [
            ("relay_fraction", self.relay_fraction),
            ("non_coop_fraction", self.non_coop_fraction),
            ("hbc_rsu_fraction", self.hbc_rsu_fraction),
        ] {
            if !(0.0..=1.0).contains(&f) {
                return bad(format!("{name} {f} outside [0, 1]"));
            }
        }
        for (name, s) in [("gamma_v_s", self.gamma_v_s), ("gamma_mz_s", self.gamma_mz_s), ("filter_tx_interval_s", self.filter_tx_interval_s)] {
            let ticks = s * TICKS_PER_SECOND as f64;
            if !(s > 0.0) || (ticks - ticks.round()).abs() > 1e-9 {
                return bad(format!("{name} {s} must be a positive multiple of the 0.1 s tick"));
            }
        }
        for (name, v) in [
            ("zone_radius_m", self.zone_radius_m),
            ("rsu_range_m", self.rsu_range_m),
            ("vehicle_range_m", self.vehicle_range_m),
            ("eavesdropper_range_m", self.eavesdropper_range_m),
            ("filter_bandwidth_kib_per_s", self.filter_bandwidth_kib_per_s),
            ("v_min_mps", self.v_min_mps),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.rsu_range_m < self.zone_radius_m {
            return bad("rsu_range_m must cover the zone".into());
        }
        if !(self.filter_fpr > 0.0 && self.filter_fpr < 1.0) || self.filter_capacity == 0 {
            return bad("filter_capacity must be positive and filter_fpr in (0, 1)".into());
        }
        if self.zones.is_empty() {
            return bad("at least one zone is required".into());
        }
        for (i, a) in self.zones.iter().enumerate() {
            for b in &self.zones[i + 1..] {
                if a.point().dist(b.point()) < 2.0 * self.zone_radius_m {
                    return bad(format!("zones at ({}, {}) and ({}, {}) overlap", a.x_m, a.y_m, b.x_m, b.y_m));
                }
            }
        }
        if let Some(d) = self.duration_s {
            if !(d > 0.0) {
                return bad("duration_s must be positive".into());
            }
        }
        self.lengths.validate()?;
        Ok(())
    }

    pub fn gamma_v_ticks(&self) -> u64 {
        secs_to_ticks(self.gamma_v_s)
    }

    /// Eavesdropper sites with ranges filled in.
    pub fn eavesdropper_sites(&self) -> Vec<(Point, f64)> {
        let sites = if self.eavesdroppers.is_empty() { &self.zones } else { &self.eavesdroppers };
        sites
            .iter()
            .map(|s| (s.point(), s.range_m.unwrap_or(self.eavesdropper_range_m)))
            .collect()
    }
}

/// A config with its graph, zones and vehicle trajectories materialized.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub graph: RoadGraph,
    pub zones: Vec<MixZoneGeometry>,
    pub trajectories: Vec<Trajectory>,
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_owned(),
            source,
        })?;
        let config = ScenarioConfig::from_json(&text)?;
        Scenario::build(config, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn build(config: ScenarioConfig, base_dir: &Path) -> Result<Self, ConfigError> {
        config.validate()?;
        let graph = match &config.graph {
            GraphSource::File(p) => RoadGraph::load(&base_dir.join(p))?,
            GraphSource::Grid {
                rows,
                cols,
                spacing_m,
                speed_limit_mps,
            } => generate_grid(*rows, *cols, *spacing_m, *speed_limit_mps)?,
        };
        let zones = config
            .zones
            .iter()
            .map(|z| MixZoneGeometry::from_graph(&graph, z.point(), config.zone_radius_m, config.allow_u_turns))
            .collect::<Result<Vec<_>, _>>()?;
        let trajectories = match &config.mobility {
            MobilitySource::Synthetic {
                n_vehicles,
                arrival_rate_per_s,
                seed,
            } => synthesize_trips(&graph, *n_vehicles, *arrival_rate_per_s, *seed, &config.lengths)?
                .iter()
                .map(|t| Trajectory::from_trip(&graph, t))
                .collect(),
            MobilitySource::Trace(p) => {
                let path = base_dir.join(p);
                let text = std::fs::read_to_string(&path).map_err(|source| ConfigError::Io { path, source })?;
                ingest_trace(&graph, &text, &config.lengths)?
            }
            MobilitySource::Trips(specs) => specs
                .iter()
                .map(|s| Ok(Trajectory::from_trip(&graph, &resolve_trip(&graph, s)?)))
                .collect::<Result<Vec<_>, ConfigError>>()?,
        };
        Ok(Scenario {
            config,
            graph,
            zones,
            trajectories,
        })
    }
}

fn resolve_trip(g: &RoadGraph, s: &TripSpec) -> Result<Trip, ConfigError> {
    let ids = s
        .junctions
        .iter()
        .map(|j| g.junction(j).ok_or_else(|| ConfigError::Invalid(format!("unknown junction `{j}`"))))
        .collect::<Result<Vec<_>, _>>()?;
    if ids.len() < 2 {
        return Err(ConfigError::Invalid(format!("trip for vehicle {} needs two junctions", s.vehicle)));
    }
    let edges = ids
        .windows(2)
        .map(|w| {
            g.out_edges(w[0])
                .iter()
                .copied()
                .find(|&e| g.edges[e].to == w[1])
                .ok_or_else(|| ConfigError::Invalid(format!("no edge {} -> {}", g.junctions[w[0]].id, g.junctions[w[1]].id)))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let length = VehicleLength::from_meters(s.length_m).map_err(|e| ConfigError::Invalid(e.to_string()))?;
    if !(s.speed_mps > 0.0) {
        return Err(ConfigError::Invalid(format!("speed {} for vehicle {}", s.speed_mps, s.vehicle)));
    }
    Ok(Trip {
        vehicle: s.vehicle,
        departure: s.departure_s,
        speeds: edges.iter().map(|&e| s.speed_mps.min(g.edges[e].speed_limit)).collect(),
        edges,
        length,
    })
}
