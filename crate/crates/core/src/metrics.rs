//! Scoring a run: linkability from the adversary's candidate sets and
//! overhead from the event log.
//!
//! A transition is a pseudonym change whose old pseudonym the adversary saw
//! entering the zone. It earns `1/|C|` when the new pseudonym is in the
//! candidate set `C`, zero otherwise; the success rate is the mean credit.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adversary::{attack, build_tracks, chain, hbc_rsu_link, hbc_zones, ZoneLinks};
use crate::model::{CredentialId, Entity};
use crate::road::traverse_time_bounds;
use crate::scenario::{ConfigError, Scenario};
use crate::sim::{EventKind, Event, GroundTruth, Observation, RunOutput};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("no observed pseudonym changes to score")]
    NoTransitions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionScore {
    pub vehicle: u32,
    pub zone: u32,
    pub time: f64,
    pub old: CredentialId,
    pub new: CredentialId,
    pub set_size: usize,
    pub credit: f64,
}

pub fn score(links: &[ZoneLinks], truth: &GroundTruth) -> Vec<TransitionScore> {
    truth
        .changes
        .iter()
        .filter_map(|c| {
            let zl = links.iter().find(|l| l.zone == c.zone)?;
            let set = zl.set_for(c.old, c.time)?;
            let hit = set.candidates.contains(&c.new);
            Some(TransitionScore {
                vehicle: c.vehicle,
                zone: c.zone,
                time: c.time,
                old: c.old,
                new: c.new,
                set_size: set.candidates.len(),
                credit: if hit { 1.0 / set.candidates.len() as f64 } else { 0.0 },
            })
        })
        .collect()
}

pub fn success_rate(scores: &[TransitionScore]) -> Result<f64, MetricsError> {
    if scores.is_empty() {
        return Err(MetricsError::NoTransitions);
    }
    Ok(scores.iter().map(|s| s.credit).sum::<f64>() / scores.len() as f64)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LinkedSets {
    pub two: usize,
    pub three: usize,
    pub four_plus: usize,
}

/// Sizes of correctly chained pseudonym runs per vehicle, and the distance
/// over which each run was tracked.
pub fn linked_sets(
    truth: &GroundTruth,
    chosen: &BTreeMap<CredentialId, CredentialId>,
    distance: &BTreeMap<CredentialId, f64>,
) -> (LinkedSets, Vec<f64>) {
    let mut per_vehicle: BTreeMap<u32, Vec<_>> = BTreeMap::new();
    for c in &truth.changes {
        per_vehicle.entry(c.vehicle).or_default().push(c);
    }
    let mut sets = LinkedSets::default();
    let mut tracked = Vec::new();
    let mut close = |run: &[CredentialId]| {
        if run.len() < 2 {
            return;
        }
        match run.len() {
            2 => sets.two += 1,
            3 => sets.three += 1,
            _ => sets.four_plus += 1,
        }
        tracked.push(run.iter().map(|p| distance.get(p).copied().unwrap_or(0.0)).sum());
    };
    for changes in per_vehicle.values_mut() {
        changes.sort_by(|a, b| a.time.total_cmp(&b.time));
        let mut run = vec![changes[0].old];
        for c in changes.iter() {
            if chosen.get(&c.old) == Some(&c.new) {
                run.push(c.new);
            } else {
                close(&run);
                run = vec![c.new];
            }
        }
        close(&run);
    }
    (sets, tracked)
}

/// Observed distance per pseudonym, summed over consecutive beacons no
/// further apart than one and a half beacon intervals.
pub fn observed_distance(observations: &[Observation], gamma_v_s: f64) -> BTreeMap<CredentialId, f64> {
    let mut by_id: BTreeMap<CredentialId, Vec<&Observation>> = BTreeMap::new();
    for o in observations {
        by_id.entry(o.pseudonym).or_default().push(o);
    }
    by_id
        .into_iter()
        .map(|(id, mut obs)| {
            obs.sort_by(|a, b| a.time.total_cmp(&b.time));
            obs.dedup_by(|b, a| a.time == b.time);
            let d = obs
                .windows(2)
                .filter(|w| w[1].time - w[0].time <= 1.5 * gamma_v_s + 1e-9)
                .map(|w| w[0].pos.dist(w[1].pos))
                .sum();
            (id, d)
        })
        .collect()
}

/// Anonymity set per zone occupancy epoch: the members present between
/// the zone becoming occupied and empty again, plus the decoys planned for
/// them.
pub fn anonymity_sets(events: &[Event]) -> Vec<(u32, usize)> {
    let mut open: BTreeMap<u32, (BTreeSet<CredentialId>, BTreeSet<CredentialId>)> = BTreeMap::new();
    let mut epochs: Vec<(u32, BTreeSet<CredentialId>)> = Vec::new();
    let mut covered: BTreeMap<(u32, CredentialId), usize> = BTreeMap::new();
    for e in events {
        match &e.kind {
            EventKind::JoinResponse { zone, pseudonym, .. } => {
                let (present, all) = open.entry(*zone).or_default();
                present.insert(*pseudonym);
                all.insert(*pseudonym);
            }
            EventKind::ZoneLeave { zone, pseudonym } => {
                if let Some((present, all)) = open.get_mut(zone) {
                    present.remove(pseudonym);
                    if present.is_empty() {
                        epochs.push((*zone, std::mem::take(all)));
                        open.remove(zone);
                    }
                }
            }
            EventKind::DecoyStart { zone, covered: c, .. } => *covered.entry((*zone, *c)).or_default() += 1,
            _ => {}
        }
    }
    epochs.extend(open.into_iter().map(|(z, (_, all))| (z, all)));
    epochs
        .into_iter()
        .map(|(z, members)| {
            let decoys: usize = members.iter().map(|m| covered.get(&(z, *m)).copied().unwrap_or(0)).sum();
            (z, members.len() + decoys)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkabilityReport {
    pub transitions: usize,
    pub success_rate: Option<f64>,
    pub per_zone: BTreeMap<u32, ZoneScore>,
    pub linked_sets: LinkedSets,
    pub mean_tracked_km: Option<f64>,
    /// `floor(km)` bucket → number of linked sets.
    pub tracked_km_histogram: BTreeMap<u64, usize>,
    /// Set size → number of occupancy epochs.
    pub anonymity_set_histogram: BTreeMap<usize, usize>,
    pub hbc_zones: BTreeSet<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZoneScore {
    pub transitions: usize,
    pub success_rate: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostModel {
    pub rsu_sign_ms: f64,
    pub rsu_verify_ms: f64,
    pub vehicle_sign_ms: f64,
    pub vehicle_verify_ms: f64,
    pub membership_check_ms: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            rsu_sign_ms: 0.3,
            rsu_verify_ms: 0.4,
            vehicle_sign_ms: 3.0,
            vehicle_verify_ms: 3.5,
            membership_check_ms: 3.68e-4,
        }
    }
}

fn ns(ms: f64) -> u64 {
    (ms * 1e6).round() as u64
}

impl CostModel {
    fn sign(&self, e: Entity) -> u64 {
        match e {
            Entity::Rsu(_) => ns(self.rsu_sign_ms),
            Entity::Vehicle(_) => ns(self.vehicle_sign_ms),
            _ => 0,
        }
    }

    /// `(entity, bytes sent, nanoseconds computed)` charged by one event.
    /// Time is kept in whole nanoseconds so sums do not drift.
    pub fn charges(&self, e: &Event) -> Vec<(Entity, u64, u64)> {
        let who = e.entity;
        let sent = |bytes: u32| vec![(who, bytes as u64, self.sign(who))];
        match &e.kind {
            EventKind::Beacon { bytes, .. }
            | EventKind::Advert { bytes, .. }
            | EventKind::PeerUpdate { bytes, .. }
            | EventKind::ChaffRetired { bytes, .. }
            | EventKind::PeerQuery { bytes } => sent(*bytes),
            EventKind::FilterChunk { bytes, .. } => vec![(who, *bytes as u64, 0)],
            EventKind::JoinRequest { zone, bytes, .. } => {
                vec![(who, *bytes as u64, self.sign(who)), (Entity::Rsu(*zone), 0, ns(self.rsu_verify_ms))]
            }
            EventKind::JoinResponse { vehicle, bytes, .. } => {
                vec![(who, *bytes as u64, self.sign(who)), (Entity::Vehicle(*vehicle), 0, ns(self.vehicle_verify_ms))]
            }
            EventKind::FilterDelivered { .. } => vec![(who, 0, ns(self.vehicle_verify_ms))],
            EventKind::PeerResponse { requester, zones, bytes } => vec![
                (who, *bytes as u64, 0),
                (Entity::Vehicle(*requester), 0, ns(self.vehicle_verify_ms) * zones.len() as u64),
            ],
            EventKind::SafetyStats { checks, verifies, .. } => vec![(
                who,
                0,
                *checks as u64 * ns(self.membership_check_ms) + *verifies as u64 * ns(self.vehicle_verify_ms),
            )],
            _ => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EntityOverhead {
    pub bytes: u64,
    pub ns: u64,
    /// Whole seconds from first to last charge, inclusive.
    pub active_s: u64,
    /// Second → (bytes, ns).
    pub series: BTreeMap<u64, (u64, u64)>,
}

impl EntityOverhead {
    pub fn ms(&self) -> f64 {
        self.ns as f64 / 1e6
    }

    pub fn kb_per_s(&self) -> f64 {
        self.bytes as f64 / (1000.0 * self.active_s.max(1) as f64)
    }

    pub fn ms_per_s(&self) -> f64 {
        self.ns as f64 / (1e6 * self.active_s.max(1) as f64)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OverheadReport {
    #[serde(with = "entity_pairs")]
    pub per_entity: BTreeMap<Entity, EntityOverhead>,
    pub rsu_kb_per_s: f64,
    pub rsu_ms_per_s: f64,
    pub vehicle_kb_per_s: f64,
    pub vehicle_ms_per_s: f64,
    pub mean_filter_latency_s: Option<f64>,
}

// JSON object keys must be strings, so the per-entity map goes out as pairs.
mod entity_pairs {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use super::EntityOverhead;
    use crate::model::Entity;

    pub fn serialize<S: Serializer>(m: &BTreeMap<Entity, EntityOverhead>, s: S) -> Result<S::Ok, S::Error> {
        m.iter().collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<Entity, EntityOverhead>, D::Error> {
        Ok(Vec::<(Entity, EntityOverhead)>::deserialize(d)?.into_iter().collect())
    }
}

/// Overhead accounting; KB here are 1000 bytes.
pub fn overhead(events: &[Event], costs: &CostModel) -> OverheadReport {
    let mut per: BTreeMap<Entity, EntityOverhead> = BTreeMap::new();
    let mut latencies = Vec::new();
    for e in events {
        if let EventKind::FilterDelivered { latency_s, .. } = e.kind {
            latencies.push(latency_s);
        }
        let sec = e.tick / crate::model::TICKS_PER_SECOND;
        for (who, bytes, ns) in costs.charges(e) {
            let o = per.entry(who).or_default();
            o.bytes += bytes;
            o.ns += ns;
            let s = o.series.entry(sec).or_default();
            s.0 += bytes;
            s.1 += ns;
        }
    }
    for o in per.values_mut() {
        let first = o.series.keys().next().copied().unwrap_or(0);
        let last = o.series.keys().next_back().copied().unwrap_or(0);
        o.active_s = last - first + 1;
    }
    let mean = |f: &dyn Fn(&EntityOverhead) -> f64, rsu: bool| {
        let v: Vec<f64> = per
            .iter()
            .filter(|(k, _)| matches!(k, Entity::Rsu(_)) == rsu && matches!(k, Entity::Rsu(_) | Entity::Vehicle(_)))
            .map(|(_, o)| f(o))
            .collect();
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    OverheadReport {
        rsu_kb_per_s: mean(&EntityOverhead::kb_per_s, true),
        rsu_ms_per_s: mean(&EntityOverhead::ms_per_s, true),
        vehicle_kb_per_s: mean(&EntityOverhead::kb_per_s, false),
        vehicle_ms_per_s: mean(&EntityOverhead::ms_per_s, false),
        mean_filter_latency_s: (!latencies.is_empty()).then(|| latencies.iter().sum::<f64>() / latencies.len() as f64),
        per_entity: per,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub linkability: LinkabilityReport,
    pub overhead: OverheadReport,
    pub scores: Vec<TransitionScore>,
    pub links: Vec<ZoneLinks>,
}

/// The attack, with curious RSUs where configured, followed by scoring.
pub fn evaluate(sc: &Scenario, out: &RunOutput) -> Result<RunReport, ConfigError> {
    let cfg = &sc.config;
    let bounds = sc
        .zones
        .iter()
        .map(|z| traverse_time_bounds(z, &sc.graph, cfg.v_min_mps))
        .collect::<Result<Vec<_>, _>>()?;
    let tracks = build_tracks(&out.observations, cfg.gamma_v_s);
    let mut links = attack(&tracks, &sc.graph, &sc.zones, &bounds, cfg.gamma_v_s);
    let hbc = hbc_zones(sc.zones.len(), cfg.hbc_rsu_fraction, cfg.rng_seed);
    for zl in links.iter_mut().filter(|l| hbc.contains(&l.zone)) {
        let internal: Vec<_> = out.truth.internal.iter().filter(|b| b.zone == zl.zone).copied().collect();
        let own: BTreeSet<CredentialId> = out.truth.decoys.iter().filter(|d| d.zone == zl.zone).map(|d| d.chaff).collect();
        zl.sets = hbc_rsu_link(&zl.sets, &internal, &own, cfg.gamma_v_s);
    }
    let scores = score(&links, &out.truth);
    let mut per_zone = BTreeMap::new();
    for z in 0..sc.zones.len() as u32 {
        let zs: Vec<TransitionScore> = scores.iter().filter(|s| s.zone == z).cloned().collect();
        per_zone.insert(
            z,
            ZoneScore {
                transitions: zs.len(),
                success_rate: success_rate(&zs).ok(),
            },
        );
    }
    let chosen = chain(&links, cfg.rng_seed);
    let distance = observed_distance(&out.observations, cfg.gamma_v_s);
    let (linked, tracked) = linked_sets(&out.truth, &chosen, &distance);
    let mut km_hist = BTreeMap::new();
    for d in &tracked {
        *km_hist.entry((d / 1000.0).floor() as u64).or_insert(0) += 1;
    }
    let mut anon = BTreeMap::new();
    for (_, n) in anonymity_sets(&out.events) {
        *anon.entry(n).or_insert(0) += 1;
    }
    Ok(RunReport {
        seed: cfg.rng_seed,
        linkability: LinkabilityReport {
            transitions: scores.len(),
            success_rate: success_rate(&scores).ok(),
            per_zone,
            linked_sets: linked,
            mean_tracked_km: (!tracked.is_empty()).then(|| tracked.iter().sum::<f64>() / tracked.len() as f64 / 1000.0),
            tracked_km_histogram: km_hist,
            anonymity_set_histogram: anon,
            hbc_zones: hbc,
        },
        overhead: overhead(&out.events, &CostModel::default()),
        scores,
        links,
    })
}
