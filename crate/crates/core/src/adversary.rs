//! Global passive eavesdropper and its linking attack.
//!
//! Observations are split into tracks: runs of one pseudonym without a gap
//! longer than one and a half beacon intervals. A track whose last beacon
//! approaches a zone entry is *entering*; one whose first beacon leaves
//! through an exit is *exiting*. For each entering track the attack keeps
//! every exiting track that
//!
//! 1. has the same vehicle length,
//! 2. first appears within the zone's traversal time bounds,
//! 3. belongs to a pseudonym never heard while the entering one was,
//! 4. is reachable through the zone's internal road network, and
//! 5. leaves in a direction consistent with the exit it appears at.
//!
//! Tracks of a pseudonym seen both entering and exiting the same zone are
//! linked trivially and removed first.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};

use crate::model::{CredentialId, Pose, VehicleLength};
use crate::rng::{fold, keyed_rng, Purpose};
use crate::road::{
    edge_path_exists, entry_direction_consistent, exit_direction_consistent, path_exists, MixZoneGeometry, RoadGraph,
    Snap,
};
use crate::sim::{InternalBeacon, Observation};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Track {
    pub pseudonym: CredentialId,
    pub length: VehicleLength,
    pub first: Observation,
    pub last: Observation,
    /// First and last time the pseudonym was heard at all.
    pub span: (f64, f64),
}

impl Track {
    pub fn entry_pose(&self) -> Pose {
        Pose {
            pos: self.last.pos,
            heading: self.last.heading,
        }
    }

    pub fn exit_pose(&self) -> Pose {
        Pose {
            pos: self.first.pos,
            heading: self.first.heading,
        }
    }
}

/// Pooled observations from every eavesdropper, split into tracks. The
/// same beacon heard twice counts once.
pub fn build_tracks(observations: &[Observation], gamma_v_s: f64) -> Vec<Track> {
    let mut by_id: BTreeMap<CredentialId, Vec<&Observation>> = BTreeMap::new();
    for o in observations {
        by_id.entry(o.pseudonym).or_default().push(o);
    }
    let max_gap = 1.5 * gamma_v_s;
    let mut tracks = Vec::new();
    for (id, mut obs) in by_id {
        obs.sort_by(|a, b| a.time.total_cmp(&b.time).then(a.eavesdropper.cmp(&b.eavesdropper)));
        obs.dedup_by(|b, a| a.time == b.time);
        let span = (obs[0].time, obs[obs.len() - 1].time);
        let mut first = obs[0];
        let mut last = obs[0];
        for o in &obs[1..] {
            if o.time - last.time > max_gap + 1e-9 {
                tracks.push(track(id, first, last, span));
                first = o;
            }
            last = o;
        }
        tracks.push(track(id, first, last, span));
    }
    tracks
}

fn track(pseudonym: CredentialId, first: &Observation, last: &Observation, span: (f64, f64)) -> Track {
    Track {
        pseudonym,
        length: first.length,
        first: *first,
        last: *last,
        span,
    }
}

/// One zone's linking instance.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Instance {
    pub entering: Vec<Track>,
    /// Every non-trivial track; candidates are drawn from these.
    pub pool: Vec<Track>,
}

/// Gates tracks for one zone and drops trivially linked pseudonyms.
pub fn zone_instance(tracks: &[Track], zone: &MixZoneGeometry) -> Instance {
    let entering: Vec<Track> = tracks.iter().filter(|t| entry_direction_consistent(t.entry_pose(), zone)).copied().collect();
    let exiting: BTreeSet<CredentialId> = tracks
        .iter()
        .filter(|t| exit_direction_consistent(t.exit_pose(), zone))
        .map(|t| t.pseudonym)
        .collect();
    filter_trivial(Instance {
        entering,
        pool: tracks.to_vec(),
    }, &exiting)
}

/// Removes pseudonyms that enter and also exit the zone.
pub fn filter_trivial(mut inst: Instance, exiting: &BTreeSet<CredentialId>) -> Instance {
    let trivial: BTreeSet<CredentialId> = inst
        .entering
        .iter()
        .filter(|t| exiting.contains(&t.pseudonym))
        .map(|t| t.pseudonym)
        .collect();
    inst.entering.retain(|t| !trivial.contains(&t.pseudonym));
    inst.pool.retain(|t| !trivial.contains(&t.pseudonym));
    inst
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkParams {
    pub bounds: (f64, f64),
    pub gamma_v_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub entering: CredentialId,
    /// Time of the entering track's last beacon.
    pub at: f64,
    pub candidates: Vec<CredentialId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZoneLinks {
    pub zone: u32,
    pub sets: Vec<CandidateSet>,
}

impl ZoneLinks {
    pub fn set_for(&self, entering: CredentialId, before: f64) -> Option<&CandidateSet> {
        self.sets
            .iter()
            .filter(|s| s.entering == entering && s.at <= before + 1e-9)
            .max_by(|a, b| a.at.total_cmp(&b.at))
    }
}

fn seen_together(a: &Track, b: &Track, tol: f64) -> bool {
    a.span.0 <= b.span.1 + tol && b.span.0 <= a.span.1 + tol
}

/// Candidate sets, using a length and time index over exit-consistent
/// tracks.
pub fn link(inst: &Instance, g: &RoadGraph, zone: &MixZoneGeometry, p: LinkParams) -> Vec<CandidateSet> {
    let snap = |pose: Pose| g.snap(pose).ok();
    let mut exits: BTreeMap<VehicleLength, Vec<(f64, &Track, Option<Snap>)>> = BTreeMap::new();
    for t in inst.pool.iter().filter(|t| exit_direction_consistent(t.exit_pose(), zone)) {
        exits.entry(t.length).or_default().push((t.first.time, t, snap(t.exit_pose())));
    }
    for v in exits.values_mut() {
        v.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.pseudonym.cmp(&b.1.pseudonym)));
    }
    let (lo, hi) = p.bounds;
    inst.entering
        .iter()
        .map(|b| {
            let from = snap(b.entry_pose());
            let mut candidates: Vec<CredentialId> = match (exits.get(&b.length), from) {
                (Some(list), Some(from)) => {
                    let t0 = b.last.time;
                    let start = list.partition_point(|x| x.0 < t0 + lo - 1e-9);
                    list[start..]
                        .iter()
                        .take_while(|x| x.0 <= t0 + hi + 1e-9)
                        .filter(|(_, x, _)| x.pseudonym != b.pseudonym && !seen_together(b, x, p.gamma_v_s))
                        .filter(|(_, _, to)| to.is_some_and(|to| edge_path_exists(g, from, to, zone)))
                        .map(|(_, x, _)| x.pseudonym)
                        .collect()
                }
                _ => Vec::new(),
            };
            candidates.sort();
            candidates.dedup();
            CandidateSet {
                entering: b.pseudonym,
                at: b.last.time,
                candidates,
            }
        })
        .collect()
}

/// Direct transcription of the conditions, pair by pair, for testing.
pub fn brute_force_oracle(inst: &Instance, g: &RoadGraph, zone: &MixZoneGeometry, p: LinkParams) -> Vec<CandidateSet> {
    let mut out = Vec::new();
    for b in &inst.entering {
        let mut candidates = Vec::new();
        for x in &inst.pool {
            if x.pseudonym == b.pseudonym {
                continue;
            }
            let same_length = x.length == b.length;
            let dt = x.first.time - b.last.time;
            let in_window = dt >= p.bounds.0 - 1e-9 && dt <= p.bounds.1 + 1e-9;
            let apart = x.span.0 > b.span.1 + p.gamma_v_s || b.span.0 > x.span.1 + p.gamma_v_s;
            let reachable = path_exists(g, b.entry_pose(), x.exit_pose(), zone).unwrap_or(false);
            let direction = exit_direction_consistent(x.exit_pose(), zone);
            if same_length && in_window && apart && reachable && direction {
                candidates.push(x.pseudonym);
            }
        }
        candidates.sort();
        candidates.dedup();
        out.push(CandidateSet {
            entering: b.pseudonym,
            at: b.last.time,
            candidates,
        });
    }
    out
}

/// The attack over every zone.
pub fn attack(tracks: &[Track], g: &RoadGraph, zones: &[MixZoneGeometry], bounds: &[(f64, f64)], gamma_v_s: f64) -> Vec<ZoneLinks> {
    zones
        .iter()
        .zip(bounds)
        .enumerate()
        .map(|(z, (geo, &bounds))| ZoneLinks {
            zone: z as u32,
            sets: link(&zone_instance(tracks, geo), g, geo, LinkParams { bounds, gamma_v_s }),
        })
        .collect()
}

/// Resolves each candidate set to one successor, uniformly at random when
/// there is more than one.
pub fn chain(links: &[ZoneLinks], seed: u64) -> BTreeMap<CredentialId, CredentialId> {
    let mut out = BTreeMap::new();
    for zl in links {
        for s in &zl.sets {
            let mut rng = keyed_rng(seed, Purpose::Chain, &[zl.zone as u64, fold(s.entering.as_u128()), s.at.to_bits()]);
            if let Some(c) = s.candidates.choose(&mut rng) {
                out.insert(s.entering, *c);
            }
        }
    }
    out
}

/// Zones run by honest-but-curious RSUs: a keyed shuffle, then the first
/// `round(fraction · n)`.
pub fn hbc_zones(n_zones: usize, fraction: f64, seed: u64) -> BTreeSet<u32> {
    let mut ids: Vec<u32> = (0..n_zones as u32).collect();
    rand::seq::SliceRandom::shuffle(ids.as_mut_slice(), &mut keyed_rng(seed, Purpose::HbcZones, &[]));
    let k = (fraction * n_zones as f64).round() as usize;
    ids.into_iter().take(k).collect()
}

/// Follows a pseudonym through a change inside the zone by matching where
/// it disappears to where a new pseudonym appears next.
pub fn continuity_match(internal: &[InternalBeacon], entering: CredentialId, gamma_v_s: f64) -> Option<CredentialId> {
    let mut first: BTreeMap<CredentialId, &InternalBeacon> = BTreeMap::new();
    let mut last: Option<&InternalBeacon> = None;
    for b in internal {
        first
            .entry(b.pseudonym)
            .and_modify(|f| {
                if b.time < f.time {
                    *f = b
                }
            })
            .or_insert(b);
        if b.pseudonym == entering && last.is_none_or(|l| b.time > l.time) {
            last = Some(b);
        }
    }
    let l = last?;
    first
        .values()
        .filter(|f| f.pseudonym != entering && f.time > l.time && f.time - l.time <= 1.5 * gamma_v_s + 1e-9)
        .map(|f| {
            let dt = f.time - l.time;
            let predicted = l.pos + crate::model::Point::from_heading(l.heading) * (l.speed * dt);
            (f.pos.dist(predicted), f.pseudonym)
        })
        .filter(|(d, _)| *d <= 5.0 + l.speed * gamma_v_s)
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
        .map(|(_, id)| id)
}

/// What a curious RSU learns for its own zone: the true successor from its
/// decrypted view, with every pseudonym it saw inside and all of its own
/// chaff struck off. Chaff from other zones stays.
pub fn hbc_rsu_link(
    sets: &[CandidateSet],
    internal: &[InternalBeacon],
    own_chaff: &BTreeSet<CredentialId>,
    gamma_v_s: f64,
) -> Vec<CandidateSet> {
    let seen: BTreeSet<CredentialId> = internal.iter().map(|b| b.pseudonym).collect();
    sets.iter()
        .map(|s| {
            let truth = continuity_match(internal, s.entering, gamma_v_s);
            let mut candidates: Vec<CredentialId> = s
                .candidates
                .iter()
                .copied()
                .filter(|c| !own_chaff.contains(c) && (truth.is_none() || !seen.contains(c)))
                .collect();
            if let Some(t) = truth {
                candidates.push(t);
            }
            candidates.sort();
            candidates.dedup();
            CandidateSet {
                entering: s.entering,
                at: s.at,
                candidates,
            }
        })
        .collect()
}
