//! RSU-side mix-zone controller.
//!
//! The controller advertises its zone, answers join requests with the zone
//! session key, its chaff filter and, for relays, a chaff credential plus the
//! length of a peer member to imitate. It also plans the phantom trajectories
//! decoys follow and emits its own chaff when the zone is nearly empty.
//!
//! Pairing is strict consecutive: the first of two joiners waits, the second
//! takes the first one's length and the first is updated with the second's.
//! A joiner left alone imitates itself.

use std::collections::{BTreeMap, VecDeque};

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    encrypt, sign, verify, Credential, CredentialId, EncryptedEnvelope, KeyId, Point, SignedEnvelope, VehicleLength,
    CREDENTIAL_WIRE_SIZE, ENCRYPTION_OVERHEAD,
};
use crate::mobility::{Knot, Trajectory};
use crate::rng::{fold, keyed_rng, keyed_uniform, Purpose};
use crate::road::{MixZoneGeometry, RoadGraph};

/// `x: f32, y: f32, radius: f64, timestamp: f64`.
pub const ADVERT_PAYLOAD: u32 = 24;
/// `length: f64, timestamp: f64`.
pub const JOIN_PAYLOAD: u32 = 16;
pub const SESSION_KEY_BYTES: u32 = 32;
pub const JOIN_TOLERANCE_S: f64 = 5.0;
/// Relay decoys keep at most this many recent exit speeds per edge.
const EXIT_HISTORY: usize = 10;
/// Upper bound on a phantom route.
const MAX_DECOY_ROUTE_M: f64 = 5000.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum JoinError {
    #[error("join request signature does not verify")]
    AuthFailure,
    #[error("join request timestamp {sent} is more than {JOIN_TOLERANCE_S} s from {now}")]
    StaleRequest { sent: f64, now: f64 },
    #[error("requester is outside RSU range")]
    OutOfRange,
    #[error("malformed join request")]
    Malformed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoySource {
    Relay,
    Rsu,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZoneParams {
    pub relay_fraction: f64,
    pub sparse_threshold: usize,
    pub advert_interval_s: f64,
    pub rsu_range_m: f64,
    pub beacon_interval_s: f64,
    pub seed: u64,
}

/// Advertisement content.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Advert {
    pub center: Point,
    pub radius: f64,
    pub timestamp: f64,
}

impl Advert {
    pub fn encode(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(ADVERT_PAYLOAD as usize);
        b.extend((self.center.x as f32).to_le_bytes());
        b.extend((self.center.y as f32).to_le_bytes());
        b.extend(self.radius.to_le_bytes());
        b.extend(self.timestamp.to_le_bytes());
        b
    }

    pub fn decode(b: &[u8]) -> Option<Advert> {
        if b.len() != ADVERT_PAYLOAD as usize {
            return None;
        }
        let f32_at = |i: usize| f32::from_le_bytes(b[i..i + 4].try_into().unwrap()) as f64;
        let f64_at = |i: usize| f64::from_le_bytes(b[i..i + 8].try_into().unwrap());
        Some(Advert {
            center: Point::new(f32_at(0), f32_at(4)),
            radius: f64_at(8),
            timestamp: f64_at(16),
        })
    }
}

pub fn join_request(length: VehicleLength, pseudonym: &Credential, now: f64) -> Result<SignedEnvelope, crate::model::CryptoError> {
    let mut payload = length.meters().to_le_bytes().to_vec();
    payload.extend(now.to_le_bytes());
    sign(&payload, pseudonym, now)
}

/// What the requester finds inside its encrypted response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JoinResponse {
    pub session_key: u64,
    pub chaff: Option<CredentialId>,
    pub peer_length: Option<VehicleLength>,
    pub filter_epoch: u16,
    pub timestamp: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JoinOutcome {
    pub envelope: EncryptedEnvelope,
    pub response: JoinResponse,
    pub wire_size: u32,
    pub relay: bool,
    pub chaff: Option<Credential>,
    /// Selected as relay but the pool was empty.
    pub pool_empty: bool,
    /// Earlier joiner whose peer length changed to this requester's.
    pub peer_update: Option<(CredentialId, VehicleLength)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Member {
    pub pseudonym: CredentialId,
    pub length: VehicleLength,
    pub joined_at: f64,
    pub entry: Option<usize>,
    /// Member whose length this one's decoy imitates.
    pub peer: CredentialId,
    pub rsu_chaff: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub chaff: CredentialId,
    pub requester: CredentialId,
    pub peer: CredentialId,
    pub peer_length: VehicleLength,
    pub time: f64,
}

/// Ask the controller to plan a phantom trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoyRequest {
    pub source: DecoySource,
    pub chaff: CredentialId,
    /// Member whose entry and length the decoy imitates.
    pub covered: CredentialId,
    pub length: VehicleLength,
    /// Key for the random stream (requester pseudonym).
    pub key: CredentialId,
    pub own_exit: Option<usize>,
    pub virtual_entry: f64,
    pub now: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoyPlan {
    pub source: DecoySource,
    pub zone: u32,
    pub chaff: CredentialId,
    pub covered: CredentialId,
    pub length: VehicleLength,
    pub exit: usize,
    pub exit_time: f64,
    pub speed: f64,
    pub dwell: f64,
    pub trajectory: Trajectory,
    /// Only one exit was available.
    pub degenerate: bool,
}

/// An RSU chaff stream the controller wants started.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseOrder {
    pub member: CredentialId,
    pub chaff: Option<Credential>,
}

#[derive(Debug, Clone)]
pub struct MixZoneController {
    pub zone: u32,
    pub geometry: MixZoneGeometry,
    pub bounds: (f64, f64),
    pub cert: Credential,
    pub params: ZoneParams,
    session_key: u64,
    pool: VecDeque<Credential>,
    assignments: BTreeMap<CredentialId, Assignment>,
    members: BTreeMap<CredentialId, Member>,
    past: BTreeMap<CredentialId, Member>,
    pending: Option<CredentialId>,
    last_advert: Option<f64>,
    exit_speeds: BTreeMap<usize, VecDeque<f64>>,
    dwells: Vec<f64>,
    filter_epoch: u16,
}

impl MixZoneController {
    pub fn new(zone: u32, geometry: MixZoneGeometry, bounds: (f64, f64), cert: Credential, params: ZoneParams) -> Self {
        let session_key = keyed_rng(params.seed, Purpose::SessionKey, &[zone as u64]).random();
        MixZoneController {
            zone,
            geometry,
            bounds,
            cert,
            params,
            session_key,
            pool: VecDeque::new(),
            assignments: BTreeMap::new(),
            members: BTreeMap::new(),
            past: BTreeMap::new(),
            pending: None,
            last_advert: None,
            exit_speeds: BTreeMap::new(),
            dwells: Vec::new(),
            filter_epoch: 0,
        }
    }

    pub fn session_key(&self) -> KeyId {
        KeyId::Symmetric(self.session_key)
    }

    pub fn members(&self) -> impl Iterator<Item = &Member> {
        self.members.values()
    }

    /// Current or former member.
    pub fn member(&self, id: CredentialId) -> Option<&Member> {
        self.members.get(&id).or_else(|| self.past.get(&id))
    }

    pub fn is_member(&self, id: CredentialId) -> bool {
        self.members.contains_key(&id)
    }

    pub fn member_count(&self) -> usize {
        self.members.len()
    }

    pub fn assignments(&self) -> &BTreeMap<CredentialId, Assignment> {
        &self.assignments
    }

    pub fn pool_len(&self) -> usize {
        self.pool.len()
    }

    pub fn set_filter_epoch(&mut self, epoch: u16) {
        self.filter_epoch = epoch;
    }

    pub fn stock_chaff(&mut self, chaff: impl IntoIterator<Item = Credential>) {
        self.pool.extend(chaff);
    }

    /// Empties the pool, handing back credentials nobody was given.
    pub fn drain_pool(&mut self) -> Vec<Credential> {
        self.pool.drain(..).collect()
    }

    fn take_chaff(&mut self) -> Option<Credential> {
        self.pool.pop_front()
    }

    pub fn advertise(&mut self, now: f64) -> Option<SignedEnvelope> {
        if let Some(last) = self.last_advert {
            // tolerate float noise on tick multiples
            if now - last < self.params.advert_interval_s - 1e-9 {
                return None;
            }
        }
        self.last_advert = Some(now);
        let advert = Advert {
            center: self.geometry.center,
            radius: self.geometry.radius,
            timestamp: now,
        };
        Some(sign(&advert.encode(), &self.cert, now).expect("RSU certificate is valid"))
    }

    pub fn advert_wire_size(&self) -> u32 {
        ADVERT_PAYLOAD + self.cert.wire_size
    }

    /// Answers a join request. `pos` is the requester's position and
    /// `entry` the entry point it came through, if any.
    pub fn handle_join(
        &mut self,
        request: &SignedEnvelope,
        pseudonym: &Credential,
        pos: Point,
        entry: Option<usize>,
        now: f64,
    ) -> Result<JoinOutcome, JoinError> {
        if !verify(request, pseudonym, now) {
            return Err(JoinError::AuthFailure);
        }
        if request.payload.len() != JOIN_PAYLOAD as usize {
            return Err(JoinError::Malformed);
        }
        let length_m = f64::from_le_bytes(request.payload[0..8].try_into().unwrap());
        let sent = f64::from_le_bytes(request.payload[8..16].try_into().unwrap());
        if (now - sent).abs() > JOIN_TOLERANCE_S {
            return Err(JoinError::StaleRequest { sent, now });
        }
        if pos.dist(self.geometry.center) > self.params.rsu_range_m {
            return Err(JoinError::OutOfRange);
        }
        let length = VehicleLength::from_meters(length_m).map_err(|_| JoinError::Malformed)?;
        let me = pseudonym.id;

        let mut peer = me;
        let mut peer_length = length;
        let mut peer_update = None;
        match self.pending.take() {
            Some(p) if p != me && self.members.contains_key(&p) => {
                let first = self.members.get_mut(&p).unwrap();
                peer = p;
                peer_length = first.length;
                first.peer = me;
                if let Some(a) = self.assignments.values_mut().find(|a| a.requester == p) {
                    a.peer = me;
                    a.peer_length = length;
                }
                peer_update = Some((p, length));
            }
            _ => self.pending = Some(me),
        }

        let relay = keyed_uniform(self.params.seed, Purpose::Relay, &[self.zone as u64, fold(me.as_u128())])
            < self.params.relay_fraction;
        let mut pool_empty = false;
        let chaff = if relay {
            let c = self.take_chaff();
            pool_empty = c.is_none();
            c
        } else {
            None
        };
        if let Some(c) = &chaff {
            self.assignments.insert(
                c.id,
                Assignment {
                    chaff: c.id,
                    requester: me,
                    peer,
                    peer_length,
                    time: now,
                },
            );
        }
        self.members.insert(
            me,
            Member {
                pseudonym: me,
                length,
                joined_at: now,
                entry,
                peer,
                rsu_chaff: false,
            },
        );
        let response = JoinResponse {
            session_key: self.session_key,
            chaff: chaff.as_ref().map(|c| c.id),
            peer_length: chaff.as_ref().map(|_| peer_length),
            filter_epoch: self.filter_epoch,
            timestamp: now,
        };
        let plaintext = serde_json::to_vec(&response).expect("response serializes");
        Ok(JoinOutcome {
            envelope: encrypt(&plaintext, KeyId::Credential(me)),
            wire_size: 0,
            response,
            relay,
            chaff,
            pool_empty,
            peer_update,
        })
    }

    /// Declared response size: key, optional chaff, the filter and envelope
    /// framing.
    pub fn response_wire_size(has_chaff: bool, filter_bytes: u64) -> u32 {
        SESSION_KEY_BYTES + if has_chaff { CREDENTIAL_WIRE_SIZE } else { 0 } + filter_bytes as u32 + ENCRYPTION_OVERHEAD
    }

    /// Member leaves through `exit_edge` at `speed`.
    pub fn leave(&mut self, member: CredentialId, now: f64, exit_edge: Option<usize>, speed: f64) -> Option<Member> {
        let m = self.members.remove(&member)?;
        if self.pending == Some(member) {
            self.pending = None;
        }
        if let Some(e) = exit_edge {
            let h = self.exit_speeds.entry(e).or_default();
            h.push_back(speed);
            if h.len() > EXIT_HISTORY {
                h.pop_front();
            }
            self.dwells.push(now - m.joined_at);
        }
        self.past.insert(member, m.clone());
        Some(m)
    }

    /// RSU chaff for a nearly empty zone: once `1 ≤ members ≤ threshold`,
    /// every member without an RSU stream gets one.
    pub fn sparse_chaff(&mut self) -> Vec<SparseOrder> {
        let n = self.members.len();
        if n == 0 || n > self.params.sparse_threshold {
            return Vec::new();
        }
        let todo: Vec<CredentialId> = self
            .members
            .values()
            .filter(|m| !m.rsu_chaff)
            .map(|m| m.pseudonym)
            .collect();
        todo.into_iter()
            .map(|member| {
                self.members.get_mut(&member).unwrap().rsu_chaff = true;
                SparseOrder {
                    member,
                    chaff: self.take_chaff(),
                }
            })
            .collect()
    }

    fn median_dwell(&self) -> Option<f64> {
        if self.dwells.is_empty() {
            return None;
        }
        let mut d = self.dwells.clone();
        d.sort_by(f64::total_cmp);
        let n = d.len();
        Some(if n % 2 == 1 { d[n / 2] } else { (d[n / 2 - 1] + d[n / 2]) / 2.0 })
    }

    /// Dwell interval a decoy is drawn from. The top stays two beacon
    /// intervals under the maximum so the decoy's first observed beacon
    /// still falls inside the linking window.
    pub fn dwell_range(&self) -> (f64, f64) {
        let (lo, hi) = self.bounds;
        let cap = hi - 2.0 * self.params.beacon_interval_s - 0.2;
        let top = self.median_dwell().map_or(cap, |m| cap.min(2.0 * m));
        (lo, top.max(lo))
    }

    pub fn plan_decoy(&self, g: &RoadGraph, zones: &[MixZoneGeometry], req: &DecoyRequest) -> DecoyPlan {
        let geo = &self.geometry;
        let tag = match req.source {
            DecoySource::Relay => 1,
            DecoySource::Rsu => 2,
        };
        let mut rng = keyed_rng(
            self.params.seed,
            Purpose::DecoyPlan,
            &[self.zone as u64, fold(req.key.as_u128()), fold(req.covered.as_u128()), tag],
        );
        let all: Vec<usize> = (0..geo.exit_points.len()).collect();
        let not_own = |x: &usize| Some(*x) != req.own_exit;
        let entry = self.member(req.covered).and_then(|m| m.entry);
        let reachable: Vec<usize> = match entry {
            Some(e) => geo.exits_from_entry(e),
            None => all.clone(),
        };
        let mut options: Vec<usize> = reachable.into_iter().filter(not_own).collect();
        if options.is_empty() {
            options = all.iter().copied().filter(not_own).collect();
        }
        let degenerate = options.is_empty();
        if degenerate {
            options = all;
        }
        options.sort_unstable();
        let exit = *options.choose(&mut rng).expect("zone has at least one exit");
        let bp = geo.exit_points[exit];
        let limit = g.edges[bp.edge].speed_limit;
        let speed = match self.exit_speeds.get(&bp.edge) {
            Some(h) if !h.is_empty() => h[rng.random_range(0..h.len())],
            _ => limit / 2.0,
        };
        let (lo, hi) = self.dwell_range();
        let dwell = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let exit_time = req.now.max(req.virtual_entry + dwell);
        let trajectory = phantom_route(g, zones, bp.edge, bp.offset, exit_time, speed, req.length, &mut rng);
        DecoyPlan {
            source: req.source,
            zone: self.zone,
            chaff: req.chaff,
            covered: req.covered,
            length: req.length,
            exit,
            exit_time,
            speed,
            dwell,
            trajectory,
            degenerate,
        }
    }
}

/// Phantom path: the exit edge from the boundary on, then random
/// non-U-turn continuations until a dead end, another zone, or the length cap.
fn phantom_route(
    g: &RoadGraph,
    zones: &[MixZoneGeometry],
    first_edge: usize,
    offset: f64,
    start: f64,
    speed: f64,
    length: VehicleLength,
    rng: &mut impl Rng,
) -> Trajectory {
    let mut knots = Vec::new();
    let mut t = start;
    let mut travelled = 0.0;
    let mut edge = first_edge;
    let mut from_s = offset;
    'route: loop {
        let e = &g.edges[edge];
        let v = speed.min(e.speed_limit);
        let mut pts = vec![e.point_at(from_s).0];
        pts.extend(
            e.shape
                .iter()
                .zip(cumulative(&e.shape))
                .filter(|(_, s)| *s > from_s + 1e-9)
                .map(|(p, _)| *p),
        );
        for w in pts.windows(2) {
            let (a, b) = (w[0], w[1]);
            let heading = (b - a).heading();
            knots.push(Knot {
                t,
                pos: a,
                speed: v,
                heading,
                edge: Some(edge),
            });
            let (end, stop) = match first_zone_entry(a, b, zones) {
                Some(f) => (a + (b - a) * f, true),
                None => (b, false),
            };
            let d = a.dist(end);
            t += d / v;
            travelled += d;
            if stop || travelled >= MAX_DECOY_ROUTE_M {
                knots.push(Knot {
                    t,
                    pos: end,
                    speed: v,
                    heading,
                    edge: None,
                });
                break 'route;
            }
        }
        let mut next: Vec<usize> = g
            .out_edges(e.to)
            .iter()
            .copied()
            .filter(|&n| !g.is_u_turn(edge, n))
            .collect();
        next.sort_unstable();
        match next.choose(rng) {
            Some(&n) => {
                edge = n;
                from_s = 0.0;
            }
            None => {
                let last = *e.shape.last().unwrap();
                let heading = knots.last().map_or(0.0, |k: &Knot| k.heading);
                knots.push(Knot {
                    t,
                    pos: last,
                    speed: v,
                    heading,
                    edge: None,
                });
                break;
            }
        }
    }
    Trajectory {
        vehicle: u32::MAX,
        length,
        knots,
    }
}

fn cumulative(shape: &[Point]) -> Vec<f64> {
    let mut out = vec![0.0];
    for w in shape.windows(2) {
        out.push(out.last().unwrap() + w[0].dist(w[1]));
    }
    out
}

/// Fraction along `a → b` where the segment first enters any zone.
fn first_zone_entry(a: Point, b: Point, zones: &[MixZoneGeometry]) -> Option<f64> {
    let d = b - a;
    let qa = d.dot(d);
    if qa == 0.0 {
        return None;
    }
    zones
        .iter()
        .filter_map(|z| {
            let f = a - z.center;
            let qb = 2.0 * f.dot(d);
            let qc = f.dot(f) - z.radius * z.radius;
            let disc = qb * qb - 4.0 * qa * qc;
            if disc <= 0.0 {
                return None;
            }
            let t = (-qb - disc.sqrt()) / (2.0 * qa);
            (t > 1e-9 && t <= 1.0).then_some(t)
        })
        .min_by(f64::total_cmp)
}
