//! Discrete-time simulation on a 0.1 s tick.
//!
//! Within a tick the order is fixed: epoch rollover, adverts and filter
//! chunks, vehicles by id (zone entry, pseudonym change, zone exit, beacon),
//! decoy streams by start order, sparse chaff, peer filter exchange, then
//! beacon reception. Together with keyed random streams this makes a run a
//! pure function of its scenario.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::filter::{ChaffFilter, FilterSizing};
use crate::model::{
    sign, ticks_to_secs, verify, Credential, CredentialId, Entity, Point, VehicleLength, CAM_WIRE_SIZE,
    CREDENTIAL_WIRE_SIZE, ENCRYPTION_OVERHEAD, TICKS_PER_SECOND,
};
use crate::mixzone::{join_request, DecoyPlan, DecoyRequest, DecoySource, MixZoneController, ZoneParams, JOIN_PAYLOAD};
use crate::mobility::{State, Trajectory};
use crate::rng::{fold, keyed_rng, keyed_uniform, Purpose};
use crate::road::traverse_time_bounds;
use crate::scenario::{ConfigError, Scenario};
use crate::vpki::{Ltca, Pca, SignedFilter};

const HOUR_TICKS: u64 = 3600 * TICKS_PER_SECOND;
/// Retirement request payload: the chaff id.
pub const RETIRE_PAYLOAD: u32 = 16;
/// Peer filter query payload: requester epochs.
pub const PEER_QUERY_PAYLOAD: u32 = 16;

/// What an eavesdropper records for one overheard beacon.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub time: f64,
    pub pseudonym: CredentialId,
    pub pos: Point,
    pub speed: f64,
    pub heading: f64,
    pub length: VehicleLength,
    pub eavesdropper: u32,
}

/// Rounds to `1/scale`. Dividing the rounded integer keeps the result equal
/// to what parsing the printed decimal gives back.
fn q(v: f64, scale: f64) -> f64 {
    let r = (v * scale).round() / scale;
    // normalize -0.0
    if r == 0.0 {
        0.0
    } else {
        r
    }
}

impl Observation {
    /// Rounds to the precision the CSV export keeps, so that in-memory and
    /// file-based attacks see identical inputs.
    pub fn quantized(mut self) -> Self {
        self.time = q(self.time, 10.0);
        self.pos = Point::new(q(self.pos.x, 1e3), q(self.pos.y, 1e3));
        self.speed = q(self.speed, 1e3);
        self.heading = q(self.heading, 1e6);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PseudonymChange {
    pub vehicle: u32,
    pub zone: u32,
    pub time: f64,
    pub old: CredentialId,
    pub new: CredentialId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoyRecord {
    pub chaff: CredentialId,
    pub zone: u32,
    pub source: DecoySource,
    pub emitter: Entity,
    pub covered: CredentialId,
    pub length: VehicleLength,
    pub exit: usize,
    pub start: f64,
    pub end: f64,
    pub degenerate: bool,
}

/// A member beacon as the zone's RSU sees it after decryption.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InternalBeacon {
    pub zone: u32,
    pub time: f64,
    pub pseudonym: CredentialId,
    pub pos: Point,
    pub speed: f64,
    pub heading: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub changes: Vec<PseudonymChange>,
    pub decoys: Vec<DecoyRecord>,
    pub owner: BTreeMap<CredentialId, u32>,
    pub non_coop: BTreeSet<u32>,
    pub internal: Vec<InternalBeacon>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventKind {
    Beacon {
        pseudonym: CredentialId,
        link_id: u64,
        x: f64,
        y: f64,
        speed: f64,
        heading: f64,
        length_m: f64,
        chaff: bool,
        encrypted: bool,
        bytes: u32,
    },
    Advert {
        zone: u32,
        bytes: u32,
    },
    FilterChunk {
        zone: u32,
        index: u64,
        of: u64,
        bytes: u32,
    },
    JoinRequest {
        zone: u32,
        pseudonym: CredentialId,
        bytes: u32,
    },
    JoinRejected {
        zone: u32,
        pseudonym: CredentialId,
        reason: String,
    },
    JoinResponse {
        zone: u32,
        vehicle: u32,
        pseudonym: CredentialId,
        relay: bool,
        chaff: Option<CredentialId>,
        peer_length_m: Option<f64>,
        bytes: u32,
    },
    PeerUpdate {
        zone: u32,
        pseudonym: CredentialId,
        peer_length_m: f64,
        bytes: u32,
    },
    ChaffPoolEmpty {
        zone: u32,
        requester: Option<CredentialId>,
    },
    ZoneLeave {
        zone: u32,
        pseudonym: CredentialId,
    },
    PseudonymChange {
        zone: u32,
        old: CredentialId,
        new: CredentialId,
    },
    DecoyStart {
        zone: u32,
        source: DecoySource,
        chaff: CredentialId,
        covered: CredentialId,
        length_m: f64,
        exit: usize,
        exit_time: f64,
        degenerate: bool,
    },
    DecoyEnd {
        chaff: CredentialId,
    },
    ChaffRetired {
        zone: u32,
        chaff: CredentialId,
        bytes: u32,
    },
    ChaffProvisioned {
        zone: u32,
        count: usize,
        withdrawn: usize,
        epoch: u16,
    },
    FilterDelivered {
        zone: u32,
        epoch: u16,
        latency_s: f64,
    },
    PeerQuery {
        bytes: u32,
    },
    PeerResponse {
        requester: u32,
        zones: Vec<u32>,
        bytes: u32,
    },
    NoResponder,
    FilterRejected {
        zone: u32,
        from: u32,
    },
    SafetyStats {
        checks: u64,
        verifies: u64,
        discarded: u64,
        pending: u64,
        processed: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub tick: u64,
    pub entity: Entity,
    #[serde(flatten)]
    pub kind: EventKind,
}

impl Event {
    pub fn time(&self) -> f64 {
        ticks_to_secs(self.tick)
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub events: Vec<Event>,
    pub observations: Vec<Observation>,
    pub truth: GroundTruth,
    pub duration_s: f64,
}

/// Chunked filter broadcast on a fixed cycle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dissemination {
    pub chunk_bytes: u64,
    pub n_chunks: u64,
    pub interval_ticks: u64,
}

impl Dissemination {
    pub fn new(filter_bytes: u64, bandwidth_kib_per_s: f64, interval_s: f64) -> Self {
        let chunk_bytes = ((bandwidth_kib_per_s * 1024.0 * interval_s).floor() as u64).max(1);
        Dissemination {
            chunk_bytes,
            n_chunks: filter_bytes.div_ceil(chunk_bytes).max(1),
            interval_ticks: crate::model::secs_to_ticks(interval_s).max(1),
        }
    }

    pub fn cycle_ticks(&self) -> u64 {
        self.n_chunks * self.interval_ticks
    }

    /// Ticks from arrival until a full copy is held. Arrivals mid-cycle
    /// wait for the next cycle start.
    pub fn latency_ticks(&self, arrival: u64) -> u64 {
        let c = self.cycle_ticks();
        (c - arrival % c) % c + c
    }

    /// The same quantity by stepping through the broadcast schedule.
    pub fn simulate_latency(&self, arrival: u64) -> u64 {
        let (c, i) = (self.cycle_ticks(), self.interval_ticks);
        let mut start = None;
        let mut got = 0;
        for t in arrival.. {
            if start.is_none() && t % c == 0 {
                start = Some(t);
            }
            if let Some(s) = start {
                if t > s && (t - s) % i == 0 {
                    got += 1;
                    if got == self.n_chunks {
                        return t - arrival;
                    }
                }
            }
        }
        unreachable!()
    }
}

/// Outcome of checking one received beacon against held filters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SafetyDecision {
    DiscardChaff,
    UnknownPending,
    Process,
}

/// Drops beacons signed under known chaff. Until a filter is held for
/// every zone a beacon that matches none of them is held back, since it
/// could be chaff from an unseen zone.
pub fn safety_filtering(id: CredentialId, held: &[&ChaffFilter], zone_count: usize) -> SafetyDecision {
    if held.iter().any(|f| f.contains(id)) {
        SafetyDecision::DiscardChaff
    } else if held.len() < zone_count {
        SafetyDecision::UnknownPending
    } else {
        SafetyDecision::Process
    }
}

/// A published filter plus its decoded form.
#[derive(Debug)]
pub struct FilterCopy {
    pub signed: SignedFilter,
    pub filter: ChaffFilter,
}

/// Peer exchange: the lowest-id neighbour holding a newer copy of a filter
/// the requester wants answers. Returns the responder and the zones it
/// supplies.
pub fn peer_responder(
    wanted: &BTreeMap<u32, Option<u16>>,
    neighbours: &[(u32, BTreeMap<u32, u16>)],
) -> Option<(u32, Vec<u32>)> {
    neighbours
        .iter()
        .filter_map(|(id, held)| {
            let zones: Vec<u32> = wanted
                .iter()
                .filter(|(z, mine)| held.get(z).is_some_and(|e| mine.is_none_or(|m| newer(*e, m))))
                .map(|(z, _)| *z)
                .collect();
            (!zones.is_empty()).then_some((*id, zones))
        })
        .min_by_key(|(id, _)| *id)
}

fn newer(a: u16, b: u16) -> bool {
    a != b && a.wrapping_sub(b) < u16::MAX / 2
}

/// Accepts a filter relayed by a peer only if the PCA signature holds.
pub fn accept_peer_filter(copy: &SignedFilter, pca: &Credential, now: f64) -> Option<ChaffFilter> {
    crate::vpki::verify_filter(copy, pca, now)
}

#[derive(Debug, Clone, Copy)]
struct Passage {
    zone: u32,
    enter: u64,
    /// First tick outside, if the trip leaves.
    leave: Option<u64>,
    change: Option<u64>,
}

#[derive(Debug, Default, Clone, Copy)]
struct Stats {
    checks: u64,
    verifies: u64,
    discarded: u64,
    pending: u64,
    processed: u64,
}

struct Membership {
    zone: u32,
    pseudonym: CredentialId,
    chaff: Option<Credential>,
}

struct Vehicle {
    id: u32,
    traj: usize,
    non_coop: bool,
    start: u64,
    end: u64,
    pseudonyms: Vec<Credential>,
    links: Vec<u64>,
    current: usize,
    passages: Vec<Passage>,
    next_passage: usize,
    membership: Option<Membership>,
    relay_stream: Option<usize>,
    filters: BTreeMap<u32, Arc<FilterCopy>>,
    /// Zone → (completion tick, listening since).
    deliveries: BTreeMap<u32, (u64, u64)>,
    in_range: BTreeSet<u32>,
    stats: Stats,
    state: Option<State>,
    inside: Option<u32>,
}

struct Stream {
    plan: DecoyPlan,
    chaff: Credential,
    emitter: Entity,
    link: u64,
    start: u64,
    done: bool,
}

struct Emitted {
    from: Entity,
    pseudonym: CredentialId,
    pos: Point,
    zone: Option<u32>,
}

struct World<'a> {
    sc: &'a Scenario,
    seed: u64,
    pca: Pca,
    controllers: Vec<MixZoneController>,
    current: Vec<Arc<FilterCopy>>,
    filter_bytes: u64,
    dissemination: Dissemination,
    vehicles: Vec<Vehicle>,
    streams: Vec<Stream>,
    events: Vec<Event>,
    observations: Vec<Observation>,
    truth: GroundTruth,
    eavesdroppers: Vec<(Point, f64)>,
}

/// Runs a scenario to completion.
pub fn run(sc: &Scenario) -> Result<RunOutput, ConfigError> {
    let cfg = &sc.config;
    let seed = cfg.rng_seed;
    let mut ltca = Ltca::default();
    let mut pca = Pca::new(seed, cfg.filter_capacity, cfg.filter_fpr);
    let mut controllers = Vec::new();
    for (z, geo) in sc.zones.iter().enumerate() {
        let z = z as u32;
        pca.register_rsu(z);
        let cert = ltca.certify_rsu(z);
        let bounds = traverse_time_bounds(geo, &sc.graph, cfg.v_min_mps)?;
        let params = ZoneParams {
            relay_fraction: cfg.relay_fraction,
            sparse_threshold: if cfg.relay_fraction > 0.0 { cfg.sparse_threshold } else { 0 },
            advert_interval_s: cfg.gamma_mz_s,
            rsu_range_m: cfg.rsu_range_m,
            beacon_interval_s: cfg.gamma_v_s,
            seed,
        };
        controllers.push(MixZoneController::new(z, geo.clone(), bounds, cert, params));
    }
    let filter_bytes = FilterSizing::compute(cfg.filter_capacity as u64, cfg.filter_fpr, cfg.filter_sizing)
        .map_err(|e| ConfigError::Invalid(e.to_string()))?
        .size_bytes;
    let dissemination = Dissemination::new(filter_bytes, cfg.filter_bandwidth_kib_per_s, cfg.filter_tx_interval_s);

    let mut truth = GroundTruth::default();
    let mut order: Vec<usize> = (0..sc.trajectories.len()).collect();
    order.sort_by_key(|&i| sc.trajectories[i].vehicle);
    let mut vehicles = Vec::with_capacity(order.len());
    for i in order {
        let tr = &sc.trajectories[i];
        let id = tr.vehicle;
        ltca.register_vehicle(id);
        let non_coop = keyed_uniform(seed, Purpose::NonCoop, &[id as u64]) < cfg.non_coop_fraction;
        if non_coop {
            truth.non_coop.insert(id);
        }
        let start = (tr.start() * 10.0 - 1e-6).ceil().max(0.0) as u64;
        let end = (tr.end() * 10.0 + 1e-6).floor() as u64;
        let passages = passages(tr, sc, start, end, non_coop);
        let n_changes = passages.iter().filter(|p| p.change.is_some()).count();
        let hour = (start / HOUR_TICKS) as f64 * 3600.0;
        let pseudonyms = pca
            .issue_pseudonyms(&ltca, id, n_changes + 1, (hour, hour + crate::vpki::VALIDITY_S))
            .expect("vehicle registered");
        for p in &pseudonyms {
            truth.owner.insert(p.id, id);
        }
        let links = (0..pseudonyms.len() as u64)
            .map(|k| rand::Rng::random(&mut keyed_rng(seed, Purpose::LinkId, &[id as u64, k])))
            .collect();
        vehicles.push(Vehicle {
            id,
            traj: i,
            non_coop,
            start,
            end,
            pseudonyms,
            links,
            current: 0,
            passages,
            next_passage: 0,
            membership: None,
            relay_stream: None,
            filters: BTreeMap::new(),
            deliveries: BTreeMap::new(),
            in_range: BTreeSet::new(),
            stats: Stats::default(),
            state: None,
            inside: None,
        });
    }

    let mut w = World {
        sc,
        seed,
        pca,
        controllers,
        current: Vec::new(),
        filter_bytes,
        dissemination,
        vehicles,
        streams: Vec::new(),
        events: Vec::new(),
        observations: Vec::new(),
        truth,
        eavesdroppers: cfg.eavesdropper_sites(),
    };
    w.rollover(0);
    let last_vehicle = w.vehicles.iter().map(|v| v.end).max().unwrap_or(0);
    let cap = cfg.duration_s.map(crate::model::secs_to_ticks);
    let mut tick = 0;
    loop {
        if cap.is_some_and(|c| tick > c) {
            break;
        }
        if cap.is_none() && tick > last_vehicle && w.streams.iter().all(|s| s.done) {
            break;
        }
        w.step(tick);
        tick += 1;
    }
    let duration_s = ticks_to_secs(tick);
    for s in 0..w.streams.len() {
        if !w.streams[s].done {
            w.end_stream(s, tick);
        }
    }
    for v in 0..w.vehicles.len() {
        w.flush_stats(v, tick);
    }
    w.events.sort_by_key(|e| (e.tick, e.entity));
    Ok(RunOutput {
        events: w.events,
        observations: w.observations,
        truth: w.truth,
        duration_s,
    })
}

fn passages(tr: &Trajectory, sc: &Scenario, start: u64, end: u64, non_coop: bool) -> Vec<Passage> {
    let mut out: Vec<Passage> = Vec::new();
    let mut open: Option<Passage> = None;
    for t in start..=end {
        let Some(st) = tr.sample(ticks_to_secs(t)) else { continue };
        let zone = sc.zones.iter().position(|z| z.contains(st.pos)).map(|z| z as u32);
        match (&mut open, zone) {
            (Some(p), Some(z)) if p.zone == z => {}
            (Some(p), _) => {
                p.leave = Some(t);
                out.push(*p);
                open = zone.map(|z| Passage {
                    zone: z,
                    enter: t,
                    leave: None,
                    change: None,
                });
            }
            (None, Some(z)) => {
                open = Some(Passage {
                    zone: z,
                    enter: t,
                    leave: None,
                    change: None,
                })
            }
            (None, None) => {}
        }
    }
    out.extend(open);
    for p in &mut out {
        let full = p.enter > start && p.leave.is_some();
        if full && !non_coop {
            p.change = Some((p.enter + p.leave.unwrap()) / 2);
        }
    }
    out
}

impl World<'_> {
    fn push(&mut self, tick: u64, entity: Entity, kind: EventKind) {
        self.events.push(Event { tick, entity, kind });
    }

    fn refresh_filter(&mut self, zone: u32, now: f64) {
        let signed = self.pca.publish(zone, now).expect("registered zone");
        let filter = self.pca.filter(zone).expect("registered zone").clone();
        self.controllers[zone as usize].set_filter_epoch(signed.epoch);
        let copy = Arc::new(FilterCopy { signed, filter });
        match self.current.get_mut(zone as usize) {
            Some(c) => *c = copy,
            None => self.current.push(copy),
        }
    }

    /// Hourly chaff batch; unassigned leftovers go back to the PCA.
    fn rollover(&mut self, tick: u64) {
        let now = ticks_to_secs(tick);
        let hour = (tick / HOUR_TICKS) as f64 * 3600.0;
        let count = self.sc.config.chaff_per_zone_per_hour;
        for z in 0..self.controllers.len() {
            let zone = z as u32;
            let old: Vec<CredentialId> = self.controllers[z].drain_pool().iter().map(|c| c.id).collect();
            self.pca.withdraw_chaff(zone, &old).expect("pool chaff is active");
            let fresh = match self.pca.provision_chaff(zone, count, (hour, hour + crate::vpki::VALIDITY_S)) {
                Ok(c) => c,
                Err(_) => Vec::new(),
            };
            let n = fresh.len();
            self.controllers[z].stock_chaff(fresh);
            self.refresh_filter(zone, now);
            let epoch = self.current[z].signed.epoch;
            self.push(
                tick,
                Entity::Rsu(zone),
                EventKind::ChaffProvisioned {
                    zone,
                    count: n,
                    withdrawn: old.len(),
                    epoch,
                },
            );
        }
    }

    fn step(&mut self, tick: u64) {
        let now = ticks_to_secs(tick);
        if tick > 0 && tick % HOUR_TICKS == 0 {
            self.rollover(tick);
        }
        for z in 0..self.controllers.len() {
            let zone = z as u32;
            if self.controllers[z].advertise(now).is_some() {
                let bytes = self.controllers[z].advert_wire_size();
                self.push(tick, Entity::Rsu(zone), EventKind::Advert { zone, bytes });
            }
            let d = self.dissemination;
            if tick % d.interval_ticks == 0 {
                let index = (tick / d.interval_ticks) % d.n_chunks;
                let bytes = if index + 1 == d.n_chunks {
                    self.filter_bytes - d.chunk_bytes * (d.n_chunks - 1)
                } else {
                    d.chunk_bytes
                } as u32;
                self.push(
                    tick,
                    Entity::Rsu(zone),
                    EventKind::FilterChunk {
                        zone,
                        index,
                        of: d.n_chunks,
                        bytes,
                    },
                );
            }
        }

        let mut emitted: Vec<Emitted> = Vec::new();
        let mut joined: BTreeSet<u32> = BTreeSet::new();
        for v in 0..self.vehicles.len() {
            self.vehicle_tick(v, tick, &mut emitted, &mut joined);
        }
        for s in 0..self.streams.len() {
            self.stream_tick(s, tick, &mut emitted);
        }
        for zone in joined {
            self.sparse(zone, tick);
        }
        self.peer_exchange(tick);
        self.receive(tick, &emitted);
        if tick % TICKS_PER_SECOND == TICKS_PER_SECOND - 1 {
            for v in 0..self.vehicles.len() {
                self.flush_stats(v, tick);
            }
        }
    }

    fn vehicle_tick(&mut self, v: usize, tick: u64, emitted: &mut Vec<Emitted>, joined: &mut BTreeSet<u32>) {
        let (start, end) = (self.vehicles[v].start, self.vehicles[v].end);
        if tick < start || tick > end + 1 {
            return;
        }
        let now = ticks_to_secs(tick);
        let id = self.vehicles[v].id;
        let me = Entity::Vehicle(id);
        if tick == end + 1 {
            // trip over
            self.leave_zone(v, tick, None, 0.0);
            if let Some(s) = self.vehicles[v].relay_stream.take() {
                self.end_stream(s, tick);
            }
            self.vehicles[v].state = None;
            self.flush_stats(v, tick);
            return;
        }
        let traj = &self.sc.trajectories[self.vehicles[v].traj];
        let Some(st) = traj.sample(now) else { return };
        self.vehicles[v].state = Some(st);

        // RSU range and filter broadcast reception
        for z in 0..self.controllers.len() {
            let zone = z as u32;
            let inside = st.pos.dist(self.sc.zones[z].center) <= self.sc.config.rsu_range_m;
            let veh = &mut self.vehicles[v];
            if inside && veh.in_range.insert(zone) {
                let due = tick + self.dissemination.latency_ticks(tick);
                veh.deliveries.insert(zone, (due, tick));
            } else if !inside && veh.in_range.remove(&zone) {
                veh.deliveries.remove(&zone);
            }
            if let Some(&(due, since)) = veh.deliveries.get(&zone) {
                if due == tick {
                    veh.deliveries.insert(zone, (tick + self.dissemination.cycle_ticks(), tick));
                    let copy = self.current[z].clone();
                    if veh.filters.get(&zone).is_none_or(|h| h.signed.epoch != copy.signed.epoch) {
                        veh.filters.insert(zone, copy.clone());
                        self.push(
                            tick,
                            me,
                            EventKind::FilterDelivered {
                                zone,
                                epoch: copy.signed.epoch,
                                latency_s: ticks_to_secs(tick - since),
                            },
                        );
                    }
                }
            }
        }

        let zone_now = self.sc.zones.iter().position(|z| z.contains(st.pos)).map(|z| z as u32);
        let was = self.vehicles[v].inside;
        if was != zone_now {
            if was.is_some() {
                self.leave_zone(v, tick, st.edge, st.speed);
            }
            if let Some(z) = zone_now {
                if let Some(s) = self.vehicles[v].relay_stream.take() {
                    self.end_stream(s, tick);
                }
                self.join_zone(v, z, tick, &st);
                joined.insert(z);
            }
            self.vehicles[v].inside = zone_now;
        }

        // pseudonym change
        let veh = &mut self.vehicles[v];
        while veh.next_passage < veh.passages.len() && veh.passages[veh.next_passage].leave.is_some_and(|l| l <= tick) {
            veh.next_passage += 1;
        }
        if let Some(p) = veh.passages.get(veh.next_passage) {
            if p.change == Some(tick) {
                let old = veh.pseudonyms[veh.current].id;
                veh.current += 1;
                let new = veh.pseudonyms[veh.current].id;
                let zone = p.zone;
                self.truth.changes.push(PseudonymChange {
                    vehicle: id,
                    zone,
                    time: now,
                    old,
                    new,
                });
                self.push(tick, me, EventKind::PseudonymChange { zone, old, new });
            }
        }

        let veh = &self.vehicles[v];
        let gv = self.sc.config.gamma_v_ticks();
        if (tick - veh.start) % gv == 0 {
            let cred = &veh.pseudonyms[veh.current];
            let encrypted = zone_now.is_some();
            let length = self.sc.trajectories[veh.traj].length;
            let bytes = CAM_WIRE_SIZE + cred.wire_size + if encrypted { ENCRYPTION_OVERHEAD } else { 0 };
            let (pseudonym, link_id) = (cred.id, veh.links[veh.current]);
            self.push(
                tick,
                me,
                EventKind::Beacon {
                    pseudonym,
                    link_id,
                    x: st.pos.x,
                    y: st.pos.y,
                    speed: st.speed,
                    heading: st.heading,
                    length_m: length.meters(),
                    chaff: false,
                    encrypted,
                    bytes,
                },
            );
            match zone_now {
                Some(zone) => self.truth.internal.push(InternalBeacon {
                    zone,
                    time: now,
                    pseudonym,
                    pos: st.pos,
                    speed: st.speed,
                    heading: st.heading,
                }),
                None => self.capture(now, pseudonym, st.pos, st.speed, st.heading, length),
            }
            emitted.push(Emitted {
                from: me,
                pseudonym,
                pos: st.pos,
                zone: zone_now,
            });
        }
    }

    fn capture(&mut self, now: f64, pseudonym: CredentialId, pos: Point, speed: f64, heading: f64, length: VehicleLength) {
        for (e, &(site, range)) in self.eavesdroppers.iter().enumerate() {
            if pos.dist(site) <= range {
                self.observations.push(
                    Observation {
                        time: now,
                        pseudonym,
                        pos,
                        speed,
                        heading,
                        length,
                        eavesdropper: e as u32,
                    }
                    .quantized(),
                );
            }
        }
    }

    fn join_zone(&mut self, v: usize, zone: u32, tick: u64, st: &State) {
        let now = ticks_to_secs(tick);
        let veh = &self.vehicles[v];
        let veh_id = veh.id;
        let me = Entity::Vehicle(veh_id);
        let cred = veh.pseudonyms[veh.current].clone();
        let length = self.sc.trajectories[veh.traj].length;
        let z = zone as usize;
        let entry = st.edge.and_then(|e| self.sc.zones[z].entry_on_edge(e));
        let request = join_request(length, &cred, now).expect("pseudonym valid during trip");
        self.push(
            tick,
            me,
            EventKind::JoinRequest {
                zone,
                pseudonym: cred.id,
                bytes: JOIN_PAYLOAD + cred.wire_size,
            },
        );
        let out = match self.controllers[z].handle_join(&request, &cred, st.pos, entry, now) {
            Ok(o) => o,
            Err(e) => {
                self.push(
                    tick,
                    Entity::Rsu(zone),
                    EventKind::JoinRejected {
                        zone,
                        pseudonym: cred.id,
                        reason: e.to_string(),
                    },
                );
                return;
            }
        };
        let bytes = MixZoneController::response_wire_size(out.chaff.is_some(), self.filter_bytes);
        self.push(
            tick,
            Entity::Rsu(zone),
            EventKind::JoinResponse {
                zone,
                vehicle: veh_id,
                pseudonym: cred.id,
                relay: out.relay,
                chaff: out.chaff.as_ref().map(|c| c.id),
                peer_length_m: out.response.peer_length.map(|l| l.meters()),
                bytes,
            },
        );
        if out.pool_empty {
            self.push(
                tick,
                Entity::Rsu(zone),
                EventKind::ChaffPoolEmpty {
                    zone,
                    requester: Some(cred.id),
                },
            );
        }
        if let Some((pseudonym, l)) = out.peer_update {
            self.push(
                tick,
                Entity::Rsu(zone),
                EventKind::PeerUpdate {
                    zone,
                    pseudonym,
                    peer_length_m: l.meters(),
                    bytes: 8 + ENCRYPTION_OVERHEAD,
                },
            );
        }
        let copy = self.current[z].clone();
        let veh = &mut self.vehicles[v];
        veh.filters.insert(zone, copy);
        veh.membership = Some(Membership {
            zone,
            pseudonym: cred.id,
            chaff: out.chaff,
        });
    }

    fn leave_zone(&mut self, v: usize, tick: u64, edge: Option<usize>, speed: f64) {
        let Some(m) = self.vehicles[v].membership.take() else { return };
        let now = ticks_to_secs(tick);
        let z = m.zone as usize;
        let exit_edge = edge.filter(|&e| self.sc.zones[z].exit_on_edge(e).is_some());
        let member = self.controllers[z].leave(m.pseudonym, now, exit_edge, speed);
        self.push(
            tick,
            Entity::Vehicle(self.vehicles[v].id),
            EventKind::ZoneLeave {
                zone: m.zone,
                pseudonym: m.pseudonym,
            },
        );
        let (Some(chaff), Some(member), Some(e)) = (m.chaff, member, exit_edge) else { return };
        if self.vehicles[v].non_coop {
            return;
        }
        let a = self.controllers[z].assignments()[&chaff.id].clone();
        let peer_join = self.controllers[z].member(a.peer).map_or(member.joined_at, |p| p.joined_at);
        let req = DecoyRequest {
            source: DecoySource::Relay,
            chaff: chaff.id,
            covered: a.peer,
            length: a.peer_length,
            key: m.pseudonym,
            own_exit: self.sc.zones[z].exit_on_edge(e),
            virtual_entry: member.joined_at.max(peer_join),
            now,
        };
        let plan = self.controllers[z].plan_decoy(&self.sc.graph, &self.sc.zones, &req);
        let s = self.start_stream(plan, chaff, Entity::Vehicle(self.vehicles[v].id), tick);
        self.vehicles[v].relay_stream = Some(s);
    }

    fn start_stream(&mut self, plan: DecoyPlan, chaff: Credential, emitter: Entity, tick: u64) -> usize {
        let start = (plan.exit_time * 10.0 - 1e-6).ceil() as u64;
        let link = rand::Rng::random(&mut keyed_rng(self.seed, Purpose::LinkId, &[fold(chaff.id.as_u128())]));
        self.push(
            tick,
            emitter,
            EventKind::DecoyStart {
                zone: plan.zone,
                source: plan.source,
                chaff: chaff.id,
                covered: plan.covered,
                length_m: plan.length.meters(),
                exit: plan.exit,
                exit_time: plan.exit_time,
                degenerate: plan.degenerate,
            },
        );
        self.truth.decoys.push(DecoyRecord {
            chaff: chaff.id,
            zone: plan.zone,
            source: plan.source,
            emitter,
            covered: plan.covered,
            length: plan.length,
            exit: plan.exit,
            start: plan.exit_time,
            end: f64::NAN,
            degenerate: plan.degenerate,
        });
        self.streams.push(Stream {
            plan,
            chaff,
            emitter,
            link,
            start,
            done: false,
        });
        self.streams.len() - 1
    }

    fn end_stream(&mut self, s: usize, tick: u64) {
        if self.streams[s].done {
            return;
        }
        self.streams[s].done = true;
        let now = ticks_to_secs(tick);
        let (chaff, emitter, zone) = {
            let st = &self.streams[s];
            (st.chaff.clone(), st.emitter, st.plan.zone)
        };
        if let Some(r) = self.truth.decoys.iter_mut().rev().find(|d| d.chaff == chaff.id) {
            r.end = now;
        }
        self.push(tick, emitter, EventKind::DecoyEnd { chaff: chaff.id });
        let req = sign(&chaff.id.0, &chaff, now);
        if let Ok(req) = req {
            if self.pca.retire_chaff(&req, now).is_ok() {
                self.refresh_filter(zone, now);
                self.push(
                    tick,
                    emitter,
                    EventKind::ChaffRetired {
                        zone,
                        chaff: chaff.id,
                        bytes: RETIRE_PAYLOAD + CREDENTIAL_WIRE_SIZE,
                    },
                );
            }
        }
    }

    fn stream_tick(&mut self, s: usize, tick: u64, emitted: &mut Vec<Emitted>) {
        let st = &self.streams[s];
        if st.done || tick < st.start {
            return;
        }
        let now = ticks_to_secs(tick);
        let zone = st.plan.zone as usize;
        let state = st.plan.trajectory.sample(now);
        let out_of_range = matches!(st.emitter, Entity::Rsu(_))
            && state.is_some_and(|x| x.pos.dist(self.sc.zones[zone].center) > self.sc.config.rsu_range_m);
        let Some(x) = state.filter(|_| !out_of_range) else {
            self.end_stream(s, tick);
            return;
        };
        if !st.chaff.is_valid_at(now) {
            self.end_stream(s, tick);
            return;
        }
        if (tick - st.start) % self.sc.config.gamma_v_ticks() != 0 || self.sc.zones.iter().any(|z| z.contains(x.pos)) {
            return;
        }
        let (pseudonym, link_id, emitter, length) = (st.chaff.id, st.link, st.emitter, st.plan.length);
        self.push(
            tick,
            emitter,
            EventKind::Beacon {
                pseudonym,
                link_id,
                x: x.pos.x,
                y: x.pos.y,
                speed: x.speed,
                heading: x.heading,
                length_m: length.meters(),
                chaff: true,
                encrypted: false,
                bytes: CAM_WIRE_SIZE + CREDENTIAL_WIRE_SIZE,
            },
        );
        self.capture(now, pseudonym, x.pos, x.speed, x.heading, length);
        emitted.push(Emitted {
            from: emitter,
            pseudonym,
            pos: x.pos,
            zone: None,
        });
    }

    fn sparse(&mut self, zone: u32, tick: u64) {
        let now = ticks_to_secs(tick);
        let z = zone as usize;
        for order in self.controllers[z].sparse_chaff() {
            let Some(chaff) = order.chaff else {
                self.push(tick, Entity::Rsu(zone), EventKind::ChaffPoolEmpty { zone, requester: None });
                continue;
            };
            let m = self.controllers[z].member(order.member).expect("current member").clone();
            let req = DecoyRequest {
                source: DecoySource::Rsu,
                chaff: chaff.id,
                covered: m.pseudonym,
                length: m.length,
                key: m.pseudonym,
                own_exit: None,
                virtual_entry: m.joined_at,
                now,
            };
            let plan = self.controllers[z].plan_decoy(&self.sc.graph, &self.sc.zones, &req);
            self.start_stream(plan, chaff, Entity::Rsu(zone), tick);
        }
    }

    /// Vehicles outside every RSU range that lack a zone filter ask
    /// neighbours once per beacon interval.
    fn peer_exchange(&mut self, tick: u64) {
        let now = ticks_to_secs(tick);
        let gv = self.sc.config.gamma_v_ticks();
        let n_zones = self.controllers.len() as u32;
        let range = self.sc.config.vehicle_range_m;
        let pca_cred = self.pca.credential().clone();
        for v in 0..self.vehicles.len() {
            let veh = &self.vehicles[v];
            let Some(st) = veh.state else { continue };
            if !veh.in_range.is_empty() || (tick - veh.start) % gv != 0 || veh.filters.len() as u32 == n_zones {
                continue;
            }
            let wanted: BTreeMap<u32, Option<u16>> =
                (0..n_zones).map(|z| (z, veh.filters.get(&z).map(|f| f.signed.epoch))).collect();
            let neighbours: Vec<(u32, BTreeMap<u32, u16>)> = self
                .vehicles
                .iter()
                .filter(|o| o.id != veh.id && o.state.is_some_and(|s| s.pos.dist(st.pos) <= range))
                .map(|o| (o.id, o.filters.iter().map(|(z, f)| (*z, f.signed.epoch)).collect()))
                .collect();
            let me = Entity::Vehicle(veh.id);
            let requester = veh.id;
            self.push(
                tick,
                me,
                EventKind::PeerQuery {
                    bytes: PEER_QUERY_PAYLOAD + CREDENTIAL_WIRE_SIZE,
                },
            );
            let Some((responder, zones)) = peer_responder(&wanted, &neighbours) else {
                self.push(tick, me, EventKind::NoResponder);
                continue;
            };
            let r = self.vehicles.iter().position(|o| o.id == responder).unwrap();
            let copies: Vec<(u32, Arc<FilterCopy>)> = zones.iter().map(|z| (*z, self.vehicles[r].filters[z].clone())).collect();
            let bytes = copies.len() as u32 * (self.filter_bytes as u32 + ENCRYPTION_OVERHEAD);
            self.push(
                tick,
                Entity::Vehicle(responder),
                EventKind::PeerResponse {
                    requester,
                    zones: zones.clone(),
                    bytes,
                },
            );
            for (zone, copy) in copies {
                if verify(&copy.signed.envelope, &pca_cred, now) {
                    self.vehicles[v].filters.insert(zone, copy);
                } else {
                    self.push(tick, me, EventKind::FilterRejected { zone, from: responder });
                }
            }
        }
    }

    fn receive(&mut self, _tick: u64, emitted: &[Emitted]) {
        let range = self.sc.config.vehicle_range_m;
        let n_zones = self.controllers.len();
        for v in 0..self.vehicles.len() {
            let veh = &self.vehicles[v];
            let Some(st) = veh.state else { continue };
            let my_zone = veh.membership.as_ref().map(|m| m.zone);
            let held: Vec<&ChaffFilter> = veh.filters.values().map(|c| &c.filter).collect();
            let mut stats = veh.stats;
            for b in emitted {
                if b.from == Entity::Vehicle(veh.id) || b.pos.dist(st.pos) > range {
                    continue;
                }
                if b.zone.is_some() && b.zone != my_zone {
                    continue;
                }
                stats.checks += held.len() as u64;
                match safety_filtering(b.pseudonym, &held, n_zones) {
                    SafetyDecision::DiscardChaff => stats.discarded += 1,
                    SafetyDecision::UnknownPending => stats.pending += 1,
                    SafetyDecision::Process => {
                        stats.processed += 1;
                        stats.verifies += 1;
                    }
                }
            }
            self.vehicles[v].stats = stats;
        }
    }

    fn flush_stats(&mut self, v: usize, tick: u64) {
        let s = std::mem::take(&mut self.vehicles[v].stats);
        if s.checks + s.discarded + s.pending + s.processed == 0 {
            return;
        }
        let id = self.vehicles[v].id;
        self.push(
            tick,
            Entity::Vehicle(id),
            EventKind::SafetyStats {
                checks: s.checks,
                verifies: s.verifies,
                discarded: s.discarded,
                pending: s.pending,
                processed: s.processed,
            },
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CredentialKind, Holder};
    use crate::road::URBAN_SPEED_LIMIT_MPS;
    use crate::scenario::{GraphSource, MobilitySource, ScenarioConfig, TripSpec};
    use proptest::prelude::*;
    use std::path::Path;

    fn trip(vehicle: u32, departure_s: f64, junctions: &[&str], length_m: f64) -> TripSpec {
        TripSpec {
            vehicle,
            departure_s,
            junctions: junctions.iter().map(|s| s.to_string()).collect(),
            speed_mps: 10.0,
            length_m,
        }
    }

    fn scenario(trips: Vec<TripSpec>, relay: f64, threshold: usize) -> Scenario {
        let mut c = ScenarioConfig::new(
            GraphSource::Grid {
                rows: 3,
                cols: 3,
                spacing_m: 500.0,
                speed_limit_mps: URBAN_SPEED_LIMIT_MPS,
            },
            MobilitySource::Trips(trips),
            vec![Point::new(500.0, 500.0)],
        );
        c.relay_fraction = relay;
        c.sparse_threshold = threshold;
        Scenario::build(c, Path::new(".")).unwrap()
    }

    const WEST_EAST: [&str; 3] = ["j1_0", "j1_1", "j1_2"];

    #[test]
    fn dissemination_examples() {
        let one = Dissemination::new(14_977, 50.0, 1.0);
        assert_eq!((one.n_chunks, one.latency_ticks(0)), (1, 10));
        let three = Dissemination::new(149_770, 50.0, 1.0);
        assert_eq!(three.n_chunks, 3);
        assert_eq!(three.latency_ticks(0), 30);
        assert_eq!(three.latency_ticks(10), 50);
    }

    proptest! {
        #[test]
        fn latency_closed_form_matches_schedule(bytes in 1u64..400_000, kib in 1u32..100, interval in 1u64..30, arrival in 0u64..2000) {
            let d = Dissemination::new(bytes, kib as f64, interval as f64 / 10.0);
            prop_assert_eq!(d.latency_ticks(arrival), d.simulate_latency(arrival));
            prop_assert!(d.latency_ticks(arrival) >= d.cycle_ticks());
            prop_assert!(d.latency_ticks(arrival) < 2 * d.cycle_ticks());
        }
    }

    #[test]
    fn safety_decisions() {
        let mut f = ChaffFilter::new(10, 1e-6).unwrap();
        f.insert(CredentialId([1; 16])).unwrap();
        let g = ChaffFilter::new(10, 1e-6).unwrap();
        assert_eq!(safety_filtering(CredentialId([1; 16]), &[&f], 2), SafetyDecision::DiscardChaff);
        assert_eq!(safety_filtering(CredentialId([2; 16]), &[&f], 2), SafetyDecision::UnknownPending);
        assert_eq!(safety_filtering(CredentialId([2; 16]), &[&f, &g], 2), SafetyDecision::Process);
    }

    #[test]
    fn lowest_id_neighbour_with_newer_copy_answers() {
        let wanted: BTreeMap<u32, Option<u16>> = [(0, Some(3)), (1, None)].into();
        let n = vec![(7, [(0, 4)].into()), (5, [(0, 3)].into()), (6, [(1, 1)].into())];
        assert_eq!(peer_responder(&wanted, &n), Some((6, vec![1])));
        let stale = vec![(5, [(0, 3)].into())];
        assert_eq!(peer_responder(&wanted, &stale), None);
        assert_eq!(peer_responder(&wanted, &[]), None);
    }

    #[test]
    fn tampered_peer_filter_is_rejected() {
        let mut pca = Pca::new(1, 10, 1e-6);
        pca.register_rsu(0);
        let good = pca.publish(0, 5.0).unwrap();
        assert!(accept_peer_filter(&good, pca.credential(), 5.0).is_some());
        let mut bad = good.clone();
        let last = bad.envelope.payload.len() - 1;
        bad.envelope.payload[last] ^= 1;
        assert!(accept_peer_filter(&bad, pca.credential(), 5.0).is_none());
        let stranger = Credential::new(
            CredentialId([9; 16]),
            CredentialKind::LongTermCert,
            Entity::Pca,
            Holder::Entity(Entity::Pca),
            0.0,
            1e9,
        )
        .unwrap();
        assert!(accept_peer_filter(&good, &stranger, 5.0).is_none());
    }

    #[test]
    fn change_happens_mid_traversal() {
        let sc = scenario(vec![trip(0, 0.0, &WEST_EAST, 4.5)], 0.0, 2);
        let out = run(&sc).unwrap();
        assert_eq!(out.truth.changes.len(), 1);
        // inside from 40 s to 60 s at 10 m/s
        assert!((out.truth.changes[0].time - 50.0).abs() < 0.2);
    }

    #[test]
    fn partial_traversals_keep_their_pseudonym() {
        let sc = scenario(vec![trip(0, 0.0, &["j1_0", "j1_1"], 4.5)], 0.0, 2);
        assert!(run(&sc).unwrap().truth.changes.is_empty());
    }

    #[test]
    fn sparse_streams_follow_occupancy() {
        let north_south = ["j2_1", "j1_1", "j0_1"];
        let east_west = ["j1_2", "j1_1", "j1_0"];
        let cases: [(Vec<TripSpec>, usize); 3] = [
            (vec![trip(0, 0.0, &WEST_EAST, 4.5)], 1),
            (vec![trip(0, 0.0, &WEST_EAST, 4.5), trip(1, 0.0, &north_south, 4.5)], 2),
            (
                vec![trip(0, 0.0, &WEST_EAST, 4.5), trip(1, 0.0, &north_south, 4.5), trip(2, 0.0, &east_west, 4.5)],
                0,
            ),
        ];
        for (trips, expected) in cases {
            let out = run(&scenario(trips, 1.0, 2)).unwrap();
            let rsu = out.truth.decoys.iter().filter(|d| d.source == DecoySource::Rsu).count();
            assert_eq!(rsu, expected);
        }
    }

    #[test]
    fn decoy_lengths_come_from_members() {
        let trips = vec![
            trip(0, 0.0, &WEST_EAST, 4.5),
            trip(1, 1.0, &["j2_1", "j1_1", "j0_1"], 12.0),
        ];
        let out = run(&scenario(trips, 1.0, 0)).unwrap();
        let mut lengths: Vec<f64> = out.truth.decoys.iter().map(|d| d.length.meters()).collect();
        lengths.sort_by(f64::total_cmp);
        assert_eq!(lengths, vec![4.5, 12.0]);
        for d in &out.truth.decoys {
            let owner = out.truth.owner[&d.covered];
            let real = if owner == 0 { 4.5 } else { 12.0 };
            assert_eq!(d.length.meters(), real);
        }
        // each relay imitates the other vehicle
        assert!(out.truth.decoys.iter().all(|d| {
            let emitter = match d.emitter {
                Entity::Vehicle(v) => v,
                _ => unreachable!(),
            };
            out.truth.owner[&d.covered] != emitter
        }));
    }

    fn busy(seed: u64, relay: f64) -> Scenario {
        let mut c = ScenarioConfig::new(
            GraphSource::Grid {
                rows: 3,
                cols: 3,
                spacing_m: 500.0,
                speed_limit_mps: URBAN_SPEED_LIMIT_MPS,
            },
            MobilitySource::Synthetic {
                n_vehicles: 25,
                arrival_rate_per_s: 0.2,
                seed,
            },
            vec![Point::new(500.0, 500.0)],
        );
        c.relay_fraction = relay;
        c.rng_seed = seed;
        Scenario::build(c, Path::new(".")).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]

        #[test]
        fn nothing_inside_a_zone_is_overheard(seed in 0u64..1000, relay in 0.0f64..=1.0) {
            let sc = busy(seed, relay);
            let out = run(&sc).unwrap();
            let z = &sc.zones[0];
            for o in &out.observations {
                prop_assert!(o.pos.dist(z.center) >= z.radius - 1e-3);
            }
            for e in &out.events {
                if let EventKind::Beacon { x, y, encrypted, .. } = e.kind {
                    prop_assert_eq!(encrypted, z.contains(Point::new(x, y)));
                }
            }
        }

        #[test]
        fn chaff_retires_after_last_use(seed in 0u64..1000) {
            let sc = busy(seed, 1.0);
            let out = run(&sc).unwrap();
            let chaff: BTreeSet<CredentialId> = out.truth.decoys.iter().map(|d| d.chaff).collect();
            let retired: BTreeSet<CredentialId> = out.events.iter().filter_map(|e| match e.kind {
                EventKind::ChaffRetired { chaff, .. } => Some(chaff),
                _ => None,
            }).collect();
            // every used chaff credential is retired by the end
            prop_assert_eq!(&chaff, &retired);
            // and none is beaconed after retirement
            let mut retired_at = BTreeMap::new();
            for e in &out.events {
                match e.kind {
                    EventKind::ChaffRetired { chaff, .. } => { retired_at.insert(chaff, e.tick); }
                    EventKind::Beacon { pseudonym, chaff: true, .. } => {
                        prop_assert!(!retired_at.contains_key(&pseudonym));
                    }
                    _ => {}
                }
            }
        }
    }

    #[test]
    fn reruns_are_identical() {
        let a = run(&busy(3, 0.5)).unwrap();
        let b = run(&busy(3, 0.5)).unwrap();
        assert_eq!(a.events, b.events);
        assert_eq!(a.observations, b.observations);
        assert_eq!(a.truth, b.truth);
    }

    #[test]
    fn decoy_sets_nest_across_relay_fractions() {
        let chaff_for = |relay| {
            let out = run(&busy(5, relay)).unwrap();
            out.truth
                .decoys
                .iter()
                .map(|d| (d.covered, d.source, d.exit, (d.start * 10.0).round() as i64))
                .collect::<BTreeSet<_>>()
        };
        let (low, high) = (chaff_for(0.25), chaff_for(0.75));
        assert!(low.is_subset(&high));
    }
}
