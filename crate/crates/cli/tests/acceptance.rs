//! Acceptance gate. Runs every criterion, prints one verdict line each and
//! fails the target on any red criterion not listed in `KNOWN_RED`.
//!
//! Runs without the libtest harness so the verdict lines always reach the
//! terminal.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::{FRAC_PI_2, PI};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use decoymix::adversary::{brute_force_oracle, build_tracks, link, zone_instance, CandidateSet, LinkParams, ZoneLinks};
use decoymix::filter::{digest_list_size, kib, paper_size_model, ChaffFilter, HashAlg};
use decoymix::metrics::{evaluate, overhead, score, success_rate, CostModel};
use decoymix::mixzone::{DecoySource, ADVERT_PAYLOAD};
use decoymix::model::{CredentialId, Entity, Point, VehicleLength, CAM_WIRE_SIZE, CREDENTIAL_WIRE_SIZE};
use decoymix::road::{central_zone_sites, generate_grid, traverse_time_bounds, MixZoneGeometry, URBAN_SPEED_LIMIT_MPS};
use decoymix::scenario::{GraphSource, MobilitySource, Scenario, ScenarioConfig, TripSpec};
use decoymix::sim::{run, Dissemination, Event, EventKind, GroundTruth, Observation, PseudonymChange, RunOutput};
use decoymix_cli::{cmd_gen_grid, cmd_run, Format, GenGridArgs, RunManifest};

struct Verdict {
    id: u32,
    name: &'static str,
    pass: bool,
    detail: String,
}

/// Beacons emitted inside a zone and any that leaked to an eavesdropper,
/// summed over every simulation the suite runs.
#[derive(Default)]
struct Audit {
    runs: usize,
    inside: usize,
    leaked: usize,
}

impl Audit {
    fn check(&mut self, sc: &Scenario, out: &RunOutput) {
        let inside_any = |p: Point| sc.zones.iter().any(|z| z.contains(p));
        let mut hidden = BTreeSet::new();
        for e in &out.events {
            if let EventKind::Beacon { pseudonym, x, y, .. } = e.kind {
                if inside_any(Point::new(x, y)) {
                    hidden.insert((pseudonym, e.tick));
                }
            }
        }
        self.runs += 1;
        self.inside += hidden.len();
        self.leaked += out
            .observations
            .iter()
            .filter(|o| inside_any(o.pos) || hidden.contains(&(o.pseudonym, (o.time * 10.0).round() as u64)))
            .count();
    }
}

fn main() -> ExitCode {
    let mut audit = Audit::default();
    let mut verdicts = vec![
        c1_worked_example(),
        c2_size_table(),
        c3_digest_list(),
        c4_filter_behaviour(),
        c5_link_matches_oracle(),
        c6_isolated_vehicle(&mut audit),
        c9_sparse_threshold(&mut audit),
        c11_dissemination(),
        c12_overhead(&mut audit),
    ];
    verdicts.extend(grid_criteria(&mut audit));
    verdicts.push(c14_rerun());
    verdicts.push(Verdict {
        id: 10,
        name: "observability audit",
        pass: audit.leaked == 0 && audit.inside > 0,
        detail: format!("{} runs, {} in-zone beacons, {} leaked", audit.runs, audit.inside, audit.leaked),
    });
    verdicts.sort_by_key(|v| v.id);

    let mut unexpected = 0;
    for v in &verdicts {
        let known = KNOWN_RED.iter().find(|(id, _)| *id == v.id).map(|(_, why)| *why);
        let mark = if v.pass { "PASS" } else { "FAIL" };
        println!("criterion {:>2} {:<30} {mark}  {}", v.id, v.name, v.detail);
        match (v.pass, known) {
            (false, Some(why)) => println!("             known red: {why}"),
            (false, None) => unexpected += 1,
            // A known-red criterion turning green means the list is stale.
            (true, Some(_)) => {
                println!("             listed as known red but passed");
                unexpected += 1;
            }
            (true, None) => {}
        }
    }
    let passed = verdicts.iter().filter(|v| v.pass).count();
    println!("{passed} of {} criteria pass, {unexpected} unexpected", verdicts.len());
    if unexpected == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

/// Criteria that cannot hold as stated. They still print FAIL; they just do
/// not fail the target.
const KNOWN_RED: [(u32, &str); 1] = [(
    1,
    "(1 + 1/2 + 0 + 1/3 + 0) / 5 is 11/30 = 0.3667; the published 0.36 is truncated, so no correct metric lands within 1e-12 of it",
)];

fn id(n: u128) -> CredentialId {
    CredentialId::from_u128(n)
}

fn c1_worked_example() -> Verdict {
    // Five transitions whose candidate sets give 1, 1/2, 0, 1/3 and 0.
    let sets: [(u128, Vec<u128>); 5] = [(1, vec![11]), (2, vec![12, 90]), (3, vec![91]), (4, vec![92, 14, 93]), (5, vec![])];
    let links = vec![ZoneLinks {
        zone: 0,
        sets: sets
            .iter()
            .map(|(old, cands)| CandidateSet {
                entering: id(*old),
                at: *old as f64,
                candidates: cands.iter().map(|&c| id(c)).collect(),
            })
            .collect(),
    }];
    let truth = GroundTruth {
        changes: (1..=5u128)
            .map(|k| PseudonymChange {
                vehicle: k as u32,
                zone: 0,
                time: k as f64 + 10.0,
                old: id(k),
                new: id(10 + k),
            })
            .collect(),
        ..Default::default()
    };
    let t0 = Instant::now();
    let rate = success_rate(&score(&links, &truth)).unwrap_or(f64::NAN);
    let took = t0.elapsed();
    // The arithmetic itself is checked separately so a scoring bug cannot
    // hide behind the known discrepancy.
    assert!((rate - 11.0 / 30.0).abs() <= 1e-12, "scoring gives {rate}, not 11/30");
    Verdict {
        id: 1,
        name: "worked linkability example",
        pass: (rate - 0.36).abs() <= 1e-12 && took < Duration::from_millis(1),
        detail: format!("rate {rate} = 11/30 (want 0.36 ± 1e-12) in {took:?}"),
    }
}

fn c2_size_table() -> Verdict {
    // Published sizes in KiB.
    let table = [
        (500, 1e-25, 7.31),
        (1000, 1e-25, 14.63),
        (5000, 1e-25, 73.13),
        (10000, 1e-25, 146.26),
        (20000, 1e-25, 292.51),
        (500, 1e-30, 8.78),
        (1000, 1e-30, 17.55),
        (5000, 1e-30, 87.75),
        (10000, 1e-30, 175.51),
        (20000, 1e-30, 351.02),
    ];
    let mut worst: f64 = 0.0;
    let mut calc_agrees = true;
    for (n, p, want) in table {
        let bytes = paper_size_model(n, p);
        // Same quantity via base-2 logs: log2(1/p) · log2(e) bits per id.
        let by_hand = (n as f64 * (1.0 / p as f64).log2() * std::f64::consts::LOG2_E / 8.0).ceil() as u64;
        calc_agrees &= bytes.abs_diff(by_hand) <= 1;
        worst = worst.max((kib(bytes) - want).abs() / want);
    }
    Verdict {
        id: 2,
        name: "filter size table",
        pass: worst <= 0.005 && calc_agrees,
        detail: format!("worst relative error {:.4}% (limit 0.5%), independent calculator agrees: {calc_agrees}", worst * 100.0),
    }
}

fn c3_digest_list() -> Verdict {
    let list = digest_list_size(5000, HashAlg::Sha256);
    let filter = kib(paper_size_model(5000, 1e-25));
    Verdict {
        id: 3,
        name: "digest list comparison",
        pass: list == 160_000 && kib(list) == 156.25 && kib(list) > filter,
        detail: format!("{list} B = {} KiB vs filter {filter:.2} KiB", kib(list)),
    }
}

fn c4_filter_behaviour() -> Verdict {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);

    // 10^5 random operations in 100 independent runs against a multiset model.
    let mut false_negatives = 0;
    let mut ops = 0;
    for _ in 0..100 {
        let mut f = ChaffFilter::new(2000, 1e-6).expect("valid parameters");
        let mut members: Vec<CredentialId> = Vec::new();
        for _ in 0..1000 {
            ops += 1;
            match rng.random_range(0..3) {
                0 if members.len() < 1500 => {
                    let x = id(rng.random());
                    f.insert(x).expect("below capacity");
                    members.push(x);
                }
                1 if !members.is_empty() => {
                    let x = members.swap_remove(rng.random_range(0..members.len()));
                    f.remove(x).expect("member present");
                }
                _ if !members.is_empty() => {
                    let x = members[rng.random_range(0..members.len())];
                    false_negatives += usize::from(!f.contains(x));
                }
                _ => {}
            }
        }
        false_negatives += members.iter().filter(|&&m| !f.contains(m)).count();
    }

    // Insert then delete leaves every probe answering as before.
    let mut f = ChaffFilter::new(5000, 1e-3).expect("valid parameters");
    for _ in 0..4000 {
        f.insert(id(rng.random())).expect("below capacity");
    }
    let probes: Vec<CredentialId> = (0..20_000).map(|_| id(rng.random())).collect();
    let before: Vec<bool> = probes.iter().map(|&p| f.contains(p)).collect();
    let mut restored = true;
    for _ in 0..200 {
        let x = id(rng.random());
        f.insert(x).expect("below capacity");
        f.remove(x).expect("just inserted");
        restored &= probes.iter().map(|&p| f.contains(p)).eq(before.iter().copied());
    }

    let mut f = ChaffFilter::new(100_000, 1e-3).expect("valid parameters");
    for k in 0..100_000u128 {
        f.insert(id(k.wrapping_mul(0x9e37_79b9_7f4a_7c15_f39c_c060_5ced_c835) | 1)).expect("below capacity");
    }
    let fp = (0..100_000u128)
        .filter(|&k| f.contains(id(k.wrapping_mul(0x9e37_79b9_7f4a_7c15_f39c_c060_5ced_c835) & !1)))
        .count();
    let fpr = fp as f64 / 100_000.0;
    let took = t0.elapsed();
    Verdict {
        id: 4,
        name: "filter behaviour",
        pass: false_negatives == 0 && restored && fpr <= 2e-3 && took < Duration::from_secs(10),
        detail: format!("{ops} ops, {false_negatives} false negatives, deletion restores: {restored}, FPR {fpr:.5} (limit 0.002) in {took:.2?}"),
    }
}

/// Random observation sets around the 4-way junction of a 3×3 grid: up to
/// eight tracks entering or leaving on any arm, some pointed the wrong way,
/// some with far-away sightings that overlap in time.
fn random_instance(rng: &mut ChaCha8Rng) -> Vec<Observation> {
    let arms = [0.0, FRAC_PI_2, PI, -FRAC_PI_2];
    let lengths = [4.5, 4.5, 7.5, 12.0];
    let center = Point::new(500.0, 500.0);
    let mut out = Vec::new();
    for k in 0..rng.random_range(1..=8u128) {
        let arm = arms[rng.random_range(0..4)];
        let dir = Point::from_heading(arm);
        let len = VehicleLength::from_meters(lengths[rng.random_range(0..4)]).unwrap();
        let t = (rng.random_range(0..1200) as f64) / 10.0;
        let entering = rng.random_bool(0.5);
        let mut heading = if entering { arm + PI } else { arm };
        if rng.random_bool(0.1) {
            heading += PI;
        }
        for step in 0..2 {
            let off = if entering { 110.0 - 5.0 * step as f64 } else { 105.0 + 5.0 * step as f64 };
            out.push(Observation {
                time: t + 0.5 * step as f64,
                pseudonym: id(k + 1),
                pos: center + dir * off,
                speed: 10.0,
                heading,
                length: len,
                eavesdropper: 0,
            });
        }
        if rng.random_bool(0.15) {
            out.push(Observation {
                time: t + rng.random_range(-200..200) as f64 / 10.0,
                pseudonym: id(k + 1),
                pos: Point::new(1500.0, 0.0),
                speed: 10.0,
                heading: 0.0,
                length: len,
                eavesdropper: 1,
            });
        }
    }
    out.into_iter().map(|o| o.quantized()).collect()
}

fn c5_link_matches_oracle() -> Verdict {
    let t0 = Instant::now();
    let g = generate_grid(3, 3, 500.0, URBAN_SPEED_LIMIT_MPS).unwrap();
    let z = MixZoneGeometry::from_graph(&g, Point::new(500.0, 500.0), 100.0, false).unwrap();
    let p = LinkParams {
        bounds: traverse_time_bounds(&z, &g, 1.39).unwrap(),
        gamma_v_s: 0.5,
    };
    let (mut discrepancies, mut sets, mut nonempty) = (0, 0, 0);
    for seed in 0..500 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = zone_instance(&build_tracks(&random_instance(&mut rng), 0.5), &z);
        let fast = link(&inst, &g, &z, p);
        discrepancies += usize::from(fast != brute_force_oracle(&inst, &g, &z, p));
        sets += fast.len();
        nonempty += fast.iter().filter(|s| !s.candidates.is_empty()).count();
    }
    let took = t0.elapsed();
    Verdict {
        id: 5,
        name: "linking equals brute force",
        pass: discrepancies == 0 && nonempty > 0 && took < Duration::from_secs(30),
        detail: format!("500 instances, {sets} candidate sets ({nonempty} non-empty), {discrepancies} discrepancies in {took:.2?}"),
    }
}

fn lone_vehicle(relay: f64, threshold: usize, seed: u64) -> Scenario {
    trips_on_cross(
        vec![TripSpec {
            vehicle: 0,
            departure_s: 0.0,
            junctions: vec!["j1_0".into(), "j1_1".into(), "j1_2".into()],
            speed_mps: 10.0,
            length_m: 4.5,
        }],
        relay,
        threshold,
        seed,
    )
}

/// A 3×3 grid with one zone on the centre junction.
fn trips_on_cross(trips: Vec<TripSpec>, relay: f64, threshold: usize, seed: u64) -> Scenario {
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
    c.rng_seed = seed;
    Scenario::build(c, Path::new(".")).expect("fixture builds")
}

fn simulate(sc: &Scenario, audit: &mut Audit) -> (RunOutput, f64) {
    let out = run(sc).expect("scenario runs");
    audit.check(sc, &out);
    let rate = evaluate(sc, &out).expect("evaluates").linkability.success_rate.unwrap_or(f64::NAN);
    (out, rate)
}

fn c6_isolated_vehicle(audit: &mut Audit) -> Verdict {
    // The centre junction has three exits that are not U-turns.
    let k = 3.0;
    let (_, bare) = simulate(&lone_vehicle(0.0, 2, 1), audit);
    let (_, one) = simulate(&lone_vehicle(1.0, 0, 1), audit);
    let mut all = 0.0;
    for seed in 1..=100 {
        all += simulate(&lone_vehicle(1.0, 2, seed), audit).1;
    }
    all /= 100.0;
    Verdict {
        id: 6,
        name: "isolated vehicle baselines",
        pass: bare == 1.0 && one == 0.5 && all <= 1.0 / k + 0.05,
        detail: format!("no decoy {bare}, one decoy {one}, full cover mean over 100 seeds {all:.4} (limit {:.4})", 1.0 / k + 0.05),
    }
}

fn c9_sparse_threshold(audit: &mut Audit) -> Verdict {
    let trip = |v: u32, js: [&str; 3]| TripSpec {
        vehicle: v,
        departure_s: 0.0,
        junctions: js.iter().map(|s| s.to_string()).collect(),
        speed_mps: 10.0,
        length_m: 4.5,
    };
    let routes = [["j1_0", "j1_1", "j1_2"], ["j2_1", "j1_1", "j0_1"], ["j1_2", "j1_1", "j1_0"]];
    let mut got = Vec::new();
    for n in 1..=3 {
        let trips = (0..n).map(|v| trip(v as u32, routes[v])).collect();
        let (out, _) = simulate(&trips_on_cross(trips, 1.0, 2, 1), audit);
        let streams = out
            .events
            .iter()
            .filter(|e| matches!(e.kind, EventKind::DecoyStart { source: DecoySource::Rsu, .. }))
            .count();
        got.push(streams);
    }
    Verdict {
        id: 9,
        name: "sparse threshold streams",
        pass: got == [1, 2, 0],
        detail: format!("1, 2, 3 vehicles -> {got:?} RSU streams (want [1, 2, 0])"),
    }
}

fn c11_dissemination() -> Verdict {
    // Chunks are 50 KiB; the three filters need 1, 2 and 3 of them. Aligned
    // arrivals wait one cycle, an arrival one tick late waits almost two.
    let cases = [(1000, 1, 10, 19), (5000, 2, 20, 39), (10000, 3, 30, 59)];
    let mut ok = true;
    let mut detail = Vec::new();
    for (n, chunks, aligned, late) in cases {
        let d = Dissemination::new(paper_size_model(n, 1e-25), 50.0, 1.0);
        let c = d.cycle_ticks();
        let got = (d.latency_ticks(0), d.latency_ticks(c + 1));
        let stepped = (d.simulate_latency(0), d.simulate_latency(c + 1));
        ok &= d.n_chunks == chunks && got == (aligned, late) && stepped == got;
        detail.push(format!("{:.2} KiB: {}/{} ticks", kib(paper_size_model(n, 1e-25)), got.0, got.1));
    }
    Verdict {
        id: 11,
        name: "filter dissemination schedule",
        pass: ok,
        detail: detail.join(", "),
    }
}

fn c12_overhead(audit: &mut Audit) -> Verdict {
    let costs = CostModel::default();
    let adverts: Vec<Event> = (0..10)
        .map(|s| Event {
            tick: s * 10,
            entity: Entity::Rsu(0),
            kind: EventKind::Advert {
                zone: 0,
                bytes: ADVERT_PAYLOAD + CREDENTIAL_WIRE_SIZE,
            },
        })
        .collect();
    let beacons: Vec<Event> = (0..50)
        .map(|k| Event {
            tick: k * 2,
            entity: Entity::Vehicle(0),
            kind: EventKind::Beacon {
                pseudonym: id(1),
                link_id: 0,
                x: 0.0,
                y: 0.0,
                speed: 0.0,
                heading: 0.0,
                length_m: 4.5,
                chaff: false,
                encrypted: false,
                bytes: CAM_WIRE_SIZE + CREDENTIAL_WIRE_SIZE,
            },
        })
        .collect();
    let rsu = overhead(&adverts, &costs);
    let veh = overhead(&beacons, &costs);
    // 164 B/s and one signature a second; five 490 B beacons a second, each signed.
    let hand = rsu.rsu_kb_per_s == 0.164 && rsu.rsu_ms_per_s == 0.3 && veh.vehicle_kb_per_s == 2.45 && veh.vehicle_ms_per_s == 15.0;

    let (out, _) = simulate(&lone_vehicle(1.0, 2, 1), audit);
    let a = serde_json::to_string(&overhead(&out.events, &costs)).unwrap();
    let b = serde_json::to_string(&overhead(&out.events, &costs)).unwrap();
    Verdict {
        id: 12,
        name: "overhead accounting",
        pass: hand && a == b,
        detail: format!(
            "RSU {} KB/s {} ms/s, vehicle {} KB/s {} ms/s, recomputation identical: {}",
            rsu.rsu_kb_per_s,
            rsu.rsu_ms_per_s,
            veh.vehicle_kb_per_s,
            veh.vehicle_ms_per_s,
            a == b
        ),
    }
}

/// Mean success rate over seeds 1..=10 on the 4×4 grid with two zones.
fn grid_mean(relay: f64, non_coop: f64, hbc: f64) -> (f64, Vec<(Scenario, RunOutput)>) {
    let sites = central_zone_sites(4, 4, 500.0, 2, 100.0).unwrap();
    let runs: Vec<(Scenario, RunOutput, f64)> = (1..=10u64)
        .into_par_iter()
        .map(|seed| {
            let mut c = ScenarioConfig::new(
                GraphSource::Grid {
                    rows: 4,
                    cols: 4,
                    spacing_m: 500.0,
                    speed_limit_mps: URBAN_SPEED_LIMIT_MPS,
                },
                MobilitySource::Synthetic {
                    n_vehicles: 200,
                    arrival_rate_per_s: 0.1,
                    seed: 7,
                },
                sites.clone(),
            );
            c.relay_fraction = relay;
            c.non_coop_fraction = non_coop;
            c.hbc_rsu_fraction = hbc;
            c.rng_seed = seed;
            let sc = Scenario::build(c, Path::new(".")).expect("grid builds");
            let out = run(&sc).expect("grid runs");
            let rate = evaluate(&sc, &out).expect("evaluates").linkability.success_rate.unwrap_or(f64::NAN);
            (sc, out, rate)
        })
        .collect();
    let mean = runs.iter().map(|r| r.2).sum::<f64>() / runs.len() as f64;
    (mean, runs.into_iter().map(|(s, o, _)| (s, o)).collect())
}

fn grid_criteria(audit: &mut Audit) -> Vec<Verdict> {
    let t0 = Instant::now();
    let mut means = BTreeMap::new();
    let mut point = |relay: f64, nc: f64, hbc: f64, audit: &mut Audit| {
        let key = format!("{relay}/{nc}/{hbc}");
        if let Some(&m) = means.get(&key) {
            return m;
        }
        let (m, runs) = grid_mean(relay, nc, hbc);
        for (sc, out) in &runs {
            audit.check(sc, out);
        }
        means.insert(key, m);
        m
    };

    let sweep: Vec<f64> = [0.0, 0.25, 0.5, 0.75, 1.0].iter().map(|&r| point(r, 0.0, 0.0, audit)).collect();
    let took = t0.elapsed();
    let monotone = sweep.windows(2).all(|w| w[1] <= w[0]);
    let ratio = sweep[2] / sweep[0];
    let c7 = Verdict {
        id: 7,
        name: "decoys never hurt",
        pass: monotone && ratio <= 0.6 && took < Duration::from_secs(300),
        detail: format!(
            "relay 0..1 -> {:?}, 0.5/0.0 = {ratio:.3} (limit 0.6) in {took:.1?}",
            sweep.iter().map(|m| format!("{m:.3}")).collect::<Vec<_>>()
        ),
    };

    let nc: Vec<f64> = [0.0, 0.25, 0.5].iter().map(|&f| point(0.5, f, 0.0, audit)).collect();
    let spread = nc.iter().cloned().fold(f64::MIN, f64::max) - nc.iter().cloned().fold(f64::MAX, f64::min);
    let c8 = Verdict {
        id: 8,
        name: "non-cooperative robustness",
        pass: spread < 0.10,
        detail: format!("non-coop 0, 0.25, 0.5 -> {:.3}, {:.3}, {:.3}; spread {:.1} pp (limit 10)", nc[0], nc[1], nc[2], spread * 100.0),
    };

    let (ext, half, full) = (point(1.0, 0.0, 0.0, audit), point(1.0, 0.0, 0.5, audit), point(1.0, 0.0, 1.0, audit));
    let c13 = Verdict {
        id: 13,
        name: "curious RSU ordering",
        pass: ext < half && half < full,
        detail: format!("external {ext:.3} < hbc 0.5 {half:.3} < hbc 1.0 {full:.3}"),
    };
    vec![c7, c8, c13]
}

fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_owned()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).expect("readable") {
            let p = e.expect("entry").path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_owned(), fs::read(&p).expect("readable")));
            }
        }
    }
    out.sort();
    out
}

fn c14_rerun() -> Verdict {
    let tmp = tempfile::tempdir().expect("temp dir");
    cmd_gen_grid(&GenGridArgs {
        rows: 4,
        cols: 4,
        spacing_m: 500.0,
        zones: 2,
        zone_radius_m: 100.0,
        vehicles: 60,
        arrival_rate_per_s: 0.1,
        mobility_seed: 7,
        out: tmp.path().join("grid"),
        force: false,
    })
    .expect("grid written");
    let manifest = |out: &str, workers| RunManifest {
        scenario: tmp.path().join("grid/scenario.json"),
        seeds: vec![1, 2, 3],
        sweeps: vec![("relay_fraction".into(), vec!["0".into(), "0.5".into()])],
        out: tmp.path().join(out),
        force: false,
        workers,
        format: Format::Csv,
    };
    cmd_run(&manifest("a", 0)).expect("first run");
    cmd_run(&manifest("b", 1)).expect("second run");
    let (a, b) = (tree(&tmp.path().join("a")), tree(&tmp.path().join("b")));
    let bytes: usize = a.iter().map(|(_, c)| c.len()).sum();
    Verdict {
        id: 14,
        name: "byte-identical reruns",
        pass: !a.is_empty() && a == b,
        detail: format!("{} files, {bytes} bytes, identical: {}", a.len(), a == b),
    }
}
