//! Minimal vehicular PKI back-end.
//!
//! The LTCA keeps the registration ledger (long-term identities). The PCA
//! issues pseudonyms and chaff pseudonyms with identical validity windows,
//! keeps one chaff filter per RSU, retires chaff on request and walks the
//! resolution chain back to a long-term identity.
//!
//! ```
//! use decoymix::model::Entity;
//! use decoymix::vpki::{Ltca, Pca};
//!
//! let mut ltca = Ltca::default();
//! ltca.register_vehicle(7);
//! let mut pca = Pca::new(1, 1000, 1e-25);
//! pca.register_rsu(0);
//! let batch = pca.issue_pseudonyms(&ltca, 7, 3, (0.0, 7200.0)).unwrap();
//! let chaff = pca.provision_chaff(0, 52, (0.0, 7200.0)).unwrap();
//! assert_eq!(batch.len(), 3);
//! assert!(chaff.iter().all(|c| pca.filter(0).unwrap().contains(c.id)));
//! ```

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::filter::{ChaffFilter, FilterError};
use crate::model::{sign, verify, Credential, CredentialId, CredentialKind, CryptoError, Entity, Holder, SignedEnvelope};
use crate::rng::{keyed_rng, Purpose};
use rand::Rng;

/// One hour, the filter update cadence.
pub const EPOCH_S: f64 = 3600.0;
/// Pseudonyms and chaff issued in an epoch stay valid for two epochs.
pub const VALIDITY_S: f64 = 2.0 * EPOCH_S;
const FOREVER: f64 = f64::MAX;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VpkiError {
    #[error("vehicle {0} is not registered with the LTCA")]
    NotRegistered(u32),
    #[error("RSU {0} is not registered with the PCA")]
    UnknownRsu(u32),
    #[error("chaff filter capacity exceeded")]
    FilterSaturated,
    #[error("unknown chaff pseudonym {0}")]
    UnknownChaff(CredentialId),
    #[error("chaff pseudonym {0} was already retired")]
    AlreadyRetired(CredentialId),
    #[error("request signature does not verify")]
    AuthFailure,
    #[error("chaff pseudonym {0} was never assigned")]
    NeverAssigned(CredentialId),
    #[error("unknown pseudonym {0}")]
    UnknownPseudonym(CredentialId),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error(transparent)]
    Filter(#[from] FilterError),
}

/// Registration ledger and long-term certificates.
#[derive(Debug, Default, Clone)]
pub struct Ltca {
    vehicles: BTreeMap<u32, CredentialId>,
    rsus: BTreeMap<u32, Credential>,
}

impl Ltca {
    pub fn register_vehicle(&mut self, vehicle: u32) -> CredentialId {
        *self
            .vehicles
            .entry(vehicle)
            .or_insert_with(|| long_term_id(Entity::Vehicle(vehicle)))
    }

    pub fn long_term_id(&self, vehicle: u32) -> Option<CredentialId> {
        self.vehicles.get(&vehicle).copied()
    }

    pub fn vehicle_of(&self, long_term: CredentialId) -> Option<u32> {
        self.vehicles
            .iter()
            .find(|(_, id)| **id == long_term)
            .map(|(v, _)| *v)
    }

    /// Long-term certificate an RSU signs advertisements and responses with.
    pub fn certify_rsu(&mut self, rsu: u32) -> Credential {
        self.rsus
            .entry(rsu)
            .or_insert_with(|| {
                Credential::new(
                    long_term_id(Entity::Rsu(rsu)),
                    CredentialKind::LongTermCert,
                    Entity::Ltca,
                    Holder::Entity(Entity::Rsu(rsu)),
                    0.0,
                    FOREVER,
                )
                .expect("valid window")
            })
            .clone()
    }

    pub fn rsu_cert(&self, rsu: u32) -> Option<&Credential> {
        self.rsus.get(&rsu)
    }
}

fn long_term_id(e: Entity) -> CredentialId {
    let (tag, n) = match e {
        Entity::Vehicle(v) => (1u64, v as u64),
        Entity::Rsu(r) => (2, r as u64),
        Entity::Pca => (3, 0),
        Entity::Ltca => (4, 0),
    };
    CredentialId(keyed_rng(0, Purpose::Pseudonym, &[u64::MAX, tag, n]).random())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChaffStatus {
    Active,
    Retired,
    Withdrawn,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChaffRecord {
    pub rsu: u32,
    pub credential: Credential,
    pub status: ChaffStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemovalRecord {
    pub chaff: CredentialId,
    pub rsu: u32,
    pub time: f64,
}

/// Flagged use of a chaff pseudonym after it was retired.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Misbehavior {
    pub chaff: CredentialId,
    pub retired_at: f64,
    pub seen_at: f64,
}

/// A filter snapshot with the PCA signature over `(rsu, filter bytes)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SignedFilter {
    pub rsu: u32,
    pub epoch: u16,
    pub envelope: SignedEnvelope,
}

impl SignedFilter {
    pub fn filter_bytes(&self) -> &[u8] {
        &self.envelope.payload[4..]
    }
}

/// Implemented by whoever records which pseudonym received a chaff
/// credential (the RSU controllers).
pub trait AssignmentLedger {
    fn requester_of(&self, rsu: u32, chaff: CredentialId) -> Option<CredentialId>;
}

#[derive(Debug, Clone)]
pub struct Pca {
    seed: u64,
    credential: Credential,
    pseudonyms: HashMap<CredentialId, u32>,
    issued_per_vehicle: HashMap<u32, u64>,
    chaff: HashMap<CredentialId, ChaffRecord>,
    filters: BTreeMap<u32, ChaffFilter>,
    batches: BTreeMap<u32, u64>,
    removal_log: Vec<RemovalRecord>,
    capacity: usize,
    fpr: f64,
}

impl Pca {
    /// `capacity` is the fixed logical size every RSU filter is built for,
    /// independent of how much chaff is active.
    pub fn new(seed: u64, capacity: usize, fpr: f64) -> Self {
        Pca {
            seed,
            credential: Credential::new(
                long_term_id(Entity::Pca),
                CredentialKind::LongTermCert,
                Entity::Pca,
                Holder::Entity(Entity::Pca),
                0.0,
                FOREVER,
            )
            .expect("valid window"),
            pseudonyms: HashMap::new(),
            issued_per_vehicle: HashMap::new(),
            chaff: HashMap::new(),
            filters: BTreeMap::new(),
            batches: BTreeMap::new(),
            removal_log: Vec::new(),
            capacity,
            fpr,
        }
    }

    pub fn credential(&self) -> &Credential {
        &self.credential
    }

    pub fn register_rsu(&mut self, rsu: u32) {
        let (cap, fpr) = (self.capacity, self.fpr);
        self.filters
            .entry(rsu)
            .or_insert_with(|| ChaffFilter::new(cap, fpr).expect("valid filter parameters"));
    }

    pub fn filter(&self, rsu: u32) -> Option<&ChaffFilter> {
        self.filters.get(&rsu)
    }

    pub fn removal_log(&self) -> &[RemovalRecord] {
        &self.removal_log
    }

    pub fn issue_pseudonyms(
        &mut self,
        ltca: &Ltca,
        vehicle: u32,
        count: usize,
        window: (f64, f64),
    ) -> Result<Vec<Credential>, VpkiError> {
        ltca.long_term_id(vehicle).ok_or(VpkiError::NotRegistered(vehicle))?;
        let issued = self.issued_per_vehicle.entry(vehicle).or_insert(0);
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let mut rng = keyed_rng(self.seed, Purpose::Pseudonym, &[vehicle as u64, *issued]);
            *issued += 1;
            let c = Credential::new(
                CredentialId(rng.random()),
                CredentialKind::Pseudonym,
                Entity::Pca,
                Holder::Entity(Entity::Vehicle(vehicle)),
                window.0,
                window.1,
            )
            .expect("pseudonym window");
            self.pseudonyms.insert(c.id, vehicle);
            out.push(c);
        }
        Ok(out)
    }

    pub fn holder_of(&self, pseudonym: CredentialId) -> Option<u32> {
        self.pseudonyms.get(&pseudonym).copied()
    }

    fn active_count(&self, rsu: u32) -> usize {
        self.chaff
            .values()
            .filter(|r| r.rsu == rsu && r.status == ChaffStatus::Active)
            .count()
    }

    /// Creates `count` chaff pseudonyms for `rsu` and inserts them into its
    /// filter. All or nothing.
    pub fn provision_chaff(&mut self, rsu: u32, count: usize, window: (f64, f64)) -> Result<Vec<Credential>, VpkiError> {
        if !self.filters.contains_key(&rsu) {
            return Err(VpkiError::UnknownRsu(rsu));
        }
        if self.active_count(rsu) + count > self.capacity {
            return Err(VpkiError::FilterSaturated);
        }
        let batch = self.batches.entry(rsu).or_insert(0);
        let mut rng = keyed_rng(self.seed, Purpose::Chaff, &[rsu as u64, *batch]);
        *batch += 1;
        let creds: Vec<Credential> = (0..count)
            .map(|_| {
                Credential::new(
                    CredentialId(rng.random()),
                    CredentialKind::ChaffPseudonym,
                    Entity::Pca,
                    Holder::Unassigned,
                    window.0,
                    window.1,
                )
                .expect("chaff window")
            })
            .collect();
        let filter = self.filters.get_mut(&rsu).unwrap();
        let mut staged = filter.clone();
        for c in &creds {
            staged.insert(c.id).map_err(|_| VpkiError::FilterSaturated)?;
        }
        staged.epoch = staged.epoch.wrapping_add(1);
        *filter = staged;
        for c in &creds {
            self.chaff.insert(
                c.id,
                ChaffRecord {
                    rsu,
                    credential: c.clone(),
                    status: ChaffStatus::Active,
                },
            );
        }
        Ok(creds)
    }

    /// Handles a removal request signed under the chaff credential itself.
    pub fn retire_chaff(&mut self, request: &SignedEnvelope, now: f64) -> Result<u32, VpkiError> {
        let id = request.signer;
        let rec = self.chaff.get(&id).ok_or(VpkiError::UnknownChaff(id))?;
        match rec.status {
            ChaffStatus::Active => {}
            _ => return Err(VpkiError::AlreadyRetired(id)),
        }
        if !verify(request, &rec.credential, now) {
            return Err(VpkiError::AuthFailure);
        }
        let rsu = rec.rsu;
        self.remove_from_filter(id, rsu)?;
        self.chaff.get_mut(&id).unwrap().status = ChaffStatus::Retired;
        self.removal_log.push(RemovalRecord { chaff: id, rsu, time: now });
        Ok(rsu)
    }

    /// Drops unassigned chaff the RSU hands back at an epoch rollover.
    pub fn withdraw_chaff(&mut self, rsu: u32, ids: &[CredentialId]) -> Result<(), VpkiError> {
        for &id in ids {
            let rec = self.chaff.get(&id).ok_or(VpkiError::UnknownChaff(id))?;
            if rec.rsu != rsu {
                return Err(VpkiError::UnknownChaff(id));
            }
            if rec.status != ChaffStatus::Active {
                return Err(VpkiError::AlreadyRetired(id));
            }
            self.remove_from_filter(id, rsu)?;
            self.chaff.get_mut(&id).unwrap().status = ChaffStatus::Withdrawn;
        }
        Ok(())
    }

    fn remove_from_filter(&mut self, id: CredentialId, rsu: u32) -> Result<(), VpkiError> {
        let f = self.filters.get_mut(&rsu).ok_or(VpkiError::UnknownRsu(rsu))?;
        f.remove(id)?;
        f.epoch = f.epoch.wrapping_add(1);
        Ok(())
    }

    pub fn chaff_status(&self, id: CredentialId) -> Option<ChaffStatus> {
        self.chaff.get(&id).map(|r| r.status)
    }

    pub fn chaff_rsu(&self, id: CredentialId) -> Option<u32> {
        self.chaff.get(&id).map(|r| r.rsu)
    }

    /// A beacon signed under retired chaff is misbehavior.
    pub fn check_chaff_use(&self, id: CredentialId, now: f64) -> Option<Misbehavior> {
        let rec = self.chaff.get(&id)?;
        if rec.status != ChaffStatus::Retired {
            return None;
        }
        let retired_at = self
            .removal_log
            .iter()
            .rev()
            .find(|r| r.chaff == id)
            .map_or(0.0, |r| r.time);
        Some(Misbehavior {
            chaff: id,
            retired_at,
            seen_at: now,
        })
    }

    pub fn publish(&self, rsu: u32, now: f64) -> Result<SignedFilter, VpkiError> {
        let f = self.filters.get(&rsu).ok_or(VpkiError::UnknownRsu(rsu))?;
        let mut payload = rsu.to_le_bytes().to_vec();
        payload.extend(f.serialize());
        Ok(SignedFilter {
            rsu,
            epoch: f.epoch,
            envelope: sign(&payload, &self.credential, now)?,
        })
    }

    /// Chaff id → RSU → requesting pseudonym → vehicle → long-term id.
    pub fn resolve_chaff(
        &self,
        chaff: CredentialId,
        ledger: &dyn AssignmentLedger,
        ltca: &Ltca,
    ) -> Result<CredentialId, VpkiError> {
        let rec = self.chaff.get(&chaff).ok_or(VpkiError::UnknownChaff(chaff))?;
        let pseudonym = ledger
            .requester_of(rec.rsu, chaff)
            .ok_or(VpkiError::NeverAssigned(chaff))?;
        let vehicle = self
            .holder_of(pseudonym)
            .ok_or(VpkiError::UnknownPseudonym(pseudonym))?;
        ltca.long_term_id(vehicle).ok_or(VpkiError::NotRegistered(vehicle))
    }

    /// Active chaff ids per RSU.
    pub fn active_chaff(&self) -> BTreeMap<u32, Vec<CredentialId>> {
        let mut out: BTreeMap<u32, Vec<CredentialId>> = BTreeMap::new();
        for (id, r) in &self.chaff {
            if r.status == ChaffStatus::Active {
                out.entry(r.rsu).or_default().push(*id);
            }
        }
        for v in out.values_mut() {
            v.sort();
        }
        out
    }
}

/// Checks a published filter against the PCA credential and decodes it.
pub fn verify_filter(signed: &SignedFilter, pca: &Credential, now: f64) -> Option<ChaffFilter> {
    if !verify(&signed.envelope, pca, now) {
        return None;
    }
    ChaffFilter::deserialize(signed.filter_bytes()).ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn setup() -> (Ltca, Pca) {
        let mut ltca = Ltca::default();
        for v in 0..4 {
            ltca.register_vehicle(v);
        }
        let mut pca = Pca::new(9, 1000, 1e-25);
        pca.register_rsu(0);
        pca.register_rsu(1);
        (ltca, pca)
    }

    struct Ledger(HashMap<CredentialId, CredentialId>);

    impl AssignmentLedger for Ledger {
        fn requester_of(&self, _rsu: u32, chaff: CredentialId) -> Option<CredentialId> {
            self.0.get(&chaff).copied()
        }
    }

    #[test]
    fn issued_windows_are_identical() {
        let (ltca, mut pca) = setup();
        let b = pca.issue_pseudonyms(&ltca, 1, 5, (0.0, 3600.0)).unwrap();
        assert_eq!(b.len(), 5);
        assert!(b.iter().all(|c| c.valid_from == 0.0 && c.valid_to == 3600.0));
        let other = pca.issue_pseudonyms(&ltca, 2, 5, (0.0, 3600.0)).unwrap();
        let ids: HashSet<_> = b.iter().chain(&other).map(|c| c.id).collect();
        assert_eq!(ids.len(), 10);
        assert_eq!(pca.issue_pseudonyms(&ltca, 99, 1, (0.0, 1.0)), Err(VpkiError::NotRegistered(99)));
    }

    #[test]
    fn provisioning_fills_distinct_filters() {
        let (_, mut pca) = setup();
        let a = pca.provision_chaff(0, 52, (0.0, 7200.0)).unwrap();
        let b = pca.provision_chaff(1, 52, (0.0, 7200.0)).unwrap();
        let f0 = pca.filter(0).unwrap();
        assert!(a.iter().all(|c| f0.contains(c.id)));
        assert_eq!(f0.epoch, 1);
        let sa: HashSet<_> = a.iter().map(|c| c.id).collect();
        assert!(b.iter().all(|c| !sa.contains(&c.id)));
        assert!(a.iter().all(|c| c.holder == Holder::Unassigned && c.valid_to == 7200.0));
        assert_eq!(pca.provision_chaff(7, 1, (0.0, 1.0)), Err(VpkiError::UnknownRsu(7)));
    }

    #[test]
    fn over_capacity_is_rejected_atomically() {
        let (_, mut pca) = setup();
        let before = pca.filter(0).unwrap().clone();
        assert_eq!(pca.provision_chaff(0, 2000, (0.0, 7200.0)), Err(VpkiError::FilterSaturated));
        assert_eq!(pca.filter(0).unwrap(), &before);
        assert!(pca.active_chaff().is_empty());
    }

    #[test]
    fn every_active_chaff_in_exactly_one_filter() {
        let (_, mut pca) = setup();
        pca.provision_chaff(0, 300, (0.0, 7200.0)).unwrap();
        pca.provision_chaff(1, 300, (0.0, 7200.0)).unwrap();
        for (rsu, ids) in pca.active_chaff() {
            for id in ids {
                assert!(pca.filter(rsu).unwrap().contains(id));
                // 1e-25 rate: the other filter never matches by accident
                assert!(!pca.filter(1 - rsu).unwrap().contains(id));
            }
        }
    }

    #[test]
    fn retire_then_retire_again() {
        let (_, mut pca) = setup();
        let c = pca.provision_chaff(0, 3, (0.0, 7200.0)).unwrap()[1].clone();
        let req = sign(b"retire", &c, 10.0).unwrap();
        assert_eq!(pca.retire_chaff(&req, 10.0), Ok(0));
        assert!(!pca.filter(0).unwrap().contains(c.id));
        assert_eq!(pca.retire_chaff(&req, 11.0), Err(VpkiError::AlreadyRetired(c.id)));
        let m = pca.check_chaff_use(c.id, 11.0).unwrap();
        assert_eq!((m.retired_at, m.seen_at), (10.0, 11.0));
        assert_eq!(pca.removal_log().len(), 1);
    }

    #[test]
    fn retire_rejects_bad_requests() {
        let (ltca, mut pca) = setup();
        let chaff = pca.provision_chaff(0, 2, (0.0, 7200.0)).unwrap();
        let stranger = pca.issue_pseudonyms(&ltca, 0, 1, (0.0, 7200.0)).unwrap().remove(0);
        let req = sign(b"retire", &stranger, 1.0).unwrap();
        assert_eq!(pca.retire_chaff(&req, 1.0), Err(VpkiError::UnknownChaff(stranger.id)));
        let mut forged = sign(b"retire", &chaff[0], 1.0).unwrap();
        forged.payload.push(0);
        assert_eq!(pca.retire_chaff(&forged, 1.0), Err(VpkiError::AuthFailure));
        assert!(pca.check_chaff_use(chaff[0].id, 2.0).is_none());
    }

    #[test]
    fn resolution_chain() {
        let (ltca, mut pca) = setup();
        let p = pca.issue_pseudonyms(&ltca, 3, 1, (0.0, 7200.0)).unwrap().remove(0);
        let chaff = pca.provision_chaff(1, 2, (0.0, 7200.0)).unwrap();
        let ledger = Ledger([(chaff[0].id, p.id)].into_iter().collect());
        assert_eq!(pca.resolve_chaff(chaff[0].id, &ledger, &ltca), Ok(ltca.long_term_id(3).unwrap()));
        assert_eq!(ltca.vehicle_of(ltca.long_term_id(3).unwrap()), Some(3));
        assert_eq!(pca.resolve_chaff(chaff[1].id, &ledger, &ltca), Err(VpkiError::NeverAssigned(chaff[1].id)));
        let random = CredentialId([0x42; 16]);
        assert_eq!(pca.resolve_chaff(random, &ledger, &ltca), Err(VpkiError::UnknownChaff(random)));
    }

    #[test]
    fn published_filter_verifies_and_detects_tampering() {
        let (_, mut pca) = setup();
        let c = pca.provision_chaff(0, 10, (0.0, 7200.0)).unwrap();
        let mut s = pca.publish(0, 5.0).unwrap();
        let f = verify_filter(&s, pca.credential(), 5.0).unwrap();
        assert!(f.contains(c[0].id));
        let last = s.envelope.payload.len() - 1;
        s.envelope.payload[last] ^= 0x80;
        assert!(verify_filter(&s, pca.credential(), 5.0).is_none());
    }

    #[test]
    fn pseudonym_bytes_look_uniform() {
        let mut ltca = Ltca::default();
        let mut pca = Pca::new(1234, 10, 1e-3);
        let mut counts = [0u64; 256];
        for v in 0..200 {
            ltca.register_vehicle(v);
            for c in pca.issue_pseudonyms(&ltca, v, 10, (0.0, 1.0)).unwrap() {
                for b in c.id.0 {
                    counts[b as usize] += 1;
                }
            }
        }
        let n: u64 = counts.iter().sum();
        let e = n as f64 / 256.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
        // 255 dof, p = 0.001 critical value ≈ 330.5
        assert!(chi2 < 330.5, "chi2 {chi2}");
    }
}
