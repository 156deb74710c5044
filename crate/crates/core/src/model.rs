//! Shared domain vocabulary: entities, credentials, beacons and the simulated
//! signing/encryption envelopes every other module exchanges.
//!
//! Cryptography is simulated. A signature is a recomputable SHA-256 digest of
//! the payload and the signer's credential id, and encryption is key-gated
//! access to the plaintext. What matters for the privacy analysis is who can
//! read and attribute which message; cipher cost shows up only in the overhead
//! model of [`crate::metrics`].

use std::fmt;
use std::ops::{Add, Mul, Sub};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Default wire size of a pseudonym or chaff pseudonym, in bytes.
pub const CREDENTIAL_WIRE_SIZE: u32 = 140;
/// Default wire size of a CAM, in bytes.
pub const CAM_WIRE_SIZE: u32 = 350;
/// Fixed framing overhead added by an [`EncryptedEnvelope`], in bytes.
pub const ENCRYPTION_OVERHEAD: u32 = 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("credential validity window is empty: [{from}, {to})")]
    EmptyValidity { from: f64, to: f64 },
    #[error("wire size must be positive")]
    ZeroWireSize,
    #[error("chaff pseudonyms are created unassigned")]
    ChaffWithHolder,
    #[error("vehicle length {0} m is not a positive multiple of 0.1 m")]
    BadLength(f64),
    #[error("invalid credential id {0:?}")]
    BadCredentialId(String),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CryptoError {
    #[error("credential {0} is not valid at the signing time")]
    SigningWithExpiredCredential(CredentialId),
    #[error("caller does not hold the key for this envelope")]
    DecryptionDenied,
}

/// A simulated participant. Ordering is total, which keeps event logs and
/// every per-entity map deterministic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "id")]
pub enum Entity {
    Pca,
    Ltca,
    Rsu(u32),
    Vehicle(u32),
}

impl fmt::Display for Entity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Entity::Pca => write!(f, "pca"),
            Entity::Ltca => write!(f, "ltca"),
            Entity::Rsu(i) => write!(f, "rsu{i}"),
            Entity::Vehicle(i) => write!(f, "v{i}"),
        }
    }
}

/// Opaque 16-byte credential identifier, printed as lowercase hex.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct CredentialId(pub [u8; 16]);

impl CredentialId {
    pub fn as_u128(&self) -> u128 {
        u128::from_le_bytes(self.0)
    }

    pub fn from_u128(v: u128) -> Self {
        CredentialId(v.to_le_bytes())
    }
}

impl fmt::Display for CredentialId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in self.0 {
            write!(f, "{b:02x}")?;
        }
        Ok(())
    }
}

impl fmt::Debug for CredentialId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Cred({self})")
    }
}

impl FromStr for CredentialId {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ModelError::BadCredentialId(s.to_string());
        if s.len() != 32 || !s.is_ascii() {
            return Err(bad());
        }
        let mut out = [0u8; 16];
        for (i, chunk) in s.as_bytes().chunks(2).enumerate() {
            let hex = std::str::from_utf8(chunk).map_err(|_| bad())?;
            out[i] = u8::from_str_radix(hex, 16).map_err(|_| bad())?;
        }
        Ok(CredentialId(out))
    }
}

impl Serialize for CredentialId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for CredentialId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CredentialKind {
    Pseudonym,
    ChaffPseudonym,
    LongTermCert,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Holder {
    Entity(Entity),
    Unassigned,
}

/// A pseudonym, chaff pseudonym or long-term certificate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Credential {
    pub id: CredentialId,
    pub kind: CredentialKind,
    pub issuer: Entity,
    pub holder: Holder,
    pub valid_from: f64,
    pub valid_to: f64,
    pub wire_size: u32,
}

impl Credential {
    pub fn new(
        id: CredentialId,
        kind: CredentialKind,
        issuer: Entity,
        holder: Holder,
        valid_from: f64,
        valid_to: f64,
    ) -> Result<Self, ModelError> {
        if !(valid_from < valid_to) {
            return Err(ModelError::EmptyValidity {
                from: valid_from,
                to: valid_to,
            });
        }
        if kind == CredentialKind::ChaffPseudonym && holder != Holder::Unassigned {
            return Err(ModelError::ChaffWithHolder);
        }
        Ok(Credential {
            id,
            kind,
            issuer,
            holder,
            valid_from,
            valid_to,
            wire_size: CREDENTIAL_WIRE_SIZE,
        })
    }

    pub fn with_wire_size(mut self, bytes: u32) -> Result<Self, ModelError> {
        if bytes == 0 {
            return Err(ModelError::ZeroWireSize);
        }
        self.wire_size = bytes;
        Ok(self)
    }

    /// Half-open validity: `valid_from <= now < valid_to`.
    pub fn is_valid_at(&self, now: f64) -> bool {
        self.valid_from <= now && now < self.valid_to
    }
}

/// Planar position in meters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn dist(self, other: Point) -> f64 {
        (self - other).norm()
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn dot(self, other: Point) -> f64 {
        self.x * other.x + self.y * other.y
    }

    /// Unit vector for a heading in radians (0 = +x, counter-clockwise).
    pub fn from_heading(heading: f64) -> Point {
        Point::new(heading.cos(), heading.sin())
    }

    pub fn heading(self) -> f64 {
        self.y.atan2(self.x)
    }
}

impl Add for Point {
    type Output = Point;
    fn add(self, o: Point) -> Point {
        Point::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Point {
    type Output = Point;
    fn sub(self, o: Point) -> Point {
        Point::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Point {
    type Output = Point;
    fn mul(self, k: f64) -> Point {
        Point::new(self.x * k, self.y * k)
    }
}

/// Position plus heading, the part of a beacon geometry queries need.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose {
    pub pos: Point,
    pub heading: f64,
}

impl Pose {
    pub const fn new(pos: Point, heading: f64) -> Self {
        Pose { pos, heading }
    }
}

/// Vehicle length with 0.1 m precision, stored in decimeters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct VehicleLength(u16);

impl VehicleLength {
    pub fn from_decimeters(dm: u16) -> Result<Self, ModelError> {
        if dm == 0 {
            return Err(ModelError::BadLength(0.0));
        }
        Ok(VehicleLength(dm))
    }

    /// Accepts meters that are a multiple of 0.1 m (within float noise).
    pub fn from_meters(m: f64) -> Result<Self, ModelError> {
        let dm = (m * 10.0).round();
        if !(m > 0.0) || (m * 10.0 - dm).abs() > 1e-6 || dm > u16::MAX as f64 {
            return Err(ModelError::BadLength(m));
        }
        Ok(VehicleLength(dm as u16))
    }

    pub fn decimeters(self) -> u16 {
        self.0
    }

    pub fn meters(self) -> f64 {
        self.0 as f64 / 10.0
    }
}

/// Opaque link-layer identifier (MAC-like), rotated with pseudonyms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LinkId(pub u64);

/// One CAM as emitted, including simulation-only ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Beacon {
    pub pseudonym_id: CredentialId,
    pub pos: Point,
    pub speed: f64,
    pub heading: f64,
    pub length: VehicleLength,
    pub timestamp: f64,
    pub link_id: LinkId,
    /// Ground truth, never exposed to the adversary.
    pub emitter: Entity,
    /// Ground truth, never exposed to the adversary.
    pub is_chaff: bool,
    pub wire_size: u32,
}

impl Beacon {
    pub fn adversary_view(&self) -> AdversaryBeacon {
        AdversaryBeacon {
            pseudonym_id: self.pseudonym_id,
            pos: self.pos,
            speed: self.speed,
            heading: self.heading,
            length: self.length,
            timestamp: self.timestamp,
            link_id: self.link_id,
        }
    }
}

/// What an eavesdropper can read from a plaintext beacon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdversaryBeacon {
    pub pseudonym_id: CredentialId,
    pub pos: Point,
    pub speed: f64,
    pub heading: f64,
    pub length: VehicleLength,
    pub timestamp: f64,
    pub link_id: LinkId,
}

impl AdversaryBeacon {
    pub fn pose(&self) -> Pose {
        Pose::new(self.pos, self.heading)
    }

    pub const ENCODED_LEN: usize = 16 + 8 * 6 + 8;

    /// Canonical little-endian encoding: id, x, y, speed, heading, length
    /// (meters), timestamp, link id.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(Self::ENCODED_LEN);
        out.extend_from_slice(&self.pseudonym_id.0);
        for v in [
            self.pos.x,
            self.pos.y,
            self.speed,
            self.heading,
            self.length.meters(),
            self.timestamp,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.link_id.0.to_le_bytes());
        out
    }
}

/// Key handle for [`EncryptedEnvelope`]s.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum KeyId {
    /// Public key bound to a pseudonym or certificate.
    Credential(CredentialId),
    /// Symmetric session key, e.g. a mix-zone key.
    Symmetric(u64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignedEnvelope {
    pub payload: Vec<u8>,
    pub signer: CredentialId,
    pub signature_tag: [u8; 32],
}

impl SignedEnvelope {
    /// Payload plus the attached signer credential.
    pub fn wire_size(&self, signer: &Credential) -> u32 {
        self.payload.len() as u32 + signer.wire_size
    }
}

fn signature_tag(payload: &[u8], signer: CredentialId) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"decoymix-sig");
    h.update(signer.0);
    h.update((payload.len() as u64).to_le_bytes());
    h.update(payload);
    h.finalize().into()
}

pub fn sign(payload: &[u8], signer: &Credential, now: f64) -> Result<SignedEnvelope, CryptoError> {
    if !signer.is_valid_at(now) {
        return Err(CryptoError::SigningWithExpiredCredential(signer.id));
    }
    Ok(SignedEnvelope {
        payload: payload.to_vec(),
        signer: signer.id,
        signature_tag: signature_tag(payload, signer.id),
    })
}

/// True iff the envelope names `signer`, the tag recomputes, and the
/// credential is valid at `now`.
pub fn verify(env: &SignedEnvelope, signer: &Credential, now: f64) -> bool {
    env.signer == signer.id
        && signer.is_valid_at(now)
        && env.signature_tag == signature_tag(&env.payload, signer.id)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncryptedEnvelope {
    pub recipient: KeyId,
    plaintext: Vec<u8>,
}

pub fn encrypt(payload: &[u8], recipient: KeyId) -> EncryptedEnvelope {
    EncryptedEnvelope {
        recipient,
        plaintext: payload.to_vec(),
    }
}

impl EncryptedEnvelope {
    pub fn open(&self, key: KeyId) -> Result<Vec<u8>, CryptoError> {
        if key != self.recipient {
            return Err(CryptoError::DecryptionDenied);
        }
        Ok(self.plaintext.clone())
    }

    pub fn wire_size(&self) -> u32 {
        self.plaintext.len() as u32 + ENCRYPTION_OVERHEAD
    }
}

/// Simulation clock resolution: every event time is a multiple of 0.1 s.
pub const TICKS_PER_SECOND: u64 = 10;

pub fn ticks_to_secs(t: u64) -> f64 {
    t as f64 / TICKS_PER_SECOND as f64
}

/// Rounds seconds to the nearest tick.
pub fn secs_to_ticks(s: f64) -> u64 {
    (s * TICKS_PER_SECOND as f64).round().max(0.0) as u64
}
