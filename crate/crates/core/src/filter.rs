//! Deletable chaff filter and its two sizing models.
//!
//! [`ChaffFilter`] is a cuckoo filter: each credential id maps to a short
//! fingerprint stored in one of two candidate buckets, so ids can be removed
//! again when a relay retires its chaff pseudonym. Published filter *sizes*
//! follow the classical single-bit-array formula instead
//! ([`paper_size_model`]), which is what the reported numbers were produced
//! with; [`FilterSizing`] lets overhead accounting pick either model.
//!
//! ```
//! use decoymix::filter::ChaffFilter;
//! use decoymix::model::CredentialId;
//!
//! let mut f = ChaffFilter::new(1000, 1e-3).unwrap();
//! let id = CredentialId([7; 16]);
//! f.insert(id).unwrap();
//! assert!(f.contains(id));
//! f.remove(id).unwrap();
//! assert!(!f.contains(id));
//! ```

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::CredentialId;

pub const DEFAULT_BUCKET_CAPACITY: usize = 4;
pub const LOAD_FACTOR: f64 = 0.95;
pub const MAX_KICKS: usize = 500;
pub const HEADER_LEN: usize = 16;
const MAGIC: [u8; 2] = *b"CF";
const VERSION: u8 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FilterError {
    #[error("filter is saturated: relocation chain exceeded {MAX_KICKS} kicks")]
    FilterSaturated,
    #[error("fingerprint not present in filter")]
    RemoveAbsent,
    #[error("malformed filter bytes: {0}")]
    DeserializeError(String),
    #[error("invalid filter parameters: capacity {n}, false positive rate {p}")]
    InvalidParameters { n: usize, p: f64 },
}

/// Classical single-bit-array size in bytes: `ceil(n ln(1/p) / ln²2 / 8)`.
///
/// This reproduces the published chaff-filter sizes (for instance 1000 ids
/// at 1e-25 give 14,977 bytes, 14.63 KiB).
pub fn paper_size_model(n: u64, p: f64) -> u64 {
    assert!(p > 0.0 && p < 1.0, "false positive rate must lie in (0, 1)");
    let ln2 = std::f64::consts::LN_2;
    let bits = n as f64 * (1.0 / p).ln() / (ln2 * ln2);
    (bits / 8.0).ceil() as u64
}

/// Bytes expressed in KiB, the unit the filter-size tables use.
pub fn kib(bytes: u64) -> f64 {
    bytes as f64 / 1024.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HashAlg {
    Sha1,
    Sha224,
    Sha256,
    Sha384,
    Sha512,
}

impl HashAlg {
    pub fn digest_len(self) -> u64 {
        match self {
            HashAlg::Sha1 => 20,
            HashAlg::Sha224 => 28,
            HashAlg::Sha256 => 32,
            HashAlg::Sha384 => 48,
            HashAlg::Sha512 => 64,
        }
    }
}

/// Size of the naive alternative: a plain list of `n` digests.
pub fn digest_list_size(n: u64, hash: HashAlg) -> u64 {
    n * hash.digest_len()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SizingModel {
    #[default]
    PaperReported,
    Deletable,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterSizing {
    pub n: u64,
    pub p: f64,
    pub model: SizingModel,
    pub size_bytes: u64,
}

impl FilterSizing {
    pub fn compute(n: u64, p: f64, model: SizingModel) -> Result<Self, FilterError> {
        let size_bytes = match model {
            SizingModel::PaperReported => {
                if n == 0 || !(p > 0.0 && p < 1.0) {
                    return Err(FilterError::InvalidParameters { n: n as usize, p });
                }
                paper_size_model(n, p)
            }
            SizingModel::Deletable => {
                let (bits, buckets) = Layout::for_capacity(n as usize, p, DEFAULT_BUCKET_CAPACITY)?;
                serialized_len(bits, buckets, DEFAULT_BUCKET_CAPACITY) as u64
            }
        };
        Ok(FilterSizing {
            n,
            p,
            model,
            size_bytes,
        })
    }
}

fn serialized_len(bits: u32, bucket_count: usize, cap: usize) -> usize {
    HEADER_LEN + (bucket_count * cap * bits as usize).div_ceil(8)
}

struct Layout;

impl Layout {
    /// `(fingerprint_bits, bucket_count)` for a target capacity and rate.
    fn for_capacity(n: usize, p: f64, cap: usize) -> Result<(u32, usize), FilterError> {
        if n == 0 || !(p > 0.0 && p < 1.0) || cap == 0 || cap > u8::MAX as usize {
            return Err(FilterError::InvalidParameters { n, p });
        }
        let bits = ((1.0 / p).log2() + ((2 * cap) as f64).log2()).ceil();
        if bits > 128.0 {
            return Err(FilterError::InvalidParameters { n, p });
        }
        let min_buckets = (n as f64 / (LOAD_FACTOR * cap as f64)).ceil().max(1.0) as usize;
        Ok((bits as u32, min_buckets.next_power_of_two()))
    }
}

// splitmix64 finalizer
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn hash_id(id: CredentialId, seed: u64) -> u64 {
    let v = id.as_u128();
    mix64(mix64((v as u64) ^ seed) ^ ((v >> 64) as u64))
}

/// Cuckoo filter over credential-id fingerprints.
///
/// Slots hold fingerprints of up to 128 bits; zero marks an empty slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChaffFilter {
    slots: Vec<u128>,
    bucket_capacity: usize,
    fingerprint_bits: u32,
    item_count: usize,
    pub epoch: u16,
}

impl ChaffFilter {
    pub fn new(n_capacity: usize, p: f64) -> Result<Self, FilterError> {
        Self::with_bucket_capacity(n_capacity, p, DEFAULT_BUCKET_CAPACITY)
    }

    pub fn with_bucket_capacity(n_capacity: usize, p: f64, cap: usize) -> Result<Self, FilterError> {
        let (bits, buckets) = Layout::for_capacity(n_capacity, p, cap)?;
        Ok(ChaffFilter {
            slots: vec![0; buckets * cap],
            bucket_capacity: cap,
            fingerprint_bits: bits,
            item_count: 0,
            epoch: 0,
        })
    }

    pub fn fingerprint_bits(&self) -> u32 {
        self.fingerprint_bits
    }

    pub fn bucket_capacity(&self) -> usize {
        self.bucket_capacity
    }

    pub fn bucket_count(&self) -> usize {
        self.slots.len() / self.bucket_capacity
    }

    pub fn len(&self) -> usize {
        self.item_count
    }

    pub fn is_empty(&self) -> bool {
        self.item_count == 0
    }

    /// Upper bound on the false positive rate at full load, `2b / 2^f`.
    pub fn target_fpr(&self) -> f64 {
        2.0 * self.bucket_capacity as f64 / 2f64.powi(self.fingerprint_bits as i32)
    }

    fn mask(&self) -> usize {
        self.bucket_count() - 1
    }

    fn fingerprint(&self, id: CredentialId) -> u128 {
        let wide = ((hash_id(id, 0x5eed_f1a9) as u128) << 64) | hash_id(id, 0x0dd_b17e) as u128;
        let fp = if self.fingerprint_bits == 128 {
            wide
        } else {
            wide & ((1u128 << self.fingerprint_bits) - 1)
        };
        if fp == 0 {
            1
        } else {
            fp
        }
    }

    fn index(&self, id: CredentialId) -> usize {
        hash_id(id, 0x1de_c0de) as usize & self.mask()
    }

    fn alt_index(&self, i: usize, fp: u128) -> usize {
        let h = mix64((fp as u64) ^ ((fp >> 64) as u64).rotate_left(17));
        (i ^ h as usize) & self.mask()
    }

    fn bucket(&self, i: usize) -> &[u128] {
        &self.slots[i * self.bucket_capacity..(i + 1) * self.bucket_capacity]
    }

    fn bucket_mut(&mut self, i: usize) -> &mut [u128] {
        let cap = self.bucket_capacity;
        &mut self.slots[i * cap..(i + 1) * cap]
    }

    fn try_place(&mut self, i: usize, fp: u128) -> bool {
        match self.bucket_mut(i).iter_mut().find(|s| **s == 0) {
            Some(slot) => {
                *slot = fp;
                true
            }
            None => false,
        }
    }

    pub fn contains(&self, id: CredentialId) -> bool {
        let fp = self.fingerprint(id);
        let i1 = self.index(id);
        let i2 = self.alt_index(i1, fp);
        self.bucket(i1).contains(&fp) || self.bucket(i2).contains(&fp)
    }

    /// Inserts `id`. On [`FilterError::FilterSaturated`] the filter is left
    /// exactly as it was before the call.
    pub fn insert(&mut self, id: CredentialId) -> Result<(), FilterError> {
        let fp = self.fingerprint(id);
        let i1 = self.index(id);
        let i2 = self.alt_index(i1, fp);
        if self.try_place(i1, fp) || self.try_place(i2, fp) {
            self.item_count += 1;
            return Ok(());
        }

        let cap = self.bucket_capacity;
        let mut undo: Vec<(usize, u128)> = Vec::new();
        let mut i = if fp & 1 == 0 { i1 } else { i2 };
        let mut carried = fp;
        for kick in 0..MAX_KICKS {
            let slot = i * cap + ((kick as u128 + carried) % cap as u128) as usize;
            undo.push((slot, self.slots[slot]));
            std::mem::swap(&mut self.slots[slot], &mut carried);
            i = self.alt_index(i, carried);
            if self.try_place(i, carried) {
                self.item_count += 1;
                return Ok(());
            }
        }
        for (slot, old) in undo.into_iter().rev() {
            self.slots[slot] = old;
        }
        Err(FilterError::FilterSaturated)
    }

    pub fn remove(&mut self, id: CredentialId) -> Result<(), FilterError> {
        let fp = self.fingerprint(id);
        let i1 = self.index(id);
        let i2 = self.alt_index(i1, fp);
        for i in [i1, i2] {
            if let Some(slot) = self.bucket_mut(i).iter_mut().find(|s| **s == fp) {
                *slot = 0;
                self.item_count -= 1;
                return Ok(());
            }
        }
        Err(FilterError::RemoveAbsent)
    }

    pub fn serialized_len(&self) -> usize {
        serialized_len(self.fingerprint_bits, self.bucket_count(), self.bucket_capacity)
    }

    /// Header (magic, version, fingerprint bits, bucket capacity, reserved,
    /// bucket count, item count, epoch) then bit-packed little-endian slots.
    pub fn serialize(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.serialized_len());
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.push(self.fingerprint_bits as u8);
        out.push(self.bucket_capacity as u8);
        out.push(0);
        out.extend_from_slice(&(self.bucket_count() as u32).to_le_bytes());
        out.extend_from_slice(&(self.item_count as u32).to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        let mut bits = BitWriter::default();
        for &s in &self.slots {
            bits.push(s, self.fingerprint_bits);
        }
        out.extend(bits.finish());
        out
    }

    pub fn deserialize(bytes: &[u8]) -> Result<Self, FilterError> {
        let bad = |m: &str| FilterError::DeserializeError(m.to_string());
        if bytes.len() < HEADER_LEN {
            return Err(bad("truncated header"));
        }
        if bytes[0..2] != MAGIC {
            return Err(bad("bad magic"));
        }
        if bytes[2] != VERSION {
            return Err(bad("unsupported version"));
        }
        let fp_bits = bytes[3] as u32;
        let cap = bytes[4] as usize;
        let bucket_count = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let item_count = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
        let epoch = u16::from_le_bytes(bytes[14..16].try_into().unwrap());
        if !(1..=128).contains(&fp_bits) || cap == 0 {
            return Err(bad("bad fingerprint width or bucket capacity"));
        }
        if bucket_count == 0 || !bucket_count.is_power_of_two() {
            return Err(bad("bucket count is not a power of two"));
        }
        let n_slots = bucket_count
            .checked_mul(cap)
            .filter(|n| *n <= (bytes.len() - HEADER_LEN) * 8)
            .ok_or_else(|| bad("length mismatch"))?;
        if bytes.len() != serialized_len(fp_bits, bucket_count, cap) {
            return Err(bad("length mismatch"));
        }
        let mut reader = BitReader::new(&bytes[HEADER_LEN..]);
        let slots: Vec<u128> = (0..n_slots).map(|_| reader.pull(fp_bits)).collect();
        if slots.iter().filter(|s| **s != 0).count() != item_count {
            return Err(bad("item count does not match occupied slots"));
        }
        if reader.trailing_nonzero() {
            return Err(bad("nonzero padding"));
        }
        Ok(ChaffFilter {
            slots,
            bucket_capacity: cap,
            fingerprint_bits: fp_bits,
            item_count,
            epoch,
        })
    }
}

#[derive(Default)]
struct BitWriter {
    out: Vec<u8>,
    used: u32,
}

impl BitWriter {
    fn push(&mut self, value: u128, bits: u32) {
        for b in 0..bits {
            if self.used % 8 == 0 {
                self.out.push(0);
            }
            if (value >> b) & 1 == 1 {
                *self.out.last_mut().unwrap() |= 1 << (self.used % 8);
            }
            self.used += 1;
        }
    }

    fn finish(self) -> Vec<u8> {
        self.out
    }
}

struct BitReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> BitReader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        BitReader { bytes, pos: 0 }
    }

    fn pull(&mut self, bits: u32) -> u128 {
        let mut v = 0u128;
        for b in 0..bits {
            let bit = (self.bytes[self.pos / 8] >> (self.pos % 8)) & 1;
            v |= (bit as u128) << b;
            self.pos += 1;
        }
        v
    }

    fn trailing_nonzero(&self) -> bool {
        (self.pos..self.bytes.len() * 8).any(|p| (self.bytes[p / 8] >> (p % 8)) & 1 == 1)
    }
}
