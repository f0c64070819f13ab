//! LSN vectors: one byte offset per log stream, ordered element-wise.
//!
//! An [`LsnVector`] summarizes how far into every log a transaction's
//! dependencies reach. Joining two vectors ([`LsnVector::join`]) takes the
//! element-wise maximum; [`LsnVector::leq`] is the element-wise partial order.
//!
//! Log records do not store full vectors. A record's vector is compressed
//! against the most recent anchor vector written into the same log: every
//! dimension that the anchor already covers is dropped and restored from the
//! anchor on decode, which can only raise (never lower) a dimension.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

/// Upper bound on the number of log streams; the presence mask is one word.
pub const MAX_DIMS: usize = 64;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LvError {
    #[error("compressed LV references dimension {dim} but only {dims} logs exist")]
    DimensionOutOfRange { dim: usize, dims: usize },
    #[error("compressed LV count {count} does not match mask popcount {popcount}")]
    CountMismatch { count: u8, popcount: u32 },
    #[error("compressed LV truncated: need {need} bytes, have {have}")]
    Truncated { need: usize, have: usize },
}

/// Fixed-length vector of per-log byte offsets.
#[derive(Clone, PartialEq, Eq, Hash, Default)]
pub struct LsnVector(Box<[u64]>);

impl LsnVector {
    pub fn zeros(dims: usize) -> Self {
        assert!(dims <= MAX_DIMS, "at most {MAX_DIMS} log streams are supported");
        LsnVector(vec![0; dims].into_boxed_slice())
    }

    pub fn from_slice(elems: &[u64]) -> Self {
        assert!(elems.len() <= MAX_DIMS, "at most {MAX_DIMS} log streams are supported");
        LsnVector(elems.into())
    }

    #[inline]
    pub fn dims(&self) -> usize {
        self.0.len()
    }

    #[inline]
    pub fn as_slice(&self) -> &[u64] {
        &self.0
    }

    #[inline]
    pub fn get(&self, dim: usize) -> u64 {
        self.0[dim]
    }

    #[inline]
    pub fn set(&mut self, dim: usize, value: u64) {
        self.0[dim] = value;
    }

    /// Element-wise maximum of `self` and `other`.
    pub fn join(&self, other: &LsnVector) -> LsnVector {
        let mut out = self.clone();
        out.join_assign(other);
        out
    }

    #[inline]
    pub fn join_assign(&mut self, other: &LsnVector) {
        self.join_slice(other.as_slice());
    }

    #[inline]
    pub fn join_slice(&mut self, other: &[u64]) {
        assert_eq!(self.0.len(), other.len(), "LSN vector dimension mismatch");
        for (a, b) in self.0.iter_mut().zip(other) {
            if *b > *a {
                *a = *b;
            }
        }
    }

    /// `true` iff every element of `self` is at most the matching element of `other`.
    #[inline]
    pub fn leq(&self, other: &LsnVector) -> bool {
        self.leq_slice(other.as_slice())
    }

    #[inline]
    pub fn leq_slice(&self, other: &[u64]) -> bool {
        assert_eq!(self.0.len(), other.len(), "LSN vector dimension mismatch");
        self.0.iter().zip(other).all(|(a, b)| a <= b)
    }

    /// Drops every dimension already covered by `anchor`.
    pub fn compress(&self, anchor: &LsnVector) -> CompressedLv {
        assert_eq!(self.dims(), anchor.dims(), "LSN vector dimension mismatch");
        let mut mask = 0u64;
        let mut values = Vec::new();
        for (dim, (&v, &a)) in self.0.iter().zip(anchor.0.iter()).enumerate() {
            if v > a {
                mask |= 1 << dim;
                values.push(v);
            }
        }
        CompressedLv { mask, values }
    }
}

impl fmt::Debug for LsnVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.0.iter()).finish()
    }
}

impl From<Vec<u64>> for LsnVector {
    fn from(v: Vec<u64>) -> Self {
        assert!(v.len() <= MAX_DIMS, "at most {MAX_DIMS} log streams are supported");
        LsnVector(v.into_boxed_slice())
    }
}

/// A record's LV with the anchor-covered dimensions removed.
///
/// Wire layout (little-endian): `count: u8`, `mask: u64`, then `count`
/// offsets of 8 bytes each in ascending dimension order.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct CompressedLv {
    mask: u64,
    values: Vec<u64>,
}

impl CompressedLv {
    pub const HEADER_LEN: usize = 9;

    pub fn mask(&self) -> u64 {
        self.mask
    }

    pub fn is_present(&self, dim: usize) -> bool {
        dim < MAX_DIMS && self.mask & (1 << dim) != 0
    }

    pub fn count(&self) -> usize {
        self.values.len()
    }

    /// `(dimension, offset)` pairs in ascending dimension order.
    pub fn entries(&self) -> impl Iterator<Item = (usize, u64)> + '_ {
        let mut mask = self.mask;
        self.values.iter().map(move |&v| {
            let dim = mask.trailing_zeros() as usize;
            mask &= mask - 1;
            (dim, v)
        })
    }

    pub fn encoded_len(&self) -> usize {
        Self::HEADER_LEN + 8 * self.values.len()
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) {
        out.push(self.values.len() as u8);
        out.extend_from_slice(&self.mask.to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    /// Parses one compressed LV from the front of `bytes`, returning it and
    /// the number of bytes consumed.
    pub fn decode(bytes: &[u8]) -> Result<(CompressedLv, usize), LvError> {
        if bytes.len() < Self::HEADER_LEN {
            return Err(LvError::Truncated { need: Self::HEADER_LEN, have: bytes.len() });
        }
        let count = bytes[0];
        let mask = u64::from_le_bytes(bytes[1..9].try_into().unwrap());
        if mask.count_ones() != count as u32 {
            return Err(LvError::CountMismatch { count, popcount: mask.count_ones() });
        }
        let need = Self::HEADER_LEN + 8 * count as usize;
        if bytes.len() < need {
            return Err(LvError::Truncated { need, have: bytes.len() });
        }
        let values = bytes[Self::HEADER_LEN..need]
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((CompressedLv { mask, values }, need))
    }

    /// Rebuilds a full vector, filling absent dimensions from `anchor`.
    pub fn decompress(&self, anchor: &LsnVector) -> Result<LsnVector, LvError> {
        let dims = anchor.dims();
        if dims < MAX_DIMS && self.mask >> dims != 0 {
            let dim = 63 - self.mask.leading_zeros() as usize;
            return Err(LvError::DimensionOutOfRange { dim, dims });
        }
        let mut out = anchor.clone();
        for (dim, v) in self.entries() {
            out.set(dim, v);
        }
        Ok(out)
    }
}

/// A vector of independently updatable atomic slots.
///
/// Used for the global persistent/committed/recovered vectors and for tuple
/// read vectors, where concurrent readers advance single dimensions.
pub struct AtomicLsnVector(Box<[AtomicU64]>);

impl AtomicLsnVector {
    pub fn zeros(dims: usize) -> Self {
        AtomicLsnVector((0..dims).map(|_| AtomicU64::new(0)).collect())
    }

    pub fn from_lv(lv: &LsnVector) -> Self {
        AtomicLsnVector(lv.as_slice().iter().map(|&v| AtomicU64::new(v)).collect())
    }

    #[inline]
    pub fn dims(&self) -> usize {
        self.0.len()
    }

    #[inline]
    pub fn get(&self, dim: usize) -> u64 {
        self.0[dim].load(Ordering::Acquire)
    }

    #[inline]
    pub fn store(&self, dim: usize, value: u64) {
        self.0[dim].store(value, Ordering::Release);
    }

    /// Per-slot snapshot. Slots are read one at a time, so the result is only
    /// a consistent cut when every slot is monotone.
    pub fn snapshot(&self) -> LsnVector {
        LsnVector(self.0.iter().map(|a| a.load(Ordering::Acquire)).collect())
    }

    pub fn snapshot_into(&self, out: &mut LsnVector) {
        assert_eq!(out.dims(), self.dims(), "LSN vector dimension mismatch");
        for (o, a) in out.0.iter_mut().zip(self.0.iter()) {
            *o = a.load(Ordering::Acquire);
        }
    }

    /// Raises slot `dim` to `value` with a compare-and-exchange loop.
    /// Returns `true` if this call changed the slot.
    pub fn advance(&self, dim: usize, value: u64) -> bool {
        let slot = &self.0[dim];
        let mut cur = slot.load(Ordering::Acquire);
        while cur < value {
            match slot.compare_exchange_weak(cur, value, Ordering::AcqRel, Ordering::Acquire) {
                Ok(_) => return true,
                Err(seen) => cur = seen,
            }
        }
        false
    }

    pub fn join(&self, lv: &LsnVector) {
        assert_eq!(self.dims(), lv.dims(), "LSN vector dimension mismatch");
        for (dim, &v) in lv.as_slice().iter().enumerate() {
            self.advance(dim, v);
        }
    }

    /// `true` iff `lv <= self` on every slot.
    pub fn dominates(&self, lv: &LsnVector) -> bool {
        assert_eq!(self.dims(), lv.dims(), "LSN vector dimension mismatch");
        lv.as_slice()
            .iter()
            .zip(self.0.iter())
            .all(|(&v, a)| v <= a.load(Ordering::Acquire))
    }
}

impl fmt::Debug for AtomicLsnVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.snapshot().fmt(f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lv(v: &[u64]) -> LsnVector {
        LsnVector::from_slice(v)
    }

    #[test]
    fn join_examples() {
        // write-lock of a tuple joins both its write and read vectors
        let txn = lv(&[0, 0]).join(&lv(&[4, 2])).join(&lv(&[3, 7]));
        assert_eq!(txn, lv(&[4, 7]));
        assert_eq!(lv(&[8, 6]).join(&lv(&[4, 7])), lv(&[8, 7]));
        let v = lv(&[3, 9, 1]);
        assert_eq!(v.join(&v), v);
    }

    #[test]
    fn leq_examples() {
        assert!(lv(&[16, 7]).leq(&lv(&[16, 7])));
        assert!(lv(&[16, 7]).leq(&lv(&[16, 21])));
        assert!(!lv(&[4, 45, 1, 2]).leq(&lv(&[7, 16, 2, 4])));
    }

    #[test]
    #[should_panic(expected = "dimension mismatch")]
    fn join_length_mismatch_panics() {
        lv(&[1, 2]).join(&lv(&[1, 2, 3]));
    }

    #[test]
    #[should_panic(expected = "dimension mismatch")]
    fn leq_length_mismatch_panics() {
        lv(&[1]).leq(&lv(&[1, 2]));
    }

    #[test]
    fn compress_keeps_only_dims_above_anchor() {
        let c = lv(&[4, 45, 1, 2]).compress(&lv(&[7, 16, 2, 4]));
        assert_eq!(c.mask(), 0b10);
        assert_eq!(c.entries().collect::<Vec<_>>(), vec![(1, 45)]);
        assert_eq!(c.decompress(&lv(&[7, 16, 2, 4])).unwrap(), lv(&[7, 45, 2, 4]));
    }

    #[test]
    fn compress_edge_cases() {
        let anchor = lv(&[10, 10, 10]);
        let dominated = lv(&[10, 3, 0]).compress(&anchor);
        assert_eq!(dominated.count(), 0);
        assert_eq!(dominated.decompress(&anchor).unwrap(), anchor);

        let fresh = lv(&[11, 12, 13]).compress(&anchor);
        assert_eq!(fresh.count(), 3);
        assert_eq!(fresh.decompress(&anchor).unwrap(), lv(&[11, 12, 13]));
    }

    #[test]
    fn decompress_rejects_dims_beyond_n() {
        let mut bytes = Vec::new();
        CompressedLv { mask: 1 << 5, values: vec![9] }.encode_into(&mut bytes);
        let (c, used) = CompressedLv::decode(&bytes).unwrap();
        assert_eq!(used, bytes.len());
        assert_eq!(
            c.decompress(&LsnVector::zeros(4)),
            Err(LvError::DimensionOutOfRange { dim: 5, dims: 4 })
        );
    }

    #[test]
    fn decode_rejects_bad_headers() {
        let mut bytes = vec![2u8];
        bytes.extend_from_slice(&1u64.to_le_bytes());
        assert!(matches!(CompressedLv::decode(&bytes), Err(LvError::CountMismatch { .. })));
        let mut bytes = vec![1u8];
        bytes.extend_from_slice(&1u64.to_le_bytes());
        bytes.extend_from_slice(&[0; 4]);
        assert!(matches!(CompressedLv::decode(&bytes), Err(LvError::Truncated { .. })));
    }

    #[test]
    fn wire_layout_is_count_mask_values() {
        let c = lv(&[4, 45, 1, 2]).compress(&lv(&[7, 16, 2, 4]));
        let mut bytes = Vec::new();
        c.encode_into(&mut bytes);
        let mut expected = vec![1u8];
        expected.extend_from_slice(&2u64.to_le_bytes());
        expected.extend_from_slice(&45u64.to_le_bytes());
        assert_eq!(bytes, expected);
        assert_eq!(c.encoded_len(), 17);
    }

    #[test]
    fn atomic_advance_is_lossless_under_contention() {
        let slots = std::sync::Arc::new(AtomicLsnVector::zeros(1));
        let handles: Vec<_> = (0..8u64)
            .map(|t| {
                let slots = slots.clone();
                std::thread::spawn(move || {
                    for i in 0..2000u64 {
                        slots.advance(0, (i * 8 + t) % 15_991);
                    }
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        let expected = (0..8u64)
            .flat_map(|t| (0..2000u64).map(move |i| (i * 8 + t) % 15_991))
            .max()
            .unwrap();
        assert_eq!(slots.get(0), expected);
    }

    fn arb_pair(dims: usize) -> impl Strategy<Value = (Vec<u64>, Vec<u64>)> {
        (
            proptest::collection::vec(0u64..64, dims),
            proptest::collection::vec(0u64..64, dims),
        )
    }

    proptest! {
        #[test]
        fn round_trip_matches_per_dimension_oracle((v, a) in (1usize..=8).prop_flat_map(arb_pair)) {
            let got = lv(&v).compress(&lv(&a)).decompress(&lv(&a)).unwrap();
            for j in 0..v.len() {
                let want = if v[j] > a[j] { v[j] } else { a[j] };
                prop_assert_eq!(got.get(j), want);
            }
            prop_assert!(lv(&v).leq(&got));
        }

        #[test]
        fn wire_round_trip((v, a) in (1usize..=64).prop_flat_map(arb_pair)) {
            let c = lv(&v).compress(&lv(&a));
            let mut bytes = Vec::new();
            c.encode_into(&mut bytes);
            prop_assert_eq!(bytes.len(), c.encoded_len());
            let (back, used) = CompressedLv::decode(&bytes).unwrap();
            prop_assert_eq!(used, bytes.len());
            prop_assert_eq!(back, c);
        }
    }
}
