//! On-disk log record framing.
//!
//! Every record is `kind u8 | body_len u32 | crc32 u32 | body`, little-endian,
//! with the checksum taken over the body. Transaction bodies start with a
//! compressed LSN vector; anchor bodies hold one full vector.

use thiserror::Error;

use crate::lsn_vector::{CompressedLv, LsnVector, LvError};
use crate::storage::TableId;

pub const FRAME_HEADER_LEN: usize = 9;
/// `len` marker for a deleted row in a data record.
const DELETE_MARKER: u32 = u32::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum RecordKind {
    Data = 1,
    Command = 2,
    Anchor = 3,
}

impl RecordKind {
    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            1 => Some(RecordKind::Data),
            2 => Some(RecordKind::Command),
            3 => Some(RecordKind::Anchor),
            _ => None,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FrameError {
    #[error("frame truncated: need {need} bytes, have {have}")]
    Truncated { need: usize, have: usize },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("unknown record kind {0}")]
    UnknownKind(u8),
    #[error("malformed record body: {0}")]
    Body(&'static str),
    #[error(transparent)]
    Lv(#[from] LvError),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum WriteOp {
    Put(Vec<u8>),
    Delete,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WriteImage {
    pub table: TableId,
    pub key: u64,
    pub op: WriteOp,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TxnBody {
    Data(Vec<WriteImage>),
    Command { proc_id: u32, params: Vec<u8> },
}

impl TxnBody {
    pub fn kind(&self) -> RecordKind {
        match self {
            TxnBody::Data(_) => RecordKind::Data,
            TxnBody::Command { .. } => RecordKind::Command,
        }
    }
}

fn frame(kind: RecordKind, out: &mut Vec<u8>, body: impl FnOnce(&mut Vec<u8>)) {
    let start = out.len();
    out.push(kind as u8);
    out.extend_from_slice(&[0; 8]);
    body(out);
    let body_len = (out.len() - start - FRAME_HEADER_LEN) as u32;
    let crc = crc32fast::hash(&out[start + FRAME_HEADER_LEN..]);
    out[start + 1..start + 5].copy_from_slice(&body_len.to_le_bytes());
    out[start + 5..start + 9].copy_from_slice(&crc.to_le_bytes());
}

pub fn encode_txn(lv: &CompressedLv, body: &TxnBody, out: &mut Vec<u8>) {
    frame(body.kind(), out, |out| {
        lv.encode_into(out);
        match body {
            TxnBody::Data(writes) => {
                out.extend_from_slice(&(writes.len() as u32).to_le_bytes());
                for w in writes {
                    out.extend_from_slice(&w.table.to_le_bytes());
                    out.extend_from_slice(&w.key.to_le_bytes());
                    match &w.op {
                        WriteOp::Put(bytes) => {
                            out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
                            out.extend_from_slice(bytes);
                        }
                        WriteOp::Delete => out.extend_from_slice(&DELETE_MARKER.to_le_bytes()),
                    }
                }
            }
            TxnBody::Command { proc_id, params } => {
                out.extend_from_slice(&proc_id.to_le_bytes());
                out.extend_from_slice(params);
            }
        }
    });
}

pub fn encode_anchor(v: &LsnVector, out: &mut Vec<u8>) {
    frame(RecordKind::Anchor, out, |out| {
        for &x in v.as_slice() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    });
}

/// A checksum-verified frame borrowed from a log buffer.
#[derive(Debug)]
pub struct Frame<'a> {
    pub kind: RecordKind,
    pub body: &'a [u8],
}

impl Frame<'_> {
    pub fn len(&self) -> usize {
        FRAME_HEADER_LEN + self.body.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

pub fn read_frame(buf: &[u8]) -> Result<Frame<'_>, FrameError> {
    if buf.len() < FRAME_HEADER_LEN {
        return Err(FrameError::Truncated { need: FRAME_HEADER_LEN, have: buf.len() });
    }
    let kind = RecordKind::from_byte(buf[0]).ok_or(FrameError::UnknownKind(buf[0]))?;
    let body_len = u32::from_le_bytes(buf[1..5].try_into().unwrap()) as usize;
    let stored = u32::from_le_bytes(buf[5..9].try_into().unwrap());
    let need = FRAME_HEADER_LEN + body_len;
    if buf.len() < need {
        return Err(FrameError::Truncated { need, have: buf.len() });
    }
    let body = &buf[FRAME_HEADER_LEN..need];
    let computed = crc32fast::hash(body);
    if computed != stored {
        return Err(FrameError::Checksum { stored, computed });
    }
    Ok(Frame { kind, body })
}

/// Length of the longest prefix of `buf` made of whole, valid frames.
pub fn intact_prefix_len(buf: &[u8]) -> usize {
    let mut pos = 0;
    while let Ok(f) = read_frame(&buf[pos..]) {
        pos += f.len();
    }
    pos
}

/// Splits a transaction body into its compressed vector and payload.
pub fn split_txn_body(body: &[u8]) -> Result<(CompressedLv, &[u8]), FrameError> {
    let (lv, used) = CompressedLv::decode(body)?;
    Ok((lv, &body[used..]))
}

struct Cursor<'a>(&'a [u8]);

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FrameError> {
        if self.0.len() < n {
            return Err(FrameError::Body("short payload"));
        }
        let (a, b) = self.0.split_at(n);
        self.0 = b;
        Ok(a)
    }

    fn u32(&mut self) -> Result<u32, FrameError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, FrameError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_payload(kind: RecordKind, payload: &[u8]) -> Result<TxnBody, FrameError> {
    let mut c = Cursor(payload);
    match kind {
        RecordKind::Data => {
            let count = c.u32()?;
            let mut writes = Vec::with_capacity(count.min(1 << 16) as usize);
            for _ in 0..count {
                let table = c.u32()?;
                let key = c.u64()?;
                let len = c.u32()?;
                let op = if len == DELETE_MARKER {
                    WriteOp::Delete
                } else {
                    WriteOp::Put(c.take(len as usize)?.to_vec())
                };
                writes.push(WriteImage { table, key, op });
            }
            if !c.0.is_empty() {
                return Err(FrameError::Body("trailing bytes after data record"));
            }
            Ok(TxnBody::Data(writes))
        }
        RecordKind::Command => {
            let proc_id = c.u32()?;
            Ok(TxnBody::Command { proc_id, params: c.0.to_vec() })
        }
        RecordKind::Anchor => Err(FrameError::Body("anchor has no transaction payload")),
    }
}

pub fn decode_anchor(body: &[u8], dims: usize) -> Result<LsnVector, FrameError> {
    if body.len() != dims * 8 {
        return Err(FrameError::Body("anchor length does not match log count"));
    }
    Ok(LsnVector::from(
        body.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect::<Vec<_>>(),
    ))
}

/// One decoded entry of a log.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LogEntry {
    Txn { start: u64, end: u64, lv: LsnVector, kind: RecordKind, payload_at: usize },
    Anchor { start: u64, end: u64, lv: LsnVector },
}

/// Walks the frames of one log below `limit`, decompressing each
/// transaction's vector against the latest preceding anchor.
pub struct LogReader<'a> {
    buf: &'a [u8],
    pos: usize,
    limit: usize,
    lplv: LsnVector,
}

impl<'a> LogReader<'a> {
    pub fn new(buf: &'a [u8], limit: usize, dims: usize) -> Self {
        LogReader { buf, pos: 0, limit: limit.min(buf.len()), lplv: LsnVector::zeros(dims) }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    /// Bytes of the transaction payload referenced by `payload_at`.
    pub fn payload(&self, entry_end: u64, payload_at: usize) -> &'a [u8] {
        &self.buf[payload_at..entry_end as usize]
    }

    pub fn next_entry(&mut self) -> Option<Result<LogEntry, FrameError>> {
        if self.pos >= self.limit {
            return None;
        }
        let frame = match read_frame(&self.buf[self.pos..self.limit]) {
            Ok(f) => f,
            Err(e) => return Some(Err(e)),
        };
        let start = self.pos as u64;
        let end = start + frame.len() as u64;
        let body_at = self.pos + FRAME_HEADER_LEN;
        self.pos = end as usize;
        Some(match frame.kind {
            RecordKind::Anchor => decode_anchor(frame.body, self.lplv.dims()).map(|lv| {
                self.lplv = lv.clone();
                LogEntry::Anchor { start, end, lv }
            }),
            kind => split_txn_body(frame.body).and_then(|(clv, payload)| {
                let lv = clv.decompress(&self.lplv)?;
                let payload_at = body_at + (frame.body.len() - payload.len());
                Ok(LogEntry::Txn { start, end, lv, kind, payload_at })
            }),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lv(v: &[u64]) -> LsnVector {
        LsnVector::from_slice(v)
    }

    fn sample_log() -> (Vec<u8>, Vec<usize>) {
        let mut buf = Vec::new();
        let mut ends = Vec::new();
        let anchor = lv(&[7, 16, 2, 4]);
        encode_txn(
            &lv(&[1, 2, 0, 0]).compress(&LsnVector::zeros(4)),
            &TxnBody::Data(vec![
                WriteImage { table: 1, key: 9, op: WriteOp::Put(b"hello".to_vec()) },
                WriteImage { table: 0, key: 3, op: WriteOp::Delete },
            ]),
            &mut buf,
        );
        ends.push(buf.len());
        encode_anchor(&anchor, &mut buf);
        ends.push(buf.len());
        encode_txn(
            &lv(&[4, 45, 1, 2]).compress(&anchor),
            &TxnBody::Command { proc_id: 5, params: vec![1, 2, 3] },
            &mut buf,
        );
        ends.push(buf.len());
        (buf, ends)
    }

    #[test]
    fn header_layout() {
        let mut buf = Vec::new();
        encode_anchor(&lv(&[1, 2]), &mut buf);
        assert_eq!(buf.len(), FRAME_HEADER_LEN + 16);
        assert_eq!(buf[0], 3);
        assert_eq!(u32::from_le_bytes(buf[1..5].try_into().unwrap()), 16);
        assert_eq!(u32::from_le_bytes(buf[5..9].try_into().unwrap()), crc32fast::hash(&buf[9..]));
        assert_eq!(&buf[9..17], &1u64.to_le_bytes());
    }

    #[test]
    fn reader_round_trip() {
        let (buf, ends) = sample_log();
        let mut r = LogReader::new(&buf, buf.len(), 4);
        let Some(Ok(LogEntry::Txn { start: 0, end, lv: v, kind: RecordKind::Data, payload_at })) = r.next_entry() else {
            panic!()
        };
        assert_eq!(end as usize, ends[0]);
        assert_eq!(v, lv(&[1, 2, 0, 0]));
        let body = decode_payload(RecordKind::Data, r.payload(end, payload_at)).unwrap();
        assert_eq!(
            body,
            TxnBody::Data(vec![
                WriteImage { table: 1, key: 9, op: WriteOp::Put(b"hello".to_vec()) },
                WriteImage { table: 0, key: 3, op: WriteOp::Delete },
            ])
        );
        assert!(matches!(r.next_entry(), Some(Ok(LogEntry::Anchor { .. }))));
        let Some(Ok(LogEntry::Txn { lv: v, end, payload_at, kind, .. })) = r.next_entry() else { panic!() };
        assert_eq!(v, lv(&[7, 45, 2, 4]));
        assert_eq!(
            decode_payload(kind, r.payload(end, payload_at)).unwrap(),
            TxnBody::Command { proc_id: 5, params: vec![1, 2, 3] }
        );
        assert!(r.next_entry().is_none());
    }

    #[test]
    fn intact_prefix_stops_at_torn_frame() {
        let (buf, ends) = sample_log();
        assert_eq!(intact_prefix_len(&buf), buf.len());
        for cut in 0..buf.len() {
            let expect = ends.iter().copied().filter(|&e| e <= cut).max().unwrap_or(0);
            assert_eq!(intact_prefix_len(&buf[..cut]), expect, "cut at {cut}");
        }
    }

    #[test]
    fn corrupted_body_fails_checksum() {
        let (mut buf, ends) = sample_log();
        buf[ends[0] + 12] ^= 0x40;
        assert_eq!(intact_prefix_len(&buf), ends[0]);
        assert!(matches!(read_frame(&buf[ends[0]..]), Err(FrameError::Checksum { .. })));
    }

    #[test]
    fn zero_bytes_are_not_a_frame() {
        assert_eq!(intact_prefix_len(&[0u8; 64]), 0);
        assert_eq!(read_frame(&[0u8; 64]).unwrap_err(), FrameError::UnknownKind(0));
    }
}
