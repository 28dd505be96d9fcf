//! `DTRC` trace files: activation, attention, image and scalar captures.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! header   magic "DTRC" | version u16 | endian u8 (1 = little) | reserved u8
//!          | seed u64 | config digest [32] | record count u32 | index offset u64
//! record   kind u8 | reserved u8 | head u16 | timestep u32 | batch_index u32
//!          | name_len u16 | name | rank u8 | dims u32 * rank
//!          | payload_len u32 | payload f32 * payload_len | crc32 u32
//! index    record offsets u64 * count
//! ```
//!
//! The CRC covers every record byte before it. Records are contiguous from
//! the end of the header; the index follows the last record.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const TRACE_MAGIC: [u8; 4] = *b"DTRC";
pub const TRACE_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 60;
/// Bytes of a record excluding its name, dims and payload.
pub const RECORD_OVERHEAD: usize = 23;
/// Head value for records that are not head-specific.
pub const NO_HEAD: u16 = 0xFFFF;

const ENDIAN_LITTLE: u8 = 1;
const ROW_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("not a trace file (bad magic {0:02x?})")]
    BadMagic([u8; 4]),
    #[error("unsupported trace version {found} (this build reads version {supported})")]
    UnsupportedVersion { found: u16, supported: u16 },
    #[error("unsupported endianness flag {0}")]
    Endianness(u8),
    #[error("truncated trace: {0}")]
    Truncated(String),
    #[error("index mismatch: {0}")]
    IndexMismatch(String),
    #[error("checksum mismatch in record {index} (stored {stored:08x}, computed {computed:08x})")]
    ChecksumMismatch { index: usize, stored: u32, computed: u32 },
    #[error("invalid record `{name}`: {msg}")]
    InvalidRecord { name: String, msg: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TraceError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    Activation,
    Attention,
    Image,
    Scalar,
}

impl RecordKind {
    fn code(self) -> u8 {
        match self {
            RecordKind::Activation => 0,
            RecordKind::Attention => 1,
            RecordKind::Image => 2,
            RecordKind::Scalar => 3,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => RecordKind::Activation,
            1 => RecordKind::Attention,
            2 => RecordKind::Image,
            3 => RecordKind::Scalar,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub name: String,
    pub kind: RecordKind,
    pub timestep: u32,
    pub head: u16,
    pub batch_index: u32,
    pub shape: Vec<usize>,
    pub payload: Vec<f32>,
}

impl TraceRecord {
    pub fn head(&self) -> Option<usize> {
        (self.head != NO_HEAD).then_some(self.head as usize)
    }

    /// Checks the payload length and, for attention, that rows along the
    /// trailing axis are distributions.
    pub fn validate(&self) -> Result<()> {
        let invalid = |msg: String| TraceError::InvalidRecord {
            name: self.name.clone(),
            msg,
        };
        if self.name.len() > u16::MAX as usize {
            return Err(invalid("name longer than 65535 bytes".into()));
        }
        if self.shape.len() > u8::MAX as usize {
            return Err(invalid("rank above 255".into()));
        }
        if self.shape.iter().any(|&d| d > u32::MAX as usize) {
            return Err(invalid("dimension exceeds u32".into()));
        }
        let n: usize = self.shape.iter().product();
        if n != self.payload.len() {
            return Err(invalid(format!(
                "payload has {} values, shape {:?} needs {n}",
                self.payload.len(),
                self.shape
            )));
        }
        if self.kind == RecordKind::Attention {
            let k = *self.shape.last().ok_or_else(|| invalid("attention record without axes".into()))?;
            if k == 0 {
                return Ok(());
            }
            for (i, row) in self.payload.chunks(k).enumerate() {
                let s: f64 = row.iter().map(|&v| v as f64).sum();
                if (s - 1.0).abs() > ROW_TOLERANCE || row.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                    return Err(invalid(format!("row {i} is not a distribution (sum {s})")));
                }
            }
        }
        Ok(())
    }

    fn encoded_len(&self) -> usize {
        RECORD_OVERHEAD + self.name.len() + 4 * self.shape.len() + 4 * self.payload.len()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub seed: u64,
    pub config_digest: [u8; 32],
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TraceFile {
    pub header: TraceHeader,
    pub records: Vec<TraceRecord>,
}

impl TraceFile {
    pub fn new(header: TraceHeader, records: Vec<TraceRecord>) -> Self {
        TraceFile { header, records }
    }

    pub fn query(&self, filter: &TraceFilter) -> Vec<&TraceRecord> {
        query(&self.records, filter)
    }
}

pub fn encode(file: &TraceFile) -> Result<Vec<u8>> {
    let records = &file.records;
    if records.len() > u32::MAX as usize {
        return Err(TraceError::InvalidRecord {
            name: String::new(),
            msg: "more than u32::MAX records".into(),
        });
    }
    let body: usize = records.iter().map(TraceRecord::encoded_len).sum();
    let mut out = Vec::with_capacity(HEADER_LEN + body + 8 * records.len());
    out.extend_from_slice(&TRACE_MAGIC);
    out.extend_from_slice(&TRACE_VERSION.to_le_bytes());
    out.push(ENDIAN_LITTLE);
    out.push(0);
    out.extend_from_slice(&file.header.seed.to_le_bytes());
    out.extend_from_slice(&file.header.config_digest);
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    let index_offset = (HEADER_LEN + body) as u64;
    out.extend_from_slice(&index_offset.to_le_bytes());

    let mut offsets = Vec::with_capacity(records.len());
    for r in records {
        r.validate()?;
        offsets.push(out.len() as u64);
        let start = out.len();
        out.push(r.kind.code());
        out.push(0);
        out.extend_from_slice(&r.head.to_le_bytes());
        out.extend_from_slice(&r.timestep.to_le_bytes());
        out.extend_from_slice(&r.batch_index.to_le_bytes());
        out.extend_from_slice(&(r.name.len() as u16).to_le_bytes());
        out.extend_from_slice(r.name.as_bytes());
        out.push(r.shape.len() as u8);
        for &d in &r.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&(r.payload.len() as u32).to_le_bytes());
        for &v in &r.payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let crc = crc32fast::hash(&out[start..]);
        out.extend_from_slice(&crc.to_le_bytes());
    }
    debug_assert_eq!(out.len() as u64, index_offset);
    for off in offsets {
        out.extend_from_slice(&off.to_le_bytes());
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            TraceError::Truncated(format!("{what} at byte {} needs {n} bytes, {} remain", self.pos, self.buf.len() - self.pos.min(self.buf.len())))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode(buf: &[u8]) -> Result<TraceFile> {
    let mut c = Cursor { buf, pos: 0 };
    let magic: [u8; 4] = c.take(4, "magic")?.try_into().unwrap();
    if magic != TRACE_MAGIC {
        return Err(TraceError::BadMagic(magic));
    }
    let version = c.u16("version")?;
    if version != TRACE_VERSION {
        return Err(TraceError::UnsupportedVersion {
            found: version,
            supported: TRACE_VERSION,
        });
    }
    let endian = c.u8("endianness")?;
    if endian != ENDIAN_LITTLE {
        return Err(TraceError::Endianness(endian));
    }
    c.u8("reserved")?;
    let seed = c.u64("seed")?;
    let config_digest: [u8; 32] = c.take(32, "config digest")?.try_into().unwrap();
    let count = c.u32("record count")? as usize;
    let index_offset = c.u64("index offset")?;

    let index_start = usize::try_from(index_offset)
        .ok()
        .filter(|&o| o >= HEADER_LEN && o <= buf.len())
        .ok_or_else(|| TraceError::Truncated(format!("index offset {index_offset} beyond file of {} bytes", buf.len())))?;
    let index_len = count
        .checked_mul(8)
        .ok_or_else(|| TraceError::IndexMismatch(format!("record count {count} overflows")))?;
    if buf.len() < index_start + index_len {
        return Err(TraceError::Truncated(format!(
            "index of {count} entries at {index_start} exceeds file of {} bytes",
            buf.len()
        )));
    }
    if buf.len() > index_start + index_len {
        return Err(TraceError::IndexMismatch(format!(
            "{} trailing bytes after index",
            buf.len() - index_start - index_len
        )));
    }
    let mut ic = Cursor {
        buf: &buf[..index_start + index_len],
        pos: index_start,
    };
    let mut offsets = Vec::with_capacity(count);
    for _ in 0..count {
        offsets.push(ic.u64("index entry")?);
    }

    // Records must tile [HEADER_LEN, index_start) exactly.
    let mut rc = Cursor {
        buf: &buf[..index_start],
        pos: HEADER_LEN,
    };
    let mut records = Vec::with_capacity(count);
    for (i, &off) in offsets.iter().enumerate() {
        if off != rc.pos as u64 {
            return Err(TraceError::IndexMismatch(format!(
                "record {i}: index says offset {off}, record boundary is {}",
                rc.pos
            )));
        }
        let start = rc.pos;
        let kind_code = rc.u8("record kind")?;
        rc.u8("reserved")?;
        let head = rc.u16("head")?;
        let timestep = rc.u32("timestep")?;
        let batch_index = rc.u32("batch index")?;
        let name_len = rc.u16("name length")? as usize;
        let name_bytes = rc.take(name_len, "name")?;
        let rank = rc.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(rc.u32("dimension")? as usize);
        }
        let n = rc.u32("payload length")? as usize;
        let raw = rc.take(n * 4, "payload")?;
        let body_end = rc.pos;
        let stored = rc.u32("checksum")?;
        let computed = crc32fast::hash(&buf[start..body_end]);
        if stored != computed {
            return Err(TraceError::ChecksumMismatch { index: i, stored, computed });
        }
        let name = String::from_utf8(name_bytes.to_vec()).map_err(|_| TraceError::InvalidRecord {
            name: format!("record {i}"),
            msg: "name is not UTF-8".into(),
        })?;
        let kind = RecordKind::from_code(kind_code).ok_or_else(|| TraceError::InvalidRecord {
            name: name.clone(),
            msg: format!("unknown kind code {kind_code}"),
        })?;
        let payload = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        let record = TraceRecord {
            name,
            kind,
            timestep,
            head,
            batch_index,
            shape,
            payload,
        };
        if record.shape.iter().product::<usize>() != n {
            return Err(TraceError::InvalidRecord {
                name: record.name,
                msg: "payload length disagrees with shape".into(),
            });
        }
        records.push(record);
    }
    if rc.pos != index_start {
        return Err(TraceError::IndexMismatch(format!(
            "records end at {} but the index starts at {index_start}",
            rc.pos
        )));
    }
    Ok(TraceFile {
        header: TraceHeader { seed, config_digest },
        records,
    })
}

/// Writes the file and returns its size in bytes.
pub fn write_trace(file: &TraceFile, path: &Path) -> Result<u64> {
    let bytes = encode(file)?;
    std::fs::write(path, &bytes)?;
    Ok(bytes.len() as u64)
}

pub fn read_trace(path: &Path) -> Result<TraceFile> {
    decode(&std::fs::read(path)?)
}

/// Conjunctive record filter; `None` fields match everything.
#[derive(Debug, Clone, Default)]
pub struct TraceFilter {
    pub name: Option<String>,
    pub kind: Option<RecordKind>,
    pub timesteps: Option<Vec<u32>>,
    pub head: Option<u16>,
}

impl TraceFilter {
    pub fn kind(kind: RecordKind) -> Self {
        TraceFilter {
            kind: Some(kind),
            ..Default::default()
        }
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = Some(name.into());
        self
    }

    pub fn with_timesteps(mut self, ts: &[u32]) -> Self {
        self.timesteps = Some(ts.to_vec());
        self
    }

    pub fn with_head(mut self, head: u16) -> Self {
        self.head = Some(head);
        self
    }

    pub fn matches(&self, r: &TraceRecord) -> bool {
        self.name.as_ref().is_none_or(|n| *n == r.name)
            && self.kind.is_none_or(|k| k == r.kind)
            && self.timesteps.as_ref().is_none_or(|ts| ts.contains(&r.timestep))
            && self.head.is_none_or(|h| h == r.head)
    }
}

/// Matching records in file order.
pub fn query<'a>(records: &'a [TraceRecord], filter: &TraceFilter) -> Vec<&'a TraceRecord> {
    records.iter().filter(|r| filter.matches(r)).collect()
}
