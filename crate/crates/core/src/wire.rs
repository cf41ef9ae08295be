//! Binary encodings exchanged between server and clients and written to
//! disk.
//!
//! Parameter blob (all integers little-endian):
//!
//! ```text
//! "FMNS" | version u16 | geometry hash u64 | entry count u32
//! per entry: name len u32 | name utf-8 | ndim u32 | dims u32 x ndim | f32 x numel
//! ```
//!
//! A [`RoundMessage`] (`"FMNR"`) and a checkpoint (`"FMNC"`) embed blobs
//! as length-prefixed byte strings. Over TCP, each encoded message is one
//! frame with a 4-byte big-endian length prefix.

use std::io::{Read, Write};

use thiserror::Error;

use crate::metrics::EpochMetrics;
use crate::params::{Param, ParamSet};
use crate::prune::{MaskEntry, PruneMask};
use crate::search::{Geometry, PRIMITIVES};

pub const BLOB_MAGIC: &[u8; 4] = b"FMNS";
pub const MESSAGE_MAGIC: &[u8; 4] = b"FMNR";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FMNC";
pub const FORMAT_VERSION: u16 = 1;
/// Largest accepted TCP frame.
pub const MAX_FRAME: usize = 1 << 30;

#[derive(Debug, Error)]
pub enum WireError {
    #[error("bad magic at offset {offset}: expected {expected:?}, found {found:?}")]
    Magic {
        offset: usize,
        expected: [u8; 4],
        found: Vec<u8>,
    },
    #[error("unsupported format version {found} (supported: {supported})")]
    Version { found: u16, supported: u16 },
    #[error("truncated input at offset {offset}: needed {needed} more bytes")]
    Truncated { offset: usize, needed: usize },
    #[error("invalid data at offset {offset}: {reason}")]
    Invalid { offset: usize, reason: String },
    #[error("geometry hash mismatch: expected {expected:#018x}, found {found:#018x}")]
    Geometry { expected: u64, found: u64 },
    #[error("{0} trailing bytes")]
    Trailing(usize),
    #[error("frame of {0} bytes exceeds limit")]
    FrameTooLarge(usize),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, WireError>;

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.0.extend_from_slice(b);
    }
    fn header(&mut self, magic: &[u8; 4]) {
        self.0.extend_from_slice(magic);
        self.u16(FORMAT_VERSION);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(WireError::Truncated {
                offset: self.pos,
                needed: n - (self.buf.len() - self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.array()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }

    fn header(&mut self, magic: &[u8; 4]) -> Result<()> {
        let offset = self.pos;
        let found = self.take(4.min(self.buf.len() - self.pos))?;
        if found != magic {
            return Err(WireError::Magic {
                offset,
                expected: *magic,
                found: found.to_vec(),
            });
        }
        let version = self.u16()?;
        if version != FORMAT_VERSION {
            return Err(WireError::Version {
                found: version,
                supported: FORMAT_VERSION,
            });
        }
        Ok(())
    }

    fn invalid(&self, reason: impl Into<String>) -> WireError {
        WireError::Invalid {
            offset: self.pos,
            reason: reason.into(),
        }
    }

    fn finish(self) -> Result<()> {
        match self.buf.len() - self.pos {
            0 => Ok(()),
            n => Err(WireError::Trailing(n)),
        }
    }
}

pub fn encode_blob(params: &ParamSet, geometry_hash: u64) -> Vec<u8> {
    let mut w = Writer::default();
    w.header(BLOB_MAGIC);
    w.u64(geometry_hash);
    w.u32(params.len() as u32);
    for p in params {
        w.bytes(p.name.as_bytes());
        w.u32(p.shape.len() as u32);
        for &d in &p.shape {
            w.u32(d as u32);
        }
        for &v in &p.data {
            w.f32(v);
        }
    }
    w.0
}

/// Decodes a blob and returns it with its geometry hash.
pub fn decode_blob(bytes: &[u8]) -> Result<(ParamSet, u64)> {
    let mut r = Reader::new(bytes);
    let out = read_blob(&mut r)?;
    r.finish()?;
    Ok(out)
}

fn read_blob(r: &mut Reader) -> Result<(ParamSet, u64)> {
    r.header(BLOB_MAGIC)?;
    let hash = r.u64()?;
    let count = r.u32()? as usize;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let name = std::str::from_utf8(r.bytes()?)
            .map_err(|e| r.invalid(format!("parameter name: {e}")))?
            .to_string();
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| r.invalid("shape overflows"))?;
        let raw = r.take(numel.checked_mul(4).ok_or_else(|| r.invalid("shape overflows"))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.push(Param::new(name, shape, data));
    }
    Ok((params, hash))
}

fn write_mask(w: &mut Writer, mask: &PruneMask) {
    w.f32(mask.threshold);
    w.u32(mask.period as u32);
    w.u32(mask.len() as u32);
    for e in mask.entries() {
        match *e {
            MaskEntry::Open => {
                w.u8(0);
                w.u32(0);
            }
            MaskEntry::Fixed(k) => {
                w.u8(1);
                w.u32(k as u32);
            }
        }
    }
}

fn read_mask(r: &mut Reader) -> Result<PruneMask> {
    let threshold = r.f32()?;
    let period = r.u32()? as usize;
    let n = r.u32()? as usize;
    let mut entries = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let tag = r.u8()?;
        let k = r.u32()? as usize;
        entries.push(match tag {
            0 => MaskEntry::Open,
            1 => MaskEntry::Fixed(k),
            t => return Err(r.invalid(format!("mask tag {t}"))),
        });
    }
    Ok(PruneMask::from_entries(entries, threshold, period))
}

/// What a client sends back after a round of local search.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundMessage {
    pub client_id: usize,
    pub round: usize,
    /// Samples in the client's shard.
    pub n_k: u64,
    pub weights: ParamSet,
    pub alpha: ParamSet,
    pub geometry_hash: u64,
    pub mask: PruneMask,
    pub metrics: Vec<EpochMetrics>,
}

impl RoundMessage {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.header(MESSAGE_MAGIC);
        w.u32(self.client_id as u32);
        w.u32(self.round as u32);
        w.u64(self.n_k);
        w.bytes(&encode_blob(&self.weights, self.geometry_hash));
        w.bytes(&encode_blob(&self.alpha, self.geometry_hash));
        write_mask(&mut w, &self.mask);
        w.u32(self.metrics.len() as u32);
        for m in &self.metrics {
            w.u32(m.epoch);
            w.f64(m.support_loss);
            w.f64(m.query_loss);
            w.f64(m.query_acc);
            w.f64(m.lambda);
            w.u32(m.prune_events);
        }
        w.0
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.header(MESSAGE_MAGIC)?;
        let client_id = r.u32()? as usize;
        let round = r.u32()? as usize;
        let n_k = r.u64()?;
        if n_k == 0 {
            return Err(r.invalid("n_k must be positive"));
        }
        let (weights, wh) = decode_blob(r.bytes()?)?;
        let (alpha, ah) = decode_blob(r.bytes()?)?;
        if wh != ah {
            return Err(WireError::Geometry {
                expected: wh,
                found: ah,
            });
        }
        let mask = read_mask(&mut r)?;
        let n = r.u32()? as usize;
        let mut metrics = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            metrics.push(EpochMetrics {
                epoch: r.u32()?,
                support_loss: r.f64()?,
                query_loss: r.f64()?,
                query_acc: r.f64()?,
                lambda: r.f64()?,
                prune_events: r.u32()?,
            });
        }
        r.finish()?;
        Ok(Self {
            client_id,
            round,
            n_k,
            weights,
            alpha,
            geometry_hash: wh,
            mask,
            metrics,
        })
    }
}

/// Everything needed to rebuild and evaluate a searched model.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub geometry: Geometry,
    pub lambda: f32,
    pub weights: ParamSet,
    pub alpha: ParamSet,
    pub mask: PruneMask,
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.header(CHECKPOINT_MAGIC);
        w.u8(PRIMITIVES.len() as u8);
        for p in PRIMITIVES {
            w.bytes(p.name().as_bytes());
        }
        let g = &self.geometry;
        for v in [
            g.in_channels,
            g.height,
            g.width,
            g.n_classes,
            g.cells,
            g.nodes,
            g.stem_channels,
            g.combo_size,
        ] {
            w.u32(v as u32);
        }
        w.f32(self.lambda);
        let hash = g.hash();
        w.bytes(&encode_blob(&self.weights, hash));
        w.bytes(&encode_blob(&self.alpha, hash));
        write_mask(&mut w, &self.mask);
        w.0
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.header(CHECKPOINT_MAGIC)?;
        let n = r.u8()? as usize;
        let mut names = Vec::with_capacity(n);
        for _ in 0..n {
            names.push(String::from_utf8_lossy(r.bytes()?).into_owned());
        }
        let expected: Vec<&str> = PRIMITIVES.iter().map(|p| p.name()).collect();
        if names != expected {
            return Err(r.invalid(format!("primitive order {names:?} differs from {expected:?}")));
        }
        let mut f = [0usize; 8];
        for v in f.iter_mut() {
            *v = r.u32()? as usize;
        }
        let geometry = Geometry {
            in_channels: f[0],
            height: f[1],
            width: f[2],
            n_classes: f[3],
            cells: f[4],
            nodes: f[5],
            stem_channels: f[6],
            combo_size: f[7],
        };
        let lambda = r.f32()?;
        let (weights, wh) = decode_blob(r.bytes()?)?;
        let (alpha, ah) = decode_blob(r.bytes()?)?;
        for found in [wh, ah] {
            if found != geometry.hash() {
                return Err(WireError::Geometry {
                    expected: geometry.hash(),
                    found,
                });
            }
        }
        let mask = read_mask(&mut r)?;
        r.finish()?;
        Ok(Self {
            geometry,
            lambda,
            weights,
            alpha,
            mask,
        })
    }
}

pub fn write_frame<W: Write>(w: &mut W, payload: &[u8]) -> Result<()> {
    if payload.len() > MAX_FRAME {
        return Err(WireError::FrameTooLarge(payload.len()));
    }
    w.write_all(&(payload.len() as u32).to_be_bytes())?;
    w.write_all(payload)?;
    w.flush()?;
    Ok(())
}

pub fn read_frame<R: Read>(r: &mut R) -> Result<Vec<u8>> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME {
        return Err(WireError::FrameTooLarge(len));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Ok(buf)
}
