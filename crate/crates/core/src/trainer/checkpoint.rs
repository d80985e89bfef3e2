//! Binary checkpoint container.
//!
//! Layout: the magic `MOHN`, one format-version byte, a little-endian `u32`
//! section count, then sections of `tag: u8`, `len: u64`, `payload`, and a
//! CRC32 of the payload. All integers and floats are little-endian.

use std::path::Path;

use crate::encoder::{EncoderParams, Gradients, Layer, Tensors};
use crate::error::{Error, Result};
use crate::memory_bank::MemoryBank;
use crate::numeric::Matrix;
use crate::rng::{RngState, ALGORITHM};

use super::TrainConfig;

pub const MAGIC: &[u8; 4] = b"MOHN";
pub const FORMAT_VERSION: u8 = 1;

const TAG_CONFIG: u8 = 1;
const TAG_QUERY: u8 = 2;
const TAG_KEY: u8 = 3;
const TAG_VELOCITY: u8 = 4;
const TAG_BANK: u8 = 5;
const TAG_RNG: u8 = 6;
const TAG_COUNTERS: u8 = 7;

/// Everything needed to continue a run bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub query: EncoderParams,
    pub key: EncoderParams,
    pub velocity: Gradients,
    pub bank: MemoryBank,
    pub rng: RngState,
    pub step: u64,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, vs: &[f64]) {
        for v in vs {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
    fn layers(&mut self, layers: &[Layer]) {
        self.u32(layers.len() as u32);
        for l in layers {
            self.u32(l.weight.rows() as u32);
            self.u32(l.weight.cols() as u32);
            self.f64s(l.weight.as_slice());
            self.f64s(&l.bias);
        }
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
        let end =
            self.pos.checked_add(n).filter(|e| *e <= self.buf.len()).ok_or_else(|| {
                Error::CorruptCheckpoint(format!("unexpected end of data at byte {} (+{n})", self.pos))
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().expect("16 bytes")))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::CorruptCheckpoint("length overflow".into()))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
    fn layers(&mut self) -> Result<Vec<Layer>> {
        let n = self.u32()? as usize;
        let mut out = Vec::with_capacity(n.min(64));
        for _ in 0..n {
            let rows = self.u32()? as usize;
            let cols = self.u32()? as usize;
            let weight = Matrix::from_vec(rows, cols, self.f64s(rows * cols)?)?;
            let bias = self.f64s(rows)?;
            out.push(Layer { weight, bias });
        }
        Ok(out)
    }
    fn finish(&self, what: &str) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::CorruptCheckpoint(format!("{} trailing bytes in {what}", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn section(out: &mut Vec<u8>, tag: u8, payload: &[u8]) {
    out.push(tag);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
    out.extend_from_slice(&crc32fast::hash(payload).to_le_bytes());
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut sections: Vec<(u8, Vec<u8>)> = Vec::new();
        sections.push((TAG_CONFIG, self.config.to_toml_string().into_bytes()));
        for (tag, layers) in
            [(TAG_QUERY, self.query.layers()), (TAG_KEY, self.key.layers()), (TAG_VELOCITY, self.velocity.layers())]
        {
            let mut w = Writer(Vec::new());
            w.layers(layers);
            sections.push((tag, w.0));
        }
        let mut w = Writer(Vec::new());
        let b = &self.bank;
        for v in [b.capacity() as u64, b.dim() as u64, b.write_ptr() as u64, b.filled() as u64, b.total_enqueued()] {
            w.u64(v);
        }
        w.f64s(b.storage().as_slice());
        sections.push((TAG_BANK, w.0));

        let mut w = Writer(Vec::new());
        w.u32(ALGORITHM.len() as u32);
        w.0.extend_from_slice(ALGORITHM.as_bytes());
        w.0.extend_from_slice(&self.rng.seed);
        w.u64(self.rng.stream);
        w.0.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        sections.push((TAG_RNG, w.0));

        sections.push((TAG_COUNTERS, self.step.to_le_bytes().to_vec()));

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(FORMAT_VERSION);
        out.extend_from_slice(&(sections.len() as u32).to_le_bytes());
        for (tag, payload) in &sections {
            section(&mut out, *tag, payload);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != MAGIC {
            return Err(Error::CorruptCheckpoint("bad magic".into()));
        }
        let version = r.u8()?;
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch { found: version, expected: FORMAT_VERSION });
        }
        let count = r.u32()?;
        let mut payloads: [Option<&[u8]>; 8] = [None; 8];
        for _ in 0..count {
            let tag = r.u8()?;
            let len = usize::try_from(r.u64()?).map_err(|_| Error::CorruptCheckpoint("section too large".into()))?;
            let payload = r.take(len)?;
            let crc = r.u32()?;
            if crc32fast::hash(payload) != crc {
                return Err(Error::CorruptCheckpoint(format!("checksum mismatch in section {tag}")));
            }
            match payloads.get_mut(tag as usize) {
                Some(slot @ None) if tag != 0 => *slot = Some(payload),
                _ => return Err(Error::CorruptCheckpoint(format!("unexpected section tag {tag}"))),
            }
        }
        r.finish("checkpoint")?;
        let get =
            |tag: u8| payloads[tag as usize].ok_or_else(|| Error::CorruptCheckpoint(format!("missing section {tag}")));

        let config_text = std::str::from_utf8(get(TAG_CONFIG)?)
            .map_err(|_| Error::CorruptCheckpoint("config section is not UTF-8".into()))?;
        let config = TrainConfig::from_toml_str(config_text)
            .map_err(|e| Error::CorruptCheckpoint(format!("embedded config: {e}")))?;

        let read_layers = |tag: u8| -> Result<Vec<Layer>> {
            let mut r = Reader::new(get(tag)?);
            let l = r.layers()?;
            r.finish("layer section")?;
            Ok(l)
        };
        let corrupt = |e: Error| Error::CorruptCheckpoint(e.to_string());
        let query = EncoderParams::from_layers(config.encoder.clone(), read_layers(TAG_QUERY)?).map_err(corrupt)?;
        let key = EncoderParams::from_layers(config.encoder.clone(), read_layers(TAG_KEY)?).map_err(corrupt)?;
        let velocity = Gradients::from_layers(&query, read_layers(TAG_VELOCITY)?).map_err(corrupt)?;

        let mut r = Reader::new(get(TAG_BANK)?);
        let capacity = r.u64()? as usize;
        let dim = r.u64()? as usize;
        let write_ptr = r.u64()? as usize;
        let filled = r.u64()? as usize;
        let total = r.u64()?;
        let rows = capacity.checked_mul(dim).ok_or_else(|| Error::CorruptCheckpoint("bank size overflow".into()))?;
        let storage = Matrix::from_vec(capacity, dim, r.f64s(rows)?).map_err(corrupt)?;
        r.finish("bank section")?;
        let bank = MemoryBank::from_parts(storage, write_ptr, filled, total).map_err(corrupt)?;

        let mut r = Reader::new(get(TAG_RNG)?);
        let name_len = r.u32()? as usize;
        if r.take(name_len)? != ALGORITHM.as_bytes() {
            return Err(Error::CorruptCheckpoint("unknown rng algorithm".into()));
        }
        let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let stream = r.u64()?;
        let word_pos = r.u128()?;
        r.finish("rng section")?;

        let mut r = Reader::new(get(TAG_COUNTERS)?);
        let step = r.u64()?;
        r.finish("counter section")?;

        Ok(Self { config, query, key, velocity, bank, rng: RngState { seed, stream, word_pos }, step })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_bytes(&std::fs::read(path)?)
    }
}
