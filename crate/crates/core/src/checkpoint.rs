//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "MMKD" | u16 version | u32 descriptor_len | descriptor (UTF-8)
//!        | u64 param_count | param_count x f64
//!        | { tag[4] | u64 payload_len | payload }*
//! ```
//!
//! The descriptor is the architecture's canonical text followed by a
//! `seed=<n>` line. Tagged sections carry optional payloads such as an
//! episodic-memory snapshot (`MEMS`) or embedding dumps (`EMBD`).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{ArchSpec, ModelState};

pub const MAGIC: &[u8; 4] = b"MMKD";
pub const VERSION: u16 = 1;
pub const MEMORY_TAG: [u8; 4] = *b"MEMS";
pub const EMBEDDING_TAG: [u8; 4] = *b"EMBD";

#[derive(Clone, Debug, PartialEq)]
pub struct Section {
    pub tag: [u8; 4],
    pub payload: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelState,
    pub sections: Vec<Section>,
}

impl Checkpoint {
    pub fn new(model: ModelState) -> Self {
        Self {
            model,
            sections: Vec::new(),
        }
    }

    pub fn with_section(mut self, tag: [u8; 4], payload: Vec<u8>) -> Self {
        self.sections.push(Section { tag, payload });
        self
    }

    pub fn section(&self, tag: [u8; 4]) -> Option<&[u8]> {
        self.sections
            .iter()
            .find(|s| s.tag == tag)
            .map(|s| s.payload.as_slice())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = ByteWriter::default();
        w.bytes(MAGIC);
        w.u16(VERSION);
        let descriptor = format!(
            "{}seed={}\n",
            self.model.arch.to_canonical_text(),
            self.model.rng_seed
        );
        w.u32(descriptor.len() as u32);
        w.bytes(descriptor.as_bytes());
        w.u64(self.model.params.len() as u64);
        for p in &self.model.params {
            w.f64(*p);
        }
        for s in &self.sections {
            w.bytes(&s.tag);
            w.u64(s.payload.len() as u64);
            w.bytes(&s.payload);
        }
        w.into_inner()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let len = r.u32()? as usize;
        let descriptor = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("descriptor is not UTF-8".into()))?;
        let mut seed = None;
        let mut arch_text = String::new();
        for line in descriptor.lines() {
            match line.strip_prefix("seed=") {
                Some(v) => seed = Some(v.parse::<u64>().map_err(|_| Error::Format("bad seed".into()))?),
                None => {
                    arch_text.push_str(line);
                    arch_text.push('\n');
                }
            }
        }
        let arch = ArchSpec::from_canonical_text(&arch_text)?;
        let count = r.u64()? as usize;
        if count != arch.param_count() {
            return Err(Error::Format(format!(
                "descriptor implies {} parameters, file has {count}",
                arch.param_count()
            )));
        }
        let params = (0..count).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let mut sections = Vec::new();
        while !r.is_empty() {
            let tag: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
            let len = r.u64()? as usize;
            sections.push(Section {
                tag,
                payload: r.take(len)?.to_vec(),
            });
        }
        let model = ModelState::new(arch, params, seed.ok_or_else(|| Error::Format("missing seed".into()))?)?;
        Ok(Self { model, sections })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

#[derive(Default)]
pub(crate) struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }
    pub fn u16(&mut self, v: u16) {
        self.bytes(&v.to_le_bytes());
    }
    pub fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    pub fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    pub fn f32(&mut self, v: f32) {
        self.bytes(&v.to_le_bytes());
    }
    pub fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }
    pub fn into_inner(self) -> Vec<u8> {
        self.buf
    }
}

pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn is_empty(&self) -> bool {
        self.pos >= self.buf.len()
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }
    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.array()?))
    }
    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::init_model;

    #[test]
    fn header_layout() {
        let arch = ArchSpec::desk_default([1, 8, 8], 10);
        let model = init_model(&arch, 4).unwrap();
        let bytes = Checkpoint::new(model.clone()).encode();
        assert_eq!(&bytes[..4], b"MMKD");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), VERSION);
        let tail = &bytes[bytes.len() - 8..];
        assert_eq!(f64::from_le_bytes(tail.try_into().unwrap()), *model.params.last().unwrap());
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let arch = ArchSpec::desk_default([1, 8, 8], 10);
        let model = init_model(&arch, 4).unwrap();
        let ck = Checkpoint::new(model)
            .with_section(MEMORY_TAG, vec![1, 2, 3])
            .with_section(EMBEDDING_TAG, vec![]);
        let bytes = ck.encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.encode(), bytes);
        assert_eq!(back.section(MEMORY_TAG), Some(&[1u8, 2, 3][..]));
    }

    #[test]
    fn rejects_corruption() {
        let arch = ArchSpec::desk_default([1, 8, 8], 10);
        let bytes = Checkpoint::new(init_model(&arch, 4).unwrap()).encode();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::decode(&bad).is_err());
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 3]).is_err());
        let mut wrong_version = bytes;
        wrong_version[4] = 9;
        assert!(Checkpoint::decode(&wrong_version).is_err());
    }
}
