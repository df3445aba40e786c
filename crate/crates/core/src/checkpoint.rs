//! Versioned binary checkpoint: a header, an index of named sections and
//! their payloads. All integers are little-endian.
//!
//! ```text
//! magic "HNASCKPT" | version u32 | stage str | config hash str | n u32
//! n × (name str | offset u64 | len u64) | payloads
//! ```
//! where `str` is a `u32` byte length followed by UTF-8. Offsets are relative
//! to the start of the payload area. Sections are kept sorted by name, so
//! encoding a decoded checkpoint reproduces the input byte for byte.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"HNASCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Derive,
    Train,
    Search,
    Discretize,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Derive, Stage::Train, Stage::Search, Stage::Discretize, Stage::Evaluate];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Derive => "derive",
            Stage::Train => "train",
            Stage::Search => "search",
            Stage::Discretize => "discretize",
            Stage::Evaluate => "evaluate",
        }
    }

    pub fn previous(self) -> Option<Stage> {
        let i = Self::ALL.iter().position(|&s| s == self).expect("listed");
        i.checked_sub(1).map(|p| Self::ALL[p])
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::format("stage tag", format!("unknown stage `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub config_hash: String,
    sections: BTreeMap<String, Vec<u8>>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::format("checkpoint", format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn str(&mut self) -> Result<&'a str> {
        let n = self.u32()? as usize;
        std::str::from_utf8(self.take(n)?).map_err(|e| Error::format("checkpoint", e.to_string()))
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend((s.len() as u32).to_le_bytes());
    out.extend(s.as_bytes());
}

impl Checkpoint {
    pub fn new(stage: Stage, config_hash: impl Into<String>) -> Self {
        Self { stage, config_hash: config_hash.into(), sections: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, payload: Vec<u8>) {
        self.sections.insert(name.into(), payload);
    }

    pub fn insert_text(&mut self, name: impl Into<String>, text: &str) {
        self.insert(name, text.as_bytes().to_vec());
    }

    pub fn section(&self, name: &str) -> Result<&[u8]> {
        self.sections
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::format("checkpoint", format!("{} checkpoint has no `{name}` section", self.stage)))
    }

    pub fn text(&self, name: &str) -> Result<&str> {
        std::str::from_utf8(self.section(name)?).map_err(|e| Error::format("checkpoint", e.to_string()))
    }

    pub fn section_names(&self) -> impl Iterator<Item = &str> {
        self.sections.keys().map(String::as_str)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend(MAGIC);
        out.extend(VERSION.to_le_bytes());
        put_str(&mut out, self.stage.name());
        put_str(&mut out, &self.config_hash);
        out.extend((self.sections.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for (name, payload) in &self.sections {
            put_str(&mut out, name);
            out.extend(offset.to_le_bytes());
            out.extend((payload.len() as u64).to_le_bytes());
            offset += payload.len() as u64;
        }
        for payload in self.sections.values() {
            out.extend(payload);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::format("checkpoint", "bad magic header"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format("checkpoint", format!("unsupported version {version}, expected {VERSION}")));
        }
        let stage: Stage = r.str()?.parse()?;
        let config_hash = r.str()?.to_owned();
        let n = r.u32()? as usize;
        let mut index = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            index.push((r.str()?.to_owned(), r.u64()?, r.u64()?));
        }
        let payload = &bytes[r.pos..];
        let mut sections = BTreeMap::new();
        let mut expected = 0u64;
        for (name, off, len) in index {
            // contiguous and in order, which the sorted index guarantees for our own files
            if off != expected {
                return Err(Error::format("checkpoint", format!("section `{name}` at offset {off}, expected {expected}")));
            }
            let end = off.checked_add(len).filter(|&e| e <= payload.len() as u64);
            let end = end.ok_or_else(|| Error::format("checkpoint", format!("section `{name}` overruns the file")))?;
            if sections.insert(name.clone(), payload[off as usize..end as usize].to_vec()).is_some() {
                return Err(Error::format("checkpoint", format!("duplicate section `{name}`")));
            }
            expected = end;
        }
        if expected != payload.len() as u64 {
            return Err(Error::format("checkpoint", "trailing bytes after the last section"));
        }
        let ck = Self { stage, config_hash, sections };
        if ck.to_bytes() != bytes {
            return Err(Error::format("checkpoint", "section index is not in canonical order"));
        }
        Ok(ck)
    }

    /// Writes through a temporary file so a crash never leaves a torn checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("ckpt.tmp");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn expect(&self, stage: Stage, config_hash: &str) -> Result<()> {
        if self.stage != stage {
            return Err(Error::StageMismatch { expected: stage.to_string(), found: self.stage.to_string() });
        }
        if self.config_hash != config_hash {
            return Err(Error::ConfigMismatch { expected: config_hash.to_owned(), found: self.config_hash.clone() });
        }
        Ok(())
    }
}

/// `n u32 | n × (name str | rank u32 | dims u64… | f32 values)`.
pub fn encode_tensors<'a>(items: impl IntoIterator<Item = (&'a str, &'a Tensor<f32>)>) -> Vec<u8> {
    let items: Vec<_> = items.into_iter().collect();
    let mut out = Vec::new();
    out.extend((items.len() as u32).to_le_bytes());
    for (name, t) in items {
        put_str(&mut out, name);
        out.extend((t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend((d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend(v.to_le_bytes());
        }
    }
    out
}

pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let n = r.u32()? as usize;
    let mut out = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let name = r.str()?.to_owned();
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let bytes = numel
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::format("tensor section", format!("shape {shape:?} overflows")))?;
        let data = r
            .take(bytes)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::format("tensor section", "trailing bytes"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn stage_order_and_names() {
        assert_eq!(Stage::Search.previous(), Some(Stage::Train));
        assert_eq!(Stage::Derive.previous(), None);
        for s in Stage::ALL {
            assert_eq!(s.name().parse::<Stage>().unwrap(), s);
        }
    }

    #[test]
    fn mismatches_are_reported_with_tags() {
        let ck = Checkpoint::new(Stage::Train, "abc");
        assert!(ck.expect(Stage::Train, "abc").is_ok());
        let e = ck.expect(Stage::Search, "abc").unwrap_err().to_string();
        assert!(e.contains("`search`") && e.contains("`train`"), "{e}");
        assert!(matches!(ck.expect(Stage::Train, "xyz"), Err(Error::ConfigMismatch { .. })));
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let mut ck = Checkpoint::new(Stage::Derive, "h");
        ck.insert_text("a", "hello");
        let bytes = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(Checkpoint::from_bytes(&magic).is_err());
        let mut version = bytes;
        version[8] = 9;
        assert!(Checkpoint::from_bytes(&version).is_err());
    }

    #[test]
    fn tensor_sections_round_trip() {
        let a = Tensor::new([2, 3], vec![1.0, -2.5, 3.0, f32::MIN_POSITIVE, 0.0, -0.0]).unwrap();
        let b = Tensor::scalar(7.0f32);
        let bytes = encode_tensors([("a", &a), ("b", &b)]);
        let back = decode_tensors(&bytes).unwrap();
        assert_eq!(back[0].0, "a");
        assert_eq!(back[0].1.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(back[1].1.shape(), &[] as &[usize]);
        assert!(decode_tensors(&bytes[..bytes.len() - 2]).is_err());
    }

    proptest! {
        #[test]
        fn save_load_save_is_byte_identical(
            sections in proptest::collection::btree_map("[a-z.]{1,12}", proptest::collection::vec(any::<u8>(), 0..64), 0..8),
            hash in "[0-9a-f]{16}",
            stage in 0usize..5,
        ) {
            let mut ck = Checkpoint::new(Stage::ALL[stage], hash);
            for (k, v) in sections {
                ck.insert(k, v);
            }
            let bytes = ck.to_bytes();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            prop_assert_eq!(&back, &ck);
            prop_assert_eq!(back.to_bytes(), bytes);
        }
    }
}
