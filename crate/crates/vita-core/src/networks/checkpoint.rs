//! Binary checkpoint codec.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "VITA" | version u32 | descriptor_len u32 | descriptor (utf-8)
//! | tensor_count u32 | tensors...
//! tensor: name_len u32 | name (utf-8) | rank u32 | dims u32 x rank | f32 payload
//! ```
//!
//! Serialization is a pure function of the inputs, so saving the same state
//! twice produces identical bytes.

use std::fs;
use std::path::Path;

use crate::error::{Result, VitaError};

pub const MAGIC: [u8; 4] = *b"VITA";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Entry {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Entry {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, data.len(), "entry shape/data mismatch");
        Entry { name: name.into(), shape, data }
    }
}

pub fn serialize(descriptor: &str, entries: &[Entry]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(descriptor.len() as u32).to_le_bytes());
    out.extend_from_slice(descriptor.as_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
        for &d in &e.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &e.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(VitaError::Data(format!(
                "checkpoint truncated at byte {} while reading {what} ({} of {} bytes available)",
                self.pos,
                self.bytes.len() - self.pos,
                n
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u32(&format!("{what} length"))? as usize;
        let bytes = self.take(len, what)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| VitaError::Data(format!("checkpoint: {what} is not valid utf-8")))
    }
}

pub fn deserialize(bytes: &[u8]) -> Result<(String, Vec<Entry>)> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(VitaError::Data(format!(
            "checkpoint: bad magic {:02x?}, expected {:02x?}",
            magic, MAGIC
        )));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(VitaError::Data(format!(
            "checkpoint: unsupported version {version}, this build reads version {FORMAT_VERSION}"
        )));
    }
    let descriptor = r.string("descriptor")?;
    let count = r.u32("tensor count")? as usize;
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let name = r.string(&format!("tensor {i} name"))?;
        let rank = r.u32(&format!("tensor '{name}' rank"))? as usize;
        let mut shape = Vec::with_capacity(rank);
        for d in 0..rank {
            shape.push(r.u32(&format!("tensor '{name}' dim {d}"))? as usize);
        }
        let numel: usize = shape.iter().product();
        let payload = r.take(numel * 4, &format!("tensor '{name}' payload"))?;
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        entries.push(Entry { name, shape, data });
    }
    if r.pos != bytes.len() {
        return Err(VitaError::Data(format!(
            "checkpoint: {} trailing bytes after the last tensor",
            bytes.len() - r.pos
        )));
    }
    Ok((descriptor, entries))
}

/// Split a descriptor like `"unet;base=32;epoch=4"` into its kind and
/// key=value fields. Unknown fields are preserved for forward compatibility.
pub fn parse_descriptor(desc: &str) -> (String, std::collections::BTreeMap<String, String>) {
    let mut parts = desc.split(';');
    let kind = parts.next().unwrap_or("").to_string();
    let mut fields = std::collections::BTreeMap::new();
    for p in parts {
        if let Some((k, v)) = p.split_once('=') {
            fields.insert(k.to_string(), v.to_string());
        }
    }
    (kind, fields)
}

/// Fetch a required numeric field out of a parsed descriptor.
pub fn descriptor_usize(
    fields: &std::collections::BTreeMap<String, String>,
    key: &str,
    desc: &str,
) -> Result<usize> {
    fields
        .get(key)
        .and_then(|v| v.parse::<usize>().ok())
        .ok_or_else(|| VitaError::Data(format!("checkpoint descriptor '{desc}' lacks usable field '{key}'")))
}

pub fn save(path: &Path, descriptor: &str, entries: &[Entry]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serialize(descriptor, entries))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(String, Vec<Entry>)> {
    let bytes = fs::read(path)?;
    deserialize(&bytes)
}

/// Match loaded entries against the exact set of expected names, applying
/// each through `apply(name, shape, data)`.
pub fn apply_entries(
    entries: Vec<Entry>,
    expected: &[String],
    mut apply: impl FnMut(&str, &[usize], Vec<f32>) -> Result<()>,
) -> Result<()> {
    use std::collections::BTreeMap;
    let mut map: BTreeMap<String, Entry> = BTreeMap::new();
    for e in entries {
        if map.insert(e.name.clone(), e).is_some() {
            return Err(VitaError::Data("checkpoint: duplicate tensor name".into()));
        }
    }
    for name in expected {
        let e = map.remove(name).ok_or_else(|| {
            VitaError::Data(format!("checkpoint: missing tensor '{name}'"))
        })?;
        apply(name, &e.shape, e.data)?;
    }
    if let Some(extra) = map.keys().next() {
        return Err(VitaError::Data(format!(
            "checkpoint: unexpected tensor '{extra}' ({} extras total)",
            map.len()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_entries() -> Vec<Entry> {
        vec![
            Entry::new("a.weight", vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, 1e-8, -1e8]),
            Entry::new("a.bias", vec![2], vec![0.25, -0.75]),
        ]
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let bytes = serialize("unet;base=32", &sample_entries());
        let (desc, entries) = deserialize(&bytes).unwrap();
        assert_eq!(desc, "unet;base=32");
        assert_eq!(entries, sample_entries());
        let again = serialize(&desc, &entries);
        assert_eq!(bytes, again);
    }

    #[test]
    fn bad_magic_is_distinct() {
        let mut bytes = serialize("d", &sample_entries());
        bytes[0] = b'X';
        let err = deserialize(&bytes).unwrap_err().to_string();
        assert!(err.contains("bad magic"), "{err}");
    }

    #[test]
    fn bad_version_is_distinct() {
        let mut bytes = serialize("d", &sample_entries());
        bytes[4] = 9;
        let err = deserialize(&bytes).unwrap_err().to_string();
        assert!(err.contains("unsupported version 9"), "{err}");
    }

    #[test]
    fn truncation_is_distinct() {
        let bytes = serialize("d", &sample_entries());
        for cut in [3, 7, 9, bytes.len() - 1] {
            let err = deserialize(&bytes[..cut]).unwrap_err().to_string();
            assert!(err.contains("truncated"), "cut at {cut}: {err}");
        }
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = serialize("d", &sample_entries());
        bytes.push(0);
        let err = deserialize(&bytes).unwrap_err().to_string();
        assert!(err.contains("trailing"), "{err}");
    }

    #[test]
    fn empty_checkpoint_roundtrips() {
        let bytes = serialize("", &[]);
        let (desc, entries) = deserialize(&bytes).unwrap();
        assert!(desc.is_empty() && entries.is_empty());
    }

    #[test]
    fn apply_entries_flags_missing_and_extra() {
        let expected = vec!["a.weight".to_string(), "a.bias".to_string()];
        let missing = apply_entries(sample_entries()[..1].to_vec(), &expected, |_, _, _| Ok(()));
        assert!(missing.unwrap_err().to_string().contains("missing tensor 'a.bias'"));

        let mut extra = sample_entries();
        extra.push(Entry::new("ghost", vec![1], vec![0.0]));
        let err = apply_entries(extra, &expected, |_, _, _| Ok(()));
        assert!(err.unwrap_err().to_string().contains("unexpected tensor 'ghost'"));
    }
}
