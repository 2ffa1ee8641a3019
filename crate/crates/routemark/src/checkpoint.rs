//! Versioned binary checkpoint container.
//!
//! Layout: magic `RMK1`, format version (u32 LE), entry count (u32 LE),
//! then per entry: name length (u32 LE), UTF-8 name, dtype tag (u8:
//! 0 = f32 tensor, 1 = u64 list), rank (u8), dims (u64 LE each), payload
//! (little-endian). Round-trips are bit-exact; files are written to a
//! temporary sibling and renamed into place.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"RMK1";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint format version {0}")]
    BadVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("missing checkpoint entry {0:?}")]
    Missing(String),
    #[error("entry {0:?} has the wrong type")]
    WrongType(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Entry {
    F32 { shape: Vec<usize>, data: Vec<f32> },
    U64(Vec<u64>),
}

/// Named entries, ordered by name for deterministic serialization.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    entries: BTreeMap<String, Entry>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert_tensor(&mut self, name: impl Into<String>, t: &Tensor) {
        self.entries.insert(
            name.into(),
            Entry::F32 { shape: t.shape().to_vec(), data: t.data().to_vec() },
        );
    }

    pub fn insert_u64s(&mut self, name: impl Into<String>, values: &[u64]) {
        self.entries.insert(name.into(), Entry::U64(values.to_vec()));
    }

    pub fn insert_u64(&mut self, name: impl Into<String>, value: u64) {
        self.insert_u64s(name, &[value]);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor, CheckpointError> {
        match self.entries.get(name) {
            Some(Entry::F32 { shape, data }) => Tensor::new(shape.clone(), data.clone())
                .map_err(|e| CheckpointError::Corrupt(e.to_string())),
            Some(_) => Err(CheckpointError::WrongType(name.to_string())),
            None => Err(CheckpointError::Missing(name.to_string())),
        }
    }

    pub fn u64s(&self, name: &str) -> Result<&[u64], CheckpointError> {
        match self.entries.get(name) {
            Some(Entry::U64(v)) => Ok(v),
            Some(_) => Err(CheckpointError::WrongType(name.to_string())),
            None => Err(CheckpointError::Missing(name.to_string())),
        }
    }

    pub fn u64(&self, name: &str) -> Result<u64, CheckpointError> {
        let v = self.u64s(name)?;
        if v.len() != 1 {
            return Err(CheckpointError::Corrupt(format!("{name} is not a scalar")));
        }
        Ok(v[0])
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, entry) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            match entry {
                Entry::F32 { shape, data } => {
                    out.push(0);
                    out.push(shape.len() as u8);
                    for &d in shape {
                        out.extend_from_slice(&(d as u64).to_le_bytes());
                    }
                    for v in data {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Entry::U64(values) => {
                    out.push(1);
                    out.push(1);
                    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
                    for v in values {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Cursor { bytes, pos: 0 };
        if r.take(4)? != MAGIC.as_slice() {
            return Err(CheckpointError::BadMagic);
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(CheckpointError::BadVersion(version));
        }
        let count = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let name_len = u32::from_le_bytes(r.take(4)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| CheckpointError::Corrupt("entry name is not UTF-8".into()))?;
            let dtype = r.take(1)?[0];
            let rank = r.take(1)?[0] as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(u64::from_le_bytes(r.take(8)?.try_into().unwrap()) as usize);
            }
            let numel: usize = dims.iter().product();
            let entry = match dtype {
                0 => {
                    let raw = r.take(numel * 4)?;
                    let data = raw
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    Entry::F32 { shape: dims, data }
                }
                1 => {
                    let raw = r.take(numel * 8)?;
                    let values = raw
                        .chunks_exact(8)
                        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    Entry::U64(values)
                }
                t => return Err(CheckpointError::Corrupt(format!("unknown dtype tag {t}"))),
            };
            entries.insert(name, entry);
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Corrupt("trailing bytes".into()));
        }
        Ok(Self { entries })
    }

    /// Atomic save: write a temporary sibling, flush, rename into place.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Corrupt("unexpected end of file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn roundtrip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut c = Container::new();
        let t1 = Tensor::randn(&[3, 4, 5], 1.3, &mut rng);
        let t2 = Tensor::randn(&[7], 0.02, &mut rng);
        c.insert_tensor("bank.0.1.a", &t1);
        c.insert_tensor("ext.head.w", &t2);
        c.insert_u64("meta.step", 1234);
        c.insert_u64s("key.routed", &[0, 1, 2, 5]);

        let bytes = c.to_bytes();
        let back = Container::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.tensor("bank.0.1.a").unwrap().bit_checksum(), t1.bit_checksum());
        assert_eq!(back.u64("meta.step").unwrap(), 1234);
        assert_eq!(back.u64s("key.routed").unwrap(), &[0, 1, 2, 5]);
    }

    #[test]
    fn save_and_load_through_the_filesystem() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.rmk");
        let mut c = Container::new();
        c.insert_tensor("w", &Tensor::from_vec(vec![1.0, -2.5, f32::MIN_POSITIVE]));
        c.save(&path).unwrap();
        assert_eq!(Container::load(&path).unwrap(), c);
    }

    #[test]
    fn bad_inputs_are_rejected() {
        assert!(matches!(Container::from_bytes(b"np"), Err(CheckpointError::Corrupt(_))));
        assert!(matches!(Container::from_bytes(b"nope"), Err(CheckpointError::BadMagic)));
        assert!(matches!(
            Container::from_bytes(b"XXXX\x01\x00\x00\x00\x00\x00\x00\x00"),
            Err(CheckpointError::BadMagic)
        ));
        let mut c = Container::new();
        c.insert_u64("n", 1);
        let mut bytes = c.to_bytes();
        bytes[4] = 9; // version
        assert!(matches!(Container::from_bytes(&bytes), Err(CheckpointError::BadVersion(9))));
        assert!(matches!(c.tensor("n"), Err(CheckpointError::WrongType(_))));
        assert!(matches!(c.tensor("missing"), Err(CheckpointError::Missing(_))));
    }
}
