//! Versioned binary checkpoint container.
//!
//! Layout: magic bytes, format version, the originating config hash, a
//! free-form JSON metadata blob, then every parameter store as named
//! row-major `f64` arrays. All integers little endian, all strings UTF-8
//! with a `u32` length prefix.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParameterStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"MDCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct StoreSnapshot {
    pub label: String,
    pub entries: Vec<(String, Tensor)>,
}

impl StoreSnapshot {
    pub fn of(store: &ParameterStore) -> Self {
        StoreSnapshot {
            label: store.label().to_string(),
            entries: store
                .entries()
                .map(|(name, tensor)| (name.to_string(), tensor.clone()))
                .collect(),
        }
    }

    /// Writes the snapshot values into `store`, which must already hold
    /// entries of the same names and shapes.
    pub fn restore(&self, store: &mut ParameterStore) -> Result<()> {
        if store.n_tensors() != self.entries.len() {
            return Err(Error::Checkpoint(format!(
                "store `{}` holds {} tensors, snapshot has {}",
                store.label(),
                store.n_tensors(),
                self.entries.len()
            )));
        }
        for (name, tensor) in &self.entries {
            store.set_value(name, tensor.clone())?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config_hash: String,
    /// JSON blob for anything structural: template, factor map, progress.
    pub meta: String,
    pub stores: Vec<StoreSnapshot>,
}

impl Checkpoint {
    pub fn store(&self, label: &str) -> Result<&StoreSnapshot> {
        self.stores
            .iter()
            .find(|s| s.label == label)
            .ok_or_else(|| Error::Checkpoint(format!("no store `{label}` in checkpoint")))
    }
}

fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let len = read_u32(r)? as usize;
    if len > 1 << 26 {
        return Err(Error::Checkpoint(format!("string length {len} not plausible")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::Checkpoint("non-UTF-8 string".into()))
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    write_str(&mut w, &ckpt.config_hash)?;
    write_str(&mut w, &ckpt.meta)?;
    w.write_all(&(ckpt.stores.len() as u32).to_le_bytes())?;
    for store in &ckpt.stores {
        write_str(&mut w, &store.label)?;
        w.write_all(&(store.entries.len() as u32).to_le_bytes())?;
        for (name, tensor) in &store.entries {
            write_str(&mut w, name)?;
            let (rows, cols) = tensor.shape();
            w.write_all(&(rows as u32).to_le_bytes())?;
            w.write_all(&(cols as u32).to_le_bytes())?;
            for v in tensor.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint file",
            path.display()
        )));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "checkpoint version {version}, this build reads {VERSION}"
        )));
    }
    let config_hash = read_str(&mut r)?;
    let meta = read_str(&mut r)?;
    let n_stores = read_u32(&mut r)? as usize;
    let mut stores = Vec::with_capacity(n_stores);
    for _ in 0..n_stores {
        let label = read_str(&mut r)?;
        let n_entries = read_u32(&mut r)? as usize;
        let mut entries = Vec::with_capacity(n_entries);
        for _ in 0..n_entries {
            let name = read_str(&mut r)?;
            let rows = read_u32(&mut r)? as usize;
            let cols = read_u32(&mut r)? as usize;
            let mut data = vec![0.0f64; rows * cols];
            let mut buf = [0u8; 8];
            for v in &mut data {
                r.read_exact(&mut buf)?;
                *v = f64::from_le_bytes(buf);
            }
            entries.push((name, Tensor::matrix(rows, cols, data)?));
        }
        stores.push(StoreSnapshot { label, entries });
    }
    Ok(Checkpoint {
        config_hash,
        meta,
        stores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Mlp, MlpSpec};
    use crate::rng::derive_rng;

    #[test]
    fn roundtrip_preserves_every_bit() {
        let mut store = ParameterStore::new("trip");
        let mut rng = derive_rng(1, "ckpt");
        Mlp::new(&mut store, "net", MlpSpec::new(3, &[5], 2), &mut rng).unwrap();
        let before = store.content_hash();

        let dir = std::env::temp_dir().join("metadreamer-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("roundtrip.ckpt");
        let ckpt = Checkpoint {
            config_hash: "abc123".into(),
            meta: r#"{"iteration":7}"#.into(),
            stores: vec![StoreSnapshot::of(&store)],
        };
        save_checkpoint(&path, &ckpt).unwrap();

        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.config_hash, "abc123");
        assert_eq!(loaded.meta, r#"{"iteration":7}"#);

        let mut fresh = ParameterStore::new("trip");
        let mut rng = derive_rng(2, "ckpt");
        Mlp::new(&mut fresh, "net", MlpSpec::new(3, &[5], 2), &mut rng).unwrap();
        assert_ne!(fresh.content_hash(), before);
        loaded.store("trip").unwrap().restore(&mut fresh).unwrap();
        assert_eq!(fresh.content_hash(), before);
    }

    #[test]
    fn rejects_foreign_files() {
        let dir = std::env::temp_dir().join("metadreamer-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("garbage.ckpt");
        std::fs::write(&path, b"not a checkpoint at all").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
