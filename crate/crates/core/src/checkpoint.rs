//! Binary checkpoint of a trained model.
//!
//! Layout (little-endian): magic `GHCK`, `u32` version, `u32` metadata length
//! and UTF-8 `key=value` lines, `u32` tensor count, then per tensor a `u32`
//! name length, the name, a `u32` rank, `u64` extents and `f64` values.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use thiserror::Error;

use crate::heads::{HeadError, HeadKind, Model, ModelSpec};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"GHCK";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Head(#[from] HeadError),
}

pub type Result<T, E = CheckpointError> = std::result::Result<T, E>;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model<f64>,
    /// Free-form metadata stored next to the architecture keys.
    pub meta: BTreeMap<String, String>,
}

fn put_u32<W: Write>(w: &mut W, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_bytes<W: Write>(w: &mut W, b: &[u8]) -> std::io::Result<()> {
    put_u32(w, b.len() as u32)?;
    w.write_all(b)
}

fn get_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn get_bytes<R: Read>(r: &mut R) -> Result<Vec<u8>> {
    let n = get_u32(r)? as usize;
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    Ok(b)
}

fn arch_meta(spec: &ModelSpec) -> Vec<(String, String)> {
    let hidden: Vec<String> = spec.hidden.iter().map(|h| h.to_string()).collect();
    vec![
        ("arch.ambient".into(), spec.ambient.to_string()),
        ("arch.hidden".into(), hidden.join(",")),
        ("arch.latent".into(), spec.latent.to_string()),
        ("arch.classes".into(), spec.classes.to_string()),
        ("arch.head".into(), spec.head.to_string()),
    ]
}

fn parse_arch(meta: &BTreeMap<String, String>) -> Result<ModelSpec> {
    let get = |k: &str| {
        meta.get(k)
            .ok_or_else(|| CheckpointError::Corrupt(format!("missing `{k}`")))
    };
    let num = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| CheckpointError::Corrupt(format!("bad `{k}`")))
    };
    let hidden = get("arch.hidden")?;
    let hidden = if hidden.is_empty() {
        Vec::new()
    } else {
        hidden
            .split(',')
            .map(|h| {
                h.parse()
                    .map_err(|_| CheckpointError::Corrupt("bad `arch.hidden`".into()))
            })
            .collect::<Result<_>>()?
    };
    Ok(ModelSpec {
        ambient: num("arch.ambient")?,
        hidden,
        latent: num("arch.latent")?,
        classes: num("arch.classes")?,
        head: get("arch.head")?
            .parse::<HeadKind>()
            .map_err(CheckpointError::Corrupt)?,
    })
}

impl Checkpoint {
    pub fn new(model: Model<f64>) -> Self {
        Self {
            model,
            meta: BTreeMap::new(),
        }
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        put_u32(&mut w, VERSION)?;
        let mut lines = String::new();
        for (k, v) in arch_meta(&self.model.spec) {
            lines.push_str(&format!("{k}={v}\n"));
        }
        for (k, v) in &self.meta {
            lines.push_str(&format!("{k}={v}\n"));
        }
        put_bytes(&mut w, lines.as_bytes())?;
        let store = &self.model.store;
        put_u32(&mut w, store.len() as u32)?;
        for p in store.iter() {
            put_bytes(&mut w, p.name.as_bytes())?;
            put_u32(&mut w, p.value.rank() as u32)?;
            for &e in p.value.shape() {
                w.write_all(&(e as u64).to_le_bytes())?;
            }
            for &x in p.value.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = get_u32(&mut r)?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let text = String::from_utf8(get_bytes(&mut r)?)
            .map_err(|_| CheckpointError::Corrupt("metadata is not UTF-8".into()))?;
        let mut meta = BTreeMap::new();
        for line in text.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CheckpointError::Corrupt(format!("metadata line `{line}`")))?;
            meta.insert(k.to_string(), v.to_string());
        }
        let spec = parse_arch(&meta)?;
        meta.retain(|k, _| !k.starts_with("arch."));

        let mut model = Model::<f64>::new(spec, 0)?;
        let count = get_u32(&mut r)? as usize;
        if count != model.store.len() {
            return Err(CheckpointError::Corrupt(format!(
                "{count} tensors for an architecture with {}",
                model.store.len()
            )));
        }
        for _ in 0..count {
            let name = String::from_utf8(get_bytes(&mut r)?)
                .map_err(|_| CheckpointError::Corrupt("tensor name is not UTF-8".into()))?;
            let rank = get_u32(&mut r)? as usize;
            let shape = (0..rank)
                .map(|_| get_u64(&mut r).map(|e| e as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = (0..n)
                .map(|_| get_u64(&mut r).map(f64::from_bits))
                .collect::<Result<Vec<_>>>()?;
            let id = model
                .store
                .find(&name)
                .ok_or_else(|| CheckpointError::Corrupt(format!("unknown tensor `{name}`")))?;
            let p = model.store.get_mut(id);
            if p.value.shape() != shape.as_slice() {
                return Err(CheckpointError::Corrupt(format!(
                    "shape of `{name}` differs"
                )));
            }
            p.value =
                Tensor::new(shape, data).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        }
        Ok(Self { model, meta })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let spec = ModelSpec {
            ambient: 5,
            hidden: vec![7, 6],
            latent: 3,
            classes: 4,
            head: HeadKind::Aagmm,
        };
        let mut ck = Checkpoint::new(Model::new(spec, 11).unwrap());
        ck.meta.insert("gate.tau".into(), "1.25".into());
        let mut buf = Vec::new();
        ck.write(&mut buf).unwrap();
        let back = Checkpoint::read(buf.as_slice()).unwrap();
        assert_eq!(back.model.spec, ck.model.spec);
        assert_eq!(back.meta, ck.meta);
        for (a, b) in back.model.store.iter().zip(ck.model.store.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn rejects_garbage() {
        assert!(matches!(
            Checkpoint::read(&b"nope1234"[..]),
            Err(CheckpointError::BadMagic)
        ));
        let mut buf = Vec::new();
        Checkpoint::new(
            Model::new(
                ModelSpec {
                    ambient: 2,
                    hidden: vec![],
                    latent: 2,
                    classes: 2,
                    head: HeadKind::Linear,
                },
                0,
            )
            .unwrap(),
        )
        .write(&mut buf)
        .unwrap();
        buf.truncate(buf.len() - 3);
        assert!(Checkpoint::read(buf.as_slice()).is_err());
    }
}
