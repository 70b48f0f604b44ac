//! Named parameter collections and a flat binary checkpoint format.
//!
//! Parameter names are hierarchical dotted paths (`backbone.block0.attn.wq`).
//! Iteration order is always lexicographic (BTreeMap), which makes every
//! aggregation, serialization, and update loop deterministic.

use std::collections::BTreeMap;
use std::io::{Read as IoRead, Write as IoWrite};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const CHECKPOINT_MAGIC: &[u8; 4] = b"FSNP";
const CHECKPOINT_VERSION: u32 = 1;

/// An ordered map of named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    map: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.map.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| Error::invalid("ParamSet::get", format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.map
            .get_mut(name)
            .ok_or_else(|| Error::invalid("ParamSet::get_mut", format!("unknown parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.map.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total number of scalars across all tensors.
    pub fn scalar_count(&self) -> usize {
        self.map.values().map(|t| t.numel()).sum()
    }

    /// Set the trainable flag on every tensor.
    pub fn set_trainable(&mut self, trainable: bool) {
        for t in self.map.values_mut() {
            t.requires_grad = trainable;
        }
    }

    /// Extract the named subset (error if any name is missing).
    pub fn subset(&self, names: &[String]) -> Result<ParamSet> {
        let mut out = ParamSet::new();
        for n in names {
            out.insert(n.clone(), self.get(n)?.clone());
        }
        Ok(out)
    }

    /// True when both sets have identical names, shapes, and values.
    /// True when names, shapes, and every f64 bit pattern agree (NaN-safe,
    /// and distinguishes -0.0 from +0.0 — the right notion for determinism
    /// checks, unlike `==`).
    pub fn bitwise_eq(&self, other: &ParamSet) -> bool {
        self.map.len() == other.map.len()
            && self.map.iter().zip(other.map.iter()).all(|((an, at), (bn, bt))| {
                an == bn
                    && at.shape() == bt.shape()
                    && at
                        .data()
                        .iter()
                        .zip(bt.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    /// Two sets have the same schema when names and shapes agree.
    pub fn same_schema(&self, other: &ParamSet) -> bool {
        self.map.len() == other.map.len()
            && self
                .map
                .iter()
                .zip(other.map.iter())
                .all(|((an, at), (bn, bt))| an == bn && at.shape() == bt.shape())
    }

    /// Serialize to a flat binary checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.map.len() as u32).to_le_bytes())?;
        for (name, t) in &self.map {
            let nb = name.as_bytes();
            w.write_all(&(nb.len() as u32).to_le_bytes())?;
            w.write_all(nb)?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Load a checkpoint written by [`ParamSet::save`].
    pub fn load(path: &Path) -> Result<ParamSet> {
        let file = std::fs::File::open(path)?;
        let mut r = std::io::BufReader::new(file);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Checkpoint("file too short for header".into()))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic bytes".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let count = read_u32(&mut r)? as usize;
        let mut out = ParamSet::new();
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            if name_len > 4096 {
                return Err(Error::Checkpoint(format!("implausible name length {name_len}")));
            }
            let mut name_buf = vec![0u8; name_len];
            r.read_exact(&mut name_buf)
                .map_err(|_| Error::Checkpoint("truncated name".into()))?;
            let name = String::from_utf8(name_buf)
                .map_err(|_| Error::Checkpoint("non-utf8 name".into()))?;
            let ndim = read_u32(&mut r)? as usize;
            if ndim == 0 || ndim > 8 {
                return Err(Error::Checkpoint(format!("implausible rank {ndim} for {name}")));
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(read_u64(&mut r)? as usize);
            }
            let numel: usize = shape.iter().product();
            if numel > (1 << 30) {
                return Err(Error::Checkpoint(format!("implausible size for {name}")));
            }
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(read_f64(&mut r)?);
            }
            out.insert(name.clone(), Tensor::new(shape, data).map_err(|e| {
                Error::Checkpoint(format!("tensor {name}: {e}"))
            })?);
        }
        Ok(out)
    }
}

fn read_u32<R: IoRead>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| Error::Checkpoint("truncated u32".into()))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: IoRead>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|_| Error::Checkpoint("truncated u64".into()))?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: IoRead>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|_| Error::Checkpoint("truncated f64".into()))?;
    Ok(f64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{gaussian, substream};

    fn sample_set() -> ParamSet {
        let mut rng = substream(5, "params-test", &[]);
        let mut set = ParamSet::new();
        for (name, shape) in [
            ("alpha.weight", vec![3usize, 4]),
            ("alpha.bias", vec![4]),
            ("beta.table", vec![2, 2, 2]),
        ] {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|_| gaussian(&mut rng)).collect();
            set.insert(name, Tensor::new(shape, data).unwrap());
        }
        set
    }

    #[test]
    fn save_load_round_trip_is_bitwise_exact() {
        let set = sample_set();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        set.save(&path).unwrap();
        let loaded = ParamSet::load(&path).unwrap();
        assert!(set.bitwise_eq(&loaded));
    }

    #[test]
    fn load_rejects_corrupted_files() {
        let dir = tempfile::tempdir().unwrap();
        let good = dir.path().join("good.bin");
        sample_set().save(&good).unwrap();
        let bytes = std::fs::read(&good).unwrap();

        let bad_magic = dir.path().join("bad_magic.bin");
        let mut b = bytes.clone();
        b[0] = b'X';
        std::fs::write(&bad_magic, &b).unwrap();
        assert!(matches!(ParamSet::load(&bad_magic), Err(Error::Checkpoint(_))));

        let truncated = dir.path().join("trunc.bin");
        std::fs::write(&truncated, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(ParamSet::load(&truncated), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn schema_comparison_and_counting() {
        let a = sample_set();
        let mut b = a.clone();
        assert!(a.same_schema(&b));
        assert_eq!(a.scalar_count(), 12 + 4 + 8);
        b.insert("gamma", Tensor::zeros(vec![1]));
        assert!(!a.same_schema(&b));
    }

    #[test]
    fn subset_picks_named_tensors() {
        let a = sample_set();
        let s = a.subset(&["alpha.bias".into()]).unwrap();
        assert_eq!(s.len(), 1);
        assert!(s.contains("alpha.bias"));
        assert!(a.subset(&["missing".into()]).is_err());
    }
}
