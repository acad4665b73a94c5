use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};

use rand::Rng;

use super::{Tensor, TensorError};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DLBC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
struct Entry {
    name: String,
    tensor: Tensor,
    frozen: bool,
}

/// Named parameter tensors, in registration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id);
        self.entries.push(Entry {
            name,
            tensor,
            frozen: false,
        });
        id
    }

    /// Uniform Glorot initialization for a `fan_in × fan_out` weight.
    pub fn add_glorot<R: Rng>(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> ParamId {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-a..a)).collect();
        self.add(name, Tensor::matrix(fan_in, fan_out, data).expect("shape"))
    }

    pub fn add_normal<R: Rng>(&mut self, name: &str, rows: usize, cols: usize, std: f64, rng: &mut R) -> ParamId {
        let data = (0..rows * cols).map(|_| std * standard_normal(rng)).collect();
        self.add(name, Tensor::matrix(rows, cols, data).expect("shape"))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.entries[id.0].frozen
    }

    pub fn freeze_all(&mut self) {
        self.entries.iter_mut().for_each(|e| e.frozen = true);
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Scalar count of parameters that are not frozen.
    pub fn trainable_scalars(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| !e.frozen)
            .map(|e| e.tensor.len())
            .sum()
    }

    pub fn total_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    /// Raw little-endian bytes of every value, for equality checks.
    pub fn value_bytes(&self) -> Vec<u8> {
        self.entries
            .iter()
            .flat_map(|e| e.tensor.data().iter().flat_map(|x| x.to_le_bytes()))
            .collect()
    }

    /// Writes the checkpoint container: magic, version, metadata pairs, then
    /// each tensor as name length, name bytes, rank, dims and
    /// little-endian `f32` values.
    pub fn write_checkpoint<W: Write>(
        &self,
        mut w: W,
        metadata: &BTreeMap<String, String>,
    ) -> Result<(), TensorError> {
        let io = |e: std::io::Error| TensorError::Checkpoint(e.to_string());
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(metadata.len() as u32).to_le_bytes());
        for (k, v) in metadata {
            for s in [k, v] {
                buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
                buf.extend_from_slice(s.as_bytes());
            }
        }
        buf.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            buf.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            buf.extend_from_slice(e.name.as_bytes());
            let shape = e.tensor.shape();
            buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &x in e.tensor.data() {
                buf.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        w.write_all(&buf).map_err(io)
    }

    /// Reads a checkpoint written by [`write_checkpoint`](Self::write_checkpoint).
    pub fn read_checkpoint<R: Read>(
        mut r: R,
    ) -> Result<(ParamStore, BTreeMap<String, String>), TensorError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)
            .map_err(|e| TensorError::Checkpoint(e.to_string()))?;
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        if cur.take(4)? != CHECKPOINT_MAGIC {
            return Err(TensorError::Checkpoint("bad magic".into()));
        }
        let version = cur.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(TensorError::Checkpoint(format!(
                "unsupported version {version}"
            )));
        }
        let mut metadata = BTreeMap::new();
        for _ in 0..cur.u32()? {
            let k = cur.string()?;
            let v = cur.string()?;
            metadata.insert(k, v);
        }
        let mut store = ParamStore::new();
        for _ in 0..cur.u32()? {
            let name = cur.string()?;
            let rank = cur.u32()? as usize;
            let shape = (0..rank)
                .map(|_| cur.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let n: usize = shape.iter().product();
            let raw = cur.take(n * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            store.add(name, Tensor::new(shape, data)?);
        }
        if cur.pos != bytes.len() {
            return Err(TensorError::Checkpoint("trailing bytes".into()));
        }
        Ok((store, metadata))
    }

    /// Copies values from `other` by name; every parameter here must be
    /// present there with the same shape.
    pub fn load_values_from(&mut self, other: &ParamStore) -> Result<(), TensorError> {
        for e in &mut self.entries {
            let src = other
                .find(&e.name)
                .map(|id| other.get(id))
                .ok_or_else(|| TensorError::Checkpoint(format!("missing tensor {}", e.name)))?;
            if src.shape() != e.tensor.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "load_values_from",
                    left: e.tensor.shape().to_vec(),
                    right: src.shape().to_vec(),
                });
            }
            e.tensor = src.clone();
        }
        Ok(())
    }

    /// Rounds every value to `f32` precision, matching what a checkpoint
    /// round trip produces.
    pub fn round_to_f32(&mut self) {
        for e in &mut self.entries {
            e.tensor
                .data_mut()
                .iter_mut()
                .for_each(|x| *x = *x as f32 as f64);
        }
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TensorError> {
        if self.pos + n > self.bytes.len() {
            return Err(TensorError::Checkpoint("truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, TensorError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self) -> Result<String, TensorError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|e| TensorError::Checkpoint(e.to_string()))
    }
}

/// Box-Muller standard normal draw.
pub(crate) fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip() {
        let mut store = ParamStore::new();
        store.add("a.weight", Tensor::matrix(2, 3, vec![1.0, -2.5, 0.125, 3.0, 4.0, 5.0]).unwrap());
        store.add("b", Tensor::new(vec![4], vec![0.1, 0.2, 0.3, 0.4]).unwrap());
        let mut meta = BTreeMap::new();
        meta.insert("vocab_digest".to_string(), "abc".to_string());
        let mut buf = Vec::new();
        store.write_checkpoint(&mut buf, &meta).unwrap();
        assert_eq!(&buf[..4], CHECKPOINT_MAGIC);
        let (back, meta2) = ParamStore::read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(meta2, meta);
        assert_eq!(back.len(), 2);
        let mut rounded = store.clone();
        rounded.round_to_f32();
        assert_eq!(back.value_bytes(), rounded.value_bytes());
        assert_eq!(back.get(back.find("b").unwrap()).shape(), &[4]);
    }

    #[test]
    fn truncated_checkpoint_fails() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::zeros(&[2, 2]));
        let mut buf = Vec::new();
        store.write_checkpoint(&mut buf, &BTreeMap::new()).unwrap();
        buf.pop();
        assert!(ParamStore::read_checkpoint(buf.as_slice()).is_err());
    }
}
