//! Named parameters and the `PCK1` checkpoint format.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PCK1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    /// Running statistics are stored alongside weights but never optimized.
    pub trainable: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn insert(&mut self, name: &str, value: Tensor, trainable: bool) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let grad = Tensor::zeros(value.shape());
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            value,
            grad,
            trainable,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        self.insert(name, value, true)
    }

    /// A non-trainable buffer (e.g. batch-norm running statistics).
    pub fn add_buffer(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        self.insert(name, value, false)
    }

    /// Uniform init in `[-bound, bound]` with `bound = sqrt(6 / fan_in)`.
    pub fn add_uniform(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        rng: &mut impl Rng,
    ) -> Result<ParamId> {
        let bound = (6.0 / fan_in as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        self.add(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Total number of scalar values across trainable parameters.
    pub fn num_trainable(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    /// Records the parameter's current value as a differentiable leaf.
    pub fn var(&self, tape: &mut Tape, id: ParamId) -> Var {
        let v = tape.leaf(self.params[id.0].value.clone());
        tape.bound.push((id.0, v));
        v
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Adds the tape gradients of every bound parameter into `grad`.
    pub fn accumulate_grads(&mut self, tape: &Tape, grads: &Gradients) {
        for &(idx, var) in &tape.bound {
            if let Some(g) = grads.get(var) {
                let p = &mut self.params[idx];
                p.grad
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .for_each(|(a, b)| *a += b);
            }
        }
    }

    pub fn write_checkpoint(&self, mut w: impl Write) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for p in &self.params {
            let name = p.name.as_bytes();
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&(p.value.rank() as u32).to_le_bytes())?;
            for &d in p.value.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for v in p.value.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    /// Reads `(name, tensor)` pairs from a checkpoint stream.
    pub fn read_checkpoint(r: impl Read) -> Result<Vec<(String, Tensor)>> {
        let mut r = crate::data::formats::ByteReader::new(r);
        let magic = r.bytes(4)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: format!("bad checkpoint magic {magic:?}"),
            });
        }
        let count = r.u32()? as usize;
        let mut out = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let at = r.offset();
            let name = String::from_utf8(r.bytes(len)?).map_err(|_| Error::Format {
                offset: at,
                msg: "parameter name is not UTF-8".into(),
            })?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let at = r.offset();
            let t = Tensor::new(shape, data).map_err(|e| Error::Format {
                offset: at,
                msg: e.to_string(),
            })?;
            out.push((name, t));
        }
        Ok(out)
    }

    /// Overwrites values from a checkpoint. Every parameter must be present
    /// with a matching shape.
    pub fn load(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::open(path)?;
        let entries = Self::read_checkpoint(std::io::BufReader::new(file))?;
        self.load_entries(entries)
    }

    pub fn load_entries(&mut self, entries: Vec<(String, Tensor)>) -> Result<()> {
        let mut found: HashMap<String, Tensor> = entries.into_iter().collect();
        for p in &mut self.params {
            let t = found
                .remove(&p.name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks parameter {}", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(Error::Config(format!(
                    "checkpoint parameter {} has shape {:?}, model expects {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t;
        }
        if let Some(extra) = found.keys().next() {
            return Err(Error::Config(format!("checkpoint has unknown parameter {extra}")));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        store.add_uniform("a/w", &[3, 2], 3, &mut rng).unwrap();
        store.add_buffer("a/running_var", Tensor::full(&[2], 1.0)).unwrap();
        let mut bytes = Vec::new();
        store.write_checkpoint(&mut bytes).unwrap();
        assert_eq!(&bytes[..4], b"PCK1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 2);

        let entries = ParamStore::read_checkpoint(&bytes[..]).unwrap();
        let mut other = store.clone();
        other.iter_mut().for_each(|p| p.value.data_mut().fill(0.0));
        other.load_entries(entries).unwrap();
        assert_eq!(other, store);
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::full(&[4], 2.0)).unwrap();
        let mut bytes = Vec::new();
        store.write_checkpoint(&mut bytes).unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(
            ParamStore::read_checkpoint(&bytes[..]),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn shape_mismatch_on_load() {
        let mut a = ParamStore::new();
        a.add("w", Tensor::zeros(&[2])).unwrap();
        let mut b = ParamStore::new();
        b.add("w", Tensor::zeros(&[3])).unwrap();
        let mut bytes = Vec::new();
        a.write_checkpoint(&mut bytes).unwrap();
        let entries = ParamStore::read_checkpoint(&bytes[..]).unwrap();
        assert!(b.load_entries(entries).is_err());
    }
}
