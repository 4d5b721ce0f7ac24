//! Named parameter storage, gradient accumulation and the `STGP` checkpoint format.
//!
//! Checkpoint layout (little-endian):
//!
//! ```text
//! "STGP"  version:u32  count:u32
//! count × { name_len:u16  name:utf8  rank:u8  dims:u32×rank  payload:f32×prod(dims) }
//! ```

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::binio::OffsetReader;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"STGP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Parameter<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub grad: Tensor<T>,
    pub trainable: bool,
}

/// Ordered collection of uniquely named parameters.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    index: HashMap<String, ParamId>,
}

/// Gradients produced by one backward pass, indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub(crate) grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name `{name}`")));
        }
        if name.len() > u16::MAX as usize {
            return Err(Error::invalid("parameter name too long"));
        }
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            grad: Tensor::zeros_like(&tensor),
            tensor,
            trainable: true,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar entries over all parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Adds `grads` into the stored accumulators; they persist until [`zero_grad`](Self::zero_grad).
    pub fn accumulate(&mut self, grads: &Gradients<T>) {
        for (p, g) in self.params.iter_mut().zip(&grads.grads) {
            if let Some(g) = g {
                for (acc, &v) in p.grad.data_mut().iter_mut().zip(g.data()) {
                    *acc += v;
                }
            }
        }
    }

    pub fn grad_norm(&self) -> T {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .flat_map(|p| p.grad.data().iter())
            .map(|&g| g * g)
            .sum::<T>()
            .sqrt()
    }

    /// Copies every parameter into another precision; gradients are reset.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                    grad: Tensor::zeros_like(&p.tensor.cast()),
                    trainable: p.trainable,
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for p in &self.params {
            w.write_all(&(p.name.len() as u16).to_le_bytes())?;
            w.write_all(p.name.as_bytes())?;
            w.write_all(&[p.tensor.rank() as u8])?;
            for &d in p.tensor.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(p.tensor.numel() * 4);
            for &x in p.tensor.data() {
                buf.extend_from_slice(&x.as_f32().to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        w.flush()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_checkpoint(std::io::BufWriter::new(file))
            .map_err(|e| Error::io(path, e))
    }

    /// Overwrites parameter values from checkpoint entries.
    ///
    /// Entries must match this store's names, order and shapes exactly; the
    /// first mismatch is reported by name.
    pub fn load_entries(&mut self, entries: Vec<(String, Tensor<f32>)>) -> Result<()> {
        for (i, p) in self.params.iter().enumerate() {
            let Some((name, tensor)) = entries.get(i) else {
                return Err(Error::CheckpointMismatch {
                    name: p.name.clone(),
                    message: "missing from checkpoint".into(),
                });
            };
            if *name != p.name {
                return Err(Error::CheckpointMismatch {
                    name: p.name.clone(),
                    message: format!("checkpoint has `{name}` at position {i}"),
                });
            }
            if tensor.shape() != p.tensor.shape() {
                return Err(Error::CheckpointMismatch {
                    name: p.name.clone(),
                    message: format!(
                        "shape {:?} in checkpoint, {:?} in model",
                        tensor.shape(),
                        p.tensor.shape()
                    ),
                });
            }
        }
        if entries.len() > self.params.len() {
            return Err(Error::CheckpointMismatch {
                name: entries[self.params.len()].0.clone(),
                message: "not present in model".into(),
            });
        }
        for (p, (_, t)) in self.params.iter_mut().zip(entries) {
            p.tensor = Tensor::from_parts(
                t.shape().to_vec(),
                t.data().iter().map(|&x| T::from_f32_exact(x)).collect(),
            );
        }
        Ok(())
    }

    pub fn load(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let entries = read_checkpoint_file(path)?;
        self.load_entries(entries)
    }
}

/// Parses an `STGP` stream into `(name, tensor)` pairs in file order.
pub fn read_checkpoint<R: Read>(reader: R) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut r = OffsetReader::new(reader);
    let magic = r.take::<4>("magic")?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::format(0, format!("bad magic {magic:?}, expected \"STGP\"")));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let count = r.u32("parameter count")?;
    let mut out = Vec::with_capacity(count.min(4096) as usize);
    for _ in 0..count {
        let name_at = r.offset;
        let len = u16::from_le_bytes(r.take::<2>("name length")?) as usize;
        let mut name = vec![0u8; len];
        r.fill(&mut name, "name")?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::format(name_at + 2, "parameter name is not UTF-8"))?;
        let rank_at = r.offset;
        let rank = r.take::<1>("rank")?[0] as usize;
        if rank == 0 {
            return Err(Error::format(rank_at, format!("parameter `{name}` has rank 0")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            let at = r.offset;
            let d = r.u32("dimension")? as usize;
            if d == 0 {
                return Err(Error::format(at, format!("parameter `{name}` has a zero dimension")));
            }
            dims.push(d);
        }
        let n: usize = dims.iter().product();
        let mut bytes = vec![0u8; n * 4];
        r.fill(&mut bytes, "payload")?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push((name, Tensor::from_parts(dims, data)));
    }
    Ok(out)
}

pub fn read_checkpoint_file(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor<f32>)>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(std::io::BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.add("a.weight", Tensor::new(&[2, 3], vec![1., -2., 3.5, 0., 1e-7, -0.0]).unwrap())
            .unwrap();
        s.add("a.bias", Tensor::new(&[2], vec![f32::MAX, f32::MIN_POSITIVE]).unwrap())
            .unwrap();
        s
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = store();
        assert!(s.add("a.bias", Tensor::zeros(&[1]).unwrap()).is_err());
    }

    #[test]
    fn corrupted_magic_names_offset_zero() {
        let mut bytes = Vec::new();
        store().write_checkpoint(&mut bytes).unwrap();
        bytes[0] = b'X';
        match read_checkpoint(&bytes[..]) {
            Err(Error::Format { offset: 0, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn truncation_reports_offset() {
        let mut bytes = Vec::new();
        store().write_checkpoint(&mut bytes).unwrap();
        let cut = bytes.len() - 3;
        match read_checkpoint(&bytes[..cut]) {
            Err(Error::Format { offset, .. }) => assert!(offset as usize <= cut),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn mismatch_names_first_parameter() {
        let mut bytes = Vec::new();
        store().write_checkpoint(&mut bytes).unwrap();
        let mut other = ParamStore::<f32>::new();
        other.add("a.weight", Tensor::zeros(&[3, 2]).unwrap()).unwrap();
        match other.load_entries(read_checkpoint(&bytes[..]).unwrap()) {
            Err(Error::CheckpointMismatch { name, .. }) => assert_eq!(name, "a.weight"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn gradients_accumulate_until_zeroed() {
        let mut s = store();
        let g = Gradients {
            grads: vec![Some(Tensor::ones(&[2, 3]).unwrap()), None],
        };
        s.accumulate(&g);
        s.accumulate(&g);
        assert!(s.get(ParamId(0)).grad.data().iter().all(|&x| x == 2.0));
        s.zero_grad();
        assert!(s.get(ParamId(0)).grad.data().iter().all(|&x| x == 0.0));
    }

    proptest! {
        #[test]
        fn checkpoint_round_trip_is_bit_exact(
            values in proptest::collection::vec(any::<f32>(), 1..40),
            name in "[a-z_.]{1,24}",
        ) {
            let mut s = ParamStore::new();
            let n = values.len();
            s.add(name.clone(), Tensor::new(&[n], values.clone()).unwrap()).unwrap();
            let mut bytes = Vec::new();
            s.write_checkpoint(&mut bytes).unwrap();
            let entries = read_checkpoint(&bytes[..]).unwrap();
            prop_assert_eq!(&entries[0].0, &name);
            let got: Vec<u32> = entries[0].1.data().iter().map(|x| x.to_bits()).collect();
            let want: Vec<u32> = values.iter().map(|x| x.to_bits()).collect();
            prop_assert_eq!(got, want);
        }
    }
}
