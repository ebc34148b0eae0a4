use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng;

use super::{NumericsError, Tensor};

const MAGIC: &[u8; 4] = b"CJPS";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
struct Slot {
    name: String,
    value: Tensor,
    grad: Tensor,
    m: Tensor,
    v: Tensor,
}

/// Named trainable parameters with gradient accumulators and Adam moments.
///
/// Insertion order is preserved and defines the serialization order.
#[derive(Clone, Debug, Default)]
pub struct ParameterStore {
    slots: Vec<Slot>,
    index: HashMap<String, usize>,
    pub(crate) adam_steps: u64,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Re-registering a name replaces its value.
    pub fn insert(&mut self, name: &str, value: Tensor) -> ParamId {
        let shape = value.shape().to_vec();
        let slot = Slot {
            name: name.to_string(),
            grad: Tensor::zeros(&shape),
            m: Tensor::zeros(&shape),
            v: Tensor::zeros(&shape),
            value,
        };
        if let Some(&i) = self.index.get(name) {
            self.slots[i] = slot;
            return ParamId(i);
        }
        self.slots.push(slot);
        self.index.insert(name.to_string(), self.slots.len() - 1);
        ParamId(self.slots.len() - 1)
    }

    /// Uniform initialization in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn insert_uniform<R: Rng>(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data).expect("shape"))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.slots[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.slots[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.slots[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.slots[id.0].grad
    }

    pub(crate) fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.slots[id.0].grad
    }

    pub(crate) fn moments_mut(&mut self, id: ParamId) -> (&mut Tensor, &mut Tensor, &mut Tensor) {
        let s = &mut self.slots[id.0];
        (&mut s.value, &mut s.m, &mut s.v)
    }

    pub fn moments(&self, id: ParamId) -> (&Tensor, &Tensor) {
        let s = &self.slots[id.0];
        (&s.m, &s.v)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.slots.len()).map(ParamId)
    }

    /// Optimizer steps applied so far.
    pub fn steps_taken(&self) -> u64 {
        self.adam_steps
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.slots.iter().map(|s| s.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for s in &mut self.slots {
            s.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Multiplies every gradient accumulator by `factor`.
    pub fn scale_grads(&mut self, factor: f64) {
        for s in &mut self.slots {
            s.grad.data_mut().iter_mut().for_each(|g| *g *= factor);
        }
    }

    /// Adds gradients of `other` (same layout) into this store.
    pub fn accumulate_grads(&mut self, other: &ParameterStore) {
        for (a, b) in self.slots.iter_mut().zip(&other.slots) {
            for (x, y) in a.grad.data_mut().iter_mut().zip(b.grad.data()) {
                *x += y;
            }
        }
    }

    /// Flat binary layout: magic, version, count, then per parameter the
    /// name length, name bytes, rank, dims and raw little-endian f64 values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.num_scalars() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.slots.len() as u32).to_le_bytes());
        for s in &self.slots {
            out.extend_from_slice(&(s.name.len() as u32).to_le_bytes());
            out.extend_from_slice(s.name.as_bytes());
            out.extend_from_slice(&(s.value.shape().len() as u32).to_le_bytes());
            for &d in s.value.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in s.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NumericsError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(NumericsError::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(NumericsError::Format(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut store = ParameterStore::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|e| NumericsError::Format(e.to_string()))?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(f64::from_le_bytes(r.take(8)?.try_into().unwrap()));
            }
            store.insert(&name, Tensor::new(shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(NumericsError::Format("trailing bytes".into()));
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<(), NumericsError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NumericsError> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Copies values of parameters present in `other` by name.
    pub fn copy_values_from(&mut self, other: &ParameterStore) -> Result<(), NumericsError> {
        for s in &mut self.slots {
            let Some(id) = other.id(&s.name) else {
                return Err(NumericsError::Format(format!("missing parameter {}", s.name)));
            };
            let v = other.value(id);
            if v.shape() != s.value.shape() {
                return Err(NumericsError::ShapeMismatch {
                    op: "copy_values_from",
                    left: s.value.shape().to_vec(),
                    right: v.shape().to_vec(),
                });
            }
            s.value = v.clone();
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NumericsError> {
        if self.pos + n > self.bytes.len() {
            return Err(NumericsError::Format("truncated parameter file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, NumericsError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, NumericsError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_init_respects_fan_in_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParameterStore::new();
        let id = store.insert_uniform("w", &[16, 4], 16, &mut rng);
        assert!(store.value(id).data().iter().all(|v| v.abs() <= 0.25));
        assert_eq!(store.grad(id).shape(), &[16, 4]);
    }

    #[test]
    fn bytes_round_trip_and_reject_corruption() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParameterStore::new();
        store.insert_uniform("a", &[3, 2], 3, &mut rng);
        store.insert("b.bias", Tensor::vector(vec![1.5, -2.0]));
        let bytes = store.to_bytes();
        let back = ParameterStore::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.name(ParamId(1)), "b.bias");
        assert!(ParameterStore::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(ParameterStore::from_bytes(&bad).is_err());
    }

    #[test]
    fn zero_grads_resets_accumulators() {
        let mut store = ParameterStore::new();
        let id = store.insert("p", Tensor::vector(vec![1.0, 2.0]));
        store.grad_mut(id).data_mut()[1] = 4.0;
        store.zero_grads();
        assert!(store.grad(id).data().iter().all(|&g| g == 0.0));
    }
}
