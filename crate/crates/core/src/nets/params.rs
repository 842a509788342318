use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::container::{read_file, Reader, Writer};
use crate::error::{Error, Result};
use crate::tensor::{numel, Precision, Real, Tensor};

const MAGIC: &[u8; 8] = b"UPNCKPT\0";
const VERSION: u32 = 1;

/// Named parameter tensors, iterated in name order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSet<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Default for ParameterSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParameterSet<T> {
    pub fn new() -> Self {
        ParameterSet {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter {name}")));
        }
        self.tensors.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Uniform in `±1/sqrt(fan_in)`.
    pub(crate) fn init_fan_in<R: Rng + ?Sized>(&mut self, name: String, shape: &[usize], fan_in: usize, rng: &mut R) -> Result<()> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let data = (0..numel(shape))
            .map(|_| T::of(rng.random_range(-bound..bound)))
            .collect();
        self.insert(name, Tensor::new(shape.to_vec(), data)?)
    }

    /// Adds every tensor as a graph leaf: variables when `trainable`,
    /// constants otherwise.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| {
                let v = if trainable { g.variable(t.clone()) } else { g.constant(t.clone()) };
                (k.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::all_finite)
    }

    /// Serializes to the checkpoint container. Record layout after the
    /// header: `u32` count, then per tensor `u16` name length, name bytes,
    /// `u8` precision (0 = f32, 1 = f64), `u8` rank, rank `u32` extents,
    /// raw little-endian values.
    pub fn to_bytes(&self, header: &str) -> Vec<u8> {
        let mut w = Writer::new(MAGIC, VERSION, header);
        self.write_records(&mut w);
        w.buf
    }

    fn write_records(&self, w: &mut Writer) {
        w.u32(self.tensors.len() as u32);
        for (name, t) in &self.tensors {
            w.u16(name.len() as u16);
            w.bytes(name.as_bytes());
            w.u8(match T::PRECISION {
                Precision::F32 => 0,
                Precision::F64 => 1,
            });
            w.u8(t.rank() as u8);
            for &d in t.shape() {
                w.u32(d as u32);
            }
            for &v in t.data() {
                v.write_le(&mut w.buf);
            }
        }
    }

    pub fn save(&self, path: &Path, header: &str) -> Result<()> {
        let mut w = Writer::new(MAGIC, VERSION, header);
        self.write_records(&mut w);
        w.finish(path)
    }

    /// Reads a checkpoint; returns the parameters and the header text.
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let bytes = read_file(path)?;
        Self::from_bytes(path, &bytes)
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<(Self, String)> {
        Self::parse(path, bytes, false)
    }

    /// Like [`ParameterSet::load`], converting stored values of either
    /// precision to `T`.
    pub fn load_converting(path: &Path) -> Result<(Self, String)> {
        let bytes = read_file(path)?;
        Self::parse(path, &bytes, true)
    }

    fn parse(path: &Path, bytes: &[u8], convert: bool) -> Result<(Self, String)> {
        let (mut r, header) = Reader::open(path, bytes, MAGIC, VERSION)?;
        let count = r.u32()?;
        let mut set = ParameterSet::new();
        for _ in 0..count {
            let n = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(n)?)
                .map_err(|_| r.err("parameter name is not UTF-8"))?
                .to_string();
            let precision = match r.u8()? {
                0 => Precision::F32,
                1 => Precision::F64,
                p => return Err(r.err(format!("unknown precision tag {p}"))),
            };
            if precision != T::PRECISION && !convert {
                return Err(r.err(format!("{name} stored as {precision:?}, requested {:?}", T::PRECISION)));
            }
            let rank = r.u8()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let width = precision.byte_width();
            let raw = r.take(numel(&shape) * width)?;
            let data = match precision {
                _ if precision == T::PRECISION => raw.chunks_exact(width).map(T::read_le).collect(),
                Precision::F32 => raw.chunks_exact(width).map(|c| T::of(f32::read_le(c) as f64)).collect(),
                Precision::F64 => raw.chunks_exact(width).map(|c| T::of(f64::read_le(c))).collect(),
            };
            set.insert(name, Tensor::new(shape, data)?)?;
        }
        r.finish()?;
        Ok((set, header))
    }
}

/// Graph handles for a bound [`ParameterSet`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Pairs names with existing graph handles.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Bound {
            vars: pairs.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name}")))
    }

    /// Handles in name order, matching [`ParameterSet::iter`].
    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().copied().collect()
    }

    pub fn names(&self) -> Vec<String> {
        self.vars.keys().cloned().collect()
    }

    /// Handles whose names start with `prefix`, in name order.
    pub fn with_prefix(&self, prefix: &str) -> Vec<(String, Var)> {
        self.vars
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.clone(), *v))
            .collect()
    }
}
