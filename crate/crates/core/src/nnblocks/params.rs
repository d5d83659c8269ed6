//! Named parameter storage, deterministic initialisation, tape binding and
//! the binary checkpoint container.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "ROSSCKPT"
//! version  u32      1
//! seed     u64      RNG seed used at initialisation
//! count    u32      number of tensors
//! count × {
//!   name_len u32, name (UTF-8), rank u32, extents u64 × rank,
//!   data     f64 × numel (IEEE-754 little-endian)
//! }
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::NnError;
use crate::autodiff::{Tape, Tensor, Var};
use crate::scalar::Real;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ROSSCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Initialisation rule for one parameter tensor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// `U(±sqrt(6 / (fan_in + fan_out)))`
    XavierUniform { fan_in: usize, fan_out: usize },
    /// `U(±sqrt(6 / fan_in))`
    HeUniform { fan_in: usize },
    Zeros,
    Ones,
}

impl Init {
    /// Variance of the distribution.
    pub fn variance(self) -> f64 {
        match self {
            Init::XavierUniform { fan_in, fan_out } => 2.0 / (fan_in + fan_out) as f64,
            Init::HeUniform { fan_in } => 2.0 / fan_in as f64,
            Init::Zeros | Init::Ones => 0.0,
        }
    }
}

/// Declaration of a parameter a layer needs.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamDecl {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamDecl {
    pub fn new(name: impl Into<String>, shape: impl Into<Vec<usize>>, init: Init) -> Self {
        Self { name: name.into(), shape: shape.into(), init }
    }
}

/// Ordered map from parameter path to tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<R: Real = f64> {
    tensors: BTreeMap<String, Tensor<R>>,
    seed: u64,
}

impl<R: Real> Default for ParamStore<R> {
    fn default() -> Self {
        Self::new(0)
    }
}

/// Draws every declared tensor from one seeded stream, in declaration order.
pub fn init_params<R: Real>(decls: &[ParamDecl], seed: u64) -> Result<ParamStore<R>, NnError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new(seed);
    for d in decls {
        let numel: usize = d.shape.iter().product();
        let data: Vec<R> = match d.init {
            Init::Zeros => vec![R::zero(); numel],
            Init::Ones => vec![R::one(); numel],
            init => {
                let limit = (3.0 * init.variance()).sqrt();
                (0..numel).map(|_| R::lit(rng.random_range(-limit..limit))).collect()
            }
        };
        store.insert(d.name.clone(), Tensor::new(d.shape.clone(), data)?)?;
    }
    Ok(store)
}

impl<R: Real> ParamStore<R> {
    pub fn new(seed: u64) -> Self {
        Self { tensors: BTreeMap::new(), seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<R>) -> Result<(), NnError> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(NnError::DuplicateParam(name));
        }
        self.tensors.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<R>, NnError> {
        self.tensors.get(name).ok_or_else(|| NnError::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<R>, NnError> {
        self.tensors.get_mut(name).ok_or_else(|| NnError::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<R>)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count.
    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Union of two stores; names must not collide.
    pub fn merge(&mut self, other: &ParamStore<R>) -> Result<(), NnError> {
        for (k, v) in &other.tensors {
            self.insert(k.clone(), v.clone())?;
        }
        Ok(())
    }

    /// Sub-store of every tensor whose name starts with `prefix`.
    pub fn extract(&self, prefix: &str) -> ParamStore<R> {
        let tensors = self
            .tensors
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        ParamStore { tensors, seed: self.seed }
    }

    /// Bitwise equality of names, shapes and values.
    pub fn bit_eq(&self, other: &ParamStore<R>) -> bool {
        self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|((ka, a), (kb, b))| ka == kb && a.bit_eq(b))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + self.num_scalars() * 8);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.as_f64().to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NnError> {
        let mut r = ByteReader { buf: bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(NnError::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(NnError::Checkpoint(format!("unsupported version {version}")));
        }
        let seed = r.u64()?;
        let count = r.u32()?;
        let mut store = ParamStore::new(seed);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| NnError::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|e| e as usize)).collect::<Result<Vec<_>, _>>()?;
            let numel: usize = shape.iter().product();
            let data = (0..numel)
                .map(|_| {
                    let v = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
                    R::from_f64(v).ok_or_else(|| NnError::Checkpoint(format!("value {v} not representable")))
                })
                .collect::<Result<Vec<_>, _>>()?;
            store.insert(name, Tensor::new(shape, data)?)?;
        }
        if r.pos != bytes.len() {
            return Err(NnError::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), NnError> {
        let mut f = std::fs::File::create(path.as_ref())?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, NnError> {
        let mut buf = Vec::new();
        std::fs::File::open(path.as_ref())?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NnError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| NnError::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, NnError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, NnError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Parameter name → tape variable for one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Bindings {
    vars: BTreeMap<String, Var>,
}

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers every tensor of `store` on `tape`, as trainable leaves or
    /// frozen constants.
    pub fn bind<R: Real>(&mut self, tape: &mut Tape<R>, store: &ParamStore<R>, trainable: bool) {
        for (name, t) in store.iter() {
            let v = if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) };
            self.vars.insert(name.clone(), v);
        }
    }

    pub fn of<R: Real>(tape: &mut Tape<R>, store: &ParamStore<R>, trainable: bool) -> Self {
        let mut b = Self::new();
        b.bind(tape, store, trainable);
        b
    }

    pub fn get(&self, name: &str) -> Result<Var, NnError> {
        self.vars.get(name).copied().ok_or_else(|| NnError::MissingParam(name.to_string()))
    }

    /// Gradients reaching the tensors of `store` after a reverse pass.
    pub fn grads_for<R: Real>(&self, tape: &Tape<R>, store: &ParamStore<R>) -> GradStore<R> {
        let mut out = GradStore::new();
        for name in store.names() {
            if let Some(g) = self.vars.get(name).and_then(|&v| tape.grad(v)) {
                out.accumulate(name, g);
            }
        }
        out
    }
}

/// Accumulated gradients keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradStore<R: Real = f64> {
    grads: BTreeMap<String, Vec<R>>,
}

impl<R: Real> GradStore<R> {
    pub fn new() -> Self {
        Self { grads: BTreeMap::new() }
    }

    pub fn accumulate(&mut self, name: &str, g: &[R]) {
        match self.grads.get_mut(name) {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
            None => {
                self.grads.insert(name.to_string(), g.to_vec());
            }
        }
    }

    pub fn merge(&mut self, other: &GradStore<R>) {
        for (k, g) in &other.grads {
            self.accumulate(k, g);
        }
    }

    pub fn scale(&mut self, c: R) {
        self.grads.values_mut().flatten().for_each(|v| *v *= c);
    }

    pub fn get(&self, name: &str) -> Option<&[R]> {
        self.grads.get(name).map(Vec::as_slice)
    }

    pub fn insert(&mut self, name: impl Into<String>, g: Vec<R>) {
        self.grads.insert(name.into(), g);
    }

    pub fn clear(&mut self) {
        self.grads.clear();
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Global L2 norm.
    pub fn norm(&self) -> R {
        self.grads.values().flatten().map(|&v| v * v).sum::<R>().sqrt()
    }
}
