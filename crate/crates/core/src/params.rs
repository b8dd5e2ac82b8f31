//! Named parameter storage, initialization, and the `XRW1` weight container.
//!
//! `XRW1` layout (all integers little-endian):
//!
//! ```text
//! magic   b"XRW1"
//! repeated until end of file:
//!     name_len  u32
//!     name      name_len bytes, UTF-8
//!     rank      u32
//!     extents   rank × u32
//!     values    product(extents) × f64, row-major
//! ```

use std::fs;
use std::io::Write;
use std::ops::Index;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const XRW_MAGIC: &[u8; 4] = b"XRW1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Insertion-ordered collection of named trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Places every parameter on `tape` as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound(self.values.iter().map(|v| tape.leaf(v.clone())).collect())
    }

    /// Gradients of the bound parameters after `tape.backward`, zero-filled
    /// for parameters the loss did not reach.
    pub fn gradients(&self, tape: &Tape, bound: &Bound) -> Vec<Tensor> {
        bound
            .0
            .iter()
            .zip(&self.values)
            .map(|(&v, p)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect()
    }

    /// Overwrites parameters from `entries` by name. Every parameter must be
    /// present with a matching shape; extra entries are ignored.
    pub fn load_from(&mut self, entries: &[(String, Tensor)]) -> Result<()> {
        for (name, value) in self.names.iter().zip(self.values.iter_mut()) {
            let (_, src) = entries
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| Error::Load(format!("missing parameter {name}")))?;
            if src.shape() != value.shape() {
                return Err(Error::Load(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    src.shape(),
                    value.shape()
                )));
            }
            *value = src.clone();
        }
        Ok(())
    }
}

/// Tape handles of a [`ParamStore`] for one forward pass.
pub struct Bound(Vec<Var>);

impl Bound {
    /// Wraps handles created elsewhere, in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

/// Normal(0, std²) samples truncated to ±2 std by resampling.
pub fn trunc_normal(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break z * std;
            }
        };
    }
    t
}

pub fn encode_xrw<'a>(entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Vec<u8> {
    let mut buf = XRW_MAGIC.to_vec();
    for (name, t) in entries {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            buf.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                msg: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode_xrw(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != XRW_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: "bad magic, expected XRW1".into(),
        });
    }
    let mut out = Vec::new();
    while r.pos < bytes.len() {
        let start = r.pos;
        let len = r.u32("name length")? as usize;
        let name = String::from_utf8(r.take(len, "name")?.to_vec()).map_err(|_| Error::Format {
            offset: start as u64 + 4,
            msg: "parameter name is not UTF-8".into(),
        })?;
        let rank = r.u32("rank")? as usize;
        let shape = (0..rank)
            .map(|_| r.u32("extent").map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        let count: usize = shape.iter().product();
        let raw = r.take(count * 8, "values")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(shape, data).map_err(|_| Error::Format {
            offset: start as u64,
            msg: format!("parameter {name} has an empty extent"),
        })?;
        out.push((name, tensor));
    }
    Ok(out)
}

pub fn write_xrw<'a>(
    path: &Path,
    entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_xrw(entries))?;
    Ok(())
}

pub fn read_xrw(path: &Path) -> Result<Vec<(String, Tensor)>> {
    decode_xrw(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn xrw_round_trip() {
        let a = Tensor::new(vec![2, 3], vec![1.0, -2.5, 3.0, 0.0, f64::MIN_POSITIVE, 7.0]).unwrap();
        let b = Tensor::scalar(0.2);
        let bytes = encode_xrw([("enc.w", &a), ("mem.vis.3", &b)]);
        assert_eq!(&bytes[..4], b"XRW1");
        assert_eq!(bytes.len(), 4 + (4 + 5 + 4 + 8 + 48) + (4 + 9 + 4 + 4 + 8));
        let back = decode_xrw(&bytes).unwrap();
        assert_eq!(back, vec![("enc.w".to_string(), a), ("mem.vis.3".to_string(), b)]);
    }

    #[test]
    fn xrw_rejects_bad_magic_and_truncation() {
        let t = Tensor::from_vec(vec![1.0, 2.0]);
        let mut bytes = encode_xrw([("x", &t)]);
        let truncated = &bytes[..bytes.len() - 3];
        match decode_xrw(truncated) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 4 + 4 + 1 + 4 + 4),
            other => panic!("expected format error, got {other:?}"),
        }
        bytes[0] = b'Z';
        assert!(matches!(decode_xrw(&bytes), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn trunc_normal_is_bounded_and_seeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = trunc_normal(&[64, 64], 0.02, &mut rng);
        assert!(t.data().iter().all(|v| v.abs() <= 0.04));
        let mean = t.data().iter().sum::<f64>() / t.numel() as f64;
        assert!(mean.abs() < 1e-3);
        let again = trunc_normal(&[64, 64], 0.02, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(t, again);
    }

    #[test]
    fn load_checks_shapes() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::zeros(&[2, 2]));
        let bad = vec![("w".to_string(), Tensor::zeros(&[3]))];
        assert!(matches!(store.load_from(&bad), Err(Error::Load(_))));
        let missing: Vec<(String, Tensor)> = vec![];
        assert!(matches!(store.load_from(&missing), Err(Error::Load(_))));
    }
}
