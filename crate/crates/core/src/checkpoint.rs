//! Binary checkpoint containers.
//!
//! Layout (little-endian): the magic line (e.g. `VQCPC-ENC v1\n`), a `u32`
//! count of text entries each stored as two length-prefixed UTF-8 strings,
//! then a `u32` count of tensors, each a length-prefixed name, a `u32` rank,
//! `u64` dimensions and the `f64` values.

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{Adam, ParamStore, Scalar, Tensor};

pub const ENCODER_MAGIC: &str = "VQCPC-ENC v1";
pub const DECODER_MAGIC: &str = "VQCPC-DEC v1";
pub const DISTILLED_MAGIC: &str = "VQCPC-DST v1";

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub magic: String,
    pub text: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor<f64>)>,
}

impl Container {
    pub fn new(magic: &str) -> Self {
        Self { magic: magic.to_string(), text: Vec::new(), tensors: Vec::new() }
    }

    pub fn put_text(&mut self, key: &str, value: impl Into<String>) {
        self.text.push((key.to_string(), value.into()));
    }

    pub fn text(&self, key: &str) -> Result<&str> {
        self.text
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Checkpoint(format!("missing entry {key:?}")))
    }

    pub fn parsed<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.text(key)?;
        v.parse().map_err(|_| Error::Checkpoint(format!("bad value for {key}: {v:?}")))
    }

    pub fn put_tensor<S: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<S>) {
        self.tensors.push((name.into(), t.cast()));
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<f64>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name:?}")))
    }

    /// Stores every parameter under `prefix.<name>`.
    pub fn put_store<S: Scalar>(&mut self, prefix: &str, store: &ParamStore<S>) {
        for (name, t) in store.iter() {
            self.put_tensor(format!("{prefix}.{name}"), t);
        }
    }

    /// Overwrites every parameter of `store` from `prefix.<name>`; shapes
    /// must match.
    pub fn load_store<S: Scalar>(&self, prefix: &str, store: &mut ParamStore<S>) -> Result<()> {
        for id in store.ids().collect::<Vec<_>>() {
            let name = format!("{prefix}.{}", store.name(id));
            let t = self.tensor(&name)?;
            if t.shape() != store.get(id).shape() {
                return Err(Error::Checkpoint(format!(
                    "{name} has shape {:?}, model expects {:?}",
                    t.shape(),
                    store.get(id).shape()
                )));
            }
            store.set(id, t.cast());
        }
        Ok(())
    }

    pub fn put_adam<S: Scalar>(&mut self, prefix: &str, adam: &Adam, store: &ParamStore<S>) {
        self.put_text(&format!("{prefix}.step"), adam.step.to_string());
        for id in store.ids() {
            let i = id.index();
            if adam.first[i].is_empty() {
                continue;
            }
            let n = adam.first[i].len();
            for (tag, v) in [("m", &adam.first[i]), ("v", &adam.second[i])] {
                let t = Tensor::new(&[n], v.clone()).expect("flat moment");
                self.put_tensor(format!("{prefix}.{tag}.{}", store.name(id)), &t);
            }
        }
    }

    pub fn load_adam<S: Scalar>(&self, prefix: &str, adam: &mut Adam, store: &ParamStore<S>) -> Result<()> {
        adam.step = self.parsed(&format!("{prefix}.step"))?;
        for id in store.ids() {
            let i = id.index();
            let name = store.name(id);
            if let (Ok(m), Ok(v)) =
                (self.tensor(&format!("{prefix}.m.{name}")), self.tensor(&format!("{prefix}.v.{name}")))
            {
                adam.first[i] = m.data().to_vec();
                adam.second[i] = v.data().to_vec();
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(self.magic.as_bytes());
        out.push(b'\n');
        let put_str = |out: &mut Vec<u8>, s: &str| {
            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
            out.extend_from_slice(s.as_bytes());
        };
        out.extend_from_slice(&(self.text.len() as u32).to_le_bytes());
        for (k, v) in &self.text {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], magic: &str) -> Result<Self> {
        let head = magic.len() + 1;
        if bytes.len() < head || &bytes[..magic.len()] != magic.as_bytes() || bytes[magic.len()] != b'\n' {
            let found = bytes.iter().take_while(|&&b| b != b'\n').take(32).copied().collect::<Vec<_>>();
            return Err(Error::Version(format!(
                "expected a {magic:?} checkpoint, found {:?}",
                String::from_utf8_lossy(&found)
            )));
        }
        let mut r = Reader { bytes, pos: head };
        let mut c = Container::new(magic);
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            c.text.push((k, v));
        }
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            c.tensors.push((name, Tensor::new(&shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(c)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8".into()))
    }
}

/// Lower-case hex SHA-256.
pub fn digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_magic_check() {
        let mut c = Container::new(ENCODER_MAGIC);
        c.put_text("seed", "7");
        c.put_tensor("w", &Tensor::<f32>::from_fn(&[2, 3], |i| i as f32 * 0.5));
        let bytes = c.to_bytes();
        let back = Container::from_bytes(&bytes, ENCODER_MAGIC).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.parsed::<u64>("seed").unwrap(), 7);
        assert!(matches!(Container::from_bytes(&bytes, DECODER_MAGIC), Err(Error::Version(_))));
        assert!(Container::from_bytes(&bytes[..bytes.len() - 3], ENCODER_MAGIC).is_err());
    }

    #[test]
    fn store_round_trip() {
        let mut a = ParamStore::<f32>::new();
        a.add("x", Tensor::from_fn(&[4], |i| i as f32));
        let mut c = Container::new(DECODER_MAGIC);
        c.put_store("p", &a);
        let mut b = ParamStore::<f32>::new();
        b.add("x", Tensor::zeros(&[4]));
        c.load_store("p", &mut b).unwrap();
        assert_eq!(a.get(a.ids().next().unwrap()), b.get(b.ids().next().unwrap()));
        let mut wrong = ParamStore::<f32>::new();
        wrong.add("x", Tensor::zeros(&[5]));
        assert!(c.load_store("p", &mut wrong).is_err());
    }

    #[test]
    fn digest_is_sha256() {
        assert_eq!(digest(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }
}
