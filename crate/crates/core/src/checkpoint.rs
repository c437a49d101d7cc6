//! Binary checkpoint format: magic "PIDN", version, config echo, training
//! step, then a named tensor table with 32-bit little-endian values. Loading
//! and re-saving reproduces the file byte for byte.

use crate::error::{PideError, Result};
use crate::hamiltonian::Network;
use crate::params::VisitParams;
use crate::tensor::Tensor;
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"PIDN";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Clone, Debug, Default)]
pub struct Checkpoint {
    pub config: String,
    pub step: u64,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn push_tensor(&mut self, name: impl Into<String>, t: &Tensor) {
        self.tensors.push(NamedTensor {
            name: name.into(),
            shape: t.shape().to_vec(),
            values: t.data().iter().map(|&v| v as f32).collect(),
        });
    }

    pub fn tensor(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Network parameters and buffers under their visitor names.
    pub fn from_network(net: &Network, config: &str, step: u64) -> Self {
        let mut cp = Checkpoint { config: config.to_string(), step, tensors: Vec::new() };
        net.visit("net", &mut |name, _, t| cp.push_tensor(name, t));
        cp
    }

    /// Optimizer velocity tensors, stored alongside under an `opt.v.` prefix.
    pub fn push_optimizer_state(&mut self, velocities: &BTreeMap<String, Tensor>) {
        for (name, v) in velocities {
            self.push_tensor(format!("opt.v.{name}"), v);
        }
    }

    /// Writes every stored tensor into the network by name. Tensors present
    /// in the file but absent from the network (e.g. optimizer state) are
    /// ignored; network tensors missing from the file are an error.
    pub fn apply_to_network(&self, net: &mut Network) -> Result<()> {
        let mut missing = Vec::new();
        net.visit_mut("net", &mut |name, _, t| {
            match self.tensor(name) {
                Some(nt) if nt.shape == t.shape() => {
                    for (dst, &src) in t.data_mut().iter_mut().zip(&nt.values) {
                        *dst = src as f64;
                    }
                }
                _ => missing.push(name.to_string()),
            }
        });
        if !missing.is_empty() {
            return Err(PideError::Checkpoint(format!("missing or mismatched tensors: {:?}", missing)));
        }
        Ok(())
    }

    pub fn optimizer_state(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for t in &self.tensors {
            if let Some(name) = t.name.strip_prefix("opt.v.") {
                let data: Vec<f64> = t.values.iter().map(|&v| v as f64).collect();
                if let Ok(tensor) = Tensor::from_vec(&t.shape, data) {
                    out.insert(name.to_string(), tensor);
                }
            }
        }
        out
    }
}

pub fn save(path: &Path, cp: &Checkpoint) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&cp.step.to_le_bytes());
    let cfg = cp.config.as_bytes();
    buf.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    buf.extend_from_slice(cfg);
    buf.extend_from_slice(&(cp.tensors.len() as u32).to_le_bytes());
    for t in &cp.tensors {
        let name = t.name.as_bytes();
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name);
        buf.push(t.shape.len() as u8);
        for &d in &t.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &t.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.buf.len() {
            return Err(PideError::Checkpoint("unexpected end of file".into()));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut r = Reader { buf: &bytes, at: 0 };
    if r.take(4)? != MAGIC {
        return Err(PideError::Checkpoint("bad magic (want PIDN)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(PideError::Checkpoint(format!("unsupported version {version}")));
    }
    let step = r.u64()?;
    let cfg_len = r.u32()? as usize;
    let config = String::from_utf8(r.take(cfg_len)?.to_vec())
        .map_err(|_| PideError::Checkpoint("config echo is not UTF-8".into()))?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| PideError::Checkpoint("tensor name is not UTF-8".into()))?;
        let ndim = r.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(4 * n)?;
        let values: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(NamedTensor { name, shape, values });
    }
    if r.at != bytes.len() {
        return Err(PideError::Checkpoint("trailing bytes after tensor table".into()));
    }
    Ok(Checkpoint { config, step, tensors })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hamiltonian::{build_network, NetworkConfig};

    #[test]
    fn roundtrip_is_bit_exact() {
        let mut cfg = NetworkConfig::benchmark(1, 4);
        cfg.channels = vec![4, 6, 8];
        let net = build_network(&cfg, 3).unwrap();
        let cp = Checkpoint::from_network(&net, "m = 1\nseed = 3\n", 42);

        let dir = std::env::temp_dir().join(format!("pidenet-ckpt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p1 = dir.join("a.pidn");
        let p2 = dir.join("b.pidn");
        save(&p1, &cp).unwrap();
        let loaded = load(&p1).unwrap();
        assert_eq!(loaded.step, 42);
        assert_eq!(loaded.config, "m = 1\nseed = 3\n");
        save(&p2, &loaded).unwrap();
        let (b1, b2) = (std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(b1, b2, "save(load(x)) must be byte-identical");

        // apply back: every tensor survives the f32 round trip exactly
        let mut net2 = build_network(&cfg, 99).unwrap();
        loaded.apply_to_network(&mut net2).unwrap();
        let cp2 = Checkpoint::from_network(&net2, &loaded.config, loaded.step);
        for (a, b) in cp.tensors.iter().zip(&cp2.tensors) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.values, b.values);
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = std::env::temp_dir().join(format!("pidenet-ckpt-bad-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("bad.pidn");
        std::fs::write(&p, b"NOPE").unwrap();
        assert!(load(&p).is_err());
        std::fs::write(&p, b"PIDN\x02\x00\x00\x00").unwrap();
        assert!(load(&p).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }
}
