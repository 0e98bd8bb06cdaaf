//! Binary checkpoint format, all integers and floats little-endian:
//!
//! ```text
//! "MPSC" | version u32
//! tensor count u32, then per tensor:
//!     name length u32 | UTF-8 name | rank u32 | dims u64 x rank | f64 x product(dims)
//! config length u32 | UTF-8 key = value snapshot
//! iteration u64
//! prototype flag u8, and if 1:
//!     prototype iteration u64 | momentum f64 | L u64 | d u64 | f64 x L*d
//! ```

use std::path::Path;

use crate::numerics::Tensor;
use crate::prototypes::PrototypeSet;

use super::TrainError;

pub const MAGIC: &[u8; 4] = b"MPSC";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
    pub config: String,
    pub iteration: u64,
    pub prototypes: Option<PrototypeSet>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.config.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out.extend_from_slice(&self.iteration.to_le_bytes());
        match &self.prototypes {
            None => out.push(0),
            Some(p) => {
                out.push(1);
                out.extend_from_slice(&p.iteration().to_le_bytes());
                out.extend_from_slice(&p.momentum().to_le_bytes());
                out.extend_from_slice(&(p.num_categories() as u64).to_le_bytes());
                out.extend_from_slice(&(p.dim() as u64).to_le_bytes());
                for v in p.vectors().data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TrainError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(r.err(0, "bad magic; not a checkpoint"));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(r.err(4, &format!("unsupported version {version}")));
        }
        let count = r.u32("tensor count")?;
        let mut tensors = Vec::with_capacity(count.min(1024) as usize);
        for _ in 0..count {
            let len = r.u32("name length")? as usize;
            let at = r.pos;
            let name = String::from_utf8(r.take(len, "name")?.to_vec()).map_err(|_| r.err(at, "name is not UTF-8"))?;
            let rank = r.u32("rank")? as usize;
            let mut dims = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                dims.push(r.u64("dimension")? as usize);
            }
            let data = r.f64s(dims.iter().product(), &name)?;
            tensors.push((name, Tensor::new(dims, data).expect("length matches dims")));
        }
        let len = r.u32("config length")? as usize;
        let at = r.pos;
        let config =
            String::from_utf8(r.take(len, "config")?.to_vec()).map_err(|_| r.err(at, "config is not UTF-8"))?;
        let iteration = r.u64("iteration")?;
        let at = r.pos;
        let prototypes = match r.take(1, "prototype flag")?[0] {
            0 => None,
            1 => {
                let it = r.u64("prototype iteration")?;
                let momentum = r.f64s(1, "prototype momentum")?[0];
                let l = r.u64("prototype rows")? as usize;
                let d = r.u64("prototype dim")? as usize;
                let data = r.f64s(l * d, "prototypes")?;
                let t = Tensor::new(vec![l, d], data).expect("length matches");
                Some(PrototypeSet::new(t, it, momentum).map_err(|e| r.err(at, &e.to_string()))?)
            }
            f => return Err(r.err(at, &format!("bad prototype flag {f}"))),
        };
        if r.pos != bytes.len() {
            return Err(r.err(r.pos, "trailing bytes"));
        }
        Ok(Self {
            tensors,
            config,
            iteration,
            prototypes,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        std::fs::write(path, self.to_bytes()).map_err(|e| TrainError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let bytes = std::fs::read(path).map_err(|e| TrainError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, offset: usize, message: &str) -> TrainError {
        TrainError::Checkpoint {
            offset,
            message: message.to_string(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], TrainError> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(self.pos, &format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, TrainError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64, TrainError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>, TrainError> {
        let bytes = n
            .checked_mul(8)
            .ok_or_else(|| self.err(self.pos, &format!("size overflow in {what}")))?;
        let raw = self.take(bytes, what)?;
        Ok(raw
            .chunks(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}
