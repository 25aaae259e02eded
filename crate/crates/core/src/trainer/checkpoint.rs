//! Binary checkpoint format.
//!
//! ```text
//! "OMIM" | u32 version | u8 stage | u64 step | u32 len | config JSON
//! u32 record count | records...
//! record: u8 section | u16 name len | name | u8 trainable | u32 rank
//!         | u32 dims[rank] | u64 value count | f32 values (little endian)
//! ```
//! Section 0 holds parameters, 1 and 2 the first and second optimizer
//! moments. All integers are little endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, IoContext, Result};
use crate::net::{ModelConfig, Params, Tensor};

pub const MAGIC: &[u8; 4] = b"OMIM";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub stage: u8,
    pub step: u64,
    pub params: Params<f32>,
    /// Adam moments; absent for parameter-only exports.
    pub moments: Option<(Params<f32>, Params<f32>)>,
}

fn put_tensor(out: &mut Vec<u8>, section: u8, t: &Tensor<f32>) {
    out.push(section);
    out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
    out.extend_from_slice(t.name.as_bytes());
    out.push(t.trainable as u8);
    out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
    for &d in &t.shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&(t.data.len() as u64).to_le_bytes());
    for v in &t.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(self.stage);
        out.extend_from_slice(&self.step.to_le_bytes());
        let cfg = serde_json::to_vec(&self.config).expect("config serializes");
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(&cfg);
        let mut sections = vec![(0u8, &self.params)];
        if let Some((m, v)) = &self.moments {
            sections.push((1, m));
            sections.push((2, v));
        }
        let n: usize = sections.iter().map(|(_, p)| p.tensors.len()).sum();
        out.extend_from_slice(&(n as u32).to_le_bytes());
        for (s, p) in sections {
            for t in &p.tensors {
                put_tensor(&mut out, s, t);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let stage = r.u8()?;
        let step = r.u64()?;
        let cfg_len = r.u32()? as usize;
        let config: ModelConfig = serde_json::from_slice(r.take(cfg_len)?)
            .map_err(|e| Error::Checkpoint(format!("bad config block: {e}")))?;
        let n = r.u32()? as usize;
        let mut sections: [Vec<Tensor<f32>>; 3] = Default::default();
        for k in 0..n {
            let section = r.u8()?;
            if section > 2 {
                return Err(Error::Checkpoint(format!("record {k}: unknown section {section}")));
            }
            let name_len = r.u16()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint(format!("record {k}: name is not UTF-8")))?;
            let trainable = r.u8()? != 0;
            let rank = r.u32()? as usize;
            if rank > 8 {
                return Err(Error::Checkpoint(format!("record `{name}`: rank {rank} is implausible")));
            }
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let count = r.u64()? as usize;
            let want: usize = shape.iter().product();
            if count != want {
                return Err(Error::Checkpoint(format!(
                    "record `{name}`: {count} values but shape {shape:?} needs {want}"
                )));
            }
            let raw = r.take(count.checked_mul(4).ok_or_else(|| {
                Error::Checkpoint(format!("record `{name}`: length overflow"))
            })?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            sections[section as usize].push(Tensor {
                name,
                shape,
                data,
                trainable,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after last record",
                bytes.len() - r.pos
            )));
        }
        let [p, m, v] = sections;
        let params = Params { tensors: p };
        if !params.matches_config(&config) {
            return Err(Error::Checkpoint("parameter records do not match the stored config".into()));
        }
        let moments = match (m.is_empty(), v.is_empty()) {
            (true, true) => None,
            (false, false) if m.len() == params.tensors.len() && v.len() == params.tensors.len() => {
                Some((Params { tensors: m }, Params { tensors: v }))
            }
            _ => return Err(Error::Checkpoint("incomplete optimizer moments".into())),
        };
        Ok(Self {
            config,
            stage,
            step,
            params,
            moments,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).at(dir)?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).at(&tmp)?;
        fs::rename(&tmp, path).at(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).at(path)?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Checkpoint(format!(
                "truncated: need {n} bytes at offset {}, file has {}",
                self.pos,
                self.buf.len()
            ))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ckpt() -> Checkpoint {
        let config = ModelConfig::micro(16, 4);
        let params = Params::<f32>::init(&config).unwrap();
        Checkpoint {
            moments: Some((params.zeros_like(), params.zeros_like())),
            config,
            stage: 1,
            step: 42,
            params,
        }
    }

    #[test]
    fn roundtrip_is_exact() {
        let c = ckpt();
        assert_eq!(Checkpoint::from_bytes(&c.to_bytes()).unwrap(), c);
    }

    #[test]
    fn truncation_is_detected() {
        let b = ckpt().to_bytes();
        for cut in [3, 20, b.len() / 2, b.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&b[..cut]), Err(Error::Checkpoint(_))));
        }
    }

    #[test]
    fn foreign_magic_and_version_are_rejected() {
        let mut b = ckpt().to_bytes();
        b[4] = 9;
        assert!(Checkpoint::from_bytes(&b).is_err());
        b[0] = b'X';
        assert!(Checkpoint::from_bytes(&b).is_err());
    }
}
