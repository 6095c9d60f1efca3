//! Checkpoint files: the resolved config echo plus every parameter array.
//!
//! ```text
//! "CTLOCKPT" | version u32 | step u64 | echo length u32 | echo (UTF-8)
//! param count u32, then per param:
//!   name length u32 | name | rank u32 | rank×u64 dims | f64 values, row-major
//! ```
//! All integers and floats are little-endian.

use std::path::Path;

use crate::diffcore::{Array, ParamStore};
use crate::error::{Error, Result};

use super::config::RunConfig;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CTLOCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub config: RunConfig,
    pub params: Vec<(String, Array)>,
}

impl Checkpoint {
    pub fn from_store(step: u64, config: &RunConfig, store: &ParamStore) -> Self {
        Checkpoint {
            step,
            config: config.clone(),
            params: store
                .iter()
                .map(|(n, a)| (n.to_string(), a.clone()))
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        let echo = self.config.echo();
        out.extend_from_slice(&(echo.len() as u32).to_le_bytes());
        out.extend_from_slice(echo.as_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, a) in &self.params {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(a.rank() as u32).to_le_bytes());
            for &d in a.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in a.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut take = |n: usize, what: &str| -> Result<&[u8]> {
            if bytes.len() - pos < n {
                return Err(Error::Format {
                    offset: pos as u64,
                    msg: format!("checkpoint truncated in {what}"),
                });
            }
            pos += n;
            Ok(&bytes[pos - n..pos])
        };
        if take(8, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: "not a checkpoint file".into(),
            });
        }
        let version = u32::from_le_bytes(take(4, "version")?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format {
                offset: 8,
                msg: format!("unsupported checkpoint version {version}"),
            });
        }
        let step = u64::from_le_bytes(take(8, "step")?.try_into().unwrap());
        let n = u32::from_le_bytes(take(4, "echo length")?.try_into().unwrap()) as usize;
        let echo = std::str::from_utf8(take(n, "config echo")?).map_err(|_| Error::Format {
            offset: 24,
            msg: "config echo is not UTF-8".into(),
        })?;
        let config = RunConfig::parse(echo)?;
        let count = u32::from_le_bytes(take(4, "param count")?.try_into().unwrap()) as usize;
        let mut params = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let len = u32::from_le_bytes(take(4, "name length")?.try_into().unwrap()) as usize;
            let name =
                String::from_utf8(take(len, "name")?.to_vec()).map_err(|_| Error::Format {
                    offset: 0,
                    msg: "parameter name is not UTF-8".into(),
                })?;
            let rank = u32::from_le_bytes(take(4, "rank")?.try_into().unwrap()) as usize;
            if rank > 8 {
                return Err(Error::Format {
                    offset: 0,
                    msg: format!("{name}: rank {rank} too large"),
                });
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u64::from_le_bytes(take(8, "dims")?.try_into().unwrap()) as usize);
            }
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel
                .filter(|&m| m <= bytes.len() / 8)
                .ok_or_else(|| Error::Format {
                    offset: 0,
                    msg: format!("{name}: shape {shape:?} larger than the file"),
                })?;
            let data = take(numel * 8, "values")?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            params.push((name, Array::new(&shape, data)?));
        }
        if pos != bytes.len() {
            return Err(Error::Format {
                offset: pos as u64,
                msg: "trailing bytes after checkpoint".into(),
            });
        }
        Ok(Checkpoint {
            step,
            config,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::from_bytes(&std::fs::read(path)?)
    }

    /// Copies the parameters into `store`; names and shapes must match exactly.
    pub fn restore(&self, store: &mut ParamStore) -> Result<()> {
        if self.params.len() != store.len() {
            return Err(Error::config(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        for (name, a) in &self.params {
            let id = store.id(name).ok_or_else(|| {
                Error::config(format!("checkpoint parameter {name} not in model"))
            })?;
            if store.get(id).shape() != a.shape() {
                return Err(Error::config(format!(
                    "{name}: checkpoint shape {:?}, model shape {:?}",
                    a.shape(),
                    store.get(id).shape()
                )));
            }
            *store.get_mut(id) = a.clone();
        }
        Ok(())
    }
}
