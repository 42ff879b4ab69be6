//! Binary checkpoint format.
//!
//! ```text
//! magic        8 bytes  "DDPMFRG1"
//! version      u32 LE
//! header       u32 LE length + UTF-8 text (run config, step_count, rng_note)
//! tensor count u32 LE
//! per tensor   u32 LE name length + name, u32 LE rank, rank x u64 LE dims,
//!              f64 LE payload
//! ```
//!
//! Raw parameters are stored under `param.<name>`, the EMA shadow under
//! `ema.<name>`.

use std::path::Path;

use diffusion_core::{Denoiser, DenoiserParams, ParamSet, Tensor};

use crate::config::RunConfig;
use crate::error::{io_err, CliError, Result};

pub const MAGIC: &[u8; 8] = b"DDPMFRG1";
pub const FORMAT_VERSION: u32 = 1;

const PARAM_PREFIX: &str = "param.";
const EMA_PREFIX: &str = "ema.";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    /// Optimizer steps taken to produce `params`.
    pub step_count: u64,
    /// Where the randomness came from, for humans.
    pub rng_note: String,
    pub params: DenoiserParams,
    pub ema: DenoiserParams,
}

impl Checkpoint {
    fn header(&self) -> String {
        let note = self.rng_note.replace('\n', " ");
        format!("{}step_count = {}\nrng_note = {}\n", self.config, self.step_count, note)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.params.names() != self.ema.names() {
            return Err(CliError::Checkpoint {
                position: 0,
                reason: "params and EMA shadow have different name lists".into(),
            });
        }
        let mut out = Vec::with_capacity(64 + 16 * (self.params.numel() + self.ema.numel()));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let header = self.header();
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        let count = self.params.len() + self.ema.len();
        out.extend_from_slice(&(count as u32).to_le_bytes());
        for (prefix, set) in [(PARAM_PREFIX, &self.params), (EMA_PREFIX, &self.ema)] {
            for (name, t) in set.iter() {
                let full = format!("{prefix}{name}");
                out.extend_from_slice(&(full.len() as u32).to_le_bytes());
                out.extend_from_slice(full.as_bytes());
                out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
                for &d in t.shape() {
                    out.extend_from_slice(&(d as u64).to_le_bytes());
                }
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8, "magic")?;
        if magic != MAGIC {
            return Err(r.fail_at(0, "bad magic bytes, not a checkpoint"));
        }
        let version = r.u32("format version")?;
        if version != FORMAT_VERSION {
            return Err(r.fail_at(8, &format!("unsupported format version {version}")));
        }
        let header_len = r.u32("header length")? as usize;
        let header_at = r.pos;
        let header = std::str::from_utf8(r.take(header_len, "header")?)
            .map_err(|_| r.fail_at(header_at, "header is not UTF-8"))?;
        let (config, step_count, rng_note) = parse_header(header).map_err(|e| r.fail_at(header_at, &e.to_string()))?;

        let count = r.u32("tensor count")? as usize;
        let mut params = Vec::new();
        let mut ema = Vec::new();
        for _ in 0..count {
            let at = r.pos;
            let name_len = r.u32("tensor name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
                .map_err(|_| r.fail_at(at, "tensor name is not UTF-8"))?
                .to_string();
            let rank = r.u32("tensor rank")? as usize;
            if rank == 0 || rank > 8 {
                return Err(r.fail_at(at, &format!("tensor `{name}` has unsupported rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64("tensor dims")? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| r.fail(&format!("tensor `{name}` payload runs past end of file")))?;
            let payload = r.take(numel * 8, "tensor payload")?;
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let tensor = Tensor::new(shape, data).map_err(|e| r.fail_at(at, &e.to_string()))?;
            if let Some(n) = name.strip_prefix(PARAM_PREFIX) {
                params.push((n.to_string(), tensor));
            } else if let Some(n) = name.strip_prefix(EMA_PREFIX) {
                ema.push((n.to_string(), tensor));
            } else {
                return Err(r.fail_at(at, &format!("tensor `{name}` has no param./ema. prefix")));
            }
        }
        if r.remaining() != 0 {
            return Err(r.fail(&format!("{} trailing bytes after tensor table", r.remaining())));
        }
        let end = r.pos;
        let wrap = |e: diffusion_core::Error| CliError::Checkpoint {
            position: end,
            reason: e.to_string(),
        };
        let params = ParamSet::new(params).map_err(wrap)?;
        let ema = ParamSet::new(ema).map_err(wrap)?;
        if params.names() != ema.names() {
            return Err(r.fail("params and EMA shadow have different name lists"));
        }
        let net = Denoiser::new(config.denoiser).map_err(wrap)?;
        net.check_params(&params).map_err(wrap)?;
        Ok(Self {
            config,
            step_count,
            rng_note,
            params,
            ema,
        })
    }

    /// Writes the whole file at once; nothing is written if encoding fails.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        Self::from_bytes(&bytes)
    }
}

fn parse_header(text: &str) -> Result<(RunConfig, u64, String)> {
    let mut rest = String::new();
    let (mut step, mut note) = (None, None);
    for line in text.lines() {
        match line.split_once('=').map(|(k, v)| (k.trim(), v.trim())) {
            Some(("step_count", v)) => {
                step = Some(v.parse().map_err(|_| CliError::Config(format!("step_count: cannot parse `{v}`")))?)
            }
            Some(("rng_note", v)) => note = Some(v.to_string()),
            _ => {
                rest.push_str(line);
                rest.push('\n');
            }
        }
    }
    let step = step.ok_or_else(|| CliError::Config("header lacks step_count".into()))?;
    Ok((rest.parse()?, step, note.unwrap_or_default()))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn fail(&self, reason: &str) -> CliError {
        self.fail_at(self.pos, reason)
    }

    fn fail_at(&self, position: usize, reason: &str) -> CliError {
        CliError::Checkpoint {
            position,
            reason: reason.to_string(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(self.fail(&format!(
                "truncated while reading {what}: need {n} bytes, {} left",
                self.remaining()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}
