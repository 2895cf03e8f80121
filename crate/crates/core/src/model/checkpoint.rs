//! Binary parameter dumps.
//!
//! Layout (little endian):
//!
//! ```text
//! magic    8 bytes  "IETCKPT\0"
//! version  u32
//! count    u32
//! count × { name_len u32, name utf-8, ndim u32, dims ndim×u64, data f64… }
//! ```
//!
//! The model config is stored next to the dump as `<path>.json`.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::params::Parameters;

use super::config::ModelConfig;
use super::network::IetParams;

const MAGIC: &[u8; 8] = b"IETCKPT\0";
const VERSION: u32 = 1;

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn encode(params: &IetParams) -> Vec<u8> {
    let named = params.named();
    let mut out = Vec::with_capacity(16 + params.param_count() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, t) in named {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Parse { offset: self.pos, msg: format!("truncated: wanted {n} more bytes") });
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Decodes a dump into tensors, checking every name and shape against
/// a freshly initialized model of `cfg`.
pub fn decode(bytes: &[u8], cfg: &ModelConfig) -> Result<IetParams> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Parse { offset: 0, msg: "not a checkpoint".into() });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Parse { offset: 8, msg: format!("unsupported version {version}") });
    }
    let mut params = IetParams::init(cfg, 0)?;
    let expected: Vec<(String, Vec<usize>)> =
        params.named().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
    let count = r.u32()? as usize;
    if count != expected.len() {
        return Err(Error::Parse {
            offset: 12,
            msg: format!("{count} tensors, config expects {}", expected.len()),
        });
    }
    let mut loaded = Vec::with_capacity(count);
    for (want_name, want_shape) in &expected {
        let at = r.pos;
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Parse { offset: at, msg: "tensor name is not utf-8".into() })?;
        if name != want_name {
            return Err(Error::Parse { offset: at, msg: format!("found {name}, expected {want_name}") });
        }
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if &shape != want_shape {
            return Err(Error::Parse {
                offset: at,
                msg: format!("{name} has shape {shape:?}, config expects {want_shape:?}"),
            });
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * 8)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        loaded.push(Tensor::new(&shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Parse { offset: r.pos, msg: "trailing bytes".into() });
    }
    let mut it = loaded.into_iter();
    params.visit_mut("", &mut |_, t| *t = it.next().expect("counted above"));
    Ok(params)
}

pub fn save(path: &Path, cfg: &ModelConfig, params: &IetParams) -> Result<()> {
    fs::write(path, encode(params)).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    fs::write(&side, serde_json::to_string_pretty(cfg)?).map_err(|e| Error::io(&side, e))
}

pub fn load(path: &Path) -> Result<(ModelConfig, IetParams)> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let cfg: ModelConfig = serde_json::from_str(&text)?;
    cfg.validate()?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let params = decode(&bytes, &cfg)?;
    Ok((cfg, params))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = ModelConfig::toy();
        let params = IetParams::init(&cfg, 11).unwrap();
        let back = decode(&encode(&params), &cfg).unwrap();
        for ((na, a), (nb, b)) in params.named().into_iter().zip(back.named()) {
            assert_eq!(na, nb);
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn mismatched_config_is_rejected() {
        let cfg = ModelConfig::toy();
        let bytes = encode(&IetParams::init(&cfg, 1).unwrap());
        let mut other = cfg.clone();
        other.channels = 8;
        assert!(matches!(decode(&bytes, &other), Err(Error::Parse { .. })));
        assert!(matches!(decode(&bytes[..bytes.len() - 3], &cfg), Err(Error::Parse { .. })));
    }
}
