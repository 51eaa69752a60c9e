//! Checkpoint container: `HTNC` magic, version `u16`, two reserved bytes,
//! a length-prefixed JSON header, then named tensors (`u32` name length,
//! UTF-8 name, `u32` rank, `u32` dims, little-endian `f64` values).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{parse_config_str, Config};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::params::ParamStore;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HTNC";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: Config,
    pub classes: Vec<String>,
    pub input_dim: usize,
    pub epoch: usize,
    pub val_map: Option<f64>,
    pub params: ParamStore,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: String,
    classes: Vec<String>,
    input_dim: usize,
    epoch: usize,
    val_map: Option<f64>,
    tensors: usize,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let header = Header {
        config: ckpt.config.to_toml(),
        classes: ckpt.classes.clone(),
        input_dim: ckpt.input_dim,
        epoch: ckpt.epoch,
        val_map: ckpt.val_map,
        tensors: ckpt.params.len(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&[0, 0]);
    put_u32(&mut out, header.len());
    out.extend_from_slice(&header);
    for (name, t) in ckpt.params.iter() {
        put_u32(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.shape().len());
        for d in t.shape() {
            put_u32(&mut out, *d);
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(
                self.path,
                format!("truncated at byte {}: need {n} more bytes, {} left", self.pos, self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "bad magic at byte 0, expected \"HTNC\""));
    }
    let version = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint version {version} at byte 4")));
    }
    r.take(2)?;
    let hlen = r.u32()?;
    let header: Header =
        serde_json::from_slice(r.take(hlen)?).map_err(|e| Error::format(path, format!("header: {e}")))?;
    let config = parse_config_str(&header.config).map_err(|e| Error::format(path, format!("embedded config: {e}")))?;
    let mut params = ParamStore::new();
    for _ in 0..header.tensors {
        let nlen = r.u32()?;
        let name = std::str::from_utf8(r.take(nlen)?)
            .map_err(|_| Error::format(path, format!("tensor name at byte {} is not UTF-8", r.pos - nlen)))?
            .to_string();
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = r
            .take(8 * n)?
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        params.insert(name, Tensor::new(shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::format(path, format!("{} trailing bytes after byte {}", bytes.len() - r.pos, r.pos)));
    }
    Ok(Checkpoint {
        config,
        classes: header.classes,
        input_dim: header.input_dim,
        epoch: header.epoch,
        val_map: header.val_map,
        params,
    })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    std::fs::write(path, encode_checkpoint(ckpt)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let mut params = ParamStore::new();
        params.insert("a.weight", Tensor::new(vec![2, 3], vec![0.1, -2.5, 1e-300, 3.0, f64::MIN_POSITIVE, 7.0]).unwrap());
        params.insert("a.bias", Tensor::zeros(&[3]));
        let ckpt = Checkpoint {
            config: Config::default(),
            classes: vec!["x".into()],
            input_dim: 4,
            epoch: 3,
            val_map: Some(0.25),
            params,
        };
        let bytes = encode_checkpoint(&ckpt);
        let back = decode_checkpoint(&bytes, Path::new("c")).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(encode_checkpoint(&back), bytes);
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1], Path::new("c")).is_err());
    }
}
