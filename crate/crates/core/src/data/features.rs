//! Binary feature files: a 16-byte header (`HTNF`, version `u16`, `T`
//! `u32`, `C` `u32`, two reserved bytes) followed by `T·C` little-endian
//! `f32` values, row-major by time.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const FEATURE_MAGIC: &[u8; 4] = b"HTNF";
pub const FEATURE_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 16;

pub fn encode_features(features: &Tensor) -> Result<Vec<u8>> {
    if features.shape().len() != 2 {
        return Err(Error::shape("encode_features", format!("expected T×C, got {:?}", features.shape())));
    }
    let (t, c) = (features.rows(), features.cols());
    let (t32, c32) = match (u32::try_from(t), u32::try_from(c)) {
        (Ok(a), Ok(b)) => (a, b),
        _ => return Err(Error::InvalidArgument(format!("{t}×{c} exceeds the u32 header fields"))),
    };
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * t * c);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&t32.to_le_bytes());
    out.extend_from_slice(&c32.to_le_bytes());
    out.extend_from_slice(&[0, 0]);
    for v in features.data() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_features(bytes: &[u8], path: &Path) -> Result<Tensor> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(
            path,
            format!("file is {} bytes, shorter than the {HEADER_LEN}-byte header", bytes.len()),
        ));
    }
    if &bytes[0..4] != FEATURE_MAGIC {
        return Err(Error::format(path, format!("bad magic {:?} at byte 0, expected \"HTNF\"", &bytes[0..4])));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FEATURE_VERSION {
        return Err(Error::format(path, format!("unsupported version {version} at byte 4")));
    }
    let t = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
    let c = u32::from_le_bytes(bytes[10..14].try_into().expect("4 bytes")) as usize;
    if t == 0 || c == 0 {
        return Err(Error::format(path, format!("header declares T={t}, C={c} (bytes 6..14); both must be positive")));
    }
    let expected = HEADER_LEN + 4 * t * c;
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            format!(
                "expected {expected} bytes for T={t}, C={c}, found {} (payload starts at byte {HEADER_LEN})",
                bytes.len()
            ),
        ));
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
        .collect();
    Tensor::new(vec![t, c], data)
}

pub fn save_features(path: &Path, features: &Tensor) -> Result<()> {
    let bytes = encode_features(features)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_features(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes, path)
}

/// Zero-pads the time axis up to the next multiple of `2^(levels-1)`.
/// Returns the padded features and the original length.
pub fn pad_to_divisible(features: &Tensor, levels: usize) -> (Tensor, usize) {
    let t = features.rows();
    let multiple = 1usize << (levels.max(1) - 1);
    let padded = t.div_ceil(multiple).max(1) * multiple;
    if padded == t {
        return (features.clone(), t);
    }
    let mut data = features.data().to_vec();
    data.resize(padded * features.cols(), 0.0);
    (
        Tensor::new(vec![padded, features.cols()], data).expect("shape matches"),
        t,
    )
}
