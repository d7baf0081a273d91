//! Tensor files, checkpoints and JSON configuration loading.
//!
//! A tensor record is
//!
//! ```text
//! "HQT1" | dtype u8 (0 = f32, 1 = f64) | ndim u8 | 0u8 0u8 | ndim x u32 LE | payload LE
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::scalar::{DType, Float};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"HQT1";

/// A decoded record of either element type.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    /// Converts to `T`, exactly when the stored type is `T` or narrower.
    pub fn cast<T: Float>(&self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

pub fn encode_tensor<T: Float>(t: &Tensor<T>) -> Result<Vec<u8>> {
    if t.rank() > u8::MAX as usize {
        return Err(Error::MalformedHeader(format!("rank {} exceeds 255", t.rank())));
    }
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + t.numel() * T::DTYPE.width());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&[T::DTYPE.code(), t.rank() as u8, 0, 0]);
    for &e in t.shape() {
        let e = u32::try_from(e).map_err(|_| Error::MalformedHeader(format!("extent {e} exceeds u32")))?;
        out.extend_from_slice(&e.to_le_bytes());
    }
    for &v in t.data() {
        match T::DTYPE {
            DType::F32 => out.extend_from_slice(&(v.f64() as f32).to_le_bytes()),
            DType::F64 => out.extend_from_slice(&v.f64().to_le_bytes()),
        }
    }
    Ok(out)
}

fn take<'a>(bytes: &'a [u8], at: usize, n: usize) -> Result<&'a [u8]> {
    bytes.get(at..at + n).ok_or(Error::TruncatedFile {
        needed: at + n,
        available: bytes.len(),
    })
}

/// Decodes one record from the front of `bytes`, returning it with the
/// number of bytes consumed.
pub fn decode_tensor(bytes: &[u8]) -> Result<(AnyTensor, usize)> {
    let head = take(bytes, 0, 8)?;
    let magic: [u8; 4] = head[..4].try_into().expect("four bytes");
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let dtype = match head[4] {
        0 => DType::F32,
        1 => DType::F64,
        c => return Err(Error::UnknownDtype(c)),
    };
    let ndim = head[5] as usize;
    if head[6] != 0 || head[7] != 0 {
        return Err(Error::MalformedHeader(format!(
            "reserved bytes {:?} not zero",
            &head[6..8]
        )));
    }
    let dims = take(bytes, 8, 4 * ndim)?;
    let shape: Vec<usize> = dims
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("four bytes")) as usize)
        .collect();
    if shape.contains(&0) {
        return Err(Error::MalformedHeader(format!("zero extent in {shape:?}")));
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |a, &e| a.checked_mul(e))
        .ok_or_else(|| Error::MalformedHeader(format!("element count of {shape:?} overflows")))?;
    let start = 8 + 4 * ndim;
    let len = numel
        .checked_mul(dtype.width())
        .ok_or_else(|| Error::MalformedHeader(format!("payload size of {shape:?} overflows")))?;
    let payload = take(bytes, start, len)?;
    let t = match dtype {
        DType::F32 => AnyTensor::F32(Tensor::new(
            &shape,
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")))
                .collect(),
        )?),
        DType::F64 => AnyTensor::F64(Tensor::new(
            &shape,
            payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")))
                .collect(),
        )?),
    };
    Ok((t, start + len))
}

pub fn write_tensor<T: Float>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_tensor(t)?).map_err(|e| Error::io(path, e))
}

/// Reads a file holding exactly one record.
pub fn read_tensor(path: impl AsRef<Path>) -> Result<AnyTensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (t, used) = decode_tensor(&bytes)?;
    if used != bytes.len() {
        return Err(Error::MalformedHeader(format!(
            "{} trailing bytes after the payload",
            bytes.len() - used
        )));
    }
    Ok(t)
}

/// Position of one parameter inside `checkpoint.bin`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub offset: usize,
    pub length: usize,
    pub shape: Vec<usize>,
}

pub const CHECKPOINT_BIN: &str = "checkpoint.bin";
pub const CHECKPOINT_INDEX: &str = "checkpoint.json";

/// Writes every parameter as concatenated records plus a JSON index
/// keyed by parameter name.
pub fn save_checkpoint<T: Float>(dir: impl AsRef<Path>, store: &ParamStore<T>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::new();
    let mut index = BTreeMap::new();
    for (_, p) in store.iter() {
        let rec = encode_tensor(&p.value)?;
        index.insert(
            p.name.clone(),
            CheckpointEntry {
                offset: blob.len(),
                length: rec.len(),
                shape: p.value.shape().to_vec(),
            },
        );
        blob.extend_from_slice(&rec);
    }
    let bin = dir.join(CHECKPOINT_BIN);
    fs::write(&bin, blob).map_err(|e| Error::io(&bin, e))?;
    let idx = dir.join(CHECKPOINT_INDEX);
    fs::write(&idx, serde_json::to_vec_pretty(&index)?).map_err(|e| Error::io(&idx, e))
}

/// Loads values for every parameter of `store` from a checkpoint.
pub fn load_checkpoint<T: Float>(dir: impl AsRef<Path>, store: &mut ParamStore<T>) -> Result<()> {
    let dir = dir.as_ref();
    let idx = dir.join(CHECKPOINT_INDEX);
    let text = fs::read(&idx).map_err(|e| Error::io(&idx, e))?;
    let index: BTreeMap<String, CheckpointEntry> = serde_json::from_slice(&text)?;
    let bin = dir.join(CHECKPOINT_BIN);
    let blob = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.get(id).name.clone();
        let entry = index.get(&name).ok_or_else(|| Error::UnknownParam(name.clone()))?;
        let rec = take(&blob, entry.offset, entry.length)?;
        let (t, _) = decode_tensor(rec)?;
        store.set_value(id, t.cast())?;
    }
    Ok(())
}

/// Parses JSON into `C`, reporting the failing field path.
pub fn parse_config<C: DeserializeOwned>(text: &str) -> Result<C> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| Error::Config {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })
}

pub fn load_config<C: DeserializeOwned>(path: impl AsRef<Path>) -> Result<C> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::Init;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_both_dtypes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = Tensor::<f32>::randn(&[2, 3, 4, 5], 1.0, &mut rng);
        let (back, used) = decode_tensor(&encode_tensor(&a).unwrap()).unwrap();
        assert_eq!(used, 8 + 16 + 120 * 4);
        assert!(matches!(back, AnyTensor::F32(ref t) if t.bit_eq(&a)));
        let b = Tensor::<f64>::randn(&[7], 1.0, &mut rng);
        let (back, _) = decode_tensor(&encode_tensor(&b).unwrap()).unwrap();
        assert!(matches!(back, AnyTensor::F64(ref t) if t.bit_eq(&b)));
    }

    #[test]
    fn rejects_malformed() {
        let t = Tensor::<f64>::ones(&[2, 2]);
        let good = encode_tensor(&t).unwrap();
        let mut bad = good.clone();
        bad[3] = b'X';
        assert!(matches!(decode_tensor(&bad), Err(Error::BadMagic(m)) if &m == b"HQTX"));
        assert!(matches!(
            decode_tensor(&good[..good.len() - 8]),
            Err(Error::TruncatedFile {
                needed: 48,
                available: 40
            })
        ));
        let mut bad = good.clone();
        bad[4] = 7;
        assert!(matches!(decode_tensor(&bad), Err(Error::UnknownDtype(7))));
        let mut bad = good.clone();
        bad[6] = 1;
        assert!(matches!(decode_tensor(&bad), Err(Error::MalformedHeader(_))));
        assert!(matches!(decode_tensor(&good[..5]), Err(Error::TruncatedFile { .. })));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = ParamStore::<f32>::new(1);
        a.add("x.w", &[3, 2], Init::Gaussian(1.0)).unwrap();
        a.add("y", &[4], Init::One).unwrap();
        save_checkpoint(dir.path(), &a).unwrap();
        let mut b = ParamStore::<f32>::new(9);
        b.add("x.w", &[3, 2], Init::Zero).unwrap();
        b.add("y", &[4], Init::Zero).unwrap();
        load_checkpoint(dir.path(), &mut b).unwrap();
        for id in a.ids() {
            assert!(a.value(id).bit_eq(b.value(id)));
        }
    }

    #[derive(Debug, Deserialize)]
    #[serde(deny_unknown_fields)]
    #[allow(dead_code)]
    struct Demo {
        inner: Inner,
    }

    #[derive(Debug, Deserialize)]
    #[allow(dead_code)]
    struct Inner {
        steps: usize,
    }

    #[test]
    fn config_errors_name_the_field() {
        let err = parse_config::<Demo>(r#"{"inner": {"steps": "many"}}"#).unwrap_err();
        assert!(matches!(err, Error::Config { ref path, .. } if path == "inner.steps"));
    }
}
