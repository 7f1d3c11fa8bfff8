//! Named-tensor container.
//!
//! Layout (little-endian): magic `PFCKPT1\n`, `u32` tensor count, then per tensor a `u16`
//! path length, the UTF-8 path, a `u8` dtype code (0 = f64), a `u8` rank, `rank` × `u64`
//! dims and the row-major payload. A trailing `u32` CRC-32 covers every preceding byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{CheckpointError, Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 8] = b"PFCKPT1\n";
const DTYPE_F64: u8 = 0;
const MIN_LEN: usize = MAGIC.len() + 4 + 4;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces a tensor; returns the previous one.
    pub fn insert(&mut self, path: impl Into<String>, tensor: Tensor) -> Option<Tensor> {
        self.tensors.insert(path.into(), tensor)
    }

    pub fn get(&self, path: &str) -> Option<&Tensor> {
        self.tensors.get(path)
    }

    pub fn remove(&mut self, path: &str) -> Option<Tensor> {
        self.tensors.remove(path)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(MIN_LEN + self.tensors.values().map(|t| t.numel() * 8 + 64).sum::<usize>());
        out.extend_from_slice(MAGIC);
        let count = u32::try_from(self.tensors.len()).map_err(|_| Error::invalid("too many tensors"))?;
        out.extend_from_slice(&count.to_le_bytes());
        for (path, t) in &self.tensors {
            let len = u16::try_from(path.len()).map_err(|_| Error::invalid(format!("path too long: {path}")))?;
            let rank = u8::try_from(t.rank()).map_err(|_| Error::invalid(format!("rank too large at {path}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(path.as_bytes());
            out.push(DTYPE_F64);
            out.push(rank);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    /// Parses a container. Checks run magic first, then CRC, then structure.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let head = &bytes[..bytes.len().min(MAGIC.len())];
        if head != &MAGIC[..head.len()] {
            return Err(CheckpointError::BadMagic { found: head.to_vec() });
        }
        if bytes.len() < MIN_LEN {
            return Err(CheckpointError::Truncated {
                offset: bytes.len(),
                needed: MIN_LEN - bytes.len(),
                available: 0,
            });
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(CheckpointError::CrcMismatch { stored, computed });
        }

        let mut r = Reader {
            buf: body,
            pos: MAGIC.len(),
        };
        let count = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
            let path = std::str::from_utf8(r.take(len)?)
                .map_err(|_| CheckpointError::Format("path is not UTF-8".into()))?
                .to_string();
            let dtype = r.take(1)?[0];
            if dtype != DTYPE_F64 {
                return Err(CheckpointError::UnknownDtype(dtype));
            }
            let rank = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let d = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
                shape.push(usize::try_from(d).map_err(|_| CheckpointError::Format(format!("dimension {d} too large")))?);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(8).map(|_| n))
                .ok_or_else(|| CheckpointError::Format(format!("{path}: element count overflows")))?;
            let payload = r.take(numel * 8)?;
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Format(e.to_string()))?;
            if tensors.insert(path.clone(), t).is_some() {
                return Err(CheckpointError::Format(format!("duplicate path {path}")));
            }
        }
        if r.pos != body.len() {
            return Err(CheckpointError::Format(format!(
                "{} trailing bytes after the last tensor",
                body.len() - r.pos
            )));
        }
        Ok(Self { tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::from_bytes(&bytes)?)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let available = self.buf.len() - self.pos;
        if n > available {
            return Err(CheckpointError::Truncated {
                offset: self.pos,
                needed: n,
                available,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

/// Sorted list of names present in exactly one of the two sets.
pub fn symmetric_difference<'a>(
    a: impl IntoIterator<Item = &'a str>,
    b: impl IntoIterator<Item = &'a str>,
) -> Vec<String> {
    let a: std::collections::BTreeSet<&str> = a.into_iter().collect();
    let b: std::collections::BTreeSet<&str> = b.into_iter().collect();
    a.symmetric_difference(&b).map(|s| s.to_string()).collect()
}

pub const FEATURE_TENSOR: &str = "feat";

pub fn save_features(path: impl AsRef<Path>, feats: &Tensor) -> Result<()> {
    let mut c = Checkpoint::new();
    c.insert(FEATURE_TENSOR, feats.clone());
    c.save(path)
}

pub fn load_features(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let mut c = Checkpoint::load(path)?;
    let t = c.remove(FEATURE_TENSOR).ok_or_else(|| {
        Error::from(CheckpointError::Format(format!("{} has no `{FEATURE_TENSOR}` tensor", path.display())))
    })?;
    if t.rank() != 2 || !c.is_empty() {
        return Err(CheckpointError::Format(format!("{} is not a feature file", path.display())).into());
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn sample() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut c = Checkpoint::new();
        c.insert("encoder.conv.0.w", Tensor::randn(&[24, 32], 1.0, &mut rng));
        c.insert("ctc.b", Tensor::randn(&[19], 1.0, &mut rng));
        c.insert("scalar", Tensor::scalar(f64::MIN_POSITIVE));
        c.insert("neg_zero", Tensor::new(vec![2], vec![-0.0, 1e300]).unwrap());
        c
    }

    #[test]
    fn round_trip_is_bitwise() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(c.len(), back.len());
        for (p, t) in c.iter() {
            assert!(t.bitwise_eq(back.get(p).unwrap()), "{p}");
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.pfc");
        let c = sample();
        c.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), c);
    }

    #[test]
    fn flipped_payload_byte_is_crc_error() {
        let mut b = sample().to_bytes().unwrap();
        let i = b.len() - 20;
        b[i] ^= 0x40;
        assert!(matches!(Checkpoint::from_bytes(&b), Err(CheckpointError::CrcMismatch { .. })));
    }

    #[test]
    fn bad_magic() {
        let mut b = sample().to_bytes().unwrap();
        b[0] = b'Q';
        assert!(matches!(Checkpoint::from_bytes(&b), Err(CheckpointError::BadMagic { .. })));
        assert!(matches!(Checkpoint::from_bytes(b"GIF89a"), Err(CheckpointError::BadMagic { .. })));
    }

    fn reseal(mut body: Vec<u8>) -> Vec<u8> {
        let crc = crc32fast::hash(&body);
        body.extend_from_slice(&crc.to_le_bytes());
        body
    }

    #[test]
    fn truncation_is_distinct() {
        let b = sample().to_bytes().unwrap();
        assert!(matches!(Checkpoint::from_bytes(&b[..10]), Err(CheckpointError::Truncated { .. })));
        let cut = reseal(b[..b.len() - 30].to_vec());
        assert!(matches!(Checkpoint::from_bytes(&cut), Err(CheckpointError::Truncated { .. })));
    }

    #[test]
    fn unknown_dtype_names_code() {
        let mut c = Checkpoint::new();
        c.insert("a", Tensor::zeros(&[1]));
        let mut body = c.to_bytes().unwrap();
        body.truncate(body.len() - 4);
        let dtype_at = 8 + 4 + 2 + 1;
        body[dtype_at] = 7;
        let err = Checkpoint::from_bytes(&reseal(body)).unwrap_err();
        assert!(matches!(err, CheckpointError::UnknownDtype(7)));
        assert!(err.to_string().contains('7'));
    }

    #[test]
    fn random_bit_flips_detected() {
        let b = sample().to_bytes().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let mut c = b.clone();
            let i = rng.random_range(MAGIC.len()..c.len());
            c[i] ^= 1 << rng.random_range(0..8);
            assert!(matches!(Checkpoint::from_bytes(&c), Err(CheckpointError::CrcMismatch { .. })), "byte {i}");
        }
    }

    #[test]
    fn feature_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.pfc");
        let t = Tensor::randn(&[5, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        save_features(&p, &t).unwrap();
        assert!(load_features(&p).unwrap().bitwise_eq(&t));
        sample().save(&p).unwrap();
        assert!(load_features(&p).is_err());
    }

    #[test]
    fn symmetric_difference_sorted() {
        assert_eq!(symmetric_difference(["a", "b", "c"], ["b", "d"]), vec!["a", "c", "d"]);
    }
}
