//! Named-tensor checkpoints.
//!
//! Layout, little-endian: magic `LDCK` | version u32 = 1 | fingerprint u64 |
//! config length u32 | config JSON bytes | tensor count u32 | per tensor:
//! name length u32, name UTF-8, rank u32, dims u32 × rank, values f64.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"LDCK";
const VERSION: u32 = 1;

/// Configuration JSON plus named tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub tensors: Vec<(String, Tensor)>,
}

/// First eight bytes of the SHA-256 of `bytes`, as an integer.
pub fn fingerprint(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().expect("digest length"))
}

impl Checkpoint {
    pub fn fingerprint(&self) -> u64 {
        fingerprint(self.config.as_bytes())
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&self.fingerprint().to_le_bytes())?;
        write_bytes(w, self.config.as_bytes())?;
        w.write_all(&u32_len(self.tensors.len())?.to_le_bytes())?;
        for (name, t) in &self.tensors {
            write_bytes(w, name.as_bytes())?;
            w.write_all(&u32_len(t.rank())?.to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&u32_len(d)?.to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(8 * t.len());
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let mut fp = [0u8; 8];
        read_exact(r, &mut fp)?;
        let stored = u64::from_le_bytes(fp);
        let config = String::from_utf8(read_bytes(r)?)
            .map_err(|_| Error::Format("config is not UTF-8".into()))?;
        let count = read_u32(r)? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = String::from_utf8(read_bytes(r)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let rank = read_u32(r)? as usize;
            if rank > 8 {
                return Err(Error::Format(format!("tensor `{name}` has rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u32(r)? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n <= 1 << 31)
                .ok_or_else(|| Error::Format(format!("tensor `{name}` is too large")))?;
            let mut buf = vec![0u8; 8 * n];
            read_exact(r, &mut buf)?;
            let data = buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk")))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        let ck = Self { config, tensors };
        if ck.fingerprint() != stored {
            return Err(Error::Fingerprint {
                expected: format!("{stored:016x}"),
                found: format!("{:016x}", ck.fingerprint()),
            });
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut r)
    }
}

fn u32_len(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("length {n} overflows u32")))
}

fn write_bytes(w: &mut impl Write, b: &[u8]) -> Result<()> {
    w.write_all(&u32_len(b.len())?.to_le_bytes())?;
    w.write_all(b)?;
    Ok(())
}

pub(crate) fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("truncated file".into()),
        _ => Error::Io(e),
    })
}

pub(crate) fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_bytes(r: &mut impl Read) -> Result<Vec<u8>> {
    let n = read_u32(r)? as usize;
    if n > 1 << 28 {
        return Err(Error::Format(format!("string of {n} bytes")));
    }
    let mut buf = vec![0u8; n];
    read_exact(r, &mut buf)?;
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_corruption() {
        let ck = Checkpoint {
            config: r#"{"beta":0.001}"#.into(),
            tensors: vec![
                ("w".into(), Tensor::new([2, 2], vec![1.0, -2.5, 3.25, f64::MIN_POSITIVE]).unwrap()),
                ("s".into(), Tensor::scalar(0.5)),
            ],
        };
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        assert_eq!(Checkpoint::read_from(&mut buf.as_slice()).unwrap(), ck);

        let mut bad = buf.clone();
        bad[22] ^= 1; // inside the config text
        assert!(matches!(Checkpoint::read_from(&mut bad.as_slice()), Err(Error::Fingerprint { .. })));
        assert!(matches!(Checkpoint::read_from(&mut &buf[..buf.len() - 3]), Err(Error::Format(_))));
    }
}
