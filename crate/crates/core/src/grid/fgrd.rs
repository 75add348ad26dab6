//! FGRD container.
//!
//! Little-endian: magic `FGRD` | version u32 = 1 | N, K, H, W u32 |
//! per channel: bound flags u8 (bit 0 lower finite, bit 1 upper finite),
//! lower f32, upper f32, mean f32, std f32, range f32 | mask u8[H·W] |
//! data f32[N·K·H·W].

use super::{ChannelSpec, FieldBatch, Mask, CHANNEL_NAMES};
use crate::autodiff::{read_exact, read_u32};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"FGRD";
const VERSION: u32 = 1;
const MAX_VALUES: usize = 1 << 32;

fn channel_name(k: usize, total: usize) -> String {
    if total == CHANNEL_NAMES.len() {
        CHANNEL_NAMES[k].to_string()
    } else {
        format!("channel{k}")
    }
}

pub fn write_fgrd(batch: &FieldBatch, w: &mut impl Write) -> Result<()> {
    if batch.is_normalized() {
        return Err(Error::InvalidArgument("FGRD stores data units; denormalise first".into()));
    }
    let dims = batch.data().dims4()?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for d in dims {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension {d} overflows u32")))?;
        w.write_all(&d.to_le_bytes())?;
    }
    for spec in batch.channels() {
        let flags = u8::from(spec.lower.is_finite()) | (u8::from(spec.upper.is_finite()) << 1);
        w.write_all(&[flags])?;
        for v in [spec.lower, spec.upper, spec.mean, spec.std, spec.range] {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    let mask: Vec<u8> = batch.mask().cells().iter().map(|&v| u8::from(v)).collect();
    w.write_all(&mask)?;
    let mut buf = Vec::with_capacity(4 * batch.data().len());
    for &v in batch.data().data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_fgrd(r: &mut impl Read) -> Result<FieldBatch> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not an FGRD file (bad magic)".into()));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported FGRD version {version}")));
    }
    let mut dims = [0usize; 4];
    for d in &mut dims {
        *d = read_u32(r)? as usize;
    }
    let [n, k, h, w] = dims;
    let plane = h.checked_mul(w);
    let total = plane
        .and_then(|p| p.checked_mul(k))
        .and_then(|v| v.checked_mul(n))
        .filter(|&t| t <= MAX_VALUES)
        .ok_or_else(|| Error::Format(format!("dimension overflow {n}x{k}x{h}x{w}")))?;
    let plane = plane.expect("checked above");
    let mut channels = Vec::with_capacity(k.min(1024));
    for c in 0..k {
        let mut flags = [0u8; 1];
        read_exact(r, &mut flags)?;
        let mut vals = [0f64; 5];
        for v in &mut vals {
            let mut b = [0u8; 4];
            read_exact(r, &mut b)?;
            *v = f64::from(f32::from_le_bytes(b));
        }
        let lower = if flags[0] & 1 != 0 { vals[0] } else { f64::NEG_INFINITY };
        let upper = if flags[0] & 2 != 0 { vals[1] } else { f64::INFINITY };
        let mut spec = ChannelSpec::new(channel_name(c, k), lower, upper)
            .map_err(|e| Error::Format(e.to_string()))?;
        spec.mean = vals[2];
        spec.std = vals[3];
        spec.range = vals[4];
        channels.push(spec);
    }
    let mut mask = vec![0u8; plane];
    read_exact(r, &mut mask)?;
    if mask.iter().any(|&m| m > 1) {
        return Err(Error::Format("mask values must be 0 or 1".into()));
    }
    let mut data = Vec::with_capacity(total);
    let mut buf = vec![0u8; 4 * plane.max(1)];
    for _ in 0..n * k {
        read_exact(r, &mut buf[..4 * plane])?;
        data.extend(buf[..4 * plane].chunks_exact(4).map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("chunk")))));
    }
    let mask = Mask::new(h, w, mask.into_iter().map(|m| m == 1).collect())?;
    FieldBatch::unclipped(Tensor::new(dims, data)?, mask, channels).map_err(|e| Error::Format(e.to_string()))
}

pub fn save_fgrd(batch: &FieldBatch, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    write_fgrd(batch, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_fgrd(path: impl AsRef<Path>) -> Result<FieldBatch> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    read_fgrd(&mut r)
}
