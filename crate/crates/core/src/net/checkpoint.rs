//! Binary checkpoint: little-endian header (magic, version, network
//! config) followed by each parameter block as `rows:u32 cols:u32` and
//! `rows * cols` f32 values, in declaration order, then the running
//! normalization statistics as `channels:u32` and f64 means and variances.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::network::{Network, NetworkConfig};
use super::tape::Matrix;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"PCCHGNET";
pub const VERSION: u32 = 2;

pub fn encode(net: &Network) -> Vec<u8> {
    let mut out = Vec::new();
    let c = &net.config;
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(c.num_blocks as u32).to_le_bytes());
    out.extend_from_slice(&(c.encoder_channels.len() as u32).to_le_bytes());
    for ch in &c.encoder_channels {
        out.extend_from_slice(&(*ch as u32).to_le_bytes());
    }
    out.extend_from_slice(&(c.k as u32).to_le_bytes());
    out.extend_from_slice(&c.conv_radius.to_le_bytes());
    out.extend_from_slice(&(c.kernel_point_count as u32).to_le_bytes());
    out.extend_from_slice(&c.first_cell.to_le_bytes());
    out.extend_from_slice(&c.seed.to_le_bytes());
    out.extend_from_slice(&(net.params.len() as u32).to_le_bytes());
    for p in &net.params {
        let (r, cols) = p.value.dim();
        out.extend_from_slice(&(r as u32).to_le_bytes());
        out.extend_from_slice(&(cols as u32).to_le_bytes());
        for v in p.value.iter() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out.extend_from_slice(&(net.norm.len() as u32).to_le_bytes());
    for s in &net.norm {
        out.extend_from_slice(&(s.mean.len() as u32).to_le_bytes());
        for v in s.mean.iter().chain(&s.var) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.buf.len() {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode(buf: &[u8]) -> Result<Network> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let num_blocks = r.u32()? as usize;
    let n_enc = r.u32()? as usize;
    if n_enc > 64 {
        return Err(Error::Checkpoint(format!("implausible encoder depth {n_enc}")));
    }
    let encoder_channels = (0..n_enc).map(|_| r.u32().map(|v| v as usize)).collect::<Result<_>>()?;
    let config = NetworkConfig {
        num_blocks,
        encoder_channels,
        k: r.u32()? as usize,
        conv_radius: r.f64()?,
        kernel_point_count: r.u32()? as usize,
        first_cell: r.f64()?,
        seed: r.u64()?,
    };
    config.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
    let count = r.u32()? as usize;
    let mut values = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let data = (0..rows * cols).map(|_| r.f32().map(f64::from)).collect::<Result<Vec<_>>>()?;
        values.push(Matrix::from_shape_vec((rows, cols), data).unwrap());
    }
    let mut net = Network::from_params(config, values).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let layers = r.u32()? as usize;
    if layers != net.norm.len() {
        return Err(Error::Checkpoint(format!("{layers} normalization layers, expected {}", net.norm.len())));
    }
    for s in &mut net.norm {
        let ch = r.u32()? as usize;
        if ch != s.mean.len() {
            return Err(Error::Checkpoint(format!("normalization width {ch}, expected {}", s.mean.len())));
        }
        for v in s.mean.iter_mut().chain(s.var.iter_mut()) {
            *v = r.f64()?;
        }
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok(net)
}

pub fn save(path: &Path, net: &Network) -> Result<()> {
    let bytes = encode(net);
    crate::io_util::write_atomic(path, |w| w.write_all(&bytes))
}

pub fn load(path: &Path) -> Result<Network> {
    decode(&fs::read(path)?)
}
