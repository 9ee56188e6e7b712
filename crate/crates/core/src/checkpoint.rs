//! `ONAV` checkpoint files.
//!
//! All integers are little-endian `u64` unless noted; floats are
//! little-endian IEEE-754 binary64.
//!
//! ```text
//! "ONAV"                      4 bytes magic
//! version                     u32 (currently 1)
//! parameter count P
//! P times:
//!     name length, name bytes (UTF-8)
//!     rank, rank x dim
//!     product(dims) x f64     parameter values
//! P times: Adam first-moment values (same shapes, same order)
//! P times: Adam second-moment values
//! step_count
//! rng_seed
//! dilation count D, D x dilation
//! residual flag               u8 (0 or 1)
//! ```
//!
//! Channel widths are recovered from the parameter shapes.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::optim::AdamState;
use crate::segnet::{ArchConfig, NetworkState};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"ONAV";
pub const VERSION: u32 = 1;

pub fn encode(net: &NetworkState) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_u64(&mut out, net.params.len() as u64);
    for (name, p) in net.names.iter().zip(&net.params) {
        put_u64(&mut out, name.len() as u64);
        out.extend_from_slice(name.as_bytes());
        put_u64(&mut out, p.rank() as u64);
        for &d in p.shape() {
            put_u64(&mut out, d as u64);
        }
        put_f64s(&mut out, p.data());
    }
    for t in net.adam.m.iter().chain(&net.adam.v) {
        put_f64s(&mut out, t.data());
    }
    put_u64(&mut out, net.adam.step_count);
    put_u64(&mut out, net.rng_seed);
    put_u64(&mut out, net.arch.dilations.len() as u64);
    for &d in &net.arch.dilations {
        put_u64(&mut out, d as u64);
    }
    out.push(net.arch.use_residual_block as u8);
    out
}

pub fn decode(bytes: &[u8]) -> Result<NetworkState> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic, not an ONAV checkpoint".into()));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u64()? as usize;
    let mut names = Vec::with_capacity(count);
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u64()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Checkpoint("non-UTF-8 name".into()))?;
        let rank = r.u64()? as usize;
        if rank > 8 {
            return Err(Error::Checkpoint(format!("implausible rank {rank} for {name}")));
        }
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let data = r.f64s(shape.iter().product())?;
        names.push(name);
        params.push(Tensor::new(shape, data)?);
    }
    let mut moments = Vec::with_capacity(2 * count);
    for i in 0..2 * count {
        let p = &params[i % count];
        moments.push(Tensor::new(p.shape().to_vec(), r.f64s(p.len())?)?);
    }
    let v = moments.split_off(count);
    let step_count = r.u64()?;
    let rng_seed = r.u64()?;
    let nd = r.u64()? as usize;
    if nd > 64 {
        return Err(Error::Checkpoint(format!("implausible dilation count {nd}")));
    }
    let dilations = (0..nd).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let use_residual_block = match r.take(1)?[0] {
        0 => false,
        1 => true,
        other => return Err(Error::Checkpoint(format!("bad residual flag {other}"))),
    };
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let widths = ["stage1.weight", "stage2.weight", "stage3.weight", "head.weight"]
        .iter()
        .enumerate()
        .map(|(i, n)| {
            let idx = names.iter().position(|x| x == n).ok_or_else(|| Error::Checkpoint(format!("missing {n}")))?;
            // The head's input channels give the dilated-stage width.
            Ok(if i < 3 { params[idx].shape()[0] } else { params[idx].shape()[1] })
        })
        .collect::<Result<Vec<_>>>()?;
    let arch = ArchConfig { widths, dilations, use_residual_block };
    arch.validate()?;
    let expected: Vec<Vec<usize>> = NetworkState::init(&arch, 0)?.params.iter().map(|p| p.shape().to_vec()).collect();
    let got: Vec<Vec<usize>> = params.iter().map(|p| p.shape().to_vec()).collect();
    if expected != got {
        return Err(Error::Checkpoint("parameter shapes do not match the recorded architecture".into()));
    }
    Ok(NetworkState { arch, names, params, adam: AdamState { m: moments, v, step_count }, rng_seed })
}

pub fn save(net: &NetworkState, path: &Path) -> Result<()> {
    fs::write(path, encode(net)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<NetworkState> {
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, vals: &[f64]) {
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::RgbImage;
    use crate::loss::{LabelMap, LossConfig};
    use crate::maskops::BinaryMask;

    fn trained_net() -> NetworkState {
        let arch = ArchConfig { widths: vec![4, 6, 8, 8], dilations: vec![2, 3], use_residual_block: true };
        let mut net = NetworkState::init(&arch, 9).unwrap();
        let img = RgbImage::filled(16, 16, [0.3, 0.6, 0.1]);
        let labels = LabelMap::from_mask(&BinaryMask::from_fn(16, 16, |y, _| y < 8));
        net.train_step(&img, &labels, &LossConfig::default(), 1e-2).unwrap();
        net
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let net = trained_net();
        let bytes = encode(&net);
        let back = decode(&bytes).unwrap();
        assert_eq!(back, net);
        assert_eq!(encode(&back), bytes);
        let img = RgbImage::filled(24, 24, [0.9, 0.1, 0.5]).to_input_tensor();
        let a = net.forward(&img).unwrap();
        let b = back.forward(&img).unwrap();
        assert!(a.probs().iter().zip(b.probs()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&trained_net());
        assert_eq!(&bytes[..4], b"ONAV");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 14);
        let name_len = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
        assert_eq!(&bytes[24..24 + name_len], b"stage1.weight");
    }

    #[test]
    fn corrupt_input_rejected() {
        let bytes = encode(&trained_net());
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(decode(&long).is_err());
    }
}
