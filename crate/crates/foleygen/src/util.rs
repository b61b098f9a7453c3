//! Shared helpers: seed derivation, Gaussian sampling, little-endian binary i/o.

use std::io::{Read, Write};

use rand::RngExt;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Derives an independent seed for a sub-entity (episode, batch element,
/// generation) from a base seed and a stream index. splitmix64 finalizer, so
/// consecutive indices land far apart.
pub fn mix_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn mix_seed3(base: u64, a: u64, b: u64) -> u64 {
    mix_seed(mix_seed(base, a), b)
}

/// Standard normal draw via Box-Muller (rand_distr not pulled in for one
/// distribution). Consumes two uniforms per call.
pub fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

// ---------------------------------------------------------------------------
// Binary i/o. All on-disk formats are little-endian.

/// read_exact that reports expected vs actual byte counts on truncation.
pub fn read_exact_counted(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    let mut got = 0;
    while got < buf.len() {
        match r.read(&mut buf[got..]) {
            Ok(0) => {
                return Err(Error::Format(format!(
                    "truncated {what}: expected {} bytes, found {}",
                    buf.len(),
                    got
                )))
            }
            Ok(n) => got += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(Error::Format(format!("reading {what}: {e}"))),
        }
    }
    Ok(())
}

pub fn expect_magic(r: &mut impl Read, magic: &[u8; 4], what: &str) -> Result<()> {
    let mut buf = [0u8; 4];
    read_exact_counted(r, &mut buf, "magic")?;
    if &buf != magic {
        return Err(Error::Format(format!(
            "bad magic for {what}: expected {:?}, found {:?}",
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(&buf)
        )));
    }
    Ok(())
}

pub fn write_all(w: &mut impl Write, bytes: &[u8]) -> Result<()> {
    w.write_all(bytes)
        .map_err(|e| Error::Format(format!("write failed: {e}")))
}

pub fn write_u16(w: &mut impl Write, v: u16) -> Result<()> {
    write_all(w, &v.to_le_bytes())
}

pub fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    write_all(w, &v.to_le_bytes())
}

pub fn write_f32(w: &mut impl Write, v: f32) -> Result<()> {
    write_all(w, &v.to_le_bytes())
}

pub fn read_u16(r: &mut impl Read, what: &str) -> Result<u16> {
    let mut b = [0u8; 2];
    read_exact_counted(r, &mut b, what)?;
    Ok(u16::from_le_bytes(b))
}

pub fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_counted(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_f32(r: &mut impl Read, what: &str) -> Result<f32> {
    let mut b = [0u8; 4];
    read_exact_counted(r, &mut b, what)?;
    Ok(f32::from_le_bytes(b))
}

pub fn write_u16s(w: &mut impl Write, vals: &[u16]) -> Result<()> {
    let mut bytes = Vec::with_capacity(vals.len() * 2);
    for v in vals {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_all(w, &bytes)
}

pub fn read_u16s(r: &mut impl Read, n: usize, what: &str) -> Result<Vec<u16>> {
    let mut bytes = vec![0u8; n * 2];
    read_exact_counted(r, &mut bytes, what)?;
    Ok(bytes
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect())
}

pub fn write_f32s(w: &mut impl Write, vals: &[f32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(vals.len() * 4);
    for v in vals {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_all(w, &bytes)
}

pub fn read_f32s(r: &mut impl Read, n: usize, what: &str) -> Result<Vec<f32>> {
    let mut bytes = vec![0u8; n * 4];
    read_exact_counted(r, &mut bytes, what)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Errors if the reader still has bytes left; strict loaders call this last.
pub fn expect_eof(r: &mut impl Read, what: &str) -> Result<()> {
    let mut probe = [0u8; 1];
    match r.read(&mut probe) {
        Ok(0) => Ok(()),
        Ok(_) => Err(Error::Format(format!("trailing data after {what}"))),
        Err(e) => Err(Error::Format(format!("reading {what}: {e}"))),
    }
}
