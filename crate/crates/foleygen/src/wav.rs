//! 16-bit PCM mono little-endian WAV read/write. Only the subset the
//! pipeline emits is accepted back; anything else is a format error.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::toy_data::Waveform;
use crate::util::read_exact_counted;

pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(f);
    let data_len = (w.samples.len() * 2) as u32;

    let mut header = Vec::with_capacity(44);
    header.extend_from_slice(b"RIFF");
    header.extend_from_slice(&(36 + data_len).to_le_bytes());
    header.extend_from_slice(b"WAVE");
    header.extend_from_slice(b"fmt ");
    header.extend_from_slice(&16u32.to_le_bytes());
    header.extend_from_slice(&1u16.to_le_bytes()); // PCM
    header.extend_from_slice(&1u16.to_le_bytes()); // mono
    header.extend_from_slice(&w.sample_rate.to_le_bytes());
    header.extend_from_slice(&(w.sample_rate * 2).to_le_bytes()); // byte rate
    header.extend_from_slice(&2u16.to_le_bytes()); // block align
    header.extend_from_slice(&16u16.to_le_bytes()); // bits per sample
    header.extend_from_slice(b"data");
    header.extend_from_slice(&data_len.to_le_bytes());

    let mut payload = Vec::with_capacity(w.samples.len() * 2);
    for &s in &w.samples {
        payload.extend_from_slice(&quantize_i16(s).to_le_bytes());
    }
    out.write_all(&header).map_err(|e| Error::io(path, e))?;
    out.write_all(&payload).map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn quantize_i16(x: f32) -> i16 {
    (x.clamp(-1.0, 1.0) * 32767.0).round() as i16
}

pub fn read_wav(path: &Path) -> Result<Waveform> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(f);
    let ctx = path.display();

    let mut hdr = [0u8; 12];
    read_exact_counted(&mut r, &mut hdr, "wav header")?;
    if &hdr[0..4] != b"RIFF" || &hdr[8..12] != b"WAVE" {
        return Err(Error::Format(format!("{ctx}: not a RIFF/WAVE file")));
    }

    let mut sample_rate = 0u32;
    let mut fmt_seen = false;
    loop {
        let mut chunk_hdr = [0u8; 8];
        read_exact_counted(&mut r, &mut chunk_hdr, "wav chunk header")?;
        let id: [u8; 4] = chunk_hdr[0..4].try_into().unwrap();
        let size = u32::from_le_bytes(chunk_hdr[4..8].try_into().unwrap()) as usize;
        match &id {
            b"fmt " => {
                if size < 16 {
                    return Err(Error::Format(format!("{ctx}: fmt chunk too short")));
                }
                let mut fmt = vec![0u8; size];
                read_exact_counted(&mut r, &mut fmt, "wav fmt chunk")?;
                let format = u16::from_le_bytes([fmt[0], fmt[1]]);
                let channels = u16::from_le_bytes([fmt[2], fmt[3]]);
                sample_rate = u32::from_le_bytes([fmt[4], fmt[5], fmt[6], fmt[7]]);
                let bits = u16::from_le_bytes([fmt[14], fmt[15]]);
                if format != 1 || channels != 1 || bits != 16 {
                    return Err(Error::Format(format!(
                        "{ctx}: need 16-bit PCM mono, found format={format} channels={channels} bits={bits}"
                    )));
                }
                fmt_seen = true;
            }
            b"data" => {
                if !fmt_seen {
                    return Err(Error::Format(format!("{ctx}: data chunk before fmt")));
                }
                if size % 2 != 0 {
                    return Err(Error::Format(format!("{ctx}: odd data chunk size {size}")));
                }
                let mut payload = vec![0u8; size];
                read_exact_counted(&mut r, &mut payload, "wav data chunk")?;
                let samples = payload
                    .chunks_exact(2)
                    .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32 / 32767.0)
                    .collect();
                return Ok(Waveform { samples, sample_rate });
            }
            _ => {
                // skip unknown chunk (sizes are even-padded in RIFF)
                let skip = size + (size & 1);
                let mut sink = vec![0u8; skip];
                read_exact_counted(&mut r, &mut sink, "wav chunk body")?;
            }
        }
    }
}
