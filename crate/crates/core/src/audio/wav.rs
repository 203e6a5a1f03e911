//! Canonical 16-bit PCM mono WAV read/write at 22050 Hz, little-endian.

use std::io::{Read, Write};
use std::path::Path;

use super::{Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::Real;

pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let io_err = |e| Error::io(path.display().to_string(), e);
    let n = w.samples.len() as u32;
    let data_bytes = n * 2;
    let mut buf = Vec::with_capacity(44 + data_bytes as usize);
    buf.extend_from_slice(b"RIFF");
    buf.extend_from_slice(&(36 + data_bytes).to_le_bytes());
    buf.extend_from_slice(b"WAVE");
    buf.extend_from_slice(b"fmt ");
    buf.extend_from_slice(&16u32.to_le_bytes());
    buf.extend_from_slice(&1u16.to_le_bytes()); // PCM
    buf.extend_from_slice(&1u16.to_le_bytes()); // mono
    buf.extend_from_slice(&SAMPLE_RATE.to_le_bytes());
    buf.extend_from_slice(&(SAMPLE_RATE * 2).to_le_bytes()); // byte rate
    buf.extend_from_slice(&2u16.to_le_bytes()); // block align
    buf.extend_from_slice(&16u16.to_le_bytes()); // bits per sample
    buf.extend_from_slice(b"data");
    buf.extend_from_slice(&data_bytes.to_le_bytes());
    for &s in &w.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(io_err)?;
    f.write_all(&buf).map_err(io_err)
}

pub fn read_wav(path: &Path) -> Result<Waveform> {
    let io_err = |e| Error::io(path.display().to_string(), e);
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(io_err)?
        .read_to_end(&mut bytes)
        .map_err(io_err)?;
    let bad = |msg: &str| Error::Container(format!("{}: {msg}", path.display()));
    if bytes.len() < 44 || &bytes[..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(bad("not a RIFF/WAVE file"));
    }
    // walk chunks to find fmt and data
    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    let mut data: Option<(usize, usize)> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body = pos + 8;
        if body + size > bytes.len() {
            return Err(bad("truncated chunk"));
        }
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(bad("short fmt chunk"));
                }
                let tag = u16::from_le_bytes(bytes[body..body + 2].try_into().unwrap());
                let channels = u16::from_le_bytes(bytes[body + 2..body + 4].try_into().unwrap());
                let rate = u32::from_le_bytes(bytes[body + 4..body + 8].try_into().unwrap());
                let bits = u16::from_le_bytes(bytes[body + 14..body + 16].try_into().unwrap());
                fmt = Some((tag, channels, rate, bits));
            }
            b"data" => data = Some((body, size)),
            _ => {}
        }
        pos = body + size + (size & 1);
    }
    let (tag, channels, rate, bits) = fmt.ok_or_else(|| bad("missing fmt chunk"))?;
    if tag != 1 || channels != 1 || bits != 16 {
        return Err(bad("expected 16-bit PCM mono"));
    }
    if rate != SAMPLE_RATE {
        return Err(bad(&format!("expected {SAMPLE_RATE} Hz, got {rate}")));
    }
    let (off, size) = data.ok_or_else(|| bad("missing data chunk"))?;
    let samples = bytes[off..off + size]
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]) as Real / 32767.0)
        .collect();
    Ok(Waveform::new(samples))
}
