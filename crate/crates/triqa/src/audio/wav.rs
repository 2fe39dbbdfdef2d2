//! Minimal RIFF/WAVE reader and writer for 16-bit PCM.
//!
//! The reader accepts mono or stereo PCM-16 at any rate, skipping unknown
//! chunks; everything else is rejected. The writer emits the canonical
//! 44-byte-header mono layout used by the synthetic data generator.

use super::resample::resample;
use super::SAMPLE_RATE;
use crate::error::{Error, Result};
use std::fs;
use std::path::Path;

/// Mono waveform with amplitudes in `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Parse {
                offset: self.pos as u64,
                msg: format!("truncated while reading {what} ({n} bytes needed)"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Parse WAV bytes into per-channel interleaved PCM, downmixed to mono and
/// scaled by 1/32768, at the file's native rate.
pub fn read_wav(bytes: &[u8]) -> Result<Waveform> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4, "RIFF magic")? != b"RIFF" {
        return Err(Error::Parse {
            offset: 0,
            msg: "not a RIFF file".into(),
        });
    }
    c.u32("RIFF size")?;
    if c.take(4, "WAVE magic")? != b"WAVE" {
        return Err(Error::Parse {
            offset: 8,
            msg: "RIFF file is not WAVE".into(),
        });
    }

    let mut fmt: Option<(u16, u16, u32, u16)> = None; // (format, channels, rate, bits)
    let mut data: Option<&[u8]> = None;
    while c.pos < bytes.len() {
        let id: [u8; 4] = c.take(4, "chunk id")?.try_into().expect("4 bytes");
        let size = c.u32("chunk size")? as usize;
        let body = c.take(size, "chunk body")?;
        match &id {
            b"fmt " => {
                if size < 16 {
                    return Err(Error::Parse {
                        offset: (c.pos - size) as u64,
                        msg: format!("fmt chunk too short: {size} bytes"),
                    });
                }
                let format = u16::from_le_bytes([body[0], body[1]]);
                let channels = u16::from_le_bytes([body[2], body[3]]);
                let rate = u32::from_le_bytes([body[4], body[5], body[6], body[7]]);
                let bits = u16::from_le_bytes([body[14], body[15]]);
                fmt = Some((format, channels, rate, bits));
            }
            b"data" => data = Some(body),
            _ => {} // LIST, fact, cue, ... — irrelevant here
        }
        if size % 2 == 1 {
            // chunks are word-aligned; a pad byte follows odd sizes
            let _ = c.take(1, "chunk padding");
        }
    }

    let (format, channels, rate, bits) = fmt.ok_or(Error::Parse {
        offset: bytes.len() as u64,
        msg: "missing fmt chunk".into(),
    })?;
    let data = data.ok_or(Error::Parse {
        offset: bytes.len() as u64,
        msg: "missing data chunk".into(),
    })?;
    if format != 1 {
        return Err(Error::Format(format!(
            "unsupported WAV encoding {format} (only PCM = 1)"
        )));
    }
    if bits != 16 {
        return Err(Error::Format(format!(
            "unsupported bit depth {bits} (only 16-bit PCM)"
        )));
    }
    if !(1..=2).contains(&channels) {
        return Err(Error::Format(format!(
            "unsupported channel count {channels} (only mono or stereo)"
        )));
    }
    if rate == 0 {
        return Err(Error::Format("sample rate 0".into()));
    }
    let frame_bytes = 2 * channels as usize;
    if data.len() % frame_bytes != 0 {
        return Err(Error::Parse {
            offset: (bytes.len() - data.len() % frame_bytes) as u64,
            msg: format!(
                "data chunk of {} bytes is not a whole number of {channels}-channel frames",
                data.len()
            ),
        });
    }

    let n = data.len() / frame_bytes;
    let mut samples = Vec::with_capacity(n);
    const SCALE: f32 = 1.0 / 32768.0;
    for f in 0..n {
        let mut acc = 0.0f32;
        for ch in 0..channels as usize {
            let off = f * frame_bytes + 2 * ch;
            let v = i16::from_le_bytes([data[off], data[off + 1]]);
            acc += v as f32 * SCALE;
        }
        samples.push(acc / channels as f32);
    }
    Ok(Waveform {
        samples,
        sample_rate: rate,
    })
}

/// Load a WAV file and normalize it: mono, resampled to 44.1 kHz.
pub fn load_waveform<P: AsRef<Path>>(path: P) -> Result<Waveform> {
    let bytes = fs::read(path.as_ref())?;
    let wav = read_wav(&bytes)?;
    let samples = resample(&wav.samples, wav.sample_rate, SAMPLE_RATE);
    Ok(Waveform {
        samples,
        sample_rate: SAMPLE_RATE,
    })
}

/// Write mono PCM-16. Amplitudes are clamped to `[-1, 1]` and quantized by
/// the inverse of the reader's scaling, so write∘read is the identity for
/// in-range lattice values.
pub fn write_wav_mono16<P: AsRef<Path>>(path: P, samples: &[f32], sample_rate: u32) -> Result<()> {
    let mut out = Vec::with_capacity(44 + samples.len() * 2);
    let data_len = (samples.len() * 2) as u32;
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&sample_rate.to_le_bytes());
    out.extend_from_slice(&(sample_rate * 2).to_le_bytes()); // byte rate
    out.extend_from_slice(&2u16.to_le_bytes()); // block align
    out.extend_from_slice(&16u16.to_le_bytes()); // bits
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in samples {
        let q = (s.clamp(-1.0, 1.0) * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}
