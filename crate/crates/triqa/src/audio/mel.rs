//! 128-band log-mel spectrograms.

use super::wav::Waveform;
use super::SAMPLE_RATE;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

/// STFT and filterbank parameters. The defaults make 128 frames span
/// (127·512 + 2048) / 44100 ≈ 1.52 s, the segment duration the audio
/// network is built around.
#[derive(Debug, Clone)]
pub struct MelConfig {
    pub n_mels: usize,
    pub frame_len: usize,
    pub hop: usize,
    pub log_floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        MelConfig {
            n_mels: 128,
            frame_len: 2048,
            hop: 512,
            log_floor: 1e-6,
        }
    }
}

/// Log-mel feature matrix for one recording.
#[derive(Debug, Clone)]
pub struct LogMelSpectrogram {
    /// `[T, n_mels]` log-energies.
    pub frames: Tensor<f32>,
    pub frame_hop_seconds: f64,
    pub source_id: String,
}

impl LogMelSpectrogram {
    pub fn n_frames(&self) -> usize {
        self.frames.shape()[0]
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular HTK-scale filters over `[0, fs/2]`, returned sparsely as
/// `(first_bin, weights)` per filter against an `n_fft/2 + 1`-bin power
/// spectrum.
pub fn mel_filterbank(n_mels: usize, n_fft: usize, fs: f64) -> Vec<(usize, Vec<f32>)> {
    let n_bins = n_fft / 2 + 1;
    let mel_max = hz_to_mel(fs / 2.0);
    // n_mels triangles need n_mels + 2 corner points
    let corners_hz: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mel_max * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bin_hz = fs / n_fft as f64;
    let mut filters = Vec::with_capacity(n_mels);
    for m in 0..n_mels {
        let (lo, mid, hi) = (corners_hz[m], corners_hz[m + 1], corners_hz[m + 2]);
        let mut first = None;
        let mut weights = Vec::new();
        for k in 0..n_bins {
            let f = k as f64 * bin_hz;
            let w = if f <= lo || f >= hi {
                0.0
            } else if f <= mid {
                (f - lo) / (mid - lo)
            } else {
                (hi - f) / (hi - mid)
            };
            if w > 0.0 {
                if first.is_none() {
                    first = Some(k);
                }
                weights.push(w as f32);
            } else if first.is_some() {
                break; // triangles are contiguous in frequency
            }
        }
        filters.push((first.unwrap_or(0), weights));
    }
    filters
}

/// Compute the log-mel spectrogram of a normalized waveform.
///
/// Frames are `frame_len` samples hopping by `hop`; each is Hann-windowed,
/// turned into a power spectrum, pooled through the mel filterbank, and
/// floored as `ln(e + log_floor)`.
pub fn logmel(w: &Waveform, cfg: &MelConfig, source_id: &str) -> Result<LogMelSpectrogram> {
    if w.sample_rate != SAMPLE_RATE {
        return Err(Error::Config(format!(
            "logmel: waveform must be normalized to {SAMPLE_RATE} Hz, got {}",
            w.sample_rate
        )));
    }
    if w.samples.len() < cfg.frame_len {
        return Err(Error::Config(format!(
            "logmel: waveform of {} samples is shorter than one frame ({})",
            w.samples.len(),
            cfg.frame_len
        )));
    }
    let n_frames = 1 + (w.samples.len() - cfg.frame_len) / cfg.hop;
    let window: Vec<f32> = (0..cfg.frame_len)
        .map(|n| {
            let x = 2.0 * std::f64::consts::PI * n as f64 / cfg.frame_len as f64;
            (0.5 - 0.5 * x.cos()) as f32
        })
        .collect();
    let filters = mel_filterbank(cfg.n_mels, cfg.frame_len, SAMPLE_RATE as f64);
    let fft = FftPlanner::<f32>::new().plan_fft_forward(cfg.frame_len);

    let mut out = Vec::with_capacity(n_frames * cfg.n_mels);
    let mut buf = vec![Complex::new(0.0f32, 0.0f32); cfg.frame_len];
    let n_bins = cfg.frame_len / 2 + 1;
    let mut power = vec![0.0f32; n_bins];
    for t in 0..n_frames {
        let start = t * cfg.hop;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex::new(w.samples[start + i] * window[i], 0.0);
        }
        fft.process(&mut buf);
        for (k, p) in power.iter_mut().enumerate() {
            *p = buf[k].norm_sqr();
        }
        for (first, weights) in &filters {
            let mut e = 0.0f64;
            for (i, &wgt) in weights.iter().enumerate() {
                e += (power[first + i] * wgt) as f64;
            }
            out.push((e + cfg.log_floor).ln() as f32);
        }
    }
    Ok(LogMelSpectrogram {
        frames: Tensor::new(vec![n_frames, cfg.n_mels], out)?,
        frame_hop_seconds: cfg.hop as f64 / SAMPLE_RATE as f64,
        source_id: source_id.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn waveform(samples: Vec<f32>) -> Waveform {
        Waveform {
            samples,
            sample_rate: SAMPLE_RATE,
        }
    }

    #[test]
    fn ten_seconds_yield_858_frames() {
        let w = waveform(vec![0.0; 441000]);
        let m = logmel(&w, &MelConfig::default(), "t").unwrap();
        assert_eq!(m.frames.shape(), &[858, 128]);
    }

    #[test]
    fn frame_count_matches_direct_enumeration() {
        let cfg = MelConfig::default();
        for len in [2048usize, 2049, 2559, 2560, 4096, 67072, 70000] {
            let w = waveform(vec![0.0; len]);
            let m = logmel(&w, &cfg, "t").unwrap();
            // direct sliding-window count
            let mut count = 0;
            let mut start = 0;
            while start + cfg.frame_len <= len {
                count += 1;
                start += cfg.hop;
            }
            assert_eq!(m.n_frames(), count, "len={len}");
        }
    }

    #[test]
    fn silence_hits_the_log_floor_exactly() {
        let w = waveform(vec![0.0; 4096]);
        let m = logmel(&w, &MelConfig::default(), "t").unwrap();
        let floor = (1e-6f64).ln() as f32;
        assert!(m.frames.data().iter().all(|&v| v == floor));
    }

    #[test]
    fn segment_of_128_frames_spans_1_5_seconds() {
        let cfg = MelConfig::default();
        let span = (127 * cfg.hop + cfg.frame_len) as f64 / SAMPLE_RATE as f64;
        assert!((span - 1.52).abs() < 0.01, "span {span}");
    }

    #[test]
    fn too_short_waveform_is_rejected() {
        let w = waveform(vec![0.0; 2047]);
        assert!(logmel(&w, &MelConfig::default(), "t").is_err());
    }

    #[test]
    fn wrong_sample_rate_is_rejected() {
        let w = Waveform {
            samples: vec![0.0; 4096],
            sample_rate: 22050,
        };
        assert!(logmel(&w, &MelConfig::default(), "t").is_err());
    }

    #[test]
    fn pure_tone_peaks_in_the_expected_mel_band() {
        let freq = 1000.0f64;
        let samples: Vec<f32> = (0..44100)
            .map(|t| (2.0 * std::f64::consts::PI * freq * t as f64 / 44100.0).sin() as f32 * 0.5)
            .collect();
        let m = logmel(&waveform(samples), &MelConfig::default(), "t").unwrap();
        // average band energy over frames, find the peak band
        let t = m.n_frames();
        let mut means = vec![0.0f64; 128];
        for i in 0..t {
            for b in 0..128 {
                means[b] += m.frames.at(&[i, b]) as f64;
            }
        }
        let peak = (0..128)
            .max_by(|&a, &b| means[a].partial_cmp(&means[b]).unwrap())
            .unwrap();
        // independent derivation of the band whose center is nearest 1 kHz
        let mel_max = hz_to_mel(22050.0);
        let expected = (0..128)
            .min_by_key(|&i| {
                let center = mel_to_hz(mel_max * (i + 1) as f64 / 129.0);
                ((center - freq).abs() * 1000.0) as i64
            })
            .unwrap();
        assert!(
            (peak as i64 - expected as i64).abs() <= 2,
            "peak {peak}, expected near {expected}"
        );
    }

    #[test]
    fn filterbank_is_nonnegative_and_covers_the_passband() {
        let filters = mel_filterbank(128, 2048, 44100.0);
        assert_eq!(filters.len(), 128);
        let n_bins = 1025;
        let mut column_sum = vec![0.0f64; n_bins];
        for (first, weights) in &filters {
            assert!(!weights.is_empty(), "empty filter starting at bin {first}");
            for (i, &w) in weights.iter().enumerate() {
                assert!(w >= 0.0);
                column_sum[first + i] += w as f64;
            }
        }
        // every bin strictly inside the first/last filter centers is covered
        let bin_hz = 44100.0 / 2048.0;
        let mel_max = hz_to_mel(22050.0);
        let first_center = mel_to_hz(mel_max / 129.0);
        let last_center = mel_to_hz(mel_max * 128.0 / 129.0);
        for (k, &s) in column_sum.iter().enumerate() {
            let f = k as f64 * bin_hz;
            if f > first_center && f < last_center {
                assert!(s > 0.0, "bin {k} ({f:.1} Hz) uncovered");
            }
        }
    }

    #[test]
    fn logmel_is_bit_stable() {
        let samples: Vec<f32> = (0..8192)
            .map(|t| ((t * 7919) % 32768) as f32 / 32768.0 - 0.5)
            .collect();
        let cfg = MelConfig::default();
        let a = logmel(&waveform(samples.clone()), &cfg, "t").unwrap();
        let b = logmel(&waveform(samples), &cfg, "t").unwrap();
        let bits_a: Vec<u32> = a.frames.data().iter().map(|v| v.to_bits()).collect();
        let bits_b: Vec<u32> = b.frames.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits_a, bits_b);
    }
}
