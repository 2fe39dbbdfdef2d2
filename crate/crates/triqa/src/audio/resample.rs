//! Windowed-sinc sample-rate conversion.

use std::f64::consts::PI;

/// Taps on each side of the interpolation center.
const HALF_TAPS: isize = 16;

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Resample to `to_rate` with a 32-tap Hann-windowed sinc kernel. Equal
/// rates pass the input through bit-exactly. Downsampling lowers the kernel
/// cutoff to the output Nyquist to suppress aliasing; edge kernels are
/// renormalized by their actual tap sum.
pub fn resample(input: &[f32], from_rate: u32, to_rate: u32) -> Vec<f32> {
    assert!(from_rate > 0 && to_rate > 0, "sample rates must be positive");
    if from_rate == to_rate || input.is_empty() {
        return input.to_vec();
    }
    let ratio = to_rate as f64 / from_rate as f64;
    let out_len = ((input.len() as f64) * ratio).round() as usize;
    let cutoff = 0.5 * ratio.min(1.0); // cycles per input sample
    let mut out = Vec::with_capacity(out_len);
    for j in 0..out_len {
        let center = j as f64 / ratio;
        let base = center.floor() as isize;
        let mut acc = 0.0f64;
        let mut norm = 0.0f64;
        for t in (base - HALF_TAPS + 1)..=(base + HALF_TAPS) {
            let dx = t as f64 - center;
            // Hann window over the 2*HALF_TAPS span
            let wpos = dx / HALF_TAPS as f64;
            if wpos.abs() >= 1.0 {
                continue;
            }
            let window = 0.5 + 0.5 * (PI * wpos).cos();
            let k = 2.0 * cutoff * sinc(2.0 * cutoff * dx) * window;
            norm += k;
            if t >= 0 && (t as usize) < input.len() {
                acc += k * input[t as usize] as f64;
            }
        }
        out.push(if norm.abs() > 1e-12 { (acc / norm) as f32 } else { 0.0 });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Magnitude of the DFT of `x` at integer bin `k`.
    fn dft_mag(x: &[f32], k: usize) -> f64 {
        let n = x.len() as f64;
        let mut re = 0.0f64;
        let mut im = 0.0f64;
        for (t, &v) in x.iter().enumerate() {
            let phase = -2.0 * PI * k as f64 * t as f64 / n;
            re += v as f64 * phase.cos();
            im += v as f64 * phase.sin();
        }
        (re * re + im * im).sqrt()
    }

    fn dominant_bin(x: &[f32], max_bin: usize) -> usize {
        (1..max_bin)
            .max_by(|&a, &b| dft_mag(x, a).partial_cmp(&dft_mag(x, b)).unwrap())
            .unwrap()
    }

    #[test]
    fn equal_rates_are_bit_identical() {
        let x: Vec<f32> = (0..1000).map(|i| ((i * 37) % 101) as f32 / 50.0 - 1.0).collect();
        let y = resample(&x, 44100, 44100);
        assert_eq!(x, y);
    }

    #[test]
    fn output_length_scales_with_ratio() {
        let x = vec![0.0f32; 22050];
        assert_eq!(resample(&x, 22050, 44100).len(), 44100);
        assert_eq!(resample(&x, 44100, 22050).len(), 11025);
    }

    #[test]
    fn upsampled_sine_keeps_its_frequency() {
        // 1 kHz sine at 22.05 kHz, one second
        let from = 22050u32;
        let x: Vec<f32> = (0..from)
            .map(|t| (2.0 * PI * 1000.0 * t as f64 / from as f64).sin() as f32)
            .collect();
        let y = resample(&x, from, 44100);
        assert_eq!(y.len(), 44100);
        // inspect an interior window to avoid edge-kernel effects; 4410
        // samples at 44.1 kHz = 10 Hz bins, 1 kHz -> bin 100
        let window = &y[2205..2205 + 4410];
        let bin = dominant_bin(window, 2205);
        assert!((99..=101).contains(&bin), "dominant bin {bin}");
    }

    #[test]
    fn downsampled_sine_keeps_its_frequency() {
        let from = 48000u32;
        let x: Vec<f32> = (0..from)
            .map(|t| (2.0 * PI * 1000.0 * t as f64 / from as f64).sin() as f32)
            .collect();
        let y = resample(&x, from, 44100);
        let window = &y[2205..2205 + 4410];
        let bin = dominant_bin(window, 2205);
        assert!((99..=101).contains(&bin), "dominant bin {bin}");
    }

    #[test]
    fn dc_signal_stays_near_unity() {
        let x = vec![0.5f32; 4000];
        let y = resample(&x, 32000, 44100);
        let interior = &y[100..y.len() - 100];
        for &v in interior {
            assert!((v - 0.5).abs() < 1e-3, "{v}");
        }
    }

    #[test]
    fn amplitude_is_roughly_preserved() {
        let from = 22050u32;
        let x: Vec<f32> = (0..from)
            .map(|t| (2.0 * PI * 440.0 * t as f64 / from as f64).sin() as f32)
            .collect();
        let y = resample(&x, from, 44100);
        let peak = y[1000..y.len() - 1000]
            .iter()
            .fold(0.0f32, |a, &b| a.max(b.abs()));
        assert!((peak - 1.0).abs() < 0.05, "peak {peak}");
    }
}
