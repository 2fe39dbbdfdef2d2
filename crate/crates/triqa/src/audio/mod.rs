//! Audio ingestion and log-mel feature extraction.
//!
//! [`load_waveform`] normalizes any supported RIFF/WAVE file to the pipeline
//! format — mono, 44.1 kHz, amplitudes in `[-1, 1]` — and [`logmel`] turns a
//! normalized waveform into the 128-band log-mel spectrogram the audio
//! network consumes.

mod mel;
mod resample;
mod wav;

pub use mel::{logmel, mel_filterbank, LogMelSpectrogram, MelConfig};
pub use resample::resample;
pub use wav::{load_waveform, read_wav, write_wav_mono16, Waveform};

/// Target sample rate after normalization.
pub const SAMPLE_RATE: u32 = 44100;
