//! Waveform and mel-spectrogram processing: STFT analysis with fixed framing
//! (22.05 kHz, 1024-sample Hann window, hop 256), an HTK-style 80-band mel
//! filterbank over 0–8000 Hz, Griffin-Lim phase reconstruction, and 16-bit
//! PCM WAV I/O.

mod griffin_lim;
mod mel;
mod stft;
mod wav;

pub use griffin_lim::griffin_lim;
pub use mel::{mel_project, trim_leading_trailing_silence, MelFilterbank};
pub use stft::{stft_complex, stft_magnitude};
pub use wav::{read_wav, write_wav};

use crate::error::{Error, Result};
use crate::Real;

pub const SAMPLE_RATE: u32 = 22050;
pub const N_FFT: usize = 1024;
pub const WIN_LENGTH: usize = 1024;
pub const HOP_LENGTH: usize = 256;
pub const N_FREQ_BINS: usize = N_FFT / 2 + 1;
pub const N_MELS: usize = 80;
pub const MEL_FMIN: Real = 0.0;
pub const MEL_FMAX: Real = 8000.0;
/// Floor applied to mel power before the log.
pub const LOG_FLOOR: Real = 1e-10;

/// Mono waveform at the fixed project sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<Real>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<Real>) -> Self {
        Waveform {
            samples,
            sample_rate: SAMPLE_RATE,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn rms(&self) -> Real {
        if self.samples.is_empty() {
            return 0.0;
        }
        (self.samples.iter().map(|&s| s * s).sum::<Real>() / self.samples.len() as Real).sqrt()
    }

    pub fn peak(&self) -> Real {
        self.samples.iter().fold(0.0, |m, &s| m.max(s.abs()))
    }
}

/// Log-mel spectrogram, `n_frames × 80`, natural-log power with a 1e-10 floor.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    data: Vec<Real>,
    n_frames: usize,
}

impl MelSpectrogram {
    pub fn new(n_frames: usize, data: Vec<Real>) -> Result<Self> {
        if n_frames == 0 || data.len() != n_frames * N_MELS {
            return Err(Error::ShapeMismatch {
                op: "MelSpectrogram::new",
                details: format!("{} values for {} frames", data.len(), n_frames),
            });
        }
        Ok(MelSpectrogram { data, n_frames })
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn data(&self) -> &[Real] {
        &self.data
    }

    pub fn frame(&self, t: usize) -> &[Real] {
        &self.data[t * N_MELS..(t + 1) * N_MELS]
    }

    pub fn frames(&self) -> impl Iterator<Item = &[Real]> {
        self.data.chunks(N_MELS)
    }

    /// Mean linear power of one frame (inverse of the stored log).
    pub fn frame_power(&self, t: usize) -> Real {
        self.frame(t).iter().map(|&v| v.exp()).sum::<Real>() / N_MELS as Real
    }
}

/// The number of STFT frames produced for a signal of `len` samples:
/// `ceil(len / hop)`.
pub fn n_frames_for_len(len: usize) -> usize {
    len.div_ceil(HOP_LENGTH)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_count_formula() {
        assert_eq!(n_frames_for_len(22050), 87);
        assert_eq!(n_frames_for_len(1), 1);
        assert_eq!(n_frames_for_len(256), 1);
        assert_eq!(n_frames_for_len(257), 2);
    }

    #[test]
    fn mel_shape_enforced() {
        assert!(MelSpectrogram::new(2, vec![0.0; 160]).is_ok());
        assert!(MelSpectrogram::new(2, vec![0.0; 159]).is_err());
        assert!(MelSpectrogram::new(0, vec![]).is_err());
    }
}
