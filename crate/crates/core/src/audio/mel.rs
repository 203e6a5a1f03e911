//! HTK-style mel filterbank, mel projection, and silence trimming.

use super::{MelSpectrogram, LOG_FLOOR, MEL_FMAX, MEL_FMIN, N_FREQ_BINS, N_MELS, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::Real;

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10.0_f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filterbank, `80 × 513`, HTK spacing over 0–8000 Hz.
/// Rows are ordered by ascending center frequency.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    /// `[N_MELS × N_FREQ_BINS]` row-major weights.
    pub weights: Vec<Real>,
}

impl Default for MelFilterbank {
    fn default() -> Self {
        Self::new()
    }
}

impl MelFilterbank {
    pub fn new() -> Self {
        let mel_lo = hz_to_mel(MEL_FMIN as f64);
        let mel_hi = hz_to_mel(MEL_FMAX as f64);
        let edges: Vec<f64> = (0..N_MELS + 2)
            .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (N_MELS + 1) as f64))
            .collect();
        let bin_hz = SAMPLE_RATE as f64 / super::N_FFT as f64;
        let mut weights = vec![0.0 as Real; N_MELS * N_FREQ_BINS];
        for m in 0..N_MELS {
            let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
            for k in 0..N_FREQ_BINS {
                let f = k as f64 * bin_hz;
                let up = if center > left { (f - left) / (center - left) } else { 0.0 };
                let down = if right > center { (right - f) / (right - center) } else { 0.0 };
                let w = up.min(down).max(0.0);
                weights[m * N_FREQ_BINS + k] = w as Real;
            }
            // guarantee a positive row even when the triangle is narrower than
            // one FFT bin: put full weight on the bin nearest the center
            if weights[m * N_FREQ_BINS..(m + 1) * N_FREQ_BINS].iter().sum::<Real>() == 0.0 {
                let k = (center / bin_hz).round() as usize;
                weights[m * N_FREQ_BINS + k.min(N_FREQ_BINS - 1)] = 1.0;
            }
        }
        MelFilterbank { weights }
    }

    pub fn row(&self, m: usize) -> &[Real] {
        &self.weights[m * N_FREQ_BINS..(m + 1) * N_FREQ_BINS]
    }
}

/// Project a magnitude spectrogram `[T × 513]` onto log-mel:
/// `log(max(fb · mag^2, 1e-10))`.
pub fn mel_project(mag: &Tensor, fb: &MelFilterbank) -> Result<MelSpectrogram> {
    if mag.last_dim() != N_FREQ_BINS {
        return Err(Error::ShapeMismatch {
            op: "mel_project",
            details: format!("expected {} bins, got {}", N_FREQ_BINS, mag.last_dim()),
        });
    }
    let t_frames = mag.rows();
    let mut out = vec![0.0 as Real; t_frames * N_MELS];
    for (t, frame) in mag.data().chunks(N_FREQ_BINS).enumerate() {
        let power: Vec<Real> = frame.iter().map(|&v| v * v).collect();
        for m in 0..N_MELS {
            let e: Real = crate::kernels::dot(fb.row(m), &power);
            out[t * N_MELS + m] = e.max(LOG_FLOOR).ln();
        }
    }
    MelSpectrogram::new(t_frames, out)
}

/// Remove leading and trailing frames whose mean power falls below
/// `threshold_db` relative to the loudest frame. Always keeps at least one
/// frame (the loudest, when everything is below threshold).
pub fn trim_leading_trailing_silence(m: &MelSpectrogram, threshold_db: Real) -> MelSpectrogram {
    let t = m.n_frames();
    let powers: Vec<Real> = (0..t).map(|i| m.frame_power(i)).collect();
    let peak = powers.iter().fold(Real::MIN, |a, &b| a.max(b));
    // frames below an absolute -80 dBFS floor are silent no matter the peak
    const ABS_FLOOR: Real = 1e-8;
    let mut loud = vec![false; t];
    for (i, &p) in powers.iter().enumerate() {
        let db = 10.0 * (p / peak).max(1e-30).log10();
        loud[i] = db >= threshold_db && p > ABS_FLOOR;
    }
    let first = loud.iter().position(|&v| v);
    let last = loud.iter().rposition(|&v| v);
    let (lo, hi) = match (first, last) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            // all silence: keep the single loudest frame
            let argmax = powers
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap_or(0);
            (argmax, argmax)
        }
    };
    let data = m.data()[lo * N_MELS..(hi + 1) * N_MELS].to_vec();
    MelSpectrogram::new(hi - lo + 1, data).expect("non-empty by construction")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{stft_magnitude, Waveform};

    #[test]
    fn filterbank_rows_positive_and_ordered() {
        let fb = MelFilterbank::new();
        let mut last_center = -1.0;
        for m in 0..N_MELS {
            let row = fb.row(m);
            let sum: Real = row.iter().sum();
            assert!(sum > 0.0, "row {m} sums to {sum}");
            assert!(row.iter().all(|&w| w >= 0.0));
            let center: Real = row
                .iter()
                .enumerate()
                .map(|(k, &w)| k as Real * w)
                .sum::<Real>()
                / sum;
            assert!(center > last_center, "rows out of order at {m}");
            last_center = center;
        }
    }

    #[test]
    fn zero_magnitudes_hit_log_floor() {
        let fb = MelFilterbank::new();
        let mag = Tensor::zeros(&[3, N_FREQ_BINS]);
        let mel = mel_project(&mag, &fb).unwrap();
        let want = LOG_FLOOR.ln();
        assert!(mel.data().iter().all(|&v| (v - want).abs() < 1e-6));
    }

    #[test]
    fn single_bin_energy_stays_local() {
        let fb = MelFilterbank::new();
        let mut data = vec![0.0; 513];
        data[100] = 1.0; // ~2153 Hz
        let mag = Tensor::new(vec![1, 513], data).unwrap();
        let mel = mel_project(&mag, &fb).unwrap();
        let floor = LOG_FLOOR.ln();
        let active: Vec<usize> = (0..N_MELS).filter(|&m| mel.data()[m] > floor + 1e-6).collect();
        assert!(!active.is_empty());
        // only filters overlapping bin 100 respond
        for &m in &active {
            assert!(fb.row(m)[100] > 0.0, "filter {m} lit without support");
        }
        assert!(active.len() <= 4, "energy leaked: {active:?}");
    }

    #[test]
    fn mel_monotone_in_magnitude() {
        let fb = MelFilterbank::new();
        let a: Vec<Real> = (0..513).map(|k| ((k * 13 % 101) as Real) / 101.0).collect();
        let b: Vec<Real> = a.iter().map(|&v| v + 0.1).collect();
        let ma = mel_project(&Tensor::new(vec![1, 513], a).unwrap(), &fb).unwrap();
        let mb = mel_project(&Tensor::new(vec![1, 513], b).unwrap(), &fb).unwrap();
        for (x, y) in ma.data().iter().zip(mb.data()) {
            assert!(y >= x);
        }
    }

    #[test]
    fn trim_keeps_voiced_region() {
        // 10 silent + 20 voiced + 5 silent frames
        let fb = MelFilterbank::new();
        let voiced: Vec<Real> = {
            let w = Waveform::new(
                (0..20 * 256)
                    .map(|i| (2.0 * std::f64::consts::PI as Real * 440.0 * i as Real / 22050.0).sin())
                    .collect(),
            );
            mel_project(&stft_magnitude(&w).unwrap(), &fb).unwrap().data().to_vec()
        };
        let silent_frame = vec![LOG_FLOOR.ln(); N_MELS];
        let mut data = Vec::new();
        for _ in 0..10 {
            data.extend_from_slice(&silent_frame);
        }
        data.extend_from_slice(&voiced[..20 * N_MELS]);
        for _ in 0..5 {
            data.extend_from_slice(&silent_frame);
        }
        let m = MelSpectrogram::new(35, data).unwrap();
        let trimmed = trim_leading_trailing_silence(&m, -40.0);
        assert_eq!(trimmed.n_frames(), 20);
    }

    #[test]
    fn trim_no_frames_below_threshold_is_identity() {
        let data: Vec<Real> = (0..5 * N_MELS).map(|i| (i as Real * 0.01).sin()).collect();
        let m = MelSpectrogram::new(5, data).unwrap();
        let trimmed = trim_leading_trailing_silence(&m, -40.0);
        assert_eq!(trimmed, m);
    }

    #[test]
    fn trim_all_silence_keeps_one_frame() {
        let m = MelSpectrogram::new(7, vec![LOG_FLOOR.ln(); 7 * N_MELS]).unwrap();
        let trimmed = trim_leading_trailing_silence(&m, -40.0);
        assert_eq!(trimmed.n_frames(), 1);
    }
}
