//! Short-time Fourier analysis with centered, reflect-padded frames.

use once_cell::sync::Lazy;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::{Waveform, HOP_LENGTH, N_FFT, N_FREQ_BINS, WIN_LENGTH};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::{parallel, Real};

/// Periodic Hann window of the analysis length.
pub static HANN: Lazy<Vec<Real>> = Lazy::new(|| {
    (0..WIN_LENGTH)
        .map(|n| {
            let x = 2.0 * std::f64::consts::PI * n as f64 / WIN_LENGTH as f64;
            (0.5 - 0.5 * x.cos()) as Real
        })
        .collect()
});

/// Reflect (mirror, no edge repeat) indexing into a signal of length `len`.
fn reflect_index(mut idx: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let n = len as isize;
    loop {
        if idx < 0 {
            idx = -idx;
        } else if idx >= n {
            idx = 2 * n - 2 - idx;
        } else {
            return idx as usize;
        }
    }
}

fn gather_frame(samples: &[Real], center: usize, out: &mut [Real]) {
    let half = N_FFT as isize / 2;
    for (i, o) in out.iter_mut().enumerate() {
        let idx = center as isize - half + i as isize;
        *o = samples[reflect_index(idx, samples.len())] * HANN[i];
    }
}

/// Complex STFT: frame `t` is the 1024-point FFT of the Hann-windowed window
/// centered at sample `t * 256`, reflect padded at the edges. Output is
/// `T × 513` with `T = ceil(len / 256)`.
pub fn stft_complex(w: &Waveform) -> Result<Vec<Complex<Real>>> {
    if w.is_empty() {
        return Err(Error::EmptyInput("stft on empty waveform"));
    }
    let t_frames = super::n_frames_for_len(w.len());
    let fft = FftPlanner::<Real>::new().plan_fft_forward(N_FFT);
    let mut out = vec![Complex::default(); t_frames * N_FREQ_BINS];
    parallel::fill_chunks_generic(&mut out, N_FREQ_BINS, N_FFT * 10, |t, row| {
        let mut frame = [0.0 as Real; N_FFT];
        gather_frame(&w.samples, t * HOP_LENGTH, &mut frame);
        let mut buf: Vec<Complex<Real>> = frame.iter().map(|&re| Complex::new(re, 0.0)).collect();
        fft.process(&mut buf);
        row.copy_from_slice(&buf[..N_FREQ_BINS]);
    });
    Ok(out)
}

/// Magnitude spectrogram `T × 513`.
pub fn stft_magnitude(w: &Waveform) -> Result<Tensor> {
    let spec = stft_complex(w)?;
    let t_frames = spec.len() / N_FREQ_BINS;
    let mags: Vec<Real> = spec.iter().map(|c| c.norm()).collect();
    Tensor::new(vec![t_frames, N_FREQ_BINS], mags)
}

/// Inverse STFT via windowed overlap-add with squared-window normalization.
/// Returns exactly `T * 256` samples (the center padding is trimmed).
pub fn istft(spec: &[Complex<Real>], t_frames: usize) -> Vec<Real> {
    debug_assert_eq!(spec.len(), t_frames * N_FREQ_BINS);
    let ifft = FftPlanner::<Real>::new().plan_fft_inverse(N_FFT);
    let padded_len = (t_frames - 1) * HOP_LENGTH + N_FFT;
    let mut acc = vec![0.0 as Real; padded_len];
    let mut norm = vec![0.0 as Real; padded_len];

    let frames: Vec<Vec<Real>> = parallel::map_indexed(t_frames, 4, |t| {
        let mut buf = vec![Complex::<Real>::default(); N_FFT];
        let row = &spec[t * N_FREQ_BINS..(t + 1) * N_FREQ_BINS];
        buf[..N_FREQ_BINS].copy_from_slice(row);
        for k in 1..N_FFT / 2 {
            buf[N_FFT - k] = row[k].conj();
        }
        ifft.process(&mut buf);
        buf.iter()
            .enumerate()
            .map(|(i, c)| c.re / N_FFT as Real * HANN[i])
            .collect()
    });
    for (t, frame) in frames.iter().enumerate() {
        let off = t * HOP_LENGTH;
        for (i, &v) in frame.iter().enumerate() {
            acc[off + i] += v;
            norm[off + i] += HANN[i] * HANN[i];
        }
    }
    let start = N_FFT / 2;
    (0..t_frames * HOP_LENGTH)
        .map(|i| {
            let idx = (start + i).min(padded_len - 1);
            let n = norm[idx];
            if n > 1e-8 {
                acc[idx] / n
            } else {
                0.0
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::SAMPLE_RATE;

    fn sine(freq: Real, secs: Real) -> Waveform {
        let n = (secs * SAMPLE_RATE as Real) as usize;
        Waveform::new(
            (0..n)
                .map(|i| {
                    (2.0 * std::f64::consts::PI as Real * freq * i as Real / SAMPLE_RATE as Real).sin()
                })
                .collect(),
        )
    }

    #[test]
    fn zero_waveform_zero_magnitudes() {
        let w = Waveform::new(vec![0.0; SAMPLE_RATE as usize]);
        let m = stft_magnitude(&w).unwrap();
        assert_eq!(m.shape(), &[87, 513]);
        assert!(m.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_waveform_is_error() {
        assert!(stft_magnitude(&Waveform::new(vec![])).is_err());
    }

    #[test]
    fn sine_440_peaks_at_bin_20() {
        // bin = round(440 * 1024 / 22050) = 20
        let m = stft_magnitude(&sine(440.0, 0.5)).unwrap();
        let t = m.shape()[0];
        for frame in 1..t - 1 {
            let row = &m.data()[frame * 513..(frame + 1) * 513];
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(argmax, 20, "frame {frame}");
        }
    }

    #[test]
    fn frame_count_matches_formula_across_lengths() {
        for len in [1usize, 10, 255, 256, 257, 1000, 4096, 9999] {
            let w = Waveform::new(vec![0.1; len]);
            let m = stft_magnitude(&w).unwrap();
            assert_eq!(m.shape()[0], len.div_ceil(HOP_LENGTH), "len {len}");
        }
    }

    #[test]
    fn istft_round_trip_preserves_signal() {
        let w = sine(440.0, 0.25);
        let spec = stft_complex(&w).unwrap();
        let t = spec.len() / N_FREQ_BINS;
        let rec = istft(&spec, t);
        assert!(rec.len() >= w.len());
        // interior samples match closely
        let mut err: Real = 0.0;
        for i in N_FFT..w.len() - N_FFT {
            err = err.max((rec[i] - w.samples[i]).abs());
        }
        assert!(err < 1e-3, "max err {err}");
    }
}
