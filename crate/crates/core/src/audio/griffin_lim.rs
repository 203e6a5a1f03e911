//! Griffin-Lim phase reconstruction from a log-mel spectrogram.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;

use super::stft::istft;
use super::{stft_complex, MelFilterbank, MelSpectrogram, Waveform, N_FREQ_BINS, N_MELS};
use crate::Real;

/// Approximate linear magnitudes from log-mel power via the column-normalized
/// filterbank transpose, then recover phase with `iters` rounds of
/// analysis/synthesis. Deterministic for a given `(mel, iters, seed)`. Output
/// is `T * 256` samples, peak-normalized (silence stays near zero).
pub fn griffin_lim(m: &MelSpectrogram, fb: &MelFilterbank, iters: usize, seed: u64) -> Waveform {
    let t_frames = m.n_frames();

    let mags = mel_to_linear_magnitudes(m, fb);

    // random initial phase
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut estimate: Vec<Complex<Real>> = mags
        .iter()
        .map(|&r| {
            let phi = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI) as Real;
            Complex::from_polar(r, phi)
        })
        .collect();
    // DC and Nyquist bins of a real signal carry no phase
    for t in 0..t_frames {
        let base = t * N_FREQ_BINS;
        estimate[base] = Complex::new(estimate[base].norm(), 0.0);
        estimate[base + N_FREQ_BINS - 1] = Complex::new(estimate[base + N_FREQ_BINS - 1].norm(), 0.0);
    }

    // fast Griffin-Lim: momentum over successive rebuilt spectrograms
    let momentum: Real = 0.99;
    let mut signal = istft(&estimate, t_frames);
    let mut prev: Option<Vec<Complex<Real>>> = None;
    for _ in 0..iters {
        let rebuilt = stft_complex(&Waveform::new(signal.clone())).expect("non-empty");
        for (i, e) in estimate.iter_mut().enumerate() {
            let mut s = rebuilt[i];
            if let Some(prev) = &prev {
                s -= prev[i] * (momentum / (1.0 + momentum));
            }
            let norm = s.norm();
            let target = mags[i];
            *e = if norm > 1e-12 {
                s * (target / norm)
            } else {
                Complex::new(target, 0.0)
            };
        }
        prev = Some(rebuilt);
        signal = istft(&estimate, t_frames);
    }

    // peak normalize, but never amplify silence
    let peak = signal.iter().fold(0.0 as Real, |a, &b| a.max(b.abs()));
    if peak > 1e-4 {
        let inv = 1.0 / peak;
        signal.iter_mut().for_each(|v| *v *= inv);
    }
    Waveform::new(signal)
}

/// Invert the mel projection approximately: non-negative least squares on the
/// linear power spectrum via multiplicative updates, initialized from the
/// column-normalized filterbank transpose. Returns magnitudes `[T × 513]`.
fn mel_to_linear_magnitudes(m: &MelSpectrogram, fb: &MelFilterbank) -> Vec<Real> {
    let t_frames = m.n_frames();
    let mel_power: Vec<Real> = m.data().iter().map(|&v| v.exp()).collect();

    let mut col_sum = vec![0.0 as Real; N_FREQ_BINS];
    for mel_row in 0..N_MELS {
        for (k, &w) in fb.row(mel_row).iter().enumerate() {
            col_sum[k] += w;
        }
    }

    // transpose estimate of the power spectrum
    let mut p = vec![0.0 as Real; t_frames * N_FREQ_BINS];
    for t in 0..t_frames {
        let mp = &mel_power[t * N_MELS..(t + 1) * N_MELS];
        for k in 0..N_FREQ_BINS {
            if col_sum[k] <= 0.0 {
                continue;
            }
            let mut acc = 0.0;
            for mel_row in 0..N_MELS {
                acc += fb.row(mel_row)[k] * mp[mel_row];
            }
            p[t * N_FREQ_BINS + k] = (acc / col_sum[k]).max(0.0);
        }
    }

    // Lee-Seung multiplicative updates toward min ||P F^T - M||^2, P >= 0
    const NNLS_ITERS: usize = 30;
    const EPS: Real = 1e-12;
    let mut numer = vec![0.0 as Real; t_frames * N_FREQ_BINS];
    // numer = M · F, fixed across iterations
    crate::kernels::gemm(&mel_power, &fb.weights, &mut numer, t_frames, N_MELS, N_FREQ_BINS, false, false);
    let mut proj = vec![0.0 as Real; t_frames * N_MELS];
    let mut denom = vec![0.0 as Real; t_frames * N_FREQ_BINS];
    for _ in 0..NNLS_ITERS {
        // proj = P · F^T  (predicted mel), denom = proj · F
        crate::kernels::gemm(&p, &fb.weights, &mut proj, t_frames, N_FREQ_BINS, N_MELS, false, true);
        crate::kernels::gemm(&proj, &fb.weights, &mut denom, t_frames, N_MELS, N_FREQ_BINS, false, false);
        for ((pv, &nv), &dv) in p.iter_mut().zip(&numer).zip(&denom) {
            *pv *= nv / (dv + EPS);
        }
    }
    p.iter().map(|&v| v.max(0.0).sqrt()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{mel_project, stft_magnitude, LOG_FLOOR, SAMPLE_RATE};

    fn tone_mel(freq: Real, secs: Real, fb: &MelFilterbank) -> MelSpectrogram {
        let n = (secs * SAMPLE_RATE as Real) as usize;
        let w = Waveform::new(
            (0..n)
                .map(|i| {
                    (2.0 * std::f64::consts::PI as Real * freq * i as Real / SAMPLE_RATE as Real).sin()
                })
                .collect(),
        );
        mel_project(&stft_magnitude(&w).unwrap(), fb).unwrap()
    }

    #[test]
    fn silence_reconstructs_near_zero() {
        let fb = MelFilterbank::new();
        let m = MelSpectrogram::new(20, vec![LOG_FLOOR.ln(); 20 * N_MELS]).unwrap();
        let w = griffin_lim(&m, &fb, 8, 7);
        assert!(w.rms() < 1e-3, "rms {}", w.rms());
    }

    #[test]
    fn output_length_matches_frames() {
        let fb = MelFilterbank::new();
        let m = tone_mel(440.0, 0.3, &fb);
        let w = griffin_lim(&m, &fb, 4, 7);
        let want = m.n_frames() * 256;
        assert!((w.len() as isize - want as isize).unsigned_abs() <= 256);
        assert_eq!(w.len(), want);
    }

    #[test]
    fn tone_reconstruction_dominant_bin() {
        // target bin round(440*1024/22050) = 20; the 80-band mel bottleneck
        // cannot pin adjacent bins apart, so the frozen oracle statement is
        // one-bin precision on the frame-averaged spectrum
        let fb = MelFilterbank::new();
        let m = tone_mel(440.0, 0.4, &fb);
        let rec = griffin_lim(&m, &fb, 32, 7);
        let mag = stft_magnitude(&rec).unwrap();
        let t = mag.shape()[0];
        let mut avg = vec![0.0 as Real; 513];
        for frame in 2..t - 2 {
            for (a, &v) in avg.iter_mut().zip(&mag.data()[frame * 513..(frame + 1) * 513]) {
                *a += v;
            }
        }
        let argmax = avg
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert!(
            (argmax as isize - 20).abs() <= 1,
            "dominant bin {argmax}, expected 20 +- 1"
        );
        // the tone region carries most of the energy
        let tone: Real = avg[18..=22].iter().sum();
        let total: Real = avg.iter().sum();
        assert!(tone / total > 0.5, "tone fraction {}", tone / total);
    }

    #[test]
    fn deterministic_given_seed() {
        let fb = MelFilterbank::new();
        let m = tone_mel(523.0, 0.2, &fb);
        let a = griffin_lim(&m, &fb, 8, 3);
        let b = griffin_lim(&m, &fb, 8, 3);
        assert_eq!(a.samples, b.samples);
        let c = griffin_lim(&m, &fb, 8, 4);
        assert_ne!(a.samples, c.samples);
    }

    #[test]
    fn round_trip_mel_error_bounded() {
        // harmonic tone: mel of the reconstruction stays close to the original
        let fb = MelFilterbank::new();
        let n = (0.4 * SAMPLE_RATE as Real) as usize;
        let w = Waveform::new(
            (0..n)
                .map(|i| {
                    let t = i as Real / SAMPLE_RATE as Real;
                    let tau = 2.0 * std::f64::consts::PI as Real;
                    0.6 * (tau * 220.0 * t).sin() + 0.3 * (tau * 440.0 * t).sin() + 0.1 * (tau * 880.0 * t).sin()
                })
                .collect(),
        );
        let mel = mel_project(&stft_magnitude(&w).unwrap(), &fb).unwrap();
        let rec = griffin_lim(&mel, &fb, 32, 7);
        let mel_rec = mel_project(&stft_magnitude(&rec).unwrap(), &fb).unwrap();
        let t = mel.n_frames().min(mel_rec.n_frames());
        let mut err = 0.0;
        let mut n_vals = 0;
        for frame in 0..t {
            for (a, b) in mel.frame(frame).iter().zip(mel_rec.frame(frame)) {
                // compare in log10 units (orders of magnitude of power)
                err += ((a - b) as f64 / std::f64::consts::LN_10).abs();
                n_vals += 1;
            }
        }
        let mean_abs = err / n_vals as f64;
        assert!(mean_abs < 1.0, "mean abs log10-mel error {mean_abs}");
    }
}
