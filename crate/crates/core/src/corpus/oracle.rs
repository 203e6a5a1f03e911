//! Analytic oracles standing in for pretrained extractors: a speaker
//! embedding from long-term spectral statistics, per-frame lip codes derived
//! from the active phoneme, and face emotion features.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{phoneme_class, PhonemeClass, SpeakerProfile, D_EMO, D_LIP, MEL_FRAMES_PER_VIDEO_FRAME};
use crate::audio::{mel_project, stft_magnitude, MelFilterbank, Waveform, N_FREQ_BINS, N_MELS, SAMPLE_RATE};
use crate::config::fnv1a;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::Real;

/// Width of the oracle speaker embedding.
pub const EMBED_DIM: usize = 64;

pub fn oracle_embedding_dim() -> usize {
    EMBED_DIM
}

// Feature block weights. Pitch and harmonic timbre dominate; the coarse
// spectral shape is content-sensitive and gets less weight.
const W_F0: Real = 10.0;
const W_TILT: Real = 0.4;
const W_HARMONIC: Real = 1.0;
const W_SHAPE: Real = 0.35;

/// Deterministic unit-norm speaker embedding from long-term statistics:
/// pitch (RBF-coded log-f0), spectral tilt, relative harmonic amplitudes at
/// multiples of the estimated f0, and a coarse mel shape.
pub fn oracle_speaker_embedding(w: &Waveform, fb: &MelFilterbank) -> Result<Vec<Real>> {
    if w.is_empty() {
        return Err(Error::EmptyInput("oracle embedding of empty waveform"));
    }
    if w.rms() < 1e-4 {
        return Err(Error::SilentAudio);
    }
    let mag = stft_magnitude(w)?;
    let t_frames = mag.rows();

    // mean magnitude spectrum over the loudest half of the frames (vowels)
    let mut frame_energy: Vec<(usize, Real)> = (0..t_frames)
        .map(|t| {
            let row = &mag.data()[t * N_FREQ_BINS..(t + 1) * N_FREQ_BINS];
            let total: Real = row.iter().map(|&v| v * v).sum();
            // prefer voiced frames: energy concentrated under ~1 kHz
            let low: Real = row[..47].iter().map(|&v| v * v).sum();
            (t, low * low / total.max(1e-12))
        })
        .collect();
    frame_energy.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
    let keep = (t_frames / 2).max(1);
    let mut mean_mag = vec![0.0 as Real; N_FREQ_BINS];
    for &(t, _) in frame_energy.iter().take(keep) {
        for (m, &v) in mean_mag.iter_mut().zip(&mag.data()[t * N_FREQ_BINS..(t + 1) * N_FREQ_BINS]) {
            *m += v;
        }
    }
    mean_mag.iter_mut().for_each(|v| *v /= keep as Real);

    let f0 = estimate_f0_autocorr(w).ok_or(Error::SilentAudio)?;

    let mut feat = vec![0.0 as Real; EMBED_DIM];
    // dims 0..16: RBF code of log f0 over [80, 400] Hz (unit-norm block)
    let logf = (f0 as f64).ln();
    let (lo, hi) = ((80.0f64).ln(), (400.0f64).ln());
    for i in 0..16 {
        let center = lo + (hi - lo) * i as f64 / 15.0;
        let sigma = (hi - lo) / 11.0;
        feat[i] = (-(logf - center).powi(2) / (2.0 * sigma * sigma)).exp() as Real;
    }
    normalize_block(&mut feat[0..16], W_F0);

    // dims 16..18: spectral tilt (slope and curvature of the mean log-mel)
    let mel = mel_project(&mag, fb)?;
    let mut mean_mel = vec![0.0 as Real; N_MELS];
    for frame in mel.frames() {
        for (m, &v) in mean_mel.iter_mut().zip(frame) {
            *m += v;
        }
    }
    mean_mel.iter_mut().for_each(|v| *v /= t_frames as Real);
    let (slope, curve) = fit_slope_curvature(&mean_mel);
    feat[16] = slope;
    feat[17] = curve * 0.5;
    normalize_block(&mut feat[16..18], W_TILT);

    // dims 18..34: relative harmonic amplitudes at h*f0
    let mut harm = [0.0 as Real; 16];
    for (h, hv) in harm.iter_mut().enumerate() {
        let f = f0 * (h + 1) as Real;
        let bin = (f * 1024.0 / SAMPLE_RATE as Real).round() as usize;
        if bin + 1 < N_FREQ_BINS {
            let a = mean_mag[bin - 1].max(mean_mag[bin]).max(mean_mag[bin + 1]);
            *hv = (a.max(1e-8)).ln();
        } else {
            *hv = (1e-8 as Real).ln();
        }
    }
    let hmean = harm.iter().sum::<Real>() / 16.0;
    for (i, &h) in harm.iter().enumerate() {
        feat[18 + i] = h - hmean;
    }
    normalize_block(&mut feat[18..34], W_HARMONIC);

    // dims 34..58: coarse mel shape, mean-removed (gain invariant)
    let shape_dims = 24;
    let pooled: Vec<Real> = (0..shape_dims)
        .map(|i| {
            let lo = i * N_MELS / shape_dims;
            let hi = ((i + 1) * N_MELS / shape_dims).max(lo + 1);
            mean_mel[lo..hi].iter().sum::<Real>() / (hi - lo) as Real
        })
        .collect();
    let pmean = pooled.iter().sum::<Real>() / shape_dims as Real;
    for (i, &p) in pooled.iter().enumerate() {
        feat[34 + i] = p - pmean;
    }
    normalize_block(&mut feat[34..58], W_SHAPE);
    // dims 58..64 stay zero (reserved)

    let norm = feat.iter().map(|&v| v * v).sum::<Real>().sqrt();
    if norm <= 0.0 {
        return Err(Error::SilentAudio);
    }
    feat.iter_mut().for_each(|v| *v /= norm);
    Ok(feat)
}

/// Profile-side embedding: render the canonical neutral utterance for the
/// profile and embed its audio, so both paths share one featurization.
pub fn oracle_speaker_embedding_from_profile(
    profile: &SpeakerProfile,
    fb: &MelFilterbank,
) -> Result<Vec<Real>> {
    let w = super::generate::render_canonical_profile_utterance(profile);
    oracle_speaker_embedding(&w, fb)
}

/// Scale a feature block to norm `weight` (blocks contribute fixed shares
/// to the final embedding no matter how their raw magnitudes vary).
fn normalize_block(block: &mut [Real], weight: Real) {
    let norm = block.iter().map(|&v| v * v).sum::<Real>().sqrt();
    if norm > 1e-12 {
        let s = weight / norm;
        block.iter_mut().for_each(|v| *v *= s);
    }
}

/// Median pitch over the loudest analysis windows, by normalized
/// autocorrelation. The smallest lag within 10% of the window's best peak
/// wins, which suppresses period-doubling ambiguity.
fn estimate_f0_autocorr(w: &Waveform) -> Option<Real> {
    const WINDOW: usize = 2048;
    const MIN_LAG: usize = 55; // 400 Hz
    const MAX_LAG: usize = 276; // ~80 Hz
    if w.len() < WINDOW + MAX_LAG {
        // short signal: single window from the start, zero-padded
        return f0_of_window(&padded(&w.samples, WINDOW + MAX_LAG));
    }
    // voicedness-weighted mean over half-overlapped windows, so vibrato and
    // slow drift average out within the utterance
    let stride = WINDOW / 2;
    let mut weighted = 0.0;
    let mut weight_sum = 0.0;
    let mut start = 0;
    while start + WINDOW + MAX_LAG <= w.len() {
        if let Some((f0, voiced)) = f0_and_voicing(&w.samples[start..start + WINDOW + MAX_LAG]) {
            weighted += f0 * voiced;
            weight_sum += voiced;
        }
        start += stride;
    }
    if weight_sum <= 0.0 {
        return None;
    }
    Some(weighted / weight_sum)
}

fn padded(x: &[Real], n: usize) -> Vec<Real> {
    let mut v = x.to_vec();
    v.resize(n, 0.0);
    v
}

fn f0_of_window(x: &[Real]) -> Option<Real> {
    f0_and_voicing(x).map(|(f0, _)| f0)
}

/// (f0, voicing weight) of one window, or None when aperiodic.
fn f0_and_voicing(x: &[Real]) -> Option<(Real, Real)> {
    const WINDOW: usize = 2048;
    const MIN_LAG: usize = 55;
    const MAX_LAG: usize = 276;
    let base = &x[..WINDOW];
    let e0: Real = base.iter().map(|&v| v * v).sum();
    if e0 < 1e-6 {
        return None;
    }
    let mut nac = vec![0.0 as Real; MAX_LAG + 1];
    for lag in MIN_LAG..=MAX_LAG {
        let shifted = &x[lag..lag + WINDOW];
        let dot: Real = crate::kernels::dot(base, shifted);
        let e1: Real = shifted.iter().map(|&v| v * v).sum();
        nac[lag] = dot / (e0 * e1).sqrt().max(1e-12);
    }
    let best = nac[MIN_LAG..=MAX_LAG].iter().cloned().fold(Real::MIN, Real::max);
    if best < 0.65 {
        return None; // no periodicity: noise or silence
    }
    let weight = best.powi(4) * e0;
    for lag in MIN_LAG..=MAX_LAG {
        let is_peak = nac[lag] >= 0.9 * best
            && nac[lag] >= nac[lag.saturating_sub(1)]
            && (lag == MAX_LAG || nac[lag] >= nac[lag + 1]);
        if is_peak {
            // parabolic refinement around the integer lag
            let refined = if lag > MIN_LAG && lag < MAX_LAG {
                let (a, b, c) = (nac[lag - 1], nac[lag], nac[lag + 1]);
                let denom = a - 2.0 * b + c;
                if denom.abs() > 1e-9 {
                    lag as Real + 0.5 * (a - c) / denom
                } else {
                    lag as Real
                }
            } else {
                lag as Real
            };
            return Some((SAMPLE_RATE as Real / refined, weight));
        }
    }
    let lag = MIN_LAG + argmax_slice(&nac[MIN_LAG..=MAX_LAG]);
    Some((SAMPLE_RATE as Real / lag as Real, weight))
}

fn argmax_slice(v: &[Real]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Least-squares slope and curvature of a curve over its index.
fn fit_slope_curvature(y: &[Real]) -> (Real, Real) {
    let n = y.len() as Real;
    let xs: Vec<Real> = (0..y.len()).map(|i| i as Real / (y.len() - 1) as Real - 0.5).collect();
    let mean_y = y.iter().sum::<Real>() / n;
    let sxx: Real = xs.iter().map(|&x| x * x).sum();
    let sxy: Real = xs.iter().zip(y).map(|(&x, &v)| x * (v - mean_y)).sum();
    let slope = sxy / sxx;
    // curvature via x^2 regressor, orthogonalized against the mean
    let x2: Vec<Real> = xs.iter().map(|&x| x * x - sxx / n).collect();
    let s22: Real = x2.iter().map(|&v| v * v).sum();
    let s2y: Real = x2.iter().zip(y).map(|(&v, &yv)| v * (yv - mean_y)).sum();
    (slope, if s22 > 0.0 { s2y / s22 } else { 0.0 })
}

/// Basis vector of a phoneme class in lip space (unit norm, near-orthogonal).
pub fn lip_class_basis(class: PhonemeClass) -> Vec<Real> {
    let tag = match class {
        PhonemeClass::VowelLike => 0u64,
        PhonemeClass::StopLike => 1,
        PhonemeClass::FricativeLike => 2,
    };
    deterministic_unit_vector(fnv1a(format!("lip-class:{tag}").as_bytes()), D_LIP)
}

fn lip_id_component(id: usize) -> Vec<Real> {
    deterministic_unit_vector(fnv1a(format!("lip-id:{id}").as_bytes()), D_LIP)
}

fn deterministic_unit_vector(seed: u64, dim: usize) -> Vec<Real> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<Real> = (0..dim).map(|_| rng.gen_range(-1.0..1.0) as Real).collect();
    let norm = v.iter().map(|&x| x * x).sum::<Real>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

/// Analytic lip code of the phoneme active at each video frame: the class
/// basis plus a smaller id-specific component, overlap-blended at phoneme
/// boundaries, with seeded uniform jitter.
pub fn extract_lip_features(
    phonemes: &[usize],
    gt_durations: &[usize],
    n_video_frames: usize,
    jitter: Real,
    seed: u64,
) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(format!("lip-jitter:{seed}").as_bytes()));
    // phoneme active over each mel frame
    let mut frame_phoneme = Vec::new();
    for (p, &d) in gt_durations.iter().enumerate() {
        frame_phoneme.extend(std::iter::repeat(p).take(d));
    }
    let total_mel = frame_phoneme.len();
    let r = MEL_FRAMES_PER_VIDEO_FRAME;

    let mut data = vec![0.0 as Real; n_video_frames * D_LIP];
    for v in 0..n_video_frames {
        let lo = v as f64 * r;
        let hi = (v + 1) as f64 * r;
        // overlap of [lo, hi) with each phoneme's mel span
        let mut weights: Vec<(usize, f64)> = Vec::with_capacity(2);
        let mut m = lo.floor() as usize;
        while (m as f64) < hi && m < total_mel {
            let seg_lo = (m as f64).max(lo);
            let seg_hi = ((m + 1) as f64).min(hi);
            if seg_hi > seg_lo {
                let p = frame_phoneme[m];
                match weights.iter_mut().find(|(q, _)| *q == p) {
                    Some((_, w)) => *w += seg_hi - seg_lo,
                    None => weights.push((p, seg_hi - seg_lo)),
                }
            }
            m += 1;
        }
        if weights.is_empty() {
            // video frame beyond the last mel frame: hold the final phoneme
            weights.push((phonemes.len() - 1, 1.0));
        }
        let wsum: f64 = weights.iter().map(|(_, w)| w).sum();
        let row = &mut data[v * D_LIP..(v + 1) * D_LIP];
        for (p, w) in weights {
            let frac = (w / wsum) as Real;
            let id = phonemes[p];
            let class_vec = lip_class_basis(phoneme_class(id));
            let id_vec = lip_id_component(id);
            for (i, r) in row.iter_mut().enumerate() {
                *r += frac * (class_vec[i] + 0.35 * id_vec[i]);
            }
        }
        for r in row.iter_mut() {
            *r += rng.gen_range(-1.0..1.0) as Real * jitter;
        }
    }
    Tensor::new(vec![n_video_frames, D_LIP], data).expect("shape/data agree")
}

/// Face emotion features: one-hot emotion in the first four dims scaled by a
/// slow intensity arc, seeded noise everywhere.
pub fn extract_face_emotion(emotion_id: usize, n_video_frames: usize, noise: Real, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(format!("emo-noise:{seed}").as_bytes()));
    let mut data = vec![0.0 as Real; n_video_frames * D_EMO];
    for v in 0..n_video_frames {
        let arc = 0.75
            + 0.25
                * (std::f64::consts::PI * v as f64 / (n_video_frames.max(2) - 1).max(1) as f64).sin()
                    as Real;
        let row = &mut data[v * D_EMO..(v + 1) * D_EMO];
        row[emotion_id] = arc;
        for r in row.iter_mut() {
            *r += rng.gen_range(-1.0..1.0) as Real * noise;
        }
    }
    Tensor::new(vec![n_video_frames, D_EMO], data).expect("shape/data agree")
}

pub fn cosine(a: &[Real], b: &[Real]) -> Real {
    let dot: Real = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    let na: Real = a.iter().map(|&x| x * x).sum::<Real>().sqrt();
    let nb: Real = b.iter().map(|&x| x * x).sum::<Real>().sqrt();
    if na <= 0.0 || nb <= 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[cfg(test)]
mod tests {
    use super::super::generate::build_speaker;
    use super::*;

    #[test]
    fn embedding_unit_norm_and_self_cosine() {
        let fb = MelFilterbank::new();
        let p = build_speaker(7, 0, 4);
        let w = super::super::generate::render_canonical_profile_utterance(&p);
        let e = oracle_speaker_embedding(&w, &fb).unwrap();
        assert_eq!(e.len(), EMBED_DIM);
        let norm: Real = e.iter().map(|&v| v * v).sum::<Real>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
        assert!((cosine(&e, &e) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn silent_input_is_error() {
        let fb = MelFilterbank::new();
        let w = Waveform::new(vec![0.0; 22050]);
        assert!(matches!(oracle_speaker_embedding(&w, &fb), Err(Error::SilentAudio)));
    }

    #[test]
    fn profile_and_waveform_paths_agree() {
        let fb = MelFilterbank::new();
        for sid in 0..3 {
            let p = build_speaker(11, sid, 3);
            let emb_profile = oracle_speaker_embedding_from_profile(&p, &fb).unwrap();
            let w = super::super::generate::render_canonical_profile_utterance(&p);
            let emb_wave = oracle_speaker_embedding(&w, &fb).unwrap();
            assert!(cosine(&emb_profile, &emb_wave) > 0.9);
        }
    }

    #[test]
    fn lip_middle_frame_nearest_class_basis() {
        // one long vowel: middle frames sit on the vowel class basis
        let lips = extract_lip_features(&[0], &[40], 11, 0.0, 1);
        let mid = &lips.data()[5 * D_LIP..6 * D_LIP];
        let classes = [
            PhonemeClass::VowelLike,
            PhonemeClass::StopLike,
            PhonemeClass::FricativeLike,
        ];
        let mut best = (f64::MAX, 9);
        for (ci, &c) in classes.iter().enumerate() {
            let basis = lip_class_basis(c);
            let d: Real = mid.iter().zip(&basis).map(|(&a, &b)| (a - b) * (a - b)).sum();
            if (d as f64) < best.0 {
                best = (d as f64, ci);
            }
        }
        assert_eq!(best.1, 0);
    }

    #[test]
    fn lip_boundary_frame_blends_neighbors() {
        // two phonemes, boundary at mel frame 7 (video frame ~2 spans 6.9..10.3)
        let phonemes = [0usize, 3];
        let durations = [7usize, 7];
        let lips = extract_lip_features(&phonemes, &durations, 4, 0.0, 1);
        let boundary = &lips.data()[2 * D_LIP..3 * D_LIP];
        // reconstruct the expected convex blend
        let a: Vec<Real> = {
            let c = lip_class_basis(phoneme_class(0));
            let i = lip_id_component(0);
            c.iter().zip(&i).map(|(&x, &y)| x + 0.35 * y).collect()
        };
        let b: Vec<Real> = {
            let c = lip_class_basis(phoneme_class(3));
            let i = lip_id_component(3);
            c.iter().zip(&i).map(|(&x, &y)| x + 0.35 * y).collect()
        };
        // solve for blend weight via least squares on one coordinate pair
        let lo = 2.0 * MEL_FRAMES_PER_VIDEO_FRAME;
        let hi = 3.0 * MEL_FRAMES_PER_VIDEO_FRAME;
        let w_a = ((7.0 - lo) / (hi - lo)) as Real;
        for k in 0..D_LIP {
            let want = w_a * a[k] + (1.0 - w_a) * b[k];
            assert!((boundary[k] - want).abs() < 1e-5, "dim {k}");
        }
    }

    #[test]
    fn emotion_recoverable_from_first_dims() {
        for emo in 0..4 {
            let f = extract_face_emotion(emo, 12, 0.04, 3);
            let mut mean = [0.0 as Real; 4];
            for v in 0..12 {
                for (k, m) in mean.iter_mut().enumerate() {
                    *m += f.at(v, k);
                }
            }
            let argmax = (0..4).max_by(|&a, &b| mean[a].partial_cmp(&mean[b]).unwrap()).unwrap();
            assert_eq!(argmax, emo);
        }
    }

    #[test]
    fn zero_noise_rows_follow_envelope() {
        let f = extract_face_emotion(2, 9, 0.0, 3);
        for v in 0..9 {
            for k in 0..D_EMO {
                if k != 2 {
                    assert_eq!(f.at(v, k), 0.0);
                }
            }
            assert!(f.at(v, 2) >= 0.75 - 1e-6 && f.at(v, 2) <= 1.0 + 1e-6);
        }
    }
}
