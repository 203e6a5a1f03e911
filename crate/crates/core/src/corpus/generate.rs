//! Waveform-level synthesis of the corpus: harmonic stacks shaped by
//! per-speaker timbre and per-phoneme formant filters, noise-excited
//! fricatives and stop bursts, emotion-modulated pitch variance and energy.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::oracle::{extract_face_emotion, extract_lip_features, oracle_speaker_embedding};
use super::{
    compute_total_length, duration_range, phoneme_class, video_frames_for_mel_len, Corpus,
    DubbingSample, PhonemeClass, SpeakerProfile, Split, EMOTIONS, N_EMOTIONS,
};
use crate::audio::{mel_project, stft_magnitude, MelFilterbank, Waveform, HOP_LENGTH, SAMPLE_RATE};
use crate::config::{fnv1a, RunConfig};
use crate::error::{Error, Result};
use crate::{parallel, Real};

/// Stable per-sample seed: hash of (master_seed, speaker_id, utterance_index),
/// so any sample can be generated alone, in any order.
pub fn sample_seed(master: u64, speaker_id: usize, utterance_index: usize) -> u64 {
    let mut bytes = [0u8; 24];
    bytes[..8].copy_from_slice(&master.to_le_bytes());
    bytes[8..16].copy_from_slice(&(speaker_id as u64).to_le_bytes());
    bytes[16..].copy_from_slice(&(utterance_index as u64).to_le_bytes());
    fnv1a(&bytes)
}

pub fn build_speaker(master_seed: u64, speaker_id: usize, n_speakers: usize) -> SpeakerProfile {
    let timbre_seed = fnv1a(format!("speaker:{master_seed}:{speaker_id}").as_bytes());
    let mut rng = ChaCha8Rng::seed_from_u64(timbre_seed);
    // spread base pitch across the inventory, jittered per speaker
    let spread = if n_speakers > 1 {
        speaker_id as f64 / (n_speakers - 1) as f64
    } else {
        0.5
    };
    let base_f0 = (120.0 + 200.0 * spread + rng.gen_range(-8.0..8.0)).clamp(80.0, 400.0) as Real;
    let spectral_tilt = rng.gen_range(-11.0..-3.0) as Real;
    let duration_bias = [
        rng.gen_range(0.85..1.2) as Real,
        rng.gen_range(0.85..1.2) as Real,
        rng.gen_range(0.85..1.2) as Real,
    ];
    let mut harmonic_profile = [0.0 as Real; 16];
    for (h, a) in harmonic_profile.iter_mut().enumerate() {
        // tilt rolloff times a speaker-specific pattern
        let octaves = ((h + 1) as f64).log2();
        let tilt_gain = 10f64.powf(spectral_tilt as f64 * octaves / 20.0);
        *a = (tilt_gain * rng.gen_range(0.3..1.8)) as Real;
    }
    SpeakerProfile {
        speaker_id,
        base_f0,
        spectral_tilt,
        duration_bias,
        timbre_seed,
        harmonic_profile,
    }
}

/// Formant-like spectral gain of a phoneme id at frequency `f`.
fn formant_gain(id: usize, f: Real) -> Real {
    let h = fnv1a(format!("formant:{id}").as_bytes());
    let f1 = 300.0 + 600.0 * ((h & 0xffff) as Real / 65535.0);
    let f2 = 900.0 + 1600.0 * (((h >> 16) & 0xffff) as Real / 65535.0);
    let g1 = (-((f - f1) / 220.0).powi(2) / 2.0).exp();
    let g2 = 0.8 * (-((f - f2) / 350.0).powi(2) / 2.0).exp();
    0.55 + 0.9 * (g1 + g2).min(1.0)
}

/// Center frequency of a fricative/stop noise resonance.
fn noise_center(id: usize) -> Real {
    let h = fnv1a(format!("noise:{id}").as_bytes());
    2000.0 + 5000.0 * ((h & 0xffff) as Real / 65535.0)
}

struct Segment {
    phoneme: usize,
    samples: usize,
}

/// Render one utterance as concatenated per-phoneme segments. Phase is
/// accumulated across segment boundaries so vowels stay continuous.
fn render_waveform(
    profile: &SpeakerProfile,
    segments: &[Segment],
    emotion_id: usize,
    rng: &mut ChaCha8Rng,
) -> Waveform {
    let emotion = EMOTIONS[emotion_id];
    let total_samples: usize = segments.iter().map(|s| s.samples).sum();
    let mut out = vec![0.0 as Real; total_samples];
    let sr = SAMPLE_RATE as Real;

    // per-harmonic phase accumulators
    let mut phases = [0.0 as Real; 16];
    for (p, ph0) in phases.iter_mut().enumerate() {
        *ph0 = rng.gen_range(0.0..std::f64::consts::TAU) as Real * (p as Real * 0.13).cos().abs();
    }
    let vibrato_phase = rng.gen_range(0.0..std::f64::consts::TAU) as Real;
    let vibrato_rate = 8.0 + rng.gen_range(-0.5..0.5) as Real;
    let vibrato_depth = 0.009 * emotion.f0_variance_scale;
    // slow random pitch drift, stronger for high-variance emotions
    let drift_rate = 2.5 as Real;
    let drift_depth = 0.005 * emotion.f0_variance_scale;
    let drift_phase = rng.gen_range(0.0..std::f64::consts::TAU) as Real;

    let level = 0.42 * emotion.energy_scale;
    let mut pos = 0usize;
    // two-pole resonator state for noise shaping
    let (mut n1, mut n2) = (0.0 as Real, 0.0 as Real);

    for seg in segments {
        let class = phoneme_class(seg.phoneme);
        let n = seg.samples;
        let fade = (n / 12).clamp(8, 512).min(n / 2.max(1)).max(1);
        match class {
            PhonemeClass::VowelLike => {
                // harmonic amplitudes under this phoneme's formant filter
                let mut amps = [0.0 as Real; 16];
                let mut norm = 0.0;
                for h in 0..16 {
                    let f = profile.base_f0 * (h + 1) as Real;
                    if f < 8000.0 {
                        amps[h] = profile.harmonic_profile[h] * formant_gain(seg.phoneme, f);
                        norm += amps[h];
                    }
                }
                if norm > 0.0 {
                    for a in amps.iter_mut() {
                        *a /= norm;
                    }
                }
                for i in 0..n {
                    let t = (pos + i) as Real / sr;
                    let vib = 1.0
                        + vibrato_depth * (std::f64::consts::TAU as Real * vibrato_rate * t + vibrato_phase).sin()
                        + drift_depth * (std::f64::consts::TAU as Real * drift_rate * t + drift_phase).sin();
                    let f0 = profile.base_f0 * vib;
                    let mut s = 0.0;
                    for h in 0..16 {
                        if amps[h] == 0.0 {
                            continue;
                        }
                        phases[h] += std::f64::consts::TAU as Real * f0 * (h + 1) as Real / sr;
                        s += amps[h] * phases[h].sin();
                    }
                    let env = envelope(i, n, fade);
                    out[pos + i] = level * env * s + 0.002 * noise(rng, &mut n1, &mut n2, 0.0);
                }
            }
            PhonemeClass::FricativeLike => {
                let center = noise_center(seg.phoneme);
                let omega = std::f64::consts::TAU as Real * center / sr;
                for i in 0..n {
                    let env = envelope(i, n, fade);
                    out[pos + i] = 0.30 * level * env * noise(rng, &mut n1, &mut n2, omega);
                }
            }
            PhonemeClass::StopLike => {
                // short burst then near-silence
                let burst = (n as Real * 0.3) as usize;
                let center = noise_center(seg.phoneme);
                let omega = std::f64::consts::TAU as Real * center / sr;
                for i in 0..n {
                    let base = 0.002 * noise(rng, &mut n1, &mut n2, 0.0);
                    out[pos + i] = if i < burst {
                        let env = envelope(i, burst.max(1), fade.min(burst.max(1) / 2).max(1));
                        0.42 * level * env * noise(rng, &mut n1, &mut n2, omega) + base
                    } else {
                        base
                    };
                }
            }
        }
        pos += n;
    }
    for v in out.iter_mut() {
        *v = v.clamp(-1.0, 1.0);
    }
    Waveform::new(out)
}

fn envelope(i: usize, n: usize, fade: usize) -> Real {
    let a = ((i + 1) as Real / fade as Real).min(1.0);
    let d = ((n - i) as Real / fade as Real).min(1.0);
    a.min(d)
}

/// White noise through an optional two-pole resonance at `omega` (radians per
/// sample); `omega == 0` bypasses the filter.
fn noise(rng: &mut ChaCha8Rng, s1: &mut Real, s2: &mut Real, omega: Real) -> Real {
    let white = rng.gen_range(-1.0..1.0) as Real;
    if omega == 0.0 {
        return white;
    }
    let r = 0.96 as Real;
    let y = white + 2.0 * r * omega.cos() * *s1 - r * r * *s2;
    *s2 = *s1;
    *s1 = y;
    y * (1.0 - r)
}

/// Fixed neutral utterance a profile is embedded through (same content for
/// every speaker, so profile embeddings differ only by voice).
pub fn render_canonical_profile_utterance(profile: &SpeakerProfile) -> Waveform {
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(
        format!("profile-utterance:{}", profile.timbre_seed).as_bytes(),
    ));
    let segments: Vec<Segment> = [0usize, 5, 10]
        .iter()
        .map(|&phoneme| Segment {
            phoneme,
            samples: 30 * HOP_LENGTH,
        })
        .collect();
    render_waveform(profile, &segments, 0, &mut rng)
}

/// Generate one sample. Deterministic in (config.master_seed, speaker,
/// utterance_index) alone.
pub fn generate_sample(
    cfg: &RunConfig,
    fb: &MelFilterbank,
    profile: &SpeakerProfile,
    utterance_index: usize,
    id: usize,
) -> Result<DubbingSample> {
    let seed = sample_seed(cfg.master_seed, profile.speaker_id, utterance_index);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // phoneme sequence with at least one vowel-like id (pitch must be present)
    let n_pho = rng.gen_range(cfg.min_phonemes..=cfg.max_phonemes.max(cfg.min_phonemes));
    let inventory = cfg.phoneme_inventory_size;
    if inventory < 2 {
        return Err(Error::Corpus("phoneme inventory must have at least 2 ids".into()));
    }
    let mut phonemes: Vec<usize> = (0..n_pho).map(|_| rng.gen_range(0..inventory)).collect();
    if !phonemes.iter().any(|&p| phoneme_class(p) == PhonemeClass::VowelLike) {
        let pos = rng.gen_range(0..n_pho);
        let vowels: Vec<usize> = (0..inventory)
            .filter(|&p| phoneme_class(p) == PhonemeClass::VowelLike)
            .collect();
        phonemes[pos] = vowels[rng.gen_range(0..vowels.len())];
    }

    let emotion_id = rng.gen_range(0..N_EMOTIONS);

    // class-ranged durations scaled by speaker bias
    let mut durations: Vec<usize> = phonemes
        .iter()
        .map(|&p| {
            let class = phoneme_class(p);
            let (lo, hi) = duration_range(class);
            let base = rng.gen_range(lo..=hi) as Real;
            ((base * profile.bias_for(class)).round() as usize).max(1)
        })
        .collect();

    // reconcile total length with the video frame budget so that
    // sum(durations) == compute_total_length(n_video_frames) exactly
    let raw_total: usize = durations.iter().sum();
    let n_video_frames = video_frames_for_mel_len(raw_total);
    let total = compute_total_length(n_video_frames);
    let mut diff = total as isize - raw_total as isize;
    while diff != 0 {
        let idx = if diff > 0 {
            // grow the longest phoneme
            (0..durations.len()).max_by_key(|&i| durations[i]).unwrap()
        } else {
            let i = (0..durations.len()).max_by_key(|&i| durations[i]).unwrap();
            if durations[i] <= 1 {
                return Err(Error::Corpus(format!("sample {id}: cannot shrink durations to {total}")));
            }
            i
        };
        durations[idx] = (durations[idx] as isize + diff.signum()) as usize;
        diff -= diff.signum();
    }

    let segments: Vec<Segment> = phonemes
        .iter()
        .zip(&durations)
        .map(|(&phoneme, &frames)| Segment {
            phoneme,
            samples: frames * HOP_LENGTH,
        })
        .collect();
    let waveform = render_waveform(profile, &segments, emotion_id, &mut rng);
    debug_assert_eq!(waveform.len(), total * HOP_LENGTH);

    let mel = mel_project(&stft_magnitude(&waveform)?, fb)?;
    let lip_features = extract_lip_features(&phonemes, &durations, n_video_frames, cfg.lip_jitter as Real, seed);
    let face_emotion = extract_face_emotion(emotion_id, n_video_frames, cfg.emotion_noise as Real, seed);
    let speaker_embedding = oracle_speaker_embedding(&waveform, fb)?;

    let test_cut = ((1.0 - cfg.test_fraction) * cfg.utterances_per_speaker as f64).ceil() as usize;
    let split = if utterance_index >= test_cut {
        Split::Test
    } else {
        Split::Train
    };

    let sample = DubbingSample {
        id,
        speaker_id: profile.speaker_id,
        utterance_index,
        emotion_id,
        phonemes,
        gt_durations: durations,
        waveform,
        mel,
        lip_features,
        face_emotion,
        n_video_frames,
        speaker_embedding,
        split,
    };
    sample.validate()?;
    Ok(sample)
}

/// Generate the full corpus. Per-sample work is independent (derived seeds)
/// and fans out across threads; the result is ordered speaker-major.
pub fn generate_corpus(cfg: &RunConfig) -> Result<Corpus> {
    if cfg.n_speakers < 1 || cfg.utterances_per_speaker < 1 {
        return Err(Error::Corpus("need at least one speaker and one utterance".into()));
    }
    if cfg.phoneme_inventory_size < 2 {
        return Err(Error::Corpus("phoneme inventory must have at least 2 ids".into()));
    }
    let fb = MelFilterbank::new();
    let speakers: Vec<SpeakerProfile> = (0..cfg.n_speakers)
        .map(|s| build_speaker(cfg.master_seed, s, cfg.n_speakers))
        .collect();

    let n_total = cfg.n_speakers * cfg.utterances_per_speaker;
    let results = parallel::map_indexed(n_total, 1, |id| {
        let speaker = id / cfg.utterances_per_speaker;
        let utt = id % cfg.utterances_per_speaker;
        generate_sample(cfg, &fb, &speakers[speaker], utt, id)
    });
    let mut samples = Vec::with_capacity(n_total);
    for r in results {
        samples.push(r?);
    }

    let profile_embeddings = speakers
        .iter()
        .map(|p| {
            let w = render_canonical_profile_utterance(p);
            oracle_speaker_embedding(&w, &fb)
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(Corpus {
        samples,
        speakers,
        profile_embeddings,
        config: cfg.clone(),
    })
}
