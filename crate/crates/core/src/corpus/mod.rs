//! Deterministic synthetic dubbing corpus: multi-speaker, emotion-labeled,
//! duration-annotated utterances with analytic stand-ins for the usual
//! pretrained feature extractors (speaker embedder, face emotion network,
//! lip encoder, forced aligner).

mod generate;
mod oracle;
mod store;

pub use generate::{generate_corpus, generate_sample, render_canonical_profile_utterance};
pub use oracle::{
    extract_face_emotion, extract_lip_features, lip_class_basis, oracle_embedding_dim,
    oracle_speaker_embedding, oracle_speaker_embedding_from_profile,
};
pub use store::{load_corpus, save_corpus};

use crate::audio::{MelSpectrogram, Waveform};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::Real;

/// Video frame rate (frames per second).
pub const VIDEO_FPS: usize = 25;
/// Mel frames per video frame: (22050 / 256) / 25.
pub const MEL_FRAMES_PER_VIDEO_FRAME: f64 = 22050.0 / 256.0 / 25.0;
/// Lip feature width.
pub const D_LIP: usize = 32;
/// Face emotion feature width.
pub const D_EMO: usize = 16;
/// Number of emotion classes.
pub const N_EMOTIONS: usize = 4;

/// Total mel-frame budget implied by a video length:
/// `round(n_video_frames * 3.4453125)`.
pub fn compute_total_length(n_video_frames: usize) -> usize {
    assert!(n_video_frames >= 1, "need at least one video frame");
    (n_video_frames as f64 * MEL_FRAMES_PER_VIDEO_FRAME).round() as usize
}

/// Inverse mapping used at generation: the video frame count whose mel budget
/// best matches `n_mel_frames`.
pub fn video_frames_for_mel_len(n_mel_frames: usize) -> usize {
    ((n_mel_frames as f64 / MEL_FRAMES_PER_VIDEO_FRAME).round() as usize).max(1)
}

/// Articulatory class of an abstract phoneme id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PhonemeClass {
    VowelLike,
    StopLike,
    FricativeLike,
}

/// Class assignment over the abstract inventory: one in five ids is
/// vowel-like, the rest split evenly between stops and fricatives (skewing
/// utterances short).
pub fn phoneme_class(id: usize) -> PhonemeClass {
    match id % 5 {
        0 => PhonemeClass::VowelLike,
        1 | 2 => PhonemeClass::StopLike,
        _ => PhonemeClass::FricativeLike,
    }
}

/// Base duration range (mel frames) for a phoneme class, before speaker bias.
pub fn duration_range(class: PhonemeClass) -> (usize, usize) {
    match class {
        PhonemeClass::VowelLike => (8, 20),
        PhonemeClass::StopLike => (2, 6),
        PhonemeClass::FricativeLike => (4, 12),
    }
}

/// Ground-truth voice characteristics of one synthetic speaker.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerProfile {
    pub speaker_id: usize,
    /// Fundamental frequency, Hz; always within [80, 400].
    pub base_f0: Real,
    /// Spectral tilt, dB per octave (negative: highs roll off).
    pub spectral_tilt: Real,
    /// Duration multiplier per phoneme class (vowel, stop, fricative).
    pub duration_bias: [Real; 3],
    /// Seed behind the per-harmonic timbre pattern.
    pub timbre_seed: u64,
    /// Relative amplitude of harmonics 1..=16 (the timbre signature).
    pub harmonic_profile: [Real; 16],
}

impl SpeakerProfile {
    pub fn bias_for(&self, class: PhonemeClass) -> Real {
        match class {
            PhonemeClass::VowelLike => self.duration_bias[0],
            PhonemeClass::StopLike => self.duration_bias[1],
            PhonemeClass::FricativeLike => self.duration_bias[2],
        }
    }
}

/// Emotion class with its prosodic modulation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmotionLabel {
    pub id: usize,
    pub name: &'static str,
    pub f0_variance_scale: Real,
    pub energy_scale: Real,
}

pub const EMOTIONS: [EmotionLabel; N_EMOTIONS] = [
    EmotionLabel { id: 0, name: "neutral", f0_variance_scale: 1.0, energy_scale: 1.0 },
    EmotionLabel { id: 1, name: "happy", f0_variance_scale: 1.6, energy_scale: 1.3 },
    EmotionLabel { id: 2, name: "angry", f0_variance_scale: 2.2, energy_scale: 1.55 },
    EmotionLabel { id: 3, name: "sad", f0_variance_scale: 0.5, energy_scale: 0.65 },
];

/// Train/test membership of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Corpus(format!("bad split {other}"))),
        }
    }
}

/// One synthetic utterance with every annotation the pipeline consumes.
#[derive(Debug, Clone)]
pub struct DubbingSample {
    pub id: usize,
    pub speaker_id: usize,
    pub utterance_index: usize,
    pub emotion_id: usize,
    pub phonemes: Vec<usize>,
    /// Per-phoneme mel-frame counts; sums to `mel.n_frames()`.
    pub gt_durations: Vec<usize>,
    pub waveform: Waveform,
    pub mel: MelSpectrogram,
    /// `n_video_frames x D_LIP`.
    pub lip_features: Tensor,
    /// `n_video_frames x D_EMO`.
    pub face_emotion: Tensor,
    pub n_video_frames: usize,
    /// Precomputed oracle speaker embedding of the ground-truth audio.
    pub speaker_embedding: Vec<Real>,
    pub split: Split,
}

impl DubbingSample {
    /// The invariants promised at generation time.
    pub fn validate(&self) -> Result<()> {
        let t = self.mel.n_frames();
        let dur_sum: usize = self.gt_durations.iter().sum();
        if dur_sum != t {
            return Err(Error::Corpus(format!(
                "sample {}: durations sum {dur_sum} != mel frames {t}",
                self.id
            )));
        }
        if self.phonemes.len() != self.gt_durations.len() {
            return Err(Error::Corpus(format!("sample {}: phoneme/duration length mismatch", self.id)));
        }
        let expect_nv = video_frames_for_mel_len(t);
        if (self.n_video_frames as isize - expect_nv as isize).abs() > 1 {
            return Err(Error::Corpus(format!(
                "sample {}: {} video frames vs mel-derived {expect_nv}",
                self.id, self.n_video_frames
            )));
        }
        if self.lip_features.shape() != [self.n_video_frames, D_LIP] {
            return Err(Error::Corpus(format!("sample {}: lip feature shape", self.id)));
        }
        if self.face_emotion.shape() != [self.n_video_frames, D_EMO] {
            return Err(Error::Corpus(format!("sample {}: emotion feature shape", self.id)));
        }
        if self.gt_durations.iter().any(|&d| d == 0) {
            return Err(Error::Corpus(format!("sample {}: zero duration", self.id)));
        }
        if !self.waveform.samples.iter().all(|v| v.is_finite()) {
            return Err(Error::Corpus(format!("sample {}: non-finite waveform", self.id)));
        }
        Ok(())
    }
}

/// Generated corpus plus registries.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub samples: Vec<DubbingSample>,
    pub speakers: Vec<SpeakerProfile>,
    /// Oracle embedding of each speaker profile (canonical utterance path).
    pub profile_embeddings: Vec<Vec<Real>>,
    pub config: RunConfig,
}

impl Corpus {
    pub fn train_indices(&self) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.split == Split::Train)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn test_indices(&self) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.split == Split::Test)
            .map(|(i, _)| i)
            .collect()
    }

    /// Training indices excluding the held-out speaker (dub setting 3.0).
    pub fn train_indices_excluding(&self, speaker: usize) -> Vec<usize> {
        self.train_indices()
            .into_iter()
            .filter(|&i| self.samples[i].speaker_id != speaker)
            .collect()
    }

    /// Deterministic "other utterance of the same speaker" reference.
    pub fn same_speaker_reference(&self, sample_idx: usize) -> usize {
        let s = &self.samples[sample_idx];
        let n = self.config.utterances_per_speaker;
        let next_utt = (s.utterance_index + 1) % n;
        // samples are ordered speaker-major, utterance-minor
        s.speaker_id * n + next_utt
    }

    /// Deterministic held-out-speaker reference for dub setting 3.0.
    pub fn held_out_reference(&self, sample_idx: usize) -> usize {
        let held = self.config.held_out_speaker();
        let n = self.config.utterances_per_speaker;
        let s = &self.samples[sample_idx];
        held * n + (s.utterance_index % n)
    }
}
