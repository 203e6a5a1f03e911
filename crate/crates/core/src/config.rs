//! Flat key=value run configuration. Every key has a documented default,
//! unknown keys are rejected, and parse -> serialize -> parse is a fixed
//! point (serialization writes sorted keys).

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::Real;

/// Which waveform feeds the style extractors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DubSetting {
    /// 1.0: the sample's own ground-truth audio.
    GroundTruth,
    /// 2.0: another utterance of the same speaker.
    SameSpeaker,
    /// 3.0: an utterance of the held-out speaker (unseen during training).
    UnseenSpeaker,
}

impl DubSetting {
    pub fn as_str(&self) -> &'static str {
        match self {
            DubSetting::GroundTruth => "1.0",
            DubSetting::SameSpeaker => "2.0",
            DubSetting::UnseenSpeaker => "3.0",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "1.0" => Ok(DubSetting::GroundTruth),
            "2.0" => Ok(DubSetting::SameSpeaker),
            "3.0" => Ok(DubSetting::UnseenSpeaker),
            other => Err(Error::Config(format!(
                "dub_setting must be 1.0, 2.0 or 3.0, got {other}"
            ))),
        }
    }
}

macro_rules! run_config {
    ($( $(#[doc = $doc:literal])* $key:ident : $ty:ty = $default:expr ; )*) => {
        /// Every tunable of the pipeline in one flat namespace.
        #[derive(Debug, Clone, PartialEq)]
        pub struct RunConfig {
            $( $(#[doc = $doc])* pub $key: $ty, )*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                RunConfig { $( $key: $default, )* }
            }
        }

        impl RunConfig {
            /// Serialize as sorted key=value lines.
            pub fn to_text(&self) -> String {
                let mut pairs: Vec<(&'static str, String)> = vec![
                    $( (stringify!($key), ConfigValue::render(&self.$key)), )*
                ];
                pairs.sort_by(|a, b| a.0.cmp(b.0));
                let mut out = String::new();
                for (k, v) in pairs {
                    let _ = writeln!(out, "{k}={v}");
                }
                out
            }

            /// Parse key=value lines over the defaults. Blank lines and
            /// `#` comments are skipped; unknown keys are an error naming
            /// the key.
            pub fn parse(text: &str) -> Result<Self> {
                let mut cfg = RunConfig::default();
                cfg.apply_text(text)?;
                Ok(cfg)
            }

            pub fn apply_text(&mut self, text: &str) -> Result<()> {
                for (lineno, line) in text.lines().enumerate() {
                    let line = line.trim();
                    if line.is_empty() || line.starts_with('#') {
                        continue;
                    }
                    let (key, value) = line.split_once('=').ok_or_else(|| {
                        Error::Config(format!("line {}: expected key=value, got {line:?}", lineno + 1))
                    })?;
                    self.set(key.trim(), value.trim())?;
                }
                Ok(())
            }

            /// Set one key from its string form.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $( stringify!($key) => {
                        self.$key = ConfigValue::parse(value).map_err(|e| {
                            Error::Config(format!("key {key}: {e}"))
                        })?;
                        Ok(())
                    } )*
                    other => Err(Error::Config(format!("unknown config key: {other}"))),
                }
            }

            /// The documented defaults table: (key, default, doc).
            pub fn defaults_table() -> Vec<(&'static str, String, &'static str)> {
                let d = RunConfig::default();
                let mut rows: Vec<(&'static str, String, &'static str)> = vec![
                    $( (stringify!($key), ConfigValue::render(&d.$key), concat!($($doc),*).trim_ascii()), )*
                ];
                rows.sort_by(|a, b| a.0.cmp(b.0));
                rows
            }
        }
    };
}

trait ConfigValue: Sized {
    fn render(&self) -> String;
    fn parse(s: &str) -> std::result::Result<Self, String>;
}

impl ConfigValue for usize {
    fn render(&self) -> String {
        self.to_string()
    }
    fn parse(s: &str) -> std::result::Result<Self, String> {
        s.parse().map_err(|e| format!("{e}"))
    }
}

impl ConfigValue for u64 {
    fn render(&self) -> String {
        self.to_string()
    }
    fn parse(s: &str) -> std::result::Result<Self, String> {
        s.parse().map_err(|e| format!("{e}"))
    }
}

impl ConfigValue for bool {
    fn render(&self) -> String {
        self.to_string()
    }
    fn parse(s: &str) -> std::result::Result<Self, String> {
        match s {
            "true" | "1" => Ok(true),
            "false" | "0" => Ok(false),
            other => Err(format!("expected true/false, got {other}")),
        }
    }
}

impl ConfigValue for f64 {
    fn render(&self) -> String {
        // shortest representation that round-trips
        let s = format!("{self}");
        if s.parse::<f64>() == Ok(*self) {
            s
        } else {
            format!("{self:e}")
        }
    }
    fn parse(s: &str) -> std::result::Result<Self, String> {
        s.parse().map_err(|e| format!("{e}"))
    }
}

impl ConfigValue for DubSetting {
    fn render(&self) -> String {
        self.as_str().to_string()
    }
    fn parse(s: &str) -> std::result::Result<Self, String> {
        DubSetting::parse(s).map_err(|e| e.to_string())
    }
}

run_config! {
    // ── corpus ───────────────────────────────────────────────────────
    /// Number of synthetic speakers.
    n_speakers: usize = 4;
    /// Utterances generated per speaker.
    utterances_per_speaker: usize = 50;
    /// Abstract phoneme inventory size.
    phoneme_inventory_size: usize = 40;
    /// Minimum phonemes per utterance.
    min_phonemes: usize = 3;
    /// Maximum phonemes per utterance.
    max_phonemes: usize = 6;
    /// Master seed for corpus generation.
    master_seed: u64 = 1000;
    /// Fraction of each speaker's utterances held out as the test split.
    test_fraction: f64 = 0.2;
    /// Uniform jitter amplitude added to lip features.
    lip_jitter: f64 = 0.04;
    /// Uniform jitter amplitude added to face emotion features.
    emotion_noise: f64 = 0.04;

    // ── model ────────────────────────────────────────────────────────
    /// Trunk width of all sequence embeddings.
    d_model: usize = 256;
    /// Layers in each reference transformer.
    ref_depth: usize = 2;
    /// Attention heads in the reference transformers.
    ref_heads: usize = 2;
    /// Attention hidden width in the reference transformers.
    ref_hidden: usize = 128;
    /// Half-width (lip frames) of the monotonic alignment band.
    mal_band: f64 = 2.0;

    // ── training ─────────────────────────────────────────────────────
    /// Samples per optimization step.
    batch_size: usize = 8;
    /// Total optimization steps.
    max_steps: usize = 20000;
    /// Training seed (init, shuffling).
    seed: u64 = 42;
    /// Adam learning rate.
    learning_rate: f64 = 0.00625;
    /// Adam beta1.
    beta1: f64 = 0.9;
    /// Adam beta2.
    beta2: f64 = 0.98;
    /// Adam epsilon.
    epsilon: f64 = 1e-9;
    /// Weight of the style consistency loss.
    lambda_spk: f64 = 20.0;
    /// Weight of the emotion classification loss.
    lambda_emo: f64 = 1.0;
    /// Weight of the mel reconstruction loss.
    lambda_rec: f64 = 1.0;
    /// Weight of the monotonic alignment loss.
    lambda_mal: f64 = 2.0;
    /// Weight of the duration loss.
    lambda_dur: f64 = 5.0;
    /// Steps between checkpoints.
    checkpoint_every: usize = 2000;
    /// Which audio feeds the style extractors (1.0, 2.0, 3.0).
    dub_setting: DubSetting = DubSetting::GroundTruth;

    // ── ablation switches ────────────────────────────────────────────
    /// Bypass the multimodal phoneme adaptor (intermediate repr = phoneme embedding).
    mpa_off: bool = false;
    /// Replace all utterance-style norms with plain normalization.
    usl_off: bool = false;
    /// Remove the lip aligner losses; inference uses ground-truth durations.
    pla_off: bool = false;
    /// Keep frame-level granularity (skip downsample pooling) in both reference encoders.
    frame_level_granularity: bool = false;
    /// Remove the acoustic reference transformer path.
    acoustic_ref_off: bool = false;
    /// Remove the emotion reference transformer path.
    emotion_ref_off: bool = false;
    /// Plain normalization inside the mel decoder only.
    usln_decoder_off: bool = false;
    /// Plain normalization inside the postnet only.
    usln_post_off: bool = false;

    // ── synthesis / evaluation ───────────────────────────────────────
    /// Griffin-Lim iterations at synthesis time.
    griffin_lim_iters: usize = 32;
    /// Griffin-Lim phase seed.
    griffin_lim_seed: u64 = 7;
    /// Leading/trailing silence trim threshold (dB relative to peak).
    silence_threshold_db: f64 = -40.0;
}

impl RunConfig {
    /// FNV-1a hash over the architecture-relevant keys. Checkpoints embed it;
    /// loading one under a different architecture is a hard error.
    pub fn architecture_hash(&self) -> u64 {
        let arch = format!(
            "d_model={};ref_depth={};ref_heads={};ref_hidden={};inventory={}",
            self.d_model, self.ref_depth, self.ref_heads, self.ref_hidden, self.phoneme_inventory_size
        );
        fnv1a(arch.as_bytes())
    }

    pub fn lambda(&self) -> [Real; 5] {
        [
            self.lambda_spk as Real,
            self.lambda_emo as Real,
            self.lambda_rec as Real,
            self.lambda_mal as Real,
            self.lambda_dur as Real,
        ]
    }

    /// Index of the speaker withheld from training-time reference selection
    /// (the "unseen speaker" of dub setting 3.0).
    pub fn held_out_speaker(&self) -> usize {
        self.n_speakers.saturating_sub(1)
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_serialize_fixed_point() {
        let cfg = RunConfig::default();
        let text = cfg.to_text();
        let re = RunConfig::parse(&text).unwrap();
        assert_eq!(re, cfg);
        assert_eq!(re.to_text(), text);
    }

    #[test]
    fn unknown_key_named_in_error() {
        let err = RunConfig::parse("bogus_key=1").unwrap_err();
        assert!(err.to_string().contains("bogus_key"), "{err}");
    }

    #[test]
    fn overrides_apply() {
        let cfg = RunConfig::parse("n_speakers=7\nbatch_size=2\ndub_setting=3.0\nmpa_off=true").unwrap();
        assert_eq!(cfg.n_speakers, 7);
        assert_eq!(cfg.batch_size, 2);
        assert_eq!(cfg.dub_setting, DubSetting::UnseenSpeaker);
        assert!(cfg.mpa_off);
    }

    #[test]
    fn comments_and_blanks_ignored() {
        let cfg = RunConfig::parse("# a comment\n\nseed=9\n").unwrap();
        assert_eq!(cfg.seed, 9);
    }

    #[test]
    fn loss_weights_match_defaults() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.lambda(), [20.0, 1.0, 1.0, 2.0, 5.0]);
        assert_eq!(cfg.learning_rate, 0.00625);
        assert_eq!(cfg.beta1, 0.9);
        assert_eq!(cfg.beta2, 0.98);
    }

    #[test]
    fn architecture_hash_tracks_dims_only() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        b.seed = 999;
        b.batch_size = 2;
        assert_eq!(a.architecture_hash(), b.architecture_hash());
        let mut c = RunConfig::default();
        c.d_model = 128;
        assert_ne!(a.architecture_hash(), c.architecture_hash());
    }

    #[test]
    fn defaults_table_covers_every_key() {
        let rows = RunConfig::defaults_table();
        let text = RunConfig::default().to_text();
        assert_eq!(rows.len(), text.lines().count());
        for (key, default, doc) in rows {
            assert!(text.contains(&format!("{key}={default}")), "{key}");
            assert!(!doc.is_empty(), "{key} has no doc");
        }
    }
}
