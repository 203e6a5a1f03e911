//! Corpus persistence: one directory holding a text manifest, WAV files, and
//! per-sample named-array containers, plus the speaker registry and config
//! echo. Files contain no timestamps, so regeneration with the same seed is
//! byte-identical.

use std::path::Path;

use super::{Corpus, DubbingSample, Split, SpeakerProfile, D_EMO, D_LIP};
use crate::audio::{read_wav, write_wav, MelSpectrogram, N_MELS};
use crate::config::RunConfig;
use crate::container::NamedArrays;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::Real;

const MANIFEST: &str = "manifest.txt";
const CONFIG: &str = "corpus.cfg";
const SPEAKERS: &str = "speakers.sdna";

fn wav_name(id: usize) -> String {
    format!("wav/{id:05}.wav")
}

fn arrays_name(id: usize) -> String {
    format!("arrays/{id:05}.sdna")
}

pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    let io_err = |p: &Path, e| Error::io(p.display().to_string(), e);
    std::fs::create_dir_all(dir.join("wav")).map_err(|e| io_err(dir, e))?;
    std::fs::create_dir_all(dir.join("arrays")).map_err(|e| io_err(dir, e))?;

    std::fs::write(dir.join(CONFIG), corpus.config.to_text()).map_err(|e| io_err(dir, e))?;

    let mut speakers = NamedArrays::new();
    for (sp, emb) in corpus.speakers.iter().zip(&corpus.profile_embeddings) {
        let k = sp.speaker_id;
        let mut profile = vec![sp.base_f0, sp.spectral_tilt];
        profile.extend_from_slice(&sp.duration_bias);
        profile.extend_from_slice(&sp.harmonic_profile);
        speakers.insert_real(&format!("speaker{k}.profile"), vec![21], &profile)?;
        speakers.insert_real(&format!("speaker{k}.embedding"), vec![emb.len()], emb)?;
        let seed_bytes: Vec<f32> = sp.timbre_seed.to_le_bytes().iter().map(|&b| b as f32).collect();
        speakers.insert(&format!("speaker{k}.seed"), vec![8], seed_bytes)?;
    }
    speakers.save(&dir.join(SPEAKERS))?;

    let mut manifest = String::new();
    manifest.push_str("# corpus manifest v1\n");
    manifest.push_str(
        "# id speaker utterance emotion split n_phonemes n_video_frames mel_frames wav_file arrays_file wav_bytes arrays_bytes\n",
    );
    for s in &corpus.samples {
        let wav_path = dir.join(wav_name(s.id));
        write_wav(&wav_path, &s.waveform)?;
        let wav_bytes = std::fs::metadata(&wav_path).map_err(|e| io_err(&wav_path, e))?.len();

        let mut arrays = NamedArrays::new();
        arrays.insert_real("mel", vec![s.mel.n_frames(), N_MELS], s.mel.data())?;
        arrays.insert_real("lip", vec![s.n_video_frames, D_LIP], s.lip_features.data())?;
        arrays.insert_real("emotion", vec![s.n_video_frames, D_EMO], s.face_emotion.data())?;
        arrays.insert(
            "durations",
            vec![s.gt_durations.len()],
            s.gt_durations.iter().map(|&d| d as f32).collect(),
        )?;
        arrays.insert(
            "phonemes",
            vec![s.phonemes.len()],
            s.phonemes.iter().map(|&p| p as f32).collect(),
        )?;
        arrays.insert_real("speaker_embedding", vec![s.speaker_embedding.len()], &s.speaker_embedding)?;
        let arrays_path = dir.join(arrays_name(s.id));
        arrays.save(&arrays_path)?;
        let arrays_bytes = std::fs::metadata(&arrays_path).map_err(|e| io_err(&arrays_path, e))?.len();

        manifest.push_str(&format!(
            "{} {} {} {} {} {} {} {} {} {} {} {}\n",
            s.id,
            s.speaker_id,
            s.utterance_index,
            s.emotion_id,
            s.split.as_str(),
            s.phonemes.len(),
            s.n_video_frames,
            s.mel.n_frames(),
            wav_name(s.id),
            arrays_name(s.id),
            wav_bytes,
            arrays_bytes,
        ));
    }
    std::fs::write(dir.join(MANIFEST), manifest).map_err(|e| io_err(dir, e))
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let io_err = |p: &Path, e| Error::io(p.display().to_string(), e);
    let config_text = std::fs::read_to_string(dir.join(CONFIG)).map_err(|e| io_err(dir, e))?;
    let config = RunConfig::parse(&config_text)?;

    let speakers_file = NamedArrays::load(&dir.join(SPEAKERS))?;
    let mut speakers = Vec::new();
    let mut profile_embeddings = Vec::new();
    for k in 0..config.n_speakers {
        let profile = speakers_file.require_real(&format!("speaker{k}.profile"))?;
        if profile.len() != 21 {
            return Err(Error::Corpus(format!("speaker{k}: bad profile length")));
        }
        let seed_bytes = speakers_file.require(&format!("speaker{k}.seed"))?;
        let mut seed = [0u8; 8];
        for (b, &v) in seed.iter_mut().zip(&seed_bytes.data) {
            *b = v as u8;
        }
        let mut harmonic_profile = [0.0 as Real; 16];
        harmonic_profile.copy_from_slice(&profile[5..21]);
        speakers.push(SpeakerProfile {
            speaker_id: k,
            base_f0: profile[0],
            spectral_tilt: profile[1],
            duration_bias: [profile[2], profile[3], profile[4]],
            timbre_seed: u64::from_le_bytes(seed),
            harmonic_profile,
        });
        profile_embeddings.push(speakers_file.require_real(&format!("speaker{k}.embedding"))?);
    }

    let manifest = std::fs::read_to_string(dir.join(MANIFEST)).map_err(|e| io_err(dir, e))?;
    let mut samples = Vec::new();
    for line in manifest.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 12 {
            return Err(Error::Corpus(format!("manifest line has {} fields", fields.len())));
        }
        let parse = |s: &str| -> Result<usize> {
            s.parse().map_err(|_| Error::Corpus(format!("bad manifest number {s}")))
        };
        let id = parse(fields[0])?;
        let speaker_id = parse(fields[1])?;
        let utterance_index = parse(fields[2])?;
        let emotion_id = parse(fields[3])?;
        let split = Split::parse(fields[4])?;
        let n_phonemes = parse(fields[5])?;
        let n_video_frames = parse(fields[6])?;
        let mel_frames = parse(fields[7])?;

        let waveform = read_wav(&dir.join(fields[8]))?;
        let arrays = NamedArrays::load(&dir.join(fields[9]))?;
        let mel = MelSpectrogram::new(mel_frames, arrays.require_real("mel")?)?;
        let lip_features = Tensor::new(vec![n_video_frames, D_LIP], arrays.require_real("lip")?)?;
        let face_emotion = Tensor::new(vec![n_video_frames, D_EMO], arrays.require_real("emotion")?)?;
        let gt_durations: Vec<usize> = arrays
            .require("durations")?
            .data
            .iter()
            .map(|&v| v as usize)
            .collect();
        let phonemes: Vec<usize> = arrays
            .require("phonemes")?
            .data
            .iter()
            .map(|&v| v as usize)
            .collect();
        if phonemes.len() != n_phonemes {
            return Err(Error::Corpus(format!("sample {id}: phoneme count mismatch")));
        }
        let speaker_embedding = arrays.require_real("speaker_embedding")?;

        let sample = DubbingSample {
            id,
            speaker_id,
            utterance_index,
            emotion_id,
            phonemes,
            gt_durations,
            waveform,
            mel,
            lip_features,
            face_emotion,
            n_video_frames,
            speaker_embedding,
            split,
        };
        sample.validate()?;
        samples.push(sample);
    }
    samples.sort_by_key(|s| s.id);

    Ok(Corpus {
        samples,
        speakers,
        profile_embeddings,
        config,
    })
}

#[cfg(test)]
mod tests {
    use super::super::generate_corpus;
    use super::*;

    #[test]
    fn save_load_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.n_speakers = 2;
        cfg.utterances_per_speaker = 2;
        let corpus = generate_corpus(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_corpus(&corpus, dir.path()).unwrap();
        let back = load_corpus(dir.path()).unwrap();
        assert_eq!(back.samples.len(), corpus.samples.len());
        for (a, b) in corpus.samples.iter().zip(&back.samples) {
            assert_eq!(a.phonemes, b.phonemes);
            assert_eq!(a.gt_durations, b.gt_durations);
            assert_eq!(a.emotion_id, b.emotion_id);
            assert_eq!(a.split, b.split);
            // mel stored as f32: exact in the default build
            assert_eq!(a.mel.n_frames(), b.mel.n_frames());
        }
        assert_eq!(back.speakers, corpus.speakers);
    }

    #[test]
    fn regeneration_is_byte_identical() {
        let mut cfg = RunConfig::default();
        cfg.n_speakers = 1;
        cfg.utterances_per_speaker = 2;
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        save_corpus(&generate_corpus(&cfg).unwrap(), d1.path()).unwrap();
        save_corpus(&generate_corpus(&cfg).unwrap(), d2.path()).unwrap();
        for name in [MANIFEST, CONFIG, SPEAKERS, "wav/00000.wav", "arrays/00001.sdna"] {
            let a = std::fs::read(d1.path().join(name)).unwrap();
            let b = std::fs::read(d2.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs");
        }
    }
}
