//! Content, style, emotion, and lip encoders. All produce `D_m`-wide
//! sequences; the style and emotion paths downsample to quasi-phoneme scale
//! (x16 over mel frames, x4 over video frames) unless the frame-level
//! granularity ablation keeps them at full rate.

use rand_chacha::ChaCha8Rng;

use crate::audio::{MelSpectrogram, N_MELS};
use crate::corpus::{D_EMO, D_LIP};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{sinusoidal_positions, Conv1d, FftBlock, Linear};
use crate::params::ParameterSet;
use crate::tensor::Tensor;

/// Phoneme encoder: embedding table + sinusoidal positions + FFT blocks.
#[derive(Debug, Clone)]
pub struct PhonemeEncoder {
    table: String,
    blocks: Vec<FftBlock>,
    inventory: usize,
    d_model: usize,
}

impl PhonemeEncoder {
    pub fn new(
        ps: &mut ParameterSet,
        rng: &mut ChaCha8Rng,
        inventory: usize,
        d_model: usize,
    ) -> Result<Self> {
        let table = "enc.pho.embed".to_string();
        ps.insert(&table, crate::params::uniform_fan_in(rng, &[inventory, d_model], d_model))?;
        let blocks = (0..4)
            .map(|i| FftBlock::new(ps, rng, &format!("enc.pho.block{i}"), d_model, 2, false, 0))
            .collect::<Result<Vec<_>>>()?;
        Ok(PhonemeEncoder { table, blocks, inventory, d_model })
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParameterSet, ids: &[usize]) -> Result<Var> {
        if ids.is_empty() {
            return Err(Error::EmptyInput("phoneme sequence"));
        }
        for &id in ids {
            if id >= self.inventory {
                return Err(Error::BadPhonemeId { id, inventory: self.inventory });
            }
        }
        let table = g.param(ps, &self.table)?;
        let emb = g.embed_rows(table, ids)?;
        let pe = g.input(sinusoidal_positions(ids.len(), self.d_model));
        let mut h = g.add(emb, pe)?;
        for b in &self.blocks {
            h = b.forward(g, ps, h, None, None)?;
        }
        Ok(h)
    }
}

/// Mel-style encoder and x16 downsampler: spectral prenet, two gated convs,
/// then four conv+pool stages with channel plan [128, 256, 512, 512].
#[derive(Debug, Clone)]
pub struct StyleEncoder {
    prenet: Linear,
    gated: Vec<Conv1d>,
    down: Vec<Conv1d>,
    proj: Linear,
}

impl StyleEncoder {
    pub fn new(ps: &mut ParameterSet, rng: &mut ChaCha8Rng, d_model: usize) -> Result<Self> {
        let prenet = Linear::new(ps, rng, "enc.spk.prenet", N_MELS, 128, true)?;
        let gated = (0..2)
            .map(|i| Conv1d::new(ps, rng, &format!("enc.spk.gate{i}"), 128, 256, 3))
            .collect::<Result<Vec<_>>>()?;
        let channels = [(128usize, 128usize), (128, 256), (256, 512), (512, 512)];
        let down = channels
            .iter()
            .enumerate()
            .map(|(i, &(c_in, c_out))| Conv1d::new(ps, rng, &format!("enc.spk.down{i}"), c_in, c_out, 3))
            .collect::<Result<Vec<_>>>()?;
        let proj = Linear::new(ps, rng, "enc.spk.proj", 512, d_model, true)?;
        Ok(StyleEncoder { prenet, gated, down, proj })
    }

    /// `[T x 80]` log-mel to `[ceil(T/16) x D_m]` style features
    /// (`[T x D_m]` when `frame_level` keeps the full rate).
    pub fn forward(
        &self,
        g: &mut Graph,
        ps: &ParameterSet,
        mel: &MelSpectrogram,
        frame_level: bool,
    ) -> Result<Var> {
        let t = mel.n_frames();
        let x = g.input(Tensor::new(vec![t, N_MELS], mel.data().to_vec())?);
        let mut h = self.prenet.forward(g, ps, x)?;
        h = g.relu(h)?;
        for conv in &self.gated {
            let y = conv.forward(g, ps, h)?;
            let a = g.slice_cols(y, 0, 128)?;
            let b = g.slice_cols(y, 128, 128)?;
            let gate = g.sigmoid(b)?;
            let gated = g.mul(a, gate)?;
            h = g.add(h, gated)?;
        }
        for conv in &self.down {
            h = conv.forward(g, ps, h)?;
            h = g.relu(h)?;
            if !frame_level {
                h = g.avg_pool1d_ceil(h, 2)?;
            }
        }
        self.proj.forward(g, ps, h)
    }
}

/// Face-emotion downsampler: two conv+pool stages [128, 256], projected to
/// `D_m`; length `ceil(N_v/4)`.
#[derive(Debug, Clone)]
pub struct EmotionEncoder {
    convs: Vec<Conv1d>,
    proj: Linear,
}

impl EmotionEncoder {
    pub fn new(ps: &mut ParameterSet, rng: &mut ChaCha8Rng, d_model: usize) -> Result<Self> {
        let convs = vec![
            Conv1d::new(ps, rng, "enc.emo.conv0", D_EMO, 128, 3)?,
            Conv1d::new(ps, rng, "enc.emo.conv1", 128, 256, 3)?,
        ];
        let proj = Linear::new(ps, rng, "enc.emo.proj", 256, d_model, true)?;
        Ok(EmotionEncoder { convs, proj })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        ps: &ParameterSet,
        face_emotion: &Tensor,
        frame_level: bool,
    ) -> Result<Var> {
        if face_emotion.rows() == 0 {
            return Err(Error::EmptyInput("face emotion features"));
        }
        let mut h = g.input(face_emotion.clone());
        for conv in &self.convs {
            h = conv.forward(g, ps, h)?;
            h = g.relu(h)?;
            if !frame_level {
                h = g.avg_pool1d_ceil(h, 2)?;
            }
        }
        self.proj.forward(g, ps, h)
    }
}

/// Lip encoder: linear projection of the analytic lip codes plus positional
/// encoding, refined by two FFT blocks. Length `N_v` preserved.
#[derive(Debug, Clone)]
pub struct LipEncoder {
    proj: Linear,
    blocks: Vec<FftBlock>,
    d_model: usize,
}

impl LipEncoder {
    pub fn new(ps: &mut ParameterSet, rng: &mut ChaCha8Rng, d_model: usize) -> Result<Self> {
        let proj = Linear::new(ps, rng, "enc.lip.proj", D_LIP, d_model, true)?;
        let blocks = (0..2)
            .map(|i| FftBlock::new(ps, rng, &format!("enc.lip.block{i}"), d_model, 2, false, 0))
            .collect::<Result<Vec<_>>>()?;
        Ok(LipEncoder { proj, blocks, d_model })
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParameterSet, lips: &Tensor) -> Result<Var> {
        if lips.rows() == 0 {
            return Err(Error::EmptyInput("lip features"));
        }
        let x = g.input(lips.clone());
        let mut h = self.proj.forward(g, ps, x)?;
        let pe = g.input(sinusoidal_positions(lips.rows(), self.d_model));
        h = g.add(h, pe)?;
        for b in &self.blocks {
            h = b.forward(g, ps, h, None, None)?;
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::LOG_FLOOR;
    use rand::SeedableRng;

    fn setup() -> (ParameterSet, ChaCha8Rng) {
        (ParameterSet::new(), ChaCha8Rng::seed_from_u64(3))
    }

    fn mel_of(t: usize) -> MelSpectrogram {
        let data = (0..t * N_MELS)
            .map(|i| LOG_FLOOR.ln() / 2.0 + ((i % 97) as crate::Real * 0.11).sin())
            .collect();
        MelSpectrogram::new(t, data).unwrap()
    }

    #[test]
    fn phoneme_encoder_shape_and_position_sensitivity() {
        let (mut ps, mut rng) = setup();
        let enc = PhonemeEncoder::new(&mut ps, &mut rng, 40, 32).unwrap();
        let mut g = Graph::new();
        let a = enc.forward(&mut g, &ps, &(0..17).map(|i| i % 40).collect::<Vec<_>>()).unwrap();
        assert_eq!(g.value(a).shape(), &[17, 32]);

        // permuting ids changes outputs
        let x = enc.forward(&mut g, &ps, &[1, 2, 3]).unwrap();
        let y = enc.forward(&mut g, &ps, &[3, 2, 1]).unwrap();
        let diff = g
            .value(x)
            .data()
            .iter()
            .zip(g.value(y).data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, crate::Real::max);
        assert!(diff > 1e-4);

        // identical ids at different positions differ in embedding
        let z = enc.forward(&mut g, &ps, &[7, 7]).unwrap();
        let row_diff: crate::Real = (0..32)
            .map(|c| (g.value(z).at(0, c) - g.value(z).at(1, c)).abs())
            .fold(0.0, crate::Real::max);
        assert!(row_diff > 1e-4);

        assert!(enc.forward(&mut g, &ps, &[40]).is_err());
    }

    #[test]
    fn style_encoder_lengths() {
        let (mut ps, mut rng) = setup();
        let enc = StyleEncoder::new(&mut ps, &mut rng, 64).unwrap();
        let mut g = Graph::new();
        let y = enc.forward(&mut g, &ps, &mel_of(64), false).unwrap();
        assert_eq!(g.value(y).shape(), &[4, 64]);
        let y = enc.forward(&mut g, &ps, &mel_of(1), false).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 64]);
        // frame-level ablation keeps the full rate
        let y = enc.forward(&mut g, &ps, &mel_of(10), true).unwrap();
        assert_eq!(g.value(y).shape(), &[10, 64]);
    }

    #[test]
    fn style_encoder_length_formula_holds() {
        let (mut ps, mut rng) = setup();
        let enc = StyleEncoder::new(&mut ps, &mut rng, 32).unwrap();
        let mut g = Graph::new();
        for t in [1usize, 2, 15, 16, 17, 31, 33, 100, 255] {
            let y = enc.forward(&mut g, &ps, &mel_of(t), false).unwrap();
            assert_eq!(g.value(y).shape()[0], t.div_ceil(16), "T={t}");
        }
    }

    #[test]
    fn emotion_encoder_lengths() {
        let (mut ps, mut rng) = setup();
        let enc = EmotionEncoder::new(&mut ps, &mut rng, 64).unwrap();
        let mut g = Graph::new();
        let feats = Tensor::new(vec![32, D_EMO], (0..32 * D_EMO).map(|i| (i as crate::Real * 0.07).cos()).collect()).unwrap();
        let y = enc.forward(&mut g, &ps, &feats, false).unwrap();
        assert_eq!(g.value(y).shape(), &[8, 64]);
        let feats = Tensor::new(vec![3, D_EMO], vec![0.1; 3 * D_EMO]).unwrap();
        let y = enc.forward(&mut g, &ps, &feats, false).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 64]);
        assert!(g.value(y).all_finite());
    }

    #[test]
    fn lip_encoder_shape_and_grad_flow() {
        let (mut ps, mut rng) = setup();
        let enc = LipEncoder::new(&mut ps, &mut rng, 64).unwrap();
        let mut g = Graph::new();
        let lips = Tensor::new(vec![50, D_LIP], (0..50 * D_LIP).map(|i| (i as crate::Real * 0.013).sin()).collect()).unwrap();
        let y = enc.forward(&mut g, &ps, &lips).unwrap();
        assert_eq!(g.value(y).shape(), &[50, 64]);

        let sq = g.mul(y, y).unwrap();
        let loss = g.mean_all(sq).unwrap();
        g.backward(loss).unwrap();
        let grads = g.param_grads();
        let proj_grad = grads.iter().find(|(n, _)| n == "enc.lip.proj.w").unwrap();
        assert!(proj_grad.1.iter().any(|&v| v != 0.0));
    }
}
