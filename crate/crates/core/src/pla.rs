//! Phoneme-guided lip aligner: monotonic cross-attention from phonemes to lip
//! frames, the band-based monotonic alignment loss, and the duration
//! predictor whose output is rescaled to the video-determined total length.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Conv1d, Linear, MultiHeadAttention};
use crate::params::ParameterSet;
use crate::tensor::Tensor;
use crate::Real;

/// Attention projection width inside the aligner.
pub const PLA_HIDDEN: usize = 512;
/// Attention heads inside the aligner.
pub const PLA_HEADS: usize = 8;

/// Band parameters for the monotonic alignment loss. The diagonal slope is
/// computed per sample from the phoneme/lip lengths.
#[derive(Debug, Clone, Copy)]
pub struct MalConfig {
    /// Half-width of the diagonal band, in lip frames.
    pub band_half_width: Real,
}

impl Default for MalConfig {
    fn default() -> Self {
        MalConfig { band_half_width: 2.0 }
    }
}

/// 0/1 mask of the diagonal band: entry (p, l) is inside when
/// `|l - p * L/P| <= beta`.
pub fn band_mask(n_phonemes: usize, n_lip: usize, beta: Real) -> Tensor {
    let slope = n_lip as Real / n_phonemes as Real;
    let mut data = vec![0.0 as Real; n_phonemes * n_lip];
    for p in 0..n_phonemes {
        let center = p as Real * slope;
        for l in 0..n_lip {
            if (l as Real - center).abs() <= beta {
                data[p * n_lip + l] = 1.0;
            }
        }
    }
    Tensor::new(vec![n_phonemes, n_lip], data).expect("shape/data agree")
}

/// Monotonic alignment loss on a plain weight matrix:
/// `-ln(sum of in-band mass / total mass)`. Zero when all mass is in-band,
/// growing as mass leaves the band.
pub fn mal_from_weights(m: &[Real], n_phonemes: usize, n_lip: usize, cfg: &MalConfig) -> Result<Real> {
    let mask = band_mask(n_phonemes, n_lip, cfg.band_half_width);
    let total: Real = m.iter().sum();
    if total <= 0.0 {
        return Err(Error::EmptyInput("alignment matrix has zero total mass"));
    }
    let in_band: Real = m.iter().zip(mask.data()).map(|(&v, &w)| v * w).sum();
    Ok(-(in_band / total).ln())
}

/// Phoneme-to-lip aligner module.
#[derive(Debug, Clone)]
pub struct LipAligner {
    pub attn: MultiHeadAttention,
    dur_conv1: Conv1d,
    dur_conv2: Conv1d,
    dur_head: Linear,
}

impl LipAligner {
    pub fn new(ps: &mut ParameterSet, rng: &mut ChaCha8Rng, d_model: usize) -> Result<Self> {
        Ok(LipAligner {
            attn: MultiHeadAttention::new(ps, rng, "pla.attn", d_model, PLA_HIDDEN, PLA_HEADS)?,
            dur_conv1: Conv1d::new(ps, rng, "pla.dur.conv1", d_model, d_model, 1)?,
            dur_conv2: Conv1d::new(ps, rng, "pla.dur.conv2", d_model, d_model, 1)?,
            dur_head: Linear::new(ps, rng, "pla.dur.head", d_model, 1, true)?,
        })
    }

    /// Cross-attention with phonemes as query and lip features as key/value.
    /// Returns the lip-phoneme context `[N_p×D_m]` and the head-averaged
    /// attention weights `[N_p×N_v]`.
    pub fn monotonic_cross_attention(
        &self,
        g: &mut Graph,
        ps: &ParameterSet,
        phonemes: Var,
        lips: Var,
    ) -> Result<(Var, Var)> {
        if g.value(phonemes).rows() == 0 || g.value(lips).rows() == 0 {
            return Err(Error::EmptyInput("monotonic_cross_attention"));
        }
        let (ctx, weights) = self.attn.forward(g, ps, phonemes, lips, lips, None)?;
        let avg = self.attn.average_weights(g, &weights)?;
        Ok((ctx, avg))
    }

    /// Monotonic alignment loss on the averaged weights.
    pub fn alignment_loss(&self, g: &mut Graph, weights: Var, cfg: &MalConfig) -> Result<Var> {
        let shape = g.value(weights).shape().to_vec();
        let (p, l) = (shape[0], shape[1]);
        let mask = g.input(band_mask(p, l, cfg.band_half_width));
        let masked = g.mul(weights, mask)?;
        let in_band = g.sum_all(masked)?;
        let total = g.sum_all(weights)?;
        if g.value(total).item() <= 0.0 {
            return Err(Error::EmptyInput("alignment matrix has zero total mass"));
        }
        let ratio = g.div(in_band, total)?;
        let ln = g.ln(ratio)?;
        g.neg(ln)
    }

    /// Positive per-phoneme durations rescaled so they sum to `total_length`.
    /// Returns the real-valued `[N_p×1]` prediction.
    pub fn predict_durations(
        &self,
        g: &mut Graph,
        ps: &ParameterSet,
        lip_context: Var,
        total_length: usize,
    ) -> Result<Var> {
        let n_phonemes = g.value(lip_context).rows();
        if total_length < n_phonemes {
            return Err(Error::InfeasibleLength {
                total: total_length,
                n_phonemes,
            });
        }
        let h = self.dur_conv1.forward(g, ps, lip_context)?;
        let h = g.relu(h)?;
        let h = self.dur_conv2.forward(g, ps, h)?;
        let h = g.relu(h)?;
        let raw = self.dur_head.forward(g, ps, h)?;
        let pos = g.softplus(raw)?;
        let sum = g.sum_all(pos)?;
        let total = g.scalar(total_length as Real);
        let factor = g.div(total, sum)?;
        g.mul_scalar_node(pos, factor)
    }
}

/// Floor-then-largest-remainder integerization with a minimum of one frame
/// per phoneme; the result sums exactly to `total_length`. Remainder ties go
/// to the lower index; the minimum-1 deficit comes out of the largest entries.
pub fn integerize_durations(real: &[Real], total_length: usize) -> Result<Vec<usize>> {
    let n = real.len();
    if n == 0 {
        return Err(Error::EmptyInput("integerize_durations"));
    }
    if total_length < n {
        return Err(Error::InfeasibleLength {
            total: total_length,
            n_phonemes: n,
        });
    }
    let mut ints: Vec<usize> = real.iter().map(|&v| v.max(0.0) as usize).collect();
    let mut remainders: Vec<(usize, Real)> = real
        .iter()
        .enumerate()
        .map(|(i, &v)| (i, v.max(0.0) - v.max(0.0).floor()))
        .collect();
    // stable sort: descending remainder, ties keep lower index first
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));

    let assigned: usize = ints.iter().sum();
    if assigned > total_length {
        // Real inputs should sum to the total (pre-condition), but guard
        // against accumulated float error by trimming from the largest.
        let mut excess = assigned - total_length;
        while excess > 0 {
            let i = argmax(&ints);
            ints[i] -= 1;
            excess -= 1;
        }
    } else {
        let mut deficit = total_length - assigned;
        let mut iter = remainders.iter().cycle();
        while deficit > 0 {
            let &(i, _) = iter.next().expect("non-empty");
            ints[i] += 1;
            deficit -= 1;
        }
    }

    // minimum one frame per phoneme, taking from the largest entries
    for i in 0..n {
        while ints[i] == 0 {
            let j = argmax(&ints);
            if ints[j] <= 1 {
                return Err(Error::InfeasibleLength {
                    total: total_length,
                    n_phonemes: n,
                });
            }
            ints[j] -= 1;
            ints[i] += 1;
        }
    }
    debug_assert_eq!(ints.iter().sum::<usize>(), total_length);
    Ok(ints)
}

fn argmax(v: &[usize]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Log-domain duration loss: `MSE(ln(pred+1), ln(gt+1))` averaged over
/// phonemes. `pred` is the real-valued prediction `[N_p×1]`.
pub fn duration_loss(g: &mut Graph, pred: Var, gt_durations: &[usize]) -> Result<Var> {
    let n = g.value(pred).numel();
    if n != gt_durations.len() {
        return Err(Error::ShapeMismatch {
            op: "duration_loss",
            details: format!("{} predictions vs {} ground truths", n, gt_durations.len()),
        });
    }
    let gt_log: Vec<Real> = gt_durations.iter().map(|&d| (d as Real + 1.0).ln()).collect();
    let gt = g.input(Tensor::new(vec![n, 1], gt_log)?);
    let shifted = g.add_scalar(pred, 1.0)?;
    let pred_log = g.ln(shifted)?;
    let diff = g.sub(pred_log, gt)?;
    let sq = g.mul(diff, diff)?;
    g.mean_all(sq)
}
