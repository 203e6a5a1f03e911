//! Neural layers built on the graph ops: linear, conv, embedding, multi-head
//! attention, and the FFT (feed-forward transformer) block with a pluggable
//! normalization so utterance-level style conditioning can replace layer norm.

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{uniform_fan_in, ParameterSet};
use crate::tensor::Tensor;
use crate::Real;

/// Fully connected layer `x[R×in] -> [R×out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: String,
    pub b: Option<String>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        ps: &mut ParameterSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Result<Self> {
        let w = format!("{name}.w");
        ps.insert(&w, uniform_fan_in(rng, &[in_dim, out_dim], in_dim))?;
        let b = if bias {
            let b = format!("{name}.b");
            ps.insert(&b, Tensor::zeros(&[out_dim]))?;
            Some(b)
        } else {
            None
        };
        Ok(Linear { w, b, in_dim, out_dim })
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParameterSet, x: Var) -> Result<Var> {
        let w = g.param(ps, &self.w)?;
        let y = g.matmul(x, w)?;
        match &self.b {
            Some(b) => {
                let b = g.param(ps, b)?;
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

/// 1-D convolution layer, stride 1, same padding, odd kernel.
/// Weight layout `[c_out, kw, c_in]`.
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub w: String,
    pub b: String,
    pub c_in: usize,
    pub c_out: usize,
    pub kw: usize,
}

impl Conv1d {
    pub fn new(
        ps: &mut ParameterSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        kw: usize,
    ) -> Result<Self> {
        let w = format!("{name}.w");
        let b = format!("{name}.b");
        ps.insert(&w, uniform_fan_in(rng, &[c_out, kw, c_in], c_in * kw))?;
        ps.insert(&b, Tensor::zeros(&[c_out]))?;
        Ok(Conv1d { w, b, c_in, c_out, kw })
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParameterSet, x: Var) -> Result<Var> {
        let w = g.param(ps, &self.w)?;
        let b = g.param(ps, &self.b)?;
        g.conv1d_same(x, w, Some(b), self.kw)
    }
}

/// Learned layer-norm affine: `gain * norm(x) + bias`.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: String,
    pub bias: String,
}

impl LayerNorm {
    pub fn new(ps: &mut ParameterSet, name: &str, dim: usize) -> Result<Self> {
        let gain = format!("{name}.gain");
        let bias = format!("{name}.bias");
        ps.insert(&gain, Tensor::ones(&[dim]))?;
        ps.insert(&bias, Tensor::zeros(&[dim]))?;
        Ok(LayerNorm { gain, bias })
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParameterSet, x: Var) -> Result<Var> {
        let n = g.layer_norm_rows(x)?;
        let gain = g.param(ps, &self.gain)?;
        let bias = g.param(ps, &self.bias)?;
        let scaled = g.mul_row(n, gain)?;
        g.add_row(scaled, bias)
    }
}

/// Utterance-conditioned normalization: gain and bias are affine maps of a
/// 64-dim style vector.
#[derive(Debug, Clone)]
pub struct StyleNorm {
    pub gamma: Linear,
    pub delta: Linear,
}

impl StyleNorm {
    pub fn new(
        ps: &mut ParameterSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        cond_dim: usize,
        dim: usize,
    ) -> Result<Self> {
        let gamma = Linear::new(ps, rng, &format!("{name}.gamma"), cond_dim, dim, true)?;
        let delta = Linear::new(ps, rng, &format!("{name}.delta"), cond_dim, dim, true)?;
        // gain bias starts at 1 so the layer opens as a near-identity norm
        let gb = ps.get_mut(&gamma.b.clone().expect("bias on"))?;
        gb.data_mut().iter_mut().for_each(|v| *v = 1.0);
        Ok(StyleNorm { gamma, delta })
    }

    /// `usln(h, v_s) = gamma(v_s) * norm(h) + delta(v_s)`.
    pub fn forward(&self, g: &mut Graph, ps: &ParameterSet, x: Var, cond: Var) -> Result<Var> {
        let n = g.layer_norm_rows(x)?;
        let gamma = self.gamma.forward(g, ps, cond)?;
        let delta = self.delta.forward(g, ps, cond)?;
        let scaled = g.mul_row(n, gamma)?;
        g.add_row(scaled, delta)
    }
}

/// Normalization choice inside a block: learned layer norm, utterance-level
/// style norm, or the bare normalizer (used by style-off ablations).
#[derive(Debug, Clone)]
pub enum Norm {
    Layer(LayerNorm),
    Style(StyleNorm),
    Plain,
}

impl Norm {
    pub fn forward(&self, g: &mut Graph, ps: &ParameterSet, x: Var, cond: Option<Var>) -> Result<Var> {
        match self {
            Norm::Layer(ln) => ln.forward(g, ps, x),
            Norm::Style(sn) => {
                let cond = cond.expect("style norm requires a condition vector");
                sn.forward(g, ps, x, cond)
            }
            Norm::Plain => g.layer_norm_rows(x),
        }
    }
}

/// Scaled dot-product multi-head attention with separate projection width.
///
/// Projections `d_model -> d_hidden` for q/k/v, `d_hidden -> d_model` out;
/// heads split `d_hidden`. Returns the output and the per-head attention
/// weight matrices `[Lq×Lk]`.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub d_hidden: usize,
}

impl MultiHeadAttention {
    pub fn new(
        ps: &mut ParameterSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_model: usize,
        d_hidden: usize,
        heads: usize,
    ) -> Result<Self> {
        if d_hidden % heads != 0 {
            return Err(crate::Error::Config(format!(
                "attention hidden {d_hidden} not divisible by {heads} heads"
            )));
        }
        Ok(MultiHeadAttention {
            wq: Linear::new(ps, rng, &format!("{name}.wq"), d_model, d_hidden, true)?,
            wk: Linear::new(ps, rng, &format!("{name}.wk"), d_model, d_hidden, true)?,
            wv: Linear::new(ps, rng, &format!("{name}.wv"), d_model, d_hidden, true)?,
            wo: Linear::new(ps, rng, &format!("{name}.wo"), d_hidden, d_model, true)?,
            heads,
            d_hidden,
        })
    }

    /// `mask`, when given, holds 1 for allowed key positions and 0 for
    /// padding; blocked scores get -1e9 added before the softmax.
    pub fn forward(
        &self,
        g: &mut Graph,
        ps: &ParameterSet,
        query: Var,
        key: Var,
        value: Var,
        mask: Option<&Tensor>,
    ) -> Result<(Var, Vec<Var>)> {
        let q = self.wq.forward(g, ps, query)?;
        let k = self.wk.forward(g, ps, key)?;
        let v = self.wv.forward(g, ps, value)?;
        let d_head = self.d_hidden / self.heads;
        let scale = 1.0 / (d_head as Real).sqrt();

        let mask_var = match mask {
            Some(m) => {
                let add = m.data().iter().map(|&x| (x - 1.0) * 1e9).collect::<Vec<Real>>();
                Some(g.input(Tensor::new(m.shape().to_vec(), add)?))
            }
            None => None,
        };

        let mut contexts = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * d_head, d_head)?;
            let kh = g.slice_cols(k, h * d_head, d_head)?;
            let vh = g.slice_cols(v, h * d_head, d_head)?;
            let scores = g.matmul_trans_b(qh, kh)?;
            let scores = g.scale(scores, scale)?;
            let scores = match mask_var {
                Some(m) => g.add(scores, m)?,
                None => scores,
            };
            let attn = g.softmax_rows(scores)?;
            let ctx = g.matmul(attn, vh)?;
            contexts.push(ctx);
            weights.push(attn);
        }
        let merged = g.concat_cols(&contexts)?;
        let out = self.wo.forward(g, ps, merged)?;
        Ok((out, weights))
    }

    /// Head-averaged attention weights.
    pub fn average_weights(&self, g: &mut Graph, weights: &[Var]) -> Result<Var> {
        let mut acc = weights[0];
        for &w in &weights[1..] {
            acc = g.add(acc, w)?;
        }
        g.scale(acc, 1.0 / weights.len() as Real)
    }
}

/// Feed-forward transformer block: self-attention sublayer and a position-wise
/// conv feed-forward sublayer, each with residual add and post-normalization.
#[derive(Debug, Clone)]
pub struct FftBlock {
    pub attn: MultiHeadAttention,
    pub ff1: Conv1d,
    pub ff2: Conv1d,
    pub norm1: Norm,
    pub norm2: Norm,
}

/// Feed-forward hidden width of an FFT block.
pub const FFT_FF_HIDDEN: usize = 256;
/// Kernel of the first feed-forward conv (the second is pointwise).
pub const FFT_FF_KERNEL: usize = 3;

impl FftBlock {
    pub fn new(
        ps: &mut ParameterSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_model: usize,
        heads: usize,
        style_norm: bool,
        cond_dim: usize,
    ) -> Result<Self> {
        let attn = MultiHeadAttention::new(ps, rng, &format!("{name}.attn"), d_model, d_model, heads)?;
        let ff1 = Conv1d::new(ps, rng, &format!("{name}.ff1"), d_model, FFT_FF_HIDDEN, FFT_FF_KERNEL)?;
        let ff2 = Conv1d::new(ps, rng, &format!("{name}.ff2"), FFT_FF_HIDDEN, d_model, 1)?;
        let (norm1, norm2) = if style_norm {
            (
                Norm::Style(StyleNorm::new(ps, rng, &format!("{name}.norm1"), cond_dim, d_model)?),
                Norm::Style(StyleNorm::new(ps, rng, &format!("{name}.norm2"), cond_dim, d_model)?),
            )
        } else {
            (
                Norm::Layer(LayerNorm::new(ps, &format!("{name}.norm1"), d_model)?),
                Norm::Layer(LayerNorm::new(ps, &format!("{name}.norm2"), d_model)?),
            )
        };
        Ok(FftBlock { attn, ff1, ff2, norm1, norm2 })
    }

    /// `cond` feeds the style norms; `norm_override` swaps both norms at call
    /// time (style-off ablations run the same block with `Norm::Plain`).
    pub fn forward(
        &self,
        g: &mut Graph,
        ps: &ParameterSet,
        x: Var,
        cond: Option<Var>,
        norm_override: Option<&Norm>,
    ) -> Result<Var> {
        let n1 = norm_override.unwrap_or(&self.norm1);
        let n2 = norm_override.unwrap_or(&self.norm2);
        let (attn_out, _) = self.attn.forward(g, ps, x, x, x, None)?;
        let res = g.add(x, attn_out)?;
        let h = n1.forward(g, ps, res, cond)?;
        let ff = self.ff1.forward(g, ps, h)?;
        let ff = g.relu(ff)?;
        let ff = self.ff2.forward(g, ps, ff)?;
        let res2 = g.add(h, ff)?;
        n2.forward(g, ps, res2, cond)
    }
}

/// Sinusoidal positional encoding, `[len×dim]`.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0 as Real; len * dim];
    for p in 0..len {
        for i in 0..dim / 2 {
            let freq = (10000.0_f64).powf(-2.0 * i as f64 / dim as f64);
            let angle = p as f64 * freq;
            data[p * dim + 2 * i] = angle.sin() as Real;
            data[p * dim + 2 * i + 1] = angle.cos() as Real;
        }
    }
    Tensor::new(vec![len, dim], data).expect("shape/data agree")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn setup() -> (ParameterSet, ChaCha8Rng) {
        (ParameterSet::new(), ChaCha8Rng::seed_from_u64(42))
    }

    #[test]
    fn linear_shapes() {
        let (mut ps, mut rng) = setup();
        let lin = Linear::new(&mut ps, &mut rng, "t.lin", 8, 3, true).unwrap();
        let mut g = Graph::new();
        let x = g.input(Tensor::ones(&[5, 8]));
        let y = lin.forward(&mut g, &ps, x).unwrap();
        assert_eq!(g.value(y).shape(), &[5, 3]);
    }

    #[test]
    fn layer_norm_gain_zero_forces_bias() {
        let (mut ps, _) = setup();
        let ln = LayerNorm::new(&mut ps, "t.ln", 4).unwrap();
        ps.get_mut("t.ln.gain").unwrap().data_mut().fill(0.0);
        ps.get_mut("t.ln.bias").unwrap().data_mut().fill(2.5);
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![2, 4], (0..8).map(|i| i as Real).collect()).unwrap());
        let y = ln.forward(&mut g, &ps, x).unwrap();
        assert!(g.value(y).data().iter().all(|&v| (v - 2.5).abs() < 1e-6));
    }

    #[test]
    fn attention_divisibility_error() {
        let (mut ps, mut rng) = setup();
        assert!(MultiHeadAttention::new(&mut ps, &mut rng, "t.bad", 16, 10, 3).is_err());
    }

    #[test]
    fn attention_single_key_repeats_value() {
        let (mut ps, mut rng) = setup();
        let mha = MultiHeadAttention::new(&mut ps, &mut rng, "t.attn", 8, 8, 2).unwrap();
        let mut g = Graph::new();
        let q = g.input(Tensor::new(vec![4, 8], (0..32).map(|i| (i as Real).sin()).collect()).unwrap());
        let kv = g.input(Tensor::new(vec![1, 8], (0..8).map(|i| i as Real / 8.0).collect()).unwrap());
        let (out, weights) = mha.forward(&mut g, &ps, q, kv, kv, None).unwrap();
        // every query attends to the single key with weight 1
        for &w in &weights {
            assert!(g.value(w).data().iter().all(|&v| (v - 1.0).abs() < 1e-6));
        }
        // all output rows identical
        let o = g.value(out);
        let first = o.data()[..8].to_vec();
        for r in 1..4 {
            for c in 0..8 {
                assert!((o.at(r, c) - first[c]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let (mut ps, mut rng) = setup();
        let mha = MultiHeadAttention::new(&mut ps, &mut rng, "t.attn", 16, 16, 4).unwrap();
        let mut g = Graph::new();
        let q = g.input(Tensor::new(vec![3, 16], (0..48).map(|i| (i as Real * 0.13).sin()).collect()).unwrap());
        let kv = g.input(Tensor::new(vec![7, 16], (0..112).map(|i| (i as Real * 0.17).cos()).collect()).unwrap());
        let (_, weights) = mha.forward(&mut g, &ps, q, kv, kv, None).unwrap();
        for &w in &weights {
            for row in g.value(w).data().chunks(7) {
                let s: Real = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn attention_single_head_identity_matches_formula() {
        // 1 head, hand-built identity projections, d = 2
        let (mut ps, mut rng) = setup();
        let mha = MultiHeadAttention::new(&mut ps, &mut rng, "t.attn", 2, 2, 1).unwrap();
        let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        for w in ["t.attn.wq.w", "t.attn.wk.w", "t.attn.wv.w", "t.attn.wo.w"] {
            *ps.get_mut(w).unwrap() = {
                let mut t = eye.clone();
                t.requires_grad = true;
                t
            };
        }
        for b in ["t.attn.wq.b", "t.attn.wk.b", "t.attn.wv.b", "t.attn.wo.b"] {
            ps.get_mut(b).unwrap().data_mut().fill(0.0);
        }
        let qd = [[1.0, 0.0], [0.0, 1.0]];
        let kd = [[1.0, 2.0], [0.0, 1.0]];
        let mut g = Graph::new();
        let q = g.input(Tensor::new(vec![2, 2], qd.concat()).unwrap());
        let kv = g.input(Tensor::new(vec![2, 2], kd.concat()).unwrap());
        let (out, _) = mha.forward(&mut g, &ps, q, kv, kv, None).unwrap();

        // direct formula: softmax(q k^T / sqrt(2)) v
        let scale = 1.0 / (2.0 as Real).sqrt();
        let mut want = [[0.0 as Real; 2]; 2];
        for i in 0..2 {
            let s0 = (qd[i][0] * kd[0][0] + qd[i][1] * kd[0][1]) * scale;
            let s1 = (qd[i][0] * kd[1][0] + qd[i][1] * kd[1][1]) * scale;
            let m = s0.max(s1);
            let (e0, e1) = ((s0 - m).exp(), (s1 - m).exp());
            let z = e0 + e1;
            for c in 0..2 {
                want[i][c] = (e0 * kd[0][c] + e1 * kd[1][c]) / z;
            }
        }
        for i in 0..2 {
            for c in 0..2 {
                assert!((g.value(out).at(i, c) - want[i][c]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn attention_mask_blocks_positions() {
        let (mut ps, mut rng) = setup();
        let mha = MultiHeadAttention::new(&mut ps, &mut rng, "t.attn", 8, 8, 2).unwrap();
        let mut g = Graph::new();
        let q = g.input(Tensor::ones(&[2, 8]));
        let kv = g.input(Tensor::new(vec![3, 8], (0..24).map(|i| (i as Real * 0.3).sin()).collect()).unwrap());
        let mask = Tensor::new(vec![2, 3], vec![1.0, 1.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
        let (_, weights) = mha.forward(&mut g, &ps, q, kv, kv, Some(&mask)).unwrap();
        for &w in &weights {
            for row in g.value(w).data().chunks(3) {
                assert!(row[2] < 1e-6, "masked key got weight {}", row[2]);
                assert!((row[0] + row[1] - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn fft_block_preserves_shape() {
        let (mut ps, mut rng) = setup();
        let blk = FftBlock::new(&mut ps, &mut rng, "t.blk", 32, 2, false, 0).unwrap();
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![17, 32], (0..17 * 32).map(|i| (i as Real * 0.01).sin()).collect()).unwrap());
        let y = blk.forward(&mut g, &ps, x, None, None).unwrap();
        assert_eq!(g.value(y).shape(), &[17, 32]);
    }

    #[test]
    fn fft_block_zero_out_projections_reduce_to_norm() {
        let (mut ps, mut rng) = setup();
        let blk = FftBlock::new(&mut ps, &mut rng, "t.blk", 16, 2, false, 0).unwrap();
        ps.get_mut("t.blk.attn.wo.w").unwrap().data_mut().fill(0.0);
        ps.get_mut("t.blk.attn.wo.b").unwrap().data_mut().fill(0.0);
        ps.get_mut("t.blk.ff2.w").unwrap().data_mut().fill(0.0);
        ps.get_mut("t.blk.ff2.b").unwrap().data_mut().fill(0.0);
        let mut g = Graph::new();
        let xt = Tensor::new(vec![5, 16], (0..80).map(|i| (i as Real * 0.37).cos() * 3.0).collect()).unwrap();
        let x = g.input(xt.clone());
        let y = blk.forward(&mut g, &ps, x, None, None).unwrap();
        // block collapses to norm(norm(x)); with unit gain/zero bias that is
        // numerically the same as one normalization of x
        let n1 = g.layer_norm_rows(x).unwrap();
        let want = g.layer_norm_rows(n1).unwrap();
        for (a, b) in g.value(y).data().iter().zip(g.value(want).data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn style_norm_identity_affine_matches_layer_norm() {
        let (mut ps, mut rng) = setup();
        let sn = StyleNorm::new(&mut ps, &mut rng, "t.sn", 8, 16).unwrap();
        // identity affine: zero weights, gain bias 1, delta bias 0
        ps.get_mut("t.sn.gamma.w").unwrap().data_mut().fill(0.0);
        ps.get_mut("t.sn.delta.w").unwrap().data_mut().fill(0.0);
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![3, 16], (0..48).map(|i| (i as Real * 0.7).sin() * 2.0).collect()).unwrap());
        let cond = g.input(Tensor::ones(&[1, 8]));
        let y = sn.forward(&mut g, &ps, x, cond).unwrap();
        let want = g.layer_norm_rows(x).unwrap();
        for (a, b) in g.value(y).data().iter().zip(g.value(want).data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn style_norm_zero_gamma_gives_constant_delta() {
        let (mut ps, mut rng) = setup();
        let sn = StyleNorm::new(&mut ps, &mut rng, "t.sn", 4, 8).unwrap();
        ps.get_mut("t.sn.gamma.w").unwrap().data_mut().fill(0.0);
        ps.get_mut("t.sn.gamma.b").unwrap().data_mut().fill(0.0);
        ps.get_mut("t.sn.delta.w").unwrap().data_mut().fill(0.0);
        ps.get_mut("t.sn.delta.b").unwrap().data_mut().copy_from_slice(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![2, 8], (0..16).map(|i| i as Real).collect()).unwrap());
        let cond = g.input(Tensor::ones(&[1, 4]));
        let y = sn.forward(&mut g, &ps, x, cond).unwrap();
        for row in g.value(y).data().chunks(8) {
            for (c, &v) in row.iter().enumerate() {
                assert!((v - (c + 1) as Real).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn positional_encoding_position_sensitivity() {
        let pe = sinusoidal_positions(8, 16);
        // two positions differ
        let r0 = &pe.data()[..16];
        let r3 = &pe.data()[3 * 16..4 * 16];
        assert!(r0.iter().zip(r3).any(|(a, b)| (a - b).abs() > 1e-3));
    }
}
