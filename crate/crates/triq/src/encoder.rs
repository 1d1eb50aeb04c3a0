//! Shallow Transformer encoder: multi-head self-attention and
//! position-wise feed-forward sublayers, each wrapped in a residual
//! connection followed by layer normalization (post-LN).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{shared, SharedTensor, Tape, Tensor, Var};
use crate::seeds::subseed;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub dropout_rate: f64,
}

impl Default for EncoderConfig {
    fn default() -> EncoderConfig {
        EncoderConfig {
            n_layers: 2,
            d_model: 32,
            n_heads: 8,
            d_ff: 64,
            dropout_rate: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return Err(Error::Param("encoder dims must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Param(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Param(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// One attention head's projections, each [D, d_k] plus a [d_k] bias.
pub struct HeadParams {
    pub wq: SharedTensor,
    pub bq: SharedTensor,
    pub wk: SharedTensor,
    pub bk: SharedTensor,
    pub wv: SharedTensor,
    pub bv: SharedTensor,
}

/// LayerNorm gain/bias pair.
pub struct NormParams {
    pub gamma: SharedTensor,
    pub beta: SharedTensor,
}

impl NormParams {
    fn new(d: usize) -> NormParams {
        NormParams {
            gamma: shared(Tensor::full(vec![d], 1.0).requires_grad()),
            beta: shared(Tensor::zeros(vec![d]).requires_grad()),
        }
    }
}

pub struct EncoderLayer {
    pub heads: Vec<HeadParams>,
    pub wo: SharedTensor, // [D, D]
    pub bo: SharedTensor, // [D]
    pub norm1: NormParams,
    pub w1: SharedTensor, // [D, d_ff]
    pub b1: SharedTensor,
    pub w2: SharedTensor, // [d_ff, D]
    pub b2: SharedTensor,
    pub norm2: NormParams,
}

pub struct Encoder {
    pub config: EncoderConfig,
    pub layers: Vec<EncoderLayer>,
}

const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-6;

/// Inverted-dropout mask application (training only).
fn apply_dropout(tape: &mut Tape, x: Var, rate: f64, rng: &mut ChaCha8Rng) -> Result<Var> {
    let keep = 1.0 - rate;
    let mask: Vec<f64> = (0..tape.data(x).len())
        .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    tape.dropout_mask(x, mask)
}

impl Encoder {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Encoder> {
        config.validate()?;
        let d = config.d_model;
        let dk = config.d_head();
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let mut rng =
                ChaCha8Rng::seed_from_u64(subseed(seed, &format!("encoder.layer{l}")));
            let mut w = |rows: usize, cols: usize| {
                shared(Tensor::randn(vec![rows, cols], INIT_STD, &mut rng).requires_grad())
            };
            let mut heads = Vec::with_capacity(config.n_heads);
            for _ in 0..config.n_heads {
                heads.push(HeadParams {
                    wq: w(d, dk),
                    bq: shared(Tensor::zeros(vec![dk]).requires_grad()),
                    wk: w(d, dk),
                    bk: shared(Tensor::zeros(vec![dk]).requires_grad()),
                    wv: w(d, dk),
                    bv: shared(Tensor::zeros(vec![dk]).requires_grad()),
                });
            }
            let wo = w(d, d);
            let w1 = w(d, config.d_ff);
            let w2 = w(config.d_ff, d);
            layers.push(EncoderLayer {
                heads,
                wo,
                bo: shared(Tensor::zeros(vec![d]).requires_grad()),
                norm1: NormParams::new(d),
                w1,
                b1: shared(Tensor::zeros(vec![config.d_ff]).requires_grad()),
                w2,
                b2: shared(Tensor::zeros(vec![d]).requires_grad()),
                norm2: NormParams::new(d),
            });
        }
        Ok(Encoder { config, layers })
    }

    pub fn params(&self) -> Vec<(String, SharedTensor)> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            let pre = format!("encoder.layer{l}");
            for (h, hp) in layer.heads.iter().enumerate() {
                out.push((format!("{pre}.head{h}.wq"), hp.wq.clone()));
                out.push((format!("{pre}.head{h}.bq"), hp.bq.clone()));
                out.push((format!("{pre}.head{h}.wk"), hp.wk.clone()));
                out.push((format!("{pre}.head{h}.bk"), hp.bk.clone()));
                out.push((format!("{pre}.head{h}.wv"), hp.wv.clone()));
                out.push((format!("{pre}.head{h}.bv"), hp.bv.clone()));
            }
            out.push((format!("{pre}.wo"), layer.wo.clone()));
            out.push((format!("{pre}.bo"), layer.bo.clone()));
            out.push((format!("{pre}.norm1.gamma"), layer.norm1.gamma.clone()));
            out.push((format!("{pre}.norm1.beta"), layer.norm1.beta.clone()));
            out.push((format!("{pre}.ff.w1"), layer.w1.clone()));
            out.push((format!("{pre}.ff.b1"), layer.b1.clone()));
            out.push((format!("{pre}.ff.w2"), layer.w2.clone()));
            out.push((format!("{pre}.ff.b2"), layer.b2.clone()));
            out.push((format!("{pre}.norm2.gamma"), layer.norm2.gamma.clone()));
            out.push((format!("{pre}.norm2.beta"), layer.norm2.beta.clone()));
        }
        out
    }

    /// Scaled dot-product attention for one head; returns the weighted
    /// values [N, d_k] and the attention matrix [N, N].
    fn head_attention(
        tape: &mut Tape,
        x: Var,
        hp: &HeadParams,
        d_head: usize,
    ) -> Result<(Var, Var)> {
        let wq = tape.leaf(&hp.wq);
        let bq = tape.leaf(&hp.bq);
        let wk = tape.leaf(&hp.wk);
        let bk = tape.leaf(&hp.bk);
        let wv = tape.leaf(&hp.wv);
        let bv = tape.leaf(&hp.bv);
        let q0 = tape.matmul(x, wq)?;
        let q = tape.add_row_bias(q0, bq)?;
        let k0 = tape.matmul(x, wk)?;
        let k = tape.add_row_bias(k0, bk)?;
        let v0 = tape.matmul(x, wv)?;
        let v = tape.add_row_bias(v0, bv)?;
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let scaled = tape.scale(scores, 1.0 / (d_head as f64).sqrt());
        let attn = tape.softmax_last(scaled);
        let out = tape.matmul(attn, v)?;
        Ok((out, attn))
    }

    fn layer_forward(
        &self,
        tape: &mut Tape,
        layer: &EncoderLayer,
        x: Var,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Var, Tensor)> {
        let n = tape.shape(x)[0];
        let dk = self.config.d_head();
        let mut head_outs = Vec::with_capacity(layer.heads.len());
        let mut attn_data = Vec::with_capacity(layer.heads.len() * n * n);
        for hp in &layer.heads {
            let (out, attn) = Self::head_attention(tape, x, hp, dk)?;
            attn_data.extend_from_slice(tape.data(attn));
            head_outs.push(out);
        }
        let attention = Tensor::new(vec![layer.heads.len(), n, n], attn_data)?;
        let concat = tape.concat_cols(&head_outs)?;
        let wo = tape.leaf(&layer.wo);
        let bo = tape.leaf(&layer.bo);
        let mha0 = tape.matmul(concat, wo)?;
        let mut mha = tape.add_row_bias(mha0, bo)?;
        if training && self.config.dropout_rate > 0.0 {
            mha = apply_dropout(tape, mha, self.config.dropout_rate, rng)?;
        }
        let res1 = tape.add(x, mha)?;
        let g1 = tape.leaf(&layer.norm1.gamma);
        let b1n = tape.leaf(&layer.norm1.beta);
        let normed1 = tape.layer_norm(res1, g1, b1n, LN_EPS)?;

        let w1 = tape.leaf(&layer.w1);
        let b1 = tape.leaf(&layer.b1);
        let w2 = tape.leaf(&layer.w2);
        let b2 = tape.leaf(&layer.b2);
        let h0 = tape.matmul(normed1, w1)?;
        let h1 = tape.add_row_bias(h0, b1)?;
        let h2 = tape.gelu(h1);
        let h3 = tape.matmul(h2, w2)?;
        let mut ff = tape.add_row_bias(h3, b2)?;
        if training && self.config.dropout_rate > 0.0 {
            ff = apply_dropout(tape, ff, self.config.dropout_rate, rng)?;
        }
        let res2 = tape.add(normed1, ff)?;
        let g2 = tape.leaf(&layer.norm2.gamma);
        let b2n = tape.leaf(&layer.norm2.beta);
        let out = tape.layer_norm(res2, g2, b2n, LN_EPS)?;
        Ok((out, attention))
    }

    /// Run all layers over the [N, D] sequence. Returns the final
    /// sequence var and one [heads, N, N] attention tensor per layer.
    pub fn encode(
        &self,
        tape: &mut Tape,
        x: Var,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Var, Vec<Tensor>)> {
        let sh = tape.shape(x);
        if sh.len() != 2 || sh[1] != self.config.d_model {
            return Err(Error::Dim(format!(
                "encoder expects [N, {}], got {:?}",
                self.config.d_model, sh
            )));
        }
        let mut cur = x;
        let mut attention = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (next, attn) = self.layer_forward(tape, layer, cur, training, rng)?;
            attention.push(attn);
            cur = next;
        }
        Ok((cur, attention))
    }
}
