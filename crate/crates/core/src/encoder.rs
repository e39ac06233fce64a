//! Shared text encoder: id sequences in, one `d_model`-wide embedding per
//! example out.
//!
//! Two variants are available. `AttentionPool` scores each token embedding
//! with a learned vector and returns the softmax-weighted sum over non-PAD
//! positions. `TransformerBlock` adds learned positional embeddings, runs one
//! two-head self-attention block (post-norm residuals, GELU feed-forward of
//! width `4·d_model`) and reads the output at position 0, where the CLS token
//! sits. PAD positions are masked out of every softmax, so trailing padding
//! never changes an embedding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::{NumericsError, ParamId, ParamSet, Tape, Tensor, Var};
use crate::text::PAD_ID;

pub const ATTENTION_HEADS: usize = 2;
const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderVariant {
    AttentionPool,
    TransformerBlock,
}

impl std::fmt::Display for EncoderVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::AttentionPool => "attention_pool",
            Self::TransformerBlock => "transformer_block",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub vocab_size: usize,
    pub variant: EncoderVariant,
    pub max_len: usize,
    pub seed: u64,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), NumericsError> {
        if self.d_model == 0 || !self.d_model.is_multiple_of(ATTENTION_HEADS) {
            return Err(NumericsError::Contract(format!(
                "d_model must be a positive multiple of {ATTENTION_HEADS}, got {}",
                self.d_model
            )));
        }
        if self.vocab_size == 0 || self.max_len == 0 {
            return Err(NumericsError::Contract(
                "vocab_size and max_len must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Uniform in `[-bound, bound]`.
pub(crate) fn uniform<R: Rng>(rng: &mut R, shape: Vec<usize>, bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape, data).expect("uniform: positive extents")
}

#[derive(Clone, Debug)]
struct BlockParams {
    positions: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln1_gain: ParamId,
    ln1_bias: ParamId,
    ff1: ParamId,
    ff1_bias: ParamId,
    ff2: ParamId,
    ff2_bias: ParamId,
    ln2_gain: ParamId,
    ln2_bias: ParamId,
}

#[derive(Clone, Debug)]
enum VariantParams {
    Pool { score: ParamId },
    Block(Box<BlockParams>),
}

/// Handles to the encoder's arrays inside a [`ParamSet`].
#[derive(Clone, Debug)]
pub struct EncoderParams {
    config: EncoderConfig,
    embedding: ParamId,
    variant: VariantParams,
}

impl EncoderParams {
    /// Registers freshly initialised encoder arrays under the `encoder.` prefix.
    pub fn init<R: Rng>(
        config: &EncoderConfig,
        params: &mut ParamSet,
        rng: &mut R,
    ) -> Result<Self, NumericsError> {
        config.validate()?;
        let d = config.d_model;
        let bound = 1.0 / (d as f64).sqrt();
        let embedding = params.register(
            "encoder.embedding",
            uniform(rng, vec![config.vocab_size, d], bound),
            true,
        );
        let variant = match config.variant {
            EncoderVariant::AttentionPool => VariantParams::Pool {
                score: params.register("encoder.pool.score", uniform(rng, vec![d, 1], bound), true),
            },
            EncoderVariant::TransformerBlock => {
                let mut weight = |name: &str, shape: Vec<usize>, params: &mut ParamSet| {
                    params.register(format!("encoder.block.{name}"), uniform(rng, shape, bound), true)
                };
                let positions = weight("positions", vec![config.max_len, d], params);
                let wq = weight("wq", vec![d, d], params);
                let wk = weight("wk", vec![d, d], params);
                let wv = weight("wv", vec![d, d], params);
                let wo = weight("wo", vec![d, d], params);
                let ff1 = weight("ff1", vec![d, 4 * d], params);
                let ff2 = weight("ff2", vec![4 * d, d], params);
                let mut fixed = |name: &str, n: usize, value: f64| {
                    params.register(
                        format!("encoder.block.{name}"),
                        Tensor::new(vec![n], vec![value; n]).expect("positive width"),
                        false,
                    )
                };
                VariantParams::Block(Box::new(BlockParams {
                    positions,
                    wq,
                    bq: fixed("bq", d, 0.0),
                    wk,
                    bk: fixed("bk", d, 0.0),
                    wv,
                    bv: fixed("bv", d, 0.0),
                    wo,
                    bo: fixed("bo", d, 0.0),
                    ln1_gain: fixed("ln1_gain", d, 1.0),
                    ln1_bias: fixed("ln1_bias", d, 0.0),
                    ff1,
                    ff1_bias: fixed("ff1_bias", 4 * d, 0.0),
                    ff2,
                    ff2_bias: fixed("ff2_bias", d, 0.0),
                    ln2_gain: fixed("ln2_gain", d, 1.0),
                    ln2_bias: fixed("ln2_bias", d, 0.0),
                }))
            }
        };
        Ok(Self {
            config: config.clone(),
            embedding,
            variant,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Embeds a batch of id rows into a `[B × d_model]` value.
    ///
    /// Rows may differ in length; trailing PAD columns shared by the whole
    /// batch are dropped before any arithmetic.
    pub fn encode(
        &self,
        params: &ParamSet,
        tape: &mut Tape,
        ids: &[Vec<usize>],
    ) -> Result<Var, NumericsError> {
        let b = ids.len();
        if b == 0 {
            return Err(NumericsError::Contract("encode: empty batch".into()));
        }
        let vocab = self.config.vocab_size;
        if let Some(&bad) = ids.iter().flatten().find(|&&i| i >= vocab) {
            return Err(NumericsError::Index {
                op: "encode",
                index: bad,
                bound: vocab,
            });
        }
        let t = ids
            .iter()
            .map(|row| row.iter().rposition(|&i| i != PAD_ID).map_or(1, |p| p + 1))
            .max()
            .unwrap_or(1);
        let mut flat = Vec::with_capacity(b * t);
        for row in ids {
            flat.extend(row.iter().take(t).copied());
            flat.extend(std::iter::repeat_n(PAD_ID, t.saturating_sub(row.len())));
        }
        let mask: Vec<bool> = flat.iter().map(|&i| i != PAD_ID).collect();
        let d = self.config.d_model;
        let table = tape.param(params, self.embedding);
        let x = tape.gather_rows(table, &flat)?;

        match &self.variant {
            VariantParams::Pool { score } => {
                let w = tape.param(params, *score);
                let s = tape.matmul(x, w)?;
                let s = tape.reshape(s, vec![b, t])?;
                let a = tape.masked_softmax_rows(s, Some(&mask))?;
                let a = tape.reshape(a, vec![b, 1, t])?;
                let x3 = tape.reshape(x, vec![b, t, d])?;
                let pooled = tape.batch_matmul(a, x3)?;
                tape.reshape(pooled, vec![b, d])
            }
            VariantParams::Block(p) => {
                if t > self.config.max_len {
                    return Err(NumericsError::Contract(format!(
                        "encode: sequence length {t} exceeds max_len {}",
                        self.config.max_len
                    )));
                }
                self.block(params, tape, p, x, &mask, b, t)
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn block(
        &self,
        params: &ParamSet,
        tape: &mut Tape,
        p: &BlockParams,
        x: Var,
        mask: &[bool],
        b: usize,
        t: usize,
    ) -> Result<Var, NumericsError> {
        let d = self.config.d_model;
        let dh = d / ATTENTION_HEADS;
        let mut param = |id| tape.param(params, id);
        let (positions, wq, bq, wk, bk, wv, bv, wo, bo) = (
            param(p.positions),
            param(p.wq),
            param(p.bq),
            param(p.wk),
            param(p.bk),
            param(p.wv),
            param(p.bv),
            param(p.wo),
            param(p.bo),
        );
        let (g1, b1, f1, f1b, f2, f2b, g2, b2) = (
            param(p.ln1_gain),
            param(p.ln1_bias),
            param(p.ff1),
            param(p.ff1_bias),
            param(p.ff2),
            param(p.ff2_bias),
            param(p.ln2_gain),
            param(p.ln2_bias),
        );

        let pos_idx: Vec<usize> = (0..b).flat_map(|_| 0..t).collect();
        let pe = tape.gather_rows(positions, &pos_idx)?;
        let h = tape.add(x, pe)?;
        let cls_rows: Vec<usize> = (0..b).map(|i| i * t).collect();
        let h0 = tape.gather_rows(h, &cls_rows)?;

        let linear = |tape: &mut Tape, input: Var, w: Var, bias: Var| -> Result<Var, NumericsError> {
            let m = tape.matmul(input, w)?;
            tape.add_row_bias(m, bias)
        };
        let q = linear(tape, h0, wq, bq)?;
        let k = linear(tape, h, wk, bk)?;
        let v = linear(tape, h, wv, bv)?;

        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(ATTENTION_HEADS);
        for head in 0..ATTENTION_HEADS {
            let (lo, hi) = (head * dh, (head + 1) * dh);
            let qh = tape.slice_cols(q, lo, hi)?;
            let qh = tape.reshape(qh, vec![b, 1, dh])?;
            let kh = tape.slice_cols(k, lo, hi)?;
            let kh = tape.reshape(kh, vec![b, t, dh])?;
            let kt = tape.transpose(kh)?;
            let scores = tape.batch_matmul(qh, kt)?;
            let scores = tape.reshape(scores, vec![b, t])?;
            let scores = tape.scale(scores, scale);
            let attn = tape.masked_softmax_rows(scores, Some(mask))?;
            let attn = tape.reshape(attn, vec![b, 1, t])?;
            let vh = tape.slice_cols(v, lo, hi)?;
            let vh = tape.reshape(vh, vec![b, t, dh])?;
            let ctx = tape.batch_matmul(attn, vh)?;
            heads.push(tape.reshape(ctx, vec![b, dh])?);
        }
        let ctx = tape.concat_cols(&heads)?;
        let attn_out = linear(tape, ctx, wo, bo)?;
        let r1 = tape.add(h0, attn_out)?;
        let n1 = tape.layer_norm(r1, g1, b1, LN_EPS)?;
        let ff = linear(tape, n1, f1, f1b)?;
        let ff = tape.gelu(ff);
        let ff = linear(tape, ff, f2, f2b)?;
        let r2 = tape.add(n1, ff)?;
        tape.layer_norm(r2, g2, b2, LN_EPS)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn setup(variant: EncoderVariant) -> (EncoderParams, ParamSet) {
        let config = EncoderConfig {
            d_model: 8,
            vocab_size: 20,
            variant,
            max_len: 12,
            seed: 3,
        };
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let enc = EncoderParams::init(&config, &mut params, &mut rng).unwrap();
        (enc, params)
    }

    fn embed(enc: &EncoderParams, params: &ParamSet, ids: &[Vec<usize>]) -> Tensor {
        let mut tape = Tape::new();
        let out = enc.encode(params, &mut tape, ids).unwrap();
        tape.value(out).clone()
    }

    const VARIANTS: [EncoderVariant; 2] =
        [EncoderVariant::AttentionPool, EncoderVariant::TransformerBlock];

    #[test]
    fn output_shape() {
        for v in VARIANTS {
            let (enc, params) = setup(v);
            let out = embed(&enc, &params, &[vec![2, 5, 0], vec![2, 0, 0], vec![2, 7, 9]]);
            assert_eq!(out.shape(), &[3, 8]);
        }
    }

    #[test]
    fn single_token_pool_returns_its_row() {
        let (enc, params) = setup(EncoderVariant::AttentionPool);
        let out = embed(&enc, &params, &[vec![7, 0, 0, 0]]);
        let table = params.get(params.find("encoder.embedding").unwrap());
        assert_eq!(out.data(), table.row(7));
    }

    #[test]
    fn pool_ignores_token_order() {
        let (enc, params) = setup(EncoderVariant::AttentionPool);
        let base = embed(&enc, &params, &[vec![4, 9, 13]]);
        let perms = [[4, 13, 9], [9, 4, 13], [9, 13, 4], [13, 4, 9], [13, 9, 4]];
        for p in perms {
            let out = embed(&enc, &params, &[p.to_vec()]);
            for (a, b) in base.data().iter().zip(out.data()) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn trailing_pad_is_inert() {
        for v in VARIANTS {
            let (enc, params) = setup(v);
            let short = embed(&enc, &params, &[vec![2, 5, 6]]);
            let padded = embed(&enc, &params, &[vec![2, 5, 6, 0, 0, 0, 0]]);
            let batched = embed(&enc, &params, &[vec![2, 5, 6], vec![2, 1, 3, 4, 5, 6, 7, 8]]);
            for ((a, b), c) in short.data().iter().zip(padded.data()).zip(batched.row(0)) {
                assert!((a - b).abs() <= 1e-12);
                assert!((a - c).abs() <= 1e-12, "{v}: {a} vs {c}");
            }
        }
    }

    #[test]
    fn id_out_of_range_rejected() {
        let (enc, params) = setup(EncoderVariant::AttentionPool);
        let mut tape = Tape::new();
        assert!(matches!(
            enc.encode(&params, &mut tape, &[vec![2, 20]]),
            Err(NumericsError::Index { index: 20, .. })
        ));
    }

    #[test]
    fn init_is_reproducible() {
        for v in VARIANTS {
            let (_, a) = setup(v);
            let (_, b) = setup(v);
            let bits = |p: &ParamSet| p.flat_values().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a), bits(&b));
        }
    }

    #[test]
    fn odd_width_rejected() {
        let config = EncoderConfig {
            d_model: 7,
            vocab_size: 5,
            variant: EncoderVariant::TransformerBlock,
            max_len: 4,
            seed: 0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(EncoderParams::init(&config, &mut ParamSet::new(), &mut rng).is_err());
    }
}
