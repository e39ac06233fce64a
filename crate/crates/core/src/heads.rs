//! Classifier and regressor heads plus the task losses and their weighted
//! combination.

use rand::Rng;

use crate::encoder::uniform;
use crate::numerics::{NumericsError, ParamId, ParamSet, Tape, Tensor, Var};

pub const HIDDEN_WIDTH: usize = 256;
pub const VAD_DIMS: usize = 3;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Lower and upper end of the gold VAD scale.
pub const VAD_MIN: f64 = 1.0;
pub const VAD_MAX: f64 = 5.0;

#[derive(Clone, Debug)]
struct TwoLayer {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    extra_dim: usize,
}

impl TwoLayer {
    #[allow(clippy::too_many_arguments)]
    fn init<R: Rng>(
        prefix: &str,
        params: &mut ParamSet,
        rng: &mut R,
        d_model: usize,
        hidden: usize,
        extra_dim: usize,
        outputs: usize,
    ) -> Self {
        let w1 = params.register(
            format!("{prefix}.w1"),
            uniform(rng, vec![d_model, hidden], 1.0 / (d_model as f64).sqrt()),
            true,
        );
        let b1 = params.register(format!("{prefix}.b1"), Tensor::zeros(vec![hidden]), false);
        let fan_in = hidden + extra_dim;
        let w2 = params.register(
            format!("{prefix}.w2"),
            uniform(rng, vec![fan_in, outputs], 1.0 / (fan_in as f64).sqrt()),
            true,
        );
        let b2 = params.register(format!("{prefix}.b2"), Tensor::zeros(vec![outputs]), false);
        Self {
            w1,
            b1,
            w2,
            b2,
            extra_dim,
        }
    }

    /// `concat(tanh(x·W1 + b1), extra)·W2 + b2`
    fn logits(
        &self,
        params: &ParamSet,
        tape: &mut Tape,
        x: Var,
        extra: Option<&[Vec<f64>]>,
    ) -> Result<Var, NumericsError> {
        let batch = tape.shape(x)[0];
        let (w1, b1, w2, b2) = (
            tape.param(params, self.w1),
            tape.param(params, self.b1),
            tape.param(params, self.w2),
            tape.param(params, self.b2),
        );
        let h = tape.matmul(x, w1)?;
        let h = tape.add_row_bias(h, b1)?;
        let mut h = tape.tanh(h);
        match extra {
            Some(rows) if self.extra_dim > 0 => {
                if rows.len() != batch || rows.iter().any(|r| r.len() != self.extra_dim) {
                    return Err(NumericsError::Contract(format!(
                        "lexicon features must be {batch} rows of width {}",
                        self.extra_dim
                    )));
                }
                let lex = tape.constant(Tensor::from_rows(rows)?);
                h = tape.concat_cols(&[h, lex])?;
            }
            None if self.extra_dim == 0 => {}
            Some(_) => {
                return Err(NumericsError::Contract(
                    "lexicon features given to a head built without them".into(),
                ))
            }
            None => {
                return Err(NumericsError::Contract(format!(
                    "head expects {} lexicon features per example",
                    self.extra_dim
                )))
            }
        }
        let z = tape.matmul(h, w2)?;
        tape.add_row_bias(z, b2)
    }

    fn ids(&self) -> Vec<ParamId> {
        vec![self.w1, self.b1, self.w2, self.b2]
    }
}

/// Multi-label emotion head: one sigmoid output per label.
#[derive(Clone, Debug)]
pub struct ClassifierHead {
    layers: TwoLayer,
    n_labels: usize,
}

impl ClassifierHead {
    pub fn init<R: Rng>(
        params: &mut ParamSet,
        rng: &mut R,
        d_model: usize,
        hidden: usize,
        n_labels: usize,
        lexicon_dim: usize,
    ) -> Self {
        Self {
            layers: TwoLayer::init("classifier", params, rng, d_model, hidden, lexicon_dim, n_labels),
            n_labels,
        }
    }

    pub fn n_labels(&self) -> usize {
        self.n_labels
    }

    pub fn lexicon_dim(&self) -> usize {
        self.layers.extra_dim
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.ids()
    }

    /// Label probabilities `[B × n_labels]`, each strictly inside `(0, 1)`.
    pub fn forward(
        &self,
        params: &ParamSet,
        tape: &mut Tape,
        emb: Var,
        lexicon: Option<&[Vec<f64>]>,
    ) -> Result<Var, NumericsError> {
        let z = self.layers.logits(params, tape, emb, lexicon)?;
        Ok(tape.sigmoid(z))
    }
}

/// Valence/arousal/dominance head with sigmoid outputs in `(0, 1)`.
#[derive(Clone, Debug)]
pub struct RegressorHead {
    layers: TwoLayer,
}

impl RegressorHead {
    pub fn init<R: Rng>(
        params: &mut ParamSet,
        rng: &mut R,
        d_model: usize,
        hidden: usize,
        lexicon_dim: usize,
    ) -> Self {
        Self {
            layers: TwoLayer::init("regressor", params, rng, d_model, hidden, lexicon_dim, VAD_DIMS),
        }
    }

    pub fn lexicon_dim(&self) -> usize {
        self.layers.extra_dim
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.ids()
    }

    /// Raw `[B × 3]` outputs before scaling.
    pub fn forward(
        &self,
        params: &ParamSet,
        tape: &mut Tape,
        emb: Var,
        lexicon: Option<&[Vec<f64>]>,
    ) -> Result<Var, NumericsError> {
        let z = self.layers.logits(params, tape, emb, lexicon)?;
        Ok(tape.sigmoid(z))
    }
}

/// Active iff probability ≥ threshold.
pub fn predict_labels(probs: &[Vec<f64>], threshold: f64) -> Vec<Vec<u8>> {
    probs
        .iter()
        .map(|row| row.iter().map(|&p| u8::from(p >= threshold)).collect())
        .collect()
}

/// Maps sigmoid outputs onto the 1–5 VAD scale.
pub fn scale_vad(tape: &mut Tape, raw: Var) -> Var {
    tape.affine(raw, VAD_MAX - VAD_MIN, VAD_MIN)
}

pub fn scale_vad_value(raw: f64) -> f64 {
    (VAD_MAX - VAD_MIN) * raw + VAD_MIN
}

/// Mean binary cross-entropy over every label slot.
pub fn ec_loss(tape: &mut Tape, probs: Var, labels: &[Vec<u8>]) -> Result<Var, NumericsError> {
    let shape = tape.shape(probs).to_vec();
    let cols = shape.get(1).copied().unwrap_or(0);
    if shape.len() != 2 || labels.len() != shape[0] || labels.iter().any(|r| r.len() != cols) {
        return Err(NumericsError::Shape {
            op: "ec_loss",
            left: shape,
            right: vec![labels.len(), labels.first().map_or(0, Vec::len)],
        });
    }
    let targets: Vec<f64> = labels.iter().flatten().map(|&y| f64::from(y)).collect();
    tape.bce_mean(probs, &targets)
}

/// Mean squared error over all three dimensions of every example.
pub fn vadr_loss(tape: &mut Tape, pred: Var, gold: &[[f64; 3]]) -> Result<Var, NumericsError> {
    let shape = tape.shape(pred).to_vec();
    if shape != [gold.len(), VAD_DIMS] {
        return Err(NumericsError::Shape {
            op: "vadr_loss",
            left: shape,
            right: vec![gold.len(), VAD_DIMS],
        });
    }
    if let Some(bad) = gold
        .iter()
        .flatten()
        .find(|v| !(VAD_MIN..=VAD_MAX).contains(*v))
    {
        return Err(NumericsError::Contract(format!(
            "gold VAD score {bad} outside [{VAD_MIN}, {VAD_MAX}]"
        )));
    }
    let targets: Vec<f64> = gold.iter().flatten().copied().collect();
    tape.mse_mean(pred, &targets)
}

/// `λ·ec + (1 − λ)·vadr`
pub fn vadec_loss(tape: &mut Tape, ec: Var, vadr: Var, lambda: f64) -> Result<Var, NumericsError> {
    check_lambda(lambda)?;
    tape.combine(&[(ec, lambda), (vadr, 1.0 - lambda)])
}

pub fn check_lambda(lambda: f64) -> Result<(), NumericsError> {
    if (0.0..=1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(NumericsError::Contract(format!(
            "lambda must lie in [0, 1], got {lambda}"
        )))
    }
}
