//! The full multi-task model: shared encoder, classifier head and regressor
//! head over one parameter set, plus the text featurizer feeding it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, EncoderParams};
use crate::heads::{scale_vad, ClassifierHead, RegressorHead, HIDDEN_WIDTH};
use crate::numerics::{NumericsError, ParamId, ParamSet, Tape, Tensor, Var};
use crate::text::{preprocess, Lexicon, Vocabulary};

const INFERENCE_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub hidden: usize,
    pub n_labels: usize,
    /// Width of the lexicon feature vector (0 disables it).
    pub lexicon_dim: usize,
    /// Whether the regressor head also receives lexicon features.
    pub lexicon_to_regressor: bool,
}

impl ModelConfig {
    pub fn new(encoder: EncoderConfig, n_labels: usize) -> Self {
        Self {
            encoder,
            hidden: HIDDEN_WIDTH,
            n_labels,
            lexicon_dim: 0,
            lexicon_to_regressor: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Component {
    Encoder,
    Classifier,
    Regressor,
}

/// One example after featurization.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoded {
    pub ids: Vec<usize>,
    pub lexicon: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CatExample {
    pub input: Encoded,
    pub labels: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VadExample {
    pub input: Encoded,
    pub target: [f64; 3],
}

/// Turns raw text into encoder ids and optional lexicon features.
#[derive(Clone, Debug, PartialEq)]
pub struct Featurizer {
    pub vocab: Vocabulary,
    pub lexicon: Option<Lexicon>,
    pub max_len: usize,
}

impl Featurizer {
    pub fn encode(&self, text: &str) -> Encoded {
        let tokens = preprocess(text);
        Encoded {
            ids: self.vocab.encode_ids(&tokens, self.max_len),
            lexicon: self.lexicon.as_ref().map(|l| l.features(&tokens)),
        }
    }

    pub fn lexicon_dim(&self) -> usize {
        self.lexicon.as_ref().map_or(0, Lexicon::len)
    }
}

/// Per-example model output.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub probs: Vec<f64>,
    /// Scaled valence, arousal, dominance in `(1, 5)`.
    pub vad: [f64; 3],
}

#[derive(Clone, Debug)]
pub struct AffectModel {
    config: ModelConfig,
    pub params: ParamSet,
    encoder: EncoderParams,
    classifier: ClassifierHead,
    regressor: RegressorHead,
}

impl AffectModel {
    /// Initialises every component from its own RNG stream of the encoder
    /// seed, so each component's draw is independent of the others.
    pub fn new(config: ModelConfig) -> Result<Self, NumericsError> {
        if config.n_labels == 0 || config.hidden == 0 {
            return Err(NumericsError::Contract(
                "n_labels and hidden width must be positive".into(),
            ));
        }
        let stream = |k: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.encoder.seed);
            rng.set_stream(k);
            rng
        };
        let d = config.encoder.d_model;
        let mut params = ParamSet::new();
        let encoder = EncoderParams::init(&config.encoder, &mut params, &mut stream(1))?;
        let classifier = ClassifierHead::init(
            &mut params,
            &mut stream(2),
            d,
            config.hidden,
            config.n_labels,
            config.lexicon_dim,
        );
        let reg_lex = if config.lexicon_to_regressor {
            config.lexicon_dim
        } else {
            0
        };
        let regressor = RegressorHead::init(&mut params, &mut stream(3), d, config.hidden, reg_lex);
        Ok(Self {
            config,
            params,
            encoder,
            classifier,
            regressor,
        })
    }

    /// Rebuilds a model from stored arrays; names and shapes must match the
    /// layout implied by `config` exactly.
    pub fn from_arrays(config: ModelConfig, arrays: Vec<(String, Tensor)>) -> Result<Self, NumericsError> {
        let mut model = Self::new(config)?;
        if arrays.len() != model.params.len() {
            return Err(NumericsError::Contract(format!(
                "expected {} parameter arrays, found {}",
                model.params.len(),
                arrays.len()
            )));
        }
        for (id, (name, tensor)) in model.params.ids().collect::<Vec<_>>().into_iter().zip(arrays) {
            let slot = model.params.param(id);
            if slot.name != name || slot.tensor.shape() != tensor.shape() {
                return Err(NumericsError::Contract(format!(
                    "parameter {name} {:?} does not match expected {} {:?}",
                    tensor.shape(),
                    slot.name,
                    slot.tensor.shape()
                )));
            }
            model.params.get_mut(id).data_mut().copy_from_slice(tensor.data());
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn component(&self, c: Component) -> Vec<ParamId> {
        match c {
            Component::Encoder => {
                let prefix = "encoder.";
                self.params
                    .ids()
                    .filter(|&id| self.params.param(id).name.starts_with(prefix))
                    .collect()
            }
            Component::Classifier => self.classifier.param_ids(),
            Component::Regressor => self.regressor.param_ids(),
        }
    }

    pub fn encode(&self, tape: &mut Tape, inputs: &[&Encoded]) -> Result<Var, NumericsError> {
        let ids: Vec<Vec<usize>> = inputs.iter().map(|e| e.ids.clone()).collect();
        self.encoder.encode(&self.params, tape, &ids)
    }

    fn lexicon_rows(inputs: &[&Encoded], width: usize) -> Result<Option<Vec<Vec<f64>>>, NumericsError> {
        if width == 0 {
            return Ok(None);
        }
        inputs
            .iter()
            .map(|e| {
                e.lexicon
                    .clone()
                    .ok_or_else(|| NumericsError::Contract("example lacks lexicon features".into()))
            })
            .collect::<Result<Vec<_>, _>>()
            .map(Some)
    }

    /// Label probabilities for a batch.
    pub fn classify(&self, tape: &mut Tape, inputs: &[&Encoded]) -> Result<Var, NumericsError> {
        let emb = self.encode(tape, inputs)?;
        self.classify_embedded(tape, emb, inputs)
    }

    pub fn classify_embedded(
        &self,
        tape: &mut Tape,
        emb: Var,
        inputs: &[&Encoded],
    ) -> Result<Var, NumericsError> {
        let lex = Self::lexicon_rows(inputs, self.classifier.lexicon_dim())?;
        self.classifier.forward(&self.params, tape, emb, lex.as_deref())
    }

    /// Scaled VAD predictions for a batch.
    pub fn regress(&self, tape: &mut Tape, inputs: &[&Encoded]) -> Result<Var, NumericsError> {
        let emb = self.encode(tape, inputs)?;
        self.regress_embedded(tape, emb, inputs)
    }

    pub fn regress_embedded(
        &self,
        tape: &mut Tape,
        emb: Var,
        inputs: &[&Encoded],
    ) -> Result<Var, NumericsError> {
        let lex = Self::lexicon_rows(inputs, self.regressor.lexicon_dim())?;
        let raw = self.regressor.forward(&self.params, tape, emb, lex.as_deref())?;
        Ok(scale_vad(tape, raw))
    }

    /// Runs both heads over `inputs` in fixed-size chunks.
    pub fn predict(&self, inputs: &[Encoded]) -> Result<Vec<Prediction>, NumericsError> {
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(INFERENCE_CHUNK) {
            let refs: Vec<&Encoded> = chunk.iter().collect();
            let mut tape = Tape::new();
            let emb = self.encode(&mut tape, &refs)?;
            let probs = self.classify_embedded(&mut tape, emb, &refs)?;
            let vad = self.regress_embedded(&mut tape, emb, &refs)?;
            let (p, v) = (tape.value(probs), tape.value(vad));
            for i in 0..chunk.len() {
                let r = v.row(i);
                out.push(Prediction {
                    probs: p.row(i).to_vec(),
                    vad: [r[0], r[1], r[2]],
                });
            }
        }
        Ok(out)
    }
}
