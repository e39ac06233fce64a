//! AdamW and the multi-task training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::heads::{check_lambda, ec_loss, predict_labels, vadr_loss, DEFAULT_THRESHOLD};
use crate::metrics::{self, MetricsReport};
use crate::model::{AffectModel, CatExample, Encoded, VadExample};
use crate::numerics::{NumericsError, ParamSet, Tape, Var};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("non-finite loss {loss} at epoch {epoch}, step {step}")]
    NonFinite { epoch: usize, step: usize, loss: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleMode {
    Paired,
    Interleaved,
}

impl std::fmt::Display for ScheduleMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ScheduleMode::Paired => "paired",
            ScheduleMode::Interleaved => "interleaved",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub schedule: ScheduleMode,
    pub retrain_on_train_plus_val: bool,
    /// Global gradient-norm clip; off when `None`.
    pub clip_grad_norm: Option<f64>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-5,
            weight_decay: 0.01,
            lambda: 0.5,
            epochs: 5,
            batch_size: 32,
            seed: 0,
            schedule: ScheduleMode::Paired,
            retrain_on_train_plus_val: false,
            clip_grad_norm: None,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(TrainError::Config(format!("weight decay {} must be non-negative", self.weight_decay)));
        }
        check_lambda(self.lambda).map_err(|e| TrainError::Config(e.to_string()))?;
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch size must be positive".into()));
        }
        if let Some(c) = self.clip_grad_norm {
            if !(c > 0.0 && c.is_finite()) {
                return Err(TrainError::Config(format!("clip norm {c} must be positive")));
            }
        }
        Ok(())
    }
}

/// First and second moments per parameter, in `ParamSet` order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamWState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.tensor.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One AdamW update from the gradients held in `params`. Decoupled decay
/// applies only to parameters registered with `decay = true`.
pub fn adamw_step(
    params: &mut ParamSet,
    state: &mut AdamWState,
    learning_rate: f64,
    weight_decay: f64,
) -> Result<(), NumericsError> {
    if state.m.len() != params.len() {
        return Err(NumericsError::Contract(format!(
            "optimizer state covers {} parameters, model has {}",
            state.m.len(),
            params.len()
        )));
    }
    if let Some(p) = params.iter().find(|p| p.tensor.grad().is_none()) {
        return Err(NumericsError::Contract(format!("missing gradient for {}", p.name)));
    }
    state.t += 1;
    let t = i32::try_from(state.t).unwrap_or(i32::MAX);
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let wd = if p.decay { weight_decay } else { 0.0 };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let (theta, grad) = p.tensor.values_and_grad();
        let grad = grad.expect("checked above");
        for k in 0..theta.len() {
            let g = grad[k];
            m[k] = BETA1 * m[k] + (1.0 - BETA1) * g;
            v[k] = BETA2 * v[k] + (1.0 - BETA2) * g * g;
            let mh = m[k] / c1;
            let vh = v[k] / c2;
            theta[k] -= learning_rate * (mh / (vh.sqrt() + ADAM_EPS) + wd * theta[k]);
        }
    }
    Ok(())
}

fn clip_gradients(params: &mut ParamSet, max_norm: f64) -> Result<(), NumericsError> {
    let norm = params.flat_grads().iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for p in params.iter_mut() {
            let scaled: Vec<f64> = p.tensor.grad().unwrap_or(&[]).iter().map(|g| g * (s - 1.0)).collect();
            if !scaled.is_empty() {
                p.tensor.accumulate_grad(&scaled)?;
            }
        }
    }
    Ok(())
}

/// Indices into the categorical and/or VAD datasets for one optimizer step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Step {
    pub cat: Option<Vec<usize>>,
    pub vad: Option<Vec<usize>>,
}

/// Produces per-epoch step lists. Each dataset shuffles from its own RNG
/// stream, so a dataset's batch order does not depend on the other one.
#[derive(Clone, Debug)]
pub struct Scheduler {
    mode: ScheduleMode,
    batch_size: usize,
    n_cat: usize,
    n_vad: usize,
    cat_rng: ChaCha8Rng,
    vad_rng: ChaCha8Rng,
    mix_rng: ChaCha8Rng,
}

fn stream(seed: u64, k: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k);
    rng
}

fn shuffled_batches(rng: &mut ChaCha8Rng, n: usize, batch: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch).map(<[usize]>::to_vec).collect()
}

/// `count` batches, reshuffling each time the dataset is exhausted.
fn cycled_batches(rng: &mut ChaCha8Rng, n: usize, batch: usize, count: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        out.extend(shuffled_batches(rng, n, batch));
    }
    out.truncate(count);
    out
}

impl Scheduler {
    /// A size of zero means that task is absent; steps then carry only the
    /// other kind of batch.
    pub fn new(n_cat: usize, n_vad: usize, batch_size: usize, mode: ScheduleMode, seed: u64) -> Result<Self, TrainError> {
        if n_cat == 0 && n_vad == 0 {
            return Err(TrainError::Config("both datasets are empty".into()));
        }
        if batch_size == 0 {
            return Err(TrainError::Config("batch size must be positive".into()));
        }
        Ok(Self {
            mode,
            batch_size,
            n_cat,
            n_vad,
            cat_rng: stream(seed, 10),
            vad_rng: stream(seed, 11),
            mix_rng: stream(seed, 12),
        })
    }

    pub fn next_epoch(&mut self) -> Vec<Step> {
        let b = self.batch_size;
        if self.n_vad == 0 {
            return shuffled_batches(&mut self.cat_rng, self.n_cat, b)
                .into_iter()
                .map(|c| Step { cat: Some(c), vad: None })
                .collect();
        }
        if self.n_cat == 0 {
            return shuffled_batches(&mut self.vad_rng, self.n_vad, b)
                .into_iter()
                .map(|v| Step { cat: None, vad: Some(v) })
                .collect();
        }
        match self.mode {
            ScheduleMode::Paired => {
                let steps = self.n_cat.max(self.n_vad).div_ceil(b);
                let cat = cycled_batches(&mut self.cat_rng, self.n_cat, b, steps);
                let vad = cycled_batches(&mut self.vad_rng, self.n_vad, b, steps);
                cat.into_iter()
                    .zip(vad)
                    .map(|(c, v)| Step { cat: Some(c), vad: Some(v) })
                    .collect()
            }
            ScheduleMode::Interleaved => {
                let mut steps: Vec<Step> = shuffled_batches(&mut self.cat_rng, self.n_cat, b)
                    .into_iter()
                    .map(|c| Step { cat: Some(c), vad: None })
                    .chain(
                        shuffled_batches(&mut self.vad_rng, self.n_vad, b)
                            .into_iter()
                            .map(|v| Step { cat: None, vad: Some(v) }),
                    )
                    .collect();
                steps.shuffle(&mut self.mix_rng);
                steps
            }
        }
    }
}

/// First epoch's schedule.
pub fn make_schedule(
    n_cat: usize,
    n_vad: usize,
    batch_size: usize,
    mode: ScheduleMode,
    seed: u64,
) -> Result<Vec<Step>, TrainError> {
    Ok(Scheduler::new(n_cat, n_vad, batch_size, mode, seed)?.next_epoch())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub ec_loss: Option<f64>,
    pub vadr_loss: Option<f64>,
    pub joint_loss: f64,
    pub val_joint_loss: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    /// Epoch (1-based) whose parameters were kept, when validation data
    /// drove model selection.
    pub selected_epoch: Option<usize>,
}

impl History {
    /// `epoch,ec_loss,vadr_loss,joint_loss`; a task's column is dropped when
    /// that task took no part in training.
    pub fn to_csv(&self) -> String {
        let has_ec = self.epochs.iter().any(|r| r.ec_loss.is_some());
        let has_vad = self.epochs.iter().any(|r| r.vadr_loss.is_some());
        let mut head = vec!["epoch"];
        if has_ec {
            head.push("ec_loss");
        }
        if has_vad {
            head.push("vadr_loss");
        }
        head.push("joint_loss");
        let mut out = head.join(",") + "\n";
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.epochs {
            let mut row = vec![r.epoch.to_string()];
            if has_ec {
                row.push(opt(r.ec_loss));
            }
            if has_vad {
                row.push(opt(r.vadr_loss));
            }
            row.push(r.joint_loss.to_string());
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// Training and validation splits for both tasks. Either task may be empty
/// for a single-task run.
#[derive(Clone, Copy, Debug, Default)]
pub struct TrainingData<'a> {
    pub cat: &'a [CatExample],
    pub vad: &'a [VadExample],
    pub cat_val: &'a [CatExample],
    pub vad_val: &'a [VadExample],
}

/// Loss weights actually used: a single-task run puts full weight on its
/// only term.
fn weights(has_cat: bool, has_vad: bool, lambda: f64) -> (f64, f64) {
    match (has_cat, has_vad) {
        (true, false) => (1.0, 0.0),
        (false, true) => (0.0, 1.0),
        _ => (lambda, 1.0 - lambda),
    }
}

struct StepLosses {
    ec: Option<f64>,
    vadr: Option<f64>,
    joint: f64,
}

fn forward_step(
    model: &AffectModel,
    tape: &mut Tape,
    cat: Option<&[&CatExample]>,
    vad: Option<&[&VadExample]>,
    w: (f64, f64),
) -> Result<(Var, Option<Var>, Option<Var>), NumericsError> {
    let mut terms = Vec::with_capacity(2);
    let ec = match cat {
        Some(batch) => {
            let inputs: Vec<&Encoded> = batch.iter().map(|e| &e.input).collect();
            let labels: Vec<Vec<u8>> = batch.iter().map(|e| e.labels.clone()).collect();
            let probs = model.classify(tape, &inputs)?;
            let l = ec_loss(tape, probs, &labels)?;
            terms.push((l, w.0));
            Some(l)
        }
        None => None,
    };
    let vadr = match vad {
        Some(batch) => {
            let inputs: Vec<&Encoded> = batch.iter().map(|e| &e.input).collect();
            let gold: Vec<[f64; 3]> = batch.iter().map(|e| e.target).collect();
            let pred = model.regress(tape, &inputs)?;
            let l = vadr_loss(tape, pred, &gold)?;
            terms.push((l, w.1));
            Some(l)
        }
        None => None,
    };
    let joint = tape.combine(&terms)?;
    Ok((joint, ec, vadr))
}

/// Mean losses over whole datasets without updating anything.
pub fn dataset_losses(
    model: &AffectModel,
    cat: &[CatExample],
    vad: &[VadExample],
    lambda: f64,
    batch_size: usize,
) -> Result<(Option<f64>, Option<f64>, f64), TrainError> {
    let mean = |f: &mut dyn FnMut(usize, usize) -> Result<f64, NumericsError>, n: usize| -> Result<Option<f64>, NumericsError> {
        if n == 0 {
            return Ok(None);
        }
        let mut total = 0.0;
        for start in (0..n).step_by(batch_size.max(1)) {
            let end = (start + batch_size.max(1)).min(n);
            total += f(start, end)? * (end - start) as f64;
        }
        Ok(Some(total / n as f64))
    };
    let ec = mean(
        &mut |s, e| {
            let mut tape = Tape::new();
            let inputs: Vec<&Encoded> = cat[s..e].iter().map(|x| &x.input).collect();
            let labels: Vec<Vec<u8>> = cat[s..e].iter().map(|x| x.labels.clone()).collect();
            let probs = model.classify(&mut tape, &inputs)?;
            let l = ec_loss(&mut tape, probs, &labels)?;
            Ok(tape.value(l).data()[0])
        },
        cat.len(),
    )?;
    let vadr = mean(
        &mut |s, e| {
            let mut tape = Tape::new();
            let inputs: Vec<&Encoded> = vad[s..e].iter().map(|x| &x.input).collect();
            let gold: Vec<[f64; 3]> = vad[s..e].iter().map(|x| x.target).collect();
            let pred = model.regress(&mut tape, &inputs)?;
            let l = vadr_loss(&mut tape, pred, &gold)?;
            Ok(tape.value(l).data()[0])
        },
        vad.len(),
    )?;
    let (wc, wv) = weights(ec.is_some(), vadr.is_some(), lambda);
    let joint = wc * ec.unwrap_or(0.0) + wv * vadr.unwrap_or(0.0);
    Ok((ec, vadr, joint))
}

/// Runs `config.epochs` epochs of the schedule over `data`, updating
/// `model` in place.
///
/// With validation data and no retraining, the parameters with the lowest
/// validation joint loss are kept at the end.
pub fn train(model: &mut AffectModel, data: TrainingData<'_>, config: &TrainingConfig) -> Result<History, TrainError> {
    config.validate()?;
    let (cat_owned, vad_owned);
    let (cat, vad): (&[CatExample], &[VadExample]) = if config.retrain_on_train_plus_val {
        cat_owned = [data.cat, data.cat_val].concat();
        vad_owned = [data.vad, data.vad_val].concat();
        (&cat_owned, &vad_owned)
    } else {
        (data.cat, data.vad)
    };
    let select = !config.retrain_on_train_plus_val && (!data.cat_val.is_empty() || !data.vad_val.is_empty());

    let mut history = History::default();
    if config.epochs == 0 {
        return Ok(history);
    }
    let mut scheduler = Scheduler::new(cat.len(), vad.len(), config.batch_size, config.schedule, config.seed)?;
    let w = weights(!cat.is_empty(), !vad.is_empty(), config.lambda);
    let mut state = AdamWState::new(&model.params);
    let mut best: Option<(f64, usize, Vec<f64>)> = None;

    for epoch in 1..=config.epochs {
        let steps = scheduler.next_epoch();
        let (mut ec_sum, mut ec_n, mut vad_sum, mut vad_n, mut joint_sum) = (0.0, 0usize, 0.0, 0usize, 0.0);
        for (k, step) in steps.iter().enumerate() {
            let losses = train_step(model, &mut state, cat, vad, step, w, config).map_err(|e| match e {
                TrainError::NonFinite { loss, .. } => TrainError::NonFinite { epoch, step: k + 1, loss },
                other => other,
            })?;
            if let Some(l) = losses.ec {
                ec_sum += l;
                ec_n += 1;
            }
            if let Some(l) = losses.vadr {
                vad_sum += l;
                vad_n += 1;
            }
            joint_sum += losses.joint;
        }
        let val_joint_loss = if select {
            let (_, _, j) = dataset_losses(model, data.cat_val, data.vad_val, config.lambda, config.batch_size)?;
            if best.as_ref().is_none_or(|(b, _, _)| j < *b) {
                best = Some((j, epoch, model.params.flat_values()));
            }
            Some(j)
        } else {
            None
        };
        history.epochs.push(EpochRecord {
            epoch,
            ec_loss: (ec_n > 0).then(|| ec_sum / ec_n as f64),
            vadr_loss: (vad_n > 0).then(|| vad_sum / vad_n as f64),
            joint_loss: joint_sum / steps.len() as f64,
            val_joint_loss,
        });
    }
    if let Some((_, epoch, values)) = best {
        model.params.set_flat_values(&values)?;
        history.selected_epoch = Some(epoch);
    }
    Ok(history)
}

fn train_step(
    model: &mut AffectModel,
    state: &mut AdamWState,
    cat: &[CatExample],
    vad: &[VadExample],
    step: &Step,
    w: (f64, f64),
    config: &TrainingConfig,
) -> Result<StepLosses, TrainError> {
    let cat_batch: Option<Vec<&CatExample>> = step.cat.as_ref().map(|ix| ix.iter().map(|&i| &cat[i]).collect());
    let vad_batch: Option<Vec<&VadExample>> = step.vad.as_ref().map(|ix| ix.iter().map(|&i| &vad[i]).collect());
    let mut tape = Tape::new();
    let (joint, ec, vadr) = forward_step(model, &mut tape, cat_batch.as_deref(), vad_batch.as_deref(), w)?;
    let value = |v: Var| tape.value(v).data()[0];
    let losses = StepLosses {
        ec: ec.map(value),
        vadr: vadr.map(value),
        joint: value(joint),
    };
    if !losses.joint.is_finite() {
        return Err(TrainError::NonFinite { epoch: 0, step: 0, loss: losses.joint });
    }
    model.params.zero_grads();
    tape.backward_into(joint, &mut model.params)?;
    if let Some(c) = config.clip_grad_norm {
        clip_gradients(&mut model.params, c)?;
    }
    adamw_step(&mut model.params, state, config.learning_rate, config.weight_decay)?;
    Ok(losses)
}

/// Metrics on whichever test sets are non-empty; metrics undefined on the
/// data are left absent.
pub fn evaluate(model: &AffectModel, cat: &[CatExample], vad: &[VadExample]) -> Result<MetricsReport, NumericsError> {
    let mut report = MetricsReport::default();
    if !cat.is_empty() {
        let inputs: Vec<Encoded> = cat.iter().map(|e| e.input.clone()).collect();
        let probs: Vec<Vec<f64>> = model.predict(&inputs)?.into_iter().map(|p| p.probs).collect();
        let gold: Vec<Vec<u8>> = cat.iter().map(|e| e.labels.clone()).collect();
        let pred = predict_labels(&probs, DEFAULT_THRESHOLD);
        report.jaccard_accuracy = metrics::jaccard_accuracy(&gold, &pred).ok();
        if let Ok((ma, mi)) = metrics::f1_scores(&gold, &pred) {
            report.f1_macro = Some(ma);
            report.f1_micro = Some(mi);
        }
        report.lrap = metrics::lrap(&gold, &probs).ok();
        if let Ok((h, w)) = metrics::hamming_and_weak_accuracy(&gold, &pred) {
            report.hamming_loss = Some(h);
            report.weak_accuracy = Some(w);
        }
    }
    if !vad.is_empty() {
        let inputs: Vec<Encoded> = vad.iter().map(|e| e.input.clone()).collect();
        let preds = model.predict(&inputs)?;
        let r = |d: usize| {
            let x: Vec<f64> = preds.iter().map(|p| p.vad[d]).collect();
            let y: Vec<f64> = vad.iter().map(|e| e.target[d]).collect();
            metrics::pearson_r(&x, &y).ok()
        };
        report.pearson_v = r(0);
        report.pearson_a = r(1);
        report.pearson_d = r(2);
    }
    Ok(report)
}
