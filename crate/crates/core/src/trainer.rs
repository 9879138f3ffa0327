//! Mini-batch training: Adam under a cosine schedule, periodic dev
//! evaluation and best-checkpoint retention.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{Dataset, LanguageCode};
use crate::encoder::ImageBank;
use crate::error::{Error, Result};
use crate::eval::{evaluate_language, EvalOptions};
use crate::model::Model;
use crate::objective::{combined_loss, AlignmentSpec, Batch, Routine};
use crate::tensor::{Tape, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    ZeroShot,
    #[default]
    FewShot,
    FullDataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Steps between dev evaluations; defaults to 5 (few-shot) or 300.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_every: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub scenario: Scenario,
    /// Feed target text through translation into the pivot. Defaults to
    /// on for routine-3 alignment and off otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mt_inference: Option<bool>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::few_shot(1e-4)
    }
}

impl TrainConfig {
    /// 40 epochs of batch 10: 200 steps on 50 items.
    pub fn few_shot(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            epochs: 40,
            batch_size: 10,
            eval_every: None,
            seed: 0,
            scenario: Scenario::FewShot,
            mt_inference: None,
        }
    }

    pub fn full_dataset(learning_rate: f64) -> Self {
        Self {
            epochs: 15,
            batch_size: 48,
            scenario: Scenario::FullDataset,
            ..Self::few_shot(learning_rate)
        }
    }

    pub fn eval_interval(&self) -> usize {
        self.eval_every.unwrap_or(match self.scenario {
            Scenario::FullDataset => 300,
            _ => 5,
        })
    }

    pub fn resolve_mt_inference(&self, alignment: &AlignmentSpec) -> bool {
        self.mt_inference
            .unwrap_or(alignment.routine == Some(Routine::TargetToPivot))
    }

    pub fn total_steps(&self, n_train: usize) -> usize {
        self.epochs * n_train.div_ceil(self.batch_size.max(1))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config(format!(
                "train.learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size must be at least 1"));
        }
        if self.eval_every == Some(0) {
            return Err(Error::config("train.eval_every must be at least 1"));
        }
        if self.scenario != Scenario::ZeroShot && self.epochs == 0 {
            return Err(Error::config("train.epochs must be at least 1"));
        }
        Ok(())
    }
}

/// `base_lr · ½(1 + cos(π · step / total_steps))`.
pub fn cosine_lr(base_lr: f64, step: usize, total_steps: usize) -> f64 {
    if total_steps == 0 {
        return base_lr;
    }
    let frac = step.min(total_steps) as f64 / total_steps as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update, no weight decay.
pub fn adam_step(param: &mut [f64], grad: &[f64], state: &mut AdamState, lr: f64) {
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    for i in 0..param.len() {
        let g = grad[i];
        state.m[i] = BETA1 * state.m[i] + (1.0 - BETA1) * g;
        state.v[i] = BETA2 * state.v[i] + (1.0 - BETA2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        param[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config_hash: String,
    pub step: usize,
    pub metric: f64,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, config_hash: &str, step: usize, metric: f64) -> Self {
        Self {
            format_version: CHECKPOINT_VERSION,
            config_hash: config_hash.to_string(),
            step,
            metric,
            tensors: model.trainable_tensors(),
        }
    }

    /// Every encoder and PEFT tensor, for base models that later runs load.
    pub fn full(model: &Model, config_hash: &str, step: usize, metric: f64) -> Self {
        let tensors = model
            .all_slots()
            .into_iter()
            .map(|s| (model.name(s).to_string(), model.tensor(s).clone()))
            .collect();
        Self {
            format_version: CHECKPOINT_VERSION,
            config_hash: config_hash.to_string(),
            step,
            metric,
            tensors,
        }
    }

    pub fn apply(&self, model: &mut Model) -> Result<()> {
        if self.format_version != CHECKPOINT_VERSION {
            return Err(Error::config(format!(
                "checkpoint format {} is not supported (expected {CHECKPOINT_VERSION})",
                self.format_version
            )));
        }
        model.load_tensors(&self.tensors)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)? + "\n")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Hex SHA-256 of the JSON rendering of `value`.
pub fn fingerprint<T: Serialize + ?Sized>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config serializes");
    Sha256::digest(&json).iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub lr: f64,
    pub loss: Option<f64>,
    pub retrieval_loss: Option<f64>,
    pub alignment_loss: Option<f64>,
    pub dev_r1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Trace {
    pub rows: Vec<TraceRow>,
}

impl Trace {
    /// Loss of every optimizer step, in order.
    pub fn losses(&self) -> Vec<f64> {
        self.rows.iter().filter_map(|r| r.loss).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,lr,loss,retrieval_loss,alignment_loss,dev_r1\n");
        let f = |v: Option<f64>| v.map(|v| format!("{v:.10e}")).unwrap_or_default();
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{:.6e},{},{},{},{}",
                r.step,
                r.lr,
                f(r.loss),
                f(r.retrieval_loss),
                f(r.alignment_loss),
                r.dev_r1.map(|v| format!("{v:.4}")).unwrap_or_default()
            );
        }
        out
    }
}

/// What a training run sees of the data.
pub struct TrainData<'a> {
    pub data: &'a Dataset,
    pub bank: &'a ImageBank,
    pub train: &'a [usize],
    pub dev: &'a [usize],
    pub languages: &'a [LanguageCode],
    /// Applies prompts to a sequence written in the given language.
    pub prepare: &'a (dyn Fn(&[u32], &LanguageCode) -> Result<Vec<u32>> + Sync),
}

pub struct TrainOutcome {
    /// The model with the best checkpoint's tensors loaded.
    pub model: Model,
    pub best: Checkpoint,
    pub trace: Trace,
    pub steps: usize,
}

fn dev_metric(model: &Model, input: &TrainData<'_>, mt_inference: bool) -> Result<f64> {
    if input.dev.is_empty() {
        return Ok(0.0);
    }
    let opts = EvalOptions {
        mt_inference,
        ..EvalOptions::default()
    };
    let mut sum = 0.0;
    for lang in input.languages {
        sum += evaluate_language(model, input.data, input.bank, input.dev, lang, &opts, input.prepare)?;
    }
    Ok(sum / input.languages.len() as f64)
}

/// Trains `model` on `input` and returns the best model by dev Recall@1,
/// evaluated before the first step, every `eval_every` steps and after the
/// last. Ties keep the earliest step.
pub fn train(
    config: &TrainConfig,
    alignment: &AlignmentSpec,
    input: &TrainData<'_>,
    mut model: Model,
) -> Result<TrainOutcome> {
    config.validate()?;
    alignment.validate()?;
    if config.scenario == Scenario::ZeroShot {
        return Err(Error::NoTraining);
    }
    if input.train.is_empty() {
        return Err(Error::EmptyDataset("training split is empty".into()));
    }
    if input.languages.is_empty() {
        return Err(Error::config("no training languages"));
    }
    let mt_inference = config.resolve_mt_inference(alignment);
    let config_hash = fingerprint(&(
        config,
        alignment,
        model.spec(),
        model.encoder().config(),
        input.languages,
    ));
    let initial = model.clone();
    let slots = model.trainable().to_vec();
    let mut states: Vec<AdamState> = slots.iter().map(|&s| AdamState::new(model.tensor(s).numel())).collect();

    let total = config.total_steps(input.train.len());
    let every = config.eval_interval();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut trace = Trace::default();

    let metric = dev_metric(&model, input, mt_inference)?;
    let mut best = Checkpoint::from_model(&model, &config_hash, 0, metric);
    let mut last_metric = metric;
    // Weights whose training loss was last seen finite.
    let mut last_good = best.clone();
    trace.rows.push(TraceRow {
        step: 0,
        lr: cosine_lr(config.learning_rate, 0, total),
        loss: None,
        retrieval_loss: None,
        alignment_loss: None,
        dev_r1: Some(metric),
    });

    let mut order: Vec<usize> = input.train.to_vec();
    let mut step = 0;
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let lr = cosine_lr(config.learning_rate, step, total);
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, true);
            let mut total_loss = None;
            let (mut retrieval, mut align, mut any_align) = (0.0, 0.0, false);
            for lang in input.languages {
                let batch = Batch::build(input.data, input.bank, chunk, lang, input.prepare)?;
                // The initial weights already ran this forward pass at the step-0
                // dev evaluation, so a bad value now comes from the updates.
                let parts = match combined_loss(&mut tape, &model, &bound, &batch, alignment, mt_inference) {
                    Err(e @ (Error::InvalidValue { .. } | Error::DegenerateVector { .. })) if step > 0 => {
                        return Err(Error::Diverged {
                            step: step + 1,
                            detail: e.to_string(),
                            checkpoint: Box::new(last_good),
                        });
                    }
                    r => r?,
                };
                retrieval += parts.retrieval;
                if let Some(a) = parts.alignment {
                    align += a;
                    any_align = true;
                }
                total_loss = Some(match total_loss {
                    Some(prev) => tape.add(prev, parts.total)?,
                    None => parts.total,
                });
            }
            let loss_var = total_loss.expect("at least one language");
            let loss = tape.value(loss_var).data()[0];
            step += 1;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    step,
                    detail: format!("loss is {loss}"),
                    checkpoint: Box::new(last_good),
                });
            }
            let grads = tape.backward(loss_var)?;
            last_good = Checkpoint::from_model(&model, &config_hash, step - 1, last_metric);
            for (k, &slot) in slots.iter().enumerate() {
                let Some(g) = grads.get_slice(bound.var(slot)) else {
                    continue;
                };
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite {
                        name: format!("gradient of {}", model.name(slot)),
                        step,
                    });
                }
                adam_step(model.tensor_mut(slot).data_mut(), g, &mut states[k], lr);
                if model.tensor(slot).data().iter().any(|v| !v.is_finite()) {
                    return Err(Error::Diverged {
                        step,
                        detail: format!("update made {} non-finite", model.name(slot)),
                        checkpoint: Box::new(last_good),
                    });
                }
            }
            let dev = if step % every == 0 || step == total {
                let m = dev_metric(&model, input, mt_inference)?;
                last_metric = m;
                if m > best.metric {
                    best = Checkpoint::from_model(&model, &config_hash, step, m);
                }
                Some(m)
            } else {
                None
            };
            trace.rows.push(TraceRow {
                step,
                lr,
                loss: Some(loss),
                retrieval_loss: Some(retrieval),
                alignment_loss: any_align.then_some(align),
                dev_r1: dev,
            });
        }
    }

    check_frozen(&initial, &model)?;
    best.apply(&mut model)?;
    Ok(TrainOutcome {
        model,
        best,
        trace,
        steps: step,
    })
}

/// Non-trainable tensors must be bitwise unchanged.
fn check_frozen(initial: &Model, trained: &Model) -> Result<()> {
    for slot in initial.all_slots() {
        if initial.trainable().contains(&slot) {
            continue;
        }
        if !initial.tensor(slot).bitwise_eq(trained.tensor(slot)) {
            return Err(Error::InvalidValue {
                op: "train",
                detail: format!("frozen parameter {} changed", initial.name(slot)),
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_points() {
        assert_eq!(cosine_lr(0.1, 0, 200), 0.1);
        assert!(cosine_lr(0.1, 200, 200).abs() < 1e-18);
        assert!((cosine_lr(0.1, 100, 200) - 0.05).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let mut p = vec![1.0, 1.0, 1.0];
        let g = vec![3.0, -0.5, 0.0];
        let mut s = AdamState::new(3);
        adam_step(&mut p, &g, &mut s, 0.01);
        assert!((p[0] - 0.99).abs() < 1e-9);
        assert!((p[1] - 1.01).abs() < 1e-9);
        assert_eq!(p[2], 1.0);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![0.25; 4];
        let mut s = AdamState::new(4);
        for _ in 0..3 {
            adam_step(&mut p, &[0.0; 4], &mut s, 0.1);
        }
        assert_eq!(p, vec![0.25; 4]);
    }

    #[test]
    fn few_shot_step_count() {
        let c = TrainConfig::few_shot(1e-4);
        assert_eq!(c.total_steps(50), 200);
        assert_eq!(c.eval_interval(), 5);
        assert_eq!(TrainConfig::full_dataset(1e-5).eval_interval(), 300);
        // last partial batch kept
        assert_eq!(c.total_steps(51), 240);
    }

    #[test]
    fn fingerprint_is_stable_hex() {
        let a = fingerprint(&TrainConfig::default());
        assert_eq!(a.len(), 64);
        assert_eq!(a, fingerprint(&TrainConfig::default()));
        assert_ne!(a, fingerprint(&TrainConfig::few_shot(1e-3)));
    }
}
