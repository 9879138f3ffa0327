//! Parameter-efficient fine-tuning modules and their injection points.
//!
//! Every variant starts at its neutral point: adapter and Compacter
//! up-projections are zero, LoRA's `W_B` is zero. Until the first optimizer
//! step an encoder with any of them attached computes exactly what the bare
//! encoder computes.
//!
//! Injection points:
//! - adapter / Compacter: on the output of every attention and feed-forward
//!   sublayer, before the residual add (`O = x + f(x W_down) W_up`);
//! - LoRA: on the query and/or value projections (`O = xW + x W_A W_B`);
//! - soft prompt: trainable rows inserted after `CLS`, ahead of the tokens;
//! - hard prompt: prompt token ids prepended by [`apply_prompt`].

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{LanguageCode, Translator};
use crate::encoder::{count_params, EncoderConfig, TextEncoder, PROMPT_TOKEN_COUNT};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Activation, Tape, Tensor, Var};

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LoraTarget {
    #[serde(rename = "w_q")]
    WQ,
    #[serde(rename = "w_v")]
    WV,
}

impl LoraTarget {
    fn slot(self) -> usize {
        match self {
            LoraTarget::WQ => 0,
            LoraTarget::WV => 1,
        }
    }

    fn name(self) -> &'static str {
        match self {
            LoraTarget::WQ => "w_q",
            LoraTarget::WV => "w_v",
        }
    }
}

/// Sublayer outputs that receive an adapter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Site {
    Attention,
    FeedForward,
}

impl Site {
    fn slot(self) -> usize {
        match self {
            Site::Attention => 0,
            Site::FeedForward => 1,
        }
    }
}

const SITES: [(Site, &str); 2] = [(Site::Attention, "attn"), (Site::FeedForward, "ff")];

/// How a hard prompt is combined with the input text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum PromptCombo {
    /// English prompt before the original text.
    PivotPrompt = 1,
    /// Prompt translated into the text's language, before the original text.
    TranslatedPrompt = 2,
    /// English prompt before the text translated into English.
    PivotPromptTranslatedText = 3,
}

impl TryFrom<u8> for PromptCombo {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            1 => Ok(Self::PivotPrompt),
            2 => Ok(Self::TranslatedPrompt),
            3 => Ok(Self::PivotPromptTranslatedText),
            _ => Err(format!("prompt combo must be 1, 2 or 3, got {v}")),
        }
    }
}

impl From<PromptCombo> for u8 {
    fn from(c: PromptCombo) -> u8 {
        c as u8
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum SoftPromptInit {
    /// Copy the token-embedding rows of a hard prompt.
    FromHardPrompt { template: Vec<u32> },
    Random { std: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum PeftVariant {
    None,
    /// Full fine-tuning: every encoder parameter is trainable.
    Full,
    Adapter {
        r: usize,
        #[serde(default)]
        activation: Activation,
    },
    Compacter {
        k: usize,
        r: usize,
        r_b: usize,
        #[serde(default = "default_true")]
        shared_a: bool,
        #[serde(default)]
        activation: Activation,
    },
    Lora {
        r: usize,
        #[serde(default = "default_lora_targets")]
        targets: Vec<LoraTarget>,
    },
    SoftPrompt {
        n_tokens: usize,
        init: SoftPromptInit,
    },
    HardPrompt {
        template: Vec<u32>,
        combo: PromptCombo,
    },
}

fn default_true() -> bool {
    true
}

fn default_lora_targets() -> Vec<LoraTarget> {
    vec![LoraTarget::WQ, LoraTarget::WV]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Unfreeze {
    LinearHead,
    LayerNorm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PeftSpec {
    pub variant: PeftVariant,
    /// Base parameters trained alongside the module. `None` picks the
    /// variant's default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unfreeze: Option<BTreeSet<Unfreeze>>,
}

impl Default for PeftSpec {
    fn default() -> Self {
        Self::new(PeftVariant::None)
    }
}

impl PeftSpec {
    pub fn new(variant: PeftVariant) -> Self {
        Self {
            variant,
            unfreeze: None,
        }
    }

    pub fn with_unfreeze(mut self, set: impl IntoIterator<Item = Unfreeze>) -> Self {
        self.unfreeze = Some(set.into_iter().collect());
        self
    }

    pub fn adapter(r: usize) -> Self {
        Self::new(PeftVariant::Adapter {
            r,
            activation: Activation::Gelu,
        })
    }

    pub fn compacter(k: usize, r: usize, r_b: usize) -> Self {
        Self::new(PeftVariant::Compacter {
            k,
            r,
            r_b,
            shared_a: true,
            activation: Activation::Gelu,
        })
    }

    pub fn lora(r: usize) -> Self {
        Self::new(PeftVariant::Lora {
            r,
            targets: default_lora_targets(),
        })
    }

    /// Linear head and layer norms for adapter/Compacter/LoRA, nothing otherwise.
    pub fn unfreeze_set(&self) -> BTreeSet<Unfreeze> {
        if let Some(set) = &self.unfreeze {
            return set.clone();
        }
        match self.variant {
            PeftVariant::Adapter { .. } | PeftVariant::Compacter { .. } | PeftVariant::Lora { .. } => {
                [Unfreeze::LinearHead, Unfreeze::LayerNorm].into()
            }
            _ => BTreeSet::new(),
        }
    }

    pub fn hard_prompt(&self) -> Option<(&[u32], PromptCombo)> {
        match &self.variant {
            PeftVariant::HardPrompt { template, combo } => Some((template, *combo)),
            _ => None,
        }
    }

    pub fn soft_prompt_len(&self) -> usize {
        match &self.variant {
            PeftVariant::SoftPrompt { n_tokens, .. } => *n_tokens,
            _ => 0,
        }
    }

    pub fn validate(&self, cfg: &EncoderConfig) -> Result<()> {
        let d = cfg.d_model;
        match &self.variant {
            PeftVariant::None | PeftVariant::Full => {}
            PeftVariant::Adapter { r, .. } => {
                if *r == 0 {
                    return Err(Error::config("peft.adapter.r must be at least 1"));
                }
            }
            PeftVariant::Compacter { k, r, r_b, .. } => {
                if *r == 0 || *k == 0 || *r_b == 0 {
                    return Err(Error::config("peft.compacter: k, r and r_b must be at least 1"));
                }
                if !d.is_multiple_of(*k) || !r.is_multiple_of(*k) {
                    return Err(Error::config(format!(
                        "peft.compacter.k ({k}) must divide d_model ({d}) and r ({r})"
                    )));
                }
            }
            PeftVariant::Lora { r, targets } => {
                if *r == 0 {
                    return Err(Error::config("peft.lora.r must be at least 1"));
                }
                if targets.is_empty() {
                    return Err(Error::config("peft.lora.targets must not be empty"));
                }
            }
            PeftVariant::SoftPrompt { n_tokens, init } => {
                if *n_tokens == 0 {
                    return Err(Error::config("peft.soft_prompt.n_tokens must be at least 1"));
                }
                match init {
                    SoftPromptInit::FromHardPrompt { template } => {
                        if template.len() != *n_tokens {
                            return Err(Error::config(format!(
                                "peft.soft_prompt: template has {} ids but n_tokens is {n_tokens}",
                                template.len()
                            )));
                        }
                        if let Some(&id) = template.iter().find(|&&id| id as usize >= cfg.vocab_size) {
                            return Err(Error::config(format!(
                                "peft.soft_prompt.template id {id} outside the vocabulary"
                            )));
                        }
                    }
                    SoftPromptInit::Random { std } => {
                        if !(std.is_finite() && *std > 0.0) {
                            return Err(Error::config("peft.soft_prompt.init.std must be positive"));
                        }
                    }
                }
                if 1 + n_tokens >= cfg.max_len {
                    return Err(Error::config(format!(
                        "peft.soft_prompt: {n_tokens} prefix tokens leave no room under max_len {}",
                        cfg.max_len
                    )));
                }
            }
            PeftVariant::HardPrompt { template, .. } => {
                if template.is_empty() {
                    return Err(Error::config("peft.hard_prompt.template must not be empty"));
                }
                if let Some(&id) = template
                    .iter()
                    .find(|&&id| !(1..=PROMPT_TOKEN_COUNT).contains(&id))
                {
                    return Err(Error::config(format!(
                        "peft.hard_prompt.template id {id} is not a reserved prompt id (1..={PROMPT_TOKEN_COUNT})"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Closed-form trainable count and its ratio to the full text encoder.
pub fn count_trainable(spec: &PeftSpec, cfg: &EncoderConfig) -> (usize, f64) {
    let total = count_params(cfg);
    let d = cfg.d_model;
    let sites = 2 * cfg.n_layers;
    let module = match &spec.variant {
        PeftVariant::None | PeftVariant::HardPrompt { .. } => 0,
        PeftVariant::Full => return (total, 1.0),
        PeftVariant::Adapter { r, .. } => sites * (d * r + r + r * d + d),
        PeftVariant::Compacter {
            k, r, r_b, shared_a, ..
        } => {
            let factors = 2 * (d * r_b + r * r_b);
            let biases = r + d;
            let a = k * k * k;
            if *shared_a {
                a + sites * (factors + biases)
            } else {
                sites * (2 * a + factors + biases)
            }
        }
        PeftVariant::Lora { r, targets } => {
            let distinct: BTreeSet<_> = targets.iter().collect();
            cfg.n_layers * distinct.len() * (d * r + r * d)
        }
        PeftVariant::SoftPrompt { n_tokens, .. } => n_tokens * d,
    };
    let unfrozen: usize = spec
        .unfreeze_set()
        .iter()
        .map(|u| match u {
            Unfreeze::LinearHead => cfg.head_params(),
            Unfreeze::LayerNorm => cfg.layer_norm_params(),
        })
        .sum();
    let count = module + unfrozen;
    (count, count as f64 / total as f64)
}

/// `x + f(x W_down + b_down) W_up + b_up`, recorded on `tape`.
pub fn adapter_on_tape(
    tape: &mut Tape,
    x: Var,
    down: (Var, Var),
    up: (Var, Var),
    activation: Activation,
) -> Result<Var> {
    let h = tape.matmul(x, down.0)?;
    let h = tape.add_bias(h, down.1)?;
    let h = tape.activation(h, activation);
    let u = tape.matmul(h, up.0)?;
    let u = tape.add_bias(u, up.1)?;
    tape.add(x, u)
}

/// `x · Σᵢ Aᵢ ⊗ (sᵢ tᵢ)` through the fused Kronecker product.
pub fn kron_sum_projection(tape: &mut Tape, x: Var, a: &[Var], s: &[Var], t: &[Var]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for i in 0..a.len() {
        let b = tape.matmul(s[i], t[i])?;
        let term = tape.kron_matmul(x, a[i], b)?;
        acc = Some(match acc {
            Some(prev) => tape.add(prev, term)?,
            None => term,
        });
    }
    acc.ok_or_else(|| Error::config("compacter needs k >= 1"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterLayer {
    pub w_down: Tensor,
    pub b_down: Tensor,
    pub w_up: Tensor,
    pub b_up: Tensor,
    pub activation: Activation,
}

impl AdapterLayer {
    pub fn new<R: Rng + ?Sized>(d: usize, r: usize, activation: Activation, rng: &mut R) -> Self {
        Self {
            w_down: Tensor::randn(&[d, r], INIT_STD, rng),
            b_down: Tensor::zeros(&[r]),
            w_up: Tensor::zeros(&[r, d]),
            b_up: Tensor::zeros(&[d]),
            activation,
        }
    }

    pub fn num_params(&self) -> usize {
        self.w_down.numel() + self.b_down.numel() + self.w_up.numel() + self.b_up.numel()
    }

    /// Applies the adapter to every row of `x` (`[n×d]` or `[d]`).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let d = self.w_down.rows();
        if x.cols() != d {
            return Err(Error::Dimension {
                op: "adapter_forward",
                lhs: x.shape().to_vec(),
                rhs: self.w_down.shape().to_vec(),
            });
        }
        let shape = x.shape().to_vec();
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone().reshape(&[x.numel() / d, d])?);
        let down = (tape.constant(self.w_down.clone()), tape.constant(self.b_down.clone()));
        let up = (tape.constant(self.w_up.clone()), tape.constant(self.b_up.clone()));
        let out = adapter_on_tape(&mut tape, xv, down, up, self.activation)?;
        tape.value(out).clone().reshape(&shape)
    }
}

/// Kronecker-factored projection: `W = Σᵢ Aᵢ ⊗ (sᵢ tᵢ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct KronFactors {
    pub a: Vec<Tensor>,
    pub s: Vec<Tensor>,
    pub t: Vec<Tensor>,
}

impl KronFactors {
    pub fn materialize(&self) -> Result<Tensor> {
        let mut acc: Option<Tensor> = None;
        for i in 0..self.a.len() {
            let term = self.a[i].kron(&self.s[i].matmul(&self.t[i])?)?;
            acc = Some(match acc {
                Some(prev) => prev.add(&term)?,
                None => term,
            });
        }
        acc.ok_or_else(|| Error::config("compacter needs k >= 1"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompacterLayer {
    pub down: KronFactors,
    pub b_down: Tensor,
    pub up: KronFactors,
    pub b_up: Tensor,
    pub activation: Activation,
}

impl CompacterLayer {
    /// Neutral initialization with one set of `Aᵢ` shared by both projections.
    pub fn new<R: Rng + ?Sized>(
        d: usize,
        r: usize,
        k: usize,
        r_b: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if k == 0 || !d.is_multiple_of(k) || !r.is_multiple_of(k) {
            return Err(Error::config(format!("compacter k={k} must divide d={d} and r={r}")));
        }
        let a: Vec<Tensor> = (0..k).map(|_| init_kron_a(k, rng)).collect();
        let (down_s, down_t) = init_down_factors(d / k, r / k, r_b, k, rng);
        let (up_s, up_t) = init_up_factors(r / k, d / k, r_b, k, rng);
        Ok(Self {
            down: KronFactors {
                a: a.clone(),
                s: down_s,
                t: down_t,
            },
            b_down: Tensor::zeros(&[r]),
            up: KronFactors { a, s: up_s, t: up_t },
            b_up: Tensor::zeros(&[d]),
            activation,
        })
    }

    /// The equivalent dense adapter.
    pub fn materialize(&self) -> Result<AdapterLayer> {
        Ok(AdapterLayer {
            w_down: self.down.materialize()?,
            b_down: self.b_down.clone(),
            w_up: self.up.materialize()?,
            b_up: self.b_up.clone(),
            activation: self.activation,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let k = self.down.a.len();
        let d = self.b_up.numel();
        if x.cols() != d || k == 0 || !d.is_multiple_of(k) {
            return Err(Error::Dimension {
                op: "compacter_forward",
                lhs: x.shape().to_vec(),
                rhs: vec![d],
            });
        }
        let shape = x.shape().to_vec();
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone().reshape(&[x.numel() / d, d])?);
        let consts = |tape: &mut Tape, ts: &[Tensor]| -> Vec<Var> {
            ts.iter().map(|t| tape.constant(t.clone())).collect()
        };
        let (da, ds, dt) = (
            consts(&mut tape, &self.down.a),
            consts(&mut tape, &self.down.s),
            consts(&mut tape, &self.down.t),
        );
        let (ua, us, ut) = (
            consts(&mut tape, &self.up.a),
            consts(&mut tape, &self.up.s),
            consts(&mut tape, &self.up.t),
        );
        let bd = tape.constant(self.b_down.clone());
        let bu = tape.constant(self.b_up.clone());
        let out = compacter_on_tape(
            &mut tape,
            xv,
            CompacterVars {
                down_a: &da,
                down_s: &ds,
                down_t: &dt,
                b_down: bd,
                up_a: &ua,
                up_s: &us,
                up_t: &ut,
                b_up: bu,
            },
            self.activation,
        )?;
        tape.value(out).clone().reshape(&shape)
    }
}

fn init_kron_a<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Tensor {
    Tensor::randn(&[k, k], 1.0 / (k as f64).sqrt(), rng)
}

/// `Σᵢ Aᵢ ⊗ sᵢtᵢ` has entry std ≈ 0.02 with these scales.
fn init_down_factors<R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    r_b: usize,
    k: usize,
    rng: &mut R,
) -> (Vec<Tensor>, Vec<Tensor>) {
    let s = (0..k).map(|_| Tensor::randn(&[rows, r_b], INIT_STD, rng)).collect();
    let t = (0..k)
        .map(|_| Tensor::randn(&[r_b, cols], 1.0 / (r_b as f64).sqrt(), rng))
        .collect();
    (s, t)
}

/// Up path: `s` random, `t` zero, so the projection starts at exactly zero.
fn init_up_factors<R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    r_b: usize,
    k: usize,
    rng: &mut R,
) -> (Vec<Tensor>, Vec<Tensor>) {
    let s = (0..k)
        .map(|_| Tensor::randn(&[rows, r_b], 1.0 / (r_b as f64).sqrt(), rng))
        .collect();
    let t = (0..k).map(|_| Tensor::zeros(&[r_b, cols])).collect();
    (s, t)
}

pub struct CompacterVars<'a> {
    pub down_a: &'a [Var],
    pub down_s: &'a [Var],
    pub down_t: &'a [Var],
    pub b_down: Var,
    pub up_a: &'a [Var],
    pub up_s: &'a [Var],
    pub up_t: &'a [Var],
    pub b_up: Var,
}

pub fn compacter_on_tape(tape: &mut Tape, x: Var, v: CompacterVars<'_>, activation: Activation) -> Result<Var> {
    let h = kron_sum_projection(tape, x, v.down_a, v.down_s, v.down_t)?;
    let h = tape.add_bias(h, v.b_down)?;
    let h = tape.activation(h, activation);
    let u = kron_sum_projection(tape, h, v.up_a, v.up_s, v.up_t)?;
    let u = tape.add_bias(u, v.b_up)?;
    tape.add(x, u)
}

/// Low-rank additive update for one projection.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraDelta {
    pub w_a: Tensor,
    pub w_b: Tensor,
}

impl LoraDelta {
    pub fn new<R: Rng + ?Sized>(d: usize, k: usize, r: usize, rng: &mut R) -> Self {
        Self {
            w_a: Tensor::randn(&[d, r], INIT_STD, rng),
            w_b: Tensor::zeros(&[r, k]),
        }
    }

    pub fn delta(&self) -> Result<Tensor> {
        self.w_a.matmul(&self.w_b)
    }

    /// `x W + x W_A W_B` for a frozen `w`.
    pub fn forward(&self, w: &Tensor, x: &Tensor) -> Result<Tensor> {
        let base = x.matmul(w)?;
        let delta = x.matmul(&self.w_a)?.matmul(&self.w_b)?;
        base.add(&delta)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct AdapterIds {
    w_down: ParamId,
    b_down: ParamId,
    w_up: ParamId,
    b_up: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
struct CompacterIds {
    down_a: Option<Vec<ParamId>>,
    down_s: Vec<ParamId>,
    down_t: Vec<ParamId>,
    b_down: ParamId,
    up_a: Option<Vec<ParamId>>,
    up_s: Vec<ParamId>,
    up_t: Vec<ParamId>,
    b_up: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
enum Hooks {
    None,
    Adapter {
        sites: Vec<AdapterIds>,
        activation: Activation,
    },
    Compacter {
        shared_a: Option<Vec<ParamId>>,
        sites: Vec<CompacterIds>,
        activation: Activation,
    },
    Lora {
        /// Per layer: `[W_q delta, W_v delta]` as `(W_A, W_B)`.
        deltas: Vec<[Option<(ParamId, ParamId)>; 2]>,
    },
    SoftPrompt {
        prefix: ParamId,
    },
}

/// The PEFT parameters attached to one encoder, with their injection hooks.
#[derive(Debug, Clone, PartialEq)]
pub struct PeftModule {
    spec: PeftSpec,
    params: ParamStore,
    hooks: Hooks,
}

impl PeftModule {
    /// A module with no parameters and no hooks.
    pub fn none() -> Self {
        Self {
            spec: PeftSpec::default(),
            params: ParamStore::new(),
            hooks: Hooks::None,
        }
    }

    pub fn new<R: Rng + ?Sized>(spec: &PeftSpec, encoder: &TextEncoder, rng: &mut R) -> Result<Self> {
        let cfg = encoder.config();
        spec.validate(cfg)?;
        let d = cfg.d_model;
        let mut params = ParamStore::new();
        let hooks = match &spec.variant {
            PeftVariant::None | PeftVariant::Full | PeftVariant::HardPrompt { .. } => Hooks::None,
            PeftVariant::Adapter { r, activation } => {
                let mut sites = Vec::new();
                for l in 0..cfg.n_layers {
                    for (_, site) in SITES {
                        let layer = AdapterLayer::new(d, *r, *activation, rng);
                        let p = |s: &str| format!("adapter.layers.{l}.{site}.{s}");
                        sites.push(AdapterIds {
                            w_down: params.push(p("w_down"), layer.w_down),
                            b_down: params.push(p("b_down"), layer.b_down),
                            w_up: params.push(p("w_up"), layer.w_up),
                            b_up: params.push(p("b_up"), layer.b_up),
                        });
                    }
                }
                Hooks::Adapter {
                    sites,
                    activation: *activation,
                }
            }
            PeftVariant::Compacter {
                k,
                r,
                r_b,
                shared_a,
                activation,
            } => {
                let (k, r, r_b) = (*k, *r, *r_b);
                let shared = shared_a.then(|| {
                    (0..k)
                        .map(|i| params.push(format!("compacter.shared_a.{i}"), init_kron_a(k, rng)))
                        .collect::<Vec<_>>()
                });
                let mut sites = Vec::new();
                for l in 0..cfg.n_layers {
                    for (_, site) in SITES {
                        let p = |s: String| format!("compacter.layers.{l}.{site}.{s}");
                        let own_a = |params: &mut ParamStore, rng: &mut R, dir: &str| {
                            (!*shared_a).then(|| {
                                (0..k)
                                    .map(|i| params.push(p(format!("{dir}.a.{i}")), init_kron_a(k, rng)))
                                    .collect::<Vec<_>>()
                            })
                        };
                        let down_a = own_a(&mut params, rng, "down");
                        let up_a = own_a(&mut params, rng, "up");
                        let (ds, dt) = init_down_factors(d / k, r / k, r_b, k, rng);
                        let (us, ut) = init_up_factors(r / k, d / k, r_b, k, rng);
                        let mut push_all = |dir: &str, kind: &str, ts: Vec<Tensor>| -> Vec<ParamId> {
                            ts.into_iter()
                                .enumerate()
                                .map(|(i, t)| params.push(p(format!("{dir}.{kind}.{i}")), t))
                                .collect()
                        };
                        let down_s = push_all("down", "s", ds);
                        let down_t = push_all("down", "t", dt);
                        let up_s = push_all("up", "s", us);
                        let up_t = push_all("up", "t", ut);
                        let b_down = params.push(p("down.b".into()), Tensor::zeros(&[r]));
                        let b_up = params.push(p("up.b".into()), Tensor::zeros(&[d]));
                        sites.push(CompacterIds {
                            down_a,
                            down_s,
                            down_t,
                            b_down,
                            up_a,
                            up_s,
                            up_t,
                            b_up,
                        });
                    }
                }
                Hooks::Compacter {
                    shared_a: shared,
                    sites,
                    activation: *activation,
                }
            }
            PeftVariant::Lora { r, targets } => {
                let targets: BTreeSet<LoraTarget> = targets.iter().copied().collect();
                let mut deltas = Vec::new();
                for l in 0..cfg.n_layers {
                    let mut slots = [None, None];
                    for &t in &targets {
                        let delta = LoraDelta::new(d, d, *r, rng);
                        let p = |s: &str| format!("lora.layers.{l}.{}.{s}", t.name());
                        slots[t.slot()] = Some((params.push(p("w_a"), delta.w_a), params.push(p("w_b"), delta.w_b)));
                    }
                    deltas.push(slots);
                }
                Hooks::Lora { deltas }
            }
            PeftVariant::SoftPrompt { n_tokens, init } => {
                let prefix = match init {
                    SoftPromptInit::FromHardPrompt { template } => {
                        let table = encoder.token_embedding();
                        let rows: Vec<Vec<f64>> = template.iter().map(|&id| table.row(id as usize).to_vec()).collect();
                        Tensor::from_rows(&rows)
                    }
                    SoftPromptInit::Random { std } => Tensor::randn(&[*n_tokens, d], *std, rng),
                };
                Hooks::SoftPrompt {
                    prefix: params.push("soft_prompt.prefix", prefix),
                }
            }
        };
        Ok(Self {
            spec: spec.clone(),
            params,
            hooks,
        })
    }

    pub fn spec(&self) -> &PeftSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.numel()
    }

    pub fn soft_prefix(&self, vars: &[Var]) -> Option<Var> {
        match &self.hooks {
            Hooks::SoftPrompt { prefix } => Some(vars[prefix.0]),
            _ => None,
        }
    }

    pub fn soft_prefix_tensor(&self) -> Option<&Tensor> {
        match &self.hooks {
            Hooks::SoftPrompt { prefix } => Some(self.params.get(*prefix)),
            _ => None,
        }
    }

    pub fn lora_factors(&self, vars: &[Var], layer: usize, target: LoraTarget) -> Option<(Var, Var)> {
        match &self.hooks {
            Hooks::Lora { deltas } => deltas[layer][target.slot()].map(|(a, b)| (vars[a.0], vars[b.0])),
            _ => None,
        }
    }

    /// Applies the adapter at `(layer, site)` to `x`, or returns `x` unchanged.
    pub fn adapt(&self, tape: &mut Tape, vars: &[Var], layer: usize, site: Site, x: Var) -> Result<Var> {
        let idx = layer * 2 + site.slot();
        match &self.hooks {
            Hooks::Adapter { sites, activation } => {
                let ids = &sites[idx];
                let v = |id: ParamId| vars[id.0];
                adapter_on_tape(
                    tape,
                    x,
                    (v(ids.w_down), v(ids.b_down)),
                    (v(ids.w_up), v(ids.b_up)),
                    *activation,
                )
            }
            Hooks::Compacter {
                shared_a,
                sites,
                activation,
            } => {
                let ids = &sites[idx];
                let vs = |list: &[ParamId]| list.iter().map(|id| vars[id.0]).collect::<Vec<_>>();
                let down_a = vs(ids.down_a.as_deref().or(shared_a.as_deref()).expect("compacter A"));
                let up_a = vs(ids.up_a.as_deref().or(shared_a.as_deref()).expect("compacter A"));
                let (down_s, down_t) = (vs(&ids.down_s), vs(&ids.down_t));
                let (up_s, up_t) = (vs(&ids.up_s), vs(&ids.up_t));
                compacter_on_tape(
                    tape,
                    x,
                    CompacterVars {
                        down_a: &down_a,
                        down_s: &down_s,
                        down_t: &down_t,
                        b_down: vars[ids.b_down.0],
                        up_a: &up_a,
                        up_s: &up_s,
                        up_t: &up_t,
                        b_up: vars[ids.b_up.0],
                    },
                    *activation,
                )
            }
            _ => Ok(x),
        }
    }

    /// The Compacter at `(layer, site)` as a standalone layer.
    pub fn compacter_layer(&self, layer: usize, site: Site) -> Option<CompacterLayer> {
        let Hooks::Compacter {
            shared_a,
            sites,
            activation,
        } = &self.hooks
        else {
            return None;
        };
        let ids = &sites[layer * 2 + site.slot()];
        let ts = |list: &[ParamId]| list.iter().map(|id| self.params.get(*id).clone()).collect::<Vec<_>>();
        let down_a = ts(ids.down_a.as_deref().or(shared_a.as_deref())?);
        let up_a = ts(ids.up_a.as_deref().or(shared_a.as_deref())?);
        Some(CompacterLayer {
            down: KronFactors {
                a: down_a,
                s: ts(&ids.down_s),
                t: ts(&ids.down_t),
            },
            b_down: self.params.get(ids.b_down).clone(),
            up: KronFactors {
                a: up_a,
                s: ts(&ids.up_s),
                t: ts(&ids.up_t),
            },
            b_up: self.params.get(ids.b_up).clone(),
            activation: *activation,
        })
    }
}

/// Text input after prompt handling.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreparedInput {
    pub tokens: Vec<u32>,
    /// Trainable prefix rows the encoder inserts ahead of `tokens`.
    pub soft_prefix: usize,
}

/// Prepends the configured prompt to `tokens`, written in `lang`.
pub fn apply_prompt(
    tokens: &[u32],
    spec: &PeftSpec,
    lang: &LanguageCode,
    translator: &dyn Translator,
    max_len: usize,
) -> Result<PreparedInput> {
    let pivot = translator.pivot();
    let (tokens, soft_prefix) = match &spec.variant {
        PeftVariant::HardPrompt { template, combo } => {
            let out = match combo {
                PromptCombo::PivotPrompt => [template.as_slice(), tokens].concat(),
                PromptCombo::TranslatedPrompt => {
                    let prompt = translator.translate_prompt(template, lang)?;
                    [prompt.as_slice(), tokens].concat()
                }
                PromptCombo::PivotPromptTranslatedText => {
                    let text = translator.translate(tokens, lang, pivot)?;
                    [template.as_slice(), &text].concat()
                }
            };
            (out, 0)
        }
        PeftVariant::SoftPrompt { n_tokens, .. } => (tokens.to_vec(), *n_tokens),
        _ => (tokens.to_vec(), 0),
    };
    let len = 1 + soft_prefix + tokens.len();
    if len > max_len {
        return Err(Error::Length { len, max_len });
    }
    Ok(PreparedInput { tokens, soft_prefix })
}
