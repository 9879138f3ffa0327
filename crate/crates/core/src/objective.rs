//! Image-text contrastive loss, the two text-alignment losses, the three
//! alignment routines and their λ-weighted combination.
//!
//! `N` is the mini-batch: every other item in the batch is a negative.

use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, LanguageCode, View};
use crate::encoder::ImageBank;
use crate::error::{Error, Result};
use crate::model::{Bound, Model};
use crate::tensor::{Tape, Tensor, Var};

/// Turns a caption into encoder input for a language (prompting,
/// translation).
pub type Prepare<'a> = dyn Fn(&[u32], &LanguageCode) -> Result<Vec<u32>> + 'a;

pub const DEFAULT_TAU: f64 = 0.01;

/// Which two text distributions are pulled together.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Routine {
    /// Natural pivot vs natural target.
    NaturalPair = 1,
    /// Pivot translated into the target vs natural target.
    PivotToTarget = 2,
    /// Natural pivot vs target translated into the pivot.
    TargetToPivot = 3,
}

impl TryFrom<u8> for Routine {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            1 => Ok(Self::NaturalPair),
            2 => Ok(Self::PivotToTarget),
            3 => Ok(Self::TargetToPivot),
            _ => Err(format!("routine must be 1, 2 or 3, got {v}")),
        }
    }
}

impl From<Routine> for u8 {
    fn from(r: Routine) -> u8 {
        r as u8
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignLoss {
    #[default]
    Mse,
    Contrastive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignPair {
    /// The routine's two text views.
    #[default]
    PivotTarget,
    /// The routine's pivot-side view against the image embeddings.
    PivotImage,
}

fn default_tau() -> f64 {
    DEFAULT_TAU
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlignmentSpec {
    /// `None` trains with the image-text loss alone.
    #[serde(default)]
    pub routine: Option<Routine>,
    #[serde(default)]
    pub loss: AlignLoss,
    #[serde(default)]
    pub pair: AlignPair,
    #[serde(default)]
    pub lambda: f64,
    #[serde(default = "default_tau")]
    pub tau: f64,
}

impl Default for AlignmentSpec {
    fn default() -> Self {
        Self::none()
    }
}

impl AlignmentSpec {
    pub fn none() -> Self {
        Self {
            routine: None,
            loss: AlignLoss::Mse,
            pair: AlignPair::PivotTarget,
            lambda: 0.0,
            tau: DEFAULT_TAU,
        }
    }

    pub fn new(routine: Routine, loss: AlignLoss, pair: AlignPair, lambda: f64) -> Self {
        Self {
            routine: Some(routine),
            loss,
            pair,
            lambda,
            tau: DEFAULT_TAU,
        }
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::config(format!("alignment.lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::config(format!("alignment.tau must be > 0, got {}", self.tau)));
        }
        if self.pair == AlignPair::PivotImage && self.loss != AlignLoss::Contrastive {
            return Err(Error::config("alignment.pair = pivot_image requires loss = contrastive"));
        }
        Ok(())
    }

    /// Whether the alignment term contributes at all.
    pub fn active(&self) -> bool {
        self.routine.is_some() && self.lambda != 0.0
    }
}

/// The five routine/loss/pair combinations compared in the ablation, A to E.
pub fn ablation_combos(lambda: f64) -> [(char, AlignmentSpec); 5] {
    use AlignLoss::*;
    use AlignPair::*;
    use Routine::*;
    [
        ('A', AlignmentSpec::new(TargetToPivot, Contrastive, PivotImage, lambda)),
        ('B', AlignmentSpec::new(TargetToPivot, Contrastive, PivotTarget, lambda)),
        ('C', AlignmentSpec::new(NaturalPair, Mse, PivotTarget, lambda)),
        ('D', AlignmentSpec::new(PivotToTarget, Mse, PivotTarget, lambda)),
        ('E', AlignmentSpec::new(TargetToPivot, Mse, PivotTarget, lambda)),
    ]
}

/// Symmetric InfoNCE over cosine similarities scaled by `1/tau`:
/// mean over rows of `-log softmax(S)[i,i]` plus the same over columns.
pub fn info_nce(tape: &mut Tape, a: Var, b: Var, tau: f64) -> Result<Var> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::InvalidValue {
            op: "info_nce",
            detail: format!("tau must be positive, got {tau}"),
        });
    }
    let (sa, sb) = (tape.value(a).shape().to_vec(), tape.value(b).shape().to_vec());
    if sa.len() != 2 || sa != sb {
        return Err(Error::Dimension {
            op: "info_nce",
            lhs: sa,
            rhs: sb,
        });
    }
    let an = tape.row_normalize(a)?;
    let bn = tape.row_normalize(b)?;
    let bt = tape.transpose(bn)?;
    let sim = tape.matmul(an, bt)?;
    let sim = tape.scale(sim, 1.0 / tau);
    let rows = tape.log_softmax_rows(sim)?;
    let rows = tape.diag(rows)?;
    let rows = tape.mean(rows);
    let simt = tape.transpose(sim)?;
    let cols = tape.log_softmax_rows(simt)?;
    let cols = tape.diag(cols)?;
    let cols = tape.mean(cols);
    let total = tape.add(rows, cols)?;
    Ok(tape.scale(total, -1.0))
}

/// `L_i2t + L_t2i` for images `v` and texts `t`, both `[N×d]`.
pub fn contrastive_it_loss(tape: &mut Tape, v: Var, t: Var, tau: f64) -> Result<Var> {
    info_nce(tape, v, t, tau)
}

/// Mean over batch and dimensions of `(t_pivot − t_target)²`.
pub fn mse_alignment(tape: &mut Tape, tp: Var, tt: Var) -> Result<Var> {
    let diff = tape.sub(tp, tt)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean(sq))
}

/// Symmetric InfoNCE between pivot texts and `x` (target texts or images).
pub fn contrastive_alignment(tape: &mut Tape, tp: Var, x: Var, tau: f64) -> Result<Var> {
    info_nce(tape, tp, x, tau)
}

/// Text renderings a batch can provide.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TextRole {
    Target,
    Pivot,
    /// `Trans_{tgt→en}(text_tgt)`.
    TargetToPivot,
    /// `Trans_{en→tgt}(text_en)`.
    PivotToTarget,
}

/// Index-aligned images and text views, prepared for the encoder.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Tensor,
    pub target: Vec<Vec<u32>>,
    pub pivot: Vec<Vec<u32>>,
    pub target_to_pivot: Option<Vec<Vec<u32>>>,
    pub pivot_to_target: Option<Vec<Vec<u32>>>,
    pub target_is_pivot: bool,
}

impl Batch {
    /// Gathers items `indices` of `lang`. `prepare` applies prompts to a
    /// token sequence written in the given language. Translation views the
    /// dataset lacks are left empty; routines that need them fail later.
    pub fn build(
        data: &Dataset,
        bank: &ImageBank,
        indices: &[usize],
        lang: &LanguageCode,
        prepare: &Prepare<'_>,
    ) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::BatchConstruction("empty batch".into()));
        }
        let pivot = LanguageCode::pivot();
        let ids: Vec<&str> = indices.iter().map(|&i| data.samples()[i].image_id.as_str()).collect();
        let images = bank.matrix(&ids)?;
        let gather = |l: &LanguageCode, view: View, written: &LanguageCode| -> Result<Vec<Vec<u32>>> {
            indices
                .iter()
                .map(|&i| prepare(data.text(i, l, view)?, written))
                .collect()
        };
        let optional = |r: Result<Vec<Vec<u32>>>| match r {
            Ok(v) => Ok(Some(v)),
            Err(Error::BatchConstruction(_)) => Ok(None),
            Err(e) => Err(e),
        };
        Ok(Self {
            images,
            target: gather(lang, View::Natural, lang)?,
            pivot: gather(&pivot, View::Natural, &pivot)?,
            target_to_pivot: optional(gather(lang, View::MtToPivot, &pivot))?,
            pivot_to_target: optional(gather(lang, View::MtFromPivot, lang))?,
            target_is_pivot: lang.is_pivot(),
        })
    }

    pub fn len(&self) -> usize {
        self.target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target.is_empty()
    }

    pub fn texts(&self, role: TextRole) -> Result<&[Vec<u32>]> {
        let missing = |what: &str| Error::BatchConstruction(format!("batch has no {what} view"));
        match role {
            TextRole::Target => Ok(&self.target),
            TextRole::Pivot => Ok(&self.pivot),
            TextRole::TargetToPivot => self.target_to_pivot.as_deref().ok_or_else(|| missing("mt_to_pivot")),
            TextRole::PivotToTarget => self.pivot_to_target.as_deref().ok_or_else(|| missing("mt_from_pivot")),
        }
    }
}

/// The retrieval-side text: what the model will see at inference.
pub fn retrieval_role(mt_inference: bool) -> TextRole {
    if mt_inference {
        TextRole::TargetToPivot
    } else {
        TextRole::Target
    }
}

/// `(anchor, other)` text roles for a routine; `None` on pivot-language data,
/// where the routines do not apply.
pub fn select_routine(batch: &Batch, routine: Routine) -> Result<Option<(TextRole, TextRole)>> {
    if batch.target_is_pivot {
        return Ok(None);
    }
    let pair = match routine {
        Routine::NaturalPair => (TextRole::Pivot, TextRole::Target),
        Routine::PivotToTarget => (TextRole::PivotToTarget, TextRole::Target),
        Routine::TargetToPivot => (TextRole::Pivot, TextRole::TargetToPivot),
    };
    batch.texts(pair.0)?;
    batch.texts(pair.1)?;
    Ok(Some(pair))
}

/// Recorded loss with its components' values.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: Var,
    pub retrieval: f64,
    pub alignment: Option<f64>,
}

/// Encodes `texts` and stacks them into `[N×d_proj]`.
pub fn encode_stack(tape: &mut Tape, model: &Model, bound: &Bound, texts: &[Vec<u32>]) -> Result<Var> {
    let d = model.encoder().config().d_proj;
    let rows = texts
        .iter()
        .map(|t| {
            let e = model.encode(tape, bound, t)?;
            tape.reshape(e, &[1, d])
        })
        .collect::<Result<Vec<_>>>()?;
    if rows.len() == 1 {
        Ok(rows[0])
    } else {
        tape.concat_rows(&rows)
    }
}

/// `L = L_i2t + L_t2i + λ · L_align`. With `λ = 0` or no routine the
/// alignment term is not recorded at all.
pub fn combined_loss(
    tape: &mut Tape,
    model: &Model,
    bound: &Bound,
    batch: &Batch,
    spec: &AlignmentSpec,
    mt_inference: bool,
) -> Result<LossParts> {
    let mut cache: Vec<(TextRole, Var)> = Vec::new();
    let mut encoded = |tape: &mut Tape, role: TextRole| -> Result<Var> {
        if let Some(&(_, v)) = cache.iter().find(|(r, _)| *r == role) {
            return Ok(v);
        }
        let v = encode_stack(tape, model, bound, batch.texts(role)?)?;
        cache.push((role, v));
        Ok(v)
    };
    let images = tape.constant(batch.images.clone());
    let role = if batch.target_is_pivot {
        TextRole::Target
    } else {
        retrieval_role(mt_inference)
    };
    let texts = encoded(tape, role)?;
    let retrieval = contrastive_it_loss(tape, images, texts, spec.tau)?;
    let retrieval_value = tape.value(retrieval).data()[0];

    let routine = match spec.routine {
        Some(r) if spec.active() => r,
        _ => {
            return Ok(LossParts {
                total: retrieval,
                retrieval: retrieval_value,
                alignment: None,
            })
        }
    };
    let Some((anchor, other)) = select_routine(batch, routine)? else {
        return Ok(LossParts {
            total: retrieval,
            retrieval: retrieval_value,
            alignment: None,
        });
    };
    let a = encoded(tape, anchor)?;
    let align = match spec.pair {
        AlignPair::PivotTarget => {
            let b = encoded(tape, other)?;
            match spec.loss {
                AlignLoss::Mse => mse_alignment(tape, a, b)?,
                AlignLoss::Contrastive => contrastive_alignment(tape, a, b, spec.tau)?,
            }
        }
        AlignPair::PivotImage => contrastive_alignment(tape, a, images, spec.tau)?,
    };
    let align_value = tape.value(align).data()[0];
    let weighted = tape.scale(align, spec.lambda);
    let total = tape.add(retrieval, weighted)?;
    Ok(LossParts {
        total,
        retrieval: retrieval_value,
        alignment: Some(align_value),
    })
}
