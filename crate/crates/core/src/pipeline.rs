//! Declarative run configuration and the end-to-end recipes built on it:
//! corpus preparation, base-encoder pretraining, per-language fine-tuning,
//! zero-shot evaluation, grid search and the gradient suite.

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{generate, split_few_shot, split_proportional, CorpusSpec, Dataset, LanguageCode, Split, TranslationModel};
use crate::encoder::{EncoderConfig, ImageBank, TextEncoder, PROMPT_TOKEN_COUNT};
use crate::error::{Error, Result};
use crate::eval::{check_inference_mode, evaluate, evaluate_language, Direction, EvalOptions, RetrievalReport, SweepGrid, SweepResult};
use crate::model::Model;
use crate::objective::{ablation_combos, combined_loss, AlignmentSpec, Batch};
use crate::peft::{apply_prompt, PeftSpec, PeftVariant, SoftPromptInit};
use crate::tensor::{grad_check, Tensor};
use crate::trainer::{fingerprint, train, Checkpoint, Scenario, Trace, TrainConfig, TrainData};

/// Where the corpus comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum CorpusSource {
    Generate(CorpusSpec),
    Files {
        dataset: PathBuf,
        images: PathBuf,
        /// Seeds the prompt-translation tables.
        #[serde(default)]
        seed: u64,
    },
}

impl Default for CorpusSource {
    fn default() -> Self {
        Self::Generate(CorpusSpec::default())
    }
}

fn default_pretrain_items() -> usize {
    4000
}

fn default_pretrain_epochs() -> usize {
    12
}

fn default_pretrain_batch() -> usize {
    32
}

fn default_pretrain_lr() -> f64 {
    5e-3
}

/// Full fine-tuning of a fresh encoder on a pivot-only generated corpus,
/// standing in for a pretrained checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    #[serde(default = "default_pretrain_items")]
    pub n_items: usize,
    #[serde(default = "default_pretrain_epochs")]
    pub epochs: usize,
    #[serde(default = "default_pretrain_batch")]
    pub batch_size: usize,
    #[serde(default = "default_pretrain_lr")]
    pub learning_rate: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_every: Option<usize>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            n_items: default_pretrain_items(),
            epochs: default_pretrain_epochs(),
            batch_size: default_pretrain_batch(),
            learning_rate: default_pretrain_lr(),
            eval_every: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default)]
    pub direction: Direction,
    #[serde(default = "one")]
    pub k: usize,
    /// Languages to run; all corpus languages when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub languages: Option<Vec<LanguageCode>>,
    /// Overrides the training flag at evaluation time.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mt_inference: Option<bool>,
}

fn one() -> usize {
    1
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            direction: Direction::TextToImage,
            k: 1,
            languages: None,
            mt_inference: None,
        }
    }
}

fn default_eps() -> f64 {
    1e-5
}

fn default_tol() -> f64 {
    1e-4
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

fn default_gc_batch() -> usize {
    4
}

fn gradcheck_encoder() -> EncoderConfig {
    EncoderConfig {
        vocab_size: 73,
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        d_ff: 16,
        max_len: 12,
        d_proj: 4,
        pooling: Default::default(),
    }
}

/// Finite-difference check of every ablation combo under every trainable
/// PEFT variant, on a small encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckConfig {
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_gc_batch")]
    pub batch_size: usize,
    #[serde(default = "gradcheck_encoder")]
    pub encoder: EncoderConfig,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            eps: default_eps(),
            tol: default_tol(),
            seeds: default_seeds(),
            batch_size: default_gc_batch(),
            encoder: gradcheck_encoder(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub corpus: CorpusSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrain: Option<PretrainConfig>,
    /// Base encoder weights; takes precedence over `pretrain`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub peft: PeftSpec,
    #[serde(default)]
    pub alignment: AlignmentSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepGrid>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gradcheck: Option<GradcheckConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let enc = &self.encoder;
        enc.validate()?;
        self.peft.validate(enc)?;
        self.alignment.validate()?;
        self.train.validate()?;
        if self.eval.k == 0 {
            return Err(Error::config("eval.k must be at least 1"));
        }
        if let CorpusSource::Generate(spec) = &self.corpus {
            spec.validate()?;
            if spec.latent_dim != enc.d_proj {
                return Err(Error::config(format!(
                    "corpus.latent_dim ({}) must equal encoder.d_proj ({})",
                    spec.latent_dim, enc.d_proj
                )));
            }
            if spec.vocab_size != enc.vocab_size {
                return Err(Error::config(format!(
                    "corpus.vocab_size ({}) must equal encoder.vocab_size ({})",
                    spec.vocab_size, enc.vocab_size
                )));
            }
            let prompt = match &self.peft.variant {
                PeftVariant::HardPrompt { template, .. } => template.len(),
                PeftVariant::SoftPrompt { n_tokens, .. } => *n_tokens,
                _ => 0,
            };
            let needed = 1 + prompt + spec.seq_len;
            if needed > enc.max_len {
                return Err(Error::config(format!(
                    "encoder.max_len ({}) is shorter than CLS + prompt + corpus.seq_len ({needed})",
                    enc.max_len
                )));
            }
            if let Some(langs) = &self.eval.languages {
                if let Some(l) = langs.iter().find(|l| !spec.languages.contains(l)) {
                    return Err(Error::config(format!("eval.languages: {l} is not a corpus language")));
                }
            }
        }
        if let Some(p) = &self.pretrain {
            if p.n_items < 40 || p.epochs == 0 || p.batch_size == 0 || p.learning_rate.is_nan() || p.learning_rate <= 0.0 {
                return Err(Error::config(
                    "pretrain needs n_items >= 40, epochs >= 1, batch_size >= 1 and a positive learning_rate",
                ));
            }
        }
        if let Some(g) = &self.sweep {
            g.validate()?;
        }
        if let Some(g) = &self.gradcheck {
            g.encoder.validate()?;
            if !(1e-7..=1e-4).contains(&g.eps) || g.seeds.is_empty() || g.batch_size == 0 {
                return Err(Error::config("gradcheck needs eps in [1e-7, 1e-4], seeds and a batch size"));
            }
        }
        Ok(())
    }

    pub fn mt_inference(&self) -> bool {
        self.eval
            .mt_inference
            .unwrap_or_else(|| self.train.resolve_mt_inference(&self.alignment))
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            direction: self.eval.direction,
            k: self.eval.k,
            mt_inference: self.mt_inference(),
        }
    }
}

/// A dataset with everything needed to embed and translate it.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub dataset: Dataset,
    pub bank: ImageBank,
    pub translator: TranslationModel,
}

pub fn load_corpus(cfg: &RunConfig) -> Result<Corpus> {
    match &cfg.corpus {
        CorpusSource::Generate(spec) => {
            let g = generate(spec)?;
            Ok(Corpus {
                dataset: g.dataset,
                bank: g.bank,
                translator: g.translator,
            })
        }
        CorpusSource::Files { dataset, images, seed } => {
            let dataset = Dataset::load_tsv(dataset)?;
            let bank = ImageBank::load(images)?;
            if bank.dim() != cfg.encoder.d_proj {
                return Err(Error::config(format!(
                    "image bank dimension {} differs from encoder.d_proj {}",
                    bank.dim(),
                    cfg.encoder.d_proj
                )));
            }
            for id in dataset.image_ids() {
                if !bank.contains(id) {
                    return Err(Error::MissingImage(id.to_string()));
                }
            }
            let langs: Vec<(LanguageCode, f64)> = dataset.languages().iter().map(|l| (l.clone(), 0.0)).collect();
            let translator = TranslationModel::new(&langs, cfg.encoder.vocab_size, *seed)?;
            Ok(Corpus {
                dataset,
                bank,
                translator,
            })
        }
    }
}

/// Prompt handling for `peft` as a plain function of `(tokens, language)`.
pub fn prompt_fn<'a>(
    peft: &'a PeftSpec,
    translator: &'a TranslationModel,
    max_len: usize,
) -> impl Fn(&[u32], &LanguageCode) -> Result<Vec<u32>> + Sync + 'a {
    move |tokens, lang| Ok(apply_prompt(tokens, peft, lang, translator, max_len)?.tokens)
}

/// Sub-seed for one named use of the run seed.
pub fn sub_seed(seed: u64, what: &str) -> u64 {
    let h = fingerprint(&(seed, what));
    u64::from_str_radix(&h[..16], 16).expect("hex digest")
}

/// Result of pretraining: the base encoder and its trace.
pub struct Pretrained {
    pub encoder: TextEncoder,
    pub trace: Option<Trace>,
    pub dev_r1: Option<f64>,
}

/// Fresh encoder for `seed`, fully fine-tuned on a pivot-only corpus when
/// `pretrain` is set.
pub fn pretrain_encoder(encoder: &EncoderConfig, pretrain: Option<&PretrainConfig>, seq_len: usize, seed: u64) -> Result<Pretrained> {
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, "encoder"));
    let enc = TextEncoder::new(encoder.clone(), &mut rng)?;
    let Some(p) = pretrain else {
        return Ok(Pretrained {
            encoder: enc,
            trace: None,
            dev_r1: None,
        });
    };
    let spec = CorpusSpec {
        languages: vec![LanguageCode::pivot()],
        n_items: p.n_items,
        seq_len,
        latent_dim: encoder.d_proj,
        vocab_size: encoder.vocab_size,
        p_gap: Vec::new(),
        seed: sub_seed(seed, "pretrain-corpus"),
    };
    let g = generate(&spec)?;
    let split = split_proportional(p.n_items, 0.9, 0.05, sub_seed(seed, "pretrain-split"))?;
    let full = PeftSpec::new(PeftVariant::Full);
    let model = Model::new(enc, &full, &mut rng)?;
    let tc = TrainConfig {
        learning_rate: p.learning_rate,
        epochs: p.epochs,
        batch_size: p.batch_size,
        eval_every: Some(p.eval_every.unwrap_or(usize::MAX)),
        seed: sub_seed(seed, "pretrain-shuffle"),
        scenario: Scenario::FullDataset,
        mt_inference: Some(false),
    };
    let langs = [LanguageCode::pivot()];
    let max_len = encoder.max_len;
    let templated = |t: &[u32], _: &LanguageCode| Ok(template_prefix(t, max_len));
    let out = train(
        &tc,
        &AlignmentSpec::none(),
        &TrainData {
            data: &g.dataset,
            bank: &g.bank,
            train: &split.train,
            dev: &split.dev,
            languages: &langs,
            prepare: &templated,
        },
        model,
    )?;
    Ok(Pretrained {
        encoder: out.model.into_encoder(),
        trace: Some(out.trace),
        dev_r1: Some(out.best.metric),
    })
}

/// Prepends a caption-dependent run of 0 to 4 reserved prompt ids, so the
/// pretrained encoder has seen template words ahead of the content, as a
/// model pretrained on captions like "a photo of ..." has.
fn template_prefix(tokens: &[u32], max_len: usize) -> Vec<u32> {
    let h = fingerprint(tokens);
    let bytes = h.as_bytes();
    let room = max_len.saturating_sub(1 + tokens.len());
    let n = ((bytes[0] % 5) as usize).min(room);
    let mut out: Vec<u32> = bytes[1..=n].iter().map(|b| 1 + u32::from(*b) % PROMPT_TOKEN_COUNT).collect();
    out.extend_from_slice(tokens);
    out
}

fn corpus_seq_len(cfg: &RunConfig, corpus: &Corpus) -> usize {
    match &cfg.corpus {
        CorpusSource::Generate(spec) => spec.seq_len,
        CorpusSource::Files { .. } => corpus
            .dataset
            .samples()
            .first()
            .map_or(16, |s| s.texts[&LanguageCode::pivot()].natural.len()),
    }
}

/// The base encoder of a run: from `init_checkpoint`, else pretrained, else
/// freshly initialized.
pub fn base_encoder(cfg: &RunConfig, corpus: &Corpus) -> Result<Pretrained> {
    let seed = cfg.train.seed;
    if let Some(path) = &cfg.init_checkpoint {
        let ckpt = Checkpoint::load(path)?;
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, "encoder"));
        let mut model = Model::frozen(TextEncoder::new(cfg.encoder.clone(), &mut rng)?);
        ckpt.apply(&mut model)?;
        return Ok(Pretrained {
            encoder: model.into_encoder(),
            trace: None,
            dev_r1: Some(ckpt.metric),
        });
    }
    pretrain_encoder(&cfg.encoder, cfg.pretrain.as_ref(), corpus_seq_len(cfg, corpus), seed)
}

/// Train/dev/test indices for the run's scenario.
pub fn scenario_split(cfg: &RunConfig, n: usize) -> Result<Split> {
    let seed = sub_seed(cfg.train.seed, "split");
    match cfg.train.scenario {
        Scenario::FullDataset => split_proportional(n, 0.8, 0.1, seed),
        _ => split_few_shot(n, seed),
    }
}

pub fn run_languages(cfg: &RunConfig, corpus: &Corpus) -> Vec<LanguageCode> {
    cfg.eval
        .languages
        .clone()
        .unwrap_or_else(|| corpus.dataset.languages().to_vec())
}

/// One language's fine-tuning run.
pub struct LanguageRun {
    pub language: LanguageCode,
    pub checkpoint: Checkpoint,
    pub trace: Trace,
    pub test_r1: f64,
    pub model: Model,
}

/// Fine-tunes a copy of `base` on one language and scores its test split.
pub fn train_language(
    cfg: &RunConfig,
    corpus: &Corpus,
    base: &TextEncoder,
    split: &Split,
    lang: &LanguageCode,
) -> Result<LanguageRun> {
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.train.seed, &format!("peft-{lang}")));
    let model = Model::new(base.clone(), &cfg.peft, &mut rng)?;
    let prepare = prompt_fn(&cfg.peft, &corpus.translator, cfg.encoder.max_len);
    let langs = [lang.clone()];
    let tc = TrainConfig {
        seed: sub_seed(cfg.train.seed, &format!("shuffle-{lang}")),
        ..cfg.train.clone()
    };
    let out = train(
        &tc,
        &cfg.alignment,
        &TrainData {
            data: &corpus.dataset,
            bank: &corpus.bank,
            train: &split.train,
            dev: &split.dev,
            languages: &langs,
            prepare: &prepare,
        },
        model,
    )?;
    let opts = cfg.eval_options();
    check_inference_mode(&cfg.alignment, opts.mt_inference);
    let test_r1 = evaluate_language(&out.model, &corpus.dataset, &corpus.bank, &split.test, lang, &opts, &prepare)?;
    Ok(LanguageRun {
        language: lang.clone(),
        checkpoint: out.best,
        trace: out.trace,
        test_r1,
        model: out.model,
    })
}

/// Per-language fine-tuning followed by test evaluation.
pub fn run_training(cfg: &RunConfig, corpus: &Corpus, base: &TextEncoder) -> Result<(Vec<LanguageRun>, RetrievalReport)> {
    if cfg.train.scenario == Scenario::ZeroShot {
        return Err(Error::NoTraining);
    }
    let split = scenario_split(cfg, corpus.dataset.len())?;
    let runs = run_languages(cfg, corpus)
        .iter()
        .map(|l| train_language(cfg, corpus, base, &split, l))
        .collect::<Result<Vec<_>>>()?;
    let opts = cfg.eval_options();
    let scores = runs
        .iter()
        .map(|r| crate::eval::LanguageScore {
            language: r.language.clone(),
            recall: r.test_r1,
        })
        .collect();
    Ok((runs, RetrievalReport::new(opts.k, opts.direction, opts.mt_inference, scores)))
}

/// Evaluates `base` with the run's prompt and no training on the test split.
pub fn run_zero_shot(cfg: &RunConfig, corpus: &Corpus, base: &TextEncoder) -> Result<RetrievalReport> {
    let split = scenario_split(cfg, corpus.dataset.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.train.seed, "peft-zero-shot"));
    let model = Model::new(base.clone(), &cfg.peft, &mut rng)?;
    let prepare = prompt_fn(&cfg.peft, &corpus.translator, cfg.encoder.max_len);
    evaluate(
        &model,
        &corpus.dataset,
        &corpus.bank,
        &split.test,
        &run_languages(cfg, corpus),
        &cfg.eval_options(),
        &prepare,
    )
}

/// Test-split report for fine-tuned checkpoints, one per language, each
/// applied on top of `base`.
pub fn evaluate_checkpoints(
    cfg: &RunConfig,
    corpus: &Corpus,
    base: &TextEncoder,
    checkpoints: &[(LanguageCode, Checkpoint)],
) -> Result<RetrievalReport> {
    let split = scenario_split(cfg, corpus.dataset.len())?;
    let prepare = prompt_fn(&cfg.peft, &corpus.translator, cfg.encoder.max_len);
    let opts = cfg.eval_options();
    check_inference_mode(&cfg.alignment, opts.mt_inference);
    let scores = checkpoints
        .iter()
        .map(|(lang, ckpt)| {
            let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.train.seed, &format!("peft-{lang}")));
            let mut model = Model::new(base.clone(), &cfg.peft, &mut rng)?;
            ckpt.apply(&mut model)?;
            Ok(crate::eval::LanguageScore {
                language: lang.clone(),
                recall: evaluate_language(&model, &corpus.dataset, &corpus.bank, &split.test, lang, &opts, &prepare)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RetrievalReport::new(opts.k, opts.direction, opts.mt_inference, scores))
}

/// Grid search over `(lr, λ)` per language, sharing one base encoder.
pub fn run_sweep(cfg: &RunConfig, corpus: &Corpus, base: &TextEncoder, grid: &SweepGrid, jobs: usize) -> Result<SweepResult> {
    let split = scenario_split(cfg, corpus.dataset.len())?;
    crate::eval::sweep(grid, &run_languages(cfg, corpus), jobs, |lang, lr, lambda| {
        let mut cell = cfg.clone();
        cell.train.learning_rate = lr;
        cell.alignment.lambda = lambda;
        let run = train_language(&cell, corpus, base, &split, lang)?;
        Ok((run.checkpoint.metric, run.test_r1))
    })
}

/// The run config a sweep selected for `lang`.
pub fn selected_config(cfg: &RunConfig, result: &SweepResult, lang: &LanguageCode) -> Option<RunConfig> {
    result.best(lang).map(|c| {
        let mut out = cfg.clone();
        out.train.learning_rate = c.lr;
        out.alignment.lambda = c.lambda;
        out.eval.languages = Some(vec![lang.clone()]);
        out
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckRow {
    pub combo: char,
    pub variant: String,
    pub seed: u64,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// The four trainable PEFT variants at small sizes.
pub fn gradcheck_variants(enc: &EncoderConfig) -> Vec<(&'static str, PeftSpec)> {
    let d = enc.d_model;
    vec![
        ("adapter", PeftSpec::adapter(2)),
        ("compacter", PeftSpec::compacter(2, 2usize.max(d / 4).next_multiple_of(2), 1)),
        ("lora", PeftSpec::lora(2)),
        (
            "soft_prompt",
            PeftSpec::new(PeftVariant::SoftPrompt {
                n_tokens: 2,
                init: SoftPromptInit::Random { std: 0.1 },
            }),
        ),
    ]
}

/// Finite-difference check of `combined_loss` gradients for every ablation
/// combo × trainable PEFT variant × seed. Trainable tensors are perturbed off
/// their neutral initialization first so no path is trivially zero.
pub fn gradcheck_suite(g: &GradcheckConfig) -> Result<Vec<GradcheckRow>> {
    let enc_cfg = &g.encoder;
    let mut rows = Vec::new();
    for &seed in &g.seeds {
        let spec = CorpusSpec {
            languages: vec![LanguageCode::pivot(), LanguageCode::new("de")?],
            n_items: g.batch_size.max(3),
            seq_len: 4,
            latent_dim: enc_cfg.d_proj,
            vocab_size: enc_cfg.vocab_size,
            p_gap: vec![0.0, 0.2],
            seed,
        };
        let corpus = generate(&spec)?;
        let lang = LanguageCode::new("de")?;
        let indices: Vec<usize> = (0..g.batch_size.min(corpus.dataset.len())).collect();
        for (name, peft) in gradcheck_variants(enc_cfg) {
            let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, name));
            let enc = TextEncoder::new(enc_cfg.clone(), &mut rng)?;
            let mut model = Model::new(enc, &peft, &mut rng)?;
            for slot in model.trainable().to_vec() {
                let t = model.tensor(slot);
                let noise = Tensor::randn(t.shape(), 0.1, &mut rng);
                *model.tensor_mut(slot) = t.add(&noise)?;
            }
            let prepare = prompt_fn(&peft, &corpus.translator, enc_cfg.max_len);
            let batch = Batch::build(&corpus.dataset, &corpus.bank, &indices, &lang, &prepare)?;
            let slots = model.trainable().to_vec();
            let params: Vec<Tensor> = slots.iter().map(|&s| model.tensor(s).clone()).collect();
            for (combo, align) in ablation_combos(0.7) {
                let mt = TrainConfig::default().resolve_mt_inference(&align);
                let report = grad_check(
                    |tape, vars| {
                        let mut bound = model.bind(tape, false);
                        for (slot, &v) in slots.iter().zip(vars) {
                            match slot.owner {
                                crate::model::Owner::Encoder => bound.encoder[slot.index] = v,
                                crate::model::Owner::Peft => bound.peft[slot.index] = v,
                            }
                        }
                        Ok(combined_loss(tape, &model, &bound, &batch, &align, mt)?.total)
                    },
                    &params,
                    g.eps,
                    g.tol,
                )?;
                rows.push(GradcheckRow {
                    combo,
                    variant: name.to_string(),
                    seed,
                    max_rel_error: report.max_rel_error,
                    passed: report.passed(),
                });
            }
        }
    }
    Ok(rows)
}
