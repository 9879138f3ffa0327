//! Synthetic parallel corpus with a controllable translation gap.
//!
//! Each item is a latent vector `z`. Its image is `z/‖z‖`; its English
//! caption quantizes `z` into content tokens. Every other language relabels
//! the content vocabulary with its own permutation `π_L`, so a model trained
//! on English sees target-language text as unfamiliar ids. Natural target
//! captions and machine translations both pass through independent token
//! noise at the language's `p_gap`, so translated and natural text are close
//! but not equal.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::{ImageBank, FIRST_CONTENT_TOKEN, PROMPT_TOKEN_COUNT};
use crate::error::{Error, Result};

pub const PIVOT: &str = "en";

/// Short language tag such as `en` or `de`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct LanguageCode(String);

impl LanguageCode {
    pub fn new(tag: impl Into<String>) -> Result<Self> {
        let tag = tag.into();
        let ok = (2..=8).contains(&tag.len())
            && tag.starts_with(|c: char| c.is_ascii_lowercase())
            && tag.chars().all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '-');
        if !ok {
            return Err(Error::config(format!("invalid language tag {tag:?}")));
        }
        Ok(Self(tag))
    }

    pub fn pivot() -> Self {
        Self(PIVOT.to_string())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn is_pivot(&self) -> bool {
        self.0 == PIVOT
    }
}

impl TryFrom<String> for LanguageCode {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        Self::new(s)
    }
}

impl From<LanguageCode> for String {
    fn from(l: LanguageCode) -> String {
        l.0
    }
}

impl fmt::Display for LanguageCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Which rendering of a caption a token sequence is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum View {
    Natural,
    /// The English caption machine-translated into this language.
    MtFromPivot,
    /// This language's natural caption machine-translated into English.
    MtToPivot,
}

impl View {
    pub const ALL: [View; 3] = [View::Natural, View::MtFromPivot, View::MtToPivot];

    pub fn as_str(self) -> &'static str {
        match self {
            View::Natural => "natural",
            View::MtFromPivot => "mt_from_pivot",
            View::MtToPivot => "mt_to_pivot",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.as_str() == s)
    }
}

/// Translation between languages of a corpus.
///
/// Reserved ids (`CLS` and the prompt block) pass through `translate`
/// unchanged; prompts are translated separately by `translate_prompt`.
pub trait Translator: Send + Sync {
    fn pivot(&self) -> &LanguageCode;

    fn translate(&self, tokens: &[u32], from: &LanguageCode, to: &LanguageCode) -> Result<Vec<u32>>;

    /// A pivot-language prompt rendered in `to`.
    fn translate_prompt(&self, template: &[u32], to: &LanguageCode) -> Result<Vec<u32>>;
}

#[derive(Debug, Clone, PartialEq)]
struct LanguageTable {
    /// Content-id permutation indexed by `id - FIRST_CONTENT_TOKEN`.
    forward: Vec<u32>,
    inverse: Vec<u32>,
    /// Prompt-id permutation indexed by `id - 1`.
    prompt: Vec<u32>,
    p_gap: f64,
}

/// Permutation-plus-noise translation simulator.
#[derive(Debug, Clone, PartialEq)]
pub struct TranslationModel {
    pivot: LanguageCode,
    vocab_size: usize,
    seed: u64,
    tables: BTreeMap<LanguageCode, LanguageTable>,
}

impl TranslationModel {
    /// `languages` pairs each tag with its `p_gap`; the pivot's gap is ignored.
    pub fn new(languages: &[(LanguageCode, f64)], vocab_size: usize, seed: u64) -> Result<Self> {
        if vocab_size <= FIRST_CONTENT_TOKEN as usize {
            return Err(Error::config(format!("vocab_size {vocab_size} leaves no content ids")));
        }
        let pivot = LanguageCode::pivot();
        if !languages.iter().any(|(l, _)| *l == pivot) {
            return Err(Error::config("languages must include the pivot \"en\""));
        }
        let usable = vocab_size - FIRST_CONTENT_TOKEN as usize;
        let mut tables = BTreeMap::new();
        for (lang, p_gap) in languages {
            if !(0.0..1.0).contains(p_gap) {
                return Err(Error::config(format!("p_gap for {lang} must lie in [0, 1), got {p_gap}")));
            }
            let mut forward: Vec<u32> = (FIRST_CONTENT_TOKEN..vocab_size as u32).collect();
            let mut prompt: Vec<u32> = (1..=PROMPT_TOKEN_COUNT).collect();
            if !lang.is_pivot() {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["perm", lang.as_str()]));
                forward.shuffle(&mut rng);
                prompt.shuffle(&mut rng);
            }
            let mut inverse = vec![0; usable];
            for (i, &t) in forward.iter().enumerate() {
                inverse[(t - FIRST_CONTENT_TOKEN) as usize] = FIRST_CONTENT_TOKEN + i as u32;
            }
            let p_gap = if lang.is_pivot() { 0.0 } else { *p_gap };
            if tables
                .insert(
                    lang.clone(),
                    LanguageTable {
                        forward,
                        inverse,
                        prompt,
                        p_gap,
                    },
                )
                .is_some()
            {
                return Err(Error::config(format!("language {lang} listed twice")));
            }
        }
        Ok(Self {
            pivot,
            vocab_size,
            seed,
            tables,
        })
    }

    fn table(&self, lang: &LanguageCode) -> Result<&LanguageTable> {
        self.tables
            .get(lang)
            .ok_or_else(|| Error::config(format!("unknown language {lang}")))
    }

    pub fn p_gap(&self, lang: &LanguageCode) -> Result<f64> {
        Ok(self.table(lang)?.p_gap)
    }

    /// `π_L` without noise.
    pub fn permute(&self, tokens: &[u32], lang: &LanguageCode) -> Result<Vec<u32>> {
        let table = self.table(lang)?;
        Ok(tokens.iter().map(|&t| self.map_content(t, &table.forward)).collect())
    }

    pub fn unpermute(&self, tokens: &[u32], lang: &LanguageCode) -> Result<Vec<u32>> {
        let table = self.table(lang)?;
        Ok(tokens.iter().map(|&t| self.map_content(t, &table.inverse)).collect())
    }

    fn map_content(&self, t: u32, map: &[u32]) -> u32 {
        if t >= FIRST_CONTENT_TOKEN && (t as usize) < self.vocab_size {
            map[(t - FIRST_CONTENT_TOKEN) as usize]
        } else {
            t
        }
    }

    /// Replaces each content token with a uniform content id w.p. `p`.
    pub fn add_noise<R: Rng + ?Sized>(&self, tokens: &mut [u32], p: f64, rng: &mut R) {
        add_noise(tokens, p, self.vocab_size, rng);
    }
}

fn add_noise<R: Rng + ?Sized>(tokens: &mut [u32], p: f64, vocab_size: usize, rng: &mut R) {
    if p <= 0.0 {
        return;
    }
    for t in tokens.iter_mut() {
        if *t >= FIRST_CONTENT_TOKEN && rng.random::<f64>() < p {
            *t = rng.random_range(FIRST_CONTENT_TOKEN..vocab_size as u32);
        }
    }
}

fn derive_seed(seed: u64, parts: &[&str]) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

impl Translator for TranslationModel {
    fn pivot(&self) -> &LanguageCode {
        &self.pivot
    }

    /// Noise draws are seeded by `(seed, from, to, tokens)`, so translating
    /// the same input twice gives the same output.
    fn translate(&self, tokens: &[u32], from: &LanguageCode, to: &LanguageCode) -> Result<Vec<u32>> {
        let (src, dst) = (self.table(from)?, self.table(to)?);
        if from == to {
            return Ok(tokens.to_vec());
        }
        let mut out: Vec<u32> = tokens
            .iter()
            .map(|&t| self.map_content(self.map_content(t, &src.inverse), &dst.forward))
            .collect();
        let p = src.p_gap.max(dst.p_gap);
        let text: Vec<String> = tokens.iter().map(u32::to_string).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            self.seed,
            &["mt", from.as_str(), to.as_str(), &text.join(" ")],
        ));
        add_noise(&mut out, p, self.vocab_size, &mut rng);
        Ok(out)
    }

    fn translate_prompt(&self, template: &[u32], to: &LanguageCode) -> Result<Vec<u32>> {
        let table = self.table(to)?;
        template
            .iter()
            .map(|&t| {
                if (1..=PROMPT_TOKEN_COUNT).contains(&t) {
                    Ok(table.prompt[(t - 1) as usize])
                } else {
                    Err(Error::Token {
                        id: t,
                        vocab_size: self.vocab_size,
                    })
                }
            })
            .collect()
    }
}

fn default_languages() -> Vec<LanguageCode> {
    ["en", "de", "fr", "ko"].map(|l| LanguageCode(l.into())).into()
}

fn default_n_items() -> usize {
    1000
}

fn default_seq_len() -> usize {
    16
}

fn default_latent_dim() -> usize {
    16
}

fn default_vocab_size() -> usize {
    1024
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    #[serde(default = "default_languages")]
    pub languages: Vec<LanguageCode>,
    #[serde(default = "default_n_items")]
    pub n_items: usize,
    #[serde(default = "default_seq_len")]
    pub seq_len: usize,
    /// Must equal the encoder's `d_proj`.
    #[serde(default = "default_latent_dim")]
    pub latent_dim: usize,
    #[serde(default = "default_vocab_size")]
    pub vocab_size: usize,
    /// Per-language gap, aligned with `languages`. Empty means graded
    /// defaults: 0 for the pivot, then 0.05, 0.1, 0.2, … for the rest.
    #[serde(default)]
    pub p_gap: Vec<f64>,
    #[serde(default)]
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            languages: default_languages(),
            n_items: default_n_items(),
            seq_len: default_seq_len(),
            latent_dim: default_latent_dim(),
            vocab_size: default_vocab_size(),
            p_gap: Vec::new(),
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_items < 3 {
            return Err(Error::config(format!("corpus.n_items must be at least 3, got {}", self.n_items)));
        }
        if self.languages.is_empty() {
            return Err(Error::config("corpus.languages must not be empty"));
        }
        for (i, l) in self.languages.iter().enumerate() {
            if self.languages[..i].contains(l) {
                return Err(Error::config(format!("corpus.languages lists {l} twice")));
            }
        }
        if !self.languages.iter().any(LanguageCode::is_pivot) {
            return Err(Error::config("corpus.languages must include the pivot \"en\""));
        }
        if !self.p_gap.is_empty() && self.p_gap.len() != self.languages.len() {
            return Err(Error::config(format!(
                "corpus.p_gap has {} entries for {} languages",
                self.p_gap.len(),
                self.languages.len()
            )));
        }
        if let Some(p) = self.p_gap.iter().find(|p| !(0.0..1.0).contains(*p)) {
            return Err(Error::config(format!("corpus.p_gap values must lie in [0, 1), got {p}")));
        }
        if self.seq_len == 0 || self.latent_dim == 0 {
            return Err(Error::config("corpus.seq_len and corpus.latent_dim must be positive"));
        }
        if self.buckets() < 2 {
            return Err(Error::config(format!(
                "corpus.vocab_size {} is too small for latent_dim {}",
                self.vocab_size, self.latent_dim
            )));
        }
        Ok(())
    }

    /// Content ids available to each latent dimension.
    pub fn buckets(&self) -> usize {
        self.vocab_size.saturating_sub(FIRST_CONTENT_TOKEN as usize) / self.latent_dim.max(1)
    }

    /// `(language, p_gap)` pairs after applying graded defaults.
    pub fn gaps(&self) -> Vec<(LanguageCode, f64)> {
        if !self.p_gap.is_empty() {
            return self.languages.iter().cloned().zip(self.p_gap.iter().copied()).collect();
        }
        let mut next: f64 = 0.05;
        self.languages
            .iter()
            .map(|l| {
                if l.is_pivot() {
                    (l.clone(), 0.0)
                } else {
                    let p = next;
                    next = (next * 2.0).min(0.5);
                    (l.clone(), p)
                }
            })
            .collect()
    }

    pub fn translation_model(&self) -> Result<TranslationModel> {
        self.validate()?;
        TranslationModel::new(&self.gaps(), self.vocab_size, self.seed)
    }

    /// The English caption of latent `z`: position `j` reads dimension
    /// `j mod d`, quantized over `[-3, 3]` into that dimension's id block.
    pub fn quantize(&self, z: &[f64]) -> Vec<u32> {
        let b = self.buckets();
        (0..self.seq_len)
            .map(|j| {
                let dim = j % z.len();
                let bucket = (((z[dim] + 3.0) / 6.0 * b as f64).floor().max(0.0) as usize).min(b - 1);
                FIRST_CONTENT_TOKEN + (dim * b + bucket) as u32
            })
            .collect()
    }
}

/// All renderings of one caption in one language.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TextViews {
    pub natural: Vec<u32>,
    pub mt_from_pivot: Option<Vec<u32>>,
    pub mt_to_pivot: Option<Vec<u32>>,
}

impl TextViews {
    fn slot(&mut self, view: View) -> &mut Option<Vec<u32>> {
        match view {
            View::MtFromPivot => &mut self.mt_from_pivot,
            View::MtToPivot => &mut self.mt_to_pivot,
            View::Natural => unreachable!("natural view is not optional"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub image_id: String,
    pub texts: BTreeMap<LanguageCode, TextViews>,
}

/// Index-aligned captions for a set of images.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    languages: Vec<LanguageCode>,
    samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(languages: Vec<LanguageCode>, samples: Vec<Sample>) -> Result<Self> {
        if !languages.iter().any(LanguageCode::is_pivot) {
            return Err(Error::config("dataset languages must include the pivot \"en\""));
        }
        for s in &samples {
            for l in &languages {
                if !s.texts.contains_key(l) {
                    return Err(Error::config(format!("sample {} has no {l} caption", s.image_id)));
                }
            }
        }
        Ok(Self { languages, samples })
    }

    pub fn languages(&self) -> &[LanguageCode] {
        &self.languages
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn image_ids(&self) -> Vec<&str> {
        self.samples.iter().map(|s| s.image_id.as_str()).collect()
    }

    pub fn has_language(&self, lang: &LanguageCode) -> bool {
        self.languages.contains(lang)
    }

    /// One rendering of sample `i`. Translation views of the pivot are the
    /// natural text, since translation is the identity there.
    pub fn text(&self, i: usize, lang: &LanguageCode, view: View) -> Result<&[u32]> {
        let sample = &self.samples[i];
        let views = sample
            .texts
            .get(lang)
            .ok_or_else(|| Error::BatchConstruction(format!("sample {} has no {lang} caption", sample.image_id)))?;
        let found = match view {
            View::Natural => Some(&views.natural),
            _ if lang.is_pivot() => Some(&views.natural),
            View::MtFromPivot => views.mt_from_pivot.as_ref(),
            View::MtToPivot => views.mt_to_pivot.as_ref(),
        };
        found.map(Vec::as_slice).ok_or_else(|| {
            Error::BatchConstruction(format!(
                "sample {} lacks the {lang} {} view",
                sample.image_id,
                view.as_str()
            ))
        })
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            languages: self.languages.clone(),
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    /// Keeps only `langs` (the pivot is always retained).
    pub fn restrict_languages(&self, langs: &[LanguageCode]) -> Result<Self> {
        for l in langs {
            if !self.has_language(l) {
                return Err(Error::config(format!("language {l} is not in the dataset")));
            }
        }
        let keep: Vec<LanguageCode> = self
            .languages
            .iter()
            .filter(|l| l.is_pivot() || langs.contains(l))
            .cloned()
            .collect();
        let samples = self
            .samples
            .iter()
            .map(|s| Sample {
                image_id: s.image_id.clone(),
                texts: s.texts.iter().filter(|(l, _)| keep.contains(l)).map(|(l, v)| (l.clone(), v.clone())).collect(),
            })
            .collect();
        Ok(Self {
            languages: keep,
            samples,
        })
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for s in &self.samples {
            for l in &self.languages {
                let v = &s.texts[l];
                let rows = [
                    (View::Natural, Some(&v.natural)),
                    (View::MtFromPivot, v.mt_from_pivot.as_ref()),
                    (View::MtToPivot, v.mt_to_pivot.as_ref()),
                ];
                for (view, tokens) in rows {
                    if let Some(tokens) = tokens {
                        let ids: Vec<String> = tokens.iter().map(u32::to_string).collect();
                        out.push_str(&format!("{}\t{l}\t{}\t{}\n", s.image_id, view.as_str(), ids.join(" ")));
                    }
                }
            }
        }
        out
    }

    pub fn save_tsv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv())?;
        Ok(())
    }

    pub fn load_tsv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_tsv(&text, &path.display().to_string())
    }

    pub fn parse_tsv(text: &str, source: &str) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Parse {
            path: source.to_string(),
            line,
            msg,
        };
        let mut languages: Vec<LanguageCode> = Vec::new();
        let mut order: Vec<String> = Vec::new();
        let mut rows: HashMap<String, BTreeMap<LanguageCode, (Option<Vec<u32>>, TextViews)>> = HashMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            if raw.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = raw.split('\t').collect();
            if fields.len() != 4 {
                return Err(err(line, format!("expected 4 tab-separated fields, found {}", fields.len())));
            }
            let id = fields[0].trim();
            if id.is_empty() {
                return Err(err(line, "empty image id".into()));
            }
            let lang = LanguageCode::new(fields[1].trim())
                .map_err(|_| err(line, format!("unknown language tag {:?}", fields[1])))?;
            let view = View::parse(fields[2].trim()).ok_or_else(|| err(line, format!("unknown view {:?}", fields[2])))?;
            let tokens = fields[3]
                .split_whitespace()
                .map(|t| t.parse::<u32>().map_err(|_| err(line, format!("non-integer token {t:?}"))))
                .collect::<Result<Vec<u32>>>()?;
            if !languages.contains(&lang) {
                languages.push(lang.clone());
            }
            let entry = rows.entry(id.to_string()).or_insert_with(|| {
                order.push(id.to_string());
                BTreeMap::new()
            });
            let (natural, views) = entry.entry(lang.clone()).or_default();
            let slot = match view {
                View::Natural => natural,
                other => views.slot(other),
            };
            if slot.is_some() {
                return Err(err(line, format!("duplicate {} view for {id}/{lang}", view.as_str())));
            }
            *slot = Some(tokens);
        }
        if order.is_empty() {
            return Err(Error::EmptyDataset(source.to_string()));
        }
        if !languages.iter().any(LanguageCode::is_pivot) {
            return Err(err(0, "no pivot (en) captions".into()));
        }
        let mut samples = Vec::with_capacity(order.len());
        for id in order {
            let mut entry = rows.remove(&id).expect("recorded id");
            let mut texts = BTreeMap::new();
            for l in &languages {
                let (natural, mut views) = entry
                    .remove(l)
                    .ok_or_else(|| err(0, format!("sample {id} has no {l} caption")))?;
                views.natural = natural.ok_or_else(|| err(0, format!("sample {id} has no natural {l} caption")))?;
                texts.insert(l.clone(), views);
            }
            samples.push(Sample { image_id: id, texts });
        }
        Self::new(languages, samples)
    }
}

/// A generated dataset with its image bank and translator.
#[derive(Debug, Clone)]
pub struct GeneratedCorpus {
    pub dataset: Dataset,
    pub bank: ImageBank,
    pub translator: TranslationModel,
}

pub fn generate(spec: &CorpusSpec) -> Result<GeneratedCorpus> {
    spec.validate()?;
    let translator = spec.translation_model()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &["corpus"]));
    let mut bank = ImageBank::new(spec.latent_dim);
    let mut samples = Vec::with_capacity(spec.n_items);
    let width = spec.n_items.to_string().len().max(4);
    let pivot = LanguageCode::pivot();
    for i in 0..spec.n_items {
        let z: Vec<f64> = loop {
            let z: Vec<f64> = (0..spec.latent_dim).map(|_| rng.sample(StandardNormal)).collect();
            if z.iter().any(|v: &f64| *v != 0.0) {
                break z;
            }
        };
        let image_id = format!("img{i:0width$}");
        bank.insert(image_id.clone(), z.clone())?;
        let english = spec.quantize(&z);
        let mut texts = BTreeMap::new();
        for (lang, p_gap) in spec.gaps() {
            if lang.is_pivot() {
                texts.insert(
                    lang,
                    TextViews {
                        natural: english.clone(),
                        ..TextViews::default()
                    },
                );
                continue;
            }
            let mut natural = translator.permute(&english, &lang)?;
            add_noise(&mut natural, p_gap, spec.vocab_size, &mut rng);
            let mt_from_pivot = translator.translate(&english, &pivot, &lang)?;
            let mt_to_pivot = translator.translate(&natural, &lang, &pivot)?;
            texts.insert(
                lang,
                TextViews {
                    natural,
                    mt_from_pivot: Some(mt_from_pivot),
                    mt_to_pivot: Some(mt_to_pivot),
                },
            );
        }
        samples.push(Sample { image_id, texts });
    }
    Ok(GeneratedCorpus {
        dataset: Dataset::new(spec.languages.clone(), samples)?,
        bank,
        translator,
    })
}

/// Disjoint train/dev/test index sets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub dev: Vec<usize>,
    pub test: Vec<usize>,
}

/// Random 5%/5%/90% split (50/50/900 for 1000 items), shared by all
/// languages since they caption the same images.
pub fn split_few_shot(n: usize, seed: u64) -> Result<Split> {
    split_proportional(n, 0.05, 0.05, seed)
}

pub fn split_proportional(n: usize, train_frac: f64, dev_frac: f64, seed: u64) -> Result<Split> {
    if !(train_frac > 0.0 && dev_frac > 0.0 && train_frac + dev_frac < 1.0) {
        return Err(Error::config(format!(
            "split fractions {train_frac}/{dev_frac} must be positive and sum below 1"
        )));
    }
    let n_train = (n as f64 * train_frac).round() as usize;
    let n_dev = (n as f64 * dev_frac).round() as usize;
    if n_train == 0 || n_dev == 0 || n_train + n_dev >= n {
        return Err(Error::Size(format!(
            "{n} items cannot be split {train_frac}/{dev_frac}/rest with every part non-empty"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["split"]));
    idx.shuffle(&mut rng);
    let test = idx.split_off(n_train + n_dev);
    let dev = idx.split_off(n_train);
    Ok(Split { train: idx, dev, test })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lang(s: &str) -> LanguageCode {
        LanguageCode::new(s).unwrap()
    }

    fn small_spec() -> CorpusSpec {
        CorpusSpec {
            n_items: 40,
            seq_len: 12,
            latent_dim: 8,
            vocab_size: 521,
            ..CorpusSpec::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&small_spec()).unwrap();
        let b = generate(&small_spec()).unwrap();
        assert_eq!(a.dataset.to_tsv(), b.dataset.to_tsv());
        assert_eq!(a.bank.to_tsv(), b.bank.to_tsv());
    }

    #[test]
    fn zero_gap_natural_is_permuted_english() {
        let spec = CorpusSpec {
            p_gap: vec![0.0, 0.0, 0.1, 0.2],
            ..small_spec()
        };
        let c = generate(&spec).unwrap();
        let de = lang("de");
        for i in 0..c.dataset.len() {
            let en = c.dataset.text(i, &LanguageCode::pivot(), View::Natural).unwrap();
            let nat = c.dataset.text(i, &de, View::Natural).unwrap();
            assert_eq!(c.translator.permute(en, &de).unwrap(), nat);
            // routine-3 view collapses onto the pivot text
            assert_eq!(c.dataset.text(i, &de, View::MtToPivot).unwrap(), en);
        }
    }

    #[test]
    fn round_trip_and_identity() {
        let spec = CorpusSpec {
            p_gap: vec![0.0, 0.0, 0.0, 0.0],
            ..small_spec()
        };
        let tm = spec.translation_model().unwrap();
        let (en, de) = (LanguageCode::pivot(), lang("de"));
        let x: Vec<u32> = vec![0, 3, 9, 100, 520, 7, 44];
        assert_eq!(tm.translate(&x, &en, &en).unwrap(), x);
        let there = tm.translate(&x, &en, &de).unwrap();
        assert_ne!(there, x);
        assert_eq!(tm.translate(&there, &de, &en).unwrap(), x);
        // reserved ids pass through
        assert_eq!(&there[..2], &[0, 3]);
        assert_eq!(there[5], 7);
    }

    #[test]
    fn translate_is_deterministic_with_noise() {
        let tm = small_spec().translation_model().unwrap();
        let x: Vec<u32> = (9..60).collect();
        let a = tm.translate(&x, &LanguageCode::pivot(), &lang("ko")).unwrap();
        let b = tm.translate(&x, &LanguageCode::pivot(), &lang("ko")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unknown_language_is_config_error() {
        let tm = small_spec().translation_model().unwrap();
        let err = tm.translate(&[9], &LanguageCode::pivot(), &lang("xx")).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn prompt_translation_permutes_reserved_block() {
        let tm = small_spec().translation_model().unwrap();
        let all: Vec<u32> = (1..=8).collect();
        assert_eq!(tm.translate_prompt(&all, &LanguageCode::pivot()).unwrap(), all);
        let mut fr = tm.translate_prompt(&all, &lang("fr")).unwrap();
        fr.sort();
        assert_eq!(fr, all);
        assert!(tm.translate_prompt(&[9], &lang("fr")).is_err());
    }

    #[test]
    fn hamming_distance_tracks_gap() {
        // Mean differing positions ≈ seq_len · p · (1 − 1/usable).
        let mut total = 0.0;
        let seeds = 5;
        for seed in 0..seeds {
            let spec = CorpusSpec {
                n_items: 1000,
                seq_len: 20,
                p_gap: vec![0.0, 0.2, 0.2, 0.2],
                seed,
                ..CorpusSpec::default()
            };
            let c = generate(&spec).unwrap();
            let de = lang("de");
            for i in 0..c.dataset.len() {
                let en = c.dataset.text(i, &LanguageCode::pivot(), View::Natural).unwrap();
                let clean = c.translator.permute(en, &de).unwrap();
                let nat = c.dataset.text(i, &de, View::Natural).unwrap();
                total += clean.iter().zip(nat).filter(|(a, b)| a != b).count() as f64;
            }
        }
        let mean = total / (1000 * seeds) as f64;
        assert!((mean - 4.0).abs() < 0.5, "mean Hamming distance {mean}");
    }

    #[test]
    fn split_sizes_and_disjointness() {
        let s = split_few_shot(1000, 3).unwrap();
        assert_eq!((s.train.len(), s.dev.len(), s.test.len()), (50, 50, 900));
        let mut all: Vec<usize> = s.train.iter().chain(&s.dev).chain(&s.test).copied().collect();
        all.sort();
        assert_eq!(all, (0..1000).collect::<Vec<_>>());
        assert_eq!(s, split_few_shot(1000, 3).unwrap());
        assert_ne!(s.train, split_few_shot(1000, 4).unwrap().train);
        assert!(matches!(split_few_shot(5, 0), Err(Error::Size(_))));
    }

    #[test]
    fn tsv_round_trip() {
        let c = generate(&small_spec()).unwrap();
        let text = c.dataset.to_tsv();
        assert_eq!(Dataset::parse_tsv(&text, "mem").unwrap(), c.dataset);
    }

    #[test]
    fn tsv_errors_name_lines() {
        assert!(matches!(Dataset::parse_tsv("", "x"), Err(Error::EmptyDataset(_))));
        let bad = "img0\ten\tnatural\t9 10\nimg0\tEN!\tnatural\t9\n";
        match Dataset::parse_tsv(bad, "x") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        let bad = "img0\ten\tnatural\t9 x\n";
        assert!(matches!(Dataset::parse_tsv(bad, "x"), Err(Error::Parse { line: 1, .. })));
        let bad = "img0\ten\tsummary\t9\n";
        assert!(matches!(Dataset::parse_tsv(bad, "x"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn missing_view_fails_at_batch_time() {
        let text = "img0\ten\tnatural\t9 10\nimg0\tde\tnatural\t11 12\n";
        let d = Dataset::parse_tsv(text, "x").unwrap();
        assert!(d.text(0, &lang("de"), View::Natural).is_ok());
        assert!(matches!(d.text(0, &lang("de"), View::MtFromPivot), Err(Error::BatchConstruction(_))));
    }

    #[test]
    fn every_image_resolves() {
        let c = generate(&small_spec()).unwrap();
        for id in c.dataset.image_ids() {
            assert!(c.bank.contains(id));
        }
    }

    #[test]
    fn spec_validation() {
        let dup = CorpusSpec {
            languages: vec![lang("en"), lang("de"), lang("de")],
            ..small_spec()
        };
        assert!(dup.validate().is_err());
        let no_pivot = CorpusSpec {
            languages: vec![lang("de")],
            ..small_spec()
        };
        assert!(no_pivot.validate().is_err());
        assert!(CorpusSpec { n_items: 2, ..small_spec() }.validate().is_err());
        assert!(serde_json::from_str::<CorpusSpec>(r#"{"languages": ["en", "D E"]}"#).is_err());
    }
}
