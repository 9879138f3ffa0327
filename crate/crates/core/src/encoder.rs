//! The dual encoder: a small pre-LN transformer over token ids producing the
//! text embedding, and a frozen bank of unit-norm image embeddings.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::peft::{LoraTarget, PeftModule, Site};
use crate::tensor::{Tape, Tensor, Var};

/// Prepended to every input; pooled under [`Pooling::FirstToken`].
pub const CLS_TOKEN: u32 = 0;
/// Ids `1..=PROMPT_TOKEN_COUNT` are reserved for hard-prompt words.
pub const PROMPT_TOKEN_COUNT: u32 = 8;
/// First id available to caption content.
pub const FIRST_CONTENT_TOKEN: u32 = PROMPT_TOKEN_COUNT + 1;

const LN_EPS: f64 = 1e-5;
const EMBED_STD: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    FirstToken,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub d_proj: usize,
    #[serde(default)]
    pub pooling: Pooling,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 1024,
            d_model: 32,
            n_layers: 2,
            n_heads: 4,
            d_ff: 64,
            max_len: 48,
            d_proj: 16,
            pooling: Pooling::FirstToken,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("encoder.vocab_size", self.vocab_size),
            ("encoder.d_model", self.d_model),
            ("encoder.n_heads", self.n_heads),
            ("encoder.d_ff", self.d_ff),
            ("encoder.max_len", self.max_len),
            ("encoder.d_proj", self.d_proj),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{field} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::config(format!(
                "encoder.n_heads ({}) must divide encoder.d_model ({})",
                self.n_heads, self.d_model
            )));
        }
        if self.vocab_size <= FIRST_CONTENT_TOKEN as usize {
            return Err(Error::config(format!(
                "encoder.vocab_size must exceed the {FIRST_CONTENT_TOKEN} reserved ids"
            )));
        }
        Ok(())
    }

    /// Scalars in one transformer block.
    pub fn per_layer_params(&self) -> usize {
        let d = self.d_model;
        let attention = 4 * d * d;
        let feed_forward = d * self.d_ff + self.d_ff + self.d_ff * d + d;
        let layer_norms = 2 * 2 * d;
        attention + feed_forward + layer_norms
    }

    pub fn head_params(&self) -> usize {
        self.d_model * self.d_proj + self.d_proj
    }

    pub fn layer_norm_params(&self) -> usize {
        self.n_layers * 4 * self.d_model
    }
}

/// Closed-form parameter count of the text encoder.
pub fn count_params(config: &EncoderConfig) -> usize {
    config.vocab_size * config.d_model
        + config.max_len * config.d_model
        + config.n_layers * config.per_layer_params()
        + config.head_params()
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct LayerParams {
    pub ln1_gamma: ParamId,
    pub ln1_beta: ParamId,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub ln2_gamma: ParamId,
    pub ln2_beta: ParamId,
    pub w_ff1: ParamId,
    pub b_ff1: ParamId,
    pub w_ff2: ParamId,
    pub b_ff2: ParamId,
}

impl LayerParams {
    pub fn layer_norms(&self) -> [ParamId; 4] {
        [self.ln1_gamma, self.ln1_beta, self.ln2_gamma, self.ln2_beta]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoder {
    config: EncoderConfig,
    params: ParamStore,
    pub(crate) token_embedding: ParamId,
    pub(crate) position_embedding: ParamId,
    pub(crate) layers: Vec<LayerParams>,
    pub(crate) head_w: ParamId,
    pub(crate) head_b: ParamId,
}

impl TextEncoder {
    pub fn new<R: Rng + ?Sized>(config: EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut params = ParamStore::new();
        let token_embedding = params.push(
            "token_embedding",
            Tensor::randn(&[config.vocab_size, d], EMBED_STD, rng),
        );
        let position_embedding = params.push(
            "position_embedding",
            Tensor::randn(&[config.max_len, d], EMBED_STD, rng),
        );
        let proj_std = 1.0 / (d as f64).sqrt();
        let ff_std = 1.0 / (config.d_ff as f64).sqrt();
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            layers.push(LayerParams {
                ln1_gamma: params.push(p("ln1.gamma"), Tensor::ones(&[d])),
                ln1_beta: params.push(p("ln1.beta"), Tensor::zeros(&[d])),
                w_q: params.push(p("attn.w_q"), Tensor::randn(&[d, d], proj_std, rng)),
                w_k: params.push(p("attn.w_k"), Tensor::randn(&[d, d], proj_std, rng)),
                w_v: params.push(p("attn.w_v"), Tensor::randn(&[d, d], proj_std, rng)),
                w_o: params.push(p("attn.w_o"), Tensor::randn(&[d, d], proj_std, rng)),
                ln2_gamma: params.push(p("ln2.gamma"), Tensor::ones(&[d])),
                ln2_beta: params.push(p("ln2.beta"), Tensor::zeros(&[d])),
                w_ff1: params.push(p("ff.w1"), Tensor::randn(&[d, config.d_ff], proj_std, rng)),
                b_ff1: params.push(p("ff.b1"), Tensor::zeros(&[config.d_ff])),
                w_ff2: params.push(p("ff.w2"), Tensor::randn(&[config.d_ff, d], ff_std, rng)),
                b_ff2: params.push(p("ff.b2"), Tensor::zeros(&[d])),
            });
        }
        let head_w = params.push("head.w", Tensor::randn(&[d, config.d_proj], proj_std, rng));
        let head_b = params.push("head.b", Tensor::zeros(&[config.d_proj]));
        Ok(Self {
            config,
            params,
            token_embedding,
            position_embedding,
            layers,
            head_w,
            head_b,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Exact scalar count, by enumerating the stored tensors.
    pub fn num_params(&self) -> usize {
        self.params.numel()
    }

    pub fn token_embedding(&self) -> &Tensor {
        self.params.get(self.token_embedding)
    }

    pub fn head_ids(&self) -> [ParamId; 2] {
        [self.head_w, self.head_b]
    }

    pub fn layer_norm_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(LayerParams::layer_norms).collect()
    }

    /// Checks ids and the effective length (`CLS` + prefix + tokens).
    pub fn check_input(&self, tokens: &[u32], prefix_len: usize) -> Result<()> {
        for &id in tokens {
            if id as usize >= self.config.vocab_size {
                return Err(Error::Token {
                    id,
                    vocab_size: self.config.vocab_size,
                });
            }
        }
        let len = 1 + prefix_len + tokens.len();
        if len > self.config.max_len {
            return Err(Error::Length {
                len,
                max_len: self.config.max_len,
            });
        }
        Ok(())
    }

    /// Records the forward pass for one sequence and returns the `[d_proj]`
    /// embedding. `vars` holds this encoder's parameters bound on `tape` (in
    /// store order); `peft_vars` likewise for `peft`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        peft: &PeftModule,
        peft_vars: &[Var],
        tokens: &[u32],
    ) -> Result<Var> {
        let prefix = peft.soft_prefix(peft_vars);
        let prefix_len = prefix.map_or(0, |p| tape.value(p).rows());
        self.check_input(tokens, prefix_len)?;
        let v = |id: ParamId| vars[id.0];

        let cls = tape.gather_rows(v(self.token_embedding), &[CLS_TOKEN as usize])?;
        let mut x = if tokens.is_empty() && prefix.is_none() {
            cls
        } else {
            let mut parts = vec![cls];
            parts.extend(prefix);
            if !tokens.is_empty() {
                let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
                parts.push(tape.gather_rows(v(self.token_embedding), &ids)?);
            }
            tape.concat_rows(&parts)?
        };
        let len = tape.value(x).rows();
        let positions: Vec<usize> = (0..len).collect();
        let pos = tape.gather_rows(v(self.position_embedding), &positions)?;
        x = tape.add(x, pos)?;

        let d = self.config.d_model;
        let n_heads = self.config.n_heads;
        let head_dim = d / n_heads;
        let inv_sqrt = 1.0 / (head_dim as f64).sqrt();
        for (l, lp) in self.layers.iter().enumerate() {
            let h = tape.layer_norm(x, v(lp.ln1_gamma), v(lp.ln1_beta), LN_EPS)?;
            let q = self.projection(tape, h, v(lp.w_q), peft, peft_vars, l, LoraTarget::WQ)?;
            let k = tape.matmul(h, v(lp.w_k))?;
            let val = self.projection(tape, h, v(lp.w_v), peft, peft_vars, l, LoraTarget::WV)?;
            let mut heads = Vec::with_capacity(n_heads);
            for hd in 0..n_heads {
                let (s, e) = (hd * head_dim, (hd + 1) * head_dim);
                let qh = tape.slice_cols(q, s, e)?;
                let kh = tape.slice_cols(k, s, e)?;
                let vh = tape.slice_cols(val, s, e)?;
                let kt = tape.transpose(kh)?;
                let scores = tape.matmul(qh, kt)?;
                let scores = tape.scale(scores, inv_sqrt);
                let attn = tape.softmax_rows(scores)?;
                heads.push(tape.matmul(attn, vh)?);
            }
            let merged = if n_heads == 1 {
                heads[0]
            } else {
                tape.concat_cols(&heads)?
            };
            let attn_out = tape.matmul(merged, v(lp.w_o))?;
            let attn_out = peft.adapt(tape, peft_vars, l, Site::Attention, attn_out)?;
            x = tape.add(x, attn_out)?;

            let h = tape.layer_norm(x, v(lp.ln2_gamma), v(lp.ln2_beta), LN_EPS)?;
            let f = tape.matmul(h, v(lp.w_ff1))?;
            let f = tape.add_bias(f, v(lp.b_ff1))?;
            let f = tape.gelu(f);
            let f = tape.matmul(f, v(lp.w_ff2))?;
            let f = tape.add_bias(f, v(lp.b_ff2))?;
            let f = peft.adapt(tape, peft_vars, l, Site::FeedForward, f)?;
            x = tape.add(x, f)?;
        }

        let pooled = match self.config.pooling {
            Pooling::FirstToken => tape.select_row(x, 0)?,
            Pooling::Mean => tape.mean_rows(x)?,
        };
        let pooled = tape.reshape(pooled, &[1, d])?;
        let out = tape.matmul(pooled, v(self.head_w))?;
        let out = tape.reshape(out, &[self.config.d_proj])?;
        tape.add_bias(out, v(self.head_b))
    }

    #[allow(clippy::too_many_arguments)]
    fn projection(
        &self,
        tape: &mut Tape,
        h: Var,
        w: Var,
        peft: &PeftModule,
        peft_vars: &[Var],
        layer: usize,
        target: LoraTarget,
    ) -> Result<Var> {
        let base = tape.matmul(h, w)?;
        match peft.lora_factors(peft_vars, layer, target) {
            Some((a, b)) => {
                let ha = tape.matmul(h, a)?;
                let delta = tape.matmul(ha, b)?;
                tape.add(base, delta)
            }
            None => Ok(base),
        }
    }
}

/// Frozen image embeddings keyed by image id. Vectors never enter a tape as
/// trainable leaves.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ImageBank {
    dim: usize,
    ids: Vec<String>,
    vectors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

const NORM_TOLERANCE: f64 = 1e-6;

impl ImageBank {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            ..Self::default()
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    /// Stores `v / ‖v‖`. Vectors already of unit norm up to rounding are
    /// kept as given, so a saved bank reloads bit for bit.
    pub fn insert(&mut self, id: impl Into<String>, v: Vec<f64>) -> Result<()> {
        let id = id.into();
        if v.len() != self.dim {
            return Err(Error::Dimension {
                op: "image_bank.insert",
                lhs: vec![self.dim],
                rhs: vec![v.len()],
            });
        }
        if self.index.contains_key(&id) {
            return Err(Error::config(format!("duplicate image id `{id}`")));
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::DegenerateVector { op: "image_bank.insert" });
        }
        let unit = if (norm - 1.0).abs() <= 1e-12 {
            v
        } else {
            v.into_iter().map(|x| x / norm).collect()
        };
        self.index.insert(id.clone(), self.ids.len());
        self.ids.push(id);
        self.vectors.push(Tensor::vector(unit));
        Ok(())
    }

    pub fn encode_image(&self, id: &str) -> Result<&Tensor> {
        self.index
            .get(id)
            .map(|&i| &self.vectors[i])
            .ok_or_else(|| Error::MissingImage(id.to_string()))
    }

    /// Stacks the vectors for `ids` into an `N×dim` matrix.
    pub fn matrix(&self, ids: &[&str]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(ids.len() * self.dim);
        for id in ids {
            data.extend_from_slice(self.encode_image(id)?.data());
        }
        Tensor::new(vec![ids.len(), self.dim], data)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (id, v) in self.ids.iter().zip(&self.vectors) {
            out.push_str(id);
            out.push('\t');
            for (j, x) in v.data().iter().enumerate() {
                if j > 0 {
                    out.push(',');
                }
                write!(out, "{x}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_tsv(&text, &path.display().to_string())
    }

    /// Parses `image_id<TAB>v1,v2,...` lines, re-normalizing (with a warning)
    /// any vector whose norm is off by more than 1e-6.
    pub fn parse_tsv(text: &str, source: &str) -> Result<Self> {
        let mut bank: Option<ImageBank> = None;
        for (n, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let parse_err = |msg: String| Error::Parse {
                path: source.to_string(),
                line: n + 1,
                msg,
            };
            let (id, values) = line
                .split_once('\t')
                .ok_or_else(|| parse_err("expected `image_id<TAB>values`".into()))?;
            let v = values
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| parse_err(format!("bad value: {e}")))?;
            let bank = bank.get_or_insert_with(|| ImageBank::new(v.len()));
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > NORM_TOLERANCE {
                log::warn!("{source}:{}: image `{id}` has norm {norm}; re-normalizing", n + 1);
            }
            bank.insert(id, v).map_err(|e| parse_err(e.to_string()))?;
        }
        bank.ok_or_else(|| Error::EmptyDataset(format!("{source}: no image vectors")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec_config() -> EncoderConfig {
        EncoderConfig {
            vocab_size: 512,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            max_len: 64,
            d_proj: 32,
            pooling: Pooling::FirstToken,
        }
    }

    #[test]
    fn count_matches_hand_expansion_and_enumeration() {
        let cfg = spec_config();
        // 512·64 + 64·64 + 2·(4·64² + 64·128 + 128 + 128·64 + 64 + 4·64) + 64·32 + 32
        assert_eq!(count_params(&cfg), 105_376);
        let enc = TextEncoder::new(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(enc.num_params(), 105_376);
    }

    #[test]
    fn zero_layer_count_is_embeddings_plus_head() {
        let cfg = EncoderConfig {
            n_layers: 0,
            ..spec_config()
        };
        assert_eq!(count_params(&cfg), 512 * 64 + 64 * 64 + 64 * 32 + 32);
        let enc = TextEncoder::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(enc.num_params(), count_params(&cfg));
    }

    #[test]
    fn count_is_linear_in_layers() {
        let base = spec_config();
        let doubled = EncoderConfig {
            n_layers: 4,
            ..base.clone()
        };
        assert_eq!(count_params(&doubled) - count_params(&base), 2 * base.per_layer_params());
    }

    #[test]
    fn config_validation() {
        let bad = EncoderConfig {
            n_heads: 3,
            ..spec_config()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn image_bank_lookup_and_errors() {
        let mut bank = ImageBank::new(3);
        bank.insert("a", vec![3.0, 0.0, 4.0]).unwrap();
        let v = bank.encode_image("a").unwrap();
        assert!((v.norm() - 1.0).abs() < 1e-12);
        assert_eq!(bank.encode_image("a").unwrap(), v);
        assert!(matches!(bank.encode_image("zz"), Err(Error::MissingImage(_))));
        assert!(bank.insert("b", vec![1.0]).is_err());
    }

    #[test]
    fn image_bank_tsv_renormalizes() {
        let bank = ImageBank::parse_tsv("x\t2,0\ny\t0.6,0.8\n", "mem").unwrap();
        assert_eq!(bank.encode_image("x").unwrap().data(), &[1.0, 0.0]);
        let again = ImageBank::parse_tsv(&bank.to_tsv(), "mem").unwrap();
        assert_eq!(again, bank);
        assert!(matches!(
            ImageBank::parse_tsv("x\t1,oops\n", "mem"),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(matches!(ImageBank::parse_tsv("", "mem"), Err(Error::EmptyDataset(_))));
    }
}
