//! A text encoder with its PEFT module and the freeze policy that decides
//! which tensors receive gradients.

use std::collections::BTreeMap;

use rand::Rng;

use crate::encoder::TextEncoder;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::peft::{PeftModule, PeftSpec, PeftVariant, Unfreeze};
use crate::tensor::{Tape, Tensor, Var};

/// Which store a parameter lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Owner {
    Encoder,
    Peft,
}

/// A parameter address: owning store plus index within it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Slot {
    pub owner: Owner,
    pub index: usize,
}

/// Parameters of a [`Model`] recorded on one tape.
#[derive(Debug, Clone)]
pub struct Bound {
    pub encoder: Vec<Var>,
    pub peft: Vec<Var>,
}

impl Bound {
    pub fn var(&self, slot: Slot) -> Var {
        match slot.owner {
            Owner::Encoder => self.encoder[slot.index],
            Owner::Peft => self.peft[slot.index],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    encoder: TextEncoder,
    peft: PeftModule,
    trainable: Vec<Slot>,
}

impl Model {
    pub fn new<R: Rng + ?Sized>(encoder: TextEncoder, spec: &PeftSpec, rng: &mut R) -> Result<Self> {
        let peft = PeftModule::new(spec, &encoder, rng)?;
        Ok(Self::from_parts(encoder, peft))
    }

    /// The bare encoder, nothing trainable.
    pub fn frozen(encoder: TextEncoder) -> Self {
        Self::from_parts(encoder, PeftModule::none())
    }

    pub fn from_parts(encoder: TextEncoder, peft: PeftModule) -> Self {
        let trainable = trainable_slots(&encoder, &peft);
        Self {
            encoder,
            peft,
            trainable,
        }
    }

    pub fn encoder(&self) -> &TextEncoder {
        &self.encoder
    }

    pub fn peft(&self) -> &PeftModule {
        &self.peft
    }

    pub fn spec(&self) -> &PeftSpec {
        self.peft.spec()
    }

    pub fn into_encoder(self) -> TextEncoder {
        self.encoder
    }

    pub fn trainable(&self) -> &[Slot] {
        &self.trainable
    }

    pub fn num_trainable(&self) -> usize {
        self.trainable.iter().map(|&s| self.tensor(s).numel()).sum()
    }

    fn store(&self, owner: Owner) -> &ParamStore {
        match owner {
            Owner::Encoder => self.encoder.params(),
            Owner::Peft => self.peft.params(),
        }
    }

    pub fn tensor(&self, slot: Slot) -> &Tensor {
        self.store(slot.owner).get(crate::params::ParamId(slot.index))
    }

    pub fn tensor_mut(&mut self, slot: Slot) -> &mut Tensor {
        let id = crate::params::ParamId(slot.index);
        match slot.owner {
            Owner::Encoder => self.encoder.params_mut().get_mut(id),
            Owner::Peft => self.peft.params_mut().get_mut(id),
        }
    }

    pub fn name(&self, slot: Slot) -> &str {
        self.store(slot.owner).name(crate::params::ParamId(slot.index))
    }

    pub fn find(&self, name: &str) -> Option<Slot> {
        let enc = self.encoder.params().find(name).map(|id| Slot {
            owner: Owner::Encoder,
            index: id.0,
        });
        enc.or_else(|| {
            self.peft.params().find(name).map(|id| Slot {
                owner: Owner::Peft,
                index: id.0,
            })
        })
    }

    /// Every parameter by name, encoder first.
    pub fn all_slots(&self) -> Vec<Slot> {
        let enc = self.encoder.params().ids().map(|id| Slot {
            owner: Owner::Encoder,
            index: id.0,
        });
        let peft = self.peft.params().ids().map(|id| Slot {
            owner: Owner::Peft,
            index: id.0,
        });
        enc.chain(peft).collect()
    }

    /// Trainable tensors by name.
    pub fn trainable_tensors(&self) -> BTreeMap<String, Tensor> {
        self.trainable
            .iter()
            .map(|&s| (self.name(s).to_string(), self.tensor(s).clone()))
            .collect()
    }

    /// Overwrites named tensors; every name must exist with a matching shape.
    pub fn load_tensors(&mut self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, t) in tensors {
            let slot = self
                .find(name)
                .ok_or_else(|| Error::config(format!("checkpoint tensor {name} has no matching parameter")))?;
            let dst = self.tensor_mut(slot);
            if dst.shape() != t.shape() {
                return Err(Error::Dimension {
                    op: "load_tensors",
                    lhs: dst.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            *dst = t.clone();
        }
        Ok(())
    }

    /// Records every parameter on `tape`; trainable ones require gradients
    /// when `train` is set.
    pub fn bind(&self, tape: &mut Tape, train: bool) -> Bound {
        let mut mask_enc = vec![false; self.encoder.params().len()];
        let mut mask_peft = vec![false; self.peft.params().len()];
        if train {
            for s in &self.trainable {
                match s.owner {
                    Owner::Encoder => mask_enc[s.index] = true,
                    Owner::Peft => mask_peft[s.index] = true,
                }
            }
        }
        let encoder = self
            .encoder
            .params()
            .iter()
            .zip(mask_enc)
            .map(|((_, t), g)| tape.leaf(t.clone(), g))
            .collect();
        let peft = self
            .peft
            .params()
            .iter()
            .zip(mask_peft)
            .map(|((_, t), g)| tape.leaf(t.clone(), g))
            .collect();
        Bound { encoder, peft }
    }

    pub fn encode(&self, tape: &mut Tape, bound: &Bound, tokens: &[u32]) -> Result<Var> {
        self.encoder.forward(tape, &bound.encoder, &self.peft, &bound.peft, tokens)
    }

    /// The `[d_proj]` text embedding, without gradients.
    pub fn encode_text(&self, tokens: &[u32]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let out = self.encode(&mut tape, &bound, tokens)?;
        Ok(tape.value(out).clone())
    }

    /// Stacks embeddings of `texts` into `[N×d_proj]`.
    pub fn encode_texts(&self, texts: &[Vec<u32>]) -> Result<Tensor> {
        let d = self.encoder.config().d_proj;
        let mut data = Vec::with_capacity(texts.len() * d);
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let mark = tape.len();
        for t in texts {
            let out = self.encode(&mut tape, &bound, t)?;
            data.extend_from_slice(tape.value(out).data());
            tape.truncate(mark);
        }
        Tensor::new(vec![texts.len(), d], data)
    }
}

fn trainable_slots(encoder: &TextEncoder, peft: &PeftModule) -> Vec<Slot> {
    let enc = |id: crate::params::ParamId| Slot {
        owner: Owner::Encoder,
        index: id.0,
    };
    let spec = peft.spec();
    let mut slots: Vec<Slot> = if matches!(spec.variant, PeftVariant::Full) {
        encoder.params().ids().map(enc).collect()
    } else {
        let mut v = Vec::new();
        for u in spec.unfreeze_set() {
            match u {
                Unfreeze::LinearHead => v.extend(encoder.head_ids().map(enc)),
                Unfreeze::LayerNorm => v.extend(encoder.layer_norm_ids().into_iter().map(enc)),
            }
        }
        v
    };
    slots.extend(peft.params().ids().map(|id| Slot {
        owner: Owner::Peft,
        index: id.0,
    }));
    slots.sort();
    slots.dedup();
    slots
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::peft::{count_trainable, SoftPromptInit};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn encoder() -> TextEncoder {
        let cfg = EncoderConfig {
            vocab_size: 64,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            max_len: 16,
            d_proj: 8,
            ..EncoderConfig::default()
        };
        TextEncoder::new(cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    #[test]
    fn trainable_count_matches_closed_form() {
        let enc = encoder();
        for spec in [
            PeftSpec::adapter(2),
            PeftSpec::compacter(2, 4, 1),
            PeftSpec::lora(2),
            PeftSpec::new(PeftVariant::Full),
            PeftSpec::default(),
        ] {
            let m = Model::new(enc.clone(), &spec, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
            assert_eq!(m.num_trainable(), count_trainable(&spec, enc.config()).0, "{spec:?}");
        }
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let enc = encoder();
        let m = Model::new(enc, &PeftSpec::lora(2), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape, true);
        let out = m.encode(&mut tape, &bound, &[9, 10, 11]).unwrap();
        let loss = tape.sum(out);
        let grads = tape.backward(loss).unwrap();
        for s in m.all_slots() {
            let has = grads.get_slice(bound.var(s)).is_some();
            assert_eq!(has, m.trainable().contains(&s), "{}", m.name(s));
        }
    }

    #[test]
    fn soft_prompt_changes_output_and_length() {
        let enc = encoder();
        let spec = PeftSpec::new(PeftVariant::SoftPrompt {
            n_tokens: 3,
            init: SoftPromptInit::Random { std: 0.5 },
        });
        let m = Model::new(enc.clone(), &spec, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let base = Model::frozen(enc);
        let tokens = [9, 10, 11];
        assert_ne!(m.encode_text(&tokens).unwrap(), base.encode_text(&tokens).unwrap());
        // 1 + 3 + 12 = 16 fits, one more token does not
        assert!(m.encode_text(&[9; 12]).is_ok());
        assert!(matches!(m.encode_text(&[9; 13]), Err(Error::Length { len: 17, .. })));
    }

    #[test]
    fn encode_texts_matches_single() {
        let m = Model::frozen(encoder());
        let texts = vec![vec![9, 10], vec![], vec![12, 13, 14]];
        let all = m.encode_texts(&texts).unwrap();
        for (i, t) in texts.iter().enumerate() {
            assert_eq!(all.row(i), m.encode_text(t).unwrap().data());
        }
    }

    #[test]
    fn token_errors() {
        let m = Model::frozen(encoder());
        assert!(matches!(m.encode_text(&[64]), Err(Error::Token { id: 64, .. })));
    }
}
