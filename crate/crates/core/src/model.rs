//! Full model: visual tower feeding the adapted decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{vocab, DataSpec, SyntheticSample};
use crate::decoder::{AdapterKind, DecoderConfig, DecoderOutput, MMDecoder};
use crate::error::{Error, Result};
use crate::mmlora::MMLoRAConfig;
use crate::modality::MultimodalSequence;
use crate::params::{ParamGroup, ParamStore};
use crate::tensor::{Tape, Tensor, Var};
use crate::vision::{VisionConfig, VisualTower};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub decoder: DecoderConfig,
    pub lora: MMLoRAConfig,
    pub adapter: AdapterKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            decoder: DecoderConfig::default(),
            lora: MMLoRAConfig::default(),
            adapter: AdapterKind::MmLora,
        }
    }
}

/// Independent RNG streams so that, for one seed, the frozen weights do not
/// depend on adapter shapes.
mod stream {
    pub const ENCODER: u64 = 1;
    pub const LADDER: u64 = 2;
    pub const ADAPTER: u64 = 3;
    pub const DECODER_BASE: u64 = 4;
    pub const LORA: u64 = 5;
}

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Switches used by the ablation and attention-export paths.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardOptions {
    pub capture_attention: bool,
    /// Evaluate decoder adapters; `false` gives the frozen base.
    pub adapters: bool,
    /// Append ladder tokens when a ladder exists.
    pub ladder: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self {
            capture_attention: false,
            adapters: true,
            ladder: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub store: ParamStore,
    pub tower: VisualTower,
    pub decoder: MMDecoder,
    pub model_cfg: ModelConfig,
    pub vision_cfg: VisionConfig,
    pub seed: u64,
}

impl Model {
    pub fn build(model_cfg: &ModelConfig, vision_cfg: &VisionConfig, seed: u64) -> Result<Self> {
        vision_cfg.validate()?;
        model_cfg.decoder.validate()?;
        if model_cfg.decoder.vocab < vocab::MIN_VOCAB {
            return Err(Error::config(
                "model.decoder.vocab",
                format!("vocabulary must hold at least {} tokens", vocab::MIN_VOCAB),
            ));
        }
        if vision_cfg.colors > vocab::MAX_COLORS {
            return Err(Error::config(
                "vision.colors",
                format!("at most {} colors are supported", vocab::MAX_COLORS),
            ));
        }
        let mut store = ParamStore::new();
        let mut enc_rng = rng(seed, stream::ENCODER);
        let mut ladder_rng = rng(seed, stream::LADDER);
        let mut adapter_rng = rng(seed, stream::ADAPTER);
        let encoder = crate::vision::FrozenEncoder::new(&mut store, vision_cfg, &mut enc_rng);
        let ladder = if vision_cfg.n_queries > 0 {
            Some(crate::vision::QLadder::new(&mut store, &encoder, vision_cfg, &mut ladder_rng)?)
        } else {
            None
        };
        let adapter = crate::vision::VLAdapter::new(
            &mut store,
            vision_cfg.width,
            vision_cfg.adapter_hidden,
            model_cfg.decoder.width,
            &mut adapter_rng,
        );
        let tower = VisualTower {
            encoder,
            ladder,
            adapter,
        };
        let decoder = MMDecoder::inject(
            &mut store,
            &model_cfg.decoder,
            model_cfg.adapter,
            &model_cfg.lora,
            &mut rng(seed, stream::DECODER_BASE),
            &mut rng(seed, stream::LORA),
        )?;
        let longest = tower.n_visual_tokens() + 4 + vision_cfg.colors + 1;
        if longest > model_cfg.decoder.max_len {
            return Err(Error::config(
                "model.decoder.max_len",
                format!("sequences need up to {longest} positions but max_len is {}", model_cfg.decoder.max_len),
            ));
        }
        Ok(Self {
            store,
            tower,
            decoder,
            model_cfg: model_cfg.clone(),
            vision_cfg: vision_cfg.clone(),
            seed,
        })
    }

    pub fn data_spec(&self) -> DataSpec {
        DataSpec {
            grid: self.vision_cfg.grid,
            colors: self.vision_cfg.colors,
            n_visual: self.tower.n_visual_tokens(),
        }
    }

    pub fn n_visual_tokens(&self, opts: ForwardOptions) -> usize {
        if opts.ladder {
            self.tower.n_visual_tokens()
        } else {
            self.tower.encoder.n_patches()
        }
    }

    /// Visual token features `F^I` for an image.
    pub fn visual_features(&self, tape: &mut Tape, image: &Tensor, opts: ForwardOptions) -> Result<Var> {
        self.tower.forward(&self.store, tape, image, opts.ladder)
    }

    /// Runs image and language ids through the full model.
    pub fn forward(
        &self,
        tape: &mut Tape,
        image: &Tensor,
        language_ids: &[usize],
        opts: ForwardOptions,
    ) -> Result<DecoderOutput> {
        self.forward_with(&self.store, tape, image, language_ids, opts)
    }

    /// [`Model::forward`] reading weights from `store` instead of `self.store`.
    pub fn forward_with(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        image: &Tensor,
        language_ids: &[usize],
        opts: ForwardOptions,
    ) -> Result<DecoderOutput> {
        let visual = self.tower.forward(store, tape, image, opts.ladder)?;
        let n_v = tape.shape(visual)[0];
        let mask = crate::modality::build_mask(n_v, language_ids.len())?;
        self.decoder.forward(
            store,
            tape,
            Some(visual),
            language_ids,
            &mask,
            opts.capture_attention,
            opts.adapters,
        )
    }

    /// Records the sample's masked next-token loss on `tape`.
    pub fn sample_loss(&self, tape: &mut Tape, sample: &SyntheticSample) -> Result<Var> {
        self.sample_loss_with(&self.store, tape, sample)
    }

    pub fn sample_loss_with(&self, store: &ParamStore, tape: &mut Tape, sample: &SyntheticSample) -> Result<Var> {
        let out = self.forward_with(store, tape, &sample.image, sample.language_ids(), ForwardOptions::default())?;
        masked_ce_loss(tape, out.logits, &sample.sequence)
    }

    /// `(trainable, frozen)` element counts over the whole model.
    pub fn param_counts(&self) -> (usize, usize) {
        let frozen = self.store.count(|p| p.frozen());
        (self.store.len_elements() - frozen, frozen)
    }

    pub fn group_count(&self, g: ParamGroup) -> usize {
        self.store.count_group(g)
    }
}

impl ParamStore {
    pub fn len_elements(&self) -> usize {
        self.count(|_| true)
    }
}

/// Mean cross-entropy of next-token prediction over supervised positions:
/// the logits at `p - 1` are scored against the token at `p` for every `p`
/// with `loss_mask[p]`.
pub fn masked_ce_loss(tape: &mut Tape, logits: Var, seq: &MultimodalSequence) -> Result<Var> {
    let rows = tape.shape(logits)[0];
    if rows != seq.len() {
        return Err(Error::Shape(format!(
            "logits cover {rows} positions but the sequence has {}",
            seq.len()
        )));
    }
    let targets: Vec<(usize, usize)> = seq
        .loss_mask
        .iter()
        .enumerate()
        .filter(|(p, &m)| m && *p > 0)
        .map(|(p, _)| {
            seq.token_at(p)
                .map(|tok| (p - 1, tok))
                .ok_or_else(|| Error::Contract(format!("loss mask set at non-language position {p}")))
        })
        .collect::<Result<_>>()?;
    if targets.is_empty() {
        return Err(Error::EmptyLoss);
    }
    tape.cross_entropy(logits, &targets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modality::MultimodalSequence;

    #[test]
    fn uniform_logits_give_log_vocab() {
        let seq = MultimodalSequence::new(1, vec![3, 5, 7], vec![false, false, true, true]).unwrap();
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::zeros(&[4, 16]));
        let loss = masked_ce_loss(&mut tape, l, &seq).unwrap();
        assert!((tape.value(loss).item() - 16f64.ln()).abs() < 1e-12);
        assert!((16f64.ln() - 2.7726).abs() < 1e-4);
    }

    #[test]
    fn confident_logits_give_near_zero_loss() {
        let seq = MultimodalSequence::new(0, vec![0, 1], vec![false, true]).unwrap();
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::from_rows(&[vec![-50.0, 50.0], vec![0.0, 0.0]]).unwrap());
        let loss = masked_ce_loss(&mut tape, l, &seq).unwrap();
        assert!(tape.value(loss).item() < 1e-40);
    }

    #[test]
    fn two_class_closed_form() {
        let seq = MultimodalSequence::new(0, vec![1, 0], vec![false, true]).unwrap();
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::from_rows(&[vec![3f64.ln(), 0.0], vec![0.0, 0.0]]).unwrap());
        let loss = masked_ce_loss(&mut tape, l, &seq).unwrap();
        assert!((tape.value(loss).item() - (4.0f64 / 3.0).ln()).abs() < 1e-15);
    }

    #[test]
    fn empty_loss_mask_is_an_error() {
        let seq = MultimodalSequence::new(1, vec![1, 2], vec![false; 3]).unwrap();
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::zeros(&[3, 4]));
        assert!(matches!(masked_ce_loss(&mut tape, l, &seq), Err(Error::EmptyLoss)));
    }

    #[test]
    fn frozen_weights_do_not_depend_on_adapter_shape() {
        let v = VisionConfig {
            n_queries: 4,
            ..Default::default()
        };
        let a = Model::build(&ModelConfig::default(), &v, 11).unwrap();
        let mc = ModelConfig {
            lora: MMLoRAConfig::new(16, 1.0).unwrap(),
            ..Default::default()
        };
        let b = Model::build(&mc, &v, 11).unwrap();
        assert_eq!(a.store.frozen_hash(), b.store.frozen_hash());
        assert_eq!(a.param_counts(), b.param_counts());
    }
}
