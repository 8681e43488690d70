//! Frozen causal decoder with low-rank adapters on every linear projection.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::attention;
use crate::mmlora::{LoraLayer, MMLoRAConfig, MMLoRALayer};
use crate::modality::{build_mask, Modality, ModalityMask};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

/// Standard deviation of the frozen projection weights.
pub const BASE_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub width: usize,
    pub ffn: usize,
    pub vocab: usize,
    pub max_len: usize,
    /// Std of the token and position embeddings. The output head is tied to
    /// the token embedding, so this sets the logit range.
    pub embed_std: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 4,
            width: 64,
            ffn: 128,
            vocab: 32,
            max_len: 64,
            embed_std: 0.125,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::config("model.decoder.layers", "at least one layer is required"));
        }
        if self.heads == 0 || self.width == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::config(
                "model.decoder.heads",
                format!("width {} must be a positive multiple of heads {}", self.width, self.heads),
            ));
        }
        if self.ffn == 0 || self.vocab == 0 || self.max_len == 0 {
            return Err(Error::config("model.decoder", "ffn, vocab and max_len must be positive"));
        }
        if self.embed_std.is_nan() || self.embed_std <= 0.0 {
            return Err(Error::config("model.decoder.embed_std", "must be positive"));
        }
        Ok(())
    }
}

/// Which adapter family sits on the decoder projections.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterKind {
    #[default]
    MmLora,
    Lora,
}

#[derive(Debug, Clone)]
pub enum Projection {
    MmLora(MMLoRALayer),
    Lora(LoraLayer),
}

impl Projection {
    pub fn base(&self) -> ParamId {
        match self {
            Projection::MmLora(l) => l.w_o,
            Projection::Lora(l) => l.w_o,
        }
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        x: Var,
        mask: &ModalityMask,
        adapters: bool,
    ) -> Result<Var> {
        if !adapters {
            let w = tape.param(store, self.base());
            return tape.matmul(x, w);
        }
        match self {
            Projection::MmLora(l) => l.forward(store, tape, x, mask),
            Projection::Lora(l) => l.forward(store, tape, x),
        }
    }

    pub fn param_count(&self, store: &ParamStore) -> (usize, usize) {
        match self {
            Projection::MmLora(l) => l.param_count(store),
            Projection::Lora(l) => l.param_count(store),
        }
    }

    pub fn as_mmlora(&self) -> Option<&MMLoRALayer> {
        match self {
            Projection::MmLora(l) => Some(l),
            Projection::Lora(_) => None,
        }
    }
}

pub const PROJECTIONS: [&str; 6] = ["q", "k", "v", "o", "ffn_up", "ffn_down"];

/// `(c_in, c_out)` of a projection named in [`PROJECTIONS`].
pub fn projection_dims(name: &str, cfg: &DecoderConfig) -> (usize, usize) {
    match name {
        "ffn_up" => (cfg.width, cfg.ffn),
        "ffn_down" => (cfg.ffn, cfg.width),
        _ => (cfg.width, cfg.width),
    }
}

#[derive(Debug, Clone)]
pub struct DecoderBlock {
    pub q: Projection,
    pub k: Projection,
    pub v: Projection,
    pub o: Projection,
    pub ffn_up: Projection,
    pub ffn_down: Projection,
}

impl DecoderBlock {
    pub fn projections(&self) -> [&Projection; 6] {
        [&self.q, &self.k, &self.v, &self.o, &self.ffn_up, &self.ffn_down]
    }
}

/// Post-softmax attention weights, `layers[l][h]` is a `T×T` matrix.
#[derive(Debug, Clone, Default)]
pub struct AttentionRecord {
    pub layers: Vec<Vec<Tensor>>,
}

impl AttentionRecord {
    /// Head-averaged `T×T` map for one layer.
    pub fn mean_over_heads(&self, layer: usize) -> Tensor {
        let heads = &self.layers[layer];
        let mut acc = Tensor::zeros(heads[0].shape());
        for h in heads {
            acc.data_mut().iter_mut().zip(h.data()).for_each(|(a, b)| *a += b);
        }
        let n = heads.len() as f64;
        acc.data_mut().iter_mut().for_each(|a| *a /= n);
        acc
    }
}

#[derive(Debug, Clone)]
pub struct MMDecoder {
    pub cfg: DecoderConfig,
    pub kind: AdapterKind,
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub blocks: Vec<DecoderBlock>,
}

/// Result of one decoder pass.
pub struct DecoderOutput {
    pub logits: Var,
    pub attention: Option<AttentionRecord>,
}

impl MMDecoder {
    /// Builds the frozen base from `base_rng`, then attaches fresh adapters to
    /// every projection from `lora_rng`.
    pub fn inject<R1: Rng + ?Sized, R2: Rng + ?Sized>(
        store: &mut ParamStore,
        cfg: &DecoderConfig,
        kind: AdapterKind,
        lora: &MMLoRAConfig,
        base_rng: &mut R1,
        lora_rng: &mut R2,
    ) -> Result<Self> {
        cfg.validate()?;
        lora.ranks()?;
        let g = ParamGroup::DecoderBase;
        let c = cfg.width;
        let tok_emb = store.add("decoder.tok_emb", g, Tensor::randn(&[cfg.vocab, c], cfg.embed_std, base_rng));
        let pos_emb = store.add("decoder.pos_emb", g, Tensor::randn(&[cfg.max_len, c], cfg.embed_std, base_rng));
        let mut bases = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let mut ids = Vec::with_capacity(6);
            for name in PROJECTIONS {
                let (ci, co) = projection_dims(name, cfg);
                let full = format!("decoder.layer{l}.{name}");
                ids.push((full.clone(), store.add(format!("{full}.w"), g, Tensor::randn(&[ci, co], BASE_STD, base_rng))));
            }
            bases.push(ids);
        }
        let mut blocks = Vec::with_capacity(cfg.layers);
        for ids in bases {
            let mut projs = Vec::with_capacity(6);
            for (name, w) in ids {
                projs.push(match kind {
                    AdapterKind::MmLora => Projection::MmLora(MMLoRALayer::attach_to(store, &name, w, lora, lora_rng)?),
                    AdapterKind::Lora => {
                        Projection::Lora(LoraLayer::attach_to(store, &name, w, lora.rank, lora.alpha, lora_rng)?)
                    }
                });
            }
            let mut it = projs.into_iter();
            let mut next = || it.next().expect("six projections");
            blocks.push(DecoderBlock {
                q: next(),
                k: next(),
                v: next(),
                o: next(),
                ffn_up: next(),
                ffn_down: next(),
            });
        }
        Ok(Self {
            cfg: cfg.clone(),
            kind,
            tok_emb,
            pos_emb,
            blocks,
        })
    }

    /// `(trainable, frozen)` element counts summed over all projections, plus
    /// embeddings on the frozen side.
    pub fn param_count(&self, store: &ParamStore) -> (usize, usize) {
        let mut trainable = 0;
        let mut frozen = store.tensor(self.tok_emb).len() + store.tensor(self.pos_emb).len();
        for b in &self.blocks {
            for p in b.projections() {
                let (t, f) = p.param_count(store);
                trainable += t;
                frozen += f;
            }
        }
        (trainable, frozen)
    }

    /// Logits at every position. Visual rows enter post-embedding; language
    /// ids go through the token embedding. `adapters == false` evaluates the
    /// frozen base alone.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        visual: Option<Var>,
        language_ids: &[usize],
        mask: &ModalityMask,
        capture: bool,
        adapters: bool,
    ) -> Result<DecoderOutput> {
        let n_v = visual.map_or(0, |v| tape.shape(v)[0]);
        let t = n_v + language_ids.len();
        if t > self.cfg.max_len {
            return Err(Error::ContextOverflow {
                len: t,
                max: self.cfg.max_len,
            });
        }
        let expected = build_mask(n_v, language_ids.len())?;
        if mask.labels() != expected.labels() {
            return Err(Error::Shape(format!(
                "mask with {} visual / {} language labels does not match {n_v} visual rows and {} tokens",
                mask.n_visual(),
                mask.n_language(),
                language_ids.len()
            )));
        }
        if let Some(v) = visual {
            if tape.shape(v)[1] != self.cfg.width {
                return Err(Error::Shape(format!(
                    "visual features of width {} do not match decoder width {}",
                    tape.shape(v)[1],
                    self.cfg.width
                )));
            }
        }
        if let Some(&bad) = language_ids.iter().find(|&&id| id >= self.cfg.vocab) {
            return Err(Error::Shape(format!("token id {bad} outside vocabulary of {}", self.cfg.vocab)));
        }

        let emb = tape.param(store, self.tok_emb);
        let mut parts = Vec::with_capacity(2);
        if let Some(v) = visual {
            parts.push(v);
        }
        if !language_ids.is_empty() {
            parts.push(tape.gather_rows(emb, language_ids)?);
        }
        let x = if parts.len() == 1 { parts[0] } else { tape.concat_rows(&parts)? };
        let pos_table = tape.param(store, self.pos_emb);
        let pos = tape.slice_rows(pos_table, 0, t)?;
        let mut x = tape.add(x, pos)?;

        let mut record = capture.then(AttentionRecord::default);
        for b in &self.blocks {
            let h = tape.layer_norm(x)?;
            let q = b.q.forward(store, tape, h, mask, adapters)?;
            let k = b.k.forward(store, tape, h, mask, adapters)?;
            let v = b.v.forward(store, tape, h, mask, adapters)?;
            let att = attention(tape, q, k, v, self.cfg.heads, true, capture)?;
            if let Some(r) = record.as_mut() {
                r.layers.push(att.probs);
            }
            let o = b.o.forward(store, tape, att.out, mask, adapters)?;
            x = tape.add(x, o)?;
            let h = tape.layer_norm(x)?;
            let u = b.ffn_up.forward(store, tape, h, mask, adapters)?;
            let u = tape.gelu(u);
            let d = b.ffn_down.forward(store, tape, u, mask, adapters)?;
            x = tape.add(x, d)?;
        }
        let h = tape.layer_norm(x)?;
        let head = tape.transpose(emb)?;
        let logits = tape.matmul(h, head)?;
        Ok(DecoderOutput {
            logits,
            attention: record,
        })
    }

    /// Greedy continuation of `prompt`; ties go to the lower token id.
    /// Generated positions are labelled `Language`.
    pub fn generate_greedy(
        &self,
        store: &ParamStore,
        visual: Option<&Tensor>,
        prompt: &[usize],
        max_new: usize,
    ) -> Result<Vec<usize>> {
        let n_v = visual.map_or(0, Tensor::rows);
        let total = n_v + prompt.len() + max_new;
        if n_v + prompt.len() > self.cfg.max_len || total > self.cfg.max_len {
            return Err(Error::ContextOverflow {
                len: total,
                max: self.cfg.max_len,
            });
        }
        let mut ids = prompt.to_vec();
        let mut out = Vec::with_capacity(max_new);
        for _ in 0..max_new {
            let mut tape = Tape::new();
            let v = visual.map(|t| tape.constant(t.clone()));
            let mask = build_mask(n_v, ids.len())?;
            let o = self.forward(store, &mut tape, v, &ids, &mask, false, true)?;
            let logits = tape.value(o.logits);
            let next = argmax(logits.row(logits.rows() - 1));
            ids.push(next);
            out.push(next);
        }
        Ok(out)
    }

    pub fn adapter_ids(&self, store: &ParamStore) -> Vec<ParamId> {
        store
            .iter()
            .filter(|(_, p)| p.group == ParamGroup::Lora)
            .map(|(id, _)| id)
            .collect()
    }
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Per-layer `(visual_mass, language_mass)`: for each language-position row,
/// the attention weight placed on visual vs language columns, averaged over
/// heads and rows.
pub fn attention_mass(record: &AttentionRecord, mask: &ModalityMask) -> Result<Vec<(f64, f64)>> {
    let mut out = Vec::with_capacity(record.layers.len());
    for heads in &record.layers {
        let mut vis = 0.0;
        let mut lang = 0.0;
        let mut rows = 0usize;
        for p in heads {
            let (t, n) = p.dims2()?;
            if t != mask.len() || n != mask.len() {
                return Err(Error::Shape(format!(
                    "attention map of shape [{t}, {n}] against a mask of length {}",
                    mask.len()
                )));
            }
            for (i, &li) in mask.labels().iter().enumerate() {
                if li != Modality::Language {
                    continue;
                }
                for (j, &lj) in mask.labels().iter().enumerate() {
                    match lj {
                        Modality::Visual => vis += p.get2(i, j),
                        Modality::Language => lang += p.get2(i, j),
                    }
                }
                rows += 1;
            }
        }
        if rows == 0 {
            return Err(Error::Contract("no language rows to measure attention mass".into()));
        }
        out.push((vis / rows as f64, lang / rows as f64));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> DecoderConfig {
        DecoderConfig {
            layers: 2,
            heads: 4,
            width: 32,
            ffn: 48,
            vocab: 16,
            max_len: 24,
            embed_std: 0.2,
        }
    }

    fn build(kind: AdapterKind, lora: MMLoRAConfig, seed: u64) -> (ParamStore, MMDecoder) {
        let mut s = ParamStore::new();
        let mut base = ChaCha8Rng::seed_from_u64(seed);
        let mut lr = ChaCha8Rng::seed_from_u64(seed + 1);
        let d = MMDecoder::inject(&mut s, &tiny(), kind, &lora, &mut base, &mut lr).unwrap();
        (s, d)
    }

    #[test]
    fn injection_counts_sum_per_projection() {
        let lora = MMLoRAConfig::new(8, 0.25).unwrap();
        let (s, d) = build(AdapterKind::MmLora, lora, 0);
        let c = 32;
        let ffn = 48;
        // per layer: four C×C projections plus up (C×ffn) and down (ffn×C)
        let per_layer = 4 * 8 * (c + c) + 8 * (c + ffn) + 8 * (ffn + c);
        assert_eq!(d.param_count(&s).0, 2 * per_layer);
        assert_eq!(d.param_count(&s).0, s.count_group(ParamGroup::Lora));
        for b in &d.blocks {
            for p in b.projections() {
                let l = p.as_mmlora().unwrap();
                assert_eq!((l.visual.unwrap().rank, l.language.unwrap().rank), (2, 6));
            }
        }
        let (s2, d2) = build(AdapterKind::Lora, lora, 0);
        assert_eq!(d2.param_count(&s2).0, d.param_count(&s).0);
    }

    #[test]
    fn causal_rows_and_capture() {
        let (s, d) = build(AdapterKind::MmLora, MMLoRAConfig::default(), 2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut tape = Tape::new();
        let vis = tape.constant(Tensor::randn(&[5, 32], 1.0, &mut rng));
        let ids = [1, 4, 7, 2];
        let mask = build_mask(5, 4).unwrap();
        let o = d.forward(&s, &mut tape, Some(vis), &ids, &mask, true, true).unwrap();
        assert_eq!(tape.shape(o.logits), &[9, 16]);
        let rec = o.attention.unwrap();
        assert_eq!(rec.layers.len(), 2);
        for p in rec.layers.iter().flatten() {
            for i in 0..9 {
                let row: f64 = p.row(i).iter().sum();
                assert!((row - 1.0).abs() < 1e-12);
                for j in (i + 1)..9 {
                    assert_eq!(p.get2(i, j), 0.0);
                }
            }
        }
        let mass = attention_mass(&rec, &mask).unwrap();
        for (v, l) in mass {
            assert!((v + l - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_errors() {
        let (s, d) = build(AdapterKind::MmLora, MMLoRAConfig::default(), 2);
        let mut tape = Tape::new();
        let ids: Vec<usize> = vec![1; 25];
        let mask = build_mask(0, 25).unwrap();
        assert!(matches!(
            d.forward(&s, &mut tape, None, &ids, &mask, false, true),
            Err(Error::ContextOverflow { .. })
        ));
        let vis = tape.constant(Tensor::zeros(&[3, 32]));
        let wrong = build_mask(2, 3).unwrap();
        assert!(d.forward(&s, &mut tape, Some(vis), &[1, 2], &wrong, false, true).is_err());
    }

    #[test]
    fn attention_mass_examples() {
        let mask = build_mask(2, 2).unwrap();
        let uniform = Tensor::full(&[4, 4], 0.25);
        let rec = AttentionRecord {
            layers: vec![vec![uniform]],
        };
        assert_eq!(attention_mass(&rec, &mask).unwrap(), vec![(0.5, 0.5)]);
        let mut col0 = Tensor::zeros(&[4, 4]);
        for i in 0..4 {
            col0.data_mut()[i * 4] = 1.0;
        }
        let rec = AttentionRecord {
            layers: vec![vec![col0.clone(), col0]],
        };
        assert_eq!(attention_mass(&rec, &mask).unwrap(), vec![(1.0, 0.0)]);
        assert!(attention_mass(&rec, &build_mask(2, 3).unwrap()).is_err());
    }

    #[test]
    fn argmax_prefers_lower_id_on_ties() {
        assert_eq!(argmax(&[0.1, 0.5, 0.5, 0.2]), 1);
        assert_eq!(argmax(&[1.0, 1.0]), 0);
    }

    #[test]
    fn greedy_generation_contract() {
        let (s, d) = build(AdapterKind::MmLora, MMLoRAConfig::default(), 4);
        let vis = Tensor::randn(&[3, 32], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        assert!(d.generate_greedy(&s, Some(&vis), &[1, 2], 0).unwrap().is_empty());
        let a = d.generate_greedy(&s, Some(&vis), &[1, 2], 3).unwrap();
        let b = d.generate_greedy(&s, Some(&vis), &[1, 2], 3).unwrap();
        assert_eq!(a.len(), 3);
        assert_eq!(a, b);
        assert!(matches!(
            d.generate_greedy(&s, Some(&vis), &[1; 10], 12),
            Err(Error::ContextOverflow { .. })
        ));
    }
}
