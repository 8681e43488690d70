//! Visual tower: frozen patch encoder, query ladder and vision-language adapter.
//!
//! The encoder is a stack of pre-norm self-attention blocks over one-pixel
//! patches. The ladder keeps a small set of learnable query tokens that
//! cross-attend, layer by layer, to evenly spaced intermediate outputs of the
//! frozen encoder; ladder layer `j` (1-based) reads encoder block
//! `ceil(j·L / L_q)` and starts from a copy of that block's weights. Ladder
//! outputs are appended after the encoder's final features and the adapter
//! maps the combined rows into the decoder width.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{attention, LayerNorm, Linear, Mlp};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VisionConfig {
    /// Image side length; one patch per pixel, so `N_I = grid²`.
    pub grid: usize,
    /// Color channels per pixel.
    pub colors: usize,
    /// Encoder width `C_v`.
    pub width: usize,
    /// Encoder blocks `L`.
    pub blocks: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    /// Learnable ladder queries `N_q`; 0 disables the ladder.
    pub n_queries: usize,
    /// Ladder layers `L_q`.
    pub ladder_layers: usize,
    /// Hidden width of the vision-language adapter.
    pub adapter_hidden: usize,
}

impl Default for VisionConfig {
    fn default() -> Self {
        Self {
            grid: 6,
            colors: 4,
            width: 32,
            blocks: 4,
            heads: 4,
            ffn_mult: 4,
            n_queries: 8,
            ladder_layers: 2,
            adapter_hidden: 64,
        }
    }
}

impl VisionConfig {
    pub fn n_patches(&self) -> usize {
        self.grid * self.grid
    }

    pub fn n_visual_tokens(&self) -> usize {
        self.n_patches() + self.n_queries
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid < 2 {
            return Err(Error::config("vision.grid", "grid must be at least 2"));
        }
        if self.colors < 2 {
            return Err(Error::config("vision.colors", "at least 2 colors are required"));
        }
        if self.width == 0 || self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::config(
                "vision.heads",
                format!("width {} must be a positive multiple of heads {}", self.width, self.heads),
            ));
        }
        if self.blocks == 0 {
            return Err(Error::config("vision.blocks", "encoder needs at least one block"));
        }
        if self.ffn_mult == 0 || self.adapter_hidden == 0 {
            return Err(Error::config("vision.adapter_hidden", "widths must be positive"));
        }
        if self.n_queries > 0 {
            if self.n_queries >= self.n_patches() {
                return Err(Error::config(
                    "vision.n_queries",
                    format!("N_q={} must be smaller than N_I={}", self.n_queries, self.n_patches()),
                ));
            }
            if self.ladder_layers == 0 || self.ladder_layers > self.blocks {
                return Err(Error::config(
                    "vision.ladder_layers",
                    format!("must be in 1..={} (encoder blocks)", self.blocks),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub ln1: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl EncoderBlock {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, c: usize, ffn: usize, rng: &mut R) -> Self {
        let g = ParamGroup::Encoder;
        let std = 1.0 / (c as f64).sqrt();
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), g, c),
            q: Linear::new(store, &format!("{name}.q"), g, c, c, std, true, rng),
            k: Linear::new(store, &format!("{name}.k"), g, c, c, std, true, rng),
            v: Linear::new(store, &format!("{name}.v"), g, c, c, std, true, rng),
            o: Linear::new(store, &format!("{name}.o"), g, c, c, std, true, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), g, c),
            mlp: Mlp {
                up: Linear::new(store, &format!("{name}.ffn.up"), g, c, ffn, std, true, rng),
                down: Linear::new(store, &format!("{name}.ffn.down"), g, ffn, c, 1.0 / (ffn as f64).sqrt(), true, rng),
            },
        }
    }

    fn forward(&self, store: &ParamStore, tape: &mut Tape, x: Var, heads: usize) -> Result<Var> {
        let h = self.ln1.forward(store, tape, x)?;
        let q = self.q.forward(store, tape, h)?;
        let k = self.k.forward(store, tape, h)?;
        let v = self.v.forward(store, tape, h)?;
        let a = attention(tape, q, k, v, heads, false, false)?;
        let a = self.o.forward(store, tape, a.out)?;
        let x = tape.add(x, a)?;
        let h = self.ln2.forward(store, tape, x)?;
        let m = self.mlp.forward(store, tape, h)?;
        tape.add(x, m)
    }
}

/// Frozen patch encoder; every weight lives in [`ParamGroup::Encoder`].
#[derive(Debug, Clone)]
pub struct FrozenEncoder {
    pub patch_embed: Linear,
    pub pos: ParamId,
    pub blocks: Vec<EncoderBlock>,
    pub grid: usize,
    pub colors: usize,
    pub heads: usize,
}

/// Final features `F_c` plus every block's output.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub features: Tensor,
    pub intermediates: Vec<Tensor>,
}

impl FrozenEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &VisionConfig, rng: &mut R) -> Self {
        let g = ParamGroup::Encoder;
        let c = cfg.width;
        let patch_embed = Linear::new(store, "encoder.patch", g, cfg.colors, c, 1.0, true, rng);
        let pos = store.add("encoder.pos", g, Tensor::randn(&[cfg.n_patches(), c], 0.5, rng));
        let blocks = (0..cfg.blocks)
            .map(|i| EncoderBlock::new(store, &format!("encoder.block{i}"), c, c * cfg.ffn_mult, rng))
            .collect();
        Self {
            patch_embed,
            pos,
            blocks,
            grid: cfg.grid,
            colors: cfg.colors,
            heads: cfg.heads,
        }
    }

    pub fn n_patches(&self) -> usize {
        self.grid * self.grid
    }

    /// Runs the encoder on a private tape; the outputs carry no gradient path
    /// back to encoder weights.
    pub fn encode(&self, store: &ParamStore, image: &Tensor) -> Result<EncoderOutput> {
        let want = [self.grid, self.grid, self.colors];
        if image.shape() != want {
            return Err(Error::Shape(format!(
                "image shape {:?} does not match the configured grid {:?}",
                image.shape(),
                want
            )));
        }
        let mut tape = Tape::new();
        let pixels = tape.constant(Tensor::new(vec![self.n_patches(), self.colors], image.data().to_vec())?);
        let x = self.patch_embed.forward(store, &mut tape, pixels)?;
        let pos = tape.param(store, self.pos);
        let mut x = tape.add(x, pos)?;
        let mut intermediates = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            x = block.forward(store, &mut tape, x, self.heads)?;
            intermediates.push(tape.value(x).clone());
        }
        Ok(EncoderOutput {
            features: tape.value(x).clone(),
            intermediates,
        })
    }
}

#[derive(Debug, Clone)]
pub struct LadderLayer {
    /// 0-based index of the encoder block whose output this layer attends.
    pub source: usize,
    pub ln_q: LayerNorm,
    pub ln_kv: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl LadderLayer {
    fn forward(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        queries: Var,
        memory: Var,
        heads: usize,
    ) -> Result<Var> {
        let hq = self.ln_q.forward(store, tape, queries)?;
        let hm = self.ln_kv.forward(store, tape, memory)?;
        let q = self.q.forward(store, tape, hq)?;
        let k = self.k.forward(store, tape, hm)?;
        let v = self.v.forward(store, tape, hm)?;
        let a = attention(tape, q, k, v, heads, false, false)?;
        let a = self.o.forward(store, tape, a.out)?;
        let x = tape.add(queries, a)?;
        let h = self.ln2.forward(store, tape, x)?;
        let m = self.mlp.forward(store, tape, h)?;
        tape.add(x, m)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = Vec::new();
        v.extend(self.ln_q.ids());
        v.extend(self.ln_kv.ids());
        for l in [&self.q, &self.k, &self.v, &self.o] {
            v.extend(l.ids());
        }
        v.extend(self.ln2.ids());
        v.extend(self.mlp.ids());
        v
    }
}

/// 0-based encoder block read by each of `ladder_layers` ladder layers.
pub fn ladder_sources(ladder_layers: usize, blocks: usize) -> Vec<usize> {
    (1..=ladder_layers)
        .map(|j| (j * blocks).div_ceil(ladder_layers) - 1)
        .collect()
}

#[derive(Debug, Clone)]
pub struct QLadder {
    pub queries: ParamId,
    pub layers: Vec<LadderLayer>,
    pub heads: usize,
    pub n_queries: usize,
    n_sources: usize,
}

impl QLadder {
    /// Builds the ladder with each layer initialized from the encoder block it
    /// reads.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        encoder: &FrozenEncoder,
        cfg: &VisionConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if cfg.n_queries == 0 || cfg.n_queries >= encoder.n_patches() {
            return Err(Error::config(
                "vision.n_queries",
                format!("N_q={} must lie in 1..{}", cfg.n_queries, encoder.n_patches()),
            ));
        }
        if cfg.ladder_layers == 0 || cfg.ladder_layers > encoder.blocks.len() {
            return Err(Error::config(
                "vision.ladder_layers",
                format!("must be in 1..={}", encoder.blocks.len()),
            ));
        }
        let g = ParamGroup::QLadder;
        let queries = store.add("qladder.queries", g, Tensor::randn(&[cfg.n_queries, cfg.width], 1.0, rng));
        let layers = ladder_sources(cfg.ladder_layers, encoder.blocks.len())
            .into_iter()
            .enumerate()
            .map(|(j, source)| {
                let b = &encoder.blocks[source];
                let name = format!("qladder.layer{j}");
                LadderLayer {
                    source,
                    ln_q: LayerNorm::copy_from(store, &b.ln1, &format!("{name}.ln_q"), g),
                    ln_kv: LayerNorm::copy_from(store, &b.ln1, &format!("{name}.ln_kv"), g),
                    q: Linear::copy_from(store, &b.q, &format!("{name}.attn.q"), g),
                    k: Linear::copy_from(store, &b.k, &format!("{name}.attn.k"), g),
                    v: Linear::copy_from(store, &b.v, &format!("{name}.attn.v"), g),
                    o: Linear::copy_from(store, &b.o, &format!("{name}.attn.o"), g),
                    ln2: LayerNorm::copy_from(store, &b.ln2, &format!("{name}.ln2"), g),
                    mlp: Mlp::copy_from(store, &b.mlp, &format!("{name}.ffn"), g),
                }
            })
            .collect();
        Ok(Self {
            queries,
            layers,
            heads: cfg.heads,
            n_queries: cfg.n_queries,
            n_sources: encoder.blocks.len(),
        })
    }

    /// Runs the queries through every ladder layer and returns `F_q`.
    pub fn forward(&self, store: &ParamStore, tape: &mut Tape, intermediates: &[Tensor]) -> Result<Var> {
        if intermediates.len() != self.n_sources {
            return Err(Error::config(
                "vision.blocks",
                format!(
                    "ladder expects {} intermediate maps, got {}",
                    self.n_sources,
                    intermediates.len()
                ),
            ));
        }
        let mut x = tape.param(store, self.queries);
        for layer in &self.layers {
            let memory = tape.constant(intermediates[layer.source].clone());
            x = layer.forward(store, tape, x, memory, self.heads)?;
        }
        Ok(x)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = vec![self.queries];
        for l in &self.layers {
            v.extend(l.ids());
        }
        v
    }
}

/// `F_v = concat(F_c, F_q)`, encoder rows first.
pub fn fuse(tape: &mut Tape, f_c: Var, f_q: Var) -> Result<Var> {
    if tape.shape(f_c)[1] != tape.shape(f_q)[1] {
        return Err(Error::Shape(format!(
            "cannot fuse features of widths {} and {}",
            tape.shape(f_c)[1],
            tape.shape(f_q)[1]
        )));
    }
    tape.concat_rows(&[f_c, f_q])
}

/// Two-layer adapter `C_v → C_h → C` with GELU in between.
#[derive(Debug, Clone, Copy)]
pub struct VLAdapter {
    pub mlp: Mlp,
    pub c_in: usize,
    pub c_out: usize,
}

impl VLAdapter {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, c_in: usize, hidden: usize, c_out: usize, rng: &mut R) -> Self {
        let g = ParamGroup::VlAdapter;
        Self {
            mlp: Mlp {
                up: Linear::new(store, "vl_adapter.fc1", g, c_in, hidden, 1.0 / (c_in as f64).sqrt(), true, rng),
                down: Linear::new(store, "vl_adapter.fc2", g, hidden, c_out, 1.0 / (hidden as f64).sqrt(), true, rng),
            },
            c_in,
            c_out,
        }
    }

    pub fn forward(&self, store: &ParamStore, tape: &mut Tape, f_v: Var) -> Result<Var> {
        let w = tape.shape(f_v)[1];
        if w != self.c_in {
            return Err(Error::Shape(format!(
                "adapter expects width {} but features have width {w}",
                self.c_in
            )));
        }
        self.mlp.forward(store, tape, f_v)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        self.mlp.ids()
    }
}

/// Encoder, optional ladder and adapter.
#[derive(Debug, Clone)]
pub struct VisualTower {
    pub encoder: FrozenEncoder,
    pub ladder: Option<QLadder>,
    pub adapter: VLAdapter,
}

impl VisualTower {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        cfg: &VisionConfig,
        decoder_width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let encoder = FrozenEncoder::new(store, cfg, rng);
        let ladder = if cfg.n_queries > 0 {
            Some(QLadder::new(store, &encoder, cfg, rng)?)
        } else {
            None
        };
        let adapter = VLAdapter::new(store, cfg.width, cfg.adapter_hidden, decoder_width, rng);
        Ok(Self {
            encoder,
            ladder,
            adapter,
        })
    }

    pub fn n_visual_tokens(&self) -> usize {
        self.encoder.n_patches() + self.ladder.as_ref().map_or(0, |l| l.n_queries)
    }

    /// `F^I = g(concat(F_c, F_q))`; with `use_ladder == false` only `F_c`.
    pub fn forward(&self, store: &ParamStore, tape: &mut Tape, image: &Tensor, use_ladder: bool) -> Result<Var> {
        let enc = self.encoder.encode(store, image)?;
        let f_c = tape.constant(enc.features);
        let f_v = match (&self.ladder, use_ladder) {
            (Some(ladder), true) => {
                let f_q = ladder.forward(store, tape, &enc.intermediates)?;
                fuse(tape, f_c, f_q)?
            }
            _ => f_c,
        };
        self.adapter.forward(store, tape, f_v)
    }
}
