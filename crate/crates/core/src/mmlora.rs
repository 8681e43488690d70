//! Modality-routed low-rank adaptation.
//!
//! One frozen projection `W_o` carries two independent low-rank pairs: a
//! visual pair of rank `βR` fed only the visual rows of the input and a
//! language pair of rank `γR` fed only the language rows. With `β + γ = 1`
//! the trainable count equals a single rank-`R` LoRA on the same projection.
//!
//! The routed pairs cannot be folded into `W_o`: a single merged matrix maps
//! equal input rows to equal output rows, while the routed layer does not
//! whenever the two deltas differ.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modality::{masked_add_var, theta_var, Modality, ModalityMask};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

/// Standard deviation of the Gaussian used for the A matrices.
pub const LORA_A_STD: f64 = 0.02;

const INTEGRAL_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MMLoRAConfig {
    pub rank: usize,
    pub beta: f64,
    pub gamma: f64,
    /// Scaling numerator; `None` uses each side's own rank (unit scale).
    pub alpha: Option<f64>,
}

impl Default for MMLoRAConfig {
    fn default() -> Self {
        Self {
            rank: 16,
            beta: 0.25,
            gamma: 0.75,
            alpha: None,
        }
    }
}

impl MMLoRAConfig {
    pub fn new(rank: usize, beta: f64) -> Result<Self> {
        let cfg = Self {
            rank,
            beta,
            gamma: 1.0 - beta,
            alpha: None,
        };
        cfg.ranks()?;
        Ok(cfg)
    }

    /// `(r_visual, r_language)`, validating the rank budget.
    pub fn ranks(&self) -> Result<(usize, usize)> {
        if self.rank == 0 {
            return Err(Error::config("lora.rank", "rank must be positive"));
        }
        for (field, v) in [("lora.beta", self.beta), ("lora.gamma", self.gamma)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(field, format!("{v} is outside [0, 1]")));
            }
        }
        if (self.beta + self.gamma - 1.0).abs() > INTEGRAL_TOL {
            return Err(Error::config(
                "lora.gamma",
                format!("beta + gamma must equal 1, got {} + {}", self.beta, self.gamma),
            ));
        }
        let r = self.rank as f64;
        let rv = self.beta * r;
        let rt = self.gamma * r;
        for (field, v) in [("lora.beta", rv), ("lora.gamma", rt)] {
            if (v - v.round()).abs() > INTEGRAL_TOL {
                return Err(Error::config(
                    field,
                    format!("rank share {v} of R={} is not an integer", self.rank),
                ));
            }
        }
        let (rv, rt) = (rv.round() as usize, rt.round() as usize);
        debug_assert_eq!(rv + rt, self.rank);
        Ok((rv, rt))
    }

    fn scale_for(&self, rank: usize) -> f64 {
        self.alpha.map_or(1.0, |a| a / rank as f64)
    }
}

/// One low-rank pair `A[c_in×r] · B[r×c_out]` with its scale.
#[derive(Debug, Clone, Copy)]
pub struct LoraPair {
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
    pub scale: f64,
}

impl LoraPair {
    fn create<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        rank: usize,
        scale: f64,
        rng: &mut R,
    ) -> Self {
        let a = store.add(
            format!("{prefix}_a"),
            ParamGroup::Lora,
            Tensor::randn(&[c_in, rank], LORA_A_STD, rng),
        );
        let b = store.add(format!("{prefix}_b"), ParamGroup::Lora, Tensor::zeros(&[rank, c_out]));
        Self { a, b, rank, scale }
    }

    /// `scale · x · A · B`
    fn delta(&self, store: &ParamStore, tape: &mut Tape, x: Var) -> Result<Var> {
        let a = tape.param(store, self.a);
        let b = tape.param(store, self.b);
        let xa = tape.matmul(x, a)?;
        let xab = tape.matmul(xa, b)?;
        Ok(if self.scale == 1.0 { xab } else { tape.scale(xab, self.scale) })
    }

    fn count(&self, store: &ParamStore) -> usize {
        store.tensor(self.a).len() + store.tensor(self.b).len()
    }
}

#[derive(Debug, Clone)]
pub struct MMLoRALayer {
    pub w_o: ParamId,
    /// `None` when `βR == 0`.
    pub visual: Option<LoraPair>,
    /// `None` when `γR == 0`.
    pub language: Option<LoraPair>,
    pub c_in: usize,
    pub c_out: usize,
}

impl MMLoRALayer {
    /// Registers `w_o` (frozen) and both adapter pairs under `name`.
    pub fn create<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        w_o: Tensor,
        config: &MMLoRAConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let (rv, rt) = config.ranks()?;
        let (c_in, c_out) = w_o.dims2()?;
        let w_o = store.add(format!("{name}.w"), ParamGroup::DecoderBase, w_o);
        Ok(Self::attach(store, name, w_o, c_in, c_out, rv, rt, config, rng))
    }

    #[allow(clippy::too_many_arguments)]
    fn attach<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        w_o: ParamId,
        c_in: usize,
        c_out: usize,
        rv: usize,
        rt: usize,
        config: &MMLoRAConfig,
        rng: &mut R,
    ) -> Self {
        let visual = (rv > 0).then(|| {
            LoraPair::create(store, &format!("{name}.lora_vis"), c_in, c_out, rv, config.scale_for(rv), rng)
        });
        let language = (rt > 0).then(|| {
            LoraPair::create(store, &format!("{name}.lora_lang"), c_in, c_out, rt, config.scale_for(rt), rng)
        });
        Self {
            w_o,
            visual,
            language,
            c_in,
            c_out,
        }
    }

    /// Attaches adapters to an already registered frozen projection.
    pub fn attach_to<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        w_o: ParamId,
        config: &MMLoRAConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let (rv, rt) = config.ranks()?;
        let (c_in, c_out) = store.tensor(w_o).dims2()?;
        Ok(Self::attach(store, name, w_o, c_in, c_out, rv, rt, config, rng))
    }

    pub fn pair(&self, m: Modality) -> Option<&LoraPair> {
        match m {
            Modality::Visual => self.visual.as_ref(),
            Modality::Language => self.language.as_ref(),
        }
    }

    /// `F·W_o`, plus the visual delta on visual rows and the language delta
    /// on language rows.
    pub fn forward(&self, store: &ParamStore, tape: &mut Tape, f: Var, mask: &ModalityMask) -> Result<Var> {
        let rows = tape.shape(f).first().copied().unwrap_or(0);
        if rows != mask.len() {
            return Err(Error::Shape(format!(
                "input has {rows} rows but the modality mask has {} labels",
                mask.len()
            )));
        }
        let w = tape.param(store, self.w_o);
        let mut out = tape.matmul(f, w)?;
        for m in [Modality::Visual, Modality::Language] {
            if let Some(pair) = self.pair(m) {
                let routed = theta_var(tape, f, mask, m)?;
                let delta = pair.delta(store, tape, routed)?;
                out = masked_add_var(tape, out, delta, mask, m)?;
            }
        }
        Ok(out)
    }

    /// Eager convenience wrapper around [`forward`](Self::forward).
    pub fn forward_eager(&self, store: &ParamStore, f: &Tensor, mask: &ModalityMask) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(f.clone());
        let y = self.forward(store, &mut tape, x, mask)?;
        Ok(tape.value(y).clone())
    }

    /// `(trainable, frozen)` element counts.
    pub fn param_count(&self, store: &ParamStore) -> (usize, usize) {
        let trainable = self.visual.map_or(0, |p| p.count(store)) + self.language.map_or(0, |p| p.count(store));
        (trainable, store.tensor(self.w_o).len())
    }

    pub fn adapter_ids(&self) -> Vec<ParamId> {
        [self.visual, self.language]
            .into_iter()
            .flatten()
            .flat_map(|p| [p.a, p.b])
            .collect()
    }
}

/// Plain LoRA: one rank-`R` pair applied to every row.
#[derive(Debug, Clone)]
pub struct LoraLayer {
    pub w_o: ParamId,
    pub pair: LoraPair,
}

impl LoraLayer {
    pub fn attach_to<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        w_o: ParamId,
        rank: usize,
        alpha: Option<f64>,
        rng: &mut R,
    ) -> Result<Self> {
        if rank == 0 {
            return Err(Error::config("lora.rank", "rank must be positive"));
        }
        let (c_in, c_out) = store.tensor(w_o).dims2()?;
        let scale = alpha.map_or(1.0, |a| a / rank as f64);
        let pair = LoraPair::create(store, &format!("{name}.lora"), c_in, c_out, rank, scale, rng);
        Ok(Self { w_o, pair })
    }

    pub fn forward(&self, store: &ParamStore, tape: &mut Tape, f: Var) -> Result<Var> {
        let w = tape.param(store, self.w_o);
        let base = tape.matmul(f, w)?;
        let delta = self.pair.delta(store, tape, f)?;
        tape.add(base, delta)
    }

    pub fn param_count(&self, store: &ParamStore) -> (usize, usize) {
        (self.pair.count(store), store.tensor(self.w_o).len())
    }
}

/// `F·W_o + scale·F·W_A·W_B` on every row.
pub fn plain_lora_forward(w_o: &Tensor, w_a: &Tensor, w_b: &Tensor, f: &Tensor, scale: f64) -> Result<Tensor> {
    let base = f.matmul(w_o)?;
    let delta = f.matmul(w_a)?.matmul(w_b)?.map(|v| v * scale);
    base.add(&delta)
}

/// Trainable element count of a plain rank-`rank` LoRA on a `c_in×c_out` projection.
pub fn plain_lora_param_count(c_in: usize, c_out: usize, rank: usize) -> usize {
    rank * (c_in + c_out)
}
