//! Shared building blocks: affine layers, layer norm and multi-head attention.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    /// Gaussian weights with the given std, zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        c_in: usize,
        c_out: usize,
        std: f64,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let w = store.add(format!("{name}.w"), group, Tensor::randn(&[c_in, c_out], std, rng));
        let b = bias.then(|| store.add(format!("{name}.b"), group, Tensor::zeros(&[c_out])));
        Self { w, b }
    }

    /// Registers copies of `src`'s tensors under a new name and group.
    pub fn copy_from(store: &mut ParamStore, src: &Linear, name: &str, group: ParamGroup) -> Self {
        let w = store.add(format!("{name}.w"), group, store.tensor(src.w).clone());
        let b = src
            .b
            .map(|b| store.add(format!("{name}.b"), group, store.tensor(b).clone()));
        Self { w, b }
    }

    pub fn forward(&self, store: &ParamStore, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let y = tape.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        std::iter::once(self.w).chain(self.b).collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, group: ParamGroup, width: usize) -> Self {
        let gain = store.add(format!("{name}.g"), group, Tensor::full(&[width], 1.0));
        let bias = store.add(format!("{name}.b"), group, Tensor::zeros(&[width]));
        Self { gain, bias }
    }

    pub fn copy_from(store: &mut ParamStore, src: &LayerNorm, name: &str, group: ParamGroup) -> Self {
        let gain = store.add(format!("{name}.g"), group, store.tensor(src.gain).clone());
        let bias = store.add(format!("{name}.b"), group, store.tensor(src.bias).clone());
        Self { gain, bias }
    }

    pub fn forward(&self, store: &ParamStore, tape: &mut Tape, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        tape.layer_norm_affine(x, g, b)
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.gain, self.bias]
    }
}

/// Output of [`attention`]: the merged heads and, if requested, each head's
/// post-softmax weights.
pub struct AttentionOutput {
    pub out: Var,
    pub probs: Vec<Tensor>,
}

/// Scaled dot-product attention over `n_heads` column groups.
///
/// `q` is `Tq×C`, `k` and `v` are `Tk×C`. With `causal`, query `i` only sees
/// keys `j <= i`.
pub fn attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    n_heads: usize,
    causal: bool,
    capture: bool,
) -> Result<AttentionOutput> {
    let width = tape.shape(q)[1];
    if n_heads == 0 || !width.is_multiple_of(n_heads) {
        return Err(Error::Shape(format!(
            "width {width} is not divisible into {n_heads} heads"
        )));
    }
    let dh = width / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    let mut probs = Vec::new();
    for h in 0..n_heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let s = tape.matmul(qh, kt)?;
        let s = tape.scale(s, scale);
        let s = if causal { tape.causal_mask(s)? } else { s };
        let p = tape.softmax_rows(s)?;
        if capture {
            probs.push(tape.value(p).clone());
        }
        heads.push(tape.matmul(p, vh)?);
    }
    let out = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
    Ok(AttentionOutput { out, probs })
}

/// Two-layer GELU MLP.
#[derive(Debug, Clone, Copy)]
pub struct Mlp {
    pub up: Linear,
    pub down: Linear,
}

impl Mlp {
    pub fn forward(&self, store: &ParamStore, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = self.up.forward(store, tape, x)?;
        let h = tape.gelu(h);
        self.down.forward(store, tape, h)
    }

    pub fn copy_from(store: &mut ParamStore, src: &Mlp, name: &str, group: ParamGroup) -> Self {
        Self {
            up: Linear::copy_from(store, &src.up, &format!("{name}.up"), group),
            down: Linear::copy_from(store, &src.down, &format!("{name}.down"), group),
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = self.up.ids();
        v.extend(self.down.ids());
        v
    }
}
