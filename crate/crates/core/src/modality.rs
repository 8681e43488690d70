//! Modality mask, the row-separation function and masked recombination.
//!
//! `theta(F, M, m)` keeps the rows of `F` whose label equals `m` and zeroes
//! the others. The visual and language selections partition `F` exactly, so
//! `theta(F, M, Visual) + theta(F, M, Language) == F` with no rounding.

use std::ops::Range;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Modality {
    Visual = 0,
    Language = 1,
}

impl Modality {
    pub fn from_label(label: u8) -> Result<Self> {
        match label {
            0 => Ok(Modality::Visual),
            1 => Ok(Modality::Language),
            other => Err(Error::Contract(format!("modality label must be 0 or 1, got {other}"))),
        }
    }

    pub fn other(self) -> Self {
        match self {
            Modality::Visual => Modality::Language,
            Modality::Language => Modality::Visual,
        }
    }
}

/// Per-token modality labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModalityMask {
    labels: Vec<Modality>,
    n_visual: usize,
    visual_rows: Rc<[bool]>,
    language_rows: Rc<[bool]>,
}

impl ModalityMask {
    pub fn from_labels(labels: Vec<Modality>) -> Self {
        let visual_rows: Rc<[bool]> = labels.iter().map(|&l| l == Modality::Visual).collect();
        let language_rows: Rc<[bool]> = labels.iter().map(|&l| l == Modality::Language).collect();
        let n_visual = visual_rows.iter().filter(|&&v| v).count();
        Self {
            labels,
            n_visual,
            visual_rows,
            language_rows,
        }
    }

    pub fn from_bits(bits: &[u8]) -> Result<Self> {
        let labels = bits
            .iter()
            .map(|&b| Modality::from_label(b))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_labels(labels))
    }

    pub fn labels(&self) -> &[Modality] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_visual(&self) -> usize {
        self.n_visual
    }

    pub fn n_language(&self) -> usize {
        self.labels.len() - self.n_visual
    }

    /// Row selector for modality `m`.
    pub fn rows(&self, m: Modality) -> Rc<[bool]> {
        match m {
            Modality::Visual => Rc::clone(&self.visual_rows),
            Modality::Language => Rc::clone(&self.language_rows),
        }
    }

    /// Appends one label; generated tokens are appended as `Language`.
    pub fn push(&mut self, m: Modality) {
        let mut labels = std::mem::take(&mut self.labels);
        labels.push(m);
        *self = Self::from_labels(labels);
    }

    fn check_rows(&self, rows: usize) -> Result<()> {
        if rows != self.labels.len() {
            return Err(Error::Shape(format!(
                "tensor has {rows} rows but the modality mask has {} labels",
                self.labels.len()
            )));
        }
        Ok(())
    }
}

/// `n_visual` leading visual labels followed by `n_language` language labels.
pub fn build_mask(n_visual: usize, n_language: usize) -> Result<ModalityMask> {
    if n_visual == 0 && n_language == 0 {
        return Err(Error::EmptySequence(
            "a modality mask needs at least one token".into(),
        ));
    }
    let labels = std::iter::repeat_n(Modality::Visual, n_visual)
        .chain(std::iter::repeat_n(Modality::Language, n_language))
        .collect();
    Ok(ModalityMask::from_labels(labels))
}

/// Keeps rows labelled `m`, zeroing the rest. Output shape equals input shape.
pub fn theta(f: &Tensor, mask: &ModalityMask, m: Modality) -> Result<Tensor> {
    let (rows, cols) = f.dims2()?;
    mask.check_rows(rows)?;
    let mut out = f.clone();
    out.requires_grad = false;
    out.grad = None;
    for (row, &label) in out.data_mut().chunks_mut(cols.max(1)).zip(mask.labels()) {
        if label != m {
            row.fill(0.0);
        }
    }
    Ok(out)
}

/// `(F_I, F_T) = (theta(F, M, Visual), theta(F, M, Language))`.
pub fn split(f: &Tensor, mask: &ModalityMask) -> Result<(Tensor, Tensor)> {
    Ok((
        theta(f, mask, Modality::Visual)?,
        theta(f, mask, Modality::Language)?,
    ))
}

/// `base + theta(delta, M, m)`; rows of the other modality are copied from
/// `base` untouched.
pub fn masked_add(base: &Tensor, delta: &Tensor, mask: &ModalityMask, m: Modality) -> Result<Tensor> {
    if base.shape() != delta.shape() {
        return Err(Error::Shape(format!(
            "masked_add on mismatched shapes {:?} and {:?}",
            base.shape(),
            delta.shape()
        )));
    }
    let (rows, cols) = base.dims2()?;
    mask.check_rows(rows)?;
    let mut out = base.clone();
    out.requires_grad = false;
    out.grad = None;
    for (i, row) in out.data_mut().chunks_mut(cols.max(1)).enumerate() {
        if mask.labels()[i] == m {
            row.iter_mut()
                .zip(delta.row(i))
                .for_each(|(o, d)| *o += d);
        }
    }
    Ok(out)
}

/// Tape version of [`theta`].
pub fn theta_var(tape: &mut Tape, f: Var, mask: &ModalityMask, m: Modality) -> Result<Var> {
    tape.mask_rows(f, mask.rows(m))
}

/// Tape version of [`masked_add`].
pub fn masked_add_var(
    tape: &mut Tape,
    base: Var,
    delta: Var,
    mask: &ModalityMask,
    m: Modality,
) -> Result<Var> {
    tape.masked_add(base, delta, mask.rows(m))
}

/// A visual-prefix sequence: visual features first, then language tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalSequence {
    pub visual_span: Range<usize>,
    pub language_token_ids: Vec<usize>,
    pub mask: ModalityMask,
    /// Per position; true only at supervised (answer) language positions.
    pub loss_mask: Vec<bool>,
}

impl MultimodalSequence {
    pub fn new(n_visual: usize, language_token_ids: Vec<usize>, loss_mask: Vec<bool>) -> Result<Self> {
        let mask = build_mask(n_visual, language_token_ids.len())?;
        if loss_mask.len() != mask.len() {
            return Err(Error::Shape(format!(
                "loss mask of length {} for a sequence of {} tokens",
                loss_mask.len(),
                mask.len()
            )));
        }
        if loss_mask[..n_visual].iter().any(|&b| b) {
            return Err(Error::Contract("loss mask set on a visual position".into()));
        }
        Ok(Self {
            visual_span: 0..n_visual,
            language_token_ids,
            mask,
            loss_mask,
        })
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn n_visual(&self) -> usize {
        self.visual_span.len()
    }

    /// Token id at absolute position `pos`, if it is a language position.
    pub fn token_at(&self, pos: usize) -> Option<usize> {
        pos.checked_sub(self.n_visual())
            .and_then(|i| self.language_token_ids.get(i).copied())
    }
}
