//! Central finite-difference verification of tape gradients.

use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tensor::{OpKind, Tape, Tensor, Var};

/// Denominator floor for the relative error. Without it, entries whose true
/// gradient is ~0 report roundoff noise as a large relative error.
pub const REL_ERR_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy)]
pub struct FdConfig {
    pub eps: f64,
    pub tol: f64,
    pub floor: f64,
}

impl Default for FdConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tol: 1e-6,
            floor: REL_ERR_FLOOR,
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntryCheck {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub entries: Vec<EntryCheck>,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Debug, Clone)]
pub struct FdReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_err: f64,
    pub passed: bool,
}

impl FdReport {
    pub fn entries_checked(&self) -> usize {
        self.params.iter().map(|p| p.entries.len()).sum()
    }

    pub fn failing(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(|p| !p.passed)
    }
}

/// Compares tape gradients of the scalar `loss_fn` against central
/// differences `(f(θ+ε·eᵢ) − f(θ−ε·eᵢ)) / 2ε` for each listed entry.
///
/// `targets` pairs a parameter with the flat indices to probe. Parameter
/// values are restored exactly after each probe.
pub fn finite_diff_check<F>(
    store: &mut ParamStore,
    targets: &[(ParamId, Vec<usize>)],
    cfg: FdConfig,
    mut loss_fn: F,
) -> Result<FdReport>
where
    F: FnMut(&ParamStore, &mut Tape) -> Result<Var>,
{
    if cfg.eps.is_nan() || cfg.eps <= 0.0 {
        return Err(Error::Contract(format!("eps must be positive, got {}", cfg.eps)));
    }

    let mut tape = Tape::new();
    let loss = loss_fn(store, &mut tape)?;
    let grads = tape.backward(loss)?;
    let bound: std::collections::HashMap<ParamId, Var> = tape.param_bindings().collect();

    let mut eval = |store: &ParamStore, name: &str| -> Result<f64> {
        let mut t = Tape::new();
        let l = loss_fn(store, &mut t)?;
        let v = t.value(l).item();
        if !v.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss while probing parameter `{name}`"
            )));
        }
        Ok(v)
    };

    let mut params = Vec::with_capacity(targets.len());
    for (id, indices) in targets {
        let name = store.name(*id).to_string();
        let analytic_all = bound.get(id).and_then(|&v| grads.get(v));
        let mut entries = Vec::with_capacity(indices.len());
        for &i in indices {
            let orig = store.tensor(*id).data()[i];
            store.tensor_mut(*id).data_mut()[i] = orig + cfg.eps;
            let up = eval(store, &name);
            store.tensor_mut(*id).data_mut()[i] = orig - cfg.eps;
            let down = eval(store, &name);
            store.tensor_mut(*id).data_mut()[i] = orig;
            let numeric = (up? - down?) / (2.0 * cfg.eps);
            let analytic = analytic_all.map_or(0.0, |g| g[i]);
            entries.push(EntryCheck {
                index: i,
                analytic,
                numeric,
                rel_err: relative_error(analytic, numeric, cfg.floor),
            });
        }
        let max_rel_err = entries.iter().map(|e| e.rel_err).fold(0.0, f64::max);
        params.push(ParamCheck {
            name,
            entries,
            max_rel_err,
            passed: max_rel_err < cfg.tol,
        });
    }
    let max_rel_err = params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max);
    Ok(FdReport {
        passed: params.iter().all(|p| p.passed),
        params,
        max_rel_err,
    })
}

/// Result of probing one op kind in isolation.
#[derive(Debug, Clone)]
pub struct OpAudit {
    pub op: OpKind,
    pub max_rel_err: f64,
    pub passed: bool,
    /// Other ops the probe relies on.
    pub support: Vec<OpKind>,
}

/// Finite-difference probe of every differentiable op on small random
/// inputs. Each probe applies the op, then reduces with `sum(y ⊙ w)` for a
/// fixed random `w`; `fault` is forwarded to every probe tape.
pub fn audit_ops(fault: Option<OpKind>, cfg: FdConfig) -> Result<Vec<OpAudit>> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0x0A0D);
    let mut store = ParamStore::new();
    let g = ParamGroup::VlAdapter;
    let x = store.add("x", g, Tensor::uniform(&[3, 4], -1.0, 1.0, &mut rng));
    let x2 = store.add("x2", g, Tensor::uniform(&[3, 4], -1.0, 1.0, &mut rng));
    let y = store.add("y", g, Tensor::uniform(&[4, 3], -1.0, 1.0, &mut rng));
    let sq = store.add("sq", g, Tensor::uniform(&[3, 3], -1.0, 1.0, &mut rng));
    let row = store.add("row", g, Tensor::uniform(&[4], -1.0, 1.0, &mut rng));
    let table = store.add("table", g, Tensor::uniform(&[5, 4], -1.0, 1.0, &mut rng));
    let w34 = Tensor::uniform(&[3, 4], -1.0, 1.0, &mut rng);
    let w_other: Vec<Tensor> = [[3, 3], [4, 3], [6, 4], [3, 8], [2, 4], [3, 2], [4, 4]]
        .iter()
        .map(|s| Tensor::uniform(s, -1.0, 1.0, &mut rng))
        .collect();
    let all: Vec<(ParamId, Vec<usize>)> = [x, x2, y, sq, row, table]
        .iter()
        .map(|&id| (id, (0..store.tensor(id).len()).collect()))
        .collect();
    let keep: std::rc::Rc<[bool]> = vec![true, false, true].into();

    let mut out = Vec::with_capacity(OpKind::DIFFERENTIABLE.len());
    for op in OpKind::DIFFERENTIABLE {
        let mut support = vec![OpKind::Mul, OpKind::Sum];
        if op == OpKind::CausalMask {
            support.push(OpKind::Softmax);
        }
        support.retain(|&s| s != op);
        if matches!(op, OpKind::Sum | OpKind::CrossEntropy) {
            support.clear();
        }
        if op == OpKind::Mul {
            support = vec![OpKind::Sum];
        }
        let report = finite_diff_check(&mut store, &all, cfg, |s, t| {
            t.inject_fault(fault);
            let px = t.param(s, x);
            let yv = match op {
                OpKind::MatMul => {
                    let py = t.param(s, y);
                    t.matmul(px, py)?
                }
                OpKind::Add => {
                    let p2 = t.param(s, x2);
                    t.add(px, p2)?
                }
                OpKind::Mul => {
                    let p2 = t.param(s, x2);
                    t.mul(px, p2)?
                }
                OpKind::Scale => t.scale(px, 1.7),
                OpKind::AddRow => {
                    let r = t.param(s, row);
                    t.add_row(px, r)?
                }
                OpKind::MulRow => {
                    let r = t.param(s, row);
                    t.mul_row(px, r)?
                }
                OpKind::Gelu => t.gelu(px),
                OpKind::LayerNorm => t.layer_norm(px)?,
                OpKind::Softmax => t.softmax_rows(px)?,
                OpKind::CausalMask => {
                    let p = t.param(s, sq);
                    let m = t.causal_mask(p)?;
                    t.softmax_rows(m)?
                }
                OpKind::MaskRows => t.mask_rows(px, keep.clone())?,
                OpKind::MaskedAdd => {
                    let p2 = t.param(s, x2);
                    t.masked_add(px, p2, keep.clone())?
                }
                OpKind::ConcatRows => {
                    let p2 = t.param(s, x2);
                    t.concat_rows(&[px, p2])?
                }
                OpKind::ConcatCols => {
                    let p2 = t.param(s, x2);
                    t.concat_cols(&[px, p2])?
                }
                OpKind::SliceRows => t.slice_rows(px, 1, 2)?,
                OpKind::SliceCols => t.slice_cols(px, 1, 2)?,
                OpKind::Transpose => t.transpose(px)?,
                OpKind::Sum => return Ok(t.sum(px)),
                OpKind::Sin => t.sin(px),
                OpKind::GatherRows => {
                    let tb = t.param(s, table);
                    t.gather_rows(tb, &[0, 2, 2, 4])?
                }
                OpKind::CrossEntropy => return t.cross_entropy(px, &[(0, 1), (2, 3)]),
                OpKind::Leaf => unreachable!("leaves have no backward rule"),
            };
            let shape = t.shape(yv).to_vec();
            let w = if shape == [3, 4] {
                w34.clone()
            } else {
                w_other
                    .iter()
                    .find(|w| w.shape() == shape.as_slice())
                    .cloned()
                    .ok_or_else(|| Error::Shape(format!("no probe weight for shape {shape:?}")))?
            };
            let wv = t.constant(w);
            let prod = t.mul(yv, wv)?;
            Ok(t.sum(prod))
        })?;
        out.push(OpAudit {
            op,
            max_rel_err: report.max_rel_err,
            passed: report.passed,
            support,
        });
    }
    Ok(out)
}

/// Ops whose probe fails while every op it relies on passes.
pub fn blame(audits: &[OpAudit]) -> Vec<OpKind> {
    let ok = |k: OpKind| audits.iter().find(|a| a.op == k).is_none_or(|a| a.passed);
    audits
        .iter()
        .filter(|a| !a.passed && a.support.iter().all(|&s| ok(s)))
        .map(|a| a.op)
        .collect()
}
