//! Stage-wise training: AdamW over per-group learning rates, deterministic
//! sample streams and held-out evaluation.

use std::collections::BTreeMap;
use std::path::Path;

use log::{debug, info};
use serde::{Deserialize, Serialize};

use crate::data::{gen_sample, Objective, SyntheticSample, TaskMix};
use crate::decoder::argmax;
use crate::error::{Error, Result};
use crate::modality::MultimodalSequence;
use crate::model::{masked_ce_loss, ForwardOptions, Model};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tensor::Tape;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Finetune,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
        }
    }
}

/// One stage's schedule as written in the experiment config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Schedule {
    pub steps: usize,
    pub batch_size: usize,
    /// Learning rate for the vision-language adapter.
    pub lr_adapter: f64,
    pub lr_qladder: f64,
    /// Learning rate for the decoder adapters.
    pub lr_lora: f64,
    pub seed: u64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            lr_adapter: 4e-4,
            lr_qladder: 4e-4,
            lr_lora: 2e-3,
            seed: 0,
        }
    }
}

impl Schedule {
    pub fn validate(&self, field: &str) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config(format!("{field}.batch_size"), "must be at least 1"));
        }
        for (name, lr) in [("lr_adapter", self.lr_adapter), ("lr_qladder", self.lr_qladder), ("lr_lora", self.lr_lora)] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::config(format!("{field}.{name}"), "must be finite and non-negative"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageConfig {
    pub stage: Stage,
    pub groups: Vec<(ParamGroup, f64)>,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub objective: Objective,
}

impl StageConfig {
    /// Alignment stage on caption targets. Trains the adapter and ladder, plus
    /// the decoder adapters when `arcana_star` is set.
    pub fn pretrain(s: &Schedule, arcana_star: bool) -> Self {
        let mut groups = vec![(ParamGroup::VlAdapter, s.lr_adapter), (ParamGroup::QLadder, s.lr_qladder)];
        if arcana_star {
            groups.push((ParamGroup::Lora, s.lr_lora));
        }
        Self {
            stage: Stage::Pretrain,
            groups,
            steps: s.steps,
            batch_size: s.batch_size,
            seed: s.seed,
            objective: Objective::Caption,
        }
    }

    /// Instruction stage on VQA targets with every adapter trainable.
    pub fn finetune(s: &Schedule, mix: TaskMix) -> Self {
        Self {
            stage: Stage::Finetune,
            groups: vec![
                (ParamGroup::QLadder, s.lr_qladder),
                (ParamGroup::VlAdapter, s.lr_adapter),
                (ParamGroup::Lora, s.lr_lora),
            ],
            steps: s.steps,
            batch_size: s.batch_size,
            seed: s.seed,
            objective: Objective::Vqa(mix),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some((g, _)) = self.groups.iter().find(|(g, _)| g.is_frozen()) {
            return Err(Error::Contract(format!(
                "frozen group `{}` listed as trainable in the {} stage",
                g.name(),
                self.stage.name()
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        Ok(())
    }

    pub fn trainable(&self) -> Vec<ParamGroup> {
        self.groups.iter().map(|(g, _)| *g).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Fraction of the run spent on linear warmup.
    pub warmup_frac: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            warmup_frac: 0.05,
        }
    }
}

impl AdamW {
    pub fn warmup_steps(&self, total: usize) -> usize {
        (self.warmup_frac * total as f64).ceil() as usize
    }

    /// Learning-rate multiplier for 1-based step `t`: linear ramp to 1 over
    /// the warmup, then linear decay to 0 at `total`.
    pub fn lr_factor(&self, t: usize, total: usize) -> f64 {
        let w = self.warmup_steps(total);
        if t < w {
            t as f64 / w as f64
        } else if total > w {
            (total - t.min(total)) as f64 / (total - w) as f64
        } else {
            1.0
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub cfg: AdamW,
    pub step: u64,
    pub lrs: BTreeMap<ParamGroup, f64>,
    m: BTreeMap<ParamId, Vec<f64>>,
    v: BTreeMap<ParamId, Vec<f64>>,
}

impl OptimizerState {
    pub fn new(cfg: AdamW, groups: &[(ParamGroup, f64)]) -> Self {
        Self {
            cfg,
            step: 0,
            lrs: groups.iter().copied().collect(),
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn moments(&self, id: ParamId) -> Option<(&[f64], &[f64])> {
        Some((self.m.get(&id)?, self.v.get(&id)?))
    }

    /// One decoupled-weight-decay Adam update of every trainable parameter
    /// that holds a gradient, at `lr_factor` times its group rate.
    pub fn step(&mut self, store: &mut ParamStore, lr_factor: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let group = store.get(id).group;
            let Some(&lr) = self.lrs.get(&group) else { continue };
            let tensor = store.tensor_mut(id);
            if !tensor.requires_grad {
                continue;
            }
            let Some(grad) = tensor.grad.take() else { continue };
            let n = grad.len();
            let m = self.m.entry(id).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(id).or_insert_with(|| vec![0.0; n]);
            let lr = lr * lr_factor;
            let data = tensor.data_mut();
            for i in 0..n {
                let g = grad[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                if lr != 0.0 {
                    let mh = m[i] / bc1;
                    let vh = v[i] / bc2;
                    data[i] -= lr * (mh / (vh.sqrt() + c.eps) + c.weight_decay * data[i]);
                }
            }
            tensor.grad = Some(grad);
        }
    }
}

/// Seed of the `i`-th sample of step `step` in a stream.
pub fn sample_seed(stream: u64, step: usize, i: usize, batch: usize) -> u64 {
    splitmix64(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (step as u64 * batch as u64 + i as u64))
}

/// Seeds reserved for evaluation: a separate domain of the mixer.
pub fn eval_seed(seed: u64, i: usize) -> u64 {
    splitmix64(splitmix64(seed ^ 0xE7A1_0000_0000_0000) ^ i as u64)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageReport {
    pub stage: Stage,
    /// Mean batch loss per step.
    pub losses: Vec<f64>,
    pub trainable_groups: Vec<ParamGroup>,
    pub frozen_hash: String,
}

/// Runs one stage in place and optionally writes a checkpoint.
///
/// Parameters outside the stage's groups are checked bit-for-bit afterwards;
/// any change is a [`Error::FrozenViolation`].
pub fn run_stage(model: &mut Model, stage: &StageConfig, checkpoint: Option<&Path>) -> Result<StageReport> {
    stage.validate()?;
    let trainable = stage.trainable();
    model.store.set_trainable(&trainable);
    model.store.zero_grad();
    let before = model.store.snapshot();
    let frozen_before = model.store.frozen_hash();
    let spec = model.data_spec();
    let mut opt = OptimizerState::new(AdamW::default(), &stage.groups);
    let mut losses = Vec::with_capacity(stage.steps);
    let inv_b = 1.0 / stage.batch_size as f64;

    info!(
        "{} stage: {} steps, batch {}, groups {:?}",
        stage.stage.name(),
        stage.steps,
        stage.batch_size,
        trainable.iter().map(|g| g.name()).collect::<Vec<_>>()
    );
    for step in 0..stage.steps {
        model.store.zero_grad();
        let mut total = 0.0;
        for i in 0..stage.batch_size {
            let seed = sample_seed(stage.seed, step, i, stage.batch_size);
            let sample = gen_sample(seed, stage.objective, &spec)?;
            let mut tape = Tape::new();
            let loss = model.sample_loss(&mut tape, &sample)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss {value} in the {} stage at step {step}, sample seed {seed}",
                    stage.stage.name()
                )));
            }
            total += value;
            let grads = tape.backward(loss)?;
            model.store.accumulate(&tape, &grads, inv_b);
        }
        let mean = total * inv_b;
        losses.push(mean);
        opt.step(&mut model.store, opt.cfg.lr_factor(step + 1, stage.steps));
        if (step + 1) % 50 == 0 {
            debug!("{} step {}: loss {mean:.5}", stage.stage.name(), step + 1);
        }
    }
    model.store.zero_grad();

    let frozen_after = model.store.frozen_hash();
    if frozen_after != frozen_before {
        return Err(Error::FrozenViolation("frozen encoder or decoder base hash changed".into()));
    }
    for (id, p) in model.store.iter() {
        if !trainable.contains(&p.group) && !model.store.matches_snapshot(id, &before) {
            return Err(Error::FrozenViolation(format!(
                "`{}` changed but group `{}` is not trained in the {} stage",
                p.name,
                p.group.name(),
                stage.stage.name()
            )));
        }
    }
    if let Some(path) = checkpoint {
        crate::checkpoint::save(&model.store, path)?;
    }
    Ok(StageReport {
        stage: stage.stage,
        losses,
        trainable_groups: trainable,
        frozen_hash: frozen_after,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub mean_loss: f64,
    pub n_samples: usize,
}

/// Answers restricted to the task's candidate tokens, decoded greedily.
pub fn predict(model: &Model, sample: &SyntheticSample, opts: ForwardOptions) -> Result<(Vec<usize>, f64)> {
    let mut tape = Tape::new();
    let lang = sample.language_ids();
    let q_len = sample.question_ids.len();
    let out = model.forward(&mut tape, &sample.image, lang, opts)?;
    let n_v = model.n_visual_tokens(opts);
    let seq = if n_v == sample.sequence.n_visual() {
        sample.sequence.clone()
    } else {
        let shift = sample.sequence.n_visual();
        let mut mask = vec![false; n_v];
        mask.extend_from_slice(&sample.sequence.loss_mask[shift..]);
        MultimodalSequence::new(n_v, lang.to_vec(), mask)?
    };
    let loss = masked_ce_loss(&mut tape, out.logits, &seq)?;
    let loss = tape.value(loss).item();
    let candidates = sample.candidates(model.vision_cfg.colors);

    let mut prefix = sample.question_ids.clone();
    let mut logits = tape.value(out.logits).clone();
    let mut predicted = Vec::with_capacity(candidates.len());
    for (j, allowed) in candidates.iter().enumerate() {
        if j > 0 && prefix[q_len..] != lang[q_len..q_len + j] {
            // a wrong earlier token: re-run on the model's own prefix
            let mut t = Tape::new();
            let o = model.forward(&mut t, &sample.image, &prefix, opts)?;
            logits = t.value(o.logits).clone();
        }
        let row = logits.row(n_v + q_len + j - 1);
        let scores: Vec<f64> = allowed.iter().map(|&tok| row[tok]).collect();
        let tok = allowed[argmax(&scores)];
        predicted.push(tok);
        prefix.push(tok);
    }
    Ok((predicted, loss))
}

/// Exact-match accuracy and mean teacher-forced loss on `n_samples` held-out
/// samples.
pub fn evaluate(model: &Model, n_samples: usize, seed: u64, objective: Objective) -> Result<EvalReport> {
    let spec = model.data_spec();
    let mut correct = 0usize;
    let mut loss = 0.0;
    for i in 0..n_samples {
        let sample = gen_sample(eval_seed(seed, i), objective, &spec)?;
        let (pred, l) = predict(model, &sample, ForwardOptions::default())?;
        correct += usize::from(pred == sample.answer_ids);
        loss += l;
    }
    let n = n_samples.max(1) as f64;
    Ok(EvalReport {
        accuracy: correct as f64 / n,
        mean_loss: loss / n,
        n_samples,
    })
}

/// Mean of `xs[end - window..end]`, clipped at the start.
pub fn moving_average(xs: &[f64], end: usize, window: usize) -> f64 {
    let end = end.min(xs.len());
    let start = end.saturating_sub(window);
    let s = &xs[start..end];
    s.iter().sum::<f64>() / s.len().max(1) as f64
}
