//! Experiment commands behind the CLI: training runs, ablation sweeps,
//! gradient audit, attention export and parameter audit.
//!
//! Every command writes a `results.json` into its output directory. Numeric
//! arrays in it depend only on the echoed config; `wall_time_s` is the one
//! field that varies between reruns.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{ExperimentConfig, PromptQuestion};
use crate::data::{gen_sample, Objective, SyntheticSample, Task, TaskMix};
use crate::decoder::{attention_mass, AdapterKind};
use crate::error::{Error, Result};
use crate::mmlora::{plain_lora_param_count, MMLoRAConfig};
use crate::modality::build_mask;
use crate::model::{ForwardOptions, Model};
use crate::params::{ParamGroup, ParamId};
use crate::tensor::gradcheck::{audit_ops, blame};
use crate::tensor::{finite_diff_check, FdConfig, OpKind, Tape, Tensor};
use crate::train::{evaluate, predict, run_stage, EvalReport, Stage, StageConfig, StageReport};

pub const RESULTS_FILE: &str = "results.json";
pub const ABLATION_FILE: &str = "ablation.csv";
/// Maximum relative error accepted by the gradient audit.
pub const GRAD_CHECK_TOL: f64 = 1e-5;
/// Entries sampled per gradient-audit group.
pub const GRAD_CHECK_ENTRIES: usize = 24;

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("results serialize");
    text.push('\n');
    write_file(path, text)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParamSummary {
    pub trainable: usize,
    pub frozen: usize,
    pub encoder: usize,
    pub decoder_base: usize,
    pub qladder: usize,
    pub vl_adapter: usize,
    /// Decoder adapter parameters, MM-LoRA or plain LoRA.
    pub decoder_adapters: usize,
    /// Plain rank-R LoRA on the same projections.
    pub plain_lora_parity: usize,
}

impl ParamSummary {
    pub fn of(model: &Model) -> Self {
        let (trainable, frozen) = model.param_counts();
        let d = &model.model_cfg.decoder;
        let r = model.model_cfg.lora.rank;
        let per_layer: usize = crate::decoder::PROJECTIONS
            .iter()
            .map(|p| {
                let (ci, co) = crate::decoder::projection_dims(p, d);
                plain_lora_param_count(ci, co, r)
            })
            .sum();
        Self {
            trainable,
            frozen,
            encoder: model.group_count(ParamGroup::Encoder),
            decoder_base: model.group_count(ParamGroup::DecoderBase),
            qladder: model.group_count(ParamGroup::QLadder),
            vl_adapter: model.group_count(ParamGroup::VlAdapter),
            decoder_adapters: model.group_count(ParamGroup::Lora),
            plain_lora_parity: per_layer * d.layers,
        }
    }

    /// The decoder adapters must cost exactly a plain rank-R LoRA.
    pub fn check_parity(&self) -> Result<()> {
        if self.decoder_adapters != self.plain_lora_parity {
            return Err(Error::Contract(format!(
                "decoder adapters hold {} parameters but plain LoRA at the same rank holds {}",
                self.decoder_adapters, self.plain_lora_parity
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainResults {
    pub command: &'static str,
    pub config: ExperimentConfig,
    pub stages: Vec<StageReport>,
    pub eval: Option<EvalReport>,
    pub params: ParamSummary,
    pub wall_time_s: f64,
}

/// Options that come from the command line rather than the config file.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Checkpoint to start from (fine-tune-only runs, attention export).
    pub checkpoint: Option<PathBuf>,
    /// Worker threads for sweeps; 0 or 1 runs sequentially.
    pub parallel: usize,
    /// Fault injected into every backward pass of the gradient audit.
    pub fault: Option<OpKind>,
}

fn stage_seed(cfg: &ExperimentConfig, schedule_seed: u64) -> u64 {
    cfg.seed.rotate_left(32) ^ schedule_seed
}

/// The stages `cfg` selects, in run order, with their data-stream seeds.
pub fn stage_configs(cfg: &ExperimentConfig) -> Vec<StageConfig> {
    let t = &cfg.train;
    let mut out = Vec::with_capacity(2);
    if t.stage.runs_pretrain() {
        let mut st = StageConfig::pretrain(&t.pretrain, t.arcana_star);
        st.seed = stage_seed(cfg, t.pretrain.seed);
        out.push(st);
    }
    if t.stage.runs_finetune() {
        let mut st = StageConfig::finetune(&t.finetune, t.task_mix);
        st.seed = stage_seed(cfg, t.finetune.seed);
        out.push(st);
    }
    out
}

/// Trains per `cfg` and returns the model with its results. Checkpoints and
/// `results.json` go to `out` when given.
pub fn train_model(cfg: &ExperimentConfig, out: Option<&Path>, opts: &RunOptions) -> Result<(Model, TrainResults)> {
    cfg.validate()?;
    let start = Instant::now();
    let mut model = Model::build(&cfg.model, &cfg.vision, cfg.seed)?;
    let params = ParamSummary::of(&model);
    params.check_parity()?;
    if let Some(path) = &opts.checkpoint {
        crate::checkpoint::load(&mut model.store, path)?;
        info!("loaded checkpoint {}", path.display());
    }
    let t = &cfg.train;
    let mut stages = Vec::new();
    let mut eval = None;
    for st in stage_configs(cfg) {
        let ckpt = out.map(|d| d.join(format!("{}.ckpt", st.stage.name())));
        stages.push(run_stage(&mut model, &st, ckpt.as_deref())?);
        if st.stage == Stage::Finetune && t.eval_samples > 0 {
            let r = evaluate(&model, t.eval_samples, t.eval_seed, Objective::Vqa(t.task_mix))?;
            info!("eval: accuracy {:.4}, loss {:.4} over {} samples", r.accuracy, r.mean_loss, r.n_samples);
            eval = Some(r);
        }
    }
    let results = TrainResults {
        command: "train",
        config: cfg.clone(),
        stages,
        eval,
        params,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    if let Some(dir) = out {
        write_json(&dir.join(RESULTS_FILE), &results)?;
    }
    Ok((model, results))
}

pub fn cmd_train(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<TrainResults> {
    train_model(cfg, Some(&cfg.output.directory), opts).map(|(_, r)| r)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub label: String,
    pub adapter: AdapterKind,
    pub beta: f64,
    pub gamma: f64,
    pub rank: usize,
    pub n_queries: usize,
    pub visual_tokens: usize,
    pub trainable_params: usize,
    pub decoder_adapter_params: usize,
    pub accuracy: f64,
    pub eval_loss: f64,
    pub final_loss: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationResults {
    pub command: &'static str,
    pub config: ExperimentConfig,
    pub rows: Vec<AblationRow>,
    /// Row labels from best to worst accuracy (stable on ties).
    pub accuracy_order: Vec<String>,
    pub skipped: Vec<String>,
}

pub const ABLATION_HEADER: &str = "label,adapter,beta,gamma,rank,n_queries,visual_tokens,trainable_params,decoder_adapter_params,accuracy,eval_loss,final_loss,wall_time_s";

fn adapter_name(k: AdapterKind) -> &'static str {
    match k {
        AdapterKind::MmLora => "mm_lora",
        AdapterKind::Lora => "lora",
    }
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from(ABLATION_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.label,
            adapter_name(r.adapter),
            r.beta,
            r.gamma,
            r.rank,
            r.n_queries,
            r.visual_tokens,
            r.trainable_params,
            r.decoder_adapter_params,
            r.accuracy,
            r.eval_loss,
            r.final_loss,
            r.wall_time_s
        ));
    }
    s
}

fn run_row(label: String, cfg: ExperimentConfig, out: &Path) -> Result<AblationRow> {
    let dir = out.join("runs").join(&label);
    let start = Instant::now();
    let (model, res) = train_model(&cfg, Some(&dir), &RunOptions::default())?;
    let eval = res.eval.unwrap_or(EvalReport {
        accuracy: f64::NAN,
        mean_loss: f64::NAN,
        n_samples: 0,
    });
    let final_loss = res
        .stages
        .last()
        .and_then(|s| s.losses.last().copied())
        .unwrap_or(f64::NAN);
    info!("{label}: accuracy {:.4}", eval.accuracy);
    Ok(AblationRow {
        label,
        adapter: cfg.model.adapter,
        beta: cfg.model.lora.beta,
        gamma: cfg.model.lora.gamma,
        rank: cfg.model.lora.rank,
        n_queries: cfg.vision.n_queries,
        visual_tokens: model.tower.n_visual_tokens(),
        trainable_params: res.params.trainable,
        decoder_adapter_params: res.params.decoder_adapters,
        accuracy: eval.accuracy,
        eval_loss: eval.mean_loss,
        final_loss,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

fn run_rows(jobs: Vec<(String, ExperimentConfig)>, out: &Path, parallel: usize) -> Result<Vec<AblationRow>> {
    if parallel > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(parallel)
            .build()
            .map_err(|e| Error::Contract(format!("cannot start {parallel} workers: {e}")))?;
        pool.install(|| jobs.into_par_iter().map(|(l, c)| run_row(l, c, out)).collect())
    } else {
        jobs.into_iter().map(|(l, c)| run_row(l, c, out)).collect()
    }
}

fn accuracy_order(rows: &[AblationRow]) -> Vec<String> {
    let mut idx: Vec<usize> = (0..rows.len()).collect();
    idx.sort_by(|&a, &b| rows[b].accuracy.total_cmp(&rows[a].accuracy));
    idx.into_iter().map(|i| rows[i].label.clone()).collect()
}

fn finish_ablation(cfg: &ExperimentConfig, command: &'static str, rows: Vec<AblationRow>, skipped: Vec<String>) -> Result<AblationResults> {
    let out = &cfg.output.directory;
    write_file(&out.join(ABLATION_FILE), ablation_csv(&rows))?;
    let results = AblationResults {
        command,
        config: cfg.clone(),
        accuracy_order: accuracy_order(&rows),
        rows,
        skipped,
    };
    write_json(&out.join(RESULTS_FILE), &results)?;
    Ok(results)
}

/// One MM-LoRA run per β (with γ = 1 − β) plus a plain-LoRA baseline, all on
/// the same seeds and data. Rows whose rank split is not integral are skipped
/// with a warning.
pub fn cmd_ablate_rank(cfg: &ExperimentConfig, betas: &[f64], opts: &RunOptions) -> Result<AblationResults> {
    cfg.validate()?;
    let rank = cfg.model.lora.rank;
    let mut jobs = Vec::new();
    let mut skipped = Vec::new();
    for &beta in betas {
        match MMLoRAConfig::new(rank, beta) {
            Ok(mut l) => {
                l.alpha = cfg.model.lora.alpha;
                let mut c = cfg.clone();
                c.model.adapter = AdapterKind::MmLora;
                c.model.lora = l;
                jobs.push((format!("mm_lora_b{beta}_g{}", 1.0 - beta), c));
            }
            Err(e) => {
                warn!("skipping beta={beta}: {e}");
                skipped.push(format!("beta={beta}: {e}"));
            }
        }
    }
    let mut base = cfg.clone();
    base.model.adapter = AdapterKind::Lora;
    jobs.push(("lora".to_string(), base));

    let rows = run_rows(jobs, &cfg.output.directory, opts.parallel)?;
    if let Some(first) = rows.first() {
        if let Some(bad) = rows.iter().find(|r| r.trainable_params != first.trainable_params) {
            return Err(Error::Contract(format!(
                "row `{}` trains {} parameters but `{}` trains {}",
                bad.label, bad.trainable_params, first.label, first.trainable_params
            )));
        }
    }
    finish_ablation(cfg, "ablate-rank", rows, skipped)
}

/// A no-ladder baseline plus one run per ladder size; sizes that are not
/// below the patch count are rejected.
pub fn cmd_ablate_queries(cfg: &ExperimentConfig, queries: &[usize], opts: &RunOptions) -> Result<AblationResults> {
    cfg.validate()?;
    let n_i = cfg.vision.n_patches();
    let mut base = cfg.clone();
    base.vision.n_queries = 0;
    let mut jobs = vec![("no_qladder".to_string(), base)];
    let mut skipped = Vec::new();
    for &nq in queries {
        let mut c = cfg.clone();
        c.vision.n_queries = nq;
        match c.validate() {
            Ok(()) if nq > 0 && nq < n_i => jobs.push((format!("qladder_nq{nq}"), c)),
            Ok(()) => {
                warn!("rejecting N_q={nq}: must lie in 1..{n_i}");
                skipped.push(format!("n_queries={nq}: must lie in 1..{n_i}"));
            }
            Err(e) => {
                warn!("rejecting N_q={nq}: {e}");
                skipped.push(format!("n_queries={nq}: {e}"));
            }
        }
    }
    let rows = run_rows(jobs, &cfg.output.directory, opts.parallel)?;
    finish_ablation(cfg, "ablate-queries", rows, skipped)
}

#[derive(Debug, Clone, Serialize)]
pub struct GroupCheck {
    pub group: String,
    pub params: Vec<String>,
    pub entries: usize,
    pub max_rel_err: f64,
    /// Largest analytic gradient magnitude among the probed entries.
    pub max_abs_grad: f64,
    pub passed: bool,
    pub empty: bool,
    pub failing: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckResults {
    pub command: &'static str,
    pub config: ExperimentConfig,
    pub tolerance: f64,
    pub groups: Vec<GroupCheck>,
    pub max_rel_err: f64,
    pub passed: bool,
    /// Ops whose isolated probe fails; filled only when the check fails.
    pub blamed_ops: Vec<String>,
}

impl GradCheckResults {
    pub fn failing_params(&self) -> Vec<String> {
        self.groups.iter().flat_map(|g| g.failing.iter().cloned()).collect()
    }
}

/// Audit group of a trainable parameter, by name.
pub fn grad_group(name: &str) -> Option<&'static str> {
    const RULES: [(&str, &str); 11] = [
        (".lora_vis_a", "mm_lora.visual.A"),
        (".lora_vis_b", "mm_lora.visual.B"),
        (".lora_lang_a", "mm_lora.language.A"),
        (".lora_lang_b", "mm_lora.language.B"),
        (".lora_a", "lora.A"),
        (".lora_b", "lora.B"),
        ("qladder.queries", "qladder.queries"),
        (".attn.", "qladder.attention"),
        (".ffn.", "qladder.ffn"),
        ("qladder.layer", "qladder.norm"),
        ("vl_adapter.", "vl_adapter"),
    ];
    RULES.iter().find(|(pat, _)| name.contains(pat)).map(|(_, g)| *g)
}

fn expected_groups(kind: AdapterKind) -> Vec<&'static str> {
    let mut g = match kind {
        AdapterKind::MmLora => vec!["mm_lora.visual.A", "mm_lora.visual.B", "mm_lora.language.A", "mm_lora.language.B"],
        AdapterKind::Lora => vec!["lora.A", "lora.B"],
    };
    g.extend(["qladder.queries", "qladder.attention", "qladder.ffn", "qladder.norm", "vl_adapter"]);
    g
}

/// Finite-difference audit of every trainable group of the model described
/// by `cfg`. Zero-initialised adapter factors are first randomised so that
/// both factors carry signal.
pub fn grad_check(cfg: &ExperimentConfig, fault: Option<OpKind>) -> Result<GradCheckResults> {
    use rand::seq::SliceRandom;
    use rand::Rng;

    cfg.validate()?;
    let mut model = Model::build(&cfg.model, &cfg.vision, cfg.seed)?;
    model
        .store
        .set_trainable(&[ParamGroup::Lora, ParamGroup::QLadder, ParamGroup::VlAdapter]);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(9);
    let lora: Vec<ParamId> = model
        .store
        .iter()
        .filter(|(_, p)| p.group == ParamGroup::Lora)
        .map(|(id, _)| id)
        .collect();
    for id in lora {
        let t = model.store.tensor_mut(id);
        for v in t.data_mut() {
            *v += 0.1 * rng.gen::<f64>() - 0.05;
        }
    }

    let spec = model.data_spec();
    let samples = [
        gen_sample(rng.gen(), Objective::Vqa(TaskMix::default()), &spec)?,
        gen_sample(rng.gen(), Objective::Caption, &spec)?,
    ];

    let mut groups: Vec<(&'static str, Vec<(ParamId, usize)>)> =
        expected_groups(cfg.model.adapter).into_iter().map(|g| (g, Vec::new())).collect();
    for (id, p) in model.store.iter() {
        if !p.tensor.requires_grad {
            continue;
        }
        let Some(g) = grad_group(&p.name) else { continue };
        if let Some((_, v)) = groups.iter_mut().find(|(name, _)| *name == g) {
            v.extend((0..p.tensor.len()).map(|i| (id, i)));
        }
    }

    let mut store = std::mem::take(&mut model.store);
    let fd = FdConfig {
        eps: 1e-5,
        tol: GRAD_CHECK_TOL,
        ..Default::default()
    };
    let mut out = Vec::with_capacity(groups.len());
    for (name, mut pool) in groups {
        pool.shuffle(&mut rng);
        pool.truncate(GRAD_CHECK_ENTRIES);
        pool.sort_unstable();
        if pool.is_empty() {
            out.push(GroupCheck {
                group: name.to_string(),
                params: Vec::new(),
                entries: 0,
                max_rel_err: 0.0,
                max_abs_grad: 0.0,
                passed: true,
                empty: true,
                failing: Vec::new(),
            });
            continue;
        }
        let mut targets: Vec<(ParamId, Vec<usize>)> = Vec::new();
        for (id, i) in pool {
            match targets.last_mut() {
                Some((last, idx)) if *last == id => idx.push(i),
                _ => targets.push((id, vec![i])),
            }
        }
        let report = finite_diff_check(&mut store, &targets, fd, |s, t| {
            t.inject_fault(fault);
            let mut total = None;
            for sample in &samples {
                let l = model.sample_loss_with(s, t, sample)?;
                total = Some(match total {
                    None => l,
                    Some(acc) => t.add(acc, l)?,
                });
            }
            Ok(total.expect("at least one sample"))
        })?;
        out.push(GroupCheck {
            group: name.to_string(),
            params: report.params.iter().map(|p| p.name.clone()).collect(),
            entries: report.entries_checked(),
            max_rel_err: report.max_rel_err,
            max_abs_grad: report
                .params
                .iter()
                .flat_map(|p| p.entries.iter().map(|e| e.analytic.abs()))
                .fold(0.0, f64::max),
            passed: report.passed,
            empty: false,
            failing: report.failing().map(|p| p.name.clone()).collect(),
        });
    }
    model.store = store;

    let max_rel_err = out.iter().map(|g| g.max_rel_err).fold(0.0, f64::max);
    let passed = out.iter().all(|g| g.passed);
    let blamed_ops = if passed {
        Vec::new()
    } else {
        blame(&audit_ops(fault, fd)?).iter().map(|k| k.name().to_string()).collect()
    };
    Ok(GradCheckResults {
        command: "grad-check",
        config: cfg.clone(),
        tolerance: GRAD_CHECK_TOL,
        groups: out,
        max_rel_err,
        passed,
        blamed_ops,
    })
}

/// Runs [`grad_check`], writes `results.json` and fails with a numeric error
/// naming the offending parameters and ops when any group fails.
pub fn cmd_grad_check(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<GradCheckResults> {
    let r = grad_check(cfg, opts.fault)?;
    write_json(&cfg.output.directory.join(RESULTS_FILE), &r)?;
    for g in &r.groups {
        if g.empty {
            info!("{}: empty", g.group);
        } else {
            info!("{}: {} entries, max rel err {:.3e}", g.group, g.entries, g.max_rel_err);
        }
    }
    if !r.passed {
        return Err(Error::Numeric(format!(
            "gradient check failed (max rel err {:.3e} >= {:.0e}); parameters: {}; suspect ops: {}",
            r.max_rel_err,
            r.tolerance,
            r.failing_params().join(", "),
            if r.blamed_ops.is_empty() { "none isolated".to_string() } else { r.blamed_ops.join(", ") }
        )));
    }
    Ok(r)
}

/// The three model variants compared by the attention export.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AttnVariant {
    /// Frozen decoder, encoder features only.
    Base,
    /// Decoder adapters on, encoder features only.
    MmLora,
    /// Decoder adapters and ladder tokens.
    MmLoraQladder,
}

impl AttnVariant {
    pub const ALL: [AttnVariant; 3] = [AttnVariant::Base, AttnVariant::MmLora, AttnVariant::MmLoraQladder];

    pub fn name(self) -> &'static str {
        match self {
            AttnVariant::Base => "base",
            AttnVariant::MmLora => "mm_lora",
            AttnVariant::MmLoraQladder => "mm_lora_qladder",
        }
    }

    pub fn options(self) -> ForwardOptions {
        ForwardOptions {
            capture_attention: true,
            adapters: !matches!(self, AttnVariant::Base),
            ladder: matches!(self, AttnVariant::MmLoraQladder),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AttnExport {
    pub variant: AttnVariant,
    pub n_visual: usize,
    pub language_ids: Vec<usize>,
    pub answer: Vec<usize>,
    /// Head-averaged `T×T` attention per layer.
    #[serde(skip)]
    pub layers: Vec<Tensor>,
    /// `(visual_mass, language_mass)` per layer.
    pub mass: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AttnResults {
    pub command: &'static str,
    pub config: ExperimentConfig,
    pub sample_seed: u64,
    pub question_ids: Vec<usize>,
    pub exports: Vec<AttnExport>,
}

fn prompt_sample(model: &Model, cfg: &ExperimentConfig) -> Result<SyntheticSample> {
    let spec = model.data_spec();
    let want = cfg.attn_export.question;
    let mix = match want {
        PromptQuestion::Majority => TaskMix { majority: 1.0, count: 0.0 },
        PromptQuestion::Count(_) => TaskMix { majority: 0.0, count: 1.0 },
    };
    for i in 0..10_000u64 {
        let s = gen_sample(
            crate::train::eval_seed(cfg.attn_export.sample_seed, i as usize),
            Objective::Vqa(mix),
            &spec,
        )?;
        let hit = match (want, s.task) {
            (PromptQuestion::Majority, Task::Majority) => true,
            (PromptQuestion::Count(k), Task::Count(j)) => k == j,
            _ => false,
        };
        if hit {
            return Ok(s);
        }
    }
    Err(Error::Contract(format!("no sample found for question {want:?}")))
}

/// Captures head-averaged attention for each variant of a trained model.
pub fn attention_exports(model: &Model, sample: &SyntheticSample) -> Result<Vec<AttnExport>> {
    let mut out = Vec::with_capacity(3);
    for variant in AttnVariant::ALL {
        let opts = variant.options();
        if opts.ladder && model.tower.ladder.is_none() {
            warn!("model has no ladder; skipping the {} variant", variant.name());
            continue;
        }
        let (answer, _) = predict(model, sample, ForwardOptions { capture_attention: false, ..opts })?;
        let mut ids = sample.question_ids.clone();
        ids.extend_from_slice(&answer);
        let n_visual = model.n_visual_tokens(opts);
        let max = model.model_cfg.decoder.max_len;
        if n_visual + ids.len() > max {
            return Err(Error::ContextOverflow {
                len: n_visual + ids.len(),
                max,
            });
        }
        let mut tape = Tape::new();
        let res = model.forward(&mut tape, &sample.image, &ids, opts)?;
        let record = res
            .attention
            .ok_or_else(|| Error::Contract("attention was not captured".into()))?;
        let mask = build_mask(n_visual, ids.len())?;
        let mass = attention_mass(&record, &mask)?;
        let layers = (0..record.layers.len()).map(|l| record.mean_over_heads(l)).collect();
        out.push(AttnExport {
            variant,
            n_visual,
            language_ids: ids,
            answer,
            layers,
            mass,
        });
    }
    Ok(out)
}

pub fn matrix_csv(m: &Tensor) -> String {
    let cols = m.cols();
    let mut s = (0..cols).map(|j| format!("k{j}")).collect::<Vec<_>>().join(",");
    s.push('\n');
    for i in 0..m.rows() {
        let row: Vec<String> = m.row(i).iter().map(|v| v.to_string()).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

pub const MASS_HEADER: &str = "variant,layer,visual_mass,language_mass";

/// Loads a checkpoint, greedily answers one prompt per variant and writes
/// `attn/<variant>/attn_layer<L>.csv`, `attn_mass.csv` and `results.json`.
pub fn cmd_attn_export(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<AttnResults> {
    cfg.validate()?;
    let path = opts
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::config("checkpoint", "attn-export needs --checkpoint"))?;
    let mut model = Model::build(&cfg.model, &cfg.vision, cfg.seed)?;
    crate::checkpoint::load(&mut model.store, path)?;
    let sample = prompt_sample(&model, cfg)?;
    let exports = attention_exports(&model, &sample)?;

    let out = &cfg.output.directory;
    let mut mass = String::from(MASS_HEADER);
    mass.push('\n');
    for e in &exports {
        for (l, m) in e.layers.iter().enumerate() {
            write_file(
                &out.join("attn").join(e.variant.name()).join(format!("attn_layer{l}.csv")),
                matrix_csv(m),
            )?;
        }
        for (l, (v, t)) in e.mass.iter().enumerate() {
            mass.push_str(&format!("{},{l},{v},{t}\n", e.variant.name()));
        }
    }
    write_file(&out.join("attn_mass.csv"), mass)?;
    let results = AttnResults {
        command: "attn-export",
        config: cfg.clone(),
        sample_seed: cfg.attn_export.sample_seed,
        question_ids: sample.question_ids.clone(),
        exports,
    };
    write_json(&out.join(RESULTS_FILE), &results)?;
    Ok(results)
}

#[derive(Debug, Clone, Serialize)]
pub struct ParityRow {
    pub beta: f64,
    pub gamma: f64,
    pub rank_visual: Option<usize>,
    pub rank_language: Option<usize>,
    pub mm_lora_params: Option<usize>,
    pub plain_lora_params: usize,
    pub equal: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ParamAudit {
    pub command: &'static str,
    pub config: ExperimentConfig,
    pub params: ParamSummary,
    pub groups: Vec<(ParamGroup, usize)>,
    pub parity: Vec<ParityRow>,
}

/// Parameter counts per group and MM-LoRA vs plain-LoRA parity for every β
/// of the ablation grid. No training.
pub fn cmd_param_audit(cfg: &ExperimentConfig) -> Result<ParamAudit> {
    cfg.validate()?;
    let model = Model::build(&cfg.model, &cfg.vision, cfg.seed)?;
    let params = ParamSummary::of(&model);
    let groups = [
        ParamGroup::Encoder,
        ParamGroup::DecoderBase,
        ParamGroup::QLadder,
        ParamGroup::VlAdapter,
        ParamGroup::Lora,
    ]
    .into_iter()
    .map(|g| (g, model.group_count(g)))
    .collect();
    let mut parity = Vec::new();
    for &beta in &cfg.ablation.betas {
        let mut m = cfg.model.clone();
        m.adapter = AdapterKind::MmLora;
        let row = match MMLoRAConfig::new(m.lora.rank, beta) {
            Ok(l) => {
                let (rv, rt) = l.ranks()?;
                m.lora = l;
                let built = Model::build(&m, &cfg.vision, cfg.seed)?;
                let s = ParamSummary::of(&built);
                ParityRow {
                    beta,
                    gamma: 1.0 - beta,
                    rank_visual: Some(rv),
                    rank_language: Some(rt),
                    mm_lora_params: Some(s.decoder_adapters),
                    plain_lora_params: s.plain_lora_parity,
                    equal: s.decoder_adapters == s.plain_lora_parity,
                }
            }
            Err(_) => ParityRow {
                beta,
                gamma: 1.0 - beta,
                rank_visual: None,
                rank_language: None,
                mm_lora_params: None,
                plain_lora_params: params.plain_lora_parity,
                equal: false,
            },
        };
        parity.push(row);
    }
    let audit = ParamAudit {
        command: "param-audit",
        config: cfg.clone(),
        params,
        groups,
        parity,
    };
    write_json(&cfg.output.directory.join(RESULTS_FILE), &audit)?;
    Ok(audit)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn group_names_cover_every_trainable_param() {
        for kind in [AdapterKind::MmLora, AdapterKind::Lora] {
            let mut cfg = ExperimentConfig::tiny();
            cfg.model.adapter = kind;
            let m = Model::build(&cfg.model, &cfg.vision, 0).unwrap();
            for (_, p) in m.store.iter().filter(|(_, p)| !p.frozen()) {
                let g = grad_group(&p.name).unwrap_or_else(|| panic!("{}", p.name));
                assert!(expected_groups(kind).contains(&g), "{} -> {g}", p.name);
            }
        }
    }

    #[test]
    fn csv_has_header_and_rectangular_rows() {
        let m = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.25, 0.75]]).unwrap();
        assert_eq!(matrix_csv(&m), "k0,k1\n1,0\n0.25,0.75\n");
        let row = AblationRow {
            label: "x".into(),
            adapter: AdapterKind::Lora,
            beta: 0.25,
            gamma: 0.75,
            rank: 16,
            n_queries: 8,
            visual_tokens: 44,
            trainable_params: 10,
            decoder_adapter_params: 4,
            accuracy: 0.5,
            eval_loss: 1.0,
            final_loss: 1.5,
            wall_time_s: 0.1,
        };
        let csv = ablation_csv(&[row]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0].split(',').count(), lines[1].split(',').count());
    }

    #[test]
    fn parity_holds_at_defaults() {
        let m = Model::build(&Default::default(), &Default::default(), 0).unwrap();
        let s = ParamSummary::of(&m);
        s.check_parity().unwrap();
        // 2 layers of q,k,v,o (64→64) and FFN (64→128, 128→64) at rank 16
        assert_eq!(s.plain_lora_parity, 2 * (4 * 16 * 128 + 2 * 16 * 192));
    }
}
