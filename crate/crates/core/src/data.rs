//! Synthetic color-grid VQA data.
//!
//! Each image is a `G×G` grid of one-hot colors plus small clamped Gaussian
//! noise. Questions ask for the majority color or for the bucketed count of
//! one color; captions (pretraining targets) list the majority color followed
//! by every color's count bucket. Answers are computed from the noiseless
//! grid, and the generator keeps a margin so noise can never change them.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modality::MultimodalSequence;
use crate::tensor::Tensor;

pub mod vocab {
    pub const PAD: usize = 0;
    pub const BOS: usize = 1;
    pub const ANS: usize = 2;
    pub const Q_MAJORITY: usize = 3;
    pub const Q_COUNT: usize = 4;
    pub const Q_CAPTION: usize = 5;
    pub const COLOR_BASE: usize = 6;
    pub const MAX_COLORS: usize = 8;
    pub const BUCKET_BASE: usize = COLOR_BASE + MAX_COLORS;
    pub const N_BUCKETS: usize = 4;
    /// Smallest vocabulary that holds every token above.
    pub const MIN_VOCAB: usize = BUCKET_BASE + N_BUCKETS;

    pub fn color(k: usize) -> usize {
        COLOR_BASE + k
    }

    pub fn bucket(b: usize) -> usize {
        BUCKET_BASE + b
    }
}

pub const NOISE_STD: f64 = 0.05;
/// Noise is clamped to this magnitude, so a one-hot channel stays the argmax.
pub const NOISE_CLAMP: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Majority,
    /// Bucketed count of one color.
    Count(usize),
    Caption,
}

/// Relative weights of the two question types.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskMix {
    pub majority: f64,
    pub count: f64,
}

impl Default for TaskMix {
    fn default() -> Self {
        Self {
            majority: 0.5,
            count: 0.5,
        }
    }
}

/// What a stream of samples asks for.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    Vqa(TaskMix),
    Caption,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DataSpec {
    pub grid: usize,
    pub colors: usize,
    /// Visual tokens the model will prepend (`N_I` or `N_I + N_q`).
    pub n_visual: usize,
}

#[derive(Debug, Clone)]
pub struct SyntheticSample {
    pub image: Tensor,
    /// Noiseless color index per patch, row-major.
    pub grid: Vec<usize>,
    pub task: Task,
    pub question_ids: Vec<usize>,
    pub answer_ids: Vec<usize>,
    pub sequence: MultimodalSequence,
}

impl SyntheticSample {
    /// Prompt tokens (question) and the full language sequence.
    pub fn language_ids(&self) -> &[usize] {
        &self.sequence.language_token_ids
    }

    /// Allowed answer tokens at each answer position.
    pub fn candidates(&self, colors: usize) -> Vec<Vec<usize>> {
        let colors_v: Vec<usize> = (0..colors).map(vocab::color).collect();
        let buckets: Vec<usize> = (0..vocab::N_BUCKETS).map(vocab::bucket).collect();
        match self.task {
            Task::Majority => vec![colors_v],
            Task::Count(_) => vec![buckets],
            Task::Caption => std::iter::once(colors_v)
                .chain(std::iter::repeat_n(buckets, colors))
                .collect(),
        }
    }
}

/// Width of each count bucket for `n` patches.
pub fn bucket_width(n: usize) -> usize {
    n.div_ceil(vocab::N_BUCKETS)
}

pub fn bucket_of(count: usize, n: usize) -> usize {
    (count / bucket_width(n)).min(vocab::N_BUCKETS - 1)
}

pub fn color_counts(grid: &[usize], colors: usize) -> Vec<usize> {
    let mut c = vec![0; colors];
    for &g in grid {
        c[g] += 1;
    }
    c
}

/// Answer tokens for `task` computed from a noiseless grid. Majority ties go
/// to the lower color index.
pub fn answer_for(task: Task, grid: &[usize], colors: usize) -> Vec<usize> {
    let counts = color_counts(grid, colors);
    let n = grid.len();
    let majority = counts
        .iter()
        .enumerate()
        .fold(0, |best, (k, &c)| if c > counts[best] { k } else { best });
    match task {
        Task::Majority => vec![vocab::color(majority)],
        Task::Count(k) => vec![vocab::bucket(bucket_of(counts[k], n))],
        Task::Caption => std::iter::once(vocab::color(majority))
            .chain(counts.iter().map(|&c| vocab::bucket(bucket_of(c, n))))
            .collect(),
    }
}

fn validate(spec: &DataSpec, mix: Option<&TaskMix>) -> Result<()> {
    if spec.grid < 2 {
        return Err(Error::config("vision.grid", "grid must be at least 2"));
    }
    if spec.colors < 2 || spec.colors > vocab::MAX_COLORS {
        return Err(Error::config(
            "vision.colors",
            format!("colors must be in 2..={}", vocab::MAX_COLORS),
        ));
    }
    if let Some(m) = mix {
        let ok = m.majority >= 0.0 && m.count >= 0.0 && m.majority + m.count > 0.0;
        if !ok || !m.majority.is_finite() || !m.count.is_finite() {
            return Err(Error::config("train.task_mix", "weights must be non-negative with a positive sum"));
        }
    }
    Ok(())
}

/// Fills `n - fixed.len()` patches with colors other than `exclude`, each
/// color capped at `cap`.
fn fill_others<R: Rng>(rng: &mut R, grid: &mut Vec<usize>, n: usize, colors: usize, exclude: usize, cap: usize) {
    let mut counts = vec![0usize; colors];
    while grid.len() < n {
        let open: Vec<usize> = (0..colors).filter(|&k| k != exclude && counts[k] < cap).collect();
        let k = *open.choose(rng).expect("capacity covers the remaining patches");
        counts[k] += 1;
        grid.push(k);
    }
}

fn majority_grid<R: Rng>(rng: &mut R, n: usize, colors: usize) -> Vec<usize> {
    let c = rng.gen_range(0..colors);
    let lo = n.div_ceil(colors) + 2;
    let count = rng.gen_range(lo.min(n)..=n);
    let mut grid = vec![c; count];
    fill_others(rng, &mut grid, n, colors, c, count.saturating_sub(2));
    grid
}

fn count_grid<R: Rng>(rng: &mut R, n: usize, colors: usize, k: usize) -> Vec<usize> {
    let w = bucket_width(n);
    let b = rng.gen_range(0..vocab::N_BUCKETS);
    let start = b * w;
    let end = if b + 1 == vocab::N_BUCKETS { n } else { (b + 1) * w - 1 };
    // one count of margin from neighbouring buckets
    let lo = if b == 0 { start } else { start + 1 };
    let hi = if b + 1 == vocab::N_BUCKETS { end } else { end - 1 };
    let count = if lo <= hi { rng.gen_range(lo..=hi) } else { start };
    let mut grid = vec![k; count];
    fill_others(rng, &mut grid, n, colors, k, n);
    grid
}

/// Deterministic sample for `seed`.
pub fn gen_sample(seed: u64, objective: Objective, spec: &DataSpec) -> Result<SyntheticSample> {
    let mix = match &objective {
        Objective::Vqa(m) => Some(m),
        Objective::Caption => None,
    };
    validate(spec, mix)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = spec.grid * spec.grid;
    let task = match objective {
        Objective::Caption => Task::Caption,
        Objective::Vqa(m) => {
            if rng.gen::<f64>() * (m.majority + m.count) < m.majority {
                Task::Majority
            } else {
                Task::Count(rng.gen_range(0..spec.colors))
            }
        }
    };
    let mut grid = match task {
        Task::Majority | Task::Caption => majority_grid(&mut rng, n, spec.colors),
        Task::Count(k) => count_grid(&mut rng, n, spec.colors, k),
    };
    grid.shuffle(&mut rng);

    let mut pixels = vec![0.0; n * spec.colors];
    for (p, &c) in grid.iter().enumerate() {
        for ch in 0..spec.colors {
            let noise = (NOISE_STD * rng.sample::<f64, _>(StandardNormal)).clamp(-NOISE_CLAMP, NOISE_CLAMP);
            pixels[p * spec.colors + ch] = if ch == c { 1.0 } else { 0.0 } + noise;
        }
    }
    let image = Tensor::new(vec![spec.grid, spec.grid, spec.colors], pixels)?;

    let question_ids = match task {
        Task::Majority => vec![vocab::BOS, vocab::Q_MAJORITY, vocab::ANS],
        Task::Count(k) => vec![vocab::BOS, vocab::Q_COUNT, vocab::color(k), vocab::ANS],
        Task::Caption => vec![vocab::BOS, vocab::Q_CAPTION, vocab::ANS],
    };
    let answer_ids = answer_for(task, &grid, spec.colors);
    let language: Vec<usize> = question_ids.iter().chain(&answer_ids).copied().collect();
    let mut loss_mask = vec![false; spec.n_visual + question_ids.len()];
    loss_mask.extend(std::iter::repeat_n(true, answer_ids.len()));
    let sequence = MultimodalSequence::new(spec.n_visual, language, loss_mask)?;
    Ok(SyntheticSample {
        image,
        grid,
        task,
        question_ids,
        answer_ids,
        sequence,
    })
}

/// Colors recovered from a noisy image by per-patch argmax.
pub fn decode_grid(image: &Tensor) -> Vec<usize> {
    let k = *image.shape().last().unwrap_or(&1);
    image
        .data()
        .chunks(k)
        .map(crate::decoder::argmax)
        .collect()
}
