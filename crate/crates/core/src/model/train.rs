//! Joint MLM + ITM training with Adam.
//!
//! Each step draws a batch from the corpus with a seeded generator: a fixed
//! share of the batch are masked-LM items (words masked with
//! `mlm_mask_prob`, at least one per caption), the rest are image-text
//! matching items whose negatives swap the target verb for another verb seen
//! with the same subject. Gradients are summed over fixed-size chunks and the
//! chunk sums are added in batch order, so a run is bit-identical whether the
//! chunks run in parallel or not.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::network::{backward, cross_entropy, forward, OutputGrads};
use super::ToyModelParams;
use crate::dataset::ProbeSample;
use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::text::{mask_at, TokenId, MASK};
use crate::visual::VisualInput;

/// Batch items per gradient chunk. Part of the numerical contract: changing it
/// changes the summation order and therefore the low bits of every run.
const CHUNK: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: usize,
    pub batch: usize,
    pub mlm_mask_prob: f64,
    pub itm_neg_prob: f64,
    /// Share of each batch given to the matching objective.
    pub itm_task_prob: f64,
    /// Chance that an individual region's features are zeroed in an MLM item.
    pub roi_mask_prob: f64,
    /// Chance that every region's features are zeroed in an MLM item.
    pub image_mask_prob: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 3000,
            batch: 32,
            mlm_mask_prob: 0.15,
            itm_neg_prob: 0.5,
            itm_task_prob: 0.5,
            roi_mask_prob: 0.15,
            image_mask_prob: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("mlm_mask_prob", self.mlm_mask_prob),
            ("itm_neg_prob", self.itm_neg_prob),
            ("itm_task_prob", self.itm_task_prob),
            ("roi_mask_prob", self.roi_mask_prob),
            ("image_mask_prob", self.image_mask_prob),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} is not a probability")));
            }
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        if !(self.lr > 0.0 && self.eps > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2)
        {
            return Err(Error::Config("invalid optimizer settings".into()));
        }
        Ok(())
    }

    fn n_itm(&self) -> usize {
        (self.batch as f64 * self.itm_task_prob).round() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    /// Mean cross-entropy over masked positions; `NaN` if the batch had none.
    pub mlm_loss: f64,
    pub itm_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub params: ToyModelParams<f32>,
    pub trace: Vec<LossRecord>,
}

/// Adam moment estimates.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: ToyModelParams<f32>,
    pub v: ToyModelParams<f32>,
    pub t: usize,
}

impl AdamState {
    pub fn new(params: &ToyModelParams<f32>) -> Self {
        AdamState {
            m: ToyModelParams::zeros(params.config),
            v: ToyModelParams::zeros(params.config),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut ToyModelParams<f32>, grads: &ToyModelParams<f32>, cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
        let c1 = 1.0 - cfg.beta1.powi(self.t as i32) as f32;
        let c2 = 1.0 - cfg.beta2.powi(self.t as i32) as f32;
        let (lr, eps) = (cfg.lr as f32, cfg.eps as f32);
        let tensors = params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut());
        for ((((_, mut p), (_, g)), (_, mut m)), (_, mut v)) in tensors {
            ndarray::Zip::from(&mut p)
                .and(&g)
                .and(&mut m)
                .and(&mut v)
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let mhat = *m / c1;
                    let vhat = *v / c2;
                    *p -= lr * mhat / (vhat.sqrt() + eps);
                });
        }
    }
}

#[derive(Debug, Clone)]
enum Objective {
    /// `(word position, original token)` pairs; weight applies to each.
    Mlm(Vec<(usize, TokenId)>, f64),
    /// Class label and weight.
    Itm(usize, f64),
}

#[derive(Debug, Clone)]
struct Item {
    tokens: Vec<TokenId>,
    image: VisualInput,
    objective: Objective,
}

/// Verbs observed at the target position, grouped by subject word.
fn verb_pools(corpus: &[ProbeSample]) -> (BTreeMap<&str, Vec<&str>>, Vec<&str>) {
    let mut by_subject: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    let mut all: Vec<&str> = Vec::new();
    for s in corpus {
        if let Some(v) = s.target_word() {
            let pool = by_subject.entry(s.subject_word.as_str()).or_default();
            if !pool.contains(&v) {
                pool.push(v);
            }
            if !all.contains(&v) {
                all.push(v);
            }
        }
    }
    (by_subject, all)
}

struct BatchBuilder<'a> {
    corpus: Vec<&'a ProbeSample>,
    by_subject: BTreeMap<&'a str, Vec<&'a str>>,
    all_verbs: Vec<&'a str>,
    vocab_ids: BTreeMap<&'a str, TokenId>,
}

impl<'a> BatchBuilder<'a> {
    fn new(corpus: &'a [ProbeSample]) -> Result<Self> {
        let usable: Vec<&ProbeSample> = corpus
            .iter()
            .filter(|s| s.pair_label == crate::dataset::PairLabel::Positive && !s.caption.is_empty())
            .collect();
        if usable.is_empty() {
            return Err(Error::Config("training corpus has no positive samples".into()));
        }
        let (by_subject, all_verbs) = verb_pools(corpus);
        let mut vocab_ids = BTreeMap::new();
        for s in &usable {
            for (w, &t) in s.caption.words.iter().zip(&s.caption.tokens) {
                vocab_ids.insert(w.as_str(), t);
            }
        }
        Ok(BatchBuilder {
            corpus: usable,
            by_subject,
            all_verbs,
            vocab_ids,
        })
    }

    fn mlm_item(&self, rng: &mut ChaCha8Rng, cfg: &TrainConfig, weight: f64) -> Item {
        let s = *self.corpus.choose(rng).expect("nonempty corpus");
        let n = s.caption.len();
        let mut positions: Vec<usize> = (0..n).filter(|_| rng.random_bool(cfg.mlm_mask_prob)).collect();
        if positions.is_empty() {
            positions.push(rng.random_range(0..n));
        }
        let mut tokens = s.caption.tokens.clone();
        let targets: Vec<(usize, TokenId)> = positions
            .iter()
            .map(|&p| {
                let t = tokens[p];
                tokens[p] = MASK;
                (p, t)
            })
            .collect();
        let mut image = s.image.clone();
        if rng.random_bool(cfg.image_mask_prob) {
            image.rois.iter_mut().for_each(|r| r.feature.fill(0.0));
        } else {
            for roi in &mut image.rois {
                if rng.random_bool(cfg.roi_mask_prob) {
                    roi.feature.fill(0.0);
                }
            }
        }
        let w = weight / targets.len() as f64;
        Item {
            tokens,
            image,
            objective: Objective::Mlm(targets, w),
        }
    }

    fn itm_item(&self, rng: &mut ChaCha8Rng, cfg: &TrainConfig, weight: f64) -> Item {
        let s = *self.corpus.choose(rng).expect("nonempty corpus");
        let mut tokens = s.caption.tokens.clone();
        let mut label = 1;
        if rng.random_bool(cfg.itm_neg_prob) {
            if let (Some(i), Some(verb)) = (s.target_index, s.target_word()) {
                let pool = self
                    .by_subject
                    .get(s.subject_word.as_str())
                    .filter(|p| p.len() > 1)
                    .unwrap_or(&self.all_verbs);
                let others: Vec<&&str> = pool.iter().filter(|v| **v != verb).collect();
                if let Some(swap) = others.choose(rng) {
                    if let Some(&id) = self.vocab_ids.get(**swap) {
                        tokens[i] = id;
                        label = 0;
                    }
                }
            }
        }
        Item {
            tokens,
            image: s.image.clone(),
            objective: Objective::Itm(label, weight),
        }
    }

    fn batch(&self, rng: &mut ChaCha8Rng, cfg: &TrainConfig) -> Vec<Item> {
        let n_itm = cfg.n_itm();
        let n_mlm = cfg.batch - n_itm;
        let mut items = Vec::with_capacity(cfg.batch);
        for _ in 0..n_mlm {
            items.push(self.mlm_item(rng, cfg, 1.0 / n_mlm as f64));
        }
        for _ in 0..n_itm {
            items.push(self.itm_item(rng, cfg, 1.0 / n_itm as f64));
        }
        items
    }
}

struct ChunkResult {
    grads: ToyModelParams<f32>,
    mlm_loss: f64,
    itm_loss: f64,
}

fn chunk_gradient(params: &ToyModelParams<f32>, items: &[Item]) -> Result<ChunkResult> {
    let mut grads = ToyModelParams::zeros(params.config);
    let (mut mlm_loss, mut itm_loss) = (0.0, 0.0);
    for item in items {
        let out = forward(params, &item.tokens, &item.image)?;
        let mut upstream = OutputGrads::default();
        match &item.objective {
            Objective::Mlm(targets, w) => {
                let mut g = ndarray::Array2::zeros(out.mlm_logits.raw_dim());
                for &(p, t) in targets {
                    let (loss, grad) = cross_entropy(out.mlm_logits.row(p + 1), t as usize, *w);
                    mlm_loss += loss * w;
                    g.row_mut(p + 1).assign(&grad);
                }
                upstream.mlm = Some(g);
            }
            Objective::Itm(label, w) => {
                let (loss, grad) = cross_entropy(out.itm_logits.view(), *label, *w);
                itm_loss += loss * w;
                upstream.itm = Some(grad);
            }
        }
        backward(params, &out.cache, &upstream, &mut grads, false);
    }
    Ok(ChunkResult {
        grads,
        mlm_loss,
        itm_loss,
    })
}

/// Loss and parameter gradient for one batch, reduced in chunk order.
fn batch_gradient(
    params: &ToyModelParams<f32>,
    items: &[Item],
    exec: &Executor,
) -> Result<(ToyModelParams<f32>, f64, f64)> {
    let chunks: Vec<&[Item]> = items.chunks(CHUNK).collect();
    let results = exec.map(&chunks, |c| chunk_gradient(params, c));
    let mut iter = results.into_iter();
    let first = iter.next().expect("batch is nonempty")?;
    let (mut grads, mut mlm, mut itm) = (first.grads, first.mlm_loss, first.itm_loss);
    for r in iter {
        let r = r?;
        grads.scaled_add(1.0, &r.grads);
        mlm += r.mlm_loss;
        itm += r.itm_loss;
    }
    Ok((grads, mlm, itm))
}

/// Trains `params` on the positive samples of `corpus`.
pub fn train(
    params: ToyModelParams<f32>,
    corpus: &[ProbeSample],
    config: &TrainConfig,
    exec: &Executor,
) -> Result<TrainOutput> {
    train_with_progress(params, corpus, config, exec, |_| {})
}

pub fn train_with_progress(
    mut params: ToyModelParams<f32>,
    corpus: &[ProbeSample],
    config: &TrainConfig,
    exec: &Executor,
    mut progress: impl FnMut(&LossRecord),
) -> Result<TrainOutput> {
    config.validate()?;
    let builder = BatchBuilder::new(corpus)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = AdamState::new(&params);
    let mut trace = Vec::with_capacity(config.steps);
    let n_itm = config.n_itm();
    let n_mlm = config.batch - n_itm;
    for step in 0..config.steps {
        let items = builder.batch(&mut rng, config);
        let (grads, mlm, itm) = batch_gradient(&params, &items, exec)?;
        if !(mlm.is_finite() && itm.is_finite()) || !grads.is_finite() {
            return Err(Error::TrainingDiverged { step });
        }
        adam.step(&mut params, &grads, config);
        if !params.is_finite() {
            return Err(Error::TrainingDiverged { step });
        }
        let record = LossRecord {
            step,
            mlm_loss: if n_mlm > 0 { mlm } else { f64::NAN },
            itm_loss: if n_itm > 0 { itm } else { f64::NAN },
        };
        progress(&record);
        trace.push(record);
    }
    Ok(TrainOutput { params, trace })
}

/// Mean cross-entropy of the original word when each sample's target
/// position is masked. Samples without a target are ignored.
pub fn target_position_loss(params: &ToyModelParams<f32>, samples: &[ProbeSample], exec: &Executor) -> Result<f64> {
    let with_target: Vec<&ProbeSample> = samples.iter().filter(|s| s.target_index.is_some()).collect();
    if with_target.is_empty() {
        return Err(Error::Config("no samples with a target word".into()));
    }
    let losses = exec.map(&with_target, |s| -> Result<f64> {
        let i = s.target_index.expect("filtered");
        let masked = mask_at(&s.caption, i)?;
        let out = forward(params, &masked.tokens(), &s.image)?;
        Ok(cross_entropy(out.mlm_logits.row(i + 1), s.caption.tokens[i] as usize, 1.0).0)
    });
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / with_target.len() as f64)
}

pub fn format_loss_trace(trace: &[LossRecord]) -> String {
    let mut out = String::from("step,mlm_loss,itm_loss\n");
    for r in trace {
        let _ = writeln!(out, "{},{},{}", r.step, r.mlm_loss, r.itm_loss);
    }
    out
}

pub fn write_loss_trace(trace: &[LossRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, format_loss_trace(trace)).map_err(|e| Error::io(path, e))
}
