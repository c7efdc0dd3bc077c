//! Source training, offline and online test-time adaptation, and evaluation.

use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use crate::data::{
    images_to_tensor, split_train_val, strong_augment, subsample_indices, substream,
    weak_augment, Dataset, Image, StrongAugConfig,
};
use crate::error::{Error, Result};
use crate::model::{PromptViT, PromptViTConfig};
use crate::nn::{argmax, softmax_last, to_rows, to_scalar, Param, ParamFactory, ParamRole};
use crate::optim::{cosine_lr, Sgd};
use crate::pseudo_label::{ema_update, pseudo_label_loss, trainable_pairs, MemoryBank};
use crate::ssl::{
    dino_cls_loss_log, prompt_alignment_loss, prompt_diversity_loss, sharpen_center_teacher,
    sharpen_student_log, teacher_temperature, total_loss, update_center, DinoCenterState,
    LossComponents, LossWeights, ProjectionHeads, ProjectorKind,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Cosine,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Offline,
    Online,
}

/// Augmentation applied to labeled images during supervised training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceAugmentation {
    Weak,
    Strong,
}

/// Optimiser, schedule and objective settings shared by source training and adaptation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptationConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
    pub batch_size: usize,
    pub steps: usize,
    pub top_k: usize,
    /// Memory bank capacity; 0 means `min(target size, 2048)`.
    pub bank_capacity: usize,
    pub use_memory_bank: bool,
    pub ema_momentum: f64,
    pub loss_weights: LossWeights,
    pub mode: Mode,
    pub data_ratio: f64,
    pub seed: u64,
    pub projection_dim: usize,
    pub projector: ProjectorKind,
    pub student_temp: f64,
    pub teacher_temp_start: f64,
    pub teacher_temp_end: f64,
    pub teacher_temp_warmup: f64,
    pub center_momentum: f64,
    /// Evaluate on the labeled target set every this many steps (0 disables).
    pub eval_every: usize,
    /// Compare the frozen backbone against the checkpoint every this many steps (0 disables).
    pub verify_frozen_every: usize,
    pub strong_aug: StrongAugConfig,
    pub source_augmentation: SourceAugmentation,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-3,
            momentum: 0.9,
            weight_decay: 1e-4,
            schedule: Schedule::Cosine,
            batch_size: 32,
            steps: 500,
            top_k: 3,
            bank_capacity: 0,
            use_memory_bank: true,
            ema_momentum: 0.999,
            loss_weights: LossWeights::default(),
            mode: Mode::Offline,
            data_ratio: 1.0,
            seed: 0,
            projection_dim: 256,
            projector: ProjectorKind::Mlp,
            student_temp: 0.1,
            teacher_temp_start: 0.04,
            teacher_temp_end: 0.07,
            teacher_temp_warmup: 0.1,
            center_momentum: 0.9,
            eval_every: 50,
            verify_frozen_every: 100,
            strong_aug: StrongAugConfig::default(),
            source_augmentation: SourceAugmentation::Strong,
        }
    }
}

impl AdaptationConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.learning_rate > 0.0) {
            return fail(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1".into());
        }
        if !(self.data_ratio > 0.0 && self.data_ratio <= 1.0) {
            return fail(format!("data_ratio must lie in (0, 1], got {}", self.data_ratio));
        }
        if !(0.0..=1.0).contains(&self.ema_momentum) {
            return fail(format!("ema_momentum must lie in [0, 1], got {}", self.ema_momentum));
        }
        if self.top_k == 0 {
            return fail("top_k must be >= 1".into());
        }
        if self.bank_capacity != 0 && self.bank_capacity < self.top_k {
            return fail(format!(
                "bank_capacity {} is smaller than top_k {}",
                self.bank_capacity, self.top_k
            ));
        }
        if self.projection_dim == 0 {
            return fail("projection_dim must be >= 1".into());
        }
        if !(self.student_temp > 0.0 && self.teacher_temp_start > 0.0 && self.teacher_temp_end > 0.0) {
            return fail("temperatures must be positive".into());
        }
        self.loss_weights.validate()
    }
}

/// One JSON-lines metrics record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss_pl: f64,
    pub loss_cls: f64,
    pub loss_prompt: f64,
    pub loss_div: f64,
    pub loss_total: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pseudo_label_acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_acc: Option<f64>,
}

/// Per-class and class-balanced accuracy, in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `None` for classes absent from the evaluation set.
    pub per_class: Vec<Option<f64>>,
    pub average: f64,
    pub overall: f64,
}

impl EvalReport {
    /// `class,accuracy` rows followed by `average` and `overall`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,accuracy\n");
        for (c, a) in self.per_class.iter().enumerate() {
            match a {
                Some(a) => s.push_str(&format!("{c},{a:.4}\n")),
                None => s.push_str(&format!("{c},\n")),
            }
        }
        s.push_str(&format!("average,{:.4}\n", self.average));
        s.push_str(&format!("overall,{:.4}\n", self.overall));
        s
    }
}

/// Class-balanced accuracy from predictions.
pub fn accuracy_report(predictions: &[usize], labels: &[usize], num_classes: usize) -> EvalReport {
    let mut hit = vec![0usize; num_classes];
    let mut seen = vec![0usize; num_classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        seen[y] += 1;
        if p == y {
            hit[y] += 1;
        }
    }
    let per_class: Vec<Option<f64>> = hit
        .iter()
        .zip(&seen)
        .enumerate()
        .map(|(c, (&h, &n))| {
            if n == 0 {
                warn!(class = c, "class absent from evaluation set; excluded from the mean");
                None
            } else {
                Some(100.0 * h as f64 / n as f64)
            }
        })
        .collect();
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    let average = if defined.is_empty() {
        0.0
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    };
    let total_hits: usize = hit.iter().sum();
    let overall = if labels.is_empty() {
        0.0
    } else {
        100.0 * total_hits as f64 / labels.len() as f64
    };
    EvalReport {
        per_class,
        average,
        overall,
    }
}

const EVAL_BATCH: usize = 128;

/// Argmax predictions and final CLS features over a dataset, without augmentation.
pub fn predict(model: &PromptViT, images: &[Image]) -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
    let mut preds = Vec::with_capacity(images.len());
    let mut feats = Vec::with_capacity(images.len());
    for chunk in images.chunks(EVAL_BATCH) {
        let refs: Vec<&Image> = chunk.iter().collect();
        let out = model.forward(&images_to_tensor(&refs, model.dtype())?)?;
        preds.extend(to_rows(&out.logits)?.iter().map(|r| argmax(r)));
        feats.extend(to_rows(&out.cls_feature)?);
    }
    Ok((preds, feats))
}

pub fn evaluate(model: &PromptViT, data: &Dataset) -> Result<EvalReport> {
    data.check_labels()?;
    let (preds, _) = predict(model, &data.images)?;
    Ok(accuracy_report(&preds, &data.labels, data.num_classes))
}

/// Epoch-wise shuffled batches over `n` items.
struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    fn new(n: usize, batch: usize, rng: ChaCha8Rng) -> Self {
        let mut s = Self {
            order: (0..n).collect(),
            pos: n,
            batch: batch.min(n.max(1)),
            rng,
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    fn next_batch(&mut self) -> Vec<usize> {
        if self.pos + self.batch > self.order.len() {
            self.reshuffle();
        }
        let b = self.order[self.pos..self.pos + self.batch].to_vec();
        self.pos += self.batch;
        b
    }
}

const STREAM_INIT: u64 = 1;
const STREAM_SAMPLER: u64 = 2;
const STREAM_AUG: u64 = 3;
const STREAM_HEADS: u64 = 4;
const STREAM_WARMUP: u64 = 5;
const STREAM_WEAK: u64 = 6;
const STREAM_STRONG: u64 = 7;

/// Result of supervised source training.
pub struct SourceOutcome {
    /// Parameters with the best validation accuracy.
    pub model: PromptViT,
    pub best_val_accuracy: f64,
    pub history: Vec<StepRecord>,
}

/// Trains every parameter with cross-entropy on a 90/10 split of `data`
/// and keeps the best-validation parameters.
pub fn train_source(config: &PromptViTConfig, data: &Dataset, opt: &AdaptationConfig) -> Result<SourceOutcome> {
    opt.validate()?;
    config.validate()?;
    data.check_labels()?;
    if data.num_classes != config.num_classes {
        return Err(Error::Data(format!(
            "dataset has {} classes, model has {}",
            data.num_classes, config.num_classes
        )));
    }
    if data.len() < 2 {
        return Err(Error::Data("need at least two source samples".into()));
    }
    let model = {
        let mut rng = substream(opt.seed, STREAM_INIT);
        let mut f = ParamFactory::new(&mut rng, DType::F32);
        PromptViT::new(config, &mut f)?
    };
    train_supervised(model, data, opt)
}

/// Supervised cross-entropy training of every trainable parameter of `model`.
pub fn train_supervised(model: PromptViT, data: &Dataset, opt: &AdaptationConfig) -> Result<SourceOutcome> {
    let (train_idx, val_idx) = split_train_val(data.len(), 0.9, opt.seed);
    let train = data.subset(&train_idx);
    let val = data.subset(&val_idx);
    let mut best = model.deep_copy()?;
    let mut best_acc = if opt.steps == 0 || val.is_empty() {
        0.0
    } else {
        evaluate(&model, &val)?.average
    };
    let mut sampler = BatchSampler::new(train.len(), opt.batch_size, substream(opt.seed, STREAM_SAMPLER));
    let mut aug_rng = substream(opt.seed, STREAM_AUG);
    let mut sgd = Sgd::new(opt.momentum, opt.weight_decay);
    let mut history = Vec::with_capacity(opt.steps);
    for step in 0..opt.steps {
        let lr = lr_at(opt, step);
        let idx = sampler.next_batch();
        let views: Vec<Image> = idx
            .iter()
            .map(|&i| match opt.source_augmentation {
                SourceAugmentation::Weak => weak_augment(&train.images[i], &mut aug_rng),
                SourceAugmentation::Strong => strong_augment(&train.images[i], &mut aug_rng, &opt.strong_aug),
            })
            .collect();
        let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
        let refs: Vec<&Image> = views.iter().collect();
        let out = model.forward(&images_to_tensor(&refs, model.dtype())?)?;
        let loss = pseudo_label_loss(&out.logits, &labels)?;
        let grads = loss.backward()?;
        sgd.step(&model.params(), &grads, lr)?;
        let loss_v = to_scalar(&loss)?;
        if !loss_v.is_finite() {
            return Err(Error::State(format!("source loss became non-finite at step {step}")));
        }
        let preds: Vec<usize> = to_rows(&out.logits)?.iter().map(|r| argmax(r)).collect();
        let batch_acc = accuracy_report(&preds, &labels, data.num_classes).overall;
        let mut rec = StepRecord {
            step,
            lr,
            loss_pl: loss_v,
            loss_cls: 0.0,
            loss_prompt: 0.0,
            loss_div: 0.0,
            loss_total: loss_v,
            pseudo_label_acc: None,
            batch_acc: Some(batch_acc),
            eval_acc: None,
        };
        let last = step + 1 == opt.steps;
        if !val.is_empty() && (last || (opt.eval_every > 0 && (step + 1) % opt.eval_every == 0)) {
            let acc = evaluate(&model, &val)?.average;
            rec.eval_acc = Some(acc);
            if acc >= best_acc {
                best_acc = acc;
                best = model.deep_copy()?;
            }
            info!(step, loss = loss_v, val_acc = acc, "source training");
        }
        history.push(rec);
    }
    if val.is_empty() {
        best = model;
    }
    best.unfreeze_all();
    Ok(SourceOutcome {
        model: best,
        best_val_accuracy: best_acc,
        history,
    })
}

fn lr_at(opt: &AdaptationConfig, step: usize) -> f64 {
    match (opt.mode, opt.schedule) {
        (Mode::Online, _) | (_, Schedule::None) => opt.learning_rate,
        (Mode::Offline, Schedule::Cosine) => cosine_lr(opt.learning_rate, step, opt.steps),
    }
}

/// Teacher-side targets for the self-supervised terms, treated as constants.
#[derive(Debug, Clone)]
pub struct TeacherTargets {
    /// Centered, sharpened teacher CLS distribution `[B, K]`.
    pub cls_probs: Tensor,
    /// Projected teacher aggregated prompts, `[B, p, K]` per stage.
    pub prompt_projs: Vec<Tensor>,
}

/// Student-side objective on a batch of strong views.
pub fn adaptation_objective(
    student: &PromptViT,
    heads: &ProjectionHeads,
    strong_images: &Tensor,
    pseudo_labels: &[usize],
    teacher: Option<&TeacherTargets>,
    weights: &LossWeights,
    student_temp: f64,
) -> Result<(LossComponents, Tensor)> {
    let out = student.forward(strong_images)?;
    let pl = pseudo_label_loss(&out.logits, pseudo_labels)?;
    let zero = pl.zeros_like()?;
    let mut comps = LossComponents {
        pseudo_label: pl,
        cls: zero.clone(),
        prompt: zero.clone(),
        diversity: zero,
    };
    let needs_proj = weights.beta1 != 0.0 || weights.beta2 != 0.0 || weights.lambda != 0.0;
    if needs_proj {
        let proj = heads.project(&out.cls_feature, &out.aggregated_prompts)?;
        if let Some(t) = teacher {
            if weights.beta1 != 0.0 {
                comps.cls = dino_cls_loss_log(&t.cls_probs, &sharpen_student_log(&proj.cls, student_temp)?)?;
            }
            if weights.beta2 != 0.0 {
                comps.prompt = prompt_alignment_loss(&proj.prompts, &t.prompt_projs)?;
            }
        }
        if weights.lambda != 0.0 {
            comps.diversity = prompt_diversity_loss(&proj.prompts)?;
        }
    }
    let total = total_loss(&comps, weights)?;
    Ok((comps, total))
}

/// EMA teacher mirroring the student model and its projection heads.
pub struct TeacherState {
    pub model: PromptViT,
    pub heads: ProjectionHeads,
    pub ema_momentum: f64,
}

impl TeacherState {
    pub fn from_student(student: &PromptViT, heads: &ProjectionHeads, ema_momentum: f64) -> Result<Self> {
        let mut model = student.deep_copy()?;
        model.freeze_all();
        let mut heads = heads.deep_copy()?;
        heads.set_trainable(false);
        Ok(Self {
            model,
            heads,
            ema_momentum,
        })
    }

    /// EMA over every parameter the student trains; frozen parameters are
    /// identical in both by construction.
    pub fn update(&self, student: &PromptViT, student_heads: &ProjectionHeads) -> Result<()> {
        let (t, s) = trainable_pairs(self.model.params(), student.params())?;
        ema_update(&t, &s, self.ema_momentum)?;
        let (t, s) = trainable_pairs(self.heads.params(), student_heads.params())?;
        ema_update(&t, &s, self.ema_momentum)
    }
}

/// Counters used to check the adaptation protocols.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdaptStats {
    pub optimizer_steps: usize,
    pub bank_updates: usize,
    pub learning_rates: Vec<f64>,
}

pub struct AdaptOutcome {
    pub student: PromptViT,
    pub heads: ProjectionHeads,
    pub teacher: TeacherState,
    pub history: Vec<StepRecord>,
    pub stats: AdaptStats,
    /// Online mode: accuracy over the whole stream, measured before each update.
    pub stream_accuracy: Option<f64>,
    /// Offline mode with the memory bank enabled: its final contents.
    pub bank: Option<MemoryBank>,
}

impl AdaptOutcome {
    /// Names of every parameter the student optimised.
    pub fn trainable_names(&self) -> Vec<String> {
        self.student
            .params()
            .into_iter()
            .chain(self.heads.params())
            .filter(|p| p.is_trainable())
            .map(|p| p.name().to_string())
            .collect()
    }
}

fn check_frozen(student: &PromptViT, source: &PromptViT) -> Result<()> {
    for (s, o) in student.params().iter().zip(source.params()) {
        if s.role() != ParamRole::Backbone {
            continue;
        }
        let a = s.value().flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        let b = o.value().flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        if a.iter().zip(&b).any(|(x, y)| x.to_bits() != y.to_bits()) {
            return Err(Error::State(format!("frozen parameter {} changed", s.name())));
        }
    }
    Ok(())
}

fn augment_batch<F: FnMut(&Image) -> Image>(images: &[Image], idx: &[usize], mut f: F) -> Vec<Image> {
    idx.iter().map(|&i| f(&images[i])).collect()
}

fn batch_tensor(views: &[Image], dtype: DType) -> Result<Tensor> {
    let refs: Vec<&Image> = views.iter().collect();
    images_to_tensor(&refs, dtype)
}

/// Shared state of one adaptation run.
struct Adapter<'a> {
    source: &'a PromptViT,
    opt: &'a AdaptationConfig,
    student: PromptViT,
    heads: ProjectionHeads,
    teacher: TeacherState,
    center: DinoCenterState,
    sgd: Sgd,
    stats: AdaptStats,
    needs_teacher_ssl: bool,
}

struct StepInputs<'b> {
    strong_student: &'b Tensor,
    strong_teacher: &'b Tensor,
    pseudo_labels: &'b [usize],
}

impl<'a> Adapter<'a> {
    fn new(source: &'a PromptViT, opt: &'a AdaptationConfig) -> Result<Self> {
        let mut student = source.deep_copy()?;
        student.freeze_for_adaptation();
        let cfg = student.config().clone();
        let heads = {
            let mut rng = substream(opt.seed, STREAM_HEADS);
            let mut f = ParamFactory::new(&mut rng, student.dtype());
            ProjectionHeads::new(&mut f, opt.projector, cfg.embed_dim, opt.projection_dim, cfg.num_stages)?
        };
        let teacher = TeacherState::from_student(&student, &heads, opt.ema_momentum)?;
        let center = DinoCenterState::new(
            opt.projection_dim,
            student.dtype(),
            opt.center_momentum,
            opt.student_temp,
            opt.teacher_temp_start,
        )?;
        let w = &opt.loss_weights;
        Ok(Self {
            source,
            opt,
            student,
            heads,
            teacher,
            center,
            sgd: Sgd::new(opt.momentum, opt.weight_decay),
            stats: AdaptStats::default(),
            needs_teacher_ssl: w.beta1 != 0.0 || w.beta2 != 0.0,
        })
    }

    /// One optimisation step; returns the loss record fields.
    fn step(&mut self, step: usize, lr: f64, inputs: StepInputs<'_>) -> Result<StepRecord> {
        self.center.teacher_temp = teacher_temperature(
            step,
            self.opt.steps,
            self.opt.teacher_temp_start,
            self.opt.teacher_temp_end,
            self.opt.teacher_temp_warmup,
        );
        let teacher_out = if self.needs_teacher_ssl {
            let out = self.teacher.model.forward(inputs.strong_teacher)?;
            let proj = self.teacher.heads.project(&out.cls_feature, &out.aggregated_prompts)?;
            Some((proj.cls.detach(), proj.prompts.iter().map(|p| p.detach()).collect::<Vec<_>>()))
        } else {
            None
        };
        let targets = match &teacher_out {
            Some((cls, prompts)) => Some(TeacherTargets {
                cls_probs: sharpen_center_teacher(cls, &self.center)?,
                prompt_projs: prompts.clone(),
            }),
            None => None,
        };
        let (comps, total) = adaptation_objective(
            &self.student,
            &self.heads,
            inputs.strong_student,
            inputs.pseudo_labels,
            targets.as_ref(),
            &self.opt.loss_weights,
            self.opt.student_temp,
        )?;
        let grads = total.backward()?;
        let trainable: Vec<&Param> = self
            .student
            .params()
            .into_iter()
            .chain(self.heads.params())
            .filter(|p| p.is_trainable())
            .collect();
        self.sgd.step(&trainable, &grads, lr)?;
        self.stats.optimizer_steps += 1;
        self.stats.learning_rates.push(lr);
        self.teacher.update(&self.student, &self.heads)?;
        if let Some((cls, _)) = &teacher_out {
            update_center(&mut self.center, cls)?;
        }
        if self.opt.verify_frozen_every > 0 && (step + 1).is_multiple_of(self.opt.verify_frozen_every) {
            check_frozen(&self.student, self.source)?;
        }
        Ok(StepRecord {
            step,
            lr,
            loss_pl: to_scalar(&comps.pseudo_label)?,
            loss_cls: to_scalar(&comps.cls)?,
            loss_prompt: to_scalar(&comps.prompt)?,
            loss_div: to_scalar(&comps.diversity)?,
            loss_total: to_scalar(&total)?,
            pseudo_label_acc: None,
            batch_acc: None,
            eval_acc: None,
        })
    }

    fn finish(self, history: Vec<StepRecord>, stream_accuracy: Option<f64>) -> Result<AdaptOutcome> {
        check_frozen(&self.student, self.source)?;
        Ok(AdaptOutcome {
            student: self.student,
            heads: self.heads,
            teacher: self.teacher,
            history,
            stats: self.stats,
            stream_accuracy,
            bank: None,
        })
    }
}

/// Teacher features and probabilities for a batch of weak views.
fn teacher_bank_entries(teacher: &PromptViT, weak: &Tensor) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let out = teacher.forward(weak)?;
    Ok((to_rows(&out.cls_feature)?, to_rows(&softmax_last(&out.logits)?)?))
}

fn fraction_correct(pred: &[usize], truth: &[usize]) -> f64 {
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    100.0 * hits as f64 / pred.len().max(1) as f64
}

/// Offline adaptation on an unlabeled target set. Target labels are used
/// only for the reported pseudo-label and evaluation accuracies.
pub fn adapt_offline(source: &PromptViT, target: &Dataset, opt: &AdaptationConfig) -> Result<AdaptOutcome> {
    opt.validate()?;
    if opt.mode != Mode::Offline {
        return Err(Error::Config("adapt_offline requires mode = offline".into()));
    }
    if target.is_empty() {
        return Err(Error::Data("empty target set".into()));
    }
    let keep = subsample_indices(target.len(), opt.data_ratio, opt.seed)?;
    let train = target.subset(&keep);
    let mut ad = Adapter::new(source, opt)?;
    let dtype = ad.student.dtype();

    let mut bank = if opt.use_memory_bank {
        let capacity = if opt.bank_capacity == 0 {
            train.len().min(2048)
        } else {
            opt.bank_capacity
        };
        let mut warm_rng = substream(opt.seed, STREAM_WARMUP);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut warm_rng);
        order.truncate(capacity);
        let mut feats = Vec::with_capacity(order.len());
        let mut probs = Vec::with_capacity(order.len());
        for chunk in order.chunks(EVAL_BATCH) {
            let views = augment_batch(&train.images, chunk, |im| weak_augment(im, &mut warm_rng));
            let (f, p) = teacher_bank_entries(&ad.teacher.model, &batch_tensor(&views, dtype)?)?;
            feats.extend(f);
            probs.extend(p);
        }
        Some(MemoryBank::warm_up(capacity.max(opt.top_k), &feats, &probs, opt.top_k)?)
    } else {
        None
    };

    let mut sampler = BatchSampler::new(train.len(), opt.batch_size, substream(opt.seed, STREAM_SAMPLER));
    let mut aug_rng = substream(opt.seed, STREAM_AUG);
    let mut history = Vec::with_capacity(opt.steps);
    let mut base_lr = opt.learning_rate;
    let mut initial_loss: Option<f64> = None;
    for step in 0..opt.steps {
        let lr = match opt.schedule {
            Schedule::Cosine => cosine_lr(base_lr, step, opt.steps),
            Schedule::None => base_lr,
        };
        let idx = sampler.next_batch();
        let weak = augment_batch(&train.images, &idx, |im| weak_augment(im, &mut aug_rng));
        let s1 = augment_batch(&train.images, &idx, |im| strong_augment(im, &mut aug_rng, &opt.strong_aug));
        let s2 = augment_batch(&train.images, &idx, |im| strong_augment(im, &mut aug_rng, &opt.strong_aug));
        let weak_t = batch_tensor(&weak, dtype)?;
        let truth: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();

        let student_weak = ad.student.forward(&weak_t)?;
        let labels: Vec<usize> = match &bank {
            Some(bank) => bank
                .soft_vote_batch(&to_rows(&student_weak.cls_feature)?, opt.top_k)?
                .into_iter()
                .map(|v| v.label)
                .collect(),
            None => to_rows(&student_weak.logits)?.iter().map(|r| argmax(r)).collect(),
        };
        drop(student_weak);

        let mut rec = ad.step(
            step,
            lr,
            StepInputs {
                strong_student: &batch_tensor(&s1, dtype)?,
                strong_teacher: &batch_tensor(&s2, dtype)?,
                pseudo_labels: &labels,
            },
        )?;
        if let Some(bank) = bank.as_mut() {
            let (f, p) = teacher_bank_entries(&ad.teacher.model, &weak_t)?;
            bank.update(&f, &p)?;
            ad.stats.bank_updates += 1;
        }
        rec.pseudo_label_acc = Some(fraction_correct(&labels, &truth));
        if opt.eval_every > 0 && (step + 1) % opt.eval_every == 0 {
            let acc = evaluate(&ad.student, target)?.average;
            rec.eval_acc = Some(acc);
            info!(step, loss = rec.loss_total, pl_acc = rec.pseudo_label_acc, eval_acc = acc, "adapt");
        }
        match initial_loss {
            None => initial_loss = Some(rec.loss_total.abs()),
            Some(init) if init > 0.0 && rec.loss_total > 10.0 * init => {
                base_lr *= 0.5;
                warn!(step, base_lr, "loss exceeded 10x its initial value; halving the learning rate");
                initial_loss = Some(rec.loss_total.abs());
            }
            _ => {}
        }
        if !rec.loss_total.is_finite() {
            return Err(Error::State(format!("adaptation loss became non-finite at step {step}")));
        }
        history.push(rec);
    }
    let mut outcome = ad.finish(history, None)?;
    outcome.bank = bank;
    Ok(outcome)
}

/// The fixed order and batching of a target stream.
pub fn stream_batches(n: usize, batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut substream(seed, STREAM_SAMPLER));
    order.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
}

fn weak_stream_views(images: &[Image], batches: &[Vec<usize>], seed: u64) -> Vec<Vec<Image>> {
    let mut rng = substream(seed, STREAM_WEAK);
    batches
        .iter()
        .map(|b| augment_batch(images, b, |im| weak_augment(im, &mut rng)))
        .collect()
}

/// Accuracy of a fixed model over the same weak-view stream `adapt_online` sees.
pub fn stream_accuracy(model: &PromptViT, target: &Dataset, opt: &AdaptationConfig) -> Result<f64> {
    let batches = stream_batches(target.len(), opt.batch_size, opt.seed);
    let mut hits = 0usize;
    for (b, views) in batches.iter().zip(weak_stream_views(&target.images, &batches, opt.seed)) {
        let out = model.forward(&batch_tensor(&views, model.dtype())?)?;
        let preds: Vec<usize> = to_rows(&out.logits)?.iter().map(|r| argmax(r)).collect();
        hits += preds.iter().zip(b).filter(|(p, &i)| **p == target.labels[i]).count();
    }
    Ok(100.0 * hits as f64 / target.len().max(1) as f64)
}

/// Single pass over a target stream: one update per batch, no memory bank,
/// constant learning rate, pseudo labels from the student's weak-view
/// prediction. Accuracy is measured on that prediction, before the update.
pub fn adapt_online(source: &PromptViT, target: &Dataset, opt: &AdaptationConfig) -> Result<AdaptOutcome> {
    opt.validate()?;
    if opt.mode != Mode::Online {
        return Err(Error::Config("adapt_online requires mode = online".into()));
    }
    let batches = stream_batches(target.len(), opt.batch_size, opt.seed);
    let mut run_opt = opt.clone();
    run_opt.steps = batches.len();
    let mut ad = Adapter::new(source, &run_opt)?;
    let dtype = ad.student.dtype();
    let mut strong_rng = substream(opt.seed, STREAM_STRONG);
    let mut history = Vec::with_capacity(batches.len());
    let mut hits = 0usize;
    for (step, (b, weak)) in batches
        .iter()
        .zip(weak_stream_views(&target.images, &batches, opt.seed))
        .enumerate()
    {
        let s1 = augment_batch(&target.images, b, |im| strong_augment(im, &mut strong_rng, &opt.strong_aug));
        let s2 = augment_batch(&target.images, b, |im| strong_augment(im, &mut strong_rng, &opt.strong_aug));
        let truth: Vec<usize> = b.iter().map(|&i| target.labels[i]).collect();
        let out = ad.student.forward(&batch_tensor(&weak, dtype)?)?;
        let labels: Vec<usize> = to_rows(&out.logits)?.iter().map(|r| argmax(r)).collect();
        drop(out);
        let batch_hits = labels.iter().zip(&truth).filter(|(a, b)| a == b).count();
        hits += batch_hits;
        let mut rec = ad.step(
            step,
            opt.learning_rate,
            StepInputs {
                strong_student: &batch_tensor(&s1, dtype)?,
                strong_teacher: &batch_tensor(&s2, dtype)?,
                pseudo_labels: &labels,
            },
        )?;
        rec.batch_acc = Some(100.0 * batch_hits as f64 / b.len() as f64);
        rec.pseudo_label_acc = rec.batch_acc;
        history.push(rec);
    }
    let acc = 100.0 * hits as f64 / target.len().max(1) as f64;
    ad.finish(history, Some(acc))
}

/// Draws `n` random indices, used by callers that subsample for speed.
pub fn sample_indices<R: Rng>(n: usize, k: usize, rng: &mut R) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.truncate(k.min(n));
    idx
}

/// One row of the loss-term ablation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub name: String,
    pub use_memory_bank: bool,
    pub weights: LossWeights,
    pub source_only: f64,
    pub adapted: f64,
}

/// Pseudo labels alone, then adding the memory bank, the CLS term, and
/// finally the prompt alignment and diversity terms.
pub fn ablation_configs(base: &AdaptationConfig) -> Vec<(String, AdaptationConfig)> {
    let w = base.loss_weights;
    let mut out = Vec::with_capacity(4);
    for (name, bank, beta1, beta2, lambda) in [
        ("pl", false, 0.0, 0.0, 0.0),
        ("pl+mb", true, 0.0, 0.0, 0.0),
        ("pl+mb+cls", true, w.beta1, 0.0, 0.0),
        ("full", true, w.beta1, w.beta2, w.lambda),
    ] {
        let mut c = base.clone();
        c.mode = Mode::Offline;
        c.use_memory_bank = bank;
        c.loss_weights = LossWeights { beta1, beta2, lambda, ..w };
        out.push((name.to_string(), c));
    }
    out
}

/// Adapts the same source model under each ablation configuration.
pub fn run_ablation(source: &PromptViT, target: &Dataset, base: &AdaptationConfig) -> Result<Vec<AblationRow>> {
    let before = evaluate(source, target)?.average;
    ablation_configs(base)
        .into_iter()
        .map(|(name, c)| {
            let out = adapt_offline(source, target, &c)?;
            let adapted = evaluate(&out.student, target)?.average;
            info!(config = %name, before, adapted, "ablation");
            Ok(AblationRow {
                name,
                use_memory_bank: c.use_memory_bank,
                weights: c.loss_weights,
                source_only: before,
                adapted,
            })
        })
        .collect()
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("config,memory_bank,alpha,beta1,beta2,lambda,source_only,adapted,gain\n");
    for r in rows {
        let w = &r.weights;
        s.push_str(&format!(
            "{},{},{},{},{},{},{:.4},{:.4},{:.4}\n",
            r.name,
            r.use_memory_bank,
            w.alpha,
            w.beta1,
            w.beta2,
            w.lambda,
            r.source_only,
            r.adapted,
            r.adapted - r.source_only
        ));
    }
    s
}
