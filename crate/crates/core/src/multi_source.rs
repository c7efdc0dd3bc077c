//! Multi-source training with shared and per-domain prompts.
//!
//! Every stage's prompt block is the concatenation `[domain ; shared]`. The
//! backbone and head are shared by all domains. Training visits the domains
//! round-robin; a step only routes gradients to the active domain's prompts.

use std::path::Path;

use candle_core::{DType, Tensor};
use rand::Rng;
use tracing::info;

use crate::adaptation::{accuracy_report, AdaptationConfig, SourceAugmentation, StepRecord};
use crate::checkpoint::{save_params, CheckpointKind, CheckpointMeta, LoadedCheckpoint, FORMAT_VERSION};
use crate::data::{images_to_tensor, split_train_val, strong_augment, substream, weak_augment, Dataset, Image};
use crate::error::{Error, Result};
use crate::model::{Backbone, ForwardOutput, PromptViT, PromptViTConfig};
use crate::nn::{argmax, to_rows, to_scalar, Init, Param, ParamFactory, ParamRole};
use crate::optim::{cosine_lr, Sgd};
use crate::pseudo_label::pseudo_label_loss;

/// Shared backbone and head, shared prompts, and one prompt set per source domain.
#[derive(Debug)]
pub struct MultiSourceBundle {
    backbone: Backbone,
    shared: Vec<Param>,
    domains: Vec<String>,
    domain_prompts: Vec<Vec<Param>>,
}

/// `(domain, shared)` prompt counts per stage for a total of `p`.
pub fn split_prompts(p: usize) -> Result<(usize, usize)> {
    if p < 2 {
        return Err(Error::Config(format!(
            "multi-source training needs at least 2 prompts per stage to split, got {p}"
        )));
    }
    Ok((p / 2, p - p / 2))
}

impl MultiSourceBundle {
    pub fn new<R: Rng>(config: &PromptViTConfig, domains: &[String], f: &mut ParamFactory<'_, R>) -> Result<Self> {
        if domains.is_empty() {
            return Err(Error::Config("at least one source domain is required".into()));
        }
        let mut sorted = domains.to_vec();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != domains.len() {
            return Err(Error::Config("domain names must be unique".into()));
        }
        let (p_d, p_s) = split_prompts(config.prompts_per_stage)?;
        let backbone = Backbone::new(config, f)?;
        let d = config.embed_dim;
        let init = Init::Uniform(1.0 / (d as f64).sqrt());
        let shared = (0..config.num_stages)
            .map(|j| f.param(format!("shared.{j}"), ParamRole::Prompt, &[p_s, d], init))
            .collect::<Result<Vec<_>>>()?;
        let domain_prompts = (0..domains.len())
            .map(|k| {
                (0..config.num_stages)
                    .map(|j| f.param(format!("domains.{k}.{j}"), ParamRole::Prompt, &[p_d, d], init))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            backbone,
            shared,
            domains: domains.to_vec(),
            domain_prompts,
        })
    }

    pub fn skeleton(config: &PromptViTConfig, domains: &[String], dtype: DType) -> Result<Self> {
        let mut rng = substream(0, 0);
        let mut f = ParamFactory::zeroed(&mut rng, dtype);
        Self::new(config, domains, &mut f)
    }

    pub fn config(&self) -> &PromptViTConfig {
        self.backbone.config()
    }

    pub fn domains(&self) -> &[String] {
        &self.domains
    }

    pub fn shared_prompts(&self) -> &[Param] {
        &self.shared
    }

    pub fn domain_prompts(&self, k: usize) -> &[Param] {
        &self.domain_prompts[k]
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    /// Forward pass with domain `k`'s prompts.
    pub fn forward_domain(&self, k: usize, images: &Tensor) -> Result<ForwardOutput> {
        let blocks = self.domain_prompts[k]
            .iter()
            .zip(&self.shared)
            .map(|(dp, sp)| Ok(Tensor::cat(&[dp.tensor(), sp.tensor()], 0)?))
            .collect::<Result<Vec<_>>>()?;
        self.backbone.forward_with_prompts(images, &blocks)
    }

    /// Cross-entropy of domain `k` on a labeled batch.
    pub fn domain_loss(&self, k: usize, images: &Tensor, labels: &[usize]) -> Result<Tensor> {
        pseudo_label_loss(&self.forward_domain(k, images)?.logits, labels)
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = self.backbone.params();
        v.extend(self.shared.iter());
        for set in &self.domain_prompts {
            v.extend(set.iter());
        }
        v
    }

    pub fn deep_copy(&self) -> Result<Self> {
        let copy = Self::skeleton(self.config(), &self.domains, self.backbone.dtype())?;
        for (dst, src) in copy.params().into_iter().zip(self.params()) {
            dst.set(&src.value())?;
        }
        Ok(copy)
    }

    fn predict_domain(&self, k: usize, images: &[Image]) -> Result<Vec<usize>> {
        let mut preds = Vec::with_capacity(images.len());
        for chunk in images.chunks(128) {
            let refs: Vec<&Image> = chunk.iter().collect();
            let out = self.forward_domain(k, &images_to_tensor(&refs, self.backbone.dtype())?)?;
            preds.extend(to_rows(&out.logits)?.iter().map(|r| argmax(r)));
        }
        Ok(preds)
    }
}

/// Target model whose prompt block per stage is
/// `[mean over domains of the domain block ; shared block]`.
pub fn init_target_prompts(bundle: &MultiSourceBundle) -> Result<PromptViT> {
    let n = bundle.domain_prompts.len() as f64;
    let prompts = (0..bundle.shared.len())
        .map(|j| {
            let mut sum = bundle.domain_prompts[0][j].value();
            for set in &bundle.domain_prompts[1..] {
                sum = (sum + set[j].value())?;
            }
            let mean = (sum / n)?;
            let block = Tensor::cat(&[mean, bundle.shared[j].value()], 0)?;
            Param::new(format!("prompts.{j}"), ParamRole::Prompt, block)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut backbone = bundle.backbone.deep_copy()?;
    for p in backbone.params_mut() {
        p.set_trainable(true);
    }
    PromptViT::from_parts(backbone, prompts)
}

pub struct MultiSourceOutcome {
    pub bundle: MultiSourceBundle,
    /// Optimisation steps taken with each domain active.
    pub visits: Vec<usize>,
    pub best_val_accuracy: f64,
    pub history: Vec<StepRecord>,
}

/// Round-robin supervised training over labeled source domains.
pub fn train_multi_source(
    config: &PromptViTConfig,
    domains: &[(String, Dataset)],
    opt: &AdaptationConfig,
) -> Result<MultiSourceOutcome> {
    opt.validate()?;
    config.validate()?;
    if domains.is_empty() {
        return Err(Error::Data("no source domains given".into()));
    }
    for (name, ds) in domains {
        ds.check_labels()?;
        if ds.num_classes != config.num_classes {
            return Err(Error::Data(format!(
                "domain {name} has {} classes, expected a shared label space of {}",
                ds.num_classes, config.num_classes
            )));
        }
        if ds.len() < 2 {
            return Err(Error::Data(format!("domain {name} needs at least two samples")));
        }
    }
    let names: Vec<String> = domains.iter().map(|(n, _)| n.clone()).collect();
    let bundle = {
        let mut rng = substream(opt.seed, 1);
        let mut f = ParamFactory::new(&mut rng, DType::F32);
        MultiSourceBundle::new(config, &names, &mut f)?
    };
    let splits: Vec<(Dataset, Dataset)> = domains
        .iter()
        .enumerate()
        .map(|(k, (_, ds))| {
            let (tr, va) = split_train_val(ds.len(), 0.9, opt.seed.wrapping_add(k as u64));
            (ds.subset(&tr), ds.subset(&va))
        })
        .collect();
    let mut cursors: Vec<(Vec<usize>, usize)> = splits.iter().map(|(tr, _)| (Vec::new(), tr.len())).collect();
    let mut order_rng = substream(opt.seed, 2);
    let mut aug_rng = substream(opt.seed, 3);
    let mut sgd = Sgd::new(opt.momentum, opt.weight_decay);
    let mut visits = vec![0usize; domains.len()];
    let mut history = Vec::with_capacity(opt.steps);
    let mut best = bundle.deep_copy()?;
    let mut best_acc = f64::NEG_INFINITY;

    let val_accuracy = |b: &MultiSourceBundle| -> Result<f64> {
        let mut accs = Vec::new();
        for (k, (_, va)) in splits.iter().enumerate() {
            if !va.is_empty() {
                let preds = b.predict_domain(k, &va.images)?;
                accs.push(accuracy_report(&preds, &va.labels, va.num_classes).average);
            }
        }
        Ok(accs.iter().sum::<f64>() / accs.len().max(1) as f64)
    };

    for step in 0..opt.steps {
        let k = step % domains.len();
        let train = &splits[k].0;
        let (order, pos) = &mut cursors[k];
        let batch = opt.batch_size.min(train.len());
        if *pos + batch > order.len() {
            *order = (0..train.len()).collect();
            rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut order_rng);
            *pos = 0;
        }
        let idx = order[*pos..*pos + batch].to_vec();
        *pos += batch;
        let views: Vec<Image> = idx
            .iter()
            .map(|&i| match opt.source_augmentation {
                SourceAugmentation::Weak => weak_augment(&train.images[i], &mut aug_rng),
                SourceAugmentation::Strong => strong_augment(&train.images[i], &mut aug_rng, &opt.strong_aug),
            })
            .collect();
        let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
        let refs: Vec<&Image> = views.iter().collect();
        let lr = cosine_lr(opt.learning_rate, step, opt.steps);
        let loss = bundle.domain_loss(k, &images_to_tensor(&refs, DType::F32)?, &labels)?;
        let grads = loss.backward()?;
        sgd.step(&bundle.params(), &grads, lr)?;
        visits[k] += 1;
        let loss_v = to_scalar(&loss)?;
        let mut rec = StepRecord {
            step,
            lr,
            loss_pl: loss_v,
            loss_cls: 0.0,
            loss_prompt: 0.0,
            loss_div: 0.0,
            loss_total: loss_v,
            pseudo_label_acc: None,
            batch_acc: None,
            eval_acc: None,
        };
        if step + 1 == opt.steps || (opt.eval_every > 0 && (step + 1) % opt.eval_every == 0) {
            let acc = val_accuracy(&bundle)?;
            rec.eval_acc = Some(acc);
            if acc >= best_acc {
                best_acc = acc;
                best = bundle.deep_copy()?;
            }
            info!(step, loss = loss_v, val_acc = acc, "multi-source training");
        }
        history.push(rec);
    }
    if opt.steps == 0 {
        best_acc = val_accuracy(&best)?;
    }
    Ok(MultiSourceOutcome {
        bundle: best,
        visits,
        best_val_accuracy: best_acc,
        history,
    })
}

pub fn save_bundle(path: &Path, bundle: &MultiSourceBundle, seed: u64) -> Result<()> {
    let meta = CheckpointMeta {
        format_version: FORMAT_VERSION,
        kind: CheckpointKind::MultiSource,
        config: bundle.config().clone(),
        seed,
        domains: bundle.domains.clone(),
        shared_prompts: bundle.shared.first().map_or(0, |p| p.dims()[0]),
    };
    save_params(path, &bundle.params(), &meta)
}

pub fn load_bundle(path: &Path) -> Result<(MultiSourceBundle, CheckpointMeta)> {
    let ck = LoadedCheckpoint::read(path)?;
    if ck.meta.kind != CheckpointKind::MultiSource {
        return Err(Error::Checkpoint(format!(
            "{} does not hold a multi-source checkpoint",
            path.display()
        )));
    }
    let bundle = MultiSourceBundle::skeleton(&ck.meta.config, &ck.meta.domains, ck.dtype())?;
    ck.assign(&bundle.params())?;
    Ok((bundle, ck.meta))
}
