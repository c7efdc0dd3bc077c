use candle_core::{DType, Device, Tensor};
use prompt_tta::adaptation::*;
use prompt_tta::checkpoint::{load_model, save_model};
use prompt_tta::data::{make_synthetic_shift, BaseSet, Dataset, DomainShiftSpec, ShiftKind};
use prompt_tta::model::{PromptViT, PromptViTConfig};
use prompt_tta::nn::ParamRole;
use prompt_tta::Error;

fn cfg(classes: usize) -> PromptViTConfig {
    PromptViTConfig {
        num_layers: 2,
        num_stages: 2,
        prompts_per_stage: 2,
        embed_dim: 16,
        num_classes: classes,
        patch_size: 4,
        image_size: 8,
        num_heads: 2,
        mlp_ratio: 2.0,
    }
}

fn data(classes: usize, per_class: usize, severity: f64) -> (Dataset, Dataset) {
    make_synthetic_shift(&DomainShiftSpec {
        base: BaseSet::Shapes,
        shift: ShiftKind::ColorJitter,
        severity,
        classes,
        per_class_count: per_class,
        image_size: 8,
        seed: 1,
    })
    .unwrap()
}

fn quick(steps: usize) -> AdaptationConfig {
    AdaptationConfig {
        steps,
        batch_size: 8,
        projection_dim: 8,
        eval_every: 0,
        verify_frozen_every: 1,
        ..AdaptationConfig::default()
    }
}

fn values(model: &PromptViT) -> Vec<(String, Vec<f32>)> {
    model
        .params()
        .iter()
        .map(|p| (p.name().to_string(), p.value().flatten_all().unwrap().to_vec1::<f32>().unwrap()))
        .collect()
}

fn source_model() -> (PromptViT, Dataset) {
    let (src, tgt) = data(3, 8, 0.8);
    let out = train_source(&cfg(3), &src, &quick(4)).unwrap();
    (out.model, tgt)
}

#[test]
fn zero_source_steps_return_the_initialisation() {
    let (src, _) = data(3, 6, 0.0);
    let a = train_source(&cfg(3), &src, &quick(0)).unwrap();
    let b = train_source(&cfg(3), &src, &quick(0)).unwrap();
    assert_eq!(values(&a.model), values(&b.model));
    assert!(a.history.is_empty());
}

#[test]
fn source_training_is_bitwise_reproducible_through_a_checkpoint() {
    let (src, _) = data(3, 6, 0.0);
    let dir = tempfile::tempdir().unwrap();
    let mut saved = Vec::new();
    for i in 0..2 {
        let out = train_source(&cfg(3), &src, &quick(5)).unwrap();
        let path = dir.path().join(format!("{i}.safetensors"));
        save_model(&path, &out.model, 0).unwrap();
        saved.push(std::fs::read(&path).unwrap());
    }
    assert_eq!(saved[0], saved[1]);
    let (loaded, _) = load_model(&dir.path().join("0.safetensors")).unwrap();
    assert_eq!(loaded.config(), &cfg(3));
}

#[test]
fn out_of_range_labels_are_a_data_error() {
    let (mut src, _) = data(3, 4, 0.0);
    src.labels[2] = 7;
    assert!(matches!(train_source(&cfg(3), &src, &quick(1)), Err(Error::Data(_))));
}

#[test]
fn separable_two_class_task_is_learned() {
    // Class 0 is bright on the top half, class 1 on the bottom, under
    // uniform noise. The oracle is a nearest class-mean probe on raw pixels
    // over the same split; it must clear 95% for the bar to mean anything.
    use rand::Rng;
    let mut rng = prompt_tta::data::substream(5, 0);
    let mut src = Dataset { images: Vec::new(), labels: Vec::new(), num_classes: 2 };
    for i in 0..120 {
        let label = i % 2;
        let mut im = prompt_tta::data::Image::filled(8, [0.0; 3]);
        for c in 0..3 {
            for y in 0..8 {
                for x in 0..8 {
                    let lit = (y < 4) == (label == 0);
                    im.set(c, y, x, if lit { 0.7 } else { 0.3 } + rng.random_range(-0.25..0.25));
                }
            }
        }
        src.images.push(im);
        src.labels.push(label);
    }
    let (train_idx, val_idx) = prompt_tta::data::split_train_val(src.len(), 0.9, 0);
    let dim = src.images[0].data.len();
    let mut means = vec![vec![0.0f64; dim]; 2];
    let mut counts = [0usize; 2];
    for &i in &train_idx {
        counts[src.labels[i]] += 1;
        for (m, v) in means[src.labels[i]].iter_mut().zip(&src.images[i].data) {
            *m += *v as f64;
        }
    }
    for (m, n) in means.iter_mut().zip(counts) {
        m.iter_mut().for_each(|x| *x /= n as f64);
    }
    let dist = |c: usize, i: usize| -> f64 {
        means[c].iter().zip(&src.images[i].data).map(|(a, b)| (a - *b as f64).powi(2)).sum()
    };
    let probe = val_idx.iter().filter(|&&i| (dist(1, i) < dist(0, i)) as usize == src.labels[i]).count();
    assert!(probe as f64 / val_idx.len() as f64 >= 0.95, "probe {probe}/{}", val_idx.len());

    let opt = AdaptationConfig {
        learning_rate: 0.02,
        steps: 300,
        batch_size: 16,
        eval_every: 50,
        source_augmentation: SourceAugmentation::Weak,
        ..AdaptationConfig::default()
    };
    let out = train_source(&cfg(2), &src, &opt).unwrap();
    assert!(out.best_val_accuracy >= 95.0, "val accuracy {}", out.best_val_accuracy);
}

#[test]
fn offline_adaptation_freezes_the_backbone_and_is_reproducible() {
    let (model, tgt) = source_model();
    let a = adapt_offline(&model, &tgt, &quick(6)).unwrap();
    let b = adapt_offline(&model, &tgt, &quick(6)).unwrap();
    assert_eq!(a.history, b.history);
    for (s, o) in a.student.params().iter().zip(model.params()) {
        let same = s.value().flatten_all().unwrap().to_vec1::<f32>().unwrap()
            == o.value().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        if s.role() == ParamRole::Backbone {
            assert!(same, "{} changed", s.name());
        }
    }
    let names = a.trainable_names();
    assert!(names.iter().all(|n| n.starts_with("prompts.") || n.starts_with("head.") || n.starts_with("proj.")));
    assert!(names.iter().any(|n| n.starts_with("proj.")));
    assert_eq!(a.stats.optimizer_steps, 6);
    assert_eq!(a.stats.bank_updates, 6);
    let lrs = &a.stats.learning_rates;
    assert!(lrs.windows(2).all(|w| w[1] < w[0]), "cosine decay: {lrs:?}");
}

#[test]
fn zero_loss_weights_leave_the_student_unchanged() {
    let (model, tgt) = source_model();
    let mut opt = quick(3);
    opt.weight_decay = 0.0;
    opt.loss_weights = prompt_tta::ssl::LossWeights {
        alpha: 0.0,
        beta1: 0.0,
        beta2: 0.0,
        lambda: 0.0,
    };
    let out = adapt_offline(&model, &tgt, &opt).unwrap();
    assert_eq!(values(&out.student), values(&model));
    for ((_, t), (_, s)) in values(&out.teacher.model).iter().zip(values(&model)) {
        assert!(t.iter().zip(&s).all(|(a, b)| (a - b).abs() <= 1e-6 * b.abs().max(1.0)));
    }
}

#[test]
fn teacher_follows_the_ema_of_the_student_trajectory() {
    // Run 1 and 2 steps with the same seed; the first step is shared, so the
    // student after step 1 is known. With m = 0.5 the teacher after step 2 is
    // 0.25 * theta_0 + 0.25 * theta_1 + 0.5 * theta_2.
    let (model, tgt) = source_model();
    let mut opt = quick(2);
    opt.ema_momentum = 0.5;
    opt.schedule = Schedule::None;
    let one = {
        let mut o = opt.clone();
        o.steps = 1;
        // Same learning rate at step 0 for both runs.
        adapt_offline(&model, &tgt, &o).unwrap()
    };
    let two = adapt_offline(&model, &tgt, &opt).unwrap();
    for ((t, s1), (s0, s2)) in two
        .teacher
        .model
        .params()
        .iter()
        .zip(one.student.params())
        .zip(model.params().iter().zip(two.student.params()))
    {
        if s2.role() == ParamRole::Backbone {
            continue;
        }
        let f = |p: &prompt_tta::nn::Param| p.value().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let (t, a, b, c) = (f(t), f(s0), f(s1), f(s2));
        for i in 0..t.len() {
            let expect = 0.25 * a[i] as f64 + 0.25 * b[i] as f64 + 0.5 * c[i] as f64;
            assert!((t[i] as f64 - expect).abs() < 1e-5, "{}", s2.name());
        }
    }
}

#[test]
fn pseudo_label_only_configuration_runs_with_the_bank() {
    let (model, tgt) = source_model();
    let mut opt = quick(3);
    opt.loss_weights.beta1 = 0.0;
    opt.loss_weights.beta2 = 0.0;
    opt.loss_weights.lambda = 0.0;
    let out = adapt_offline(&model, &tgt, &opt).unwrap();
    assert!(out.history.iter().all(|r| r.loss_cls == 0.0 && r.loss_prompt == 0.0 && r.loss_div == 0.0));
    assert!(out.history.iter().all(|r| r.loss_total == r.loss_pl));
    assert!(out.bank.is_some());
}

#[test]
fn data_ratio_subsamples_deterministically() {
    let (model, tgt) = source_model();
    let mut opt = quick(2);
    opt.data_ratio = 0.1;
    let a = adapt_offline(&model, &tgt, &opt).unwrap();
    let b = adapt_offline(&model, &tgt, &opt).unwrap();
    assert_eq!(a.history, b.history);
    // ceil(0.1 * 24) = 3 samples; the bank is sized to the subsample.
    assert_eq!(a.bank.unwrap().capacity(), 3);
}

#[test]
fn empty_target_is_a_data_error() {
    let (model, tgt) = source_model();
    let empty = tgt.subset(&[]);
    assert!(matches!(adapt_offline(&model, &empty, &quick(1)), Err(Error::Data(_))));
}

#[test]
fn online_mode_contract() {
    let (model, tgt) = source_model();
    let mut opt = quick(999);
    opt.mode = Mode::Online;
    let out = adapt_online(&model, &tgt, &opt).unwrap();
    let batches = tgt.len().div_ceil(opt.batch_size);
    assert_eq!(out.stats.optimizer_steps, batches);
    assert_eq!(out.history.len(), batches);
    assert_eq!(out.stats.bank_updates, 0);
    assert!(out.bank.is_none());
    assert!(out.stats.learning_rates.iter().all(|&lr| lr == opt.learning_rate));
    let by_batch: usize = out
        .history
        .iter()
        .zip(stream_batches(tgt.len(), opt.batch_size, opt.seed))
        .map(|(r, b)| (r.batch_acc.unwrap() * b.len() as f64 / 100.0).round() as usize)
        .sum();
    assert!((out.stream_accuracy.unwrap() - 100.0 * by_batch as f64 / tgt.len() as f64).abs() < 1e-9);

    // Accuracy is taken before each update: a run that cannot move the
    // student scores exactly what the source model scores on the stream.
    opt.weight_decay = 0.0;
    opt.loss_weights = prompt_tta::ssl::LossWeights { alpha: 0.0, beta1: 0.0, beta2: 0.0, lambda: 0.0 };
    let still = adapt_online(&model, &tgt, &opt).unwrap();
    assert_eq!(still.stream_accuracy.unwrap(), stream_accuracy(&model, &tgt, &opt).unwrap());
    assert!(matches!(adapt_online(&model, &tgt, &quick(1)), Err(Error::Config(_))));
}

#[test]
fn evaluate_examples() {
    let perfect = accuracy_report(&[0, 1, 2, 1], &[0, 1, 2, 1], 3);
    assert_eq!(perfect.per_class, vec![Some(100.0); 3]);
    assert_eq!(perfect.average, 100.0);

    let labels: Vec<usize> = (0..120).map(|i| i % 12).collect();
    let constant = accuracy_report(&vec![0; 120], &labels, 12);
    assert!((constant.average - 100.0 / 12.0).abs() < 1e-12);

    // Class 0: 8/10 right, class 1: 2/5 right.
    let mut labels = vec![0; 10];
    labels.extend(vec![1; 5]);
    let mut preds = vec![0; 8];
    preds.extend(vec![1; 2]);
    preds.extend(vec![1; 2]);
    preds.extend(vec![0; 3]);
    let r = accuracy_report(&preds, &labels, 2);
    assert!((r.average - 60.0).abs() < 1e-12);

    let missing = accuracy_report(&[0, 0], &[0, 0], 2);
    assert_eq!(missing.per_class, vec![Some(100.0), None]);
    assert_eq!(missing.average, 100.0);
    assert!(missing.to_csv().starts_with("class,accuracy\n0,100.0000\n1,\n"));
}

#[test]
fn objective_pieces_are_wired_into_the_total() {
    let model = PromptViT::seeded(&cfg(3), DType::F64, 2).unwrap();
    let mut rng = prompt_tta::data::substream(0, 0);
    let mut f = prompt_tta::nn::ParamFactory::new(&mut rng, DType::F64);
    let heads = prompt_tta::ssl::ProjectionHeads::new(&mut f, prompt_tta::ssl::ProjectorKind::Mlp, 16, 8, 2).unwrap();
    let images = Tensor::rand(0f64, 1f64, (2, 3, 8, 8), &Device::Cpu).unwrap();
    let w = prompt_tta::ssl::LossWeights::default();
    let (c, total) = adaptation_objective(&model, &heads, &images, &[0, 2], None, &w, 0.1).unwrap();
    let v = |t: &Tensor| t.to_scalar::<f64>().unwrap();
    assert_eq!(v(&c.cls), 0.0);
    assert!(v(&c.diversity) > 0.0);
    let expect = w.alpha * v(&c.pseudo_label) - w.lambda * v(&c.diversity);
    assert!((v(&total) - expect).abs() < 1e-12);
}
