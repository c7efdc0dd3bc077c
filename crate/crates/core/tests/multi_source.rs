use candle_core::{DType, Device, Tensor};
use prompt_tta::adaptation::AdaptationConfig;
use prompt_tta::data::{generate_domain, BaseSet, Dataset, DomainShiftSpec, ShiftKind};
use prompt_tta::model::PromptViTConfig;
use prompt_tta::multi_source::*;
use prompt_tta::nn::ParamFactory;
use prompt_tta::Error;

fn cfg() -> PromptViTConfig {
    PromptViTConfig {
        num_layers: 2,
        num_stages: 2,
        prompts_per_stage: 4,
        embed_dim: 16,
        num_classes: 3,
        patch_size: 4,
        image_size: 8,
        num_heads: 2,
        mlp_ratio: 2.0,
    }
}

fn domain(shift: ShiftKind, severity: f64, stream: u64, classes: usize) -> Dataset {
    let spec = DomainShiftSpec {
        base: BaseSet::Shapes,
        shift,
        severity,
        classes,
        per_class_count: 6,
        image_size: 8,
        seed: 2,
    };
    generate_domain(&spec, stream, spec.severity).unwrap()
}

fn domains() -> Vec<(String, Dataset)> {
    vec![
        ("clean".into(), domain(ShiftKind::Rotation, 0.0, 40, 3)),
        ("color".into(), domain(ShiftKind::ColorJitter, 0.8, 41, 3)),
        ("blur".into(), domain(ShiftKind::BlurNoise, 0.8, 42, 3)),
    ]
}

fn quick(steps: usize) -> AdaptationConfig {
    AdaptationConfig {
        steps,
        batch_size: 4,
        eval_every: 0,
        ..AdaptationConfig::default()
    }
}

fn flat(p: &prompt_tta::nn::Param) -> Vec<f32> {
    p.value().flatten_all().unwrap().to_vec1::<f32>().unwrap()
}

#[test]
fn round_robin_visits_are_balanced() {
    for steps in [0, 1, 5, 7] {
        let out = train_multi_source(&cfg(), &domains(), &quick(steps)).unwrap();
        assert_eq!(out.visits.iter().sum::<usize>(), steps);
        let (lo, hi) = (out.visits.iter().min().unwrap(), out.visits.iter().max().unwrap());
        assert!(hi - lo <= 1, "{:?}", out.visits);
    }
}

#[test]
fn only_the_active_domain_prompts_move() {
    // One step visits domain 0 only.
    let init = train_multi_source(&cfg(), &domains(), &quick(0)).unwrap().bundle;
    let one = train_multi_source(&cfg(), &domains(), &quick(1)).unwrap().bundle;
    for k in 1..3 {
        for (a, b) in init.domain_prompts(k).iter().zip(one.domain_prompts(k)) {
            assert_eq!(flat(a), flat(b), "{}", a.name());
        }
    }
    let moved = init
        .domain_prompts(0)
        .iter()
        .zip(one.domain_prompts(0))
        .any(|(a, b)| flat(a) != flat(b));
    assert!(moved);
}

#[test]
fn domain_loss_has_no_cross_domain_gradient() {
    let names: Vec<String> = ["a", "b", "c"].map(String::from).to_vec();
    let mut rng = prompt_tta::data::substream(3, 0);
    let mut f = ParamFactory::new(&mut rng, DType::F32);
    let bundle = MultiSourceBundle::new(&cfg(), &names, &mut f).unwrap();
    let images = Tensor::rand(0f32, 1f32, (2, 3, 8, 8), &Device::Cpu).unwrap();
    for k in 0..3 {
        let grads = bundle.domain_loss(k, &images, &[0, 2]).unwrap().backward().unwrap();
        for other in (0..3).filter(|&o| o != k) {
            for p in bundle.domain_prompts(other) {
                let g = grads.get(p.var().as_tensor());
                let zero = g.is_none_or(|g| g.abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap() == 0.0);
                assert!(zero, "{} got a gradient from domain {k}", p.name());
            }
        }
        for p in bundle.domain_prompts(k).iter().chain(bundle.shared_prompts()) {
            assert!(grads.get(p.var().as_tensor()).is_some(), "{}", p.name());
        }
    }
}

#[test]
fn target_init_is_invariant_to_domain_order() {
    let names: Vec<String> = ["a", "b", "c"].map(String::from).to_vec();
    let mut rng = prompt_tta::data::substream(4, 0);
    let mut f = ParamFactory::new(&mut rng, DType::F32);
    let bundle = MultiSourceBundle::new(&cfg(), &names, &mut f).unwrap();
    let permuted = bundle.deep_copy().unwrap();
    for (k, src) in [2, 0, 1].into_iter().enumerate() {
        for (dst, s) in permuted.domain_prompts(k).iter().zip(bundle.domain_prompts(src)) {
            dst.set(&s.value()).unwrap();
        }
    }
    let a = init_target_prompts(&bundle).unwrap();
    let b = init_target_prompts(&permuted).unwrap();
    let (p_d, _) = split_prompts(cfg().prompts_per_stage).unwrap();
    for (j, (x, y)) in a.prompts().iter().zip(b.prompts()).enumerate() {
        assert_eq!(x.dims(), &[cfg().prompts_per_stage, 16]);
        for (u, v) in flat(x).iter().zip(flat(y)) {
            assert!((u - v).abs() < 1e-6);
        }
        // Domain half is the plain mean, computed here in f64.
        let mean: Vec<f64> = (0..p_d * 16)
            .map(|i| (0..3).map(|k| flat(&bundle.domain_prompts(k)[j])[i] as f64).sum::<f64>() / 3.0)
            .collect();
        for (u, m) in flat(x)[..p_d * 16].iter().zip(&mean) {
            assert!((*u as f64 - m).abs() < 1e-6);
        }
        assert_eq!(&flat(x)[p_d * 16..], flat(&bundle.shared_prompts()[j]).as_slice());
    }
    assert!(a.params().iter().all(|p| p.is_trainable()));
}

#[test]
fn label_space_mismatch_is_a_data_error() {
    let mut ds = domains();
    ds[1].1 = domain(ShiftKind::ColorJitter, 0.8, 41, 4);
    assert!(matches!(train_multi_source(&cfg(), &ds, &quick(1)), Err(Error::Data(_))));
    assert!(matches!(train_multi_source(&cfg(), &[], &quick(1)), Err(Error::Data(_))));
}

#[test]
fn a_single_prompt_cannot_be_split() {
    let mut c = cfg();
    c.prompts_per_stage = 1;
    assert!(matches!(train_multi_source(&c, &domains(), &quick(1)), Err(Error::Config(_))));
}
