//! Prompt-augmented vision transformer.
//!
//! The transformer layers are split into `num_stages` stages of equal length.
//! A fresh block of learnable prompts replaces the prompt slots of the token
//! sequence at the first layer of every stage; the prompt-slot outputs at the
//! last layer of every stage (the aggregated prompts) are returned alongside
//! the logits so the self-supervised objective can use them.

use std::collections::BTreeSet;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Init, LayerNorm, Linear, Mlp, Param, ParamFactory, ParamRole};

/// Shape of a prompt-augmented ViT.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptViTConfig {
    pub num_layers: usize,
    pub num_stages: usize,
    pub prompts_per_stage: usize,
    pub embed_dim: usize,
    pub num_classes: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub num_heads: usize,
    pub mlp_ratio: f64,
}

impl PromptViTConfig {
    /// ViT-B/16 shaped config, used for parameter accounting.
    pub fn vit_base(num_stages: usize, prompts_per_stage: usize, num_classes: usize) -> Self {
        Self {
            num_layers: 12,
            num_stages,
            prompts_per_stage,
            embed_dim: 768,
            num_classes,
            patch_size: 16,
            image_size: 224,
            num_heads: 12,
            mlp_ratio: 4.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_layers == 0 || self.num_stages == 0 {
            return fail("num_layers and num_stages must be positive".into());
        }
        if !self.num_layers.is_multiple_of(self.num_stages) {
            return fail(format!(
                "num_layers ({}) is not divisible by num_stages ({})",
                self.num_layers, self.num_stages
            ));
        }
        if self.prompts_per_stage == 0 {
            return fail("prompts_per_stage must be at least 1".into());
        }
        if self.num_heads == 0 || self.embed_dim < self.num_heads {
            return fail(format!(
                "embed_dim ({}) must be >= num_heads ({}) > 0",
                self.embed_dim, self.num_heads
            ));
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return fail(format!(
                "embed_dim ({}) must be a multiple of num_heads ({})",
                self.embed_dim, self.num_heads
            ));
        }
        if self.num_classes < 2 {
            return fail(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return fail(format!(
                "image_size ({}) must be a positive multiple of patch_size ({})",
                self.image_size, self.patch_size
            ));
        }
        if !(self.mlp_ratio > 0.0) {
            return fail(format!("mlp_ratio must be positive, got {}", self.mlp_ratio));
        }
        Ok(())
    }

    pub fn stage_length(&self) -> usize {
        self.num_layers / self.num_stages
    }

    pub fn num_patches(&self) -> usize {
        let g = self.image_size / self.patch_size;
        g * g
    }

    /// Tokens per layer: CLS, prompts, patches.
    pub fn sequence_length(&self) -> usize {
        1 + self.prompts_per_stage + self.num_patches()
    }

    pub fn mlp_hidden(&self) -> usize {
        ((self.embed_dim as f64) * self.mlp_ratio).round() as usize
    }

    pub fn layout(&self) -> Result<StageLayout> {
        stage_layout(self.num_layers, self.num_stages)
    }
}

/// Named depth variants: one stage, four stages, or one stage per layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    S,
    G,
    D,
}

impl Variant {
    pub fn num_stages(self, num_layers: usize) -> usize {
        match self {
            Variant::S => 1,
            Variant::G => 4,
            Variant::D => num_layers,
        }
    }
}

/// 1-indexed layers where fresh prompts enter and where aggregated prompts are read out.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageLayout {
    pub insertion_layers: Vec<usize>,
    pub extraction_layers: Vec<usize>,
}

pub fn stage_layout(num_layers: usize, num_stages: usize) -> Result<StageLayout> {
    if num_stages == 0 || num_layers == 0 || !num_layers.is_multiple_of(num_stages) {
        return Err(Error::Config(format!(
            "cannot split {num_layers} layers into {num_stages} equal stages"
        )));
    }
    let m = num_layers / num_stages;
    Ok(StageLayout {
        insertion_layers: (0..num_stages).map(|s| s * m + 1).collect(),
        extraction_layers: (1..=num_stages).map(|s| s * m).collect(),
    })
}

/// Training phase, for parameter accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Source,
    Adaptation,
}

#[derive(Debug)]
struct Attention {
    qkv: Linear,
    proj: Linear,
    num_heads: usize,
}

impl Attention {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, d) = x.dims3()?;
        let hd = d / self.num_heads;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((b, t, 3, self.num_heads, hd))?
            .permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let att = (q.matmul(&k.t()?.contiguous()?)? * (hd as f64).powf(-0.5))?;
        let att = crate::nn::softmax_last(&att)?;
        let y = att.matmul(&v)?.transpose(1, 2)?.reshape((b, t, d))?;
        self.proj.forward(&y)
    }
}

/// Pre-norm transformer layer.
#[derive(Debug)]
struct Block {
    norm1: LayerNorm,
    attn: Attention,
    norm2: LayerNorm,
    mlp: Mlp,
}

impl Block {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = (x + self.attn.forward(&self.norm1.forward(x)?)?)?;
        let y = self.mlp.forward(&self.norm2.forward(&x)?)?;
        Ok((x + y)?)
    }

    fn params(&self) -> Vec<&Param> {
        let mut v = self.norm1.params();
        v.extend(self.attn.qkv.params());
        v.extend(self.attn.proj.params());
        v.extend(self.norm2.params());
        v.extend(self.mlp.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.norm1.params_mut();
        v.extend(self.attn.qkv.params_mut());
        v.extend(self.attn.proj.params_mut());
        v.extend(self.norm2.params_mut());
        v.extend(self.mlp.params_mut());
        v
    }
}

/// Outputs of one batched forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[B, C]`
    pub logits: Tensor,
    /// Final-norm CLS feature fed to the head, `[B, d]`.
    pub cls_feature: Tensor,
    /// One `[B, p, d]` tensor per stage, read at the stage's last layer.
    pub aggregated_prompts: Vec<Tensor>,
    /// Token count seen by each layer, in layer order.
    pub sequence_lengths: Vec<usize>,
}

/// Everything except the prompts: patch embedding, CLS token, positional
/// embedding, transformer layers, final norm and classification head.
#[derive(Debug)]
pub struct Backbone {
    config: PromptViTConfig,
    patch_embed: Linear,
    cls_token: Param,
    pos_embed: Param,
    blocks: Vec<Block>,
    norm: LayerNorm,
    head: Linear,
    insertion: BTreeSet<usize>,
    extraction: BTreeSet<usize>,
}

impl Backbone {
    pub fn new<R: Rng>(config: &PromptViTConfig, f: &mut ParamFactory<'_, R>) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let patch_dim = 3 * config.patch_size * config.patch_size;
        let bb = ParamRole::Backbone;
        let patch_embed = Linear::new(f, "patch_embed", bb, patch_dim, d)?;
        let cls_token = f.param("cls_token", bb, &[d], Init::Normal(0.02))?;
        let pos_embed = f.param(
            "pos_embed",
            bb,
            &[1 + config.num_patches(), d],
            Init::Normal(0.02),
        )?;
        let hidden = config.mlp_hidden();
        let mut blocks = Vec::with_capacity(config.num_layers);
        for i in 0..config.num_layers {
            let name = format!("blocks.{i}");
            blocks.push(Block {
                norm1: LayerNorm::new(f, &format!("{name}.norm1"), bb, d)?,
                attn: Attention {
                    qkv: Linear::new(f, &format!("{name}.attn.qkv"), bb, d, 3 * d)?,
                    proj: Linear::new(f, &format!("{name}.attn.proj"), bb, d, d)?,
                    num_heads: config.num_heads,
                },
                norm2: LayerNorm::new(f, &format!("{name}.norm2"), bb, d)?,
                mlp: Mlp::new(f, &format!("{name}.mlp"), bb, d, hidden, d)?,
            });
        }
        let norm = LayerNorm::new(f, "norm", bb, d)?;
        let head = Linear::new(f, "head", ParamRole::Head, d, config.num_classes)?;
        let layout = config.layout()?;
        Ok(Self {
            config: config.clone(),
            patch_embed,
            cls_token,
            pos_embed,
            blocks,
            norm,
            head,
            insertion: layout.insertion_layers.into_iter().collect(),
            extraction: layout.extraction_layers.into_iter().collect(),
        })
    }

    pub fn config(&self) -> &PromptViTConfig {
        &self.config
    }

    pub fn dtype(&self) -> DType {
        self.cls_token.var().dtype()
    }

    pub fn device(&self) -> Device {
        self.cls_token.var().device().clone()
    }

    pub fn head(&self) -> &Linear {
        &self.head
    }

    /// Flattens non-overlapping patches: `[B, 3, H, W] -> [B, P, 3*ps*ps]`.
    fn patchify(&self, images: &Tensor) -> Result<Tensor> {
        let c = &self.config;
        let dims = images.dims();
        if dims.len() != 4 || dims[1] != 3 || dims[2] != c.image_size || dims[3] != c.image_size {
            return Err(Error::Input(format!(
                "expected images of shape [B, 3, {s}, {s}], got {dims:?}",
                s = c.image_size
            )));
        }
        let b = dims[0];
        let ps = c.patch_size;
        let g = c.image_size / ps;
        Ok(images
            .reshape((b, 3, g, ps, g, ps))?
            .permute((0, 2, 4, 1, 3, 5))?
            .contiguous()?
            .reshape((b, g * g, 3 * ps * ps))?)
    }

    /// Runs the network with the given prompt blocks, one `[p, d]` tensor per stage.
    pub fn forward_with_prompts(&self, images: &Tensor, prompts: &[Tensor]) -> Result<ForwardOutput> {
        let c = &self.config;
        let d = c.embed_dim;
        if prompts.len() != c.num_stages {
            return Err(Error::Input(format!(
                "expected {} prompt blocks, got {}",
                c.num_stages,
                prompts.len()
            )));
        }
        let p = c.prompts_per_stage;
        for blk in prompts {
            if blk.dims() != [p, d] {
                return Err(Error::Input(format!(
                    "prompt block has shape {:?}, expected [{p}, {d}]",
                    blk.dims()
                )));
            }
        }
        let patches = self.patchify(&images.to_dtype(self.dtype())?)?;
        let b = patches.dim(0)?;
        let np = c.num_patches();
        let pos = self.pos_embed.tensor();
        let patch_tokens = self
            .patch_embed
            .forward(&patches)?
            .broadcast_add(&pos.narrow(0, 1, np)?)?;
        let cls = (self.cls_token.tensor() + pos.get(0)?)?
            .reshape((1, 1, d))?
            .broadcast_as((b, 1, d))?;

        let mut x: Option<Tensor> = None;
        let mut stage = 0;
        let mut aggregated = Vec::with_capacity(c.num_stages);
        let mut sequence_lengths = Vec::with_capacity(c.num_layers);
        for (i, block) in self.blocks.iter().enumerate() {
            let layer = i + 1;
            if self.insertion.contains(&layer) {
                let fresh = prompts[stage].unsqueeze(0)?.broadcast_as((b, p, d))?;
                x = Some(match x {
                    None => Tensor::cat(&[&cls, &fresh, &patch_tokens], 1)?,
                    Some(prev) => {
                        let head = prev.narrow(1, 0, 1)?;
                        let tail = prev.narrow(1, 1 + p, np)?;
                        Tensor::cat(&[&head, &fresh, &tail], 1)?
                    }
                });
                stage += 1;
            }
            let cur = x.take().expect("first layer is always an insertion layer");
            sequence_lengths.push(cur.dim(1)?);
            let out = block.forward(&cur)?;
            if self.extraction.contains(&layer) {
                aggregated.push(out.narrow(1, 1, p)?);
            }
            x = Some(out);
        }
        let x = x.expect("at least one layer");
        let cls_feature = self.norm.forward(&x.narrow(1, 0, 1)?.squeeze(1)?)?;
        let logits = self.head.forward(&cls_feature)?;
        Ok(ForwardOutput {
            logits,
            cls_feature,
            aggregated_prompts: aggregated,
            sequence_lengths,
        })
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = self.patch_embed.params();
        v.push(&self.cls_token);
        v.push(&self.pos_embed);
        for b in &self.blocks {
            v.extend(b.params());
        }
        v.extend(self.norm.params());
        v.extend(self.head.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.patch_embed.params_mut();
        v.push(&mut self.cls_token);
        v.push(&mut self.pos_embed);
        for b in &mut self.blocks {
            v.extend(b.params_mut());
        }
        v.extend(self.norm.params_mut());
        v.extend(self.head.params_mut());
        v
    }

    pub fn deep_copy(&self) -> Result<Self> {
        let mut copy = Self::skeleton(&self.config, self.dtype())?;
        for (dst, src) in copy.params_mut().into_iter().zip(self.params()) {
            dst.set(&src.value())?;
            dst.set_trainable(src.is_trainable());
        }
        Ok(copy)
    }

    /// Zero-filled backbone with the right names and shapes.
    pub fn skeleton(config: &PromptViTConfig, dtype: DType) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut f = ParamFactory::zeroed(&mut rng, dtype);
        Self::new(config, &mut f)
    }
}

/// Backbone plus one learnable prompt block per stage.
#[derive(Debug)]
pub struct PromptViT {
    backbone: Backbone,
    prompts: Vec<Param>,
}

impl PromptViT {
    /// Randomly initialised model. Prompts are uniform on `[-1/sqrt(d), 1/sqrt(d)]`.
    pub fn new<R: Rng>(config: &PromptViTConfig, f: &mut ParamFactory<'_, R>) -> Result<Self> {
        let backbone = Backbone::new(config, f)?;
        let bound = 1.0 / (config.embed_dim as f64).sqrt();
        let prompts = (0..config.num_stages)
            .map(|j| {
                f.param(
                    format!("prompts.{j}"),
                    ParamRole::Prompt,
                    &[config.prompts_per_stage, config.embed_dim],
                    Init::Uniform(bound),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { backbone, prompts })
    }

    pub fn seeded(config: &PromptViTConfig, dtype: DType, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut f = ParamFactory::new(&mut rng, dtype);
        Self::new(config, &mut f)
    }

    /// Zero-filled model with the right names and shapes, e.g. as a load target.
    pub fn skeleton(config: &PromptViTConfig, dtype: DType) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut f = ParamFactory::zeroed(&mut rng, dtype);
        Self::new(config, &mut f)
    }

    pub fn from_parts(backbone: Backbone, prompts: Vec<Param>) -> Result<Self> {
        let c = backbone.config();
        if prompts.len() != c.num_stages
            || prompts
                .iter()
                .any(|p| p.dims() != [c.prompts_per_stage, c.embed_dim])
        {
            return Err(Error::State(
                "prompt blocks do not match the backbone configuration".into(),
            ));
        }
        Ok(Self { backbone, prompts })
    }

    pub fn config(&self) -> &PromptViTConfig {
        self.backbone.config()
    }

    pub fn dtype(&self) -> DType {
        self.backbone.dtype()
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn prompts(&self) -> &[Param] {
        &self.prompts
    }

    pub fn forward(&self, images: &Tensor) -> Result<ForwardOutput> {
        let blocks: Vec<Tensor> = self.prompts.iter().map(Param::tensor).collect();
        self.backbone.forward_with_prompts(images, &blocks)
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = self.backbone.params();
        v.extend(self.prompts.iter());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.backbone.params_mut();
        v.extend(self.prompts.iter_mut());
        v
    }

    pub fn trainable_params(&self) -> Vec<&Param> {
        self.params().into_iter().filter(|p| p.is_trainable()).collect()
    }

    /// Marks only prompts and the classification head as trainable.
    pub fn freeze_for_adaptation(&mut self) {
        for p in self.params_mut() {
            let keep = matches!(p.role(), ParamRole::Prompt | ParamRole::Head);
            p.set_trainable(keep);
        }
    }

    /// Marks every parameter as non-trainable (used for EMA teachers).
    pub fn freeze_all(&mut self) {
        for p in self.params_mut() {
            p.set_trainable(false);
        }
    }

    pub fn unfreeze_all(&mut self) {
        for p in self.params_mut() {
            p.set_trainable(true);
        }
    }

    pub fn deep_copy(&self) -> Result<Self> {
        let backbone = self.backbone.deep_copy()?;
        let prompts = self
            .prompts
            .iter()
            .map(Param::deep_copy)
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { backbone, prompts })
    }
}

/// Number of parameters tuned in the given phase: everything at source
/// time; prompts and classification head (weights and bias) during adaptation.
pub fn count_tunable_params(model: &PromptViT, phase: Phase) -> usize {
    model
        .params()
        .into_iter()
        .filter(|p| match phase {
            Phase::Source => true,
            Phase::Adaptation => matches!(p.role(), ParamRole::Prompt | ParamRole::Head),
        })
        .map(Param::elem_count)
        .sum()
}

pub fn trainable_param_count(params: &[&Param]) -> usize {
    params
        .iter()
        .filter(|p| p.is_trainable())
        .map(|p| p.elem_count())
        .sum()
}
