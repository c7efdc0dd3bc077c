//! Hierarchical self-supervised regularisation.
//!
//! A DINO-style loss aligns the sharpened student CLS projection with the
//! centered, sharpened teacher projection; per-stage aggregated prompts are
//! aligned with the teacher's by cosine distance; and the prompts within a
//! stage are pushed apart by a diversity term that enters the total loss
//! with a negative sign.

use candle_core::{DType, Device, Tensor, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{log_softmax_last, softmax_last, Linear, Mlp, Param, ParamFactory, ParamRole};

const COS_EPS: f64 = 1e-12;

/// Weights of the combined adaptation objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta1: 0.1,
            beta2: 0.1,
            lambda: 0.005,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("lambda", self.lambda),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!(
                    "loss weight {name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// Only the self-supervised weights are zero.
    pub fn pseudo_label_only(&self) -> bool {
        self.beta1 == 0.0 && self.beta2 == 0.0 && self.lambda == 0.0
    }
}

/// Projection head architecture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ProjectorKind {
    Linear,
    /// `d -> 2d -> K` with a GELU.
    #[default]
    Mlp,
}

#[derive(Debug)]
pub enum Projector {
    Linear(Linear),
    Mlp(Mlp),
}

impl Projector {
    fn new<R: Rng>(
        f: &mut ParamFactory<'_, R>,
        name: &str,
        kind: ProjectorKind,
        in_dim: usize,
        out_dim: usize,
    ) -> Result<Self> {
        let role = ParamRole::Projection;
        Ok(match kind {
            ProjectorKind::Linear => Projector::Linear(Linear::new(f, name, role, in_dim, out_dim)?),
            ProjectorKind::Mlp => {
                Projector::Mlp(Mlp::new(f, name, role, in_dim, 2 * in_dim, out_dim)?)
            }
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Projector::Linear(l) => l.forward(x),
            Projector::Mlp(m) => m.forward(x),
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        match self {
            Projector::Linear(l) => l.params(),
            Projector::Mlp(m) => m.params(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Projector::Linear(l) => l.params_mut(),
            Projector::Mlp(m) => m.params_mut(),
        }
    }
}

/// One head for the CLS token and one per stage for its aggregated prompts.
#[derive(Debug)]
pub struct ProjectionHeads {
    pub cls_head: Projector,
    pub stage_heads: Vec<Projector>,
    kind: ProjectorKind,
    embed_dim: usize,
    out_dim: usize,
}

/// Projected CLS token and aggregated prompts.
#[derive(Debug, Clone)]
pub struct Projections {
    /// `[B, K]`
    pub cls: Tensor,
    /// One `[B, p, K]` tensor per stage.
    pub prompts: Vec<Tensor>,
}

impl ProjectionHeads {
    pub fn new<R: Rng>(
        f: &mut ParamFactory<'_, R>,
        kind: ProjectorKind,
        embed_dim: usize,
        out_dim: usize,
        num_stages: usize,
    ) -> Result<Self> {
        let cls_head = Projector::new(f, "proj.cls", kind, embed_dim, out_dim)?;
        let stage_heads = (0..num_stages)
            .map(|i| Projector::new(f, &format!("proj.stage.{i}"), kind, embed_dim, out_dim))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cls_head,
            stage_heads,
            kind,
            embed_dim,
            out_dim,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn project(&self, cls_feature: &Tensor, aggregated_prompts: &[Tensor]) -> Result<Projections> {
        if aggregated_prompts.len() != self.stage_heads.len() {
            return Err(Error::Input(format!(
                "{} aggregated prompt blocks for {} stage heads",
                aggregated_prompts.len(),
                self.stage_heads.len()
            )));
        }
        let cls = self.cls_head.forward(cls_feature)?;
        let prompts = self
            .stage_heads
            .iter()
            .zip(aggregated_prompts)
            .map(|(h, z)| h.forward(z))
            .collect::<Result<Vec<_>>>()?;
        Ok(Projections { cls, prompts })
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = self.cls_head.params();
        for h in &self.stage_heads {
            v.extend(h.params());
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.cls_head.params_mut();
        for h in &mut self.stage_heads {
            v.extend(h.params_mut());
        }
        v
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        for p in self.params_mut() {
            p.set_trainable(trainable);
        }
    }

    pub fn deep_copy(&self) -> Result<Self> {
        let dtype = self
            .params()
            .first()
            .map(|p| p.var().dtype())
            .unwrap_or(DType::F32);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut f = ParamFactory::zeroed(&mut rng, dtype);
        let mut copy = Self::new(
            &mut f,
            self.kind,
            self.embed_dim,
            self.out_dim,
            self.stage_heads.len(),
        )?;
        for (dst, src) in copy.params_mut().into_iter().zip(self.params()) {
            dst.set(&src.value())?;
            dst.set_trainable(src.is_trainable());
        }
        Ok(copy)
    }
}

/// Centering state and temperatures for the CLS-token loss.
#[derive(Debug, Clone)]
pub struct DinoCenterState {
    /// `[K]`
    pub center: Tensor,
    pub center_momentum: f64,
    pub student_temp: f64,
    pub teacher_temp: f64,
}

impl DinoCenterState {
    pub fn new(
        dim: usize,
        dtype: DType,
        center_momentum: f64,
        student_temp: f64,
        teacher_temp: f64,
    ) -> Result<Self> {
        if !(student_temp > 0.0 && teacher_temp > 0.0) {
            return Err(Error::Config(format!(
                "temperatures must be positive, got student {student_temp}, teacher {teacher_temp}"
            )));
        }
        Ok(Self {
            center: Tensor::zeros(dim, dtype, &Device::Cpu)?,
            center_momentum,
            student_temp,
            teacher_temp,
        })
    }
}

/// `softmax(x / tau)` over the last dimension.
pub fn sharpen_student(cls_proj: &Tensor, tau: f64) -> Result<Tensor> {
    softmax_last(&(cls_proj / tau)?)
}

pub fn sharpen_student_log(cls_proj: &Tensor, tau: f64) -> Result<Tensor> {
    log_softmax_last(&(cls_proj / tau)?)
}

/// `softmax((x - center) / tau')`, detached from the graph.
pub fn sharpen_center_teacher(cls_proj_teacher: &Tensor, state: &DinoCenterState) -> Result<Tensor> {
    let centered = cls_proj_teacher
        .detach()
        .broadcast_sub(&state.center.to_dtype(cls_proj_teacher.dtype())?)?;
    Ok(softmax_last(&(centered / state.teacher_temp)?)?.detach())
}

/// EMA of the batch-mean teacher projection.
pub fn update_center(state: &mut DinoCenterState, teacher_batch_projs: &Tensor) -> Result<()> {
    let (b, _) = teacher_batch_projs.dims2()?;
    if b == 0 {
        return Err(Error::State("empty batch for center update".into()));
    }
    let mean = teacher_batch_projs
        .detach()
        .mean(0)?
        .to_dtype(state.center.dtype())?;
    let m = state.center_momentum;
    state.center = (state.center.affine(m, 0.0)? + mean.affine(1.0 - m, 0.0)?)?;
    Ok(())
}

/// Batch-mean cross-entropy `-sum_k P'_k log P_k`; the teacher side is constant.
pub fn dino_cls_loss(p_teacher: &Tensor, p_student: &Tensor) -> Result<Tensor> {
    dino_cls_loss_log(p_teacher, &p_student.log()?)
}

/// Same as [`dino_cls_loss`] but takes student log-probabilities.
pub fn dino_cls_loss_log(p_teacher: &Tensor, log_p_student: &Tensor) -> Result<Tensor> {
    let per_sample = (p_teacher.detach() * log_p_student)?.sum(D::Minus1)?.neg()?;
    Ok(per_sample.mean_all()?)
}

/// Cosine similarity along the last dimension with an additive guard.
fn cosine_last(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let dot = (a * b)?.sum(D::Minus1)?;
    let na = a.sqr()?.sum(D::Minus1)?.sqrt()?;
    let nb = b.sqr()?.sum(D::Minus1)?.sqrt()?;
    Ok((dot / ((na * nb)? + COS_EPS)?)?)
}

/// `(1/M) sum_stages sum_rows (2 - 2 cos(student, teacher))`, mean over the batch.
/// Inputs are `[B, p, K]` per stage; the teacher side is constant.
pub fn prompt_alignment_loss(student: &[Tensor], teacher: &[Tensor]) -> Result<Tensor> {
    if student.len() != teacher.len() || student.is_empty() {
        return Err(Error::Input(format!(
            "{} student stages vs {} teacher stages",
            student.len(),
            teacher.len()
        )));
    }
    let m = student.len() as f64;
    let mut total: Option<Tensor> = None;
    for (s, t) in student.iter().zip(teacher) {
        if s.dims() != t.dims() {
            return Err(Error::Input(format!(
                "student projection {:?} vs teacher {:?}",
                s.dims(),
                t.dims()
            )));
        }
        let cos = cosine_last(s, &t.detach())?;
        let term = cos.affine(-2.0, 2.0)?.sum(D::Minus1)?;
        total = Some(match total {
            None => term,
            Some(acc) => (acc + term)?,
        });
    }
    let per_sample = (total.expect("non-empty") / m)?;
    Ok(per_sample.mean_all()?)
}

/// `(1/M) sum_stages sum_{j<k} (1 - cos(row j, row k))`, mean over the batch.
pub fn prompt_diversity_loss(student: &[Tensor]) -> Result<Tensor> {
    if student.is_empty() {
        return Err(Error::Input("no stages for the diversity loss".into()));
    }
    let m = student.len() as f64;
    let mut total: Option<Tensor> = None;
    for s in student {
        let (_, p, _) = s.dims3()?;
        let norms = s.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
        let gram = s.matmul(&s.t()?.contiguous()?)?;
        let outer = norms.matmul(&norms.t()?.contiguous()?)?;
        let cos = (gram / (outer + COS_EPS)?)?;
        let mut mask = vec![0.0f64; p * p];
        for j in 0..p {
            for k in (j + 1)..p {
                mask[j * p + k] = 1.0;
            }
        }
        let mask = Tensor::from_vec(mask, (p, p), s.device())?.to_dtype(s.dtype())?;
        let term = cos
            .affine(-1.0, 1.0)?
            .broadcast_mul(&mask)?
            .sum(D::Minus1)?
            .sum(D::Minus1)?;
        total = Some(match total {
            None => term,
            Some(acc) => (acc + term)?,
        });
    }
    let per_sample = (total.expect("non-empty") / m)?;
    Ok(per_sample.mean_all()?)
}

/// Component losses of the adaptation objective.
#[derive(Debug, Clone)]
pub struct LossComponents {
    pub pseudo_label: Tensor,
    pub cls: Tensor,
    pub prompt: Tensor,
    pub diversity: Tensor,
}

/// `alpha*pl + beta1*cls + beta2*prompt - lambda*div`.
pub fn total_loss(c: &LossComponents, w: &LossWeights) -> Result<Tensor> {
    let t = ((c.pseudo_label.affine(w.alpha, 0.0)? + c.cls.affine(w.beta1, 0.0)?)?
        + c.prompt.affine(w.beta2, 0.0)?)?;
    Ok((t - c.diversity.affine(w.lambda, 0.0)?)?)
}

pub fn total_loss_value(pl: f64, cls: f64, prompt: f64, div: f64, w: &LossWeights) -> f64 {
    w.alpha * pl + w.beta1 * cls + w.beta2 * prompt - w.lambda * div
}

/// Teacher temperature: linear warm-up from `start` to `end` over
/// `warmup_frac` of the run, then constant.
pub fn teacher_temperature(step: usize, total_steps: usize, start: f64, end: f64, warmup_frac: f64) -> f64 {
    let warm = (total_steps as f64 * warmup_frac).round() as usize;
    if warm == 0 || step >= warm {
        end
    } else {
        start + (end - start) * step as f64 / warm as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{to_rows, to_scalar};

    fn t2(v: &[&[f64]]) -> Tensor {
        let rows: Vec<Vec<f64>> = v.iter().map(|r| r.to_vec()).collect();
        let c = rows[0].len();
        let flat: Vec<f64> = rows.concat();
        Tensor::from_vec(flat, (rows.len(), c), &Device::Cpu).unwrap()
    }

    fn stage(rows: &[&[f64]]) -> Tensor {
        t2(rows).unsqueeze(0).unwrap()
    }

    #[test]
    fn linear_identity_head_and_zero_input() -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut f = ParamFactory::new(&mut rng, DType::F64);
        let heads = ProjectionHeads::new(&mut f, ProjectorKind::Linear, 3, 3, 1)?;
        let Projector::Linear(l) = &heads.cls_head else { unreachable!() };
        l.weight.set(&Tensor::eye(3, DType::F64, &Device::Cpu)?)?;
        let x = t2(&[&[1.0, -2.0, 0.5]]);
        let out = heads.project(&x, &[x.unsqueeze(0)?])?;
        assert_eq!(to_rows(&out.cls)?, vec![vec![1.0, -2.0, 0.5]]);

        let Projector::Linear(l) = &heads.stage_heads[0] else { unreachable!() };
        l.bias.set(&Tensor::new(&[0.1f64, 0.2, 0.3], &Device::Cpu)?)?;
        let z = Tensor::zeros((1, 2, 3), DType::F64, &Device::Cpu)?;
        let out = heads.project(&x, &[z])?;
        assert_eq!(
            out.prompts[0].squeeze(0)?.to_vec2::<f64>()?,
            vec![vec![0.1, 0.2, 0.3]; 2]
        );
        Ok(())
    }

    #[test]
    fn projection_shapes() -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut f = ParamFactory::new(&mut rng, DType::F32);
        let heads = ProjectionHeads::new(&mut f, ProjectorKind::Mlp, 8, 16, 4)?;
        let cls = Tensor::zeros((2, 8), DType::F32, &Device::Cpu)?;
        let z: Vec<Tensor> = (0..4)
            .map(|_| Tensor::zeros((2, 50, 8), DType::F32, &Device::Cpu).unwrap())
            .collect();
        let out = heads.project(&cls, &z)?;
        assert_eq!(out.cls.dims(), [2, 16]);
        assert_eq!(out.prompts.len(), 4);
        assert!(out.prompts.iter().all(|p| p.dims() == [2, 50, 16]));
        Ok(())
    }

    #[test]
    fn sharpening_cases() -> Result<()> {
        let u = t2(&[&[0.3, 0.3, 0.3, 0.3]]);
        for tau in [0.01, 0.1, 1.0] {
            for p in &to_rows(&sharpen_student(&u, tau)?)?[0] {
                assert!((p - 0.25).abs() < 1e-12);
            }
        }
        let x = t2(&[&[1.0, 2.0, 1.5]]);
        let p = &to_rows(&sharpen_student(&x, 1e-3)?)?[0];
        assert!((p[1] - 1.0).abs() < 1e-12);

        let mut st = DinoCenterState::new(3, DType::F64, 0.9, 0.1, 0.07)?;
        st.center = Tensor::new(&[1.0f64, 2.0, 1.5], &Device::Cpu)?;
        for p in &to_rows(&sharpen_center_teacher(&x, &st)?)?[0] {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
        st.center = Tensor::zeros(3, DType::F64, &Device::Cpu)?;
        let a = to_rows(&sharpen_center_teacher(&x, &st)?)?;
        let b = to_rows(&sharpen_student(&x, 0.07)?)?;
        for (x, y) in a[0].iter().zip(&b[0]) {
            assert!((x - y).abs() < 1e-12);
        }
        let shifted = to_rows(&sharpen_center_teacher(&(&x + 5.0)?, &st)?)?;
        for (x, y) in a[0].iter().zip(&shifted[0]) {
            assert!((x - y).abs() < 1e-12);
        }
        Ok(())
    }

    #[test]
    fn center_update_cases() -> Result<()> {
        let mut st = DinoCenterState::new(1, DType::F64, 0.9, 0.1, 0.04)?;
        update_center(&mut st, &t2(&[&[1.0], &[1.0]]))?;
        assert!((st.center.to_vec1::<f64>()?[0] - 0.1).abs() < 1e-12);
        st.center_momentum = 1.0;
        update_center(&mut st, &t2(&[&[7.0]]))?;
        assert!((st.center.to_vec1::<f64>()?[0] - 0.1).abs() < 1e-12);
        st.center_momentum = 0.5;
        for _ in 0..60 {
            update_center(&mut st, &t2(&[&[3.0], &[5.0]]))?;
        }
        assert!((st.center.to_vec1::<f64>()?[0] - 4.0).abs() < 1e-12);
        Ok(())
    }

    #[test]
    fn dino_closed_forms() -> Result<()> {
        let k = 5;
        let u = Tensor::full(1.0 / k as f64, (1, k), &Device::Cpu)?;
        assert!((to_scalar(&dino_cls_loss(&u, &u)?)? - (k as f64).ln()).abs() < 1e-9);
        let pt = t2(&[&[1.0, 0.0]]);
        let ps = t2(&[&[0.5, 0.5]]);
        assert!((to_scalar(&dino_cls_loss(&pt, &ps)?)? - 2f64.ln()).abs() < 1e-9);
        let sharp = t2(&[&[1.0 - 1e-12, 1e-12]]);
        assert!(to_scalar(&dino_cls_loss(&pt, &sharp)?)? < 1e-9);
        Ok(())
    }

    #[test]
    fn alignment_closed_forms() -> Result<()> {
        let s = stage(&[&[1.0, 0.0], &[0.0, 2.0]]);
        assert!(to_scalar(&prompt_alignment_loss(std::slice::from_ref(&s), std::slice::from_ref(&s))?)? < 1e-9);
        let t = stage(&[&[-3.0, 0.0], &[0.0, 2.0]]);
        assert!((to_scalar(&prompt_alignment_loss(std::slice::from_ref(&s), &[t])?)? - 4.0).abs() < 1e-9);
        let t = stage(&[&[0.0, 1.0], &[0.0, 2.0]]);
        assert!((to_scalar(&prompt_alignment_loss(&[s], &[t])?)? - 2.0).abs() < 1e-9);
        Ok(())
    }

    #[test]
    fn diversity_closed_forms() -> Result<()> {
        let same = stage(&[&[1.0, 2.0], &[1.0, 2.0], &[2.0, 4.0]]);
        assert!(to_scalar(&prompt_diversity_loss(&[same])?)?.abs() < 1e-9);
        let two = stage(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert!((to_scalar(&prompt_diversity_loss(&[two])?)? - 1.0).abs() < 1e-9);
        let three = stage(&[&[1.0, 0.0, 0.0], &[0.0, 2.0, 0.0], &[0.0, 0.0, 3.0]]);
        assert!((to_scalar(&prompt_diversity_loss(&[three])?)? - 3.0).abs() < 1e-9);
        Ok(())
    }

    #[test]
    fn total_loss_arithmetic() -> Result<()> {
        let one = Tensor::new(1.0f64, &Device::Cpu)?;
        let c = LossComponents {
            pseudo_label: one.clone(),
            cls: one.clone(),
            prompt: one.clone(),
            diversity: one.clone(),
        };
        let w = LossWeights::default();
        assert!((to_scalar(&total_loss(&c, &w)?)? - 1.195).abs() < 1e-12);
        let zero = LossWeights {
            alpha: 0.0,
            beta1: 0.0,
            beta2: 0.0,
            lambda: 0.0,
        };
        assert_eq!(to_scalar(&total_loss(&c, &zero)?)?, 0.0);
        let lower = total_loss_value(1.0, 1.0, 1.0, 2.0, &w);
        assert!(lower < total_loss_value(1.0, 1.0, 1.0, 1.0, &w));
        Ok(())
    }

    #[test]
    fn teacher_temperature_schedule() {
        assert_eq!(teacher_temperature(0, 100, 0.04, 0.07, 0.1), 0.04);
        assert!((teacher_temperature(5, 100, 0.04, 0.07, 0.1) - 0.055).abs() < 1e-12);
        assert_eq!(teacher_temperature(10, 100, 0.04, 0.07, 0.1), 0.07);
        assert_eq!(teacher_temperature(99, 100, 0.04, 0.07, 0.1), 0.07);
    }

    #[test]
    fn teacher_side_gets_no_gradient() -> Result<()> {
        let dev = Device::Cpu;
        let s = candle_core::Var::new(&[[[1.0f64, 0.5], [0.2, -1.0]]], &dev)?;
        let t = candle_core::Var::new(&[[[0.3f64, 0.9], [1.0, 1.0]]], &dev)?;
        let l = (prompt_alignment_loss(&[s.as_tensor().clone()], &[t.as_tensor().clone()])?
            + dino_cls_loss(
                &softmax_last(&t.as_tensor().squeeze(0)?)?,
                &softmax_last(&s.as_tensor().squeeze(0)?)?,
            )?)?;
        let g = l.backward()?;
        assert!(g.get(t.as_tensor()).is_none());
        assert!(g.get(s.as_tensor()).is_some());
        Ok(())
    }
}
