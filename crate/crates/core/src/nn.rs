//! Small differentiable building blocks on top of candle tensors.
//!
//! Everything here is composed from primitive tensor ops so that backprop
//! works in both `f32` (training) and `f64` (gradient checking).

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};

/// Which part of the network a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamRole {
    /// Patch embedding, CLS token, positional embedding, transformer layers, final norm.
    Backbone,
    /// Learnable prompt blocks.
    Prompt,
    /// Classification head.
    Head,
    /// Self-supervised projection heads (adaptation only).
    Projection,
}

/// A named, optionally trainable tensor.
///
/// Frozen parameters are handed to the graph as detached tensors, so
/// backprop never produces a gradient for them.
#[derive(Debug)]
pub struct Param {
    name: String,
    role: ParamRole,
    var: Var,
    trainable: bool,
}

impl Param {
    pub fn new(name: impl Into<String>, role: ParamRole, value: Tensor) -> Result<Self> {
        Ok(Self {
            name: name.into(),
            role,
            var: Var::from_tensor(&value.detach().copy()?)?,
            trainable: true,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn role(&self) -> ParamRole {
        self.role
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.trainable = trainable;
    }

    pub fn elem_count(&self) -> usize {
        self.var.elem_count()
    }

    pub fn dims(&self) -> &[usize] {
        self.var.dims()
    }

    /// The graph-facing tensor: tracked when trainable, detached otherwise.
    pub fn tensor(&self) -> Tensor {
        if self.trainable {
            self.var.as_tensor().clone()
        } else {
            self.var.as_tensor().detach()
        }
    }

    /// The underlying variable, used to look gradients up and to write updates.
    pub fn var(&self) -> &Var {
        &self.var
    }

    /// Current value, detached from any graph.
    pub fn value(&self) -> Tensor {
        self.var.as_tensor().detach()
    }

    pub fn set(&self, value: &Tensor) -> Result<()> {
        if value.dims() != self.dims() {
            return Err(Error::State(format!(
                "parameter {}: expected shape {:?}, got {:?}",
                self.name,
                self.dims(),
                value.dims()
            )));
        }
        let value = value.to_dtype(self.var.dtype())?.contiguous()?;
        self.var.set(&value.copy()?)?;
        Ok(())
    }

    /// Independent copy with its own storage.
    pub fn deep_copy(&self) -> Result<Self> {
        let mut p = Param::new(self.name.clone(), self.role, self.value())?;
        p.trainable = self.trainable;
        Ok(p)
    }
}

/// Parameter initialisation scheme.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform on `[-bound, bound]`.
    Uniform(f64),
    Normal(f64),
}

/// Allocates tensors for parameters from a seeded RNG.
pub struct ParamFactory<'a, R: Rng> {
    rng: &'a mut R,
    dtype: DType,
    device: Device,
    zeroed: bool,
}

impl<'a, R: Rng> ParamFactory<'a, R> {
    pub fn new(rng: &'a mut R, dtype: DType) -> Self {
        Self {
            rng,
            dtype,
            device: Device::Cpu,
            zeroed: false,
        }
    }

    /// A factory that ignores the init scheme and fills every tensor with zeros.
    pub fn zeroed(rng: &'a mut R, dtype: DType) -> Self {
        Self {
            zeroed: true,
            ..Self::new(rng, dtype)
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn tensor(&mut self, dims: &[usize], init: Init) -> Result<Tensor> {
        let n: usize = dims.iter().product();
        let init = if self.zeroed { Init::Zeros } else { init };
        let data: Vec<f64> = match init {
            Init::Zeros => return Ok(Tensor::zeros(dims, self.dtype, &self.device)?),
            Init::Ones => return Ok(Tensor::ones(dims, self.dtype, &self.device)?),
            Init::Uniform(b) => {
                let dist = Uniform::new_inclusive(-b, b)
                    .map_err(|e| Error::Config(format!("bad uniform bound {b}: {e}")))?;
                (0..n).map(|_| dist.sample(self.rng)).collect()
            }
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std)
                    .map_err(|e| Error::Config(format!("bad normal std {std}: {e}")))?;
                (0..n).map(|_| dist.sample(self.rng)).collect()
            }
        };
        Ok(Tensor::from_vec(data, dims, &self.device)?.to_dtype(self.dtype)?)
    }

    pub fn param(
        &mut self,
        name: impl Into<String>,
        role: ParamRole,
        dims: &[usize],
        init: Init,
    ) -> Result<Param> {
        let t = self.tensor(dims, init)?;
        Param::new(name, role, t)
    }
}

/// Affine map over the last dimension: `x W^T + b`.
#[derive(Debug)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new<R: Rng>(
        f: &mut ParamFactory<'_, R>,
        name: &str,
        role: ParamRole,
        in_dim: usize,
        out_dim: usize,
    ) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Ok(Self {
            weight: f.param(
                format!("{name}.weight"),
                role,
                &[out_dim, in_dim],
                Init::Uniform(bound),
            )?,
            bias: f.param(format!("{name}.bias"), role, &[out_dim], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let w = self.weight.tensor();
        let dims = x.dims();
        let in_dim = dims[dims.len() - 1];
        let rows = x.elem_count() / in_dim;
        let mut out_dims = dims.to_vec();
        *out_dims.last_mut().expect("non-scalar input") = w.dim(0)?;
        let y = x.reshape((rows, in_dim))?.matmul(&w.t()?)?;
        Ok(y.broadcast_add(&self.bias.tensor())?.reshape(out_dims)?)
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[derive(Debug)]
pub struct LayerNorm {
    pub gamma: Param,
    pub beta: Param,
    eps: f64,
}

impl LayerNorm {
    pub fn new<R: Rng>(
        f: &mut ParamFactory<'_, R>,
        name: &str,
        role: ParamRole,
        dim: usize,
    ) -> Result<Self> {
        Ok(Self {
            gamma: f.param(format!("{name}.weight"), role, &[dim], Init::Ones)?,
            beta: f.param(format!("{name}.bias"), role, &[dim], Init::Zeros)?,
            eps: 1e-6,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(&self.gamma.tensor())?
            .broadcast_add(&self.beta.tensor())?)
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.gamma, &self.beta]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

/// Two linear layers with a GELU in between.
#[derive(Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<R: Rng>(
        f: &mut ParamFactory<'_, R>,
        name: &str,
        role: ParamRole,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
    ) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(f, &format!("{name}.fc1"), role, in_dim, hidden)?,
            fc2: Linear::new(f, &format!("{name}.fc2"), role, hidden, out_dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu()?)
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = self.fc1.params();
        v.extend(self.fc2.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.fc1.params_mut();
        v.extend(self.fc2.params_mut());
        v
    }
}

/// Softmax over the last dimension. The max shift is detached; softmax is
/// shift invariant so the gradient is unaffected.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Row-wise argmax with ties resolved to the lowest index.
pub fn argmax_rows(rows: &[Vec<f64>]) -> Vec<usize> {
    rows.iter().map(|r| argmax(r)).collect()
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Copies a 2-d tensor out as `f64` rows.
pub fn to_rows(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    Ok(t.detach().to_dtype(DType::F64)?.to_vec2::<f64>()?)
}

pub fn to_scalar(t: &Tensor) -> Result<f64> {
    Ok(t.detach().to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn frozen_param_yields_no_gradient() -> Result<()> {
        let dev = Device::Cpu;
        let mut p = Param::new("w", ParamRole::Backbone, Tensor::new(&[1.0f64, 2.0], &dev)?)?;
        let q = Param::new("v", ParamRole::Prompt, Tensor::new(&[3.0f64, 4.0], &dev)?)?;
        p.set_trainable(false);
        let loss = (p.tensor() * q.tensor())?.sum_all()?;
        let grads = loss.backward()?;
        assert!(grads.get(p.var().as_tensor()).is_none());
        let gq = grads.get(q.var().as_tensor()).unwrap().to_vec1::<f64>()?;
        assert_eq!(gq, vec![1.0, 2.0]);
        Ok(())
    }

    #[test]
    fn softmax_rows_sum_to_one_and_match_log_softmax() -> Result<()> {
        let dev = Device::Cpu;
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0], [-50.0, 0.0, 50.0]], &dev)?;
        let s = to_rows(&softmax_last(&x)?)?;
        let ls = to_rows(&log_softmax_last(&x)?)?;
        for (r, lr) in s.iter().zip(&ls) {
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (a, b) in r.iter().zip(lr) {
                assert!((a.ln().max(-1e300) - b).abs() < 1e-9 || *a == 0.0);
            }
        }
        Ok(())
    }

    #[test]
    fn deep_copy_does_not_alias() -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut f = ParamFactory::new(&mut rng, DType::F32);
        let p = f.param("a", ParamRole::Head, &[3], Init::Uniform(1.0))?;
        let q = p.deep_copy()?;
        p.set(&Tensor::zeros(3, DType::F32, &Device::Cpu)?)?;
        assert_ne!(q.value().to_vec1::<f32>()?, vec![0.0; 3]);
        Ok(())
    }

    #[test]
    fn argmax_ties_pick_lowest_index() {
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.1, 0.7, 0.7, 0.1]), 1);
    }
}
