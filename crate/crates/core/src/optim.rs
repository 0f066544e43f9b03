use crate::error::{Error, Result};
use crate::params::NamedTensorSet;
use crate::tensor::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.0,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("optim: betas must lie in [0, 1) and eps must be positive".into()));
        }
        Ok(())
    }
}

/// Adaptive moment estimation with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW<S: Scalar> {
    pub cfg: AdamConfig,
    m: NamedTensorSet<S>,
    v: NamedTensorSet<S>,
    pub steps: u64,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(params: &NamedTensorSet<S>, cfg: AdamConfig) -> Self {
        Self {
            cfg,
            m: params.zeros_like_trainable(),
            v: params.zeros_like_trainable(),
            steps: 0,
        }
    }

    /// One update of every trainable tensor. `lr` and `weight_decay` are per
    /// call so a schedule can change them between stages.
    pub fn step(
        &mut self,
        params: &mut NamedTensorSet<S>,
        grads: &NamedTensorSet<S>,
        lr: f64,
        weight_decay: f64,
    ) -> Result<()> {
        self.steps += 1;
        let t = self.steps as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (name, entry) in params.iter_mut() {
            if !entry.trainable {
                continue;
            }
            let g = grads.get(name)?;
            if g.shape() != entry.tensor.shape() {
                return Err(Error::dim(
                    "adamw",
                    name.to_string(),
                    format!("gradient {:?} vs parameter {:?}", g.shape(), entry.tensor.shape()),
                ));
            }
            let m = self.m.get_mut(name)?.data_mut();
            let v = self.v.get_mut(name)?.data_mut();
            for (i, p) in entry.tensor.data_mut().iter_mut().enumerate() {
                let gi = g.data()[i].f64();
                let mi = b1 * m[i].f64() + (1.0 - b1) * gi;
                let vi = b2 * v[i].f64() + (1.0 - b2) * gi * gi;
                m[i] = S::of(mi);
                v[i] = S::of(vi);
                let update = (mi / c1) / ((vi / c2).sqrt() + self.cfg.eps);
                let pv = p.f64();
                *p = S::of(pv - lr * (update + weight_decay * pv));
            }
        }
        Ok(())
    }
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm<S: Scalar>(grads: &mut NamedTensorSet<S>, max_norm: f64) -> f64 {
    let norm = grads.l2_norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale(S::of(max_norm / norm));
    }
    norm
}
