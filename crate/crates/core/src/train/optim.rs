use std::collections::BTreeMap;

use crate::autodiff::Gradients;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Adam moments per parameter plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptState<T> {
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Scalar> OptState<T> {
    pub fn new(store: &ParamStore<T>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|p| (p.name.clone(), Tensor::zeros(p.tensor.shape())))
                .collect()
        };
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
            beta1,
            beta2,
            eps,
        }
    }

    /// Moment shapes must match the store one-to-one.
    pub fn check(&self, store: &ParamStore<T>) -> Result<()> {
        if self.m.len() != store.len() || self.v.len() != store.len() {
            return Err(Error::PrefixSet(format!(
                "optimizer state has {}/{} moments for {} parameters",
                self.m.len(),
                self.v.len(),
                store.len()
            )));
        }
        for p in store.iter() {
            for (which, map) in [("m", &self.m), ("v", &self.v)] {
                let t = map.get(&p.name).ok_or_else(|| {
                    Error::PrefixSet(format!("no `{which}` moment for `{}`", p.name))
                })?;
                if t.shape() != p.tensor.shape() {
                    return Err(Error::shape(
                        "optimizer moment",
                        t.shape(),
                        p.tensor.shape(),
                    ));
                }
            }
        }
        Ok(())
    }
}

pub fn global_norm<T: Scalar>(grads: &Gradients<T>) -> f64 {
    grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|x| x.as_f64() * x.as_f64())
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut Gradients<T>, max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(Error::Config(format!(
            "max_norm must be > 0, got {max_norm}"
        )));
    }
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = T::lit(max_norm / norm);
        for g in grads.values_mut() {
            *g = g.map(|x| x * s);
        }
    }
    Ok(norm)
}

/// One AdamW update with bias correction and decoupled weight decay.
pub fn adamw_step<T: Scalar>(
    store: &mut ParamStore<T>,
    grads: &Gradients<T>,
    opt: &mut OptState<T>,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    opt.check(store)?;
    for p in store.iter() {
        let g = grads
            .get(&p.name)
            .ok_or_else(|| Error::PrefixSet(format!("no gradient for `{}`", p.name)))?;
        if g.shape() != p.tensor.shape() {
            return Err(Error::shape("adamw gradient", g.shape(), p.tensor.shape()));
        }
    }
    opt.step += 1;
    let t = opt.step as i32;
    let (b1, b2) = (opt.beta1, opt.beta2);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    let decay = T::lit(1.0 - lr * weight_decay);
    let (b1t, b2t, eps) = (T::lit(b1), T::lit(b2), T::lit(opt.eps));
    let (one_b1, one_b2) = (T::lit(1.0 - b1), T::lit(1.0 - b2));
    let (step_size, inv_sqrt_bc2) = (T::lit(lr / bc1), T::lit(1.0 / bc2.sqrt()));
    for p in store.iter_mut() {
        let g = &grads[&p.name];
        let m = opt.m.get_mut(&p.name).expect("checked");
        let v = opt.v.get_mut(&p.name).expect("checked");
        let (md, vd, th) = (m.data_mut(), v.data_mut(), p.tensor.data_mut());
        for (i, &gi) in g.data().iter().enumerate() {
            md[i] = b1t * md[i] + one_b1 * gi;
            vd[i] = b2t * vd[i] + one_b2 * gi * gi;
            th[i] = th[i] * decay - step_size * md[i] / (vd[i].sqrt() * inv_sqrt_bc2 + eps);
        }
    }
    Ok(())
}
