use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::model::{ModelParams, ParamKind, SubNetwork};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam moments for one parameter group.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Adam {
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl Adam {
    /// One update of the trainable tensors that have a gradient and belong to a
    /// sub-network accepted by `include`.
    pub fn update(
        &mut self,
        cfg: &AdamConfig,
        params: &mut ModelParams,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
        include: impl Fn(SubNetwork) -> bool,
    ) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        params.for_each_mut(|name, p, kind| {
            if kind != ParamKind::Trainable || !SubNetwork::of(name).is_some_and(&include) {
                return;
            }
            let Some(g) = grads.get(name) else { return };
            let m = self.m.entry(name.to_string()).or_insert_with(|| Tensor::zeros(p.shape()));
            let v = self.v.entry(name.to_string()).or_insert_with(|| Tensor::zeros(p.shape()));
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for (((x, mi), vi), &gi) in pd.iter_mut().zip(md.iter_mut()).zip(vd.iter_mut()).zip(g.data()) {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
                *x -= lr * (*mi / c1) / ((*vi / c2).sqrt() + cfg.eps);
            }
        });
    }

    pub fn is_finite(&self) -> bool {
        self.m.values().chain(self.v.values()).all(Tensor::is_finite)
    }
}
