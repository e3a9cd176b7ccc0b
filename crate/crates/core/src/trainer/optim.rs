//! SGD with momentum and Adam, with state that round-trips through checkpoints.

use edgeseg_tensor::{Gradients, ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::network::{Checkpoint, Mode};
use crate::{Error, Result, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    /// Base learning rate before scheduling.
    pub lr: f64,
    pub momentum: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
}

impl OptimizerConfig {
    /// SGD for encoder pretraining, Adam for the full model.
    pub fn for_mode(mode: Mode) -> Self {
        match mode {
            Mode::Pretrain => OptimizerConfig {
                kind: OptimizerKind::Sgd,
                lr: 0.01,
                momentum: 0.9,
                betas: (0.9, 0.999),
                eps: 1e-8,
                weight_decay: 1e-6,
            },
            Mode::Full => OptimizerConfig {
                kind: OptimizerKind::Adam,
                lr: 0.001,
                momentum: 0.9,
                betas: (0.9, 0.999),
                eps: 1e-8,
                weight_decay: 0.0,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && (0.0..1.0).contains(&self.momentum)
            && (0.0..1.0).contains(&self.betas.0)
            && (0.0..1.0).contains(&self.betas.1)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

/// Per-parameter first (`m`) and second (`v`) moment buffers; SGD uses `m`
/// as its velocity.
#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    config: OptimizerConfig,
    m: Vec<Option<Tensor<T>>>,
    v: Vec<Option<Tensor<T>>>,
    steps: u64,
}

const M_PREFIX: &str = "optim.m.";
const V_PREFIX: &str = "optim.v.";

impl<T: Scalar> Optimizer<T> {
    pub fn new(config: OptimizerConfig, params: &ParamStore<T>) -> Self {
        Optimizer { config, m: vec![None; params.len()], v: vec![None; params.len()], steps: 0 }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update with learning rate `lr`; parameters without a gradient are
    /// left alone.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &Gradients<T>, lr: f64) {
        self.steps += 1;
        let c = self.config.clone();
        let t = self.steps as i32;
        let (bc1, bc2) = (1.0 - c.betas.0.powi(t), 1.0 - c.betas.1.powi(t));
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let Some(g) = grads.get(id) else { continue };
            let p = params.get_mut(id);
            let i = id.index();
            let m = self.m[i].get_or_insert_with(|| Tensor::zeros(p.shape()));
            match c.kind {
                OptimizerKind::Sgd => {
                    for ((pv, &gv), mv) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()) {
                        let grad = gv.as_f64() + c.weight_decay * pv.as_f64();
                        let vel = c.momentum * mv.as_f64() + grad;
                        *mv = T::of(vel);
                        *pv = T::of(pv.as_f64() - lr * vel);
                    }
                }
                OptimizerKind::Adam => {
                    let v = self.v[i].get_or_insert_with(|| Tensor::zeros(p.shape()));
                    for (((pv, &gv), mv), vv) in
                        p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut())
                    {
                        let grad = gv.as_f64() + c.weight_decay * pv.as_f64();
                        let m1 = c.betas.0 * mv.as_f64() + (1.0 - c.betas.0) * grad;
                        let v1 = c.betas.1 * vv.as_f64() + (1.0 - c.betas.1) * grad * grad;
                        *mv = T::of(m1);
                        *vv = T::of(v1);
                        let update = (m1 / bc1) / ((v1 / bc2).sqrt() + c.eps);
                        *pv = T::of(pv.as_f64() - lr * update);
                    }
                }
            }
        }
    }

    /// Stores the moment buffers as `optim.m.<param>` / `optim.v.<param>`.
    pub fn save_into(&self, params: &ParamStore<T>, ck: &mut Checkpoint<T>) {
        for id in params.ids() {
            let name = params.name(id);
            if let Some(m) = &self.m[id.index()] {
                ck.push(format!("{M_PREFIX}{name}"), m.clone());
            }
            if let Some(v) = &self.v[id.index()] {
                ck.push(format!("{V_PREFIX}{name}"), v.clone());
            }
        }
    }

    pub fn restore(config: OptimizerConfig, steps: u64, params: &ParamStore<T>, ck: &Checkpoint<T>) -> Result<Self> {
        let mut opt = Optimizer::new(config, params);
        opt.steps = steps;
        for id in params.ids() {
            let name = params.name(id);
            let shape = params.get(id).shape();
            for (prefix, slot) in [(M_PREFIX, &mut opt.m), (V_PREFIX, &mut opt.v)] {
                if let Some(t) = ck.get(&format!("{prefix}{name}")) {
                    if t.shape() != shape {
                        return Err(Error::Load(format!("optimizer state for {name} has shape {}", t.shape())));
                    }
                    slot[id.index()] = Some(t.clone());
                }
            }
        }
        Ok(opt)
    }
}
