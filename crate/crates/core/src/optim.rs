//! Adam optimizer.

use crate::autograd::Gradients;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale gradients whose global norm exceeds this.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Option<Tensor<T>>>,
    v: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter that has a gradient. Returns
    /// the pre-clipping gradient norm.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &Gradients<T>) -> Result<f64> {
        let norm = grads.global_norm();
        if !norm.is_finite() {
            return Err(Error::Numeric(format!("gradient norm is {norm}")));
        }
        let c = self.config;
        let clip = match c.clip_norm {
            Some(max) if norm > max => max / norm,
            _ => 1.0,
        };
        self.step += 1;
        let t = self.step as f64;
        let (bc1, bc2) = (1.0 - c.beta1.powf(t), 1.0 - c.beta2.powf(t));
        if self.m.len() < params.len() {
            self.m.resize(params.len(), None);
            self.v.resize(params.len(), None);
        }
        for id in params.ids().collect::<Vec<_>>() {
            let Some(g) = grads.param(id) else { continue };
            let p = params.get_mut(id);
            let m = self.m[id.0].get_or_insert_with(|| Tensor::zeros(p.shape()));
            let v = self.v[id.0].get_or_insert_with(|| Tensor::zeros(p.shape()));
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let gv = gv.as_f64() * clip;
                let mn = c.beta1 * mv.as_f64() + (1.0 - c.beta1) * gv;
                let vn = c.beta2 * vv.as_f64() + (1.0 - c.beta2) * gv * gv;
                *mv = T::from_f64(mn);
                *vv = T::from_f64(vn);
                let update = c.lr * (mn / bc1) / ((vn / bc2).sqrt() + c.eps);
                *pv = T::from_f64(pv.as_f64() - update);
            }
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::params::ParamRole;

    #[test]
    fn minimizes_quadratic() {
        let mut p = ParamStore::<f64>::new();
        let id = p.add("x", ParamRole::Static, Tensor::full(&[2], 3.0)).unwrap();
        let mut opt = Adam::new(AdamConfig {
            lr: 0.1,
            clip_norm: None,
            ..Default::default()
        });
        for _ in 0..300 {
            let mut tape = Tape::new();
            let x = p.bind(&mut tape, id);
            let sq = tape.mul(x, x).unwrap();
            let loss = tape.sum(sq);
            let g = tape.backward(loss).unwrap();
            opt.step(&mut p, &g).unwrap();
        }
        assert!(p.get(id).max_abs() < 1e-2, "{:?}", p.get(id));
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = ParamStore::<f64>::new();
        let id = p.add("x", ParamRole::Static, Tensor::full(&[1], 1.0)).unwrap();
        let mut opt = Adam::new(AdamConfig::default());
        let mut tape = Tape::new();
        let x = p.bind(&mut tape, id);
        let loss = tape.sum(x);
        let g = tape.backward(loss).unwrap();
        opt.step(&mut p, &g).unwrap();
        assert!((p.get(id).data()[0] - (1.0 - 1e-3)).abs() < 1e-9);
    }
}
