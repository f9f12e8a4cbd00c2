//! Adam and AdamW over the parameters covered by a [`ParamGrads`] scope.
//!
//! AdamW applies its decoupled decay after the moment step:
//!
//! ```text
//! m = β1·m + (1-β1)·g
//! v = β2·v + (1-β2)·g²
//! θ = θ - lr · m̂ / (√v̂ + eps)
//! θ = θ - lr · wd · θ
//! ```
//!
//! Plain Adam folds `wd·θ` into the gradient instead (classic L2).

use serde::{Deserialize, Serialize};

use super::{NnError, Network, ParamGrads, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptKind {
    Adam,
    AdamW,
}

#[derive(Clone, Debug)]
pub struct OptState<T> {
    pub kind: OptKind,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Vec<Vec<T>>>,
    v: Vec<Vec<Vec<T>>>,
}

impl<T: Real> OptState<T> {
    pub fn new(kind: OptKind, lr: f64, weight_decay: f64) -> Self {
        Self {
            kind,
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn adam(lr: f64) -> Self {
        Self::new(OptKind::Adam, lr, 0.0)
    }

    pub fn adamw(lr: f64, weight_decay: f64) -> Self {
        Self::new(OptKind::AdamW, lr, weight_decay)
    }

    /// First-moment buffers, shaped like the optimized parameter set.
    pub fn first_moments(&self) -> &[Vec<Vec<T>>] {
        &self.m
    }

    fn ensure_moments(&mut self, grads: &ParamGrads<T>) -> Result<(), NnError> {
        let shape_of = |g: &ParamGrads<T>| -> Vec<Vec<usize>> {
            g.layers
                .iter()
                .map(|l| l.iter().map(Vec::len).collect())
                .collect()
        };
        if self.m.is_empty() {
            let zeros: Vec<Vec<Vec<T>>> = grads
                .layers
                .iter()
                .map(|l| l.iter().map(|p| vec![T::zero(); p.len()]).collect())
                .collect();
            self.m = zeros.clone();
            self.v = zeros;
            return Ok(());
        }
        let have: Vec<Vec<usize>> = self
            .m
            .iter()
            .map(|l| l.iter().map(Vec::len).collect())
            .collect();
        if have != shape_of(grads) {
            return Err(NnError::Shape(
                "gradient layout differs from optimizer moments".into(),
            ));
        }
        Ok(())
    }

    /// Applies one update to every parameter that has a gradient buffer.
    pub fn step(&mut self, net: &mut Network<T>, grads: &ParamGrads<T>) -> Result<(), NnError> {
        if grads.layers.len() != net.layers().len() {
            return Err(NnError::Shape(format!(
                "gradients for {} layers, network has {}",
                grads.layers.len(),
                net.layers().len()
            )));
        }
        for (layer, g) in net.layers().iter().zip(&grads.layers) {
            if g.is_empty() {
                continue;
            }
            let params = layer.params();
            if params.len() != g.len() || params.iter().zip(g).any(|(p, q)| p.len() != q.len()) {
                return Err(NnError::Shape(format!(
                    "gradient shape mismatch at {} layer",
                    layer.name()
                )));
            }
        }
        self.ensure_moments(grads)?;
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let bc1 = T::of(1.0 - self.beta1.powi(t));
        let bc2 = T::of(1.0 - self.beta2.powi(t));
        let lr = T::of(self.lr);
        let eps = T::of(self.eps);
        let wd = T::of(self.weight_decay);
        let one = T::one();
        for (li, layer) in net.layers_mut().iter_mut().enumerate() {
            if grads.layers[li].is_empty() {
                continue;
            }
            for (pi, param) in layer.params_mut().into_iter().enumerate() {
                let g = &grads.layers[li][pi];
                let m = &mut self.m[li][pi];
                let v = &mut self.v[li][pi];
                for j in 0..param.len() {
                    let mut gj = g[j];
                    if self.kind == OptKind::Adam {
                        gj += wd * param[j];
                    }
                    m[j] = b1 * m[j] + (one - b1) * gj;
                    v[j] = b2 * v[j] + (one - b2) * gj * gj;
                    let mhat = m[j] / bc1;
                    let vhat = v[j] / bc2;
                    param[j] -= lr * mhat / (vhat.sqrt() + eps);
                    if self.kind == OptKind::AdamW {
                        let decay = lr * wd * param[j];
                        param[j] -= decay;
                    }
                }
            }
        }
        Ok(())
    }
}
