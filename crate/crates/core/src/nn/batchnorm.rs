//! Batch normalization with three statistic regimes.
//!
//! Every regime normalizes with `mean = a·running + b·batch` (likewise for
//! the variance), where `b` is 0 for frozen source statistics, 1 for pure
//! batch statistics and `1 - δ` when the running estimate is updated and
//! then used. One backward formula therefore covers all three regimes.

use serde::{Deserialize, Serialize};

use super::{NnError, Real, Tensor4};

/// Which statistics a BN layer normalizes with outside of pretraining.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnMode {
    /// Stored source statistics, never modified.
    #[default]
    FixedSource,
    /// Running statistics updated by momentum on adaptation batches.
    TrackRunning,
    /// Statistics of the current batch only.
    BatchOnly,
}

impl BnMode {
    pub fn tag(self) -> u8 {
        match self {
            BnMode::FixedSource => 0,
            BnMode::TrackRunning => 1,
            BnMode::BatchOnly => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(BnMode::FixedSource),
            1 => Some(BnMode::TrackRunning),
            2 => Some(BnMode::BatchOnly),
            _ => None,
        }
    }
}

/// Kind of forward pass. Controls BN statistics and dropout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pass {
    /// Source pretraining: batch statistics, running estimates updated, dropout on.
    Train,
    /// Test-time adaptation step (the "training" flag of the BN regimes).
    Adapt,
    /// Inference; never mutates state.
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BnState<T> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    /// Weight δ kept by the running estimate on each update.
    pub momentum: T,
    pub eps: T,
    pub mode: BnMode,
}

impl<T: Real> BnState<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            momentum: T::of(0.9),
            eps: T::of(1e-5),
            mode: BnMode::FixedSource,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

/// Everything the backward pass needs from a BN forward.
#[derive(Clone, Debug)]
pub struct BnCache<T> {
    input: Tensor4<T>,
    mean: Vec<T>,
    inv_std: Vec<T>,
    batch_mean: Vec<T>,
    batch_weight: T,
}

pub struct BnForward<T> {
    pub output: Tensor4<T>,
    pub cache: BnCache<T>,
    /// New `(running_mean, running_var)` to commit, when the pass updates them.
    pub running_update: Option<(Vec<T>, Vec<T>)>,
}

fn batch_stats<T: Real>(x: &Tensor4<T>) -> (Vec<T>, Vec<T>) {
    let d = x.dims();
    let plane = d.plane();
    let count = T::of((d.n * plane) as f64);
    let mut mean = vec![T::zero(); d.c];
    let mut var = vec![T::zero(); d.c];
    for c in 0..d.c {
        let mut s = T::zero();
        for n in 0..d.n {
            let base = (n * d.c + c) * plane;
            s += x.data()[base..base + plane].iter().copied().sum::<T>();
        }
        let m = s / count;
        let mut q = T::zero();
        for n in 0..d.n {
            let base = (n * d.c + c) * plane;
            q += x.data()[base..base + plane]
                .iter()
                .map(|&v| (v - m) * (v - m))
                .sum::<T>();
        }
        mean[c] = m;
        var[c] = q / count;
    }
    (mean, var)
}

/// Whether a pass over `bn` needs the statistics of the current batch.
pub(crate) fn uses_batch_stats<T: Real>(bn: &BnState<T>, pass: Pass) -> bool {
    match pass {
        Pass::Train => true,
        Pass::Adapt => bn.mode != BnMode::FixedSource,
        Pass::Eval => bn.mode == BnMode::BatchOnly,
    }
}

pub(crate) struct ResolvedStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    /// Weight of the batch mean inside `mean`.
    pub batch_weight: T,
    pub running_update: Option<(Vec<T>, Vec<T>)>,
}

/// Statistics a pass normalizes with, given the batch moments (ignored
/// when the regime does not use them).
pub(crate) fn resolve_stats<T: Real>(
    bn: &BnState<T>,
    pass: Pass,
    batch_mean: &[T],
    batch_var: Vec<T>,
) -> ResolvedStats<T> {
    let delta = bn.momentum;
    let blend = |run: &[T], batch: &[T]| -> Vec<T> {
        run.iter()
            .zip(batch)
            .map(|(&r, &b)| delta * r + (T::one() - delta) * b)
            .collect()
    };
    let (mean, var, batch_weight, running_update) = match (pass, bn.mode) {
        (Pass::Train, _) => {
            let upd = (
                blend(&bn.running_mean, batch_mean),
                blend(&bn.running_var, &batch_var),
            );
            (batch_mean.to_vec(), batch_var, T::one(), Some(upd))
        }
        (_, BnMode::BatchOnly) => (batch_mean.to_vec(), batch_var, T::one(), None),
        (Pass::Adapt, BnMode::TrackRunning) => {
            let m = blend(&bn.running_mean, batch_mean);
            let v = blend(&bn.running_var, &batch_var);
            (m.clone(), v.clone(), T::one() - delta, Some((m, v)))
        }
        _ => (
            bn.running_mean.clone(),
            bn.running_var.clone(),
            T::zero(),
            None,
        ),
    };
    ResolvedStats {
        mean,
        var,
        batch_weight,
        running_update,
    }
}

pub fn bn_forward<T: Real>(
    x: &Tensor4<T>,
    bn: &BnState<T>,
    pass: Pass,
) -> Result<BnForward<T>, NnError> {
    let d = x.dims();
    if d.c != bn.channels() {
        return Err(NnError::Shape(format!(
            "batch norm has {} channels, input is {d}",
            bn.channels()
        )));
    }
    let (batch_mean, batch_var) = if uses_batch_stats(bn, pass) {
        batch_stats(x)
    } else {
        (vec![T::zero(); d.c], vec![T::zero(); d.c])
    };
    let ResolvedStats {
        mean,
        var,
        batch_weight,
        running_update,
    } = resolve_stats(bn, pass, &batch_mean, batch_var);

    let inv_std: Vec<T> = var
        .iter()
        .map(|&v| {
            let denom = v + bn.eps;
            assert!(denom > T::zero(), "BN variance + eps must be positive");
            T::one() / denom.sqrt()
        })
        .collect();

    let plane = d.plane();
    let mut out = Tensor4::zeros(d);
    {
        let od = out.data_mut();
        for n in 0..d.n {
            for c in 0..d.c {
                let base = (n * d.c + c) * plane;
                let (m, s, g, b) = (mean[c], inv_std[c], bn.gamma[c], bn.beta[c]);
                for (o, &v) in od[base..base + plane]
                    .iter_mut()
                    .zip(&x.data()[base..base + plane])
                {
                    *o = g * ((v - m) * s) + b;
                }
            }
        }
    }
    Ok(BnForward {
        output: out,
        cache: BnCache {
            input: x.clone(),
            mean,
            inv_std,
            batch_mean,
            batch_weight,
        },
        running_update,
    })
}

/// Gradients of one BN layer: `(dγ, dβ, dx)`.
pub fn bn_backward<T: Real>(
    cache: &BnCache<T>,
    bn: &BnState<T>,
    dy: &Tensor4<T>,
    want_input: bool,
) -> (Vec<T>, Vec<T>, Option<Tensor4<T>>) {
    let x = &cache.input;
    let d = x.dims();
    let plane = d.plane();
    let count = T::of((d.n * plane) as f64);
    let mut dgamma = vec![T::zero(); d.c];
    let mut dbeta = vec![T::zero(); d.c];
    let mut dmean = vec![T::zero(); d.c];
    let mut dvar = vec![T::zero(); d.c];
    let half = T::of(0.5);
    for c in 0..d.c {
        let (m, s, g) = (cache.mean[c], cache.inv_std[c], bn.gamma[c]);
        let (mut sg, mut sb, mut sdx, mut sdxc) = (T::zero(), T::zero(), T::zero(), T::zero());
        for n in 0..d.n {
            let base = (n * d.c + c) * plane;
            let xs = &x.data()[base..base + plane];
            let gs = &dy.data()[base..base + plane];
            for (&xv, &gv) in xs.iter().zip(gs) {
                let centered = xv - m;
                sg += gv * centered * s;
                sb += gv;
                let dxhat = gv * g;
                sdx += dxhat;
                sdxc += dxhat * centered;
            }
        }
        dgamma[c] = sg;
        dbeta[c] = sb;
        dmean[c] = -sdx * s;
        dvar[c] = -half * sdxc * s * s * s;
    }
    if !want_input {
        return (dgamma, dbeta, None);
    }
    let b = cache.batch_weight;
    let two = T::of(2.0);
    let mut dx = Tensor4::zeros(d);
    {
        let dxd = dx.data_mut();
        for n in 0..d.n {
            for c in 0..d.c {
                let base = (n * d.c + c) * plane;
                let (s, g, bm) = (cache.inv_std[c], bn.gamma[c], cache.batch_mean[c]);
                let k_mean = b * dmean[c] / count;
                let k_var = b * dvar[c] * two / count;
                for ((o, &xv), &gv) in dxd[base..base + plane]
                    .iter_mut()
                    .zip(&x.data()[base..base + plane])
                    .zip(&dy.data()[base..base + plane])
                {
                    *o = gv * g * s + k_mean + k_var * (xv - bm);
                }
            }
        }
    }
    (dgamma, dbeta, Some(dx))
}

/// Normalizes `x` under the layer's regime. With `training` set, a
/// tracking layer commits its momentum update to `bn`.
pub fn bn_apply<T: Real>(
    x: &Tensor4<T>,
    bn: &mut BnState<T>,
    training: bool,
) -> Result<Tensor4<T>, NnError> {
    let pass = if training { Pass::Adapt } else { Pass::Eval };
    let fwd = bn_forward(x, bn, pass)?;
    if let Some((m, v)) = fwd.running_update {
        bn.running_mean = m;
        bn.running_var = v;
    }
    Ok(fwd.output)
}
