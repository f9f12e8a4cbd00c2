use ndarray::Array2;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::batchnorm::{bn_backward, bn_forward, resolve_stats, uses_batch_stats, BnCache, ResolvedStats};
use super::layers::{
    avg_pool_backward, avg_pool_forward, elu_backward, elu_forward, linear_backward,
    linear_forward,
};
use super::{BnMode, BnState, Conv2d, Dims, Layer, Linear, NnError, Padding, Pass, Real, Tensor4};

/// Which parameters receive gradient buffers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GradScope {
    AllParams,
    BnAffineOnly,
}

impl GradScope {
    fn covers<T: Real>(self, layer: &Layer<T>) -> bool {
        match self {
            GradScope::AllParams => !layer.params().is_empty(),
            GradScope::BnAffineOnly => matches!(layer, Layer::BatchNorm(_)),
        }
    }
}

/// Gradient buffers laid out like [`Layer::params`]; layers outside the
/// scope hold no buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads<T> {
    pub scope: GradScope,
    pub layers: Vec<Vec<Vec<T>>>,
}

impl<T: Real> ParamGrads<T> {
    pub fn zeros(net: &Network<T>, scope: GradScope) -> Self {
        let layers = net
            .layers()
            .iter()
            .map(|l| {
                if scope.covers(l) {
                    l.params().iter().map(|p| vec![T::zero(); p.len()]).collect()
                } else {
                    Vec::new()
                }
            })
            .collect();
        Self { scope, layers }
    }

    pub fn add_assign(&mut self, other: &ParamGrads<T>) -> Result<(), NnError> {
        if self.scope != other.scope || self.layers.len() != other.layers.len() {
            return Err(NnError::Shape("gradient sets have different layouts".into()));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            if a.len() != b.len() {
                return Err(NnError::Shape("gradient sets have different layouts".into()));
            }
            for (pa, pb) in a.iter_mut().zip(b) {
                if pa.len() != pb.len() {
                    return Err(NnError::Shape("gradient buffer length mismatch".into()));
                }
                for (x, &y) in pa.iter_mut().zip(pb) {
                    *x += y;
                }
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, s: T) {
        for v in self.layers.iter_mut().flatten().flatten() {
            *v *= s;
        }
    }

    pub fn values(&self) -> impl Iterator<Item = T> + '_ {
        self.layers.iter().flatten().flatten().copied()
    }

    pub fn buffer_count(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }
}

#[derive(Clone, Debug)]
enum LayerCache<T> {
    Conv { input: Tensor4<T> },
    Separable { input: Tensor4<T>, mid: Tensor4<T> },
    Bn(BnCache<T>),
    Elu { output: Tensor4<T> },
    Pool { in_dims: Dims },
    Dropout { mask: Option<Vec<T>> },
    Flatten { in_dims: Dims },
    Linear { input: Tensor4<T> },
}

/// Intermediates of one forward pass, consumed by [`Network::backward`].
#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    start: usize,
    batch: usize,
    layers: Vec<LayerCache<T>>,
    stem: Option<StemCache<T>>,
}

/// What the folded first batch norm needs for its γ/β gradients.
#[derive(Clone, Debug)]
struct StemCache<T> {
    /// Depthwise conv of the un-normalized temporal conv output.
    u: Tensor4<T>,
    mean: Vec<T>,
    inv_std: Vec<T>,
}

impl<T> ForwardCache<T> {
    pub fn start(&self) -> usize {
        self.start
    }
}

pub struct ForwardResult<T> {
    /// `batch × classes`.
    pub logits: Array2<T>,
    /// Flattened classifier input, `batch × feature_dim`.
    pub features: Array2<T>,
    pub cache: ForwardCache<T>,
}

/// Hyperparameters of the EEGNet-style reference network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EegNetConfig {
    pub channels: usize,
    pub samples: usize,
    pub temporal_filters: usize,
    pub depth: usize,
    pub pointwise_filters: usize,
    pub temporal_kernel: usize,
    pub separable_kernel: usize,
    pub pool1: usize,
    pub pool2: usize,
    pub dropout: f64,
    pub classes: usize,
}

impl Default for EegNetConfig {
    fn default() -> Self {
        Self {
            channels: 30,
            samples: 384,
            temporal_filters: 8,
            depth: 2,
            pointwise_filters: 16,
            temporal_kernel: 64,
            separable_kernel: 16,
            pool1: 4,
            pool2: 8,
            dropout: 0.25,
            classes: 2,
        }
    }
}

impl EegNetConfig {
    pub fn feature_dim(&self) -> usize {
        self.pointwise_filters * (self.samples / self.pool1 / self.pool2)
    }
}

/// Fixed layer stack ending in a linear classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    input: Dims,
    layers: Vec<Layer<T>>,
    classes: usize,
}

impl<T: Real> Network<T> {
    /// Validates shape consistency from `input` (batch size ignored) through a
    /// final `Flatten → Linear` head.
    pub fn new(input: Dims, layers: Vec<Layer<T>>) -> Result<Self, NnError> {
        let input = input.with_batch(1);
        let classes = match layers.last() {
            Some(Layer::Linear(l)) => l.out_features,
            _ => return Err(NnError::Config("network must end in a linear layer".into())),
        };
        if classes < 2 {
            return Err(NnError::Config("classifier needs at least two classes".into()));
        }
        if !matches!(layers.get(layers.len().wrapping_sub(2)), Some(Layer::Flatten)) {
            return Err(NnError::Config("linear head must follow a flatten layer".into()));
        }
        let mut d = input;
        for l in &layers {
            d = l.output_dims(d)?;
        }
        Ok(Self {
            input,
            layers,
            classes,
        })
    }

    /// EEGNet-style stack with Glorot-uniform weights drawn from `rng`.
    pub fn eegnet(cfg: &EegNetConfig, rng: &mut impl Rng) -> Result<Self, NnError> {
        let f1 = cfg.temporal_filters;
        let f1d = f1 * cfg.depth;
        let f2 = cfg.pointwise_filters;
        let layers = vec![
            Layer::Conv2d(Conv2d::new(
                1,
                f1,
                1,
                (1, cfg.temporal_kernel),
                Padding::same(1, cfg.temporal_kernel),
            )?),
            Layer::BatchNorm(BnState::new(f1)),
            Layer::DepthwiseConv2d(Conv2d::new(f1, f1d, f1, (cfg.channels, 1), Padding::NONE)?),
            Layer::BatchNorm(BnState::new(f1d)),
            Layer::Elu,
            Layer::AvgPool2d { kh: 1, kw: cfg.pool1 },
            Layer::Dropout { rate: cfg.dropout },
            Layer::SeparableConv2d {
                depthwise: Conv2d::new(
                    f1d,
                    f1d,
                    f1d,
                    (1, cfg.separable_kernel),
                    Padding::same(1, cfg.separable_kernel),
                )?,
                pointwise: Conv2d::new(f1d, f2, 1, (1, 1), Padding::NONE)?,
            },
            Layer::BatchNorm(BnState::new(f2)),
            Layer::Elu,
            Layer::AvgPool2d { kh: 1, kw: cfg.pool2 },
            Layer::Dropout { rate: cfg.dropout },
            Layer::Flatten,
            Layer::Linear(Linear::new(cfg.feature_dim(), cfg.classes)),
        ];
        let mut net = Self::new(Dims::new(1, 1, cfg.channels, cfg.samples), layers)?;
        net.init_glorot(rng);
        Ok(net)
    }

    /// Glorot-uniform weights, zero biases, identity BN affine.
    pub fn init_glorot(&mut self, rng: &mut impl Rng) {
        fn fill<T: Real>(w: &mut [T], fans: (usize, usize), rng: &mut impl Rng) {
            let limit = (6.0 / (fans.0 + fans.1) as f64).sqrt();
            for v in w {
                *v = T::of(rng.random_range(-limit..limit));
            }
        }
        for layer in &mut self.layers {
            match layer {
                Layer::Conv2d(c) | Layer::DepthwiseConv2d(c) => {
                    let fans = c.fans();
                    fill(&mut c.weight, fans, rng)
                }
                Layer::SeparableConv2d {
                    depthwise,
                    pointwise,
                } => {
                    let fans = depthwise.fans();
                    fill(&mut depthwise.weight, fans, rng);
                    let fans = pointwise.fans();
                    fill(&mut pointwise.weight, fans, rng);
                }
                Layer::Linear(l) => {
                    fill(&mut l.weight, (l.in_features, l.out_features), rng);
                    l.bias.iter_mut().for_each(|b| *b = T::zero());
                }
                Layer::BatchNorm(bn) => {
                    let c = bn.channels();
                    *bn = BnState {
                        mode: bn.mode,
                        momentum: bn.momentum,
                        eps: bn.eps,
                        ..BnState::new(c)
                    };
                }
                _ => {}
            }
        }
    }

    /// Per-item input dims (batch = 1).
    pub fn input_dims(&self) -> Dims {
        self.input
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn feature_dim(&self) -> usize {
        self.classifier().in_features
    }

    pub fn classifier(&self) -> &Linear<T> {
        match self.layers.last() {
            Some(Layer::Linear(l)) => l,
            _ => unreachable!("validated at construction"),
        }
    }

    pub fn classifier_mut(&mut self) -> &mut Linear<T> {
        match self.layers.last_mut() {
            Some(Layer::Linear(l)) => l,
            _ => unreachable!("validated at construction"),
        }
    }

    pub fn bn_layers(&self) -> impl Iterator<Item = &BnState<T>> {
        self.layers.iter().filter_map(|l| match l {
            Layer::BatchNorm(bn) => Some(bn),
            _ => None,
        })
    }

    pub fn bn_layers_mut(&mut self) -> impl Iterator<Item = &mut BnState<T>> {
        self.layers.iter_mut().filter_map(|l| match l {
            Layer::BatchNorm(bn) => Some(bn),
            _ => None,
        })
    }

    pub fn set_bn_mode(&mut self, mode: BnMode) {
        self.bn_layers_mut().for_each(|bn| bn.mode = mode);
    }

    /// Per-layer output dims for a batch of one.
    pub fn layer_dims(&self) -> Vec<Dims> {
        let mut d = self.input;
        self.layers
            .iter()
            .map(|l| {
                d = l.output_dims(d).expect("validated at construction");
                d
            })
            .collect()
    }

    /// Number of leading layers whose output cannot change during
    /// adaptation: everything before the first batch norm. Their output
    /// can be computed once per segment and fed to [`Network::forward_from`].
    pub fn frozen_prefix_len(&self) -> usize {
        self.layers
            .iter()
            .position(|l| matches!(l, Layer::BatchNorm(_)))
            .unwrap_or(self.layers.len())
    }

    /// Evaluates layers `[0, end)` only. Pure.
    pub fn forward_prefix(&self, x: &Tensor4<T>, end: usize) -> Result<Tensor4<T>, NnError> {
        self.check_input(x, 0)?;
        let mut a = x.clone();
        for layer in &self.layers[..end] {
            a = match layer {
                Layer::Conv2d(c) | Layer::DepthwiseConv2d(c) => c.forward(&a)?,
                Layer::SeparableConv2d {
                    depthwise,
                    pointwise,
                } => pointwise.forward(&depthwise.forward(&a)?)?,
                Layer::BatchNorm(bn) => bn_forward(&a, bn, Pass::Eval)?.output,
                Layer::Elu => elu_forward(&a),
                Layer::AvgPool2d { kh, kw } => avg_pool_forward(&a, *kh, *kw),
                Layer::Dropout { .. } => a,
                Layer::Flatten => {
                    let d = a.dims();
                    a.reshape(Dims::new(d.n, d.item_len(), 1, 1))?
                }
                Layer::Linear(l) => linear_forward(l, &a),
            };
        }
        Ok(a)
    }

    fn check_input(&self, x: &Tensor4<T>, start: usize) -> Result<(), NnError> {
        let expected = if start == 0 {
            self.input
        } else {
            self.layer_dims()[start - 1]
        };
        let d = x.dims();
        if d.n == 0 || (d.c, d.h, d.w) != (expected.c, expected.h, expected.w) {
            return Err(NnError::Shape(format!(
                "input {d} does not match expected {expected} at layer {start}"
            )));
        }
        x.check_finite("network input")
    }

    /// Inference pass; never mutates the network.
    pub fn forward_eval(&self, x: &Tensor4<T>) -> Result<ForwardResult<T>, NnError> {
        self.forward_eval_from(0, x)
    }

    pub fn forward_eval_from(&self, start: usize, x: &Tensor4<T>) -> Result<ForwardResult<T>, NnError> {
        let (res, updates) = self.run(start, x, Pass::Eval, None)?;
        debug_assert!(updates.is_empty());
        Ok(res)
    }

    /// Forward pass that commits any running-statistic updates the pass
    /// implies. `rng` drives dropout during [`Pass::Train`].
    pub fn forward(
        &mut self,
        x: &Tensor4<T>,
        pass: Pass,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<ForwardResult<T>, NnError> {
        self.forward_from(0, x, pass, rng)
    }

    /// Like [`Network::forward`], starting at layer `start` with `x` being
    /// that layer's input.
    pub fn forward_from(
        &mut self,
        start: usize,
        x: &Tensor4<T>,
        pass: Pass,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<ForwardResult<T>, NnError> {
        let (res, updates) = self.run(start, x, pass, rng)?;
        for (idx, (mean, var)) in updates {
            if let Layer::BatchNorm(bn) = &mut self.layers[idx] {
                bn.running_mean = mean;
                bn.running_var = var;
            }
        }
        Ok(res)
    }

    #[allow(clippy::type_complexity)]
    fn run(
        &self,
        start: usize,
        x: &Tensor4<T>,
        pass: Pass,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<(ForwardResult<T>, Vec<(usize, (Vec<T>, Vec<T>))>), NnError> {
        if start >= self.layers.len() {
            return Err(NnError::Shape(format!("start layer {start} out of range")));
        }
        self.check_input(x, start)?;
        let n = x.dims().n;
        let mut caches = Vec::with_capacity(self.layers.len() - start);
        let mut updates = Vec::new();
        let mut a = x.clone();
        let mut features = None;
        for (idx, layer) in self.layers.iter().enumerate().skip(start) {
            let (next, cache) = match layer {
                Layer::Conv2d(c) | Layer::DepthwiseConv2d(c) => {
                    (c.forward(&a)?, LayerCache::Conv { input: a })
                }
                Layer::SeparableConv2d {
                    depthwise,
                    pointwise,
                } => {
                    let mid = depthwise.forward(&a)?;
                    (pointwise.forward(&mid)?, LayerCache::Separable { input: a, mid })
                }
                Layer::BatchNorm(bn) => {
                    let f = bn_forward(&a, bn, pass)?;
                    if let Some(u) = f.running_update {
                        updates.push((idx, u));
                    }
                    (f.output, LayerCache::Bn(f.cache))
                }
                Layer::Elu => {
                    let y = elu_forward(&a);
                    (y.clone(), LayerCache::Elu { output: y })
                }
                Layer::AvgPool2d { kh, kw } => {
                    let in_dims = a.dims();
                    (avg_pool_forward(&a, *kh, *kw), LayerCache::Pool { in_dims })
                }
                Layer::Dropout { rate } => match (pass, rng.as_deref_mut()) {
                    (Pass::Train, Some(r)) if *rate > 0.0 => {
                        let keep = T::of(1.0 / (1.0 - rate));
                        let mask: Vec<T> = (0..a.dims().len())
                            .map(|_| if r.random::<f64>() < *rate { T::zero() } else { keep })
                            .collect();
                        let y = Tensor4::from_raw(
                            a.dims(),
                            a.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect(),
                        );
                        (y, LayerCache::Dropout { mask: Some(mask) })
                    }
                    _ => (a, LayerCache::Dropout { mask: None }),
                },
                Layer::Flatten => {
                    let in_dims = a.dims();
                    let flat = a.reshape(Dims::new(n, in_dims.item_len(), 1, 1))?;
                    (flat, LayerCache::Flatten { in_dims })
                }
                Layer::Linear(l) => {
                    let y = linear_forward(l, &a);
                    features = Some(a.data().to_vec());
                    (y, LayerCache::Linear { input: a })
                }
            };
            caches.push(cache);
            a = next;
        }
        a.check_finite("logits")?;
        let logits = Array2::from_shape_vec((n, self.classes), a.into_vec())
            .map_err(|e| NnError::Shape(e.to_string()))?;
        let features = Array2::from_shape_vec(
            (n, self.feature_dim()),
            features.expect("network ends in a linear layer"),
        )
        .map_err(|e| NnError::Shape(e.to_string()))?;
        Ok((
            ForwardResult {
                logits,
                features,
                cache: ForwardCache {
                    start,
                    batch: n,
                    layers: caches,
                    stem: None,
                },
            },
            updates,
        ))
    }

    /// Reverse-mode gradients of a scalar loss given `dL/dlogits`.
    ///
    /// Activation gradients are propagated down to the lowest layer holding
    /// in-scope parameters; nothing below it can contribute.
    pub fn backward(
        &self,
        cache: &ForwardCache<T>,
        dlogits: &Array2<T>,
        scope: GradScope,
    ) -> Result<ParamGrads<T>, NnError> {
        if cache.layers.len() + cache.start != self.layers.len() {
            return Err(NnError::StaleCache(format!(
                "cache covers {} layers from {}, network has {}",
                cache.layers.len(),
                cache.start,
                self.layers.len()
            )));
        }
        if dlogits.dim() != (cache.batch, self.classes) {
            return Err(NnError::StaleCache(format!(
                "logit gradient {:?} does not match batch {} x {} classes",
                dlogits.dim(),
                cache.batch,
                self.classes
            )));
        }
        let mut grads = ParamGrads::zeros(self, scope);
        let Some(lowest) = self.layers.iter().position(|l| scope.covers(l)) else {
            return Ok(grads);
        };
        let folded = cache
            .stem
            .as_ref()
            .filter(|_| lowest == STEM_BN && scope == GradScope::BnAffineOnly);
        if lowest < cache.start && folded.is_none() {
            return Err(NnError::StaleCache(format!(
                "cache starts at layer {} but layer {lowest} needs gradients",
                cache.start
            )));
        }
        let mut g = Tensor4::from_raw(
            Dims::new(cache.batch, self.classes, 1, 1),
            dlogits.iter().copied().collect(),
        );
        for idx in (lowest.max(cache.start)..self.layers.len()).rev() {
            let want_input = idx > lowest;
            let want_params = scope.covers(&self.layers[idx]);
            let lc = &cache.layers[idx - cache.start];
            let next = match (&self.layers[idx], lc) {
                (Layer::Conv2d(c) | Layer::DepthwiseConv2d(c), LayerCache::Conv { input }) => {
                    let (dw, dx) = c.backward(input, &g, want_params, want_input);
                    if let Some(dw) = dw {
                        grads.layers[idx][0] = dw;
                    }
                    dx
                }
                (
                    Layer::SeparableConv2d {
                        depthwise,
                        pointwise,
                    },
                    LayerCache::Separable { input, mid },
                ) => {
                    let need_mid = want_input || want_params;
                    let (dpw, dmid) = pointwise.backward(mid, &g, want_params, need_mid);
                    let (ddw, dx) = match dmid {
                        Some(dm) => depthwise.backward(input, &dm, want_params, want_input),
                        None => (None, None),
                    };
                    if let (Some(ddw), Some(dpw)) = (ddw, dpw) {
                        grads.layers[idx][0] = ddw;
                        grads.layers[idx][1] = dpw;
                    }
                    dx
                }
                (Layer::BatchNorm(bn), LayerCache::Bn(bc)) => {
                    let (dgamma, dbeta, dx) = bn_backward(bc, bn, &g, want_input);
                    if want_params {
                        grads.layers[idx][0] = dgamma;
                        grads.layers[idx][1] = dbeta;
                    }
                    dx
                }
                (Layer::Elu, LayerCache::Elu { output }) => Some(elu_backward(output, &g)),
                (Layer::AvgPool2d { kh, kw }, LayerCache::Pool { in_dims }) => {
                    Some(avg_pool_backward(*in_dims, &g, *kh, *kw))
                }
                (Layer::Dropout { .. }, LayerCache::Dropout { mask }) => Some(match mask {
                    Some(m) => Tensor4::from_raw(
                        g.dims(),
                        g.data().iter().zip(m).map(|(&v, &k)| v * k).collect(),
                    ),
                    None => g.clone(),
                }),
                (Layer::Flatten, LayerCache::Flatten { in_dims }) => Some(g.clone().reshape(*in_dims)?),
                (Layer::Linear(l), LayerCache::Linear { input }) => {
                    let (dw, db, dx) = linear_backward(l, input, &g, want_input);
                    if want_params {
                        grads.layers[idx][0] = dw;
                        grads.layers[idx][1] = db;
                    }
                    dx
                }
                (layer, _) => {
                    return Err(NnError::StaleCache(format!(
                        "cache entry does not match {} layer {idx}",
                        layer.name()
                    )))
                }
            };
            match next {
                Some(dx) => g = dx,
                None => break,
            }
        }
        if let Some(stem) = folded {
            let (dgamma, dbeta) = self.stem_affine_grads(stem, &g);
            grads.layers[STEM_BN] = vec![dgamma, dbeta];
        }
        Ok(grads)
    }

    /// SHA-256 over every parameter and statistic that adaptation must not
    /// touch: all weights except BN γ/β, plus BN running statistics.
    pub fn frozen_fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (i, layer) in self.layers.iter().enumerate() {
            h.update((i as u32).to_le_bytes());
            let tensors: Vec<&[T]> = match layer {
                Layer::BatchNorm(bn) => vec![&bn.running_mean, &bn.running_var],
                other => other.params(),
            };
            for t in tensors {
                for v in t {
                    h.update(v.as_f64().to_bits().to_le_bytes());
                }
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Copies the network into another element type.
    pub fn cast<U: Real>(&self) -> Network<U> {
        let cv = |v: &[T]| -> Vec<U> { v.iter().map(|x| U::of(x.as_f64())).collect() };
        let conv = |c: &Conv2d<T>| Conv2d {
            in_channels: c.in_channels,
            out_channels: c.out_channels,
            groups: c.groups,
            kernel: c.kernel,
            padding: c.padding,
            weight: cv(&c.weight),
        };
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Conv2d(c) => Layer::Conv2d(conv(c)),
                Layer::DepthwiseConv2d(c) => Layer::DepthwiseConv2d(conv(c)),
                Layer::SeparableConv2d {
                    depthwise,
                    pointwise,
                } => Layer::SeparableConv2d {
                    depthwise: conv(depthwise),
                    pointwise: conv(pointwise),
                },
                Layer::BatchNorm(bn) => Layer::BatchNorm(BnState {
                    running_mean: cv(&bn.running_mean),
                    running_var: cv(&bn.running_var),
                    gamma: cv(&bn.gamma),
                    beta: cv(&bn.beta),
                    momentum: U::of(bn.momentum.as_f64()),
                    eps: U::of(bn.eps.as_f64()),
                    mode: bn.mode,
                }),
                Layer::Elu => Layer::Elu,
                Layer::AvgPool2d { kh, kw } => Layer::AvgPool2d { kh: *kh, kw: *kw },
                Layer::Dropout { rate } => Layer::Dropout { rate: *rate },
                Layer::Flatten => Layer::Flatten,
                Layer::Linear(lin) => Layer::Linear(Linear {
                    in_features: lin.in_features,
                    out_features: lin.out_features,
                    weight: cv(&lin.weight),
                    bias: cv(&lin.bias),
                }),
            })
            .collect();
        Network {
            input: self.input,
            layers,
            classes: self.classes,
        }
    }

    /// True when the stack opens with conv → BN → unpadded depthwise conv,
    /// which lets the first BN be folded into cached per-segment data.
    fn stem_foldable(&self) -> bool {
        matches!(
            (&self.layers.first(), &self.layers.get(1), &self.layers.get(2)),
            (Some(Layer::Conv2d(_)), Some(Layer::BatchNorm(_)), Some(Layer::DepthwiseConv2d(dw)))
                if dw.in_per_group() == 1 && dw.padding == Padding::NONE
        )
    }

    fn stem_parts(&self) -> (&Conv2d<T>, &BnState<T>, &Conv2d<T>) {
        match (&self.layers[0], &self.layers[STEM_BN], &self.layers[2]) {
            (Layer::Conv2d(c), Layer::BatchNorm(bn), Layer::DepthwiseConv2d(dw)) => (c, bn, dw),
            _ => unreachable!("checked by stem_foldable"),
        }
    }

    /// Runs the part of the network that adaptation can never change and
    /// keeps whatever the remaining layers need.
    ///
    /// For the conv → BN → depthwise opening, the depthwise conv of the raw
    /// temporal-conv output is stored together with per-channel moments;
    /// the BN affine map is linear, so it commutes with the unpadded conv.
    pub fn encode(&self, x: &Tensor4<T>) -> Result<Encoded<T>, NnError> {
        self.check_input(x, 0)?;
        if !self.stem_foldable() {
            let k = self.frozen_prefix_len();
            return Ok(Encoded {
                data: self.forward_prefix(x, k)?,
                moments: None,
            });
        }
        let (conv, _, dw) = self.stem_parts();
        let a = conv.forward(x)?;
        let d = a.dims();
        let plane = d.plane();
        let mut mean = Vec::with_capacity(d.n * d.c);
        let mut var = Vec::with_capacity(d.n * d.c);
        for i in 0..d.n * d.c {
            let xs = &a.data()[i * plane..(i + 1) * plane];
            let m = xs.iter().copied().sum::<T>() / T::of(plane as f64);
            let v = xs.iter().map(|&v| (v - m) * (v - m)).sum::<T>() / T::of(plane as f64);
            mean.push(m);
            var.push(v);
        }
        Ok(Encoded {
            data: dw.forward(&a)?,
            moments: Some((mean, var)),
        })
    }

    /// Layer index at which encoded data enters the network.
    fn encoded_start(&self, e: &Encoded<T>) -> usize {
        if e.moments.is_some() {
            STEM_BN + 2
        } else {
            self.frozen_prefix_len()
        }
    }

    /// Forward pass from encoded data. Pure.
    pub fn forward_encoded_eval(&self, e: &Encoded<T>) -> Result<ForwardResult<T>, NnError> {
        let (res, updates) = self.run_encoded(e, Pass::Eval)?;
        debug_assert!(updates.is_empty());
        Ok(res)
    }

    /// Forward pass from encoded data, committing running-statistic updates.
    pub fn forward_encoded(&mut self, e: &Encoded<T>, pass: Pass) -> Result<ForwardResult<T>, NnError> {
        let (res, updates) = self.run_encoded(e, pass)?;
        for (idx, (mean, var)) in updates {
            if let Layer::BatchNorm(bn) = &mut self.layers[idx] {
                bn.running_mean = mean;
                bn.running_var = var;
            }
        }
        Ok(res)
    }

    #[allow(clippy::type_complexity)]
    fn run_encoded(
        &self,
        e: &Encoded<T>,
        pass: Pass,
    ) -> Result<(ForwardResult<T>, Vec<(usize, (Vec<T>, Vec<T>))>), NnError> {
        let start = self.encoded_start(e);
        let Some((item_mean, item_var)) = &e.moments else {
            return self.run(start, &e.data, pass, None);
        };
        let (_, bn, dw) = self.stem_parts();
        let c1 = bn.channels();
        let n = e.batch();
        if item_mean.len() != n * c1 {
            return Err(NnError::Shape(format!(
                "encoded moments cover {} channels, first batch norm has {c1}",
                item_mean.len() / n.max(1)
            )));
        }
        self.check_input(&e.data, start)?;
        let (batch_mean, batch_var) = if uses_batch_stats(bn, pass) {
            // Pooled moments of equally sized groups.
            let nn = T::of(n as f64);
            let mut bm = vec![T::zero(); c1];
            let mut bv = vec![T::zero(); c1];
            for c in 0..c1 {
                bm[c] = (0..n).map(|i| item_mean[i * c1 + c]).sum::<T>() / nn;
                bv[c] = (0..n)
                    .map(|i| {
                        let dm = item_mean[i * c1 + c] - bm[c];
                        item_var[i * c1 + c] + dm * dm
                    })
                    .sum::<T>()
                    / nn;
            }
            (bm, bv)
        } else {
            (vec![T::zero(); c1], vec![T::zero(); c1])
        };
        let ResolvedStats {
            mean,
            var,
            running_update,
            ..
        } = resolve_stats(bn, pass, &batch_mean, batch_var);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + bn.eps).sqrt()).collect();

        let d = e.data.dims();
        let plane = d.plane();
        let opg = dw.out_per_group();
        let taps = dw.kernel.0 * dw.kernel.1;
        let mut y = Tensor4::zeros(d);
        {
            let yd = y.data_mut();
            for o in 0..d.c {
                let g = o / opg;
                let wsum = dw.weight[o * taps..(o + 1) * taps].iter().copied().sum::<T>();
                let scale = bn.gamma[g] * inv_std[g];
                let shift = (bn.beta[g] - bn.gamma[g] * mean[g] * inv_std[g]) * wsum;
                for i in 0..d.n {
                    let base = (i * d.c + o) * plane;
                    for (out, &u) in yd[base..base + plane].iter_mut().zip(&e.data.data()[base..base + plane]) {
                        *out = scale * u + shift;
                    }
                }
            }
        }
        let (mut res, mut updates) = self.run(start, &y, pass, None)?;
        if let Some(u) = running_update {
            updates.insert(0, (STEM_BN, u));
        }
        res.cache.stem = Some(StemCache {
            u: e.data.clone(),
            mean,
            inv_std,
        });
        Ok((res, updates))
    }

    /// `(dγ, dβ)` of the folded BN from the gradient at the depthwise output.
    fn stem_affine_grads(&self, stem: &StemCache<T>, dy: &Tensor4<T>) -> (Vec<T>, Vec<T>) {
        let (_, bn, dw) = self.stem_parts();
        let c1 = bn.channels();
        let d = dy.dims();
        let plane = d.plane();
        let opg = dw.out_per_group();
        let taps = dw.kernel.0 * dw.kernel.1;
        let mut a = vec![T::zero(); c1];
        let mut b = vec![T::zero(); c1];
        for o in 0..d.c {
            let g = o / opg;
            let wsum = dw.weight[o * taps..(o + 1) * taps].iter().copied().sum::<T>();
            for i in 0..d.n {
                let base = (i * d.c + o) * plane;
                let gs = &dy.data()[base..base + plane];
                let us = &stem.u.data()[base..base + plane];
                let mut su = T::zero();
                let mut sg = T::zero();
                for (&gv, &uv) in gs.iter().zip(us) {
                    su += gv * uv;
                    sg += gv;
                }
                a[g] += su;
                b[g] += sg * wsum;
            }
        }
        let dgamma = (0..c1)
            .map(|g| stem.inv_std[g] * (a[g] - stem.mean[g] * b[g]))
            .collect();
        (dgamma, b)
    }
}

const STEM_BN: usize = 1;

/// Per-segment output of [`Network::encode`], stackable along the batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoded<T> {
    data: Tensor4<T>,
    /// Per item and channel: mean and population variance of the first
    /// BN's input.
    moments: Option<(Vec<T>, Vec<T>)>,
}

impl<T: Real> Encoded<T> {
    pub fn batch(&self) -> usize {
        self.data.dims().n
    }

    pub fn stack<'a, I>(parts: I) -> Result<Self, NnError>
    where
        I: IntoIterator<Item = &'a Self>,
        T: 'a,
    {
        let parts: Vec<&Self> = parts.into_iter().collect();
        let data = Tensor4::stack(parts.iter().map(|p| &p.data))?;
        let moments = match parts.iter().map(|p| p.moments.as_ref()).collect::<Option<Vec<_>>>() {
            Some(ms) => Some((
                ms.iter().flat_map(|m| m.0.iter().copied()).collect(),
                ms.iter().flat_map(|m| m.1.iter().copied()).collect(),
            )),
            None if parts.iter().all(|p| p.moments.is_none()) => None,
            None => return Err(NnError::Shape("cannot mix folded and plain encodings".into())),
        };
        Ok(Self { data, moments })
    }
}
