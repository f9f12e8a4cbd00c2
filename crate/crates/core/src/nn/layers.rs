use super::{BnState, Conv2d, Dims, NnError, Real, Tensor4};

/// Fully connected classifier head, `weight` is `out_features × in_features`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Linear<T> {
    pub fn new(in_features: usize, out_features: usize) -> Self {
        Self {
            in_features,
            out_features,
            weight: vec![T::zero(); in_features * out_features],
            bias: vec![T::zero(); out_features],
        }
    }

    pub fn row(&self, k: usize) -> &[T] {
        &self.weight[k * self.in_features..(k + 1) * self.in_features]
    }

    pub fn weight_matrix(&self) -> ndarray::ArrayView2<'_, T> {
        ndarray::ArrayView2::from_shape((self.out_features, self.in_features), &self.weight)
            .expect("weight length matches shape")
    }
}

/// One element of the fixed layer stack.
#[derive(Clone, Debug, PartialEq)]
pub enum Layer<T> {
    /// Temporal convolution over the time axis.
    Conv2d(Conv2d<T>),
    /// Spatial filter per input channel (`groups == in_channels`).
    DepthwiseConv2d(Conv2d<T>),
    /// Depthwise temporal filter followed by a 1×1 channel mix.
    SeparableConv2d {
        depthwise: Conv2d<T>,
        pointwise: Conv2d<T>,
    },
    BatchNorm(BnState<T>),
    Elu,
    AvgPool2d {
        kh: usize,
        kw: usize,
    },
    Dropout {
        rate: f64,
    },
    Flatten,
    Linear(Linear<T>),
}

impl<T: Real> Layer<T> {
    pub fn name(&self) -> &'static str {
        match self {
            Layer::Conv2d(_) => "conv2d",
            Layer::DepthwiseConv2d(_) => "depthwise_conv2d",
            Layer::SeparableConv2d { .. } => "separable_conv2d",
            Layer::BatchNorm(_) => "batch_norm",
            Layer::Elu => "elu",
            Layer::AvgPool2d { .. } => "avg_pool2d",
            Layer::Dropout { .. } => "dropout",
            Layer::Flatten => "flatten",
            Layer::Linear(_) => "linear",
        }
    }

    pub fn output_dims(&self, input: Dims) -> Result<Dims, NnError> {
        match self {
            Layer::Conv2d(c) | Layer::DepthwiseConv2d(c) => c.output_dims(input),
            Layer::SeparableConv2d {
                depthwise,
                pointwise,
            } => pointwise.output_dims(depthwise.output_dims(input)?),
            Layer::BatchNorm(bn) => {
                if bn.channels() != input.c {
                    return Err(NnError::Shape(format!(
                        "batch norm over {} channels after {input}",
                        bn.channels()
                    )));
                }
                Ok(input)
            }
            Layer::Elu | Layer::Dropout { .. } => Ok(input),
            Layer::AvgPool2d { kh, kw } => {
                if *kh == 0 || *kw == 0 || input.h < *kh || input.w < *kw {
                    return Err(NnError::Shape(format!(
                        "pool {kh}x{kw} does not fit {input}"
                    )));
                }
                Ok(Dims::new(input.n, input.c, input.h / kh, input.w / kw))
            }
            Layer::Flatten => Ok(Dims::new(input.n, input.item_len(), 1, 1)),
            Layer::Linear(l) => {
                if input.h != 1 || input.w != 1 || input.c != l.in_features {
                    return Err(NnError::Shape(format!(
                        "linear expects {} flattened features, got {input}",
                        l.in_features
                    )));
                }
                Ok(Dims::new(input.n, l.out_features, 1, 1))
            }
        }
    }

    /// Trainable tensors, in a fixed per-kind order.
    pub fn params(&self) -> Vec<&[T]> {
        match self {
            Layer::Conv2d(c) | Layer::DepthwiseConv2d(c) => vec![&c.weight],
            Layer::SeparableConv2d {
                depthwise,
                pointwise,
            } => vec![&depthwise.weight, &pointwise.weight],
            Layer::BatchNorm(bn) => vec![&bn.gamma, &bn.beta],
            Layer::Linear(l) => vec![&l.weight, &l.bias],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<T>> {
        match self {
            Layer::Conv2d(c) | Layer::DepthwiseConv2d(c) => vec![&mut c.weight],
            Layer::SeparableConv2d {
                depthwise,
                pointwise,
            } => vec![&mut depthwise.weight, &mut pointwise.weight],
            Layer::BatchNorm(bn) => vec![&mut bn.gamma, &mut bn.beta],
            Layer::Linear(l) => vec![&mut l.weight, &mut l.bias],
            _ => Vec::new(),
        }
    }
}

pub(crate) fn elu_forward<T: Real>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(|v| if v > T::zero() { v } else { v.exp_m1() })
}

/// Uses the ELU output: for `y <= 0` the slope is `y + 1`.
pub(crate) fn elu_backward<T: Real>(y: &Tensor4<T>, dy: &Tensor4<T>) -> Tensor4<T> {
    let data = y
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&o, &g)| if o > T::zero() { g } else { g * (o + T::one()) })
        .collect();
    Tensor4::from_raw(y.dims(), data)
}

pub(crate) fn avg_pool_forward<T: Real>(x: &Tensor4<T>, kh: usize, kw: usize) -> Tensor4<T> {
    let d = x.dims();
    let od = Dims::new(d.n, d.c, d.h / kh, d.w / kw);
    let scale = T::one() / T::of((kh * kw) as f64);
    let mut out = Tensor4::zeros(od);
    for n in 0..d.n {
        for c in 0..d.c {
            for oh in 0..od.h {
                for ow in 0..od.w {
                    let mut s = T::zero();
                    for i in 0..kh {
                        let base = x.index(n, c, oh * kh + i, ow * kw);
                        s += x.data()[base..base + kw].iter().copied().sum::<T>();
                    }
                    let idx = out.index(n, c, oh, ow);
                    out.data_mut()[idx] = s * scale;
                }
            }
        }
    }
    out
}

pub(crate) fn avg_pool_backward<T: Real>(
    in_dims: Dims,
    dy: &Tensor4<T>,
    kh: usize,
    kw: usize,
) -> Tensor4<T> {
    let od = dy.dims();
    let scale = T::one() / T::of((kh * kw) as f64);
    let mut dx = Tensor4::zeros(in_dims);
    for n in 0..od.n {
        for c in 0..od.c {
            for oh in 0..od.h {
                for ow in 0..od.w {
                    let g = dy.get(n, c, oh, ow) * scale;
                    for i in 0..kh {
                        let base = dx.index(n, c, oh * kh + i, ow * kw);
                        for v in &mut dx.data_mut()[base..base + kw] {
                            *v = g;
                        }
                    }
                }
            }
        }
    }
    dx
}

pub(crate) fn linear_forward<T: Real>(l: &Linear<T>, x: &Tensor4<T>) -> Tensor4<T> {
    let n = x.dims().n;
    let mut out = Tensor4::zeros(Dims::new(n, l.out_features, 1, 1));
    for i in 0..n {
        let xi = x.item(i);
        for k in 0..l.out_features {
            let dot: T = l.row(k).iter().zip(xi).map(|(&w, &v)| w * v).sum();
            out.data_mut()[i * l.out_features + k] = dot + l.bias[k];
        }
    }
    out
}

/// `(dW, db, dx)` for the classifier head.
pub(crate) fn linear_backward<T: Real>(
    l: &Linear<T>,
    x: &Tensor4<T>,
    dy: &Tensor4<T>,
    want_input: bool,
) -> (Vec<T>, Vec<T>, Option<Tensor4<T>>) {
    let n = x.dims().n;
    let mut dw = vec![T::zero(); l.weight.len()];
    let mut db = vec![T::zero(); l.out_features];
    let mut dx = want_input.then(|| Tensor4::zeros(x.dims()));
    for i in 0..n {
        let xi = x.item(i);
        for k in 0..l.out_features {
            let g = dy.data()[i * l.out_features + k];
            db[k] += g;
            let row = &mut dw[k * l.in_features..(k + 1) * l.in_features];
            for (w, &v) in row.iter_mut().zip(xi) {
                *w += g * v;
            }
            if let Some(dx) = dx.as_mut() {
                let len = l.in_features;
                let dst = &mut dx.data_mut()[i * len..(i + 1) * len];
                for (d, &w) in dst.iter_mut().zip(l.row(k)) {
                    *d += g * w;
                }
            }
        }
    }
    (dw, db, dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pooling_drops_remainder_columns() {
        let x = Tensor4::from_vec(Dims::new(1, 1, 1, 5), vec![1.0f64, 3.0, 5.0, 7.0, 100.0]).unwrap();
        let y = avg_pool_forward(&x, 1, 2);
        assert_eq!(y.data(), &[2.0, 6.0]);
        let dx = avg_pool_backward(x.dims(), &y, 1, 2);
        assert_eq!(dx.data(), &[1.0, 1.0, 3.0, 3.0, 0.0]);
    }

    #[test]
    fn elu_slope_uses_output() {
        let x = Tensor4::from_vec(Dims::new(1, 1, 1, 3), vec![-1.0f64, 0.0, 2.0]).unwrap();
        let y = elu_forward(&x);
        let g = elu_backward(&y, &Tensor4::from_vec(x.dims(), vec![1.0; 3]).unwrap());
        assert!((g.data()[0] - (-1.0f64).exp()).abs() < 1e-15);
        assert_eq!(g.data()[1], 1.0);
        assert_eq!(g.data()[2], 1.0);
    }
}
