//! Stride-1 grouped 2-D convolution without bias.
//!
//! The temporal, depthwise and separable layers of the network are all
//! expressed through this one kernel; they differ only in group count,
//! kernel extent and padding. Inner loops run over contiguous output
//! columns so they vectorize.

use serde::{Deserialize, Serialize};

use super::{Dims, NnError, Real, Tensor4};

/// Zero padding on each border of the spatial plane.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Padding {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Padding {
    pub const NONE: Padding = Padding {
        top: 0,
        bottom: 0,
        left: 0,
        right: 0,
    };

    /// "Same" output size for a `kh × kw` kernel; an odd remainder goes to the
    /// bottom/right border.
    pub fn same(kh: usize, kw: usize) -> Self {
        Self {
            top: (kh - 1) / 2,
            bottom: kh - 1 - (kh - 1) / 2,
            left: (kw - 1) / 2,
            right: kw - 1 - (kw - 1) / 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub groups: usize,
    pub kernel: (usize, usize),
    pub padding: Padding,
    /// `out_channels × (in_channels / groups) × kh × kw`.
    pub weight: Vec<T>,
}

impl<T: Real> Conv2d<T> {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        groups: usize,
        kernel: (usize, usize),
        padding: Padding,
    ) -> Result<Self, NnError> {
        if groups == 0 || in_channels % groups != 0 || out_channels % groups != 0 {
            return Err(NnError::Config(format!(
                "conv {in_channels}->{out_channels} is not divisible into {groups} groups"
            )));
        }
        if kernel.0 == 0 || kernel.1 == 0 {
            return Err(NnError::Config("conv kernel must be non-empty".into()));
        }
        let len = out_channels * (in_channels / groups) * kernel.0 * kernel.1;
        Ok(Self {
            in_channels,
            out_channels,
            groups,
            kernel,
            padding,
            weight: vec![T::zero(); len],
        })
    }

    pub fn in_per_group(&self) -> usize {
        self.in_channels / self.groups
    }

    pub fn out_per_group(&self) -> usize {
        self.out_channels / self.groups
    }

    /// Fan-in and fan-out used for Glorot scaling.
    pub fn fans(&self) -> (usize, usize) {
        let k = self.kernel.0 * self.kernel.1;
        (self.in_per_group() * k, self.out_per_group() * k)
    }

    pub fn output_dims(&self, input: Dims) -> Result<Dims, NnError> {
        if input.c != self.in_channels {
            return Err(NnError::Shape(format!(
                "conv expects {} input channels, got {input}",
                self.in_channels
            )));
        }
        let ph = input.h + self.padding.top + self.padding.bottom;
        let pw = input.w + self.padding.left + self.padding.right;
        if ph < self.kernel.0 || pw < self.kernel.1 {
            return Err(NnError::Shape(format!(
                "conv kernel {:?} larger than padded input {input}",
                self.kernel
            )));
        }
        Ok(Dims::new(
            input.n,
            self.out_channels,
            ph - self.kernel.0 + 1,
            pw - self.kernel.1 + 1,
        ))
    }

    #[inline]
    fn weight_index(&self, oc: usize, icl: usize, ki: usize, kj: usize) -> usize {
        ((oc * self.in_per_group() + icl) * self.kernel.0 + ki) * self.kernel.1 + kj
    }

    /// Column range `[lo, hi)` of the output row touched by tap `kj`, and the
    /// matching input column offset.
    #[inline]
    fn col_span(&self, kj: usize, in_w: usize, out_w: usize) -> (usize, usize, usize) {
        let lo = self.padding.left.saturating_sub(kj);
        let hi = (in_w + self.padding.left).saturating_sub(kj).min(out_w);
        let in_lo = lo + kj - self.padding.left;
        (lo, hi.max(lo), in_lo)
    }

    pub fn forward(&self, x: &Tensor4<T>) -> Result<Tensor4<T>, NnError> {
        let id = x.dims();
        let od = self.output_dims(id)?;
        let mut out = Tensor4::zeros(od);
        let (kh, kw) = self.kernel;
        let ipg = self.in_per_group();
        let opg = self.out_per_group();
        let xd = x.data();
        let od_plane = od.plane();
        let id_plane = id.plane();
        let out_data = out.data_mut();
        for n in 0..id.n {
            for oc in 0..self.out_channels {
                let g = oc / opg;
                let obase = (n * od.c + oc) * od_plane;
                for icl in 0..ipg {
                    let ic = g * ipg + icl;
                    let ibase = (n * id.c + ic) * id_plane;
                    for ki in 0..kh {
                        for oh in 0..od.h {
                            let Some(ih) = (oh + ki).checked_sub(self.padding.top) else {
                                continue;
                            };
                            if ih >= id.h {
                                continue;
                            }
                            let orow = &mut out_data[obase + oh * od.w..obase + (oh + 1) * od.w];
                            let irow = &xd[ibase + ih * id.w..ibase + (ih + 1) * id.w];
                            for kj in 0..kw {
                                let wt = self.weight[self.weight_index(oc, icl, ki, kj)];
                                let (lo, hi, in_lo) = self.col_span(kj, id.w, od.w);
                                let src = &irow[in_lo..in_lo + (hi - lo)];
                                for (o, &v) in orow[lo..hi].iter_mut().zip(src) {
                                    *o += wt * v;
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Weight gradient and (optionally) input gradient for upstream gradient `dy`.
    pub fn backward(
        &self,
        x: &Tensor4<T>,
        dy: &Tensor4<T>,
        want_weight: bool,
        want_input: bool,
    ) -> (Option<Vec<T>>, Option<Tensor4<T>>) {
        let id = x.dims();
        let od = dy.dims();
        let (kh, kw) = self.kernel;
        let ipg = self.in_per_group();
        let opg = self.out_per_group();
        let mut dw = want_weight.then(|| vec![T::zero(); self.weight.len()]);
        let mut dx = want_input.then(|| Tensor4::zeros(id));
        let xd = x.data();
        let dyd = dy.data();
        for n in 0..id.n {
            for oc in 0..self.out_channels {
                let g = oc / opg;
                let obase = (n * od.c + oc) * od.plane();
                for icl in 0..ipg {
                    let ic = g * ipg + icl;
                    let ibase = (n * id.c + ic) * id.plane();
                    for ki in 0..kh {
                        for oh in 0..od.h {
                            let Some(ih) = (oh + ki).checked_sub(self.padding.top) else {
                                continue;
                            };
                            if ih >= id.h {
                                continue;
                            }
                            let grow = &dyd[obase + oh * od.w..obase + (oh + 1) * od.w];
                            let irange = ibase + ih * id.w..ibase + (ih + 1) * id.w;
                            for kj in 0..kw {
                                let widx = self.weight_index(oc, icl, ki, kj);
                                let (lo, hi, in_lo) = self.col_span(kj, id.w, od.w);
                                let g_span = &grow[lo..hi];
                                if let Some(dw) = dw.as_mut() {
                                    let irow = &xd[irange.clone()];
                                    let src = &irow[in_lo..in_lo + (hi - lo)];
                                    let mut acc = T::zero();
                                    for (&a, &b) in g_span.iter().zip(src) {
                                        acc += a * b;
                                    }
                                    dw[widx] += acc;
                                }
                                if let Some(dx) = dx.as_mut() {
                                    let wt = self.weight[widx];
                                    let drow = &mut dx.data_mut()[irange.clone()];
                                    let dst = &mut drow[in_lo..in_lo + (hi - lo)];
                                    for (d, &gv) in dst.iter_mut().zip(g_span) {
                                        *d += wt * gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        (dw, dx)
    }
}
