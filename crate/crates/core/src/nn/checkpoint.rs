//! `SAWT` weight checkpoints.
//!
//! Little-endian layout:
//!
//! ```text
//! "SAWT" | u16 version | u32 in_c | u32 in_h | u32 in_w | u32 layer_count
//! per layer: u8 tag, then
//!   1 conv2d / 2 depthwise : conv record
//!   3 separable            : conv record (depthwise), conv record (pointwise)
//!   4 batch norm           : u32 channels, u8 mode, f32 momentum, f32 eps,
//!                            tensor γ, tensor β, tensor mean, tensor var
//!   5 elu | 8 flatten      : nothing
//!   6 avg pool             : u32 kh, u32 kw
//!   7 dropout              : f32 rate
//!   9 linear               : u32 in, u32 out, tensor weight, tensor bias
//! conv record: u32 in, out, groups, kh, kw, pad top, bottom, left, right; tensor weight
//! tensor: u32 len, len × f32
//! ```

use std::fs;
use std::path::Path;

use thiserror::Error;

use super::{BnMode, BnState, Conv2d, Dims, Layer, Linear, Network, NnError, Padding, Real};

pub const MAGIC: &[u8; 4] = b"SAWT";
pub const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("not a weight checkpoint (bad magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    Version(u16),
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("unknown layer tag {0}")]
    UnknownTag(u8),
    #[error("invalid checkpoint contents: {0}")]
    Invalid(#[from] NnError),
    #[error("{0} trailing bytes after the last layer")]
    Trailing(usize),
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn tensor<T: Real>(&mut self, t: &[T]) {
        self.u32(t.len());
        for v in t {
            self.f32(v.as_f32());
        }
    }
    fn conv<T: Real>(&mut self, c: &Conv2d<T>) {
        for v in [
            c.in_channels,
            c.out_channels,
            c.groups,
            c.kernel.0,
            c.kernel.1,
            c.padding.top,
            c.padding.bottom,
            c.padding.left,
            c.padding.right,
        ] {
            self.u32(v);
        }
        self.tensor(&c.weight);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], CheckpointError> {
        if self.pos + n > self.buf.len() {
            return Err(CheckpointError::Truncated(self.buf.len()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<usize, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    fn f32(&mut self) -> Result<f32, CheckpointError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn tensor<T: Real>(&mut self, expected: usize) -> Result<Vec<T>, CheckpointError> {
        let len = self.u32()?;
        if len != expected {
            return Err(NnError::Shape(format!("tensor of {len} values, expected {expected}")).into());
        }
        let raw = self.take(len * 4)?;
        let out: Vec<T> = raw
            .chunks_exact(4)
            .map(|c| T::of(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(NnError::NonFinite("checkpoint tensor".into()).into());
        }
        Ok(out)
    }
    fn conv<T: Real>(&mut self) -> Result<Conv2d<T>, CheckpointError> {
        let mut f = [0usize; 9];
        for v in &mut f {
            *v = self.u32()?;
        }
        let padding = Padding {
            top: f[5],
            bottom: f[6],
            left: f[7],
            right: f[8],
        };
        let mut c = Conv2d::new(f[0], f[1], f[2], (f[3], f[4]), padding)?;
        c.weight = self.tensor(c.weight.len())?;
        Ok(c)
    }
}

pub fn encode<T: Real>(net: &Network<T>) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u16(VERSION);
    let d = net.input_dims();
    w.u32(d.c);
    w.u32(d.h);
    w.u32(d.w);
    w.u32(net.layers().len());
    for layer in net.layers() {
        match layer {
            Layer::Conv2d(c) => {
                w.u8(1);
                w.conv(c);
            }
            Layer::DepthwiseConv2d(c) => {
                w.u8(2);
                w.conv(c);
            }
            Layer::SeparableConv2d {
                depthwise,
                pointwise,
            } => {
                w.u8(3);
                w.conv(depthwise);
                w.conv(pointwise);
            }
            Layer::BatchNorm(bn) => {
                w.u8(4);
                w.u32(bn.channels());
                w.u8(bn.mode.tag());
                w.f32(bn.momentum.as_f32());
                w.f32(bn.eps.as_f32());
                w.tensor(&bn.gamma);
                w.tensor(&bn.beta);
                w.tensor(&bn.running_mean);
                w.tensor(&bn.running_var);
            }
            Layer::Elu => w.u8(5),
            Layer::AvgPool2d { kh, kw } => {
                w.u8(6);
                w.u32(*kh);
                w.u32(*kw);
            }
            Layer::Dropout { rate } => {
                w.u8(7);
                w.f32(*rate as f32);
            }
            Layer::Flatten => w.u8(8),
            Layer::Linear(l) => {
                w.u8(9);
                w.u32(l.in_features);
                w.u32(l.out_features);
                w.tensor(&l.weight);
                w.tensor(&l.bias);
            }
        }
    }
    w.0
}

pub fn decode<T: Real>(buf: &[u8]) -> Result<Network<T>, CheckpointError> {
    let mut r = Reader { buf, pos: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let input = Dims::new(1, r.u32()?, r.u32()?, r.u32()?);
    let count = r.u32()?;
    let mut layers = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let tag = r.u8()?;
        let layer = match tag {
            1 => Layer::Conv2d(r.conv()?),
            2 => Layer::DepthwiseConv2d(r.conv()?),
            3 => Layer::SeparableConv2d {
                depthwise: r.conv()?,
                pointwise: r.conv()?,
            },
            4 => {
                let ch = r.u32()?;
                let mode_tag = r.u8()?;
                let mode = BnMode::from_tag(mode_tag).ok_or_else(|| {
                    NnError::Config(format!("unknown batch norm mode {mode_tag}"))
                })?;
                let momentum = T::of(r.f32()? as f64);
                let eps = T::of(r.f32()? as f64);
                let bn = BnState {
                    gamma: r.tensor(ch)?,
                    beta: r.tensor(ch)?,
                    running_mean: r.tensor(ch)?,
                    running_var: r.tensor(ch)?,
                    momentum,
                    eps,
                    mode,
                };
                if bn.running_var.iter().any(|&v| v < T::zero()) {
                    return Err(NnError::Config("negative running variance".into()).into());
                }
                Layer::BatchNorm(bn)
            }
            5 => Layer::Elu,
            6 => Layer::AvgPool2d {
                kh: r.u32()?,
                kw: r.u32()?,
            },
            7 => Layer::Dropout {
                rate: r.f32()? as f64,
            },
            8 => Layer::Flatten,
            9 => {
                let mut l = Linear::new(r.u32()?, r.u32()?);
                l.weight = r.tensor(l.weight.len())?;
                l.bias = r.tensor(l.bias.len())?;
                Layer::Linear(l)
            }
            t => return Err(CheckpointError::UnknownTag(t)),
        };
        layers.push(layer);
    }
    if r.pos != buf.len() {
        return Err(CheckpointError::Trailing(buf.len() - r.pos));
    }
    Ok(Network::new(input, layers)?)
}

pub fn save<T: Real>(net: &Network<T>, path: &Path) -> Result<(), CheckpointError> {
    fs::write(path, encode(net)).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load<T: Real>(path: &Path) -> Result<Network<T>, CheckpointError> {
    let buf = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::EegNetConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net() -> Network<f32> {
        let cfg = EegNetConfig {
            channels: 4,
            samples: 64,
            temporal_kernel: 8,
            separable_kernel: 4,
            ..EegNetConfig::default()
        };
        let mut n = Network::eegnet(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for (i, bn) in n.bn_layers_mut().enumerate() {
            bn.running_mean.iter_mut().for_each(|v| *v = 0.37 * i as f32);
            bn.running_var.iter_mut().for_each(|v| *v = 1.0 + i as f32);
            bn.mode = BnMode::TrackRunning;
        }
        n
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let n = net();
        let bytes = encode(&n);
        let back: Network<f32> = decode(&bytes).unwrap();
        assert_eq!(back, n);
        assert_eq!(encode(&back), bytes);
    }

    #[test]
    fn rejects_bad_magic_version_and_truncation() {
        let mut bytes = encode(&net());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode::<f32>(&bad), Err(CheckpointError::BadMagic(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode::<f32>(&bad), Err(CheckpointError::Version(9))));
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(decode::<f32>(&bytes), Err(CheckpointError::Truncated(_))));
    }
}
