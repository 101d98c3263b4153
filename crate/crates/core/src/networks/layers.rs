use candle_core::{Module, Tensor};

use super::ParamStore;
use crate::conv::conv2d;
use crate::Result;

#[derive(Debug, Clone)]
pub(crate) struct Conv {
    weight: Tensor,
    bias: Tensor,
    padding: usize,
}

impl Conv {
    /// Square `k`x`k` convolution with "same" padding, Kaiming-uniform init.
    pub fn new(ps: &mut ParamStore, name: &str, c_in: usize, c_out: usize, k: usize) -> Result<Self> {
        let bound = 1.0 / ((c_in * k * k) as f64).sqrt();
        Ok(Self {
            weight: ps.uniform(&format!("{name}.weight"), &[c_out, c_in, k, k], bound)?,
            bias: ps.uniform(&format!("{name}.bias"), &[c_out], bound)?,
            padding: k / 2,
        })
    }

    /// Like [`Conv::new`] but with the bias entries in `fixed` set to `value`,
    /// e.g. the forget gate of an LSTM cell.
    pub fn with_fixed_bias(
        ps: &mut ParamStore,
        name: &str,
        (c_in, c_out, k): (usize, usize, usize),
        fixed: std::ops::Range<usize>,
        value: f64,
    ) -> Result<Self> {
        let bound = 1.0 / ((c_in * k * k) as f64).sqrt();
        let weight = ps.uniform(&format!("{name}.weight"), &[c_out, c_in, k, k], bound)?;
        let mut b = ps.draw_uniform(c_out, bound);
        b[fixed].iter_mut().for_each(|v| *v = value);
        Ok(Self {
            weight,
            bias: ps.add(&format!("{name}.bias"), &[c_out], b)?,
            padding: k / 2,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = self.bias.dims()[0];
        Ok(conv2d(x, &self.weight, 1, self.padding)?.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        let bound = 1.0 / (c_in as f64).sqrt();
        Ok(Self {
            weight: ps.uniform(&format!("{name}.weight"), &[c_out, c_in], bound)?,
            bias: ps.uniform(&format!("{name}.bias"), &[c_out], bound)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct GroupNorm(candle_nn::GroupNorm);

/// Largest group count up to 8 that divides `channels`.
pub(crate) fn groups_for(channels: usize) -> usize {
    (1..=8.min(channels)).rev().find(|g| channels % g == 0).unwrap_or(1)
}

impl GroupNorm {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        let w = ps.constant(&format!("{name}.weight"), &[channels], 1.0)?;
        let b = ps.constant(&format!("{name}.bias"), &[channels], 0.0)?;
        Ok(Self(candle_nn::GroupNorm::new(w, b, channels, groups_for(channels), 1e-5)?))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.0.forward(x)?)
    }
}

/// Nearest-neighbour 2x upsampling built from broadcasts so its gradient sums
/// correctly however often the input is reused.
pub(crate) fn upsample2(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h, 1, w, 1))?
        .broadcast_as((b, c, h, 2, w, 2))?
        .reshape((b, c, 2 * h, 2 * w))?)
}

/// Sinusoidal features of `t` in `[0, 1]`, shape `(B, dim)`.
pub(crate) fn sinusoidal(time: &[f64], dim: usize, like: &Tensor) -> Result<Tensor> {
    let half = dim / 2;
    let mut v = Vec::with_capacity(time.len() * dim);
    for &t in time {
        let s = t * 1000.0;
        let freqs = (0..half).map(|k| (-(10000f64.ln()) * k as f64 / half as f64).exp());
        let args: Vec<f64> = freqs.map(|f| s * f).collect();
        v.extend(args.iter().map(|a| a.sin()));
        v.extend(args.iter().map(|a| a.cos()));
        v.extend(std::iter::repeat(0.0).take(dim - 2 * half));
    }
    Ok(Tensor::from_vec(v, (time.len(), dim), like.device())?.to_dtype(like.dtype())?)
}
