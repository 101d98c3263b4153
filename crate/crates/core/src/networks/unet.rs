use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use super::layers::{sinusoidal, upsample2, Conv, GroupNorm, Linear};
use super::{Dropout, ParamStore};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UNetConfig {
    /// Conditioning frames stacked on the channel axis.
    pub in_frames: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub dropout_rate: f64,
    pub time_embedding_dim: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            in_frames: 2,
            base_channels: 32,
            depth: 3,
            dropout_rate: 0.2,
            time_embedding_dim: 32,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::config("unet depth must be at least 1"));
        }
        if self.in_frames != 2 {
            return Err(Error::config("unet takes exactly two conditioning frames"));
        }
        if self.base_channels == 0 || self.time_embedding_dim < 2 {
            return Err(Error::config("unet widths must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config(format!("dropout {} outside [0, 1)", self.dropout_rate)));
        }
        Ok(())
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    fn embed_width(&self) -> usize {
        4 * self.time_embedding_dim
    }
}

#[derive(Debug)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv,
    time: Linear,
    norm2: GroupNorm,
    conv2: Conv,
    skip: Option<Conv>,
}

impl ResBlock {
    fn new(ps: &mut ParamStore, name: &str, c_in: usize, c_out: usize, emb: usize) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(ps, &format!("{name}.norm1"), c_in)?,
            conv1: Conv::new(ps, &format!("{name}.conv1"), c_in, c_out, 3)?,
            time: Linear::new(ps, &format!("{name}.time"), emb, c_out)?,
            norm2: GroupNorm::new(ps, &format!("{name}.norm2"), c_out)?,
            conv2: Conv::new(ps, &format!("{name}.conv2"), c_out, c_out, 3)?,
            skip: if c_in == c_out {
                None
            } else {
                Some(Conv::new(ps, &format!("{name}.skip"), c_in, c_out, 1)?)
            },
        })
    }

    fn forward(&self, x: &Tensor, emb: &Tensor, rate: f64, dropout: &mut Dropout) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        let t = self.time.forward(emb)?;
        let (b, c) = t.dims2()?;
        let h = h.broadcast_add(&t.reshape((b, c, 1, 1))?)?;
        let h = self.norm2.forward(&h)?.silu()?;
        let h = self.conv2.forward(&dropout.apply(&h, rate)?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((h + skip)?)
    }
}

/// Time-conditioned U-Net mapping two frames and a time in `[0, 1]` to one frame in
/// `(0, 1)`.
#[derive(Debug)]
pub struct UNet {
    cfg: UNetConfig,
    store: ParamStore,
    time1: Linear,
    time2: Linear,
    inc: Conv,
    down: Vec<ResBlock>,
    mid: ResBlock,
    up: Vec<ResBlock>,
    out_norm: GroupNorm,
    out: Conv,
}

impl UNet {
    pub fn new(cfg: UNetConfig, seed: u64, dtype: DType) -> Result<Self> {
        Self::build(cfg, ParamStore::new(seed, dtype))
    }

    /// Parameters are not tracked for gradients; used for a frozen interpolator.
    pub fn new_frozen(cfg: UNetConfig, seed: u64, dtype: DType) -> Result<Self> {
        Self::build(cfg, ParamStore::new(seed, dtype).frozen())
    }

    fn build(cfg: UNetConfig, mut ps: ParamStore) -> Result<Self> {
        cfg.validate()?;
        let emb = cfg.embed_width();
        let time1 = Linear::new(&mut ps, "time.lin1", cfg.time_embedding_dim, emb)?;
        let time2 = Linear::new(&mut ps, "time.lin2", emb, emb)?;
        let inc = Conv::new(&mut ps, "inc", cfg.in_frames, cfg.channels(0), 3)?;
        let mut down = Vec::with_capacity(cfg.depth);
        for d in 0..cfg.depth {
            let c_in = cfg.channels(d.saturating_sub(1));
            down.push(ResBlock::new(&mut ps, &format!("down{d}"), c_in, cfg.channels(d), emb)?);
        }
        let mid = ResBlock::new(
            &mut ps,
            "mid",
            cfg.channels(cfg.depth - 1),
            cfg.channels(cfg.depth),
            emb,
        )?;
        let mut up = Vec::with_capacity(cfg.depth);
        for d in (0..cfg.depth).rev() {
            let c_in = cfg.channels(d + 1) + cfg.channels(d);
            up.push(ResBlock::new(&mut ps, &format!("up{d}"), c_in, cfg.channels(d), emb)?);
        }
        let out_norm = GroupNorm::new(&mut ps, "out.norm", cfg.channels(0))?;
        let out = Conv::new(&mut ps, "out.conv", cfg.channels(0), 1, 1)?;
        Ok(Self {
            cfg,
            store: ps,
            time1,
            time2,
            inc,
            down,
            mid,
            up,
            out_norm,
            out,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dropout_rate(&self) -> f64 {
        self.cfg.dropout_rate
    }

    /// `x0`, `cond`: `(B, 1, H, W)`; `time`: one value per batch row.
    pub fn forward(&self, x0: &Tensor, cond: &Tensor, time: &[f64], dropout: &mut Dropout) -> Result<Tensor> {
        let (b, c, h, w) = x0.dims4()?;
        if cond.dims() != x0.dims() || c != 1 {
            return Err(Error::ShapeMismatch {
                expected: x0.dims().to_vec(),
                actual: cond.dims().to_vec(),
            });
        }
        let m = 1usize << self.cfg.depth;
        if h % m != 0 || w % m != 0 {
            return Err(Error::config(format!(
                "spatial size {h}x{w} not divisible by {m}"
            )));
        }
        if time.len() != b {
            return Err(Error::ShapeMismatch {
                expected: vec![b],
                actual: vec![time.len()],
            });
        }
        if let Some(&t) = time.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::OutOfUnitRange { index: 0, value: t });
        }
        let rate = self.cfg.dropout_rate;
        let x0 = x0.to_dtype(self.store.dtype())?;
        let cond = cond.to_dtype(self.store.dtype())?;

        let emb = sinusoidal(time, self.cfg.time_embedding_dim, &x0)?;
        let emb = self.time2.forward(&self.time1.forward(&emb)?.silu()?)?;

        let mut hcur = self.inc.forward(&Tensor::cat(&[&x0, &cond], 1)?)?;
        let mut skips = Vec::with_capacity(self.cfg.depth);
        for block in &self.down {
            hcur = block.forward(&hcur, &emb, rate, dropout)?;
            skips.push(hcur.clone());
            hcur = hcur.avg_pool2d(2)?;
        }
        hcur = self.mid.forward(&hcur, &emb, rate, dropout)?;
        for block in &self.up {
            let skip = skips.pop().expect("one skip per level");
            hcur = Tensor::cat(&[&upsample2(&hcur)?, &skip], 1)?;
            hcur = block.forward(&hcur, &emb, rate, dropout)?;
        }
        let y = self.out.forward(&self.out_norm.forward(&hcur)?.silu()?)?;
        Ok(candle_nn::ops::sigmoid(&y)?)
    }
}
