use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use super::layers::Conv;
use super::{Dropout, ParamStore};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConvLSTMConfig {
    pub layers: usize,
    pub hidden_channels: usize,
    pub kernel: usize,
    /// Element-wise dropout on each cell's output.
    pub pixel_dropout: f64,
    pub context_frames: usize,
}

impl Default for ConvLSTMConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            hidden_channels: 128,
            kernel: 5,
            pixel_dropout: 0.15,
            context_frames: 4,
        }
    }
}

impl ConvLSTMConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden_channels == 0 || self.context_frames == 0 {
            return Err(Error::config("convlstm layers, hidden channels and context must be positive"));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::config(format!("convlstm kernel {} must be odd", self.kernel)));
        }
        if !(0.0..1.0).contains(&self.pixel_dropout) {
            return Err(Error::config(format!("dropout {} outside [0, 1)", self.pixel_dropout)));
        }
        Ok(())
    }
}

/// Stacked convolutional LSTM that reads a context window and emits the next frame.
#[derive(Debug)]
pub struct ConvLstm {
    cfg: ConvLSTMConfig,
    store: ParamStore,
    cells: Vec<Conv>,
    head: Conv,
}

impl ConvLstm {
    pub fn new(cfg: ConvLSTMConfig, seed: u64, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let mut ps = ParamStore::new(seed, dtype);
        let hid = cfg.hidden_channels;
        let mut cells = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let c_in = if l == 0 { 1 } else { hid };
            // gate order: input, forget, output, candidate; forget bias starts at 1
            cells.push(Conv::with_fixed_bias(
                &mut ps,
                &format!("cell{l}"),
                (c_in + hid, 4 * hid, cfg.kernel),
                hid..2 * hid,
                1.0,
            )?);
        }
        let head = Conv::new(&mut ps, "head", hid, 1, 1)?;
        Ok(Self {
            cfg,
            store: ps,
            cells,
            head,
        })
    }

    pub fn config(&self) -> &ConvLSTMConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// `context`: `(B, T, 1, H, W)` with `T = context_frames`. Returns `(B, 1, H, W)`.
    pub fn forward(&self, context: &Tensor, dropout: &mut Dropout) -> Result<Tensor> {
        let (b, t, c, h, w) = context.dims5()?;
        if t != self.cfg.context_frames {
            return Err(Error::InsufficientFrames {
                needed: self.cfg.context_frames,
                available: t,
            });
        }
        if c != 1 {
            return Err(Error::ShapeMismatch {
                expected: vec![b, t, 1, h, w],
                actual: context.dims().to_vec(),
            });
        }
        let context = context.to_dtype(self.store.dtype())?;
        let hid = self.cfg.hidden_channels;
        let zeros = Tensor::zeros((b, hid, h, w), context.dtype(), context.device())?;
        let mut state: Vec<(Tensor, Tensor)> = vec![(zeros.clone(), zeros); self.cfg.layers];
        let mut top = None;
        for step in 0..t {
            let mut x = context.narrow(1, step, 1)?.squeeze(1)?;
            for (cell, (hs, cs)) in self.cells.iter().zip(state.iter_mut()) {
                let gates = cell.forward(&Tensor::cat(&[&x, &*hs], 1)?)?;
                let i = candle_nn::ops::sigmoid(&gates.narrow(1, 0, hid)?)?;
                let f = candle_nn::ops::sigmoid(&gates.narrow(1, hid, hid)?)?;
                let o = candle_nn::ops::sigmoid(&gates.narrow(1, 2 * hid, hid)?)?;
                let g = gates.narrow(1, 3 * hid, hid)?.tanh()?;
                *cs = ((f * &*cs)? + (i * g)?)?;
                *hs = (o * cs.tanh()?)?;
                x = dropout.apply(hs, self.cfg.pixel_dropout)?;
            }
            top = Some(x);
        }
        let top = top.expect("at least one context frame");
        Ok(candle_nn::ops::sigmoid(&self.head.forward(&top)?)?)
    }
}
