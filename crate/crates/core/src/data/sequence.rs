use chrono::{DateTime, Duration, Utc};
use ndarray::{s, Array4, ArrayView3, Axis};

use super::{NormalizationSpec, RainField};
use crate::{Error, Result};

/// Time between consecutive frames.
pub const CADENCE_MINUTES: i64 = 30;

/// Default number of lead steps (4 hours at 30-minute cadence).
pub const DEFAULT_HORIZON: usize = 8;

pub fn cadence() -> Duration {
    Duration::minutes(CADENCE_MINUTES)
}

/// Read access to the frames of one training sample.
///
/// Indices are absolute within the stored window: `0..history` are extra context
/// frames, `history` is the initial condition x0 and `history + k` is lead step `k`.
pub trait FrameSource {
    fn history(&self) -> usize;
    fn horizon(&self) -> usize;
    fn frame(&self, index: usize) -> ArrayView3<'_, f32>;

    fn x0_index(&self) -> usize {
        self.history()
    }

    /// Frame at lead step `k` relative to x0 (`k = 0` is x0 itself).
    fn lead(&self, k: usize) -> ArrayView3<'_, f32> {
        self.frame(self.history() + k)
    }

    fn len(&self) -> usize {
        self.history() + 1 + self.horizon()
    }
}

/// A window of normalized frames: optional leading context, x0, then `horizon` targets.
#[derive(Debug, Clone, PartialEq)]
pub struct RainSequence {
    /// `(S, C, H, W)` in `[0, 1]`.
    pub frames: Array4<f32>,
    pub start_time: DateTime<Utc>,
    pub spec: NormalizationSpec,
    pub history: usize,
}

impl RainSequence {
    pub fn new(
        frames: Array4<f32>,
        start_time: DateTime<Utc>,
        spec: NormalizationSpec,
        history: usize,
    ) -> Result<Self> {
        if frames.len_of(Axis(0)) < history + 2 {
            return Err(Error::InsufficientFrames {
                needed: history + 2,
                available: frames.len_of(Axis(0)),
            });
        }
        if let Some((i, &v)) = frames
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(Error::OutOfUnitRange {
                index: i,
                value: v as f64,
            });
        }
        Ok(Self {
            frames,
            start_time,
            spec,
            history,
        })
    }

    pub fn timestamps(&self) -> Vec<DateTime<Utc>> {
        (0..self.frames.len_of(Axis(0)))
            .map(|i| self.start_time + cadence() * i as i32)
            .collect()
    }

    /// Valid time of x0.
    pub fn issue_time(&self) -> DateTime<Utc> {
        self.start_time + cadence() * self.history as i32
    }

    pub fn spatial_dims(&self) -> (usize, usize, usize) {
        let (_, c, h, w) = self.frames.dim();
        (c, h, w)
    }

    /// The DYffusion view of this window: x0 plus the targets.
    pub fn targets(&self) -> ndarray::ArrayView4<'_, f32> {
        self.frames.slice(s![self.history + 1.., .., .., ..])
    }

    /// The last `n` frames up to and including x0.
    pub fn context(&self, n: usize) -> Result<ndarray::ArrayView4<'_, f32>> {
        if n == 0 || n > self.history + 1 {
            return Err(Error::InsufficientFrames {
                needed: n,
                available: self.history + 1,
            });
        }
        Ok(self
            .frames
            .slice(s![self.history + 1 - n..self.history + 1, .., .., ..]))
    }
}

impl<S: FrameSource + ?Sized> FrameSource for &S {
    fn history(&self) -> usize {
        (**self).history()
    }

    fn horizon(&self) -> usize {
        (**self).horizon()
    }

    fn frame(&self, index: usize) -> ArrayView3<'_, f32> {
        (**self).frame(index)
    }
}

impl FrameSource for RainSequence {
    fn history(&self) -> usize {
        self.history
    }

    fn horizon(&self) -> usize {
        self.frames.len_of(Axis(0)) - 1 - self.history
    }

    fn frame(&self, index: usize) -> ArrayView3<'_, f32> {
        self.frames.index_axis(Axis(0), index)
    }
}

/// Number of adjacent frame pairs that are not exactly one cadence apart.
pub fn count_gaps(frames: &[RainField]) -> usize {
    frames
        .windows(2)
        .filter(|w| w[1].timestamp - w[0].timestamp != cadence())
        .count()
}

/// Slides a window of `history + 1 + horizon` frames over a time-ordered list,
/// normalizing with `spec`. Windows spanning a time gap are skipped.
pub fn window_sequences(
    frames: &[RainField],
    horizon: usize,
    stride: usize,
    history: usize,
    spec: &NormalizationSpec,
) -> Result<Vec<RainSequence>> {
    let len = history + 1 + horizon;
    if horizon == 0 || stride == 0 {
        return Err(Error::config("horizon and stride must be positive"));
    }
    if frames.len() < len {
        return Err(Error::InsufficientFrames {
            needed: len,
            available: frames.len(),
        });
    }
    let (h, w) = frames[0].values.dim();
    if let Some(f) = frames.iter().find(|f| f.values.dim() != (h, w)) {
        return Err(Error::ShapeMismatch {
            expected: vec![h, w],
            actual: vec![f.height(), f.width()],
        });
    }
    let normalized = frames
        .iter()
        .map(|f| spec.forward(&f.values))
        .collect::<Result<Vec<_>>>()?;

    let mut out = Vec::new();
    let mut start = 0;
    while start + len <= frames.len() {
        let window = &frames[start..start + len];
        if count_gaps(window) == 0 {
            let mut stack = Array4::zeros((len, 1, h, w));
            for (k, frame) in normalized[start..start + len].iter().enumerate() {
                stack.slice_mut(s![k, 0, .., ..]).assign(frame);
            }
            out.push(RainSequence::new(stack, window[0].timestamp, *spec, history)?);
        }
        start += stride;
    }
    Ok(out)
}
