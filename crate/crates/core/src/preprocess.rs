//! Frame transforms and the dataset-level action delay shift.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DelayOffset, Episode, Observation};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PreprocessError {
    #[error("resize target must be at least 1x1, got {0}x{1}")]
    ZeroTarget(u32, u32),
    #[error("frame sizes differ: {0:?} vs {1:?}")]
    DimensionMismatch((u32, u32), (u32, u32)),
    #[error("delay {delay} needs an episode longer than {delay_abs} frames, got {len}", delay_abs = .delay.magnitude())]
    DelayTooLarge { delay: DelayOffset, len: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResizeMethod {
    #[default]
    Bilinear,
}

/// Resizes with half-pixel-centred bilinear sampling. Output bytes are
/// clamped to [0, 255] and rounded half away from zero.
pub fn resize(
    frame: &Observation,
    target_w: u32,
    target_h: u32,
    method: ResizeMethod,
) -> Result<Observation, PreprocessError> {
    if target_w == 0 || target_h == 0 {
        return Err(PreprocessError::ZeroTarget(target_w, target_h));
    }
    if frame.dims() == (target_w, target_h) {
        return Ok(frame.clone());
    }
    match method {
        ResizeMethod::Bilinear => Ok(bilinear(frame, target_w, target_h)),
    }
}

pub fn resize_bilinear(
    frame: &Observation,
    target_w: u32,
    target_h: u32,
) -> Result<Observation, PreprocessError> {
    resize(frame, target_w, target_h, ResizeMethod::Bilinear)
}

/// Source taps and weight for each output coordinate along one axis.
fn taps(src: u32, dst: u32) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    let last = (src - 1) as f64;
    (0..dst)
        .map(|i| {
            let x = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, last);
            let x0 = x.floor();
            let x1 = (x0 + 1.0).min(last);
            (x0 as usize, x1 as usize, x - x0)
        })
        .collect()
}

fn bilinear(frame: &Observation, tw: u32, th: u32) -> Observation {
    let (sw, sh) = frame.dims();
    let src = frame.pixels();
    let xs = taps(sw, tw);
    let ys = taps(sh, th);
    let row = sw as usize * 3;
    let mut out = Vec::with_capacity(tw as usize * th as usize * 3);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for c in 0..3 {
                let p = |x: usize, y: usize| src[y * row + x * 3 + c] as f64;
                let top = p(x0, y0) + (p(x1, y0) - p(x0, y0)) * fx;
                let bottom = p(x0, y1) + (p(x1, y1) - p(x0, y1)) * fx;
                let v = top + (bottom - top) * fy;
                out.push(v.clamp(0.0, 255.0).round() as u8);
            }
        }
    }
    Observation::new(tw, th, out).expect("dimensions computed above")
}

/// Per-byte maximum of two frames (keeps the lighter value of each pixel).
pub fn flicker_merge(a: &Observation, b: &Observation) -> Result<Observation, PreprocessError> {
    if a.dims() != b.dims() {
        return Err(PreprocessError::DimensionMismatch(a.dims(), b.dims()));
    }
    let pixels = a
        .pixels()
        .iter()
        .zip(b.pixels())
        .map(|(&x, &y)| x.max(y))
        .collect();
    Ok(Observation::new(a.width(), a.height(), pixels).expect("same dims as input"))
}

/// Converts interleaved RGB bytes into planar channels × height × width
/// values in [0, 1], appended to `out`.
pub fn write_model_input(frame: &Observation, out: &mut Vec<f32>) {
    let plane = frame.width() as usize * frame.height() as usize;
    let start = out.len();
    out.resize(start + plane * 3, 0.0);
    let dst = &mut out[start..];
    for (i, px) in frame.pixels().chunks_exact(3).enumerate() {
        for c in 0..3 {
            dst[c * plane + i] = px[c] as f32 / 255.0;
        }
    }
}

pub fn to_model_input(frame: &Observation) -> Vec<f32> {
    let mut v = Vec::new();
    write_model_input(frame, &mut v);
    v
}

/// Re-pairs frame i with action i + d, dropping the unmatched ends.
pub fn shift_actions(episode: &Episode, delay: DelayOffset) -> Result<Episode, PreprocessError> {
    let n = episode.len();
    let k = delay.magnitude();
    if k >= n {
        return Err(PreprocessError::DelayTooLarge { delay, len: n });
    }
    let (frames, actions) = if delay.frames() >= 0 {
        (&episode.frames[..n - k], &episode.actions[k..])
    } else {
        (&episode.frames[k..], &episode.actions[..n - k])
    };
    let mut meta = episode.meta.clone();
    meta.delay_applied += delay.frames();
    Ok(Episode {
        meta,
        frames: frames.to_vec(),
        actions: actions.to_vec(),
    })
}

/// Frame pipeline switches shared by training and acting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FramePipeline {
    /// Target (width, height); `None` keeps native frames.
    pub resize: Option<(u32, u32)>,
    pub method: ResizeMethod,
    /// Merge every frame with its predecessor (Atari-style flicker removal).
    pub flicker_merge: bool,
}

impl Default for FramePipeline {
    fn default() -> Self {
        Self {
            resize: Some((84, 84)),
            method: ResizeMethod::Bilinear,
            flicker_merge: false,
        }
    }
}

impl FramePipeline {
    pub fn output_dims(&self, native: (u32, u32)) -> (u32, u32) {
        self.resize.unwrap_or(native)
    }

    fn finish(&self, frame: &Observation) -> Result<Observation, PreprocessError> {
        match self.resize {
            Some((w, h)) => resize(frame, w, h, self.method),
            None => Ok(frame.clone()),
        }
    }

    /// Flicker merge over the original sequence (the first frame is merged
    /// with itself), then resize.
    pub fn merged_sequence(&self, frames: &[Observation]) -> Result<Vec<Observation>, PreprocessError> {
        if !self.flicker_merge {
            return Ok(frames.to_vec());
        }
        let mut out = Vec::with_capacity(frames.len());
        for (i, f) in frames.iter().enumerate() {
            let prev = if i == 0 { f } else { &frames[i - 1] };
            out.push(flicker_merge(prev, f)?);
        }
        Ok(out)
    }

    /// Applies the pipeline to a whole episode and then shifts actions by
    /// `delay`. Flicker merging sees the unshifted sequence.
    pub fn prepare_episode(
        &self,
        episode: &Episode,
        delay: DelayOffset,
    ) -> Result<Episode, PreprocessError> {
        let merged = Episode {
            meta: episode.meta.clone(),
            frames: self.merged_sequence(&episode.frames)?,
            actions: episode.actions.clone(),
        };
        let mut shifted = shift_actions(&merged, delay)?;
        shifted.frames = shifted
            .frames
            .iter()
            .map(|f| self.finish(f))
            .collect::<Result<_, _>>()?;
        Ok(shifted)
    }

    pub fn stream(&self) -> FrameStream {
        FrameStream {
            pipeline: *self,
            previous: None,
        }
    }
}

/// Online form of [`FramePipeline`] for acting: remembers the previous raw
/// frame for flicker merging.
#[derive(Debug, Clone)]
pub struct FrameStream {
    pipeline: FramePipeline,
    previous: Option<Observation>,
}

impl FrameStream {
    pub fn reset(&mut self) {
        self.previous = None;
    }

    pub fn push(&mut self, frame: &Observation) -> Result<Observation, PreprocessError> {
        let merged = if self.pipeline.flicker_merge {
            let m = match &self.previous {
                Some(p) if p.dims() == frame.dims() => flicker_merge(p, frame)?,
                _ => frame.clone(),
            };
            self.previous = Some(frame.clone());
            m
        } else {
            frame.clone()
        };
        self.pipeline.finish(&merged)
    }
}
