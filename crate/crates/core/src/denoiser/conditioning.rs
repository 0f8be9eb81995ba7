//! Conditioning inputs: labels (the desk-scale stand-in for text), the
//! first-frame condition, and Sobel edge maps.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::tensor::{VideoShape, VideoTensor};

/// What a denoiser is conditioned on for one batch.
///
/// `first_frame` rows hold one frame each (`height·width·channels`);
/// `edge_video` rows hold a full clip of edge maps. Either may have one row,
/// which is then shared by every sample in the batch.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConditionSpec {
    pub label: Option<u32>,
    pub is_null: bool,
    pub first_frame: Option<Array2<f32>>,
    pub edge_video: Option<Array2<f32>>,
}

impl ConditionSpec {
    pub fn label(label: u32) -> Self {
        Self {
            label: Some(label),
            ..Self::default()
        }
    }

    /// The unconditional branch.
    pub fn null() -> Self {
        Self {
            is_null: true,
            ..Self::default()
        }
    }

    pub fn with_first_frame(mut self, frames: Array2<f32>) -> Self {
        self.first_frame = Some(frames);
        self
    }

    pub fn with_edges(mut self, edges: Array2<f32>) -> Self {
        self.edge_video = Some(edges);
        self
    }

    /// Same auxiliary tensors, label dropped.
    pub fn to_null(&self) -> Self {
        Self {
            label: None,
            is_null: true,
            ..self.clone()
        }
    }

    pub fn validate(&self, shape: VideoShape) -> Result<()> {
        if self.is_null && self.label.is_some() {
            return Err(Error::invalid("a null condition cannot carry a label"));
        }
        if self.first_frame.is_some() && self.edge_video.is_some() {
            return Err(Error::invalid("at most one of first frame and edge video may be set"));
        }
        if let Some(f) = &self.first_frame {
            if f.ncols() != shape.frame_len() {
                return Err(Error::shape(&[shape.frame_len()], &[f.ncols()]));
            }
        }
        if let Some(e) = &self.edge_video {
            if e.ncols() != shape.numel() {
                return Err(Error::shape(&[shape.numel()], &[e.ncols()]));
            }
        }
        Ok(())
    }
}

/// Replicates a single frame across `frames` time steps.
pub fn make_first_frame_condition(frame: &VideoTensor, frames: usize) -> Result<VideoTensor> {
    let s = frame.shape();
    if s.frames != 1 {
        return Err(Error::invalid(format!("expected a single frame, got {}", s.frames)));
    }
    let out = VideoShape::new(frames, s.height, s.width, s.channels)?;
    VideoTensor::new(out, frame.data().repeat(frames))
}

/// Row-wise [`make_first_frame_condition`] on a batch of frames.
pub fn expand_first_frames(frames: &Array2<f32>, count: usize) -> Array2<f32> {
    let len = frames.ncols();
    let mut out = Array2::zeros((frames.nrows(), len * count));
    for (src, mut dst) in frames.rows().into_iter().zip(out.rows_mut()) {
        for f in 0..count {
            for (d, s) in dst.iter_mut().skip(f * len).take(len).zip(src.iter()) {
                *d = *s;
            }
        }
    }
    out
}

const SOBEL_X: [[f32; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];

/// Horizontal Sobel response per frame and channel, with replicate-padded
/// borders and no rescaling.
pub fn sobel_x_raw(video: &VideoTensor) -> Result<Vec<f32>> {
    let s = video.shape();
    if s.width < 3 {
        return Err(Error::invalid(format!(
            "Sobel filter needs width >= 3, got {}",
            s.width
        )));
    }
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut out = vec![0.0f32; s.numel()];
    for f in 0..s.frames {
        for y in 0..s.height {
            for x in 0..s.width {
                for c in 0..s.channels {
                    let mut acc = 0.0f32;
                    for (ky, row) in SOBEL_X.iter().enumerate() {
                        let yy = clampi(y as isize + ky as isize - 1, s.height);
                        for (kx, k) in row.iter().enumerate() {
                            if *k != 0.0 {
                                let xx = clampi(x as isize + kx as isize - 1, s.width);
                                acc += k * video.get(f, yy, xx, c);
                            }
                        }
                    }
                    out[s.index(f, y, x, c)] = acc;
                }
            }
        }
    }
    Ok(out)
}

/// Sobel edge video: the raw horizontal response, rescaled per frame by its
/// largest magnitude into `[-1, 1]`. Frames with no response stay zero.
pub fn sobel_edges(video: &VideoTensor) -> Result<VideoTensor> {
    let s = video.shape();
    let mut raw = sobel_x_raw(video)?;
    for frame in raw.chunks_mut(s.frame_len()) {
        let peak = frame.iter().fold(0.0f32, |m, v| m.max(v.abs()));
        if peak > 0.0 {
            frame.iter_mut().for_each(|v| *v /= peak);
        }
    }
    VideoTensor::clamped(s, raw)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame_from(h: usize, w: usize, f: impl Fn(usize, usize) -> f32) -> VideoTensor {
        let s = VideoShape::new(1, h, w, 1).unwrap();
        let data = (0..h * w).map(|i| f(i / w, i % w)).collect();
        VideoTensor::new(s, data).unwrap()
    }

    #[test]
    fn constant_frame_has_no_edges() {
        let v = frame_from(5, 5, |_, _| 0.3);
        assert!(sobel_edges(&v).unwrap().data().iter().all(|&e| e == 0.0));
    }

    #[test]
    fn stripe_edges_are_local() {
        let v = frame_from(6, 9, |_, x| if x == 4 { 1.0 } else { -1.0 });
        let e = sobel_edges(&v).unwrap();
        for y in 0..6 {
            for x in 0..9 {
                let val = e.get(0, y, x, 0);
                if (3..=5).contains(&x) && x != 4 {
                    assert!(val != 0.0);
                } else {
                    assert_eq!(val, 0.0, "x = {x}");
                }
            }
        }
    }

    #[test]
    fn narrow_video_rejected() {
        let v = frame_from(4, 2, |_, _| 0.0);
        assert!(sobel_edges(&v).is_err());
    }

    #[test]
    fn first_frame_single_step_is_identity() {
        let f = frame_from(3, 3, |y, x| (y * 3 + x) as f32 / 10.0);
        assert_eq!(make_first_frame_condition(&f, 1).unwrap(), f);
        let b = expand_first_frames(&Array2::from_shape_vec((1, 2), vec![1.0, 2.0]).unwrap(), 3);
        assert_eq!(b.row(0).to_vec(), vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
    }

    #[test]
    fn null_keeps_aux() {
        let c = ConditionSpec::label(2).with_first_frame(Array2::zeros((1, 4)));
        let n = c.to_null();
        assert!(n.is_null && n.label.is_none() && n.first_frame.is_some());
        let bad = ConditionSpec {
            label: Some(1),
            is_null: true,
            ..Default::default()
        };
        assert!(bad.validate(VideoShape::flat(4)).is_err());
    }
}
