//! Video tensors and batch helpers.
//!
//! A clip is stored frame-major: `[frame][row][col][channel]`. Batches are
//! `Array2<f32>` with one flattened clip per row.

use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VideoShape {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl VideoShape {
    pub fn new(frames: usize, height: usize, width: usize, channels: usize) -> Result<Self> {
        if frames == 0 || height == 0 || width == 0 || channels == 0 {
            return Err(Error::invalid(format!(
                "video dims must be positive, got {frames}x{height}x{width}x{channels}"
            )));
        }
        Ok(Self {
            frames,
            height,
            width,
            channels,
        })
    }

    /// A flat `dim`-vector seen as a one-frame, one-row clip.
    pub fn flat(dim: usize) -> Self {
        Self {
            frames: 1,
            height: 1,
            width: dim,
            channels: 1,
        }
    }

    pub fn numel(&self) -> usize {
        self.frames * self.frame_len()
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.frames, self.height, self.width, self.channels]
    }

    pub fn with_channels(&self, channels: usize) -> Self {
        Self { channels, ..*self }
    }

    #[inline]
    pub fn index(&self, f: usize, y: usize, x: usize, c: usize) -> usize {
        ((f * self.height + y) * self.width + x) * self.channels + c
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoTensor {
    shape: VideoShape,
    data: Vec<f32>,
}

impl VideoTensor {
    pub fn new(shape: VideoShape, data: Vec<f32>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::shape(&[shape.numel()], &[data.len()]));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("video entry {i}")));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: VideoShape) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.numel()],
        }
    }

    /// Builds a clip with every entry clamped into `[-1, 1]`, the range
    /// enforced on dataset ingestion.
    pub fn clamped(shape: VideoShape, mut data: Vec<f32>) -> Result<Self> {
        for v in &mut data {
            *v = v.clamp(-1.0, 1.0);
        }
        Self::new(shape, data)
    }

    pub fn shape(&self) -> VideoShape {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn frame(&self, f: usize) -> &[f32] {
        let n = self.shape.frame_len();
        &self.data[f * n..(f + 1) * n]
    }

    pub fn get(&self, f: usize, y: usize, x: usize, c: usize) -> f32 {
        self.data[self.shape.index(f, y, x, c)]
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (-1.0..=1.0).contains(v))
    }
}

/// Stacks clips of one shape into a batch matrix.
pub fn stack(clips: &[VideoTensor]) -> Result<Array2<f32>> {
    let first = clips
        .first()
        .ok_or_else(|| Error::invalid("cannot stack an empty clip list"))?;
    let d = first.shape.numel();
    let mut out = Array2::zeros((clips.len(), d));
    for (mut row, clip) in out.axis_iter_mut(Axis(0)).zip(clips) {
        if clip.shape != first.shape {
            return Err(Error::shape(&first.shape.dims(), &clip.shape.dims()));
        }
        row.as_slice_mut().unwrap().copy_from_slice(&clip.data);
    }
    Ok(out)
}

/// Splits a batch back into clips; entries are clamped into `[-1, 1]`.
pub fn unstack_clamped(batch: ArrayView2<f32>, shape: VideoShape) -> Result<Vec<VideoTensor>> {
    if batch.ncols() != shape.numel() {
        return Err(Error::shape(&[shape.numel()], &[batch.ncols()]));
    }
    batch
        .rows()
        .into_iter()
        .map(|r| VideoTensor::clamped(shape, r.to_vec()))
        .collect()
}

/// Channel-wise concatenation of two clips with the same frame geometry.
/// The result has `a.channels + b.channels` channels.
pub fn concat_channels(a: &VideoTensor, b: &VideoTensor) -> Result<VideoTensor> {
    let (sa, sb) = (a.shape, b.shape);
    if (sa.frames, sa.height, sa.width) != (sb.frames, sb.height, sb.width) {
        return Err(Error::shape(&sa.dims(), &sb.dims()));
    }
    let shape = sa.with_channels(sa.channels + sb.channels);
    let pixels = sa.frames * sa.height * sa.width;
    let mut data = Vec::with_capacity(shape.numel());
    for p in 0..pixels {
        data.extend_from_slice(&a.data[p * sa.channels..(p + 1) * sa.channels]);
        data.extend_from_slice(&b.data[p * sb.channels..(p + 1) * sb.channels]);
    }
    Ok(VideoTensor { shape, data })
}

/// Row-wise channel concatenation for batches of clips.
pub fn concat_channels_batch(
    a: ArrayView2<f32>,
    a_shape: VideoShape,
    b: ArrayView2<f32>,
    b_shape: VideoShape,
) -> Result<Array2<f32>> {
    if a.nrows() != b.nrows() {
        return Err(Error::shape(&[a.nrows()], &[b.nrows()]));
    }
    let mut out = Array2::zeros((a.nrows(), a_shape.numel() + b_shape.numel()));
    for i in 0..a.nrows() {
        let ta = VideoTensor::new(a_shape, a.row(i).to_vec())?;
        let tb = VideoTensor::new(b_shape, b.row(i).to_vec())?;
        let c = concat_channels(&ta, &tb)?;
        out.row_mut(i).as_slice_mut().unwrap().copy_from_slice(&c.data);
    }
    Ok(out)
}
