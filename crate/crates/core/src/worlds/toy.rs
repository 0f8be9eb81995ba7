//! Toy grid videos: a hard-edged shape moving on a `G × G` grid.
//!
//! Each style id has a default rendering (shape, polarity, texture). A
//! corpus spec may override the rendering, which is how adaptation domains
//! keep the dynamics of a style while changing its look.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::Rng;

use super::dataset::{DatasetFile, Record};
use crate::denoiser::sobel_edges;
use crate::error::{Error, Result};
use crate::kvtext::{KvError, KvWriter, Section};
use crate::rng::{self, Purpose};
use crate::tensor::{VideoShape, VideoTensor};

/// Number of style ids.
pub const TOY_VOCAB: u32 = 4;

/// Side of the box a shape is drawn in.
pub const SHAPE_BOX: usize = 5;

macro_rules! text_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self {
                    $($name::$variant => $text),+
                })
            }
        }

        impl FromStr for $name {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    _ => Err(Error::invalid(format!(concat!("unknown ", stringify!($name), " '{}'"), s))),
                }
            }
        }
    };
}

text_enum!(Dynamics { Bounce => "bounce", Drift => "drift", Static => "static" });
text_enum!(ShapeKind { Square => "square", Disk => "disk" });
text_enum!(Polarity { Bright => "bright", Dark => "dark" });
text_enum!(Texture { Solid => "solid", Striped => "striped" });

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RenderParams {
    pub shape: ShapeKind,
    pub polarity: Polarity,
    pub texture: Texture,
}

impl RenderParams {
    /// Default rendering of each style id.
    pub fn for_style(style: u32) -> Result<Self> {
        use {Polarity::*, ShapeKind::*, Texture::*};
        let (shape, polarity, texture) = match style {
            0 => (Square, Bright, Solid),
            1 => (Disk, Bright, Solid),
            2 => (Square, Dark, Striped),
            3 => (Disk, Dark, Solid),
            s => return Err(Error::invalid(format!("style {s} outside vocabulary of {TOY_VOCAB}"))),
        };
        Ok(Self {
            shape,
            polarity,
            texture,
        })
    }

    fn background(&self) -> f32 {
        match self.polarity {
            Polarity::Bright => -1.0,
            Polarity::Dark => 1.0,
        }
    }

    /// Pixel value at box-local row `ly`; stripes are every other row.
    fn foreground(&self, ly: usize) -> f32 {
        match (self.texture, ly % 2) {
            (Texture::Striped, 1) => 0.0,
            _ => -self.background(),
        }
    }

    pub fn mask(&self) -> [[bool; SHAPE_BOX]; SHAPE_BOX] {
        let mut m = [[false; SHAPE_BOX]; SHAPE_BOX];
        let c = (SHAPE_BOX / 2) as i32;
        for (y, row) in m.iter_mut().enumerate() {
            for (x, v) in row.iter_mut().enumerate() {
                let (dy, dx) = (y as i32 - c, x as i32 - c);
                *v = match self.shape {
                    ShapeKind::Square => true,
                    ShapeKind::Disk => dx * dx + dy * dy <= 5,
                };
            }
        }
        m
    }
}

impl fmt::Display for RenderParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.shape, self.polarity, self.texture)
    }
}

impl FromStr for RenderParams {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split('/').map(str::trim).collect();
        match parts.as_slice() {
            [shape, polarity, texture] => Ok(Self {
                shape: shape.parse()?,
                polarity: polarity.parse()?,
                texture: texture.parse()?,
            }),
            _ => Err(Error::invalid(format!(
                "render must be shape/polarity/texture, got '{s}'"
            ))),
        }
    }
}

/// One corpus: each clip draws a style and a dynamics family uniformly from
/// the given lists.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyVideoSpec {
    pub grid: usize,
    pub frames: usize,
    pub dynamics: Vec<Dynamics>,
    pub styles: Vec<u32>,
    /// Replaces every style's default rendering when set.
    pub render: Option<RenderParams>,
    pub count: usize,
    pub seed: u64,
    pub first_frame: bool,
    pub edges: bool,
}

impl Default for ToyVideoSpec {
    fn default() -> Self {
        Self {
            grid: 16,
            frames: 8,
            dynamics: Dynamics::ALL.to_vec(),
            styles: (0..TOY_VOCAB).collect(),
            render: None,
            count: 1000,
            seed: 0,
            first_frame: false,
            edges: false,
        }
    }
}

impl ToyVideoSpec {
    pub fn validate(&self) -> Result<()> {
        if self.grid < 8 {
            return Err(Error::invalid(format!("grid must be at least 8, got {}", self.grid)));
        }
        if self.frames < 2 {
            return Err(Error::invalid(format!("need at least 2 frames, got {}", self.frames)));
        }
        if self.dynamics.is_empty() || self.styles.is_empty() {
            return Err(Error::invalid("dynamics and styles must be nonempty"));
        }
        if let Some(s) = self.styles.iter().find(|&&s| s >= TOY_VOCAB) {
            return Err(Error::invalid(format!("style {s} outside vocabulary of {TOY_VOCAB}")));
        }
        if self.count == 0 {
            return Err(Error::invalid("sample count must be positive"));
        }
        Ok(())
    }

    pub fn shape(&self) -> VideoShape {
        VideoShape {
            frames: self.frames,
            height: self.grid,
            width: self.grid,
            channels: 1,
        }
    }

    pub fn write_kv(&self, w: &mut KvWriter) {
        w.kv("grid", self.grid)
            .kv("frames", self.frames)
            .list("dynamics", &self.dynamics)
            .list("styles", &self.styles)
            .kv("render", self.render.map_or("default".to_string(), |r| r.to_string()))
            .kv("count", self.count)
            .kv("seed", self.seed)
            .kv("first_frame", self.first_frame)
            .kv("edges", self.edges);
    }

    /// Reads the keys written by [`ToyVideoSpec::write_kv`]; missing keys
    /// take the values of `base`.
    pub fn read_kv(s: &mut Section, base: &ToyVideoSpec) -> std::result::Result<Self, KvError> {
        let render = match s.opt_str("render") {
            None => base.render,
            Some(v) if v == "default" => None,
            Some(v) => Some(v.parse().map_err(|_| KvError::Type {
                section: String::new(),
                key: "render".into(),
                line: 0,
                expected: "shape/polarity/texture or default",
                value: v.clone(),
            })?),
        };
        Ok(Self {
            grid: s.usize_or("grid", base.grid)?,
            frames: s.usize_or("frames", base.frames)?,
            dynamics: s.list_or("dynamics", &base.dynamics, "bounce, drift or static")?,
            styles: s.list_or("styles", &base.styles, "style ids")?,
            render,
            count: s.usize_or("count", base.count)?,
            seed: s.u64_or("seed", base.seed)?,
            first_frame: s.bool_or("first_frame", base.first_frame)?,
            edges: s.bool_or("edges", base.edges)?,
        })
    }
}

/// Box positions (top-left row, column) for every frame.
fn trajectory(dynamics: Dynamics, grid: usize, frames: usize, r: &mut impl Rng) -> Vec<(i64, i64)> {
    let max = (grid - SHAPE_BOX) as f64;
    let mut pos = [r.gen_range(0.0..=max), r.gen_range(0.0..=max)];
    let mut vel = [0.0f64; 2];
    for v in &mut vel {
        let speed = r.gen_range(0.6..1.8);
        *v = if r.gen_bool(0.5) { speed } else { -speed };
    }
    if dynamics == Dynamics::Static {
        vel = [0.0; 2];
    }
    let mut out = Vec::with_capacity(frames);
    for f in 0..frames {
        if f > 0 {
            for k in 0..2 {
                pos[k] += vel[k];
                match dynamics {
                    Dynamics::Bounce => {
                        if pos[k] < 0.0 {
                            pos[k] = -pos[k];
                            vel[k] = -vel[k];
                        } else if pos[k] > max {
                            pos[k] = 2.0 * max - pos[k];
                            vel[k] = -vel[k];
                        }
                    }
                    Dynamics::Drift => pos[k] = pos[k].rem_euclid(grid as f64),
                    Dynamics::Static => {}
                }
            }
        }
        out.push((pos[0].round() as i64, pos[1].round() as i64));
    }
    out
}

/// Draws the shape into a frame; drift positions wrap around the torus.
fn render_frame(render: &RenderParams, grid: usize, top: i64, left: i64, out: &mut [f32]) {
    out.fill(render.background());
    let mask = render.mask();
    let g = grid as i64;
    for (ly, row) in mask.iter().enumerate() {
        for (lx, &on) in row.iter().enumerate() {
            if on {
                let y = (top + ly as i64).rem_euclid(g) as usize;
                let x = (left + lx as i64).rem_euclid(g) as usize;
                out[y * grid + x] = render.foreground(ly);
            }
        }
    }
}

fn render_clip(spec: &ToyVideoSpec, style: u32, dynamics: Dynamics, r: &mut impl Rng) -> Result<VideoTensor> {
    let render = match spec.render {
        Some(p) => p,
        None => RenderParams::for_style(style)?,
    };
    let shape = spec.shape();
    let mut data = vec![0.0f32; shape.numel()];
    let traj = trajectory(dynamics, spec.grid, spec.frames, r);
    for (frame, &(top, left)) in data.chunks_mut(shape.frame_len()).zip(&traj) {
        render_frame(&render, spec.grid, top, left, frame);
    }
    VideoTensor::new(shape, data)
}

const MAX_ATTEMPTS: u64 = 64;

/// Renders `spec.count` distinct clips. Clip `i` draws from stream
/// `(seed, Data, i)`; a clip identical to an earlier one is redrawn from the
/// next attempt's stream.
pub fn gen_toy_videos(spec: &ToyVideoSpec) -> Result<DatasetFile> {
    spec.validate()?;
    let mut seen = HashSet::new();
    let mut records = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let mut attempt = 0;
        let record = loop {
            if attempt == MAX_ATTEMPTS {
                return Err(Error::invalid(format!(
                    "could not draw {} distinct clips from this spec",
                    spec.count
                )));
            }
            let mut r = rng::stream(spec.seed, Purpose::Data, rng::index2(i as u64, attempt));
            let style = spec.styles[r.gen_range(0..spec.styles.len())];
            let dynamics = spec.dynamics[r.gen_range(0..spec.dynamics.len())];
            let video = render_clip(spec, style, dynamics, &mut r)?;
            let record = Record {
                video,
                label: style,
                first_frame: None,
                edges: None,
            };
            if seen.insert(record.content_hash()) {
                break record;
            }
            attempt += 1;
        };
        records.push(record);
    }
    for rec in &mut records {
        if spec.first_frame {
            let s = rec.video.shape();
            rec.first_frame = Some(VideoTensor::new(
                VideoShape { frames: 1, ..s },
                rec.video.frame(0).to_vec(),
            )?);
        }
        if spec.edges {
            rec.edges = Some(sobel_edges(&rec.video)?);
        }
    }
    let mut w = KvWriter::new();
    spec.write_kv(&mut w);
    DatasetFile::new(spec.shape(), TOY_VOCAB, records, Some(w.finish()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(dynamics: Dynamics, count: usize) -> ToyVideoSpec {
        ToyVideoSpec {
            dynamics: vec![dynamics],
            count,
            seed: 3,
            ..Default::default()
        }
    }

    #[test]
    fn static_clips_repeat_their_first_frame() {
        let d = gen_toy_videos(&small(Dynamics::Static, 20)).unwrap();
        for r in d.records() {
            let f0 = r.video.frame(0);
            for f in 1..r.video.shape().frames {
                assert_eq!(r.video.frame(f), f0);
            }
        }
    }

    #[test]
    fn pixels_and_labels_in_range() {
        let d = gen_toy_videos(&ToyVideoSpec {
            count: 200,
            ..Default::default()
        })
        .unwrap();
        for r in d.records() {
            assert!(r.video.in_unit_range());
            assert!(r.label < TOY_VOCAB);
        }
    }

    #[test]
    fn attachments() {
        let spec = ToyVideoSpec {
            first_frame: true,
            edges: true,
            ..small(Dynamics::Drift, 5)
        };
        let d = gen_toy_videos(&spec).unwrap();
        let r = &d.records()[0];
        assert_eq!(r.first_frame.as_ref().unwrap().data(), r.video.frame(0));
        assert_eq!(r.edges.as_ref().unwrap().shape(), r.video.shape());
    }

    #[test]
    fn validation() {
        assert!(gen_toy_videos(&ToyVideoSpec {
            grid: 7,
            ..Default::default()
        })
        .is_err());
        assert!(gen_toy_videos(&ToyVideoSpec {
            frames: 1,
            ..Default::default()
        })
        .is_err());
        assert!(gen_toy_videos(&ToyVideoSpec {
            styles: vec![TOY_VOCAB],
            ..Default::default()
        })
        .is_err());
    }

    #[test]
    fn render_text_roundtrip() {
        let r: RenderParams = "disk/dark/striped".parse().unwrap();
        assert_eq!(r.to_string().parse::<RenderParams>().unwrap(), r);
        assert!("disk/dark".parse::<RenderParams>().is_err());
    }

    #[test]
    fn disk_and_square_areas() {
        let count = |p: RenderParams| p.mask().iter().flatten().filter(|&&b| b).count();
        assert_eq!(count(RenderParams::for_style(0).unwrap()), 25);
        assert_eq!(count(RenderParams::for_style(1).unwrap()), 21);
    }
}
