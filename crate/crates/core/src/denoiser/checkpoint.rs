use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::Rng;

use super::arch::{ArchitectureDescriptor, CondMode};
use super::conditioning::{expand_first_frames, ConditionSpec};
use super::net::{Net, NetInput};
use crate::adapter::ScoreSource;
use crate::container;
use crate::diffusion::{NoiseSchedule, NoisySample};
use crate::error::{Error, Result};
use crate::kvtext::{fmt_f64, KvDoc, KvWriter};
use crate::rng::{self, Purpose};
use crate::tensor::VideoShape;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VADP";
pub const CHECKPOINT_VERSION: u32 = 1;

/// The schedule a checkpoint was trained against.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleSummary {
    pub num_steps: usize,
    pub logsnr_min: f64,
    pub logsnr_max: f64,
}

impl ScheduleSummary {
    pub fn of(sched: &NoiseSchedule) -> Result<Self> {
        let (logsnr_min, logsnr_max) = sched
            .logsnr_range()
            .ok_or_else(|| Error::invalid("checkpoints need a log-SNR schedule"))?;
        Ok(Self {
            num_steps: sched.num_steps(),
            logsnr_min,
            logsnr_max,
        })
    }

    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.num_steps, self.logsnr_min, self.logsnr_max)
    }

    pub fn matches(&self, sched: &NoiseSchedule) -> bool {
        Self::of(sched).map(|s| s == *self).unwrap_or(false)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingMeta {
    pub steps: u64,
    pub dataset: String,
    pub dropout: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserCheckpoint {
    pub descriptor: ArchitectureDescriptor,
    pub params: Vec<f32>,
    pub schedule: ScheduleSummary,
    pub meta: TrainingMeta,
}

/// Bound of the uniform initializer for one tensor: `1/sqrt(fan_in)` of the
/// layer it feeds. Biases use their layer's fan-in; the label table and the
/// energy readout `v` use the hidden width.
fn init_bound(desc: &ArchitectureDescriptor, name: &str, rows: usize) -> f64 {
    let fan_in = match name {
        "in.b" => desc.input_dim(),
        "b" => desc.data_dim() + desc.aux_dim(),
        "label.emb" | "v" | "out.b" => desc.width,
        "kappa.b" => desc.time_dim,
        n if n.ends_with(".b1") || n.ends_with(".b2") => desc.width,
        _ => rows,
    };
    1.0 / (fan_in.max(1) as f64).sqrt()
}

/// Fresh checkpoint with every tensor drawn from `U(−b, b)`, `b` from
/// [`init_bound`]; tensor `k` in layout order uses stream `(seed, ParamInit, k)`.
pub fn init_denoiser(desc: &ArchitectureDescriptor, sched: &NoiseSchedule, seed: u64) -> Result<DenoiserCheckpoint> {
    desc.validate()?;
    let layout = desc.layout();
    let mut params = vec![0.0f32; layout.total()];
    for (k, slot) in layout.slots().iter().enumerate() {
        let b = init_bound(desc, &slot.name, slot.rows);
        let mut r = rng::stream(seed, Purpose::ParamInit, k as u64);
        for p in &mut params[slot.offset..slot.offset + slot.len()] {
            *p = r.gen_range(-b..b) as f32;
        }
    }
    Ok(DenoiserCheckpoint {
        descriptor: desc.clone(),
        params,
        schedule: ScheduleSummary::of(sched)?,
        meta: TrainingMeta::default(),
    })
}

/// Embedding row for a condition: the label, or the null row `vocab`.
pub(crate) fn label_row(desc: &ArchitectureDescriptor, cond: &ConditionSpec) -> Result<usize> {
    match (cond.is_null, cond.label) {
        (false, Some(l)) if (l as usize) < desc.vocab => Ok(l as usize),
        (false, Some(l)) => Err(Error::invalid(format!(
            "label {l} outside vocabulary of {}",
            desc.vocab
        ))),
        _ => Ok(desc.vocab),
    }
}

fn broadcast_rows(m: &Array2<f32>, rows: usize) -> Result<Array2<f32>> {
    match m.nrows() {
        r if r == rows => Ok(m.clone()),
        1 => Ok(m.broadcast((rows, m.ncols())).unwrap().to_owned()),
        r => Err(Error::shape(&[rows], &[r])),
    }
}

/// The clip-sized auxiliary input the descriptor asks for, one row per
/// sample. Auxiliary tensors the model does not use are ignored.
pub(crate) fn aux_input(
    desc: &ArchitectureDescriptor,
    cond: &ConditionSpec,
    rows: usize,
) -> Result<Option<Array2<f32>>> {
    let shape = desc.shape;
    match desc.cond_mode {
        CondMode::None => Ok(None),
        CondMode::FirstFrame => {
            let f = cond
                .first_frame
                .as_ref()
                .ok_or_else(|| Error::invalid("model expects a first-frame condition"))?;
            if f.ncols() != shape.frame_len() {
                return Err(Error::shape(&[shape.frame_len()], &[f.ncols()]));
            }
            Ok(Some(expand_first_frames(&broadcast_rows(f, rows)?, shape.frames)))
        }
        CondMode::Edge => {
            let e = cond
                .edge_video
                .as_ref()
                .ok_or_else(|| Error::invalid("model expects an edge-video condition"))?;
            if e.ncols() != shape.numel() {
                return Err(Error::shape(&[shape.numel()], &[e.ncols()]));
            }
            Ok(Some(broadcast_rows(e, rows)?))
        }
    }
}

impl DenoiserCheckpoint {
    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn shape(&self) -> VideoShape {
        self.descriptor.shape
    }

    fn check(&self) -> Result<()> {
        if self.params.len() != self.descriptor.param_count() {
            return Err(Error::Format(format!(
                "blob holds {} parameters, descriptor needs {}",
                self.params.len(),
                self.descriptor.param_count()
            )));
        }
        if let Some(i) = self.params.iter().position(|p| !p.is_finite()) {
            return Err(Error::NonFinite(format!("parameter {i}")));
        }
        Ok(())
    }

    /// ε̂ for every row of `sample`. Energy networks return `∇ₓE` exactly.
    pub fn predict_eps(&self, sample: &NoisySample, cond: &ConditionSpec) -> Result<Array2<f32>> {
        let t = sample.t;
        if t == 0 || t > self.schedule.num_steps {
            return Err(Error::StepOutOfRange {
                step: t,
                max: self.schedule.num_steps,
            });
        }
        let d = self.descriptor.data_dim();
        if sample.x.ncols() != d {
            return Err(Error::shape(&[d], &[sample.x.ncols()]));
        }
        if cond.is_null && cond.label.is_some() {
            return Err(Error::invalid("a null condition cannot carry a label"));
        }
        let rows = sample.x.nrows();
        let input = NetInput {
            x: sample.x.clone(),
            aux: aux_input(&self.descriptor, cond, rows)?,
            steps: vec![t; rows],
            labels: vec![label_row(&self.descriptor, cond)?; rows],
            alpha_bar: vec![self.schedule.build()?.alpha_bar(t); rows],
        };
        let net = Net::new(&self.descriptor, &self.params, self.schedule.num_steps);
        Ok(net.predict(&input))
    }

    /// Scalar energy per row; only for energy-parameterized descriptors.
    pub fn energy(&self, sample: &NoisySample, cond: &ConditionSpec) -> Result<Vec<f32>> {
        if !self.descriptor.energy {
            return Err(Error::invalid("descriptor is not energy-parameterized"));
        }
        let rows = sample.x.nrows();
        let input = NetInput {
            x: sample.x.clone(),
            aux: aux_input(&self.descriptor, cond, rows)?,
            steps: vec![sample.t; rows],
            labels: vec![label_row(&self.descriptor, cond)?; rows],
            alpha_bar: Vec::new(),
        };
        Ok(Net::new(&self.descriptor, &self.params, self.schedule.num_steps).energy(&input))
    }

    fn header(&self) -> String {
        let d = &self.descriptor;
        let mut w = KvWriter::new();
        w.section("descriptor")
            .kv("frames", d.shape.frames)
            .kv("height", d.shape.height)
            .kv("grid_width", d.shape.width)
            .kv("channels", d.shape.channels)
            .kv("hidden", d.width)
            .kv("blocks", d.blocks)
            .kv("time_dim", d.time_dim)
            .kv("vocab", d.vocab)
            .kv("cond_mode", d.cond_mode)
            .kv("energy", d.energy)
            .kv("data_std", d.data_std.map_or("none".to_string(), fmt_f64))
            .kv("params", self.params.len());
        w.section("schedule")
            .kv("num_steps", self.schedule.num_steps)
            .kv("logsnr_min", fmt_f64(self.schedule.logsnr_min))
            .kv("logsnr_max", fmt_f64(self.schedule.logsnr_max));
        w.section("training")
            .kv("steps", self.meta.steps)
            .kv("dataset", &self.meta.dataset)
            .kv("dropout", fmt_f64(self.meta.dropout));
        w.finish()
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        self.check()?;
        container::write(w, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, &self.header(), &self.params)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let c = container::read(r, CHECKPOINT_MAGIC)?;
        if c.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {}", c.version)));
        }
        let doc = KvDoc::parse(&c.header)?;
        doc.check_sections(&["descriptor", "schedule", "training"])?;
        let mut s = doc.section("descriptor");
        let shape = VideoShape::new(
            s.require("frames", "integer")?,
            s.require("height", "integer")?,
            s.require("grid_width", "integer")?,
            s.require("channels", "integer")?,
        )?;
        let descriptor = ArchitectureDescriptor {
            shape,
            width: s.require("hidden", "integer")?,
            blocks: s.require("blocks", "integer")?,
            time_dim: s.require("time_dim", "integer")?,
            vocab: s.require("vocab", "integer")?,
            cond_mode: s.require_str("cond_mode")?.parse()?,
            energy: s.require("energy", "true or false")?,
            data_std: s.opt_f64_or("data_std", None)?,
        };
        let count: usize = s.require("params", "integer")?;
        s.finish()?;
        descriptor.validate()?;
        let mut s = doc.section("schedule");
        let schedule = ScheduleSummary {
            num_steps: s.require("num_steps", "integer")?,
            logsnr_min: s.require("logsnr_min", "number")?,
            logsnr_max: s.require("logsnr_max", "number")?,
        };
        s.finish()?;
        let mut s = doc.section("training");
        let meta = TrainingMeta {
            steps: s.require("steps", "integer")?,
            dataset: s.str_or("dataset", ""),
            dropout: s.require("dropout", "number")?,
        };
        s.finish()?;
        if count != c.blob.len() {
            return Err(Error::Format(format!(
                "header declares {count} parameters, blob holds {}",
                c.blob.len()
            )));
        }
        let ckpt = DenoiserCheckpoint {
            descriptor,
            params: c.blob,
            schedule,
            meta,
        };
        ckpt.check()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

impl ScoreSource for DenoiserCheckpoint {
    fn dim(&self) -> usize {
        self.descriptor.data_dim()
    }

    fn has_unconditional(&self) -> bool {
        self.meta.dropout > 0.0
    }

    fn predict_eps(&self, sample: &NoisySample, cond: &ConditionSpec) -> Result<Array2<f32>> {
        DenoiserCheckpoint::predict_eps(self, sample, cond)
    }
}
