//! Dataset files and corpus splitting.
//!
//! On disk a dataset uses the checkpoint container with magic `VADS`. The
//! header holds a `[dataset]` section (counts, dims, which attachments are
//! present) and, for generated corpora, a `[spec]` echo of the generator
//! settings. The blob stores each record as: label (as f32, exact below
//! 2^24), the clip, then the first frame and the edge clip if present.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use sha2::{Digest, Sha256};

use super::toy::{gen_toy_videos, ToyVideoSpec};
use crate::container;
use crate::denoiser::{expand_first_frames, CondMode, TrainingSet};
use crate::error::{Error, Result};
use crate::kvtext::{KvDoc, KvWriter};
use crate::rng::{self, Purpose};
use crate::tensor::{VideoShape, VideoTensor};

pub const DATASET_MAGIC: &[u8; 4] = b"VADS";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub video: VideoTensor,
    pub label: u32,
    pub first_frame: Option<VideoTensor>,
    pub edges: Option<VideoTensor>,
}

impl Record {
    /// Hash of label and clip contents; attachments are derived from the
    /// clip and do not enter it.
    pub fn content_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.label.to_le_bytes());
        for v in self.video.data() {
            h.update(v.to_le_bytes());
        }
        h.finalize().into()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetFile {
    shape: VideoShape,
    vocab: u32,
    records: Vec<Record>,
    spec: Option<String>,
}

impl DatasetFile {
    pub fn new(shape: VideoShape, vocab: u32, records: Vec<Record>, spec: Option<String>) -> Result<Self> {
        let first_frame = records.first().is_some_and(|r| r.first_frame.is_some());
        let edges = records.first().is_some_and(|r| r.edges.is_some());
        let frame_shape = VideoShape { frames: 1, ..shape };
        for r in &records {
            if r.video.shape() != shape {
                return Err(Error::shape(&shape.dims(), &r.video.shape().dims()));
            }
            if !r.video.in_unit_range() {
                return Err(Error::invalid("dataset values must lie in [-1, 1]"));
            }
            if r.label >= vocab {
                return Err(Error::invalid(format!(
                    "label {} outside vocabulary of {vocab}",
                    r.label
                )));
            }
            if r.first_frame.is_some() != first_frame || r.edges.is_some() != edges {
                return Err(Error::invalid("records must all carry the same attachments"));
            }
            if let Some(f) = &r.first_frame {
                if f.shape() != frame_shape {
                    return Err(Error::shape(&frame_shape.dims(), &f.shape().dims()));
                }
            }
            if let Some(e) = &r.edges {
                if e.shape() != shape {
                    return Err(Error::shape(&shape.dims(), &e.shape().dims()));
                }
            }
        }
        Ok(Self {
            shape,
            vocab,
            records,
            spec,
        })
    }

    pub fn shape(&self) -> VideoShape {
        self.shape
    }

    pub fn vocab(&self) -> u32 {
        self.vocab
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn spec_echo(&self) -> Option<&str> {
        self.spec.as_deref()
    }

    pub fn has_first_frame(&self) -> bool {
        self.records.first().is_some_and(|r| r.first_frame.is_some())
    }

    pub fn has_edges(&self) -> bool {
        self.records.first().is_some_and(|r| r.edges.is_some())
    }

    pub fn clips(&self) -> Vec<VideoTensor> {
        self.records.iter().map(|r| r.video.clone()).collect()
    }

    /// Counts per label id.
    pub fn label_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.vocab as usize];
        for r in &self.records {
            h[r.label as usize] += 1;
        }
        h
    }

    /// Training rows with auxiliary inputs matching `mode`.
    pub fn to_training_set(&self, mode: CondMode) -> Result<TrainingSet> {
        if self.is_empty() {
            return Err(Error::invalid("dataset is empty"));
        }
        let n = self.len();
        let d = self.shape.numel();
        let mut x = Array2::zeros((n, d));
        for (mut row, r) in x.rows_mut().into_iter().zip(&self.records) {
            row.as_slice_mut().unwrap().copy_from_slice(r.video.data());
        }
        let aux = match mode {
            CondMode::None => None,
            CondMode::FirstFrame => {
                let fl = self.shape.frame_len();
                let mut frames = Array2::zeros((n, fl));
                for (mut row, r) in frames.rows_mut().into_iter().zip(&self.records) {
                    let f = r
                        .first_frame
                        .as_ref()
                        .map(|f| f.data())
                        .unwrap_or_else(|| r.video.frame(0));
                    row.as_slice_mut().unwrap().copy_from_slice(f);
                }
                Some(expand_first_frames(&frames, self.shape.frames))
            }
            CondMode::Edge => {
                let mut edges = Array2::zeros((n, d));
                for (mut row, r) in edges.rows_mut().into_iter().zip(&self.records) {
                    let e = r
                        .edges
                        .as_ref()
                        .ok_or_else(|| Error::invalid("dataset has no edge videos"))?;
                    row.as_slice_mut().unwrap().copy_from_slice(e.data());
                }
                Some(edges)
            }
        };
        let labels = self.records.iter().map(|r| r.label).collect();
        TrainingSet::new(self.shape, x, labels, aux)
    }

    fn header(&self) -> String {
        let s = self.shape;
        let mut w = KvWriter::new();
        w.section("dataset")
            .kv("count", self.len())
            .kv("frames", s.frames)
            .kv("height", s.height)
            .kv("width", s.width)
            .kv("channels", s.channels)
            .kv("vocab", self.vocab)
            .kv("first_frame", self.has_first_frame())
            .kv("edges", self.has_edges());
        let mut out = w.finish();
        if let Some(spec) = &self.spec {
            out.push_str("\n[spec]\n");
            out.push_str(spec);
        }
        out
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let mut blob = Vec::new();
        for r in &self.records {
            blob.push(r.label as f32);
            blob.extend_from_slice(r.video.data());
            if let Some(f) = &r.first_frame {
                blob.extend_from_slice(f.data());
            }
            if let Some(e) = &r.edges {
                blob.extend_from_slice(e.data());
            }
        }
        container::write(w, DATASET_MAGIC, DATASET_VERSION, &self.header(), &blob)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let c = container::read(r, DATASET_MAGIC)?;
        if c.version != DATASET_VERSION {
            return Err(Error::Format(format!("unsupported dataset version {}", c.version)));
        }
        let doc = KvDoc::parse(&c.header)?;
        doc.check_sections(&["dataset", "spec"])?;
        let mut s = doc.section("dataset");
        let count: usize = s.require("count", "integer")?;
        let shape = VideoShape::new(
            s.require("frames", "integer")?,
            s.require("height", "integer")?,
            s.require("width", "integer")?,
            s.require("channels", "integer")?,
        )?;
        let vocab: u32 = s.require("vocab", "integer")?;
        let has_first: bool = s.require("first_frame", "true or false")?;
        let has_edges: bool = s.require("edges", "true or false")?;
        s.finish()?;
        let spec = c.header.split_once("[spec]\n").map(|(_, rest)| rest.to_string());
        let frame_shape = VideoShape { frames: 1, ..shape };
        let per = 1
            + shape.numel()
            + if has_first { frame_shape.numel() } else { 0 }
            + if has_edges { shape.numel() } else { 0 };
        if c.blob.len() != count * per {
            return Err(Error::Format(format!(
                "blob holds {} values, header implies {}",
                c.blob.len(),
                count * per
            )));
        }
        let mut records = Vec::with_capacity(count);
        for chunk in c.blob.chunks_exact(per) {
            let label = chunk[0];
            if !(label >= 0.0 && label.fract() == 0.0) {
                return Err(Error::Format(format!("bad label {label}")));
            }
            let mut off = 1;
            let mut take = |s: VideoShape| {
                let v = VideoTensor::new(s, chunk[off..off + s.numel()].to_vec());
                off += s.numel();
                v
            };
            let video = take(shape)?;
            let first_frame = if has_first { Some(take(frame_shape)?) } else { None };
            let edges = if has_edges { Some(take(shape)?) } else { None };
            records.push(Record {
                video,
                label: label as u32,
                first_frame,
                edges,
            });
        }
        Self::new(shape, vocab, records, spec)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        Ok(buf)
    }

    /// SHA-256 of the serialized file, hex encoded.
    pub fn file_hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_bytes()?)))
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

    fn subset(&self, idx: &[usize]) -> Self {
        Self {
            shape: self.shape,
            vocab: self.vocab,
            records: idx.iter().map(|&i| self.records[i].clone()).collect(),
            spec: self.spec.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpora {
    pub pretrain: DatasetFile,
    pub adapt_train: DatasetFile,
    pub adapt_test: DatasetFile,
}

/// Fraction of the adaptation corpus held out for evaluation.
pub const ADAPT_TEST_FRACTION: f64 = 0.1;

/// Generates the broad pretraining corpus and the adaptation corpus, then
/// splits the latter 90/10 with a permutation from `(adapt seed, Split, 0)`.
/// Pretraining clips that also occur in the adaptation corpus are dropped so
/// no clip lands in two splits.
pub fn split_corpora(broad: &ToyVideoSpec, adapt: &ToyVideoSpec) -> Result<Corpora> {
    if broad.seed == adapt.seed {
        return Err(Error::invalid(format!(
            "broad and adaptation corpora share seed {}",
            broad.seed
        )));
    }
    if adapt.styles.len() != 1 {
        return Err(Error::invalid("the adaptation corpus must use exactly one style"));
    }
    if (broad.grid, broad.frames) != (adapt.grid, adapt.frames) {
        return Err(Error::invalid("corpora must share grid and frame count"));
    }
    let pre = gen_toy_videos(broad)?;
    let ad = gen_toy_videos(adapt)?;
    let adapt_hashes: HashSet<[u8; 32]> = ad.records.iter().map(Record::content_hash).collect();
    let keep: Vec<usize> = (0..pre.len())
        .filter(|&i| !adapt_hashes.contains(&pre.records[i].content_hash()))
        .collect();
    let pretrain = pre.subset(&keep);
    let mut order: Vec<usize> = (0..ad.len()).collect();
    order.shuffle(&mut rng::stream(adapt.seed, Purpose::Split, 0));
    let n_test = ((ad.len() as f64) * ADAPT_TEST_FRACTION).round() as usize;
    if n_test == 0 || n_test == ad.len() {
        return Err(Error::invalid("adaptation corpus too small to split"));
    }
    let (test, train) = order.split_at(n_test);
    let mut train = train.to_vec();
    let mut test = test.to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok(Corpora {
        pretrain,
        adapt_train: ad.subset(&train),
        adapt_test: ad.subset(&test),
    })
}
