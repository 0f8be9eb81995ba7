//! Fréchet distance between feature statistics, a frozen random-convolution
//! feature probe, and the benchmark that compares adapter-only,
//! pretrained-only, composed, CFG-mix and finetuned sampling on toy videos.
//!
//! The probe is an uncalibrated stand-in for learned video features; its
//! distances are comparable across rows of one report and nothing else.

use std::fmt::Write as _;
use std::time::Instant;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::adapter::{cfg_mix_sample, cfg_sample, video_adapter_sample, CompositionConfig};
use crate::denoiser::{
    init_denoiser, train_denoiser, ArchitectureDescriptor, CondMode, ConditionSpec, DenoiserCheckpoint, TrainConfig,
};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::kvtext::{fmt_f64, KvDoc, KvError, KvWriter};
use crate::rng::{self, derive_seed, Purpose};
use crate::tensor::{unstack_clamped, VideoShape, VideoTensor};
use crate::worlds::{Corpora, DatasetFile, ToyVideoSpec};

/// Spatiotemporal extent of every probe filter (frames, rows, columns).
pub const PROBE_KERNEL: usize = 3;

/// A frozen bank of random 3×3×3 filters. Features per clip are, for each
/// filter, the mean of `relu(r)` and the mean of `r²` over all valid
/// positions, where `r` is the filter response.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureProbe {
    channels: usize,
    /// `(27·channels) × filters`, one filter per column.
    weights: Array2<f32>,
    bias: Array1<f32>,
}

impl FeatureProbe {
    /// Filter taps are `U(−1/√k, 1/√k)` with `k = 27·channels`; biases are
    /// `U(−0.5, 0.5)`. Everything comes from `(seed, Probe, 0)`.
    pub fn new(seed: u64, channels: usize, filters: usize) -> Result<Self> {
        if channels == 0 || filters == 0 {
            return Err(Error::invalid("probe needs at least one channel and one filter"));
        }
        let k = PROBE_KERNEL.pow(3) * channels;
        let bound = 1.0 / (k as f32).sqrt();
        let mut r = rng::stream(seed, Purpose::Probe, 0);
        let weights = Array2::from_shape_fn((k, filters), |_| r.gen_range(-bound..bound));
        let bias = Array1::from_shape_fn(filters, |_| r.gen_range(-0.5f32..0.5));
        Ok(Self {
            channels,
            weights,
            bias,
        })
    }

    pub fn output_dim(&self) -> usize {
        2 * self.weights.ncols()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&(self.channels as u32).to_le_bytes());
        out.extend_from_slice(&(self.weights.ncols() as u32).to_le_bytes());
        for v in self.weights.iter().chain(self.bias.iter()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// SHA-256 of [`FeatureProbe::to_bytes`], hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    /// Feature vector of one clip.
    pub fn features(&self, clip: &VideoTensor) -> Result<Vec<f64>> {
        let s = clip.shape();
        let k = PROBE_KERNEL;
        if s.channels != self.channels {
            return Err(Error::shape(&[self.channels], &[s.channels]));
        }
        if s.frames < k || s.height < k || s.width < k {
            return Err(Error::invalid(format!("probe needs clips of at least {k}x{k}x{k}")));
        }
        let (nf, ny, nx) = (s.frames - k + 1, s.height - k + 1, s.width - k + 1);
        let positions = nf * ny * nx;
        let mut patches = Array2::<f32>::zeros((positions, self.weights.nrows()));
        let mut row = 0;
        for f in 0..nf {
            for y in 0..ny {
                for x in 0..nx {
                    let mut p = patches.row_mut(row);
                    let mut j = 0;
                    for df in 0..k {
                        for dy in 0..k {
                            for dx in 0..k {
                                for c in 0..s.channels {
                                    p[j] = clip.get(f + df, y + dy, x + dx, c);
                                    j += 1;
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
        let mut resp = patches.dot(&self.weights);
        resp += &self.bias;
        let n = positions as f64;
        let mut out = Vec::with_capacity(self.output_dim());
        for col in resp.axis_iter(Axis(1)) {
            out.push(col.iter().map(|&r| r.max(0.0) as f64).sum::<f64>() / n);
        }
        for col in resp.axis_iter(Axis(1)) {
            out.push(col.iter().map(|&r| (r as f64) * (r as f64)).sum::<f64>() / n);
        }
        Ok(out)
    }
}

/// Mean and population covariance of a feature sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    pub mean: Array1<f64>,
    pub cov: Array2<f64>,
    pub count: usize,
}

impl FeatureStats {
    /// Statistics of the rows of `features`.
    pub fn from_rows(features: &Array2<f64>) -> Result<Self> {
        let n = features.nrows();
        if n < 2 {
            return Err(Error::invalid(format!("need at least 2 samples, got {n}")));
        }
        let mean = features.mean_axis(Axis(0)).unwrap();
        let centered = features - &mean;
        let cov = centered.t().dot(&centered) / n as f64;
        Ok(Self { mean, cov, count: n })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

pub fn extract_features(videos: &[VideoTensor], probe: &FeatureProbe) -> Result<FeatureStats> {
    if videos.len() < 2 {
        return Err(Error::invalid(format!("need at least 2 videos, got {}", videos.len())));
    }
    let mut rows = Array2::zeros((videos.len(), probe.output_dim()));
    for (mut r, v) in rows.rows_mut().into_iter().zip(videos) {
        for (d, s) in r.iter_mut().zip(probe.features(v)?) {
            *d = s;
        }
    }
    FeatureStats::from_rows(&rows)
}

fn to_dmatrix(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

/// Symmetric square root with eigenvalues clipped at zero.
fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let e = SymmetricEigen::new(sym);
    let d = DMatrix::from_diagonal(&e.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &e.eigenvectors * d * e.eigenvectors.transpose()
}

/// `‖μa − μb‖² + tr(Σa + Σb − 2(Σa Σb)^{1/2})`. The trace of the product
/// root is computed as `Σ sqrt(λ)` over the eigenvalues `λ` of the
/// symmetric matrix `Σa^{1/2} Σb Σa^{1/2}`, negative ones clipped to zero.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::shape(&[a.dim()], &[b.dim()]));
    }
    let dm = &a.mean - &b.mean;
    let mean_term = dm.dot(&dm);
    let (ca, cb) = (to_dmatrix(&a.cov), to_dmatrix(&b.cov));
    let sa = sqrt_psd(&ca);
    let m = &sa * &cb * &sa;
    let e = SymmetricEigen::new((&m + m.transpose()) * 0.5);
    let tr_root: f64 = e.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let d = mean_term + ca.trace() + cb.trace() - 2.0 * tr_root;
    if !d.is_finite() {
        return Err(Error::NonFinite("Fréchet distance".into()));
    }
    Ok(d.max(0.0))
}

/// Size and training recipe of one model in the benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelPlan {
    pub width: usize,
    pub blocks: usize,
    pub time_dim: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub dropout: f64,
    pub data_std: Option<f64>,
}

impl ModelPlan {
    pub fn descriptor(&self, shape: VideoShape, vocab: usize) -> ArchitectureDescriptor {
        ArchitectureDescriptor {
            shape,
            width: self.width,
            blocks: self.blocks,
            time_dim: self.time_dim,
            vocab,
            cond_mode: CondMode::None,
            energy: false,
            data_std: self.data_std,
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            dropout: self.dropout,
            clip_norm: 1.0,
            cosine_decay: true,
            seed,
        }
    }

    fn write_kv(&self, w: &mut KvWriter) {
        w.kv("width", self.width)
            .kv("blocks", self.blocks)
            .kv("time_dim", self.time_dim)
            .kv("steps", self.steps)
            .kv("batch_size", self.batch_size)
            .kv("learning_rate", fmt_f64(self.learning_rate))
            .kv("dropout", fmt_f64(self.dropout))
            .kv("data_std", self.data_std.map_or("none".to_string(), fmt_f64));
    }

    fn read_kv(doc: &KvDoc, section: &str, base: &ModelPlan) -> std::result::Result<Self, KvError> {
        let mut s = doc.section(section);
        let p = Self {
            width: s.usize_or("width", base.width)?,
            blocks: s.usize_or("blocks", base.blocks)?,
            time_dim: s.usize_or("time_dim", base.time_dim)?,
            steps: s.usize_or("steps", base.steps)?,
            batch_size: s.usize_or("batch_size", base.batch_size)?,
            learning_rate: s.f64_or("learning_rate", base.learning_rate)?,
            dropout: s.f64_or("dropout", base.dropout)?,
            data_std: s.opt_f64_or("data_std", base.data_std)?,
        };
        s.finish()?;
        Ok(p)
    }
}

/// The benchmark's sampling configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RowKind {
    AdapterOnly,
    PretrainedOnly,
    VideoAdapter,
    CfgMix,
    Finetune,
}

impl RowKind {
    pub const ALL: [RowKind; 5] = [
        RowKind::AdapterOnly,
        RowKind::PretrainedOnly,
        RowKind::VideoAdapter,
        RowKind::CfgMix,
        RowKind::Finetune,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            RowKind::AdapterOnly => "adapter-only",
            RowKind::PretrainedOnly => "pretrained-only",
            RowKind::VideoAdapter => "video-adapter",
            RowKind::CfgMix => "cfg-mix",
            RowKind::Finetune => "finetune",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

impl std::fmt::Display for RowKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for RowKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s).ok_or_else(|| Error::invalid(format!("unknown benchmark row '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkPlan {
    pub seeds: Vec<u64>,
    pub rows: Vec<RowKind>,
    /// Generated clips per row.
    pub samples: usize,
    pub num_steps: usize,
    pub logsnr_min: f64,
    pub logsnr_max: f64,
    pub broad: ToyVideoSpec,
    pub adapt: ToyVideoSpec,
    pub pretrained: ModelPlan,
    pub adapter: ModelPlan,
    pub composition: CompositionConfig,
    /// Weight of the pretrained guided score in the CFG-mix row.
    pub mix_weight: f64,
    pub probe_filters: usize,
    pub probe_seed: u64,
}

impl Default for BenchmarkPlan {
    fn default() -> Self {
        let broad = ToyVideoSpec {
            count: 4000,
            seed: 101,
            ..ToyVideoSpec::default()
        };
        let adapt = ToyVideoSpec {
            styles: vec![1],
            render: Some("disk/bright/striped".parse().unwrap()),
            count: 1000,
            seed: 202,
            ..ToyVideoSpec::default()
        };
        let composition = CompositionConfig::default();
        Self {
            seeds: vec![0, 1, 2],
            rows: RowKind::ALL.to_vec(),
            samples: 512,
            num_steps: 100,
            logsnr_min: -20.0,
            logsnr_max: 20.0,
            broad,
            adapt,
            pretrained: ModelPlan {
                width: 512,
                blocks: 2,
                time_dim: 32,
                steps: 4000,
                batch_size: 64,
                learning_rate: 1e-3,
                dropout: 0.1,
                data_std: Some(0.5),
            },
            adapter: ModelPlan {
                width: 32,
                blocks: 1,
                time_dim: 32,
                steps: 2000,
                batch_size: 64,
                learning_rate: 1e-3,
                dropout: 0.1,
                data_std: Some(0.5),
            },
            mix_weight: composition.gamma,
            composition,
            probe_filters: 32,
            probe_seed: 7,
        }
    }
}

pub const PLAN_SECTIONS: [&str; 7] = [
    "benchmark",
    "schedule",
    "broad",
    "adapt",
    "pretrained",
    "adapter",
    "composition",
];

impl BenchmarkPlan {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() || self.rows.is_empty() {
            return Err(Error::invalid("benchmark needs seeds and rows"));
        }
        if self.samples < 2 {
            return Err(Error::invalid("benchmark needs at least 2 samples per row"));
        }
        if !(0.0..=1.0).contains(&self.mix_weight) {
            return Err(Error::invalid("mix weight must be in [0, 1]"));
        }
        self.composition.validate()?;
        self.broad.validate()?;
        self.adapt.validate()?;
        if self.adapt.styles.len() != 1 {
            return Err(Error::invalid("the adaptation corpus must use exactly one style"));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.num_steps, self.logsnr_min, self.logsnr_max)
    }

    pub fn target_style(&self) -> u32 {
        self.adapt.styles[0]
    }

    /// Finetuning steps with the same compute as adapter training, using
    /// parameter counts as the cost proxy.
    pub fn finetune_budget(&self, adapter_params: usize, pretrained_params: usize) -> usize {
        let b = self.adapter.steps as f64 * adapter_params as f64 / pretrained_params as f64;
        (b.round() as usize).max(1)
    }

    pub fn write_kv(&self, w: &mut KvWriter) {
        let rows: Vec<&str> = self.rows.iter().map(|r| r.name()).collect();
        w.section("benchmark")
            .list("seeds", &self.seeds)
            .list("rows", &rows)
            .kv("samples", self.samples)
            .kv("mix_weight", fmt_f64(self.mix_weight))
            .kv("probe_filters", self.probe_filters)
            .kv("probe_seed", self.probe_seed);
        w.section("schedule")
            .kv("num_steps", self.num_steps)
            .kv("logsnr_min", fmt_f64(self.logsnr_min))
            .kv("logsnr_max", fmt_f64(self.logsnr_max));
        w.section("broad");
        self.broad.write_kv(w);
        w.section("adapt");
        self.adapt.write_kv(w);
        w.section("pretrained");
        self.pretrained.write_kv(w);
        w.section("adapter");
        self.adapter.write_kv(w);
        let c = &self.composition;
        w.section("composition")
            .kv("gamma", fmt_f64(c.gamma))
            .kv("alpha", fmt_f64(c.alpha))
            .kv("cutoff_fraction", fmt_f64(c.cutoff_fraction))
            .kv("mcmc_steps", c.mcmc_steps)
            .kv("mcmc_step_size", fmt_f64(c.mcmc_step_size));
    }

    /// Reads the plan sections of `doc`; absent keys keep their defaults.
    pub fn read_kv(doc: &KvDoc) -> Result<Self> {
        let d = Self::default();
        let mut s = doc.section("benchmark");
        let seeds = s.list_or("seeds", &d.seeds, "integers")?;
        let rows: Vec<String> = s.list_or(
            "rows",
            &d.rows.iter().map(|r| r.name().to_string()).collect::<Vec<_>>(),
            "row names",
        )?;
        let rows = rows.iter().map(|r| r.parse()).collect::<Result<Vec<RowKind>>>()?;
        let samples = s.usize_or("samples", d.samples)?;
        let mix_weight = s.f64_or("mix_weight", d.mix_weight)?;
        let probe_filters = s.usize_or("probe_filters", d.probe_filters)?;
        let probe_seed = s.u64_or("probe_seed", d.probe_seed)?;
        s.finish()?;
        let mut s = doc.section("schedule");
        let num_steps = s.usize_or("num_steps", d.num_steps)?;
        let logsnr_min = s.f64_or("logsnr_min", d.logsnr_min)?;
        let logsnr_max = s.f64_or("logsnr_max", d.logsnr_max)?;
        s.finish()?;
        let mut s = doc.section("broad");
        let broad = ToyVideoSpec::read_kv(&mut s, &d.broad)?;
        s.finish()?;
        let mut s = doc.section("adapt");
        let adapt = ToyVideoSpec::read_kv(&mut s, &d.adapt)?;
        s.finish()?;
        let pretrained = ModelPlan::read_kv(doc, "pretrained", &d.pretrained)?;
        let adapter = ModelPlan::read_kv(doc, "adapter", &d.adapter)?;
        let mut s = doc.section("composition");
        let composition = CompositionConfig {
            gamma: s.f64_or("gamma", d.composition.gamma)?,
            alpha: s.f64_or("alpha", d.composition.alpha)?,
            cutoff_fraction: s.f64_or("cutoff_fraction", d.composition.cutoff_fraction)?,
            mcmc_steps: s.usize_or("mcmc_steps", d.composition.mcmc_steps)?,
            mcmc_step_size: s.f64_or("mcmc_step_size", d.composition.mcmc_step_size)?,
        };
        s.finish()?;
        Ok(Self {
            seeds,
            rows,
            samples,
            num_steps,
            logsnr_min,
            logsnr_max,
            broad,
            adapt,
            pretrained,
            adapter,
            composition,
            mix_weight,
            probe_filters,
            probe_seed,
        })
    }

    pub fn to_kv_string(&self) -> String {
        let mut w = KvWriter::new();
        self.write_kv(&mut w);
        w.finish()
    }
}

/// Continues training the pretrained model on the adaptation corpus for
/// `budget` steps.
pub fn finetune_baseline(
    pretrained: &DenoiserCheckpoint,
    corpus: &DatasetFile,
    budget: usize,
    cfg: &TrainConfig,
    sched: &NoiseSchedule,
) -> Result<(DenoiserCheckpoint, Vec<f64>)> {
    if budget == 0 {
        return Err(Error::invalid("finetune budget must be at least one step"));
    }
    let set = corpus.to_training_set(pretrained.descriptor.cond_mode)?;
    let cfg = TrainConfig {
        steps: budget,
        ..cfg.clone()
    };
    let out = train_denoiser(pretrained, &set, &cfg, sched)?;
    Ok((out.checkpoint, out.loss_curve))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkRow {
    pub kind: RowKind,
    pub seed: u64,
    pub frechet: f64,
    /// Parameters involved in sampling this row.
    pub params: usize,
    pub wall_secs: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkReport {
    pub rows: Vec<BenchmarkRow>,
    pub seeds: Vec<u64>,
    pub config_echo: String,
    pub probe_hash: String,
}

pub const REPORT_COLUMNS: [&str; 5] = ["config", "seed", "frechet", "params", "wall_s"];

impl BenchmarkReport {
    pub fn get(&self, kind: RowKind, seed: u64) -> Option<&BenchmarkRow> {
        self.rows.iter().find(|r| r.kind == kind && r.seed == seed)
    }

    /// Tab-separated table with a header line, in stable column order.
    pub fn table(&self) -> String {
        let mut out = REPORT_COLUMNS.join("\t");
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{}\t{}\t{:.6}\t{}\t{:.2}",
                r.kind, r.seed, r.frechet, r.params, r.wall_secs
            );
        }
        out
    }

    /// Table, probe hash, and the echoed plan.
    pub fn render(&self) -> String {
        format!(
            "{}\n# probe sha256 = {}\n\n{}",
            self.table(),
            self.probe_hash,
            self.config_echo
        )
    }
}

fn sample_clips(batch: Array2<f32>, shape: VideoShape) -> Result<Vec<VideoTensor>> {
    unstack_clamped(batch.view(), shape)
}

/// Runs every configured row for every seed and scores it against the
/// adaptation test split. `progress` receives one line per finished stage.
pub fn run_benchmark(
    plan: &BenchmarkPlan,
    corpora: &Corpora,
    mut progress: impl FnMut(&str),
) -> Result<BenchmarkReport> {
    plan.validate()?;
    if corpora.pretrain.is_empty() || corpora.adapt_train.is_empty() || corpora.adapt_test.len() < 2 {
        return Err(Error::invalid("benchmark corpora are missing or too small"));
    }
    let sched = plan.schedule()?;
    let shape = corpora.adapt_test.shape();
    let vocab = corpora.pretrain.vocab() as usize;
    let probe = FeatureProbe::new(plan.probe_seed, shape.channels, plan.probe_filters)?;
    let reference = extract_features(&corpora.adapt_test.clips(), &probe)?;
    let pre_set = corpora.pretrain.to_training_set(CondMode::None)?;
    let ad_set = corpora.adapt_train.to_training_set(CondMode::None)?;
    let cond = ConditionSpec::label(plan.target_style());
    let comp = plan.composition;
    let mut rows = Vec::new();
    for &seed in &plan.seeds {
        let clock = Instant::now();
        let pre_desc = plan.pretrained.descriptor(shape, vocab);
        let pre0 = init_denoiser(&pre_desc, &sched, derive_seed(seed, "pretrained/init"))?;
        let pre_cfg = plan.pretrained.train_config(derive_seed(seed, "pretrained/train"));
        let mut pre = train_denoiser(&pre0, &pre_set, &pre_cfg, &sched)?.checkpoint;
        pre.meta.dataset = "pretrain".into();
        let pre_secs = clock.elapsed().as_secs_f64();
        progress(&format!("seed {seed}: pretrained model trained in {pre_secs:.1}s"));

        let clock = Instant::now();
        let ad_desc = plan.adapter.descriptor(shape, vocab);
        let ad0 = init_denoiser(&ad_desc, &sched, derive_seed(seed, "adapter/init"))?;
        let ad_cfg = plan.adapter.train_config(derive_seed(seed, "adapter/train"));
        let mut ad = train_denoiser(&ad0, &ad_set, &ad_cfg, &sched)?.checkpoint;
        ad.meta.dataset = "adapt_train".into();
        let ad_secs = clock.elapsed().as_secs_f64();
        progress(&format!("seed {seed}: adapter trained in {ad_secs:.1}s"));

        let sample_seed = derive_seed(seed, "sample");
        let n = plan.samples;
        for &kind in &plan.rows {
            let clock = Instant::now();
            let (batch, params) = match kind {
                RowKind::AdapterOnly => (
                    cfg_sample(&ad, comp.alpha, &sched, &cond, n, sample_seed, None)?,
                    ad.param_count(),
                ),
                RowKind::PretrainedOnly => (
                    cfg_sample(&pre, comp.alpha, &sched, &cond, n, sample_seed, None)?,
                    pre.param_count(),
                ),
                RowKind::VideoAdapter => (
                    video_adapter_sample(&ad, &pre, &comp, &sched, &cond, n, sample_seed)?,
                    ad.param_count() + pre.param_count(),
                ),
                RowKind::CfgMix => (
                    cfg_mix_sample(&ad, &pre, comp.alpha, plan.mix_weight, &sched, &cond, n, sample_seed)?,
                    ad.param_count() + pre.param_count(),
                ),
                RowKind::Finetune => {
                    let budget = plan.finetune_budget(ad.param_count(), pre.param_count());
                    let cfg = plan.pretrained.train_config(derive_seed(seed, "finetune/train"));
                    let (ft, _) = finetune_baseline(&pre, &corpora.adapt_train, budget, &cfg, &sched)?;
                    (
                        cfg_sample(&ft, comp.alpha, &sched, &cond, n, sample_seed, None)?,
                        ft.param_count(),
                    )
                }
            };
            let stats = extract_features(&sample_clips(batch, shape)?, &probe)?;
            let frechet = frechet_distance(&stats, &reference)?;
            let wall_secs = clock.elapsed().as_secs_f64();
            progress(&format!("seed {seed}: {kind} frechet {frechet:.4} ({wall_secs:.1}s)"));
            rows.push(BenchmarkRow {
                kind,
                seed,
                frechet,
                params,
                wall_secs,
            });
        }
    }
    Ok(BenchmarkReport {
        rows,
        seeds: plan.seeds.clone(),
        config_echo: plan.to_kv_string(),
        probe_hash: probe.hash(),
    })
}

/// Counts seeds on which `pred(report rows of that seed)` holds.
pub fn seeds_where(report: &BenchmarkReport, pred: impl Fn(&dyn Fn(RowKind) -> Option<f64>) -> bool) -> usize {
    report
        .seeds
        .iter()
        .filter(|&&s| {
            let get = |k: RowKind| report.get(k, s).map(|r| r.frechet);
            pred(&get)
        })
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats(mean: Vec<f64>, cov: Array2<f64>) -> FeatureStats {
        FeatureStats {
            mean: Array1::from(mean),
            cov,
            count: 10,
        }
    }

    #[test]
    fn identical_stats_have_zero_distance() {
        let c = ndarray::arr2(&[[2.0, 0.3], [0.3, 1.0]]);
        let a = stats(vec![1.0, -1.0], c);
        assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-9);
    }

    #[test]
    fn mean_shift_with_identity_covariance() {
        let a = stats(vec![0.0, 0.0, 0.0], Array2::eye(3));
        let b = stats(vec![3.0, 4.0, 0.0], Array2::eye(3));
        assert!((frechet_distance(&a, &b).unwrap() - 25.0).abs() < 1e-9);
    }

    #[test]
    fn dimension_mismatch() {
        let a = stats(vec![0.0], Array2::eye(1));
        let b = stats(vec![0.0, 0.0], Array2::eye(2));
        assert!(frechet_distance(&a, &b).is_err());
    }

    #[test]
    fn duplication_keeps_population_covariance() {
        let x = ndarray::arr2(&[[1.0, 2.0], [3.0, -1.0], [0.5, 0.0]]);
        let doubled = ndarray::concatenate(Axis(0), &[x.view(), x.view()]).unwrap();
        let a = FeatureStats::from_rows(&x).unwrap();
        let b = FeatureStats::from_rows(&doubled).unwrap();
        for (u, v) in a.cov.iter().zip(b.cov.iter()) {
            assert!((u - v).abs() < 1e-12);
        }
        assert!(FeatureStats::from_rows(&x.slice(ndarray::s![..1, ..]).to_owned()).is_err());
    }

    #[test]
    fn probe_dimension_and_hash_are_stable() {
        let p = FeatureProbe::new(3, 1, 8).unwrap();
        assert_eq!(p.output_dim(), 16);
        assert_eq!(p.hash(), FeatureProbe::new(3, 1, 8).unwrap().hash());
        assert_ne!(p.hash(), FeatureProbe::new(4, 1, 8).unwrap().hash());
        let clip = VideoTensor::zeros(VideoShape::new(4, 5, 5, 1).unwrap());
        assert_eq!(p.features(&clip).unwrap().len(), 16);
    }

    #[test]
    fn plan_roundtrip() {
        let p = BenchmarkPlan::default();
        let doc = KvDoc::parse(&p.to_kv_string()).unwrap();
        assert_eq!(BenchmarkPlan::read_kv(&doc).unwrap(), p);
        assert_eq!(BenchmarkPlan::read_kv(&KvDoc::parse("").unwrap()).unwrap(), p);
    }
}
