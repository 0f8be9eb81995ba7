use ndarray::Array2;
use rand::Rng;

use super::arch::ArchitectureDescriptor;
use super::checkpoint::DenoiserCheckpoint;
use super::net::{Net, NetInput, Real};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::rng::{self, Purpose};
use crate::tensor::VideoShape;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Probability of replacing a label with the null condition.
    pub dropout: f64,
    pub clip_norm: f64,
    /// Anneal the learning rate to zero along a half cosine.
    pub cosine_decay: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 64,
            learning_rate: 1e-3,
            dropout: 0.1,
            clip_norm: 1.0,
            cosine_decay: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::invalid("steps and batch size must be positive"));
        }
        if !(self.learning_rate > 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::invalid("learning rate and clip norm must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// Training examples, one clip per row. `aux` rows are already expanded to
/// clip size when the model is conditioned on a first frame or edges.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub shape: VideoShape,
    pub x: Array2<f32>,
    pub labels: Vec<u32>,
    pub aux: Option<Array2<f32>>,
}

impl TrainingSet {
    pub fn new(shape: VideoShape, x: Array2<f32>, labels: Vec<u32>, aux: Option<Array2<f32>>) -> Result<Self> {
        if x.nrows() == 0 {
            return Err(Error::invalid("training set is empty"));
        }
        if x.ncols() != shape.numel() {
            return Err(Error::shape(&[shape.numel()], &[x.ncols()]));
        }
        if labels.len() != x.nrows() {
            return Err(Error::shape(&[x.nrows()], &[labels.len()]));
        }
        if let Some(a) = &aux {
            if a.nrows() != x.nrows() {
                return Err(Error::shape(&[x.nrows()], &[a.nrows()]));
            }
        }
        Ok(Self { shape, x, labels, aux })
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Random choices for one optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub steps: Vec<usize>,
    pub eps: Array2<f32>,
    pub dropped: Vec<bool>,
}

/// Draws the batch for optimizer step `step` from `(seed, TrainBatch, step)`:
/// record indices with replacement, `t ~ U{1..T}`, `ε ~ N(0, I)`, and the
/// condition-dropout mask.
pub fn draw_batch(
    records: usize,
    batch: usize,
    num_steps: usize,
    dim: usize,
    dropout: f64,
    seed: u64,
    step: u64,
) -> Batch {
    let mut r = rng::stream(seed, Purpose::TrainBatch, step);
    let indices = (0..batch).map(|_| r.gen_range(0..records)).collect();
    let steps = (0..batch).map(|_| r.gen_range(1..=num_steps)).collect();
    let dropped = (0..batch).map(|_| r.gen::<f64>() < dropout).collect();
    let eps = Array2::from_shape_vec((batch, dim), rng::normal_vec_f32(&mut r, batch * dim)).unwrap();
    Batch {
        indices,
        steps,
        eps,
        dropped,
    }
}

/// Batch loss `mean_b ‖ε_b − ε̂_b‖²` and its gradient with respect to `params`.
pub fn loss_and_grad<F: Real>(
    desc: &ArchitectureDescriptor,
    params: &[F],
    sched: &NoiseSchedule,
    set: &TrainingSet,
    batch: &Batch,
) -> (f64, Vec<F>) {
    let net = Net::new(desc, params, sched.num_steps());
    let input = batch_input::<F>(desc, sched, set, batch);
    let (out, cache) = net.forward(&input);
    let n = batch.indices.len() as f64;
    let mut loss = 0.0;
    let mut d_out = Array2::<F>::zeros(out.dim());
    for ((d, o), e) in d_out.iter_mut().zip(out.iter()).zip(batch.eps.iter()) {
        let diff = o.to_f64().unwrap() - *e as f64;
        loss += diff * diff;
        *d = F::from_f64(2.0 * diff / n).unwrap();
    }
    let mut grads = vec![F::zero(); params.len()];
    net.backward(&cache, &d_out, &mut grads);
    (loss / n, grads)
}

/// Batch loss only; used by finite-difference checks.
pub fn batch_loss<F: Real>(
    desc: &ArchitectureDescriptor,
    params: &[F],
    sched: &NoiseSchedule,
    set: &TrainingSet,
    batch: &Batch,
) -> f64 {
    let net = Net::new(desc, params, sched.num_steps());
    let out = net.predict(&batch_input::<F>(desc, sched, set, batch));
    let sum: f64 = out
        .iter()
        .zip(batch.eps.iter())
        .map(|(o, e)| {
            let d = o.to_f64().unwrap() - *e as f64;
            d * d
        })
        .sum();
    sum / batch.indices.len() as f64
}

fn batch_input<F: Real>(
    desc: &ArchitectureDescriptor,
    sched: &NoiseSchedule,
    set: &TrainingSet,
    batch: &Batch,
) -> NetInput<F> {
    let b = batch.indices.len();
    let d = desc.data_dim();
    let mut x = Array2::<F>::zeros((b, d));
    for (i, (&idx, &t)) in batch.indices.iter().zip(&batch.steps).enumerate() {
        let (a, s) = (sched.alpha_bar(t).sqrt(), sched.sigma_bar(t));
        for j in 0..d {
            let v = a * set.x[[idx, j]] as f64 + s * batch.eps[[i, j]] as f64;
            x[[i, j]] = F::from_f64(v).unwrap();
        }
    }
    let aux = set.aux.as_ref().filter(|_| desc.aux_dim() > 0).map(|aux| {
        let mut out = Array2::<F>::zeros((b, aux.ncols()));
        for (i, &idx) in batch.indices.iter().enumerate() {
            for j in 0..aux.ncols() {
                out[[i, j]] = F::from_f32(aux[[idx, j]]).unwrap();
            }
        }
        out
    });
    let labels = batch
        .indices
        .iter()
        .zip(&batch.dropped)
        .map(|(&idx, &drop)| {
            if drop {
                desc.vocab
            } else {
                (set.labels[idx] as usize).min(desc.vocab)
            }
        })
        .collect();
    NetInput {
        x,
        aux,
        steps: batch.steps.clone(),
        labels,
        alpha_bar: batch.steps.iter().map(|&t| sched.alpha_bar(t)).collect(),
    }
}

/// Adam with bias correction.
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    lr: f64,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            lr,
        }
    }

    fn update(&mut self, params: &mut [f32], grads: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = Self::B1 * *m + (1.0 - Self::B1) * g;
            *v = Self::B2 * *v + (1.0 - Self::B2) * g * g;
            let step = self.lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
            *p = (*p as f64 - step) as f32;
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: DenoiserCheckpoint,
    /// Batch loss before each update.
    pub loss_curve: Vec<f64>,
}

/// Minimizes the denoising loss with Adam, global gradient-norm clipping and
/// optional cosine learning-rate decay.
/// Labels are replaced by the null condition with probability `cfg.dropout`.
pub fn train_denoiser(
    ckpt: &DenoiserCheckpoint,
    set: &TrainingSet,
    cfg: &TrainConfig,
    sched: &NoiseSchedule,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if set.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if !ckpt.schedule.matches(sched) {
        return Err(Error::invalid("schedule does not match the checkpoint"));
    }
    let desc = &ckpt.descriptor;
    if set.shape != desc.shape {
        return Err(Error::shape(&desc.shape.dims(), &set.shape.dims()));
    }
    if desc.aux_dim() > 0 {
        match &set.aux {
            Some(a) if a.ncols() == desc.aux_dim() => {}
            Some(a) => return Err(Error::shape(&[desc.aux_dim()], &[a.ncols()])),
            None => {
                return Err(Error::invalid(
                    "model is conditioned but the training set has no aux tensors",
                ))
            }
        }
    }
    let mut params = ckpt.params.clone();
    let mut opt = Adam::new(params.len(), cfg.learning_rate);
    let mut curve = Vec::with_capacity(cfg.steps);
    let mut g64 = vec![0.0f64; params.len()];
    for step in 0..cfg.steps {
        let batch = draw_batch(
            set.len(),
            cfg.batch_size,
            sched.num_steps(),
            desc.data_dim(),
            cfg.dropout,
            cfg.seed,
            step as u64,
        );
        let (loss, grads) = loss_and_grad::<f32>(desc, &params, sched, set, &batch);
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        curve.push(loss);
        let norm = grads.iter().map(|g| (*g as f64).powi(2)).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::Diverged { step, loss: norm });
        }
        let scale = if norm > cfg.clip_norm {
            cfg.clip_norm / norm
        } else {
            1.0
        };
        for (d, g) in g64.iter_mut().zip(&grads) {
            *d = *g as f64 * scale;
        }
        if cfg.cosine_decay {
            let phase = std::f64::consts::PI * step as f64 / cfg.steps as f64;
            opt.lr = cfg.learning_rate * 0.5 * (1.0 + phase.cos());
        }
        opt.update(&mut params, &g64);
    }
    let mut checkpoint = ckpt.clone();
    checkpoint.params = params;
    checkpoint.meta.steps += cfg.steps as u64;
    checkpoint.meta.dropout = cfg.dropout;
    Ok(TrainOutcome {
        checkpoint,
        loss_curve: curve,
    })
}
