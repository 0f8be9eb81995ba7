//! Probabilistic adaptation: the pretrained prior and the small adapter are
//! combined as a product of experts by adding their ε-predictions (scores),
//! with the pretrained term scaled by the prior strength `γ`, and sampled
//! with classifier-free guidance of weight `α`.

use std::sync::Arc;

use ndarray::{Array2, ArrayView2, Zip};

use crate::denoiser::ConditionSpec;
use crate::diffusion::{sample_loop, Corrector, NoiseSchedule, NoisySample};
use crate::error::{Error, Result};

/// Anything that predicts ε for a batch of noisy samples.
pub trait ScoreSource: Send + Sync {
    /// Flat sample dimension.
    fn dim(&self) -> usize;
    /// Whether null conditions are meaningful (the source was trained with
    /// condition dropout or is analytic).
    fn has_unconditional(&self) -> bool;
    fn predict_eps(&self, sample: &NoisySample, cond: &ConditionSpec) -> Result<Array2<f32>>;
}

impl<S: ScoreSource + ?Sized> ScoreSource for &S {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn has_unconditional(&self) -> bool {
        (**self).has_unconditional()
    }
    fn predict_eps(&self, sample: &NoisySample, cond: &ConditionSpec) -> Result<Array2<f32>> {
        (**self).predict_eps(sample, cond)
    }
}

impl<S: ScoreSource + ?Sized> ScoreSource for Arc<S> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn has_unconditional(&self) -> bool {
        (**self).has_unconditional()
    }
    fn predict_eps(&self, sample: &NoisySample, cond: &ConditionSpec) -> Result<Array2<f32>> {
        (**self).predict_eps(sample, cond)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompositionConfig {
    /// Prior strength: weight of the pretrained ε.
    pub gamma: f64,
    /// Classifier-free guidance weight.
    pub alpha: f64,
    /// Fraction of the final reverse steps that use the adapter alone.
    pub cutoff_fraction: f64,
    pub mcmc_steps: usize,
    /// Langevin step at level `t` is `mcmc_step_size·σ̄_t²`.
    pub mcmc_step_size: f64,
}

impl Default for CompositionConfig {
    fn default() -> Self {
        Self {
            gamma: 0.2,
            alpha: 2.0,
            cutoff_fraction: 0.1,
            mcmc_steps: 0,
            mcmc_step_size: 0.1,
        }
    }
}

impl CompositionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) || !(self.alpha >= 0.0) {
            return Err(Error::invalid("gamma and alpha must be nonnegative"));
        }
        if !(0.0..=1.0).contains(&self.cutoff_fraction) {
            return Err(Error::invalid("cutoff fraction must be in [0, 1]"));
        }
        if self.mcmc_steps > 0 && !(self.mcmc_step_size > 0.0) {
            return Err(Error::invalid("MCMC step size must be positive"));
        }
        Ok(())
    }

    /// Steps `t ≤ cutoff_steps` skip the pretrained term.
    pub fn cutoff_steps(&self, num_steps: usize) -> usize {
        (self.cutoff_fraction * num_steps as f64).round() as usize
    }

    /// The Langevin corrector the composed sampler runs, if any.
    pub fn corrector(&self) -> Option<Corrector> {
        (self.mcmc_steps > 0).then_some(Corrector {
            steps: self.mcmc_steps,
            step_size: self.mcmc_step_size,
        })
    }
}

fn check_same(a: &ArrayView2<f32>, b: &ArrayView2<f32>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape(&[a.nrows(), a.ncols()], &[b.nrows(), b.ncols()]));
    }
    Ok(())
}

/// `ε_adapter + γ·ε_pretrained`. `γ = 0` returns the adapter term unchanged.
pub fn composed_eps(adapter: ArrayView2<f32>, pretrained: ArrayView2<f32>, gamma: f32) -> Result<Array2<f32>> {
    check_same(&adapter, &pretrained)?;
    if !(gamma >= 0.0) {
        return Err(Error::invalid("gamma must be nonnegative"));
    }
    if gamma == 0.0 {
        return Ok(adapter.to_owned());
    }
    Ok(Zip::from(&adapter).and(&pretrained).map_collect(|&a, &p| a + gamma * p))
}

/// Classifier-free guidance `u + α·(c − u)`. `α = 0` returns `u` and
/// `α = 1` returns `c` unchanged.
pub fn cfg_eps(uncond: ArrayView2<f32>, cond: ArrayView2<f32>, alpha: f32) -> Result<Array2<f32>> {
    check_same(&uncond, &cond)?;
    if alpha == 0.0 {
        return Ok(uncond.to_owned());
    }
    if alpha == 1.0 {
        return Ok(cond.to_owned());
    }
    Ok(Zip::from(&uncond).and(&cond).map_collect(|&u, &c| u + alpha * (c - u)))
}

/// The guided composed prediction
/// `ε_θ(τ) + α·(ε_θ(τ|c) + γ·ε_pre(τ|c) − ε_θ(τ))`.
pub fn adapter_cfg_eps(
    uncond: ArrayView2<f32>,
    cond_adapter: ArrayView2<f32>,
    cond_pretrained: ArrayView2<f32>,
    alpha: f32,
    gamma: f32,
) -> Result<Array2<f32>> {
    let c = composed_eps(cond_adapter, cond_pretrained, gamma)?;
    cfg_eps(uncond, c.view(), alpha)
}

/// Linear interpolation of two complete guided predictions:
/// `(1 − w)·cfg(adapter) + w·cfg(pretrained)`.
pub fn cfg_mix_eps(
    adapter: (ArrayView2<f32>, ArrayView2<f32>),
    pretrained: (ArrayView2<f32>, ArrayView2<f32>),
    alpha: f32,
    weight: f32,
) -> Result<Array2<f32>> {
    if !(0.0..=1.0).contains(&weight) {
        return Err(Error::invalid(format!("mix weight must be in [0, 1], got {weight}")));
    }
    let a = cfg_eps(adapter.0, adapter.1, alpha)?;
    let p = cfg_eps(pretrained.0, pretrained.1, alpha)?;
    check_same(&a.view(), &p.view())?;
    if weight == 0.0 {
        return Ok(a);
    }
    if weight == 1.0 {
        return Ok(p);
    }
    Ok(Zip::from(&a)
        .and(&p)
        .map_collect(|&a, &p| (1.0 - weight) * a + weight * p))
}

fn check_dim(source: &dyn ScoreSource, dim: usize, name: &str) -> Result<()> {
    if source.dim() != dim {
        return Err(Error::invalid(format!(
            "{name} score source has dimension {}, expected {dim}",
            source.dim()
        )));
    }
    Ok(())
}

fn guided(source: &dyn ScoreSource, sample: &NoisySample, cond: &ConditionSpec, alpha: f32) -> Result<Array2<f32>> {
    let c = source.predict_eps(sample, cond)?;
    if alpha == 1.0 {
        return Ok(c);
    }
    let u = source.predict_eps(sample, &cond.to_null())?;
    cfg_eps(u.view(), c.view(), alpha)
}

/// Composed sampling: the reverse chain driven by [`adapter_cfg_eps`], with
/// the pretrained term dropped for the last `cutoff_fraction` of steps and an
/// optional Langevin corrector at each level. Returns `rows × dim` samples.
pub fn video_adapter_sample(
    adapter: &dyn ScoreSource,
    pretrained: &dyn ScoreSource,
    cfg: &CompositionConfig,
    sched: &NoiseSchedule,
    cond: &ConditionSpec,
    rows: usize,
    seed: u64,
) -> Result<Array2<f32>> {
    cfg.validate()?;
    let dim = adapter.dim();
    check_dim(pretrained, dim, "pretrained")?;
    let (alpha, gamma) = (cfg.alpha as f32, cfg.gamma as f32);
    if alpha != 1.0 && !adapter.has_unconditional() {
        return Err(Error::invalid(
            "guided sampling needs an adapter with an unconditional branch",
        ));
    }
    let cutoff = cfg.cutoff_steps(sched.num_steps());
    let eps_fn = |s: &NoisySample| -> Result<Array2<f32>> {
        let ca = adapter.predict_eps(s, cond)?;
        let c = if gamma > 0.0 && s.t > cutoff {
            let cp = pretrained.predict_eps(s, cond)?;
            composed_eps(ca.view(), cp.view(), gamma)?
        } else {
            ca
        };
        if alpha == 1.0 {
            return Ok(c);
        }
        let u = adapter.predict_eps(s, &cond.to_null())?;
        cfg_eps(u.view(), c.view(), alpha)
    };
    sample_loop(eps_fn, sched, rows, dim, seed, cfg.corrector())
}

/// Classifier-free guided sampling from a single source.
pub fn cfg_sample(
    source: &dyn ScoreSource,
    alpha: f64,
    sched: &NoiseSchedule,
    cond: &ConditionSpec,
    rows: usize,
    seed: u64,
    corrector: Option<Corrector>,
) -> Result<Array2<f32>> {
    let alpha = alpha as f32;
    if alpha != 1.0 && !source.has_unconditional() {
        return Err(Error::invalid("guided sampling needs an unconditional branch"));
    }
    sample_loop(
        |s| guided(source, s, cond, alpha),
        sched,
        rows,
        source.dim(),
        seed,
        corrector,
    )
}

/// Sampling with [`cfg_mix_eps`] at every step.
#[allow(clippy::too_many_arguments)]
pub fn cfg_mix_sample(
    adapter: &dyn ScoreSource,
    pretrained: &dyn ScoreSource,
    alpha: f64,
    weight: f64,
    sched: &NoiseSchedule,
    cond: &ConditionSpec,
    rows: usize,
    seed: u64,
) -> Result<Array2<f32>> {
    let dim = adapter.dim();
    check_dim(pretrained, dim, "pretrained")?;
    let (alpha, weight) = (alpha as f32, weight as f32);
    if alpha != 1.0 && !(adapter.has_unconditional() && pretrained.has_unconditional()) {
        return Err(Error::invalid("CFG mixing needs unconditional branches on both models"));
    }
    let null = cond.to_null();
    let eps_fn = |s: &NoisySample| -> Result<Array2<f32>> {
        let ca = adapter.predict_eps(s, cond)?;
        let cp = pretrained.predict_eps(s, cond)?;
        let (ua, up) = if alpha == 1.0 {
            (ca.clone(), cp.clone())
        } else {
            (adapter.predict_eps(s, &null)?, pretrained.predict_eps(s, &null)?)
        };
        cfg_mix_eps((ua.view(), ca.view()), (up.view(), cp.view()), alpha, weight)
    };
    sample_loop(eps_fn, sched, rows, dim, seed, None)
}
