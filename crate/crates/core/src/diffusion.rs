//! Variance-preserving diffusion: log-SNR schedules, forward noising, the
//! ancestral reverse step, the sampling loop, and the identities tying
//! ε-predictions to scores and posterior means.
//!
//! Conventions, with `ᾱ_t` the signal fraction at step `t` and `ᾱ_0 = 1`:
//!
//! * forward: `x_t = sqrt(ᾱ_t)·x_0 + σ̄_t·ε`, `σ̄_t = sqrt(1 − ᾱ_t)`
//! * score:   `∇log p_t(x) = −ε̂ / σ̄_t`
//! * reverse: `x_{t−1} = a_t·(x_t − g_t·ε̂) + s_t·ξ` with
//!   `a_t = 1/sqrt(α_t)`, `g_t = β_t/σ̄_t`, `s_t² = β_t·(1 − ᾱ_{t−1})/(1 − ᾱ_t)`,
//!   where `α_t = ᾱ_t/ᾱ_{t−1}` and `β_t = 1 − α_t`. This is the ancestral
//!   DDPM posterior with the smaller of the two usual variances. The noise
//!   `ξ` is added after the rescaling, not inside it.

use ndarray::{Array2, ArrayView2, Zip};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::{self, Purpose};
use crate::tensor::VideoTensor;

/// Coefficients of one reverse step `x_{t−1} = sample_scale·(x_t − eps_scale·ε̂) + noise_std·ξ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepCoefficients {
    pub sample_scale: f64,
    pub eps_scale: f64,
    pub noise_std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    /// `alpha_bar[t]` for `t = 0..=T`, with `alpha_bar[0] = 1`.
    alpha_bar: Vec<f64>,
    coeffs: Vec<StepCoefficients>,
    logsnr_range: Option<(f64, f64)>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl NoiseSchedule {
    /// Linear log-SNR ramp: `logsnr(1) = logsnr_max`, `logsnr(T) = logsnr_min`,
    /// and `ᾱ_t = sigmoid(logsnr(t))`.
    pub fn new(num_steps: usize, logsnr_min: f64, logsnr_max: f64) -> Result<Self> {
        if num_steps < 2 {
            return Err(Error::invalid(format!("schedule needs T >= 2, got {num_steps}")));
        }
        if !(logsnr_min < logsnr_max) || !logsnr_min.is_finite() || !logsnr_max.is_finite() {
            return Err(Error::invalid(format!(
                "log-SNR range must be finite and increasing, got [{logsnr_min}, {logsnr_max}]"
            )));
        }
        let mut alpha_bar = vec![1.0];
        for t in 1..=num_steps {
            alpha_bar.push(sigmoid(Self::ramp(t, num_steps, logsnr_min, logsnr_max)));
        }
        let mut s = Self::from_alpha_bar_full(alpha_bar)?;
        s.logsnr_range = Some((logsnr_min, logsnr_max));
        Ok(s)
    }

    fn ramp(t: usize, steps: usize, lo: f64, hi: f64) -> f64 {
        hi + (lo - hi) * (t - 1) as f64 / (steps - 1) as f64
    }

    /// Builds a schedule from explicit `ᾱ_1..ᾱ_T`, strictly decreasing in (0, 1].
    /// Allows degenerate one-step schedules.
    pub fn from_alpha_bar(values: &[f64]) -> Result<Self> {
        let mut alpha_bar = vec![1.0];
        alpha_bar.extend_from_slice(values);
        Self::from_alpha_bar_full(alpha_bar)
    }

    fn from_alpha_bar_full(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.len() < 2 {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        for t in 1..alpha_bar.len() {
            let a = alpha_bar[t];
            if !(a > 0.0 && a <= 1.0) {
                return Err(Error::invalid(format!("alpha_bar[{t}] = {a} outside (0, 1]")));
            }
            if t >= 2 && !(a < alpha_bar[t - 1]) {
                return Err(Error::invalid(format!("alpha_bar not decreasing at step {t}")));
            }
        }
        let mut coeffs = vec![StepCoefficients {
            sample_scale: 1.0,
            eps_scale: 0.0,
            noise_std: 0.0,
        }];
        for t in 1..alpha_bar.len() {
            let (ab, ab_prev) = (alpha_bar[t], alpha_bar[t - 1]);
            let alpha = ab / ab_prev;
            let beta = 1.0 - alpha;
            let one_minus = 1.0 - ab;
            let eps_scale = if one_minus > 0.0 { beta / one_minus.sqrt() } else { 0.0 };
            let var = if one_minus > 0.0 {
                (beta * (1.0 - ab_prev) / one_minus).max(0.0)
            } else {
                0.0
            };
            let c = StepCoefficients {
                sample_scale: 1.0 / alpha.sqrt(),
                eps_scale,
                noise_std: var.sqrt(),
            };
            if !(c.sample_scale.is_finite() && c.eps_scale.is_finite() && c.noise_std.is_finite()) {
                return Err(Error::NonFinite(format!("step coefficients at t = {t}")));
            }
            coeffs.push(c);
        }
        Ok(Self {
            alpha_bar,
            coeffs,
            logsnr_range: None,
        })
    }

    pub fn num_steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    /// The log-SNR endpoints, when built from a ramp.
    pub fn logsnr_range(&self) -> Option<(f64, f64)> {
        self.logsnr_range
    }

    /// `ᾱ_t` for `t ∈ 0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn sigma_bar(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar[t]).sqrt()
    }

    /// Exact ramp value where available, otherwise recovered from `ᾱ_t`.
    pub fn logsnr(&self, t: usize) -> f64 {
        match self.logsnr_range {
            Some((lo, hi)) if t >= 1 => Self::ramp(t, self.num_steps(), lo, hi),
            _ => {
                let a = self.alpha_bar[t];
                (a / (1.0 - a)).ln()
            }
        }
    }

    pub fn coefficients(&self, t: usize) -> StepCoefficients {
        self.coeffs[t]
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.num_steps() {
            Err(Error::StepOutOfRange {
                step: t,
                max: self.num_steps(),
            })
        } else {
            Ok(())
        }
    }
}

/// A batch of noisy clips (one per row) at diffusion step `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisySample {
    pub x: Array2<f32>,
    pub t: usize,
}

impl NoisySample {
    pub fn new(x: Array2<f32>, t: usize) -> Self {
        Self { x, t }
    }

    pub fn single(row: &[f32], t: usize) -> Self {
        Self {
            x: Array2::from_shape_vec((1, row.len()), row.to_vec()).unwrap(),
            t,
        }
    }
}

fn same_dim(a: &ArrayView2<f32>, b: &ArrayView2<f32>) -> Result<()> {
    if a.dim() != b.dim() {
        Err(Error::shape(&[a.nrows(), a.ncols()], &[b.nrows(), b.ncols()]))
    } else {
        Ok(())
    }
}

/// `sqrt(ᾱ_t)·x0 + σ̄_t·ε`, row-wise.
pub fn forward_noise(
    x0: ArrayView2<f32>,
    t: usize,
    eps: ArrayView2<f32>,
    sched: &NoiseSchedule,
) -> Result<NoisySample> {
    same_dim(&x0, &eps)?;
    sched.check_step(t)?;
    let (a, s) = (sched.alpha_bar(t).sqrt(), sched.sigma_bar(t));
    let x = Zip::from(&x0)
        .and(&eps)
        .map_collect(|&x, &e| (a * x as f64 + s * e as f64) as f32);
    Ok(NoisySample { x, t })
}

/// Mean over the batch of `‖ε − predict(forward_noise(x0, t, ε), t, cond)‖²`
/// with `t ~ U{1..T}` and `ε ~ N(0, I)` drawn per example from the
/// `(seed, Loss, example)` stream.
pub fn denoising_loss<C, P>(mut predict: P, batch: &[(VideoTensor, C)], sched: &NoiseSchedule, seed: u64) -> Result<f64>
where
    P: FnMut(&NoisySample, &C) -> Result<Array2<f32>>,
{
    if batch.is_empty() {
        return Err(Error::invalid("denoising loss needs a nonempty batch"));
    }
    let mut total = 0.0;
    for (i, (clip, cond)) in batch.iter().enumerate() {
        let (t, eps) = loss_draw(seed, i as u64, sched.num_steps(), clip.data().len());
        let x0 = ArrayView2::from_shape((1, clip.data().len()), clip.data()).unwrap();
        let e = ArrayView2::from_shape((1, eps.len()), &eps).unwrap();
        let noisy = forward_noise(x0, t, e, sched)?;
        let pred = predict(&noisy, cond)?;
        same_dim(&e, &pred.view())?;
        total += eps
            .iter()
            .zip(pred.iter())
            .map(|(&a, &b)| {
                let d = a as f64 - b as f64;
                d * d
            })
            .sum::<f64>();
    }
    Ok(total / batch.len() as f64)
}

/// The `(t, ε)` pair used for example `index` by [`denoising_loss`].
pub fn loss_draw(seed: u64, index: u64, num_steps: usize, dim: usize) -> (usize, Vec<f32>) {
    use rand::Rng;
    let mut r = rng::stream(seed, Purpose::Loss, index);
    let t = r.gen_range(1..=num_steps);
    (t, rng::normal_vec_f32(&mut r, dim))
}

/// One ancestral step from `t` to `t − 1`. Noise comes from the
/// `(seed, StepNoise, t)` stream; `deterministic` forces `ξ = 0`.
pub fn ddpm_step(
    sample: &NoisySample,
    eps_pred: ArrayView2<f32>,
    sched: &NoiseSchedule,
    seed: u64,
    deterministic: bool,
) -> Result<NoisySample> {
    if sample.t == 0 {
        return Err(Error::invalid("cannot step below t = 0"));
    }
    sched.check_step(sample.t)?;
    same_dim(&sample.x.view(), &eps_pred)?;
    let c = sched.coefficients(sample.t);
    let mut out = Zip::from(&sample.x)
        .and(&eps_pred)
        .map_collect(|&x, &e| (c.sample_scale * (x as f64 - c.eps_scale * e as f64)) as f32);
    if !deterministic && c.noise_std > 0.0 {
        let mut r = rng::stream(seed, Purpose::StepNoise, sample.t as u64);
        for v in out.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut r);
            *v = (*v as f64 + c.noise_std * z) as f32;
        }
    }
    Ok(NoisySample {
        x: out,
        t: sample.t - 1,
    })
}

/// Unadjusted Langevin refinement run at every noise level before the
/// reverse step. The step size at level `t` is `step_size·σ̄_t²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Corrector {
    pub steps: usize,
    pub step_size: f64,
}

/// `N(0, I)` initial batch from the `(seed, InitialNoise, 0)` stream.
pub fn initial_noise(rows: usize, dim: usize, seed: u64) -> Array2<f32> {
    let mut r = rng::stream(seed, Purpose::InitialNoise, 0);
    Array2::from_shape_vec((rows, dim), rng::normal_vec_f32(&mut r, rows * dim)).unwrap()
}

/// Runs the full reverse chain from `x_T ~ N(0, I)` and returns `x_0`.
///
/// `eps_fn` is called once per step (plus once per corrector iteration);
/// its errors are wrapped with the step index.
pub fn sample_loop<F>(
    mut eps_fn: F,
    sched: &NoiseSchedule,
    rows: usize,
    dim: usize,
    seed: u64,
    corrector: Option<Corrector>,
) -> Result<Array2<f32>>
where
    F: FnMut(&NoisySample) -> Result<Array2<f32>>,
{
    let mut cur = NoisySample::new(initial_noise(rows, dim, seed), sched.num_steps());
    let mut call = |s: &NoisySample| -> Result<Array2<f32>> {
        let e = eps_fn(s).map_err(|e| Error::Sampling {
            step: s.t,
            source: Box::new(e),
        })?;
        if e.dim() != s.x.dim() {
            return Err(Error::Sampling {
                step: s.t,
                source: Box::new(Error::shape(&[s.x.nrows(), s.x.ncols()], &[e.nrows(), e.ncols()])),
            });
        }
        Ok(e)
    };
    while cur.t > 0 {
        if let Some(c) = corrector {
            langevin_correct(&mut cur, &mut call, sched, seed, c)?;
        }
        let eps = call(&cur)?;
        cur = ddpm_step(&cur, eps.view(), sched, seed, false)?;
    }
    Ok(cur.x)
}

fn langevin_correct<F>(
    cur: &mut NoisySample,
    call: &mut F,
    sched: &NoiseSchedule,
    seed: u64,
    c: Corrector,
) -> Result<()>
where
    F: FnMut(&NoisySample) -> Result<Array2<f32>>,
{
    let sb = sched.sigma_bar(cur.t);
    if sb <= 0.0 {
        return Ok(());
    }
    let eta = c.step_size * sb * sb;
    let noise = (2.0 * eta).sqrt();
    for k in 0..c.steps {
        let eps = call(cur)?;
        let mut r = rng::stream(seed, Purpose::Corrector, rng::index2(cur.t as u64, k as u64));
        Zip::from(&mut cur.x).and(&eps).for_each(|x, &e| {
            let z: f64 = StandardNormal.sample(&mut r);
            let score = -(e as f64) / sb;
            *x = (*x as f64 + eta * score + noise * z) as f32;
        });
    }
    Ok(())
}

/// `m(y) = y + σ²·∇log p(y)`: the posterior mean of the clean signal given
/// `y = x + σ·n`.
pub fn tweedie_posterior_mean(y: &[f64], score_at_y: &[f64], sigma: f64) -> Result<Vec<f64>> {
    if y.len() != score_at_y.len() {
        return Err(Error::shape(&[y.len()], &[score_at_y.len()]));
    }
    if !(sigma > 0.0) {
        return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
    }
    let s2 = sigma * sigma;
    Ok(y.iter().zip(score_at_y).map(|(y, s)| y + s2 * s).collect())
}

/// `∇log p_t = −ε̂/σ̄_t`.
pub fn eps_to_score(eps: ArrayView2<f32>, t: usize, sched: &NoiseSchedule) -> Result<Array2<f32>> {
    let sb = nonzero_sigma(t, sched)?;
    Ok(eps.mapv(|e| -e / sb))
}

/// Inverse of [`eps_to_score`]: `ε̂ = −σ̄_t·∇log p_t`.
pub fn score_to_eps(score: ArrayView2<f32>, t: usize, sched: &NoiseSchedule) -> Result<Array2<f32>> {
    let sb = nonzero_sigma(t, sched)?;
    Ok(score.mapv(|s| -s * sb))
}

fn nonzero_sigma(t: usize, sched: &NoiseSchedule) -> Result<f32> {
    sched.check_step(t)?;
    let sb = sched.sigma_bar(t) as f32;
    if sb == 0.0 {
        return Err(Error::invalid(format!("sigma_bar is zero at step {t}")));
    }
    Ok(sb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn schedule_rejects_bad_arguments() {
        assert!(NoiseSchedule::new(1, -20.0, 20.0).is_err());
        assert!(NoiseSchedule::new(10, 20.0, -20.0).is_err());
        assert!(NoiseSchedule::new(10, 1.0, 1.0).is_err());
    }

    #[test]
    fn thousand_step_schedule_endpoints() {
        let s = NoiseSchedule::new(1000, -20.0, 20.0).unwrap();
        assert_eq!(s.num_steps(), 1000);
        assert_eq!(s.logsnr(1), 20.0);
        assert_eq!(s.logsnr(1000), -20.0);
    }

    #[test]
    fn midpoint_is_half_signal() {
        let s = NoiseSchedule::new(1001, -20.0, 20.0).unwrap();
        assert_eq!(s.logsnr(501), 0.0);
        assert_eq!(s.alpha_bar(501), 0.5);
    }

    #[test]
    fn two_step_schedule_saturates() {
        let s = NoiseSchedule::new(2, -20.0, 20.0).unwrap();
        assert!((s.alpha_bar(1) - 1.0).abs() < 1e-8);
        assert!(s.alpha_bar(2).abs() < 1e-8);
    }

    #[test]
    fn schedule_invariants() {
        let s = NoiseSchedule::new(1000, -20.0, 20.0).unwrap();
        let slope = s.logsnr(2) - s.logsnr(1);
        for t in 1..=1000 {
            if t < 1000 {
                assert!(s.alpha_bar(t + 1) < s.alpha_bar(t));
            }
            let a = s.alpha_bar(t);
            let recovered = (a / (1.0 - a)).ln();
            assert!((recovered - s.logsnr(t)).abs() < 1e-6, "t={t}");
            let lin = s.logsnr(1) + slope * (t - 1) as f64;
            assert!((lin - s.logsnr(t)).abs() < 1e-10);
            let c = s.coefficients(t);
            assert!(c.noise_std >= 0.0 && c.sample_scale.is_finite() && c.eps_scale.is_finite());
        }
        // first reverse step is noise free
        assert_eq!(s.coefficients(1).noise_std, 0.0);
    }

    #[test]
    fn forward_noise_endpoints_and_algebra() {
        let x0 = array![[0.5f32, -0.25]];
        let eps = array![[1.0f32, 2.0]];
        let clean = NoiseSchedule::from_alpha_bar(&[1.0]).unwrap();
        assert_eq!(forward_noise(x0.view(), 1, eps.view(), &clean).unwrap().x, x0);

        let quarter = NoiseSchedule::from_alpha_bar(&[0.25]).unwrap();
        let y = forward_noise(array![[0.5f32]].view(), 1, array![[1.0f32]].view(), &quarter).unwrap();
        assert!((y.x[[0, 0]] - 1.116_025_4).abs() < 1e-5);

        let s = NoiseSchedule::new(2, -40.0, 40.0).unwrap();
        let y = forward_noise(x0.view(), 2, eps.view(), &s).unwrap();
        assert!((&y.x - &eps).iter().all(|d| d.abs() < 1e-7));
        assert!(forward_noise(x0.view(), 1, array![[1.0f32]].view(), &s).is_err());
    }

    #[test]
    fn deterministic_zero_eps_step_is_rescaling() {
        let s = NoiseSchedule::new(10, -5.0, 5.0).unwrap();
        let x = array![[1.0f32, -2.0, 0.5]];
        let out = ddpm_step(
            &NoisySample::new(x.clone(), 7),
            Array2::zeros((1, 3)).view(),
            &s,
            0,
            true,
        )
        .unwrap();
        assert_eq!(out.t, 6);
        let a = s.coefficients(7).sample_scale;
        for (o, i) in out.x.iter().zip(x.iter()) {
            assert_eq!(*o, (a * *i as f64) as f32);
        }
        let zero = NoisySample::new(x, 0);
        assert!(ddpm_step(&zero, Array2::zeros((1, 3)).view(), &s, 0, true).is_err());
    }

    #[test]
    fn conversion_edge_cases() {
        let s = NoiseSchedule::new(10, -5.0, 5.0).unwrap();
        let z = Array2::<f32>::zeros((2, 3));
        assert!(eps_to_score(z.view(), 3, &s).unwrap().iter().all(|v| *v == 0.0));
        assert!(eps_to_score(z.view(), 0, &s).is_err());
        assert!(eps_to_score(z.view(), 11, &s).is_err());
    }

    #[test]
    fn tweedie_rejects_bad_sigma() {
        assert!(tweedie_posterior_mean(&[1.0], &[0.0], 0.0).is_err());
        assert!(tweedie_posterior_mean(&[1.0], &[0.0, 1.0], 1.0).is_err());
    }

    #[test]
    fn loss_rejects_empty_batch() {
        let s = NoiseSchedule::new(10, -5.0, 5.0).unwrap();
        let batch: Vec<(VideoTensor, ())> = vec![];
        let r = denoising_loss(|n: &NoisySample, _: &()| Ok(n.x.clone()), &batch, &s, 0);
        assert!(r.is_err());
    }
}
