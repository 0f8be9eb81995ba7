use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use ndarray::Array2;
use proptest::prelude::*;
use vadapter::adapter::*;
use vadapter::denoiser::ConditionSpec;
use vadapter::diffusion::{NoiseSchedule, NoisySample};
use vadapter::oracle::GmmScoreSource;
use vadapter::worlds::GmmSpec;

fn sched() -> NoiseSchedule {
    NoiseSchedule::new(40, -12.0, 12.0).unwrap()
}

fn source(cond: Vec<Vec<f64>>, uncond: Vec<Vec<f64>>) -> GmmScoreSource {
    GmmScoreSource {
        conditional: GmmSpec::isotropic(cond, 0.3).unwrap(),
        unconditional: Some(GmmSpec::isotropic(uncond, 0.5).unwrap()),
        schedule: sched(),
    }
}

fn adapter() -> GmmScoreSource {
    source(vec![vec![1.0, 0.0]], vec![vec![0.0, 0.0], vec![1.0, 1.0]])
}

fn pretrained() -> GmmScoreSource {
    source(vec![vec![-1.0, 0.5], vec![0.0, -1.0]], vec![vec![0.0, 0.0]])
}

fn bits_equal(a: &Array2<f32>, b: &Array2<f32>) -> bool {
    a.dim() == b.dim() && a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn cfg(gamma: f64, alpha: f64, cutoff: f64) -> CompositionConfig {
    CompositionConfig {
        gamma,
        alpha,
        cutoff_fraction: cutoff,
        ..Default::default()
    }
}

#[test]
fn zero_gamma_is_adapter_cfg_bitwise() {
    let (a, p, s) = (adapter(), pretrained(), sched());
    let cond = ConditionSpec::label(0);
    for seed in 0..3 {
        let composed = video_adapter_sample(&a, &p, &cfg(0.0, 2.0, 0.0), &s, &cond, 64, seed).unwrap();
        let plain = cfg_sample(&a, 2.0, &s, &cond, 64, seed, None).unwrap();
        assert!(bits_equal(&composed, &plain), "seed {seed}");
    }
}

#[test]
fn zero_alpha_is_unconditional_bitwise() {
    let (a, p, s) = (adapter(), pretrained(), sched());
    let composed = video_adapter_sample(&a, &p, &cfg(0.5, 0.0, 0.1), &s, &ConditionSpec::label(0), 32, 4).unwrap();
    let uncond = cfg_sample(&a, 1.0, &s, &ConditionSpec::null(), 32, 4, None).unwrap();
    assert!(bits_equal(&composed, &uncond));
}

#[test]
fn unit_alpha_zero_gamma_is_conditional_bitwise() {
    let (a, p, s) = (adapter(), pretrained(), sched());
    let cond = ConditionSpec::label(0);
    let composed = video_adapter_sample(&a, &p, &cfg(0.0, 1.0, 0.3), &s, &cond, 32, 5).unwrap();
    let direct = vadapter::diffusion::sample_loop(|x| a.predict_eps(x, &cond), &s, 32, 2, 5, None).unwrap();
    assert!(bits_equal(&composed, &direct));
}

#[test]
fn sources_commute_at_unit_gamma() {
    // a + 1·p and p + 1·a are the same f32 sums
    let (a, p, s) = (adapter(), pretrained(), sched());
    let cond = ConditionSpec::label(0);
    let c = cfg(1.0, 1.0, 0.0);
    let ab = video_adapter_sample(&a, &p, &c, &s, &cond, 32, 6).unwrap();
    let ba = video_adapter_sample(&p, &a, &c, &s, &cond, 32, 6).unwrap();
    assert!(bits_equal(&ab, &ba));
}

#[test]
fn cfg_mix_endpoints_are_the_single_models() {
    let (a, p, s) = (adapter(), pretrained(), sched());
    let cond = ConditionSpec::label(0);
    let at0 = cfg_mix_sample(&a, &p, 2.0, 0.0, &s, &cond, 16, 7).unwrap();
    assert!(bits_equal(&at0, &cfg_sample(&a, 2.0, &s, &cond, 16, 7, None).unwrap()));
    let at1 = cfg_mix_sample(&a, &p, 2.0, 1.0, &s, &cond, 16, 7).unwrap();
    assert!(bits_equal(&at1, &cfg_sample(&p, 2.0, &s, &cond, 16, 7, None).unwrap()));
}

#[test]
fn stronger_prior_pulls_samples_toward_it() {
    // adapter N(1, 0.3), prior N(−1, 0.3): the tempered product has mean
    // (1 − γ)/(1 + γ)
    let s = NoiseSchedule::new(100, -12.0, 12.0).unwrap();
    let one = |m: f64| GmmScoreSource {
        conditional: GmmSpec::isotropic(vec![vec![m]], 0.3).unwrap(),
        unconditional: None,
        schedule: s.clone(),
    };
    let (a, p) = (one(1.0), one(-1.0));
    let mut last = f64::INFINITY;
    for gamma in [0.0, 0.5, 1.0, 2.0] {
        let c = CompositionConfig {
            gamma,
            alpha: 1.0,
            cutoff_fraction: 0.0,
            mcmc_steps: 2,
            mcmc_step_size: 0.1,
        };
        let x = video_adapter_sample(&a, &p, &c, &s, &ConditionSpec::label(0), 4000, 8).unwrap();
        let mean = x.iter().map(|&v| v as f64).sum::<f64>() / 4000.0;
        let expect = (1.0 - gamma) / (1.0 + gamma);
        assert!(mean < last, "γ={gamma}: mean {mean} did not decrease");
        assert!((mean - expect).abs() < 0.05, "γ={gamma}: mean {mean} vs {expect}");
        last = mean;
    }
}

/// Counts calls per (branch, step) and delegates to an analytic source.
struct Counting {
    inner: GmmScoreSource,
    uncond: AtomicUsize,
    steps: Mutex<Vec<usize>>,
}

impl Counting {
    fn new(inner: GmmScoreSource) -> Self {
        Self {
            inner,
            uncond: AtomicUsize::new(0),
            steps: Mutex::new(Vec::new()),
        }
    }
}

impl ScoreSource for Counting {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn has_unconditional(&self) -> bool {
        true
    }

    fn predict_eps(&self, sample: &NoisySample, cond: &ConditionSpec) -> vadapter::Result<Array2<f32>> {
        if cond.is_null {
            self.uncond.fetch_add(1, Ordering::Relaxed);
        }
        self.steps.lock().unwrap().push(sample.t);
        self.inner.predict_eps(sample, cond)
    }
}

#[test]
fn skipped_branches_are_not_evaluated() {
    let s = sched();
    let (a, p) = (Counting::new(adapter()), Counting::new(pretrained()));
    video_adapter_sample(&a, &p, &cfg(0.5, 1.0, 0.25), &s, &ConditionSpec::label(0), 4, 1).unwrap();
    assert_eq!(a.uncond.load(Ordering::Relaxed), 0);
    let steps = p.steps.lock().unwrap().clone();
    assert_eq!(steps.len(), 30);
    assert!(steps.iter().all(|&t| t > 10));
    let (a, p) = (Counting::new(adapter()), Counting::new(pretrained()));
    video_adapter_sample(&a, &p, &cfg(0.0, 2.0, 0.0), &s, &ConditionSpec::label(0), 4, 1).unwrap();
    assert!(p.steps.lock().unwrap().is_empty());
    assert_eq!(a.uncond.load(Ordering::Relaxed), 40);
}

#[test]
fn mismatched_sources_and_bad_configs_are_rejected() {
    let s = sched();
    let one_d = GmmScoreSource {
        conditional: GmmSpec::isotropic(vec![vec![0.0]], 1.0).unwrap(),
        unconditional: None,
        schedule: s.clone(),
    };
    let cond = ConditionSpec::label(0);
    assert!(video_adapter_sample(&adapter(), &one_d, &cfg(0.5, 1.0, 0.0), &s, &cond, 2, 0).is_err());
    assert!(video_adapter_sample(&adapter(), &pretrained(), &cfg(-0.5, 1.0, 0.0), &s, &cond, 2, 0).is_err());
    assert!(video_adapter_sample(&adapter(), &pretrained(), &cfg(0.5, 1.0, 1.5), &s, &cond, 2, 0).is_err());
}

proptest! {
    #[test]
    fn guidance_algebra(
        u in prop::collection::vec(-5.0f32..5.0, 6),
        c in prop::collection::vec(-5.0f32..5.0, 6),
        p in prop::collection::vec(-5.0f32..5.0, 6),
        alpha in 0.0f32..4.0,
        gamma in 0.0f32..2.0,
    ) {
        let view = |v: &Vec<f32>| Array2::from_shape_vec((2, 3), v.clone()).unwrap();
        let (u, c, p) = (view(&u), view(&c), view(&p));
        let e = adapter_cfg_eps(u.view(), c.view(), p.view(), alpha, gamma).unwrap();
        for i in 0..6 {
            let (ui, ci, pi) = (u.as_slice().unwrap()[i] as f64, c.as_slice().unwrap()[i] as f64, p.as_slice().unwrap()[i] as f64);
            let expect = ui + alpha as f64 * (ci + gamma as f64 * pi - ui);
            prop_assert!((e.as_slice().unwrap()[i] as f64 - expect).abs() <= 1e-4 * expect.abs().max(1.0));
        }
        prop_assert!(bits_equal(&composed_eps(c.view(), p.view(), 0.0).unwrap(), &c));
        prop_assert!(bits_equal(&cfg_eps(u.view(), c.view(), 0.0).unwrap(), &u));
        prop_assert!(bits_equal(&cfg_eps(u.view(), c.view(), 1.0).unwrap(), &c));
    }
}
