//! Independent ground truth, all in f64: analytic noisy mixture scores,
//! brute-force product densities on grids, annealed Langevin on analytic
//! energies, quadrature posterior means, and finite differences.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::adapter::ScoreSource;
use crate::denoiser::ConditionSpec;
use crate::diffusion::{NoiseSchedule, NoisySample};
use crate::error::{Error, Result};
use crate::rng::{self, Purpose};
use crate::worlds::GmmSpec;

/// Smoothing added to every histogram bin before taking logs.
pub const KL_SMOOTHING: f64 = 1e-12;

/// `∇log p_t(x)` for the mixture pushed through the forward process to step `t`.
pub fn gmm_noisy_score(x: &[f64], t: usize, spec: &GmmSpec, sched: &NoiseSchedule) -> Result<Vec<f64>> {
    sched.check_step(t)?;
    if x.len() != spec.dim() {
        return Err(Error::shape(&[spec.dim()], &[x.len()]));
    }
    Ok(spec.noised(sched.alpha_bar(t)).score(x))
}

/// A scalar energy `E(x)` with `p ∝ exp(−E)`.
pub trait EnergyFunction {
    fn dim(&self) -> usize;
    fn energy(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        finite_diff_grad(|y| self.energy(y), x, 1e-5).expect("positive step")
    }
}

/// `E = −log p` for a mixture.
pub struct GmmEnergy(pub GmmSpec);

impl EnergyFunction for GmmEnergy {
    fn dim(&self) -> usize {
        self.0.dim()
    }
    fn energy(&self, x: &[f64]) -> f64 {
        -self.0.log_density(x)
    }
    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        self.0.score(x).into_iter().map(|g| -g).collect()
    }
}

/// `E' = E₁ + E₂ + …`: the energy of the (unnormalized) product density.
pub struct SumEnergy(pub Vec<Box<dyn EnergyFunction>>);

impl EnergyFunction for SumEnergy {
    fn dim(&self) -> usize {
        self.0.first().map_or(0, |e| e.dim())
    }
    fn energy(&self, x: &[f64]) -> f64 {
        self.0.iter().map(|e| e.energy(x)).sum()
    }
    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        for e in &self.0 {
            for (a, b) in g.iter_mut().zip(e.gradient(x)) {
                *a += b;
            }
        }
        g
    }
}

/// Central differences, one coordinate at a time.
pub fn finite_diff_grad<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], h: f64) -> Result<Vec<f64>> {
    if !(h > 0.0) {
        return Err(Error::invalid(format!("step must be positive, got {h}")));
    }
    let mut y = x.to_vec();
    let mut g = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        y[i] = x[i] + h;
        let up = f(&y);
        y[i] = x[i] - h;
        let down = f(&y);
        y[i] = x[i];
        g.push((up - down) / (2.0 * h));
    }
    Ok(g)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridAxis {
    pub lo: f64,
    pub hi: f64,
    pub bins: usize,
}

impl GridAxis {
    pub fn new(lo: f64, hi: f64, bins: usize) -> Self {
        Self { lo, hi, bins }
    }

    pub fn width(&self) -> f64 {
        (self.hi - self.lo) / self.bins as f64
    }

    pub fn center(&self, i: usize) -> f64 {
        self.lo + (i as f64 + 0.5) * self.width()
    }

    fn bin_of(&self, x: f64) -> Option<usize> {
        if !(x >= self.lo && x < self.hi) {
            return None;
        }
        Some((((x - self.lo) / self.width()) as usize).min(self.bins - 1))
    }
}

/// Probability masses on a rectangular grid, row-major over axes.
#[derive(Debug, Clone, PartialEq)]
pub struct GridDensity {
    axes: Vec<GridAxis>,
    mass: Vec<f64>,
    normalized: bool,
}

impl GridDensity {
    fn validate_axes(axes: &[GridAxis]) -> Result<usize> {
        if axes.is_empty() {
            return Err(Error::invalid("grid needs at least one axis"));
        }
        let mut n = 1usize;
        for a in axes {
            if a.bins == 0 || !(a.lo < a.hi) {
                return Err(Error::invalid(format!("bad grid axis {a:?}")));
            }
            n *= a.bins;
        }
        Ok(n)
    }

    fn cell_coords(&self, mut idx: usize, out: &mut [usize]) {
        for d in (0..self.axes.len()).rev() {
            out[d] = idx % self.axes[d].bins;
            idx /= self.axes[d].bins;
        }
    }

    /// Masses `f(center)·cell volume`, normalized.
    pub fn from_density(axes: Vec<GridAxis>, f: impl Fn(&[f64]) -> f64) -> Result<Self> {
        Self::from_density_refined(axes, 1, f)
    }

    /// Like [`from_density`](Self::from_density) but averages `f` over a
    /// `sub^d` midpoint lattice inside each cell.
    pub fn from_density_refined(axes: Vec<GridAxis>, sub: usize, f: impl Fn(&[f64]) -> f64) -> Result<Self> {
        let n = Self::validate_axes(&axes)?;
        let sub = sub.max(1);
        let dims = axes.len();
        let mut g = GridDensity {
            axes,
            mass: vec![0.0; n],
            normalized: false,
        };
        let mut coords = vec![0usize; dims];
        let mut point = vec![0.0; dims];
        let inner = sub.pow(dims as u32);
        for i in 0..n {
            g.cell_coords(i, &mut coords);
            let mut acc = 0.0;
            for s in 0..inner {
                let mut rem = s;
                for d in (0..dims).rev() {
                    let k = rem % sub;
                    rem /= sub;
                    let a = g.axes[d];
                    point[d] = a.lo + (coords[d] as f64 + (k as f64 + 0.5) / sub as f64) * a.width();
                }
                acc += f(&point);
            }
            g.mass[i] = acc / inner as f64;
        }
        g.normalize()?;
        Ok(g)
    }

    pub fn uniform(axes: Vec<GridAxis>) -> Result<Self> {
        let n = Self::validate_axes(&axes)?;
        Ok(GridDensity {
            axes,
            mass: vec![1.0 / n as f64; n],
            normalized: true,
        })
    }

    /// Normalized histogram of the rows of `samples`; rows outside the grid
    /// are dropped. Returns the density and the fraction of rows kept.
    pub fn histogram(axes: Vec<GridAxis>, samples: ArrayView2<f64>) -> Result<(Self, f64)> {
        let n = Self::validate_axes(&axes)?;
        if samples.ncols() != axes.len() {
            return Err(Error::shape(&[axes.len()], &[samples.ncols()]));
        }
        let mut mass = vec![0.0; n];
        let mut kept = 0usize;
        'rows: for row in samples.rows() {
            let mut idx = 0usize;
            for (d, a) in axes.iter().enumerate() {
                match a.bin_of(row[d]) {
                    Some(b) => idx = idx * a.bins + b,
                    None => continue 'rows,
                }
            }
            mass[idx] += 1.0;
            kept += 1;
        }
        let mut g = GridDensity {
            axes,
            mass,
            normalized: false,
        };
        g.normalize()?;
        Ok((g, kept as f64 / samples.nrows().max(1) as f64))
    }

    pub fn normalize(&mut self) -> Result<()> {
        let s: f64 = self.mass.iter().sum();
        if !(s > 0.0) || !s.is_finite() {
            return Err(Error::ZeroMass);
        }
        for m in &mut self.mass {
            *m /= s;
        }
        self.normalized = true;
        Ok(())
    }

    pub fn axes(&self) -> &[GridAxis] {
        &self.axes
    }

    pub fn masses(&self) -> &[f64] {
        &self.mass
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn same_grid(&self, other: &GridDensity) -> bool {
        self.axes == other.axes
    }

    /// `p^γ`, renormalized: the tempered density.
    pub fn powf(&self, gamma: f64) -> Result<GridDensity> {
        let mut g = GridDensity {
            axes: self.axes.clone(),
            mass: self
                .mass
                .iter()
                .map(|m| if *m > 0.0 { m.powf(gamma) } else { 0.0 })
                .collect(),
            normalized: false,
        };
        g.normalize()?;
        Ok(g)
    }

    fn check_grid(&self, other: &GridDensity) -> Result<()> {
        if !self.same_grid(other) {
            return Err(Error::invalid("densities live on different grids"));
        }
        Ok(())
    }

    pub fn total_variation(&self, other: &GridDensity) -> Result<f64> {
        self.check_grid(other)?;
        Ok(0.5
            * self
                .mass
                .iter()
                .zip(&other.mass)
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>())
    }

    /// `KL(self ‖ other)` with [`KL_SMOOTHING`] added to every bin of both.
    pub fn kl(&self, other: &GridDensity) -> Result<f64> {
        self.check_grid(other)?;
        let n = self.mass.len() as f64;
        let zp = 1.0 + n * KL_SMOOTHING;
        let zq = 1.0 + n * KL_SMOOTHING;
        Ok(self
            .mass
            .iter()
            .zip(&other.mass)
            .map(|(p, q)| {
                let p = (p + KL_SMOOTHING) / zp;
                let q = (q + KL_SMOOTHING) / zq;
                p * (p / q).ln()
            })
            .sum::<f64>()
            .max(0.0))
    }
}

/// Pointwise product of two densities on one grid, renormalized.
pub fn enumerate_product(p1: &GridDensity, p2: &GridDensity) -> Result<GridDensity> {
    p1.check_grid(p2)?;
    let mut g = GridDensity {
        axes: p1.axes.clone(),
        mass: p1.mass.iter().zip(&p2.mass).map(|(a, b)| a * b).collect(),
        normalized: false,
    };
    g.normalize()?;
    Ok(g)
}

/// Default `c` in the per-level Langevin step `η = c·σ̄²`.
pub const DEFAULT_LANGEVIN_SCALE: f64 = 0.1;

/// Annealed Langevin dynamics over the schedule's noise levels, `T` down to 1.
///
/// At level `t` it runs `steps` updates `x ← x + η·s(x, t) + sqrt(2η)·ξ`
/// with `η = step_scale·σ̄_t²`, starting from `N(0, I)`. With `steps = 0`
/// the initial draw is returned unchanged.
pub fn langevin_sample<F>(
    score: F,
    dim: usize,
    n: usize,
    steps: usize,
    step_scale: f64,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<Array2<f64>>
where
    F: Fn(&[f64], usize) -> Vec<f64>,
{
    let mut r = rng::stream(seed, Purpose::Oracle, 0);
    let mut x = Array2::from_shape_vec((n, dim), rng::normal_vec_f64(&mut r, n * dim)).unwrap();
    if steps == 0 {
        return Ok(x);
    }
    for t in (1..=sched.num_steps()).rev() {
        let sb2 = 1.0 - sched.alpha_bar(t);
        let eta = step_scale * sb2;
        let noise = (2.0 * eta).sqrt();
        for k in 0..steps {
            let mut r = rng::stream(seed, Purpose::Oracle, rng::index2(t as u64, k as u64 + 1));
            for mut row in x.rows_mut() {
                let s = score(row.as_slice().unwrap(), t);
                for (v, g) in row.iter_mut().zip(&s) {
                    let z: f64 = StandardNormal.sample(&mut r);
                    *v += eta * g + noise * z;
                }
                if row.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("Langevin iterate at level {t}")));
                }
            }
        }
    }
    Ok(x)
}

// Gauss-Kronrod 7/15 nodes and weights (QUADPACK qk15).
const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn gk15<const N: usize>(f: &mut dyn FnMut(f64) -> [f64; N], a: f64, b: f64) -> ([f64; N], f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let mut kron = [0.0; N];
    let mut gauss = [0.0; N];
    let fc = f(c);
    for k in 0..N {
        kron[k] = WGK[7] * fc[k];
        gauss[k] = WG[3] * fc[k];
    }
    for j in 0..7 {
        let dx = h * XGK[j];
        let (f1, f2) = (f(c - dx), f(c + dx));
        for k in 0..N {
            kron[k] += WGK[j] * (f1[k] + f2[k]);
            if j % 2 == 1 {
                gauss[k] += WG[j / 2] * (f1[k] + f2[k]);
            }
        }
    }
    let mut err = 0.0f64;
    for k in 0..N {
        kron[k] *= h;
        gauss[k] *= h;
        err = err.max((kron[k] - gauss[k]).abs());
    }
    (kron, err)
}

fn adaptive<const N: usize>(f: &mut dyn FnMut(f64) -> [f64; N], a: f64, b: f64, tol: f64, depth: usize) -> [f64; N] {
    let (v, err) = gk15(f, a, b);
    if err <= tol || depth == 0 {
        return v;
    }
    let m = 0.5 * (a + b);
    let l = adaptive(f, a, m, 0.5 * tol, depth - 1);
    let r = adaptive(f, m, b, 0.5 * tol, depth - 1);
    let mut out = [0.0; N];
    for k in 0..N {
        out[k] = l[k] + r[k];
    }
    out
}

/// Adaptive Gauss-Kronrod over consecutive breakpoints.
fn integrate<const N: usize>(f: &mut dyn FnMut(f64) -> [f64; N], breaks: &[f64], tol: f64) -> [f64; N] {
    let mut out = [0.0; N];
    for w in breaks.windows(2) {
        if w[1] > w[0] {
            let v = adaptive(f, w[0], w[1], tol, 40);
            for k in 0..N {
                out[k] += v[k];
            }
        }
    }
    out
}

/// Breakpoints along one axis bracketing every Gaussian term of the
/// posterior integrand `p(x)·N(y; x, σ²)`.
fn breakpoints(y: f64, spec: &GmmSpec, d: usize, sigma2: f64) -> Vec<f64> {
    let mut b = Vec::new();
    for (m, v) in spec.means().iter().zip(spec.variances()) {
        let (mu, var) = (m[d], v[d]);
        let center = (y * var + mu * sigma2) / (var + sigma2);
        let sd = (var * sigma2 / (var + sigma2)).sqrt();
        for k in [-14.0, -8.0, -4.0, -2.0, -1.0, 0.0, 1.0, 2.0, 4.0, 8.0, 14.0] {
            b.push(center + k * sd);
        }
    }
    b.sort_by(|a, b| a.partial_cmp(b).unwrap());
    b.dedup();
    b
}

/// `E[X | X + σ·N = y]` under a mixture prior, by adaptive quadrature of
/// `∫x·p(x)·N(y; x, σ²)dx / ∫p(x)·N(y; x, σ²)dx`. Dimensions 1 and 2 only.
pub fn posterior_mean_quadrature(y: &[f64], spec: &GmmSpec, sigma: f64) -> Result<Vec<f64>> {
    if y.len() != spec.dim() {
        return Err(Error::shape(&[spec.dim()], &[y.len()]));
    }
    if !(sigma > 0.0) {
        return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
    }
    let s2 = sigma * sigma;
    // shift logs by the largest integrand value among the component centres
    let log_w = |x: &[f64]| -> f64 {
        let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
        spec.log_density(x) - d2 / (2.0 * s2)
    };
    let mut shift = f64::NEG_INFINITY;
    for (m, v) in spec.means().iter().zip(spec.variances()) {
        let c: Vec<f64> = (0..y.len()).map(|d| (y[d] * v[d] + m[d] * s2) / (v[d] + s2)).collect();
        shift = shift.max(log_w(&c));
    }
    let tol = 1e-13;
    match y.len() {
        1 => {
            let br = breakpoints(y[0], spec, 0, s2);
            let mut f = |x: f64| {
                let w = (log_w(&[x]) - shift).exp();
                [w, x * w]
            };
            let [z, m] = integrate(&mut f, &br, tol);
            Ok(vec![m / z])
        }
        2 => {
            let b0 = breakpoints(y[0], spec, 0, s2);
            let b1 = breakpoints(y[1], spec, 1, s2);
            let mut outer = |x0: f64| {
                let mut inner = |x1: f64| {
                    let w = (log_w(&[x0, x1]) - shift).exp();
                    [w, x0 * w, x1 * w]
                };
                integrate(&mut inner, &b1, tol)
            };
            let [z, m0, m1] = integrate(&mut outer, &b0, tol);
            Ok(vec![m0 / z, m1 / z])
        }
        d => Err(Error::invalid(format!("quadrature supports dimension <= 2, got {d}"))),
    }
}

/// Analytic ε-predictions of mixture worlds, usable wherever a trained
/// denoiser is. Labeled requests see `conditional`; null requests see
/// `unconditional` (or `conditional` when none is given).
pub struct GmmScoreSource {
    pub conditional: GmmSpec,
    pub unconditional: Option<GmmSpec>,
    pub schedule: NoiseSchedule,
}

impl ScoreSource for GmmScoreSource {
    fn dim(&self) -> usize {
        self.conditional.dim()
    }

    fn has_unconditional(&self) -> bool {
        true
    }

    fn predict_eps(&self, sample: &NoisySample, cond: &ConditionSpec) -> Result<Array2<f32>> {
        self.schedule.check_step(sample.t)?;
        if sample.x.ncols() != self.dim() {
            return Err(Error::shape(&[self.dim()], &[sample.x.ncols()]));
        }
        let spec = match (&self.unconditional, cond.is_null) {
            (Some(u), true) => u,
            _ => &self.conditional,
        };
        let noised = spec.noised(self.schedule.alpha_bar(sample.t));
        let sb = self.schedule.sigma_bar(sample.t);
        let mut out = Array2::zeros(sample.x.dim());
        let mut buf = vec![0.0; self.dim()];
        for (i, row) in sample.x.rows().into_iter().enumerate() {
            for (b, v) in buf.iter_mut().zip(row) {
                *b = *v as f64;
            }
            for (j, s) in noised.score(&buf).into_iter().enumerate() {
                out[[i, j]] = (-sb * s) as f32;
            }
        }
        Ok(out)
    }
}

/// One cross-oracle loop: a discrepancy and the bound it must stay under.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosureCheck {
    pub name: &'static str,
    pub metric: f64,
    pub tolerance: f64,
}

impl ClosureCheck {
    pub fn passed(&self) -> bool {
        self.metric <= self.tolerance
    }
}

/// Settings of the Langevin-versus-enumeration loop.
pub const CLOSURE_LANGEVIN_LEVELS: usize = 100;
pub const CLOSURE_LANGEVIN_STEPS: usize = 20;
pub const CLOSURE_LANGEVIN_SAMPLES: usize = 20_000;

fn random_mixture(r: &mut impl rand::Rng, dim: usize, k: usize) -> Result<GmmSpec> {
    let means = (0..k)
        .map(|_| (0..dim).map(|_| r.gen_range(-2.0..2.0)).collect())
        .collect();
    let vars = (0..k)
        .map(|_| (0..dim).map(|_| r.gen_range(0.1..0.6)).collect())
        .collect();
    let mut w: Vec<f64> = (0..k).map(|_| r.gen_range(0.2..1.0)).collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    GmmSpec::new(means, vars, w)
}

/// Runs the three closed loops between independent oracles:
///
/// 1. the posterior mean from the noisy score (`y + σ²∇log p_σ(y)`) against
///    quadrature of the posterior, on 1D and 2D mixtures;
/// 2. annealed Langevin on the summed energy of two 2D mixtures against the
///    enumerated product density on a 64×64 grid (KL of the histogram);
/// 3. central differences of the mixture log density against its analytic
///    score.
pub fn closure_checks(seed: u64) -> Result<Vec<ClosureCheck>> {
    let mut r = rng::stream(seed, Purpose::Oracle, 1 << 40);
    let mut tweedie = 0.0f64;
    for case in 0..6 {
        let dim = 1 + case % 2;
        let prior = random_mixture(&mut r, dim, 3)?;
        let sigma: f64 = r.gen_range(0.3..1.0);
        let y: Vec<f64> = (0..dim).map(|_| r.gen_range(-1.5..1.5)).collect();
        let score = prior.convolved(sigma * sigma).score(&y);
        let quad = posterior_mean_quadrature(&y, &prior, sigma)?;
        for d in 0..dim {
            let m = y[d] + sigma * sigma * score[d];
            tweedie = tweedie.max((m - quad[d]).abs() / quad[d].abs().max(1e-3));
        }
    }

    let p1 = random_mixture(&mut r, 2, 2)?;
    let p2 = random_mixture(&mut r, 2, 3)?;
    let axes = vec![GridAxis::new(-4.0, 4.0, 64), GridAxis::new(-4.0, 4.0, 64)];
    let d1 = GridDensity::from_density_refined(axes.clone(), 4, |x| p1.density(x))?;
    let d2 = GridDensity::from_density_refined(axes.clone(), 4, |x| p2.density(x))?;
    let product = enumerate_product(&d1, &d2)?;
    let sched = NoiseSchedule::new(CLOSURE_LANGEVIN_LEVELS, -6.0, 12.0)?;
    let noised: Vec<(GmmSpec, GmmSpec)> = (1..=sched.num_steps())
        .map(|t| (p1.noised(sched.alpha_bar(t)), p2.noised(sched.alpha_bar(t))))
        .collect();
    let sum_score = |x: &[f64], t: usize| -> Vec<f64> {
        let (a, b) = &noised[t - 1];
        a.score(x).iter().zip(b.score(x)).map(|(u, v)| u + v).collect()
    };
    let samples = langevin_sample(
        sum_score,
        2,
        CLOSURE_LANGEVIN_SAMPLES,
        CLOSURE_LANGEVIN_STEPS,
        DEFAULT_LANGEVIN_SCALE,
        &sched,
        seed,
    )?;
    let (hist, _) = GridDensity::histogram(axes, samples.view())?;
    let langevin = hist.kl(&product)?;

    let mut fd = 0.0f64;
    for _ in 0..10 {
        let spec = random_mixture(&mut r, 2, 3)?;
        let x: Vec<f64> = (0..2).map(|_| r.gen_range(-2.0..2.0)).collect();
        let numeric = finite_diff_grad(|y| spec.log_density(y), &x, 1e-4)?;
        for (a, b) in spec.score(&x).iter().zip(&numeric) {
            fd = fd.max((a - b).abs() / a.abs().max(1.0));
        }
    }

    Ok(vec![
        ClosureCheck {
            name: "posterior mean from the score vs quadrature",
            metric: tweedie,
            tolerance: 1e-3,
        },
        ClosureCheck {
            name: "summed-energy Langevin vs enumerated product (KL)",
            metric: langevin,
            tolerance: 0.05,
        },
        ClosureCheck {
            name: "finite differences vs analytic mixture score",
            metric: fd,
            tolerance: 1e-6,
        },
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn axes2(lo: f64, hi: f64, bins: usize) -> Vec<GridAxis> {
        vec![GridAxis::new(lo, hi, bins); 2]
    }

    #[test]
    fn single_gaussian_noisy_score_closed_form() {
        let sched = NoiseSchedule::new(50, -8.0, 8.0).unwrap();
        let g = GmmSpec::new(vec![vec![1.5]], vec![vec![0.3]], vec![1.0]).unwrap();
        for t in [1, 10, 25, 50] {
            let a = sched.alpha_bar(t);
            let x = 0.7;
            let expected = -(x - a.sqrt() * 1.5) / (a * 0.3 + 1.0 - a);
            let got = gmm_noisy_score(&[x], t, &g, &sched).unwrap()[0];
            assert!((got - expected).abs() <= 1e-12 * expected.abs().max(1.0), "t={t}");
        }
        assert!(gmm_noisy_score(&[0.0], 0, &g, &sched).is_err());
    }

    #[test]
    fn symmetric_mixture_score_vanishes_at_origin() {
        let sched = NoiseSchedule::new(50, -8.0, 8.0).unwrap();
        let g = GmmSpec::isotropic(vec![vec![-2.0, 1.0], vec![2.0, -1.0]], 0.4).unwrap();
        let s = gmm_noisy_score(&[0.0, 0.0], 20, &g, &sched).unwrap();
        assert!(s.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn noisy_score_matches_finite_differences() {
        let sched = NoiseSchedule::new(50, -8.0, 8.0).unwrap();
        let g = GmmSpec::new(
            vec![vec![-1.0, 0.5], vec![1.5, -0.5], vec![0.0, 2.0]],
            vec![vec![0.3, 0.5], vec![0.2, 0.2], vec![0.6, 0.1]],
            vec![0.5, 0.3, 0.2],
        )
        .unwrap();
        for (t, x) in [(5, [0.3, -0.2]), (20, [1.1, 0.7]), (40, [-2.0, 1.5])] {
            let noised = g.noised(sched.alpha_bar(t));
            let fd = finite_diff_grad(|y| noised.log_density(y), &x, 1e-4).unwrap();
            let s = gmm_noisy_score(&x, t, &g, &sched).unwrap();
            for (a, b) in s.iter().zip(&fd) {
                assert!((a - b).abs() <= 1e-6 * a.abs().max(1e-3), "t={t}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn finite_diff_quadratic_and_linear() {
        let x = [0.3, -1.2, 2.0];
        let g = finite_diff_grad(|y| 0.5 * y.iter().map(|v| v * v).sum::<f64>(), &x, 1e-3).unwrap();
        for (a, b) in g.iter().zip(&x) {
            assert!((a - b).abs() < 1e-9);
        }
        let lin = finite_diff_grad(|y| 3.0 * y[0] - 2.0 * y[1] + 0.5 * y[2], &x, 0.25).unwrap();
        for (a, b) in lin.iter().zip([3.0, -2.0, 0.5]) {
            assert!((a - b).abs() < 1e-14);
        }
        assert!(finite_diff_grad(|y| y[0], &x, 0.0).is_err());
    }

    #[test]
    fn finite_diff_of_mixture_log_density() {
        let g = GmmSpec::isotropic(vec![vec![-1.0, 0.0], vec![1.0, 1.0]], 0.5).unwrap();
        let x = [0.2, 0.4];
        let fd = finite_diff_grad(|y| g.log_density(y), &x, 1e-4).unwrap();
        for (a, b) in g.score(&x).iter().zip(&fd) {
            assert!((a - b).abs() <= 1e-6 * a.abs());
        }
    }

    #[test]
    fn product_with_uniform_is_identity() {
        let g = GmmSpec::isotropic(vec![vec![0.0, 1.0]], 0.5).unwrap();
        let p2 = GridDensity::from_density(axes2(-3.0, 3.0, 32), |x| g.density(x)).unwrap();
        let u = GridDensity::uniform(axes2(-3.0, 3.0, 32)).unwrap();
        let prod = enumerate_product(&u, &p2).unwrap();
        assert!(prod.total_variation(&p2).unwrap() < 1e-12);
        assert!(prod.is_normalized());
    }

    #[test]
    fn disjoint_supports_are_reported() {
        let left = GridDensity::from_density(
            vec![GridAxis::new(-1.0, 1.0, 10)],
            |x| {
                if x[0] < 0.0 {
                    1.0
                } else {
                    0.0
                }
            },
        )
        .unwrap();
        let right = GridDensity::from_density(
            vec![GridAxis::new(-1.0, 1.0, 10)],
            |x| {
                if x[0] > 0.0 {
                    1.0
                } else {
                    0.0
                }
            },
        )
        .unwrap();
        assert!(matches!(enumerate_product(&left, &right), Err(Error::ZeroMass)));
    }

    #[test]
    fn langevin_zero_steps_is_initial_noise() {
        let sched = NoiseSchedule::new(10, -5.0, 5.0).unwrap();
        let a = langevin_sample(|x, _| x.iter().map(|v| -v).collect(), 2, 5, 0, 0.1, &sched, 3).unwrap();
        let mut r = rng::stream(3, Purpose::Oracle, 0);
        let z = rng::normal_vec_f64(&mut r, 10);
        assert_eq!(a.as_slice().unwrap(), &z[..]);
    }

    #[test]
    fn quadrature_gaussian_prior_closed_form() {
        let g = GmmSpec::new(vec![vec![0.0]], vec![vec![1.0]], vec![1.0]).unwrap();
        let m = posterior_mean_quadrature(&[2.0], &g, 1.0).unwrap();
        assert!((m[0] - 1.0).abs() < 1e-9);
        let g2 = GmmSpec::new(vec![vec![0.0, 0.0]], vec![vec![1.0, 1.0]], vec![1.0]).unwrap();
        let m2 = posterior_mean_quadrature(&[2.0, -1.0], &g2, 0.5).unwrap();
        assert!((m2[0] - 2.0 / 1.25).abs() < 1e-9 && (m2[1] + 1.0 / 1.25).abs() < 1e-9);
    }

    #[test]
    fn quadrature_delta_limit() {
        let g = GmmSpec::new(vec![vec![0.7]], vec![vec![1e-8]], vec![1.0]).unwrap();
        for y in [-3.0, 0.0, 2.5] {
            let m = posterior_mean_quadrature(&[y], &g, 0.8).unwrap();
            assert!((m[0] - 0.7).abs() < 1e-4);
        }
    }

    #[test]
    fn quadrature_rejects_high_dimension() {
        let g = GmmSpec::isotropic(vec![vec![0.0; 3]], 1.0).unwrap();
        assert!(posterior_mean_quadrature(&[0.0; 3], &g, 1.0).is_err());
    }

    #[test]
    fn kl_is_zero_on_identical_and_positive_otherwise() {
        let a = GridDensity::from_density(axes2(-2.0, 2.0, 8), |x| (-x[0] * x[0]).exp()).unwrap();
        let b = GridDensity::uniform(axes2(-2.0, 2.0, 8)).unwrap();
        assert!(a.kl(&a).unwrap() < 1e-15);
        assert!(a.kl(&b).unwrap() > 0.0);
    }
}
