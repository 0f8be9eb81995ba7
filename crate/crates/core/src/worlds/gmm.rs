//! Diagonal-covariance Gaussian mixtures: the analytically tractable worlds
//! used to check every score, product, and posterior identity.

use ndarray::Array2;
use rand::distributions::{Distribution, WeightedIndex};
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::{self, Purpose};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq)]
pub struct GmmSpec {
    means: Vec<Vec<f64>>,
    variances: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

impl GmmSpec {
    pub fn new(means: Vec<Vec<f64>>, variances: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        let k = weights.len();
        if k == 0 || means.len() != k || variances.len() != k {
            return Err(Error::invalid("mixture needs matching, nonempty component lists"));
        }
        let dim = means[0].len();
        if dim == 0 {
            return Err(Error::invalid("mixture dimension must be positive"));
        }
        for (m, v) in means.iter().zip(&variances) {
            if m.len() != dim || v.len() != dim {
                return Err(Error::invalid("all components must share one dimension"));
            }
            if v.iter().any(|s| !(*s > 0.0) || !s.is_finite()) || m.iter().any(|x| !x.is_finite()) {
                return Err(Error::invalid("variances must be positive and means finite"));
            }
        }
        if weights.iter().any(|w| !(*w > 0.0)) {
            return Err(Error::invalid("weights must be positive"));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!("weights sum to {sum}, not 1")));
        }
        Ok(Self {
            means,
            variances,
            weights,
        })
    }

    /// Equal weights, shared isotropic variance.
    pub fn isotropic(means: Vec<Vec<f64>>, variance: f64) -> Result<Self> {
        let k = means.len();
        let dim = means.first().map_or(0, |m| m.len());
        let variances = vec![vec![variance; dim]; k];
        let w = 1.0 / k as f64;
        let mut weights = vec![w; k];
        // keep the sum exactly representable
        if k > 0 {
            weights[k - 1] = 1.0 - w * (k - 1) as f64;
        }
        Self::new(means, variances, weights)
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn variances(&self) -> &[Vec<f64>] {
        &self.variances
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// The law of `sqrt(a)·X + sqrt(1 − a)·N(0, I)`.
    pub fn noised(&self, alpha_bar: f64) -> GmmSpec {
        let s = alpha_bar.sqrt();
        GmmSpec {
            means: self.means.iter().map(|m| m.iter().map(|x| s * x).collect()).collect(),
            variances: self
                .variances
                .iter()
                .map(|v| v.iter().map(|x| alpha_bar * x + (1.0 - alpha_bar)).collect())
                .collect(),
            weights: self.weights.clone(),
        }
    }

    /// The law of `X + N(0, noise_var·I)`.
    pub fn convolved(&self, noise_var: f64) -> GmmSpec {
        GmmSpec {
            means: self.means.clone(),
            variances: self
                .variances
                .iter()
                .map(|v| v.iter().map(|x| x + noise_var).collect())
                .collect(),
            weights: self.weights.clone(),
        }
    }

    fn component_log(&self, i: usize, x: &[f64]) -> f64 {
        let mut acc = self.weights[i].ln();
        for ((xi, m), v) in x.iter().zip(&self.means[i]).zip(&self.variances[i]) {
            let d = xi - m;
            acc -= 0.5 * (LN_2PI + v.ln() + d * d / v);
        }
        acc
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let logs: Vec<f64> = (0..self.components()).map(|i| self.component_log(i, x)).collect();
        log_sum_exp(&logs)
    }

    pub fn density(&self, x: &[f64]) -> f64 {
        self.log_density(x).exp()
    }

    /// `∇log p(x)`, stabilized by log-sum-exp responsibilities.
    pub fn score(&self, x: &[f64]) -> Vec<f64> {
        let logs: Vec<f64> = (0..self.components()).map(|i| self.component_log(i, x)).collect();
        let lse = log_sum_exp(&logs);
        let mut g = vec![0.0; x.len()];
        for (i, l) in logs.iter().enumerate() {
            let r = (l - lse).exp();
            for (d, gd) in g.iter_mut().enumerate() {
                *gd -= r * (x[d] - self.means[i][d]) / self.variances[i][d];
            }
        }
        g
    }

    /// `n` i.i.d. draws plus the component each came from.
    pub fn sample_labeled(&self, n: usize, seed: u64) -> Result<(Array2<f64>, Vec<usize>)> {
        if n == 0 {
            return Err(Error::invalid("need at least one sample"));
        }
        let mut r = rng::stream(seed, Purpose::Data, 0);
        let pick = WeightedIndex::new(&self.weights).map_err(|e| Error::invalid(e.to_string()))?;
        let d = self.dim();
        let mut out = Array2::zeros((n, d));
        let mut labels = Vec::with_capacity(n);
        for mut row in out.rows_mut() {
            let k = pick.sample(&mut r);
            labels.push(k);
            for j in 0..d {
                let z: f64 = StandardNormal.sample(&mut r);
                row[j] = self.means[k][j] + self.variances[k][j].sqrt() * z;
            }
        }
        Ok((out, labels))
    }
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `n` i.i.d. draws from the mixture, deterministic per seed.
pub fn gen_gmm_samples(spec: &GmmSpec, n: usize, seed: u64) -> Result<Array2<f64>> {
    spec.sample_labeled(n, seed).map(|(x, _)| x)
}
