//! Forward and backward passes, generic over `f32` (model paths) and `f64`
//! (gradient checks). Parameters live in one flat slice; tensors are views
//! into it at the offsets given by [`Layout`].

use std::fmt::Debug;
use std::ops::AddAssign;

use ndarray::{Array2, ArrayView2, Axis, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};

use super::arch::{ArchitectureDescriptor, Layout, TensorSlot};

pub trait Real:
    Float + LinalgScalar + ScalarOperand + FromPrimitive + AddAssign + Debug + Send + Sync + 'static
{
}
impl Real for f32 {}
impl Real for f64 {}

fn c<F: Real>(v: f64) -> F {
    F::from_f64(v).unwrap()
}

/// Highest angular frequency of the step features, in radians over the
/// whole schedule.
pub const TIME_MAX_FREQ: f64 = 6.0;

/// Sinusoidal features of the diffusion step on the unit clock `τ = t/T`:
/// feature `2j` is `sin(τ·ω_j)`, `2j+1` is `cos(τ·ω_j)`, with `ω_j` spaced
/// geometrically from 1 to [`TIME_MAX_FREQ`]. Frequencies stay low on
/// purpose so neighbouring steps share features; the nearly noise-free steps
/// carry little training signal and have to borrow from their neighbours.
pub fn time_features<F: Real>(steps: &[usize], num_steps: usize, dim: usize) -> Array2<F> {
    let half = dim.div_ceil(2).max(1);
    let span = (half as f64 - 1.0).max(1.0);
    let mut s = Array2::zeros((steps.len(), dim));
    for (b, &t) in steps.iter().enumerate() {
        let tau = t as f64 / num_steps as f64;
        for i in 0..dim {
            let w = TIME_MAX_FREQ.powf((i / 2) as f64 / span);
            s[[b, i]] = c(if i % 2 == 0 { (tau * w).sin() } else { (tau * w).cos() });
        }
    }
    s
}

/// Network inputs for one batch. `aux` is already expanded to clip size;
/// `labels` are embedding rows (`vocab` is the null row).
pub struct NetInput<F> {
    pub x: Array2<F>,
    pub aux: Option<Array2<F>>,
    pub steps: Vec<usize>,
    pub labels: Vec<usize>,
    /// `ᾱ_t` per row; only read by preconditioned MLPs.
    pub alpha_bar: Vec<f64>,
}

pub struct Net<'a, F> {
    desc: &'a ArchitectureDescriptor,
    layout: Layout,
    params: &'a [F],
    num_steps: usize,
}

pub enum Cache<F> {
    Mlp {
        inp: Array2<F>,
        s: Array2<F>,
        hs: Vec<Array2<F>>,
        zs: Vec<Array2<F>>,
        labels: Vec<usize>,
        out_scale: Option<Array2<F>>,
    },
    Energy {
        x: Array2<F>,
        aux: Option<Array2<F>>,
        s: Array2<F>,
        sig: Array2<F>,
        labels: Vec<usize>,
    },
}

fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

fn silu<F: Real>(x: F) -> F {
    x * sigmoid(x)
}

fn silu_grad<F: Real>(x: F) -> F {
    let s = sigmoid(x);
    s * (F::one() + x * (F::one() - s))
}

fn softplus<F: Real>(x: F) -> F {
    if x > c(20.0) {
        x
    } else if x < c(-20.0) {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Per-row `(c_in, c_skip, c_out)` for data of scale `data_std`. With
/// `v = ᾱσ_d² + σ̄²`: `c_in = 1/√v` keeps the input at unit scale,
/// `c_skip·x = σ̄x/v` is the optimal ε for Gaussian data, and `c_out = σ̄/√v`
/// shrinks the learned residual with the noise so it stays O(1) as `t → 0`.
fn precondition(alpha_bar: &[f64], data_std: f64) -> Vec<(f64, f64, f64)> {
    alpha_bar
        .iter()
        .map(|&ab| {
            let sigma = (1.0 - ab).max(0.0).sqrt();
            let v = ab * data_std * data_std + sigma * sigma;
            (1.0 / v.sqrt(), sigma / v, sigma / v.sqrt())
        })
        .collect()
}

fn column<F: Real>(v: impl Iterator<Item = f64>) -> Array2<F> {
    let v: Vec<F> = v.map(c).collect();
    Array2::from_shape_vec((v.len(), 1), v).unwrap()
}

/// Interleaves two clip batches channel-wise (same pixel count).
fn interleave<F: Real>(x: &Array2<F>, aux: &Array2<F>, channels: usize) -> Array2<F> {
    let (b, d) = x.dim();
    let pixels = d / channels;
    let ca = aux.ncols() / pixels;
    let mut out = Array2::zeros((b, d + aux.ncols()));
    for i in 0..b {
        let (xr, ar) = (x.row(i), aux.row(i));
        let mut o = out.row_mut(i);
        let mut k = 0;
        for p in 0..pixels {
            for ch in 0..channels {
                o[k] = xr[p * channels + ch];
                k += 1;
            }
            for ch in 0..ca {
                o[k] = ar[p * ca + ch];
                k += 1;
            }
        }
    }
    out
}

fn add_rows<F: Real>(m: &mut Array2<F>, bias: ArrayView2<F>) {
    *m += &bias.row(0);
}

impl<'a, F: Real> Net<'a, F> {
    pub fn new(desc: &'a ArchitectureDescriptor, params: &'a [F], num_steps: usize) -> Self {
        let layout = desc.layout();
        assert_eq!(layout.total(), params.len(), "parameter blob does not match descriptor");
        Self {
            desc,
            layout,
            params,
            num_steps,
        }
    }

    fn view(&self, name: &str) -> ArrayView2<'a, F> {
        let s = self.layout.get(name);
        ArrayView2::from_shape((s.rows, s.cols), &self.params[s.offset..s.offset + s.len()]).unwrap()
    }

    fn gather(&self, labels: &[usize]) -> Array2<F> {
        let emb = self.view("label.emb");
        let mut out = Array2::zeros((labels.len(), emb.ncols()));
        for (mut r, &l) in out.rows_mut().into_iter().zip(labels) {
            r.assign(&emb.row(l));
        }
        out
    }

    pub fn forward(&self, input: &NetInput<F>) -> (Array2<F>, Cache<F>) {
        if self.desc.energy {
            self.forward_energy(input)
        } else {
            self.forward_mlp(input)
        }
    }

    /// ε-prediction without keeping activations.
    pub fn predict(&self, input: &NetInput<F>) -> Array2<F> {
        self.forward(input).0
    }

    fn forward_mlp(&self, input: &NetInput<F>) -> (Array2<F>, Cache<F>) {
        let pre = self.desc.data_std.map(|sd| {
            assert_eq!(
                input.alpha_bar.len(),
                input.x.nrows(),
                "alpha_bar must be given per row"
            );
            precondition(&input.alpha_bar, sd)
        });
        let scaled;
        let x = match &pre {
            Some(p) => {
                scaled = &input.x * &column::<F>(p.iter().map(|c| c.0));
                &scaled
            }
            None => &input.x,
        };
        let inp = match &input.aux {
            Some(a) => interleave(x, a, self.desc.shape.channels),
            None => x.clone(),
        };
        let s = time_features::<F>(&input.steps, self.num_steps, self.desc.time_dim);
        let mut h = inp.dot(&self.view("in.w"));
        add_rows(&mut h, self.view("in.b"));
        h += &s.dot(&self.view("time.w"));
        h += &self.gather(&input.labels);
        let mut hs = Vec::with_capacity(self.desc.blocks + 1);
        let mut zs = Vec::with_capacity(self.desc.blocks);
        for k in 0..self.desc.blocks {
            let a = h.mapv(silu);
            let mut z = a.dot(&self.view(&format!("b{k}.w1")));
            add_rows(&mut z, self.view(&format!("b{k}.b1")));
            z += &s.dot(&self.view(&format!("b{k}.time.w")));
            let u = z.mapv(silu);
            let mut next = u.dot(&self.view(&format!("b{k}.w2")));
            add_rows(&mut next, self.view(&format!("b{k}.b2")));
            next += &h;
            hs.push(h);
            zs.push(z);
            h = next;
        }
        let a = h.mapv(silu);
        let mut out = a.dot(&self.view("out.w"));
        add_rows(&mut out, self.view("out.b"));
        hs.push(h);
        let out_scale = pre.map(|p| {
            let scale = column::<F>(p.iter().map(|c| c.2));
            out = &out * &scale + &input.x * &column::<F>(p.iter().map(|c| c.1));
            scale
        });
        let cache = Cache::Mlp {
            inp,
            s,
            hs,
            zs,
            labels: input.labels.clone(),
            out_scale,
        };
        (out, cache)
    }

    fn pre_activation(&self, input: &NetInput<F>, s: &Array2<F>) -> Array2<F> {
        let mut z = input.x.dot(&self.view("x.w"));
        if let Some(a) = &input.aux {
            z += &a.dot(&self.view("cond.w"));
        }
        add_rows(&mut z, self.view("b"));
        z += &s.dot(&self.view("time.w"));
        z += &self.gather(&input.labels);
        z
    }

    fn kappa(&self, s: &Array2<F>) -> Array2<F> {
        let mut k = s.dot(&self.view("kappa.w"));
        add_rows(&mut k, self.view("kappa.b"));
        k
    }

    fn forward_energy(&self, input: &NetInput<F>) -> (Array2<F>, Cache<F>) {
        let s = time_features::<F>(&input.steps, self.num_steps, self.desc.time_dim);
        let z = self.pre_activation(input, &s);
        let sig = z.mapv(sigmoid);
        let a = &sig * &self.view("v").row(0);
        let kappa = self.kappa(&s);
        let mut out = a.dot(&self.view("x.w").t());
        out += &(&input.x * &kappa);
        let cache = Cache::Energy {
            x: input.x.clone(),
            aux: input.aux.clone(),
            s,
            sig,
            labels: input.labels.clone(),
        };
        (out, cache)
    }

    /// Per-row scalar energy; only meaningful for energy networks.
    pub fn energy(&self, input: &NetInput<F>) -> Vec<F> {
        assert!(self.desc.energy, "not an energy network");
        let s = time_features::<F>(&input.steps, self.num_steps, self.desc.time_dim);
        let z = self.pre_activation(input, &s);
        let kappa = self.kappa(&s);
        let v = self.view("v");
        (0..input.x.nrows())
            .map(|b| {
                let sq = input.x.row(b).iter().fold(F::zero(), |acc, &x| acc + x * x);
                let mut e = c::<F>(0.5) * kappa[[b, 0]] * sq;
                for (zj, vj) in z.row(b).iter().zip(v.row(0)) {
                    e += *vj * softplus(*zj);
                }
                e
            })
            .collect()
    }

    fn slot(&self, name: &str) -> TensorSlot {
        self.layout.get(name).clone()
    }

    /// Accumulates `∂L/∂θ` into `grads` given `d_out = ∂L/∂ε̂`.
    pub fn backward(&self, cache: &Cache<F>, d_out: &Array2<F>, grads: &mut [F]) {
        assert_eq!(grads.len(), self.params.len());
        match cache {
            Cache::Mlp {
                inp,
                s,
                hs,
                zs,
                labels,
                out_scale,
            } => match out_scale {
                Some(k) => self.backward_mlp(inp, s, hs, zs, labels, &(d_out * k), grads),
                None => self.backward_mlp(inp, s, hs, zs, labels, d_out, grads),
            },
            Cache::Energy { x, aux, s, sig, labels } => {
                self.backward_energy(x, aux.as_ref(), s, sig, labels, d_out, grads)
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_mlp(
        &self,
        inp: &Array2<F>,
        s: &Array2<F>,
        hs: &[Array2<F>],
        zs: &[Array2<F>],
        labels: &[usize],
        d_out: &Array2<F>,
        grads: &mut [F],
    ) {
        let last = &hs[hs.len() - 1];
        let a = last.mapv(silu);
        acc(grads, &self.slot("out.w"), &a.t().dot(d_out));
        acc_bias(grads, &self.slot("out.b"), d_out);
        let mut dh = d_out.dot(&self.view("out.w").t()) * &last.mapv(silu_grad);
        for k in (0..self.desc.blocks).rev() {
            let (h, z) = (&hs[k], &zs[k]);
            let u = z.mapv(silu);
            acc(grads, &self.slot(&format!("b{k}.w2")), &u.t().dot(&dh));
            acc_bias(grads, &self.slot(&format!("b{k}.b2")), &dh);
            let du = dh.dot(&self.view(&format!("b{k}.w2")).t());
            let dz = du * &z.mapv(silu_grad);
            let a = h.mapv(silu);
            acc(grads, &self.slot(&format!("b{k}.w1")), &a.t().dot(&dz));
            acc_bias(grads, &self.slot(&format!("b{k}.b1")), &dz);
            acc(grads, &self.slot(&format!("b{k}.time.w")), &s.t().dot(&dz));
            let da = dz.dot(&self.view(&format!("b{k}.w1")).t());
            dh = dh + da * &h.mapv(silu_grad);
        }
        acc(grads, &self.slot("in.w"), &inp.t().dot(&dh));
        acc_bias(grads, &self.slot("in.b"), &dh);
        acc(grads, &self.slot("time.w"), &s.t().dot(&dh));
        scatter_rows(grads, &self.slot("label.emb"), labels, &dh);
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_energy(
        &self,
        x: &Array2<F>,
        aux: Option<&Array2<F>>,
        s: &Array2<F>,
        sig: &Array2<F>,
        labels: &[usize],
        g: &Array2<F>,
        grads: &mut [F],
    ) {
        let v = self.view("v");
        let wx = self.view("x.w");
        // ε̂ = κ·x + (v ⊙ σ(z))·Wₓᵀ
        let dkappa = (g * x).sum_axis(Axis(1)).insert_axis(Axis(1));
        acc(grads, &self.slot("kappa.w"), &s.t().dot(&dkappa));
        acc_bias(grads, &self.slot("kappa.b"), &dkappa);
        let a = sig * &v.row(0);
        let mut dwx = g.t().dot(&a);
        let da = g.dot(&wx);
        let dv = (&da * sig).sum_axis(Axis(0)).insert_axis(Axis(0));
        acc(grads, &self.slot("v"), &dv);
        let dz = &da * &v.row(0) * &sig.mapv(|p| p * (F::one() - p));
        dwx += &x.t().dot(&dz);
        acc(grads, &self.slot("x.w"), &dwx);
        if let Some(a) = aux {
            acc(grads, &self.slot("cond.w"), &a.t().dot(&dz));
        }
        acc_bias(grads, &self.slot("b"), &dz);
        acc(grads, &self.slot("time.w"), &s.t().dot(&dz));
        scatter_rows(grads, &self.slot("label.emb"), labels, &dz);
    }
}

fn acc<F: Real>(grads: &mut [F], slot: &TensorSlot, m: &Array2<F>) {
    debug_assert_eq!(m.dim(), (slot.rows, slot.cols));
    for (g, v) in grads[slot.offset..slot.offset + slot.len()].iter_mut().zip(m.iter()) {
        *g += *v;
    }
}

fn acc_bias<F: Real>(grads: &mut [F], slot: &TensorSlot, m: &Array2<F>) {
    let s = m.sum_axis(Axis(0));
    for (g, v) in grads[slot.offset..slot.offset + slot.len()].iter_mut().zip(s.iter()) {
        *g += *v;
    }
}

fn scatter_rows<F: Real>(grads: &mut [F], slot: &TensorSlot, labels: &[usize], m: &Array2<F>) {
    let w = slot.cols;
    for (row, &l) in m.rows().into_iter().zip(labels) {
        let base = slot.offset + l * w;
        for (g, v) in grads[base..base + w].iter_mut().zip(row) {
            *g += *v;
        }
    }
}
