//! Trainable building blocks with explicit backward passes.
//!
//! Activations are `rows×features` matrices. A forward call returns its
//! output together with whatever the matching backward call needs; backward
//! accumulates parameter gradients in place and returns the input gradient.

use ndarray::{s, Array, Array1, Array2, Axis, Dimension, Ix1, Ix2, Zip};
use rand_distr::{Distribution, Normal};

use crate::real::Real;
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T, D: Dimension> {
    pub value: Array<T, D>,
    pub grad: Array<T, D>,
}

pub type Param1<T> = Param<T, Ix1>;
pub type Param2<T> = Param<T, Ix2>;

impl<T: Real, D: Dimension> Param<T, D> {
    pub fn new(value: Array<T, D>) -> Self {
        let grad = Array::zeros(value.raw_dim());
        Self { value, grad }
    }
}

/// Mutable view of one named parameter, handed out by `visit_mut`.
pub struct ParamMut<'a, T> {
    pub name: &'a str,
    pub shape: &'a [usize],
    pub value: &'a mut [T],
    pub grad: &'a mut [T],
    /// Whether decoupled weight decay applies (weight matrices only).
    pub decay: bool,
}

pub type VisitFn<'f, T> = dyn FnMut(&str, &[usize], &[T]) + 'f;
pub type VisitMutFn<'f, T> = dyn FnMut(ParamMut<'_, T>) + 'f;

pub(crate) fn visit_param<T: Real, D: Dimension>(p: &Param<T, D>, name: &str, f: &mut VisitFn<'_, T>) {
    f(name, p.value.shape(), p.value.as_slice().expect("standard layout"));
}

pub(crate) fn visit_param_mut<T: Real, D: Dimension>(
    p: &mut Param<T, D>,
    name: &str,
    decay: bool,
    f: &mut VisitMutFn<'_, T>,
) {
    let shape = p.value.shape().to_vec();
    f(ParamMut {
        name,
        shape: &shape,
        value: p.value.as_slice_mut().expect("standard layout"),
        grad: p.grad.as_slice_mut().expect("standard layout"),
        decay,
    });
}

/// Normal samples with σ = 0.02, redrawn beyond two standard deviations.
pub fn trunc_normal<T: Real>(rng: &mut Rng, shape: (usize, usize)) -> Array2<T> {
    let std = 0.02;
    let normal = Normal::new(0.0, std).expect("positive std");
    Array2::from_shape_simple_fn(shape, || loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            break T::of(v);
        }
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    /// `in×out`.
    pub weight: Param2<T>,
    pub bias: Option<Param1<T>>,
}

impl<T: Real> Linear<T> {
    pub fn new(rng: &mut Rng, inputs: usize, outputs: usize, bias: bool) -> Self {
        Self {
            weight: Param::new(trunc_normal(rng, (inputs, outputs))),
            bias: bias.then(|| Param::new(Array1::zeros(outputs))),
        }
    }

    pub fn zeros(inputs: usize, outputs: usize, bias: bool) -> Self {
        Self {
            weight: Param::new(Array2::zeros((inputs, outputs))),
            bias: bias.then(|| Param::new(Array1::zeros(outputs))),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.value.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.value.ncols()
    }

    pub fn forward(&self, x: &Array2<T>) -> Array2<T> {
        let mut y = x.dot(&self.weight.value);
        if let Some(b) = &self.bias {
            y += &b.value;
        }
        y
    }

    /// Accumulates parameter gradients; returns `dx` when `need_dx`.
    pub fn backward(&mut self, x: &Array2<T>, dy: &Array2<T>, need_dx: bool) -> Option<Array2<T>> {
        ndarray::linalg::general_mat_mul(T::one(), &x.t(), dy, T::one(), &mut self.weight.grad);
        if let Some(b) = &mut self.bias {
            b.grad += &dy.sum_axis(Axis(0));
        }
        need_dx.then(|| dy.dot(&self.weight.value.t()))
    }

    pub fn visit(&self, prefix: &str, f: &mut VisitFn<'_, T>) {
        visit_param(&self.weight, &format!("{prefix}.weight"), f);
        if let Some(b) = &self.bias {
            visit_param(b, &format!("{prefix}.bias"), f);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut VisitMutFn<'_, T>) {
        visit_param_mut(&mut self.weight, &format!("{prefix}.weight"), true, f);
        if let Some(b) = &mut self.bias {
            visit_param_mut(b, &format!("{prefix}.bias"), false, f);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm<T> {
    pub gamma: Param1<T>,
    pub beta: Param1<T>,
    pub eps: T,
}

pub struct LayerNormCache<T> {
    xhat: Array2<T>,
    inv_std: Array1<T>,
}

impl<T: Real> LayerNorm<T> {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Param::new(Array1::ones(dim)),
            beta: Param::new(Array1::zeros(dim)),
            eps: T::of(1e-6),
        }
    }

    pub fn forward(&self, x: &Array2<T>) -> (Array2<T>, LayerNormCache<T>) {
        let d = T::from_usize(x.ncols()).expect("dim");
        let mut xhat = x.clone();
        let mut inv_std = Array1::<T>::zeros(x.nrows());
        for (mut row, inv) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.sum() / d;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|&v| v * v).sum::<T>() / d;
            *inv = T::one() / (var + self.eps).sqrt();
            let i = *inv;
            row.mapv_inplace(|v| v * i);
        }
        let y = &xhat * &self.gamma.value + &self.beta.value;
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&mut self, cache: &LayerNormCache<T>, dy: &Array2<T>) -> Array2<T> {
        self.gamma.grad += &(dy * &cache.xhat).sum_axis(Axis(0));
        self.beta.grad += &dy.sum_axis(Axis(0));
        let d = T::from_usize(dy.ncols()).expect("dim");
        let dxhat = dy * &self.gamma.value;
        let mut dx = Array2::<T>::zeros(dy.raw_dim());
        for (((mut out, g), xh), &inv) in dx
            .rows_mut()
            .into_iter()
            .zip(dxhat.rows())
            .zip(cache.xhat.rows())
            .zip(cache.inv_std.iter())
        {
            let sum_g = g.sum();
            let sum_gx = g.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<T>();
            Zip::from(&mut out).and(&g).and(&xh).for_each(|o, &gi, &xi| {
                *o = inv / d * (d * gi - sum_g - xi * sum_gx);
            });
        }
        dx
    }

    pub fn visit(&self, prefix: &str, f: &mut VisitFn<'_, T>) {
        visit_param(&self.gamma, &format!("{prefix}.gamma"), f);
        visit_param(&self.beta, &format!("{prefix}.beta"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut VisitMutFn<'_, T>) {
        visit_param_mut(&mut self.gamma, &format!("{prefix}.gamma"), false, f);
        visit_param_mut(&mut self.beta, &format!("{prefix}.beta"), false, f);
    }
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// Exact GELU, `x·Φ(x)`.
pub fn gelu<T: Real>(x: &Array2<T>) -> Array2<T> {
    let half = T::of(0.5);
    let k = T::of(INV_SQRT_2);
    x.mapv(|v| half * v * (T::one() + (v * k).erf()))
}

pub fn gelu_backward<T: Real>(x: &Array2<T>, dy: &Array2<T>) -> Array2<T> {
    let half = T::of(0.5);
    let k = T::of(INV_SQRT_2);
    let inv_sqrt_2pi = T::of(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    let mut dx = dy.clone();
    Zip::from(&mut dx).and(x).for_each(|d, &v| {
        let cdf = half * (T::one() + (v * k).erf());
        let pdf = inv_sqrt_2pi * (-half * v * v).exp();
        *d *= cdf + v * pdf;
    });
    dx
}

/// Row-wise softmax, numerically stabilized.
pub fn softmax_rows<T: Real>(x: &mut Array2<T>) {
    for mut row in x.rows_mut() {
        let max = row.fold(T::neg_infinity(), |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

/// Multi-head self-attention over `nseq` independent sequences stored as
/// consecutive row blocks of equal length.
#[derive(Clone, Debug, PartialEq)]
pub struct Attention<T> {
    pub qkv: Linear<T>,
    pub proj: Linear<T>,
    pub heads: usize,
}

pub struct AttentionCache<T> {
    x: Array2<T>,
    qkv: Array2<T>,
    ctx: Array2<T>,
    /// Attention probabilities indexed `seq * heads + head`.
    probs: Vec<Array2<T>>,
    seq_len: usize,
}

impl<T: Real> Attention<T> {
    pub fn new(rng: &mut Rng, dim: usize, heads: usize) -> Self {
        Self {
            qkv: Linear::new(rng, dim, 3 * dim, true),
            proj: Linear::new(rng, dim, dim, true),
            heads,
        }
    }

    fn head_dim(&self) -> usize {
        self.proj.inputs() / self.heads
    }

    pub fn forward(&self, x: &Array2<T>, seq_len: usize) -> (Array2<T>, AttentionCache<T>) {
        let dim = self.proj.inputs();
        let dh = self.head_dim();
        let scale = T::one() / T::from_usize(dh).expect("dim").sqrt();
        let qkv = self.qkv.forward(x);
        let nseq = x.nrows() / seq_len;
        let mut ctx = Array2::<T>::zeros((x.nrows(), dim));
        let mut probs = Vec::with_capacity(nseq * self.heads);
        for sq in 0..nseq {
            let rows = sq * seq_len..(sq + 1) * seq_len;
            for h in 0..self.heads {
                let q = qkv.slice(s![rows.clone(), h * dh..(h + 1) * dh]);
                let k = qkv.slice(s![rows.clone(), dim + h * dh..dim + (h + 1) * dh]);
                let v = qkv.slice(s![rows.clone(), 2 * dim + h * dh..2 * dim + (h + 1) * dh]);
                let mut p = q.dot(&k.t());
                p *= scale;
                softmax_rows(&mut p);
                ctx.slice_mut(s![rows.clone(), h * dh..(h + 1) * dh]).assign(&p.dot(&v));
                probs.push(p);
            }
        }
        let y = self.proj.forward(&ctx);
        (
            y,
            AttentionCache {
                x: x.clone(),
                qkv,
                ctx,
                probs,
                seq_len,
            },
        )
    }

    pub fn backward(&mut self, cache: &AttentionCache<T>, dy: &Array2<T>) -> Array2<T> {
        let dim = self.proj.inputs();
        let dh = self.head_dim();
        let scale = T::one() / T::from_usize(dh).expect("dim").sqrt();
        let dctx = self.proj.backward(&cache.ctx, dy, true).expect("dx requested");
        let qkv = &cache.qkv;
        let len = cache.seq_len;
        let mut dqkv = Array2::<T>::zeros(qkv.raw_dim());
        for sq in 0..cache.x.nrows() / len {
            let rows = sq * len..(sq + 1) * len;
            for h in 0..self.heads {
                let p = &cache.probs[sq * self.heads + h];
                let q = qkv.slice(s![rows.clone(), h * dh..(h + 1) * dh]);
                let k = qkv.slice(s![rows.clone(), dim + h * dh..dim + (h + 1) * dh]);
                let v = qkv.slice(s![rows.clone(), 2 * dim + h * dh..2 * dim + (h + 1) * dh]);
                let dout = dctx.slice(s![rows.clone(), h * dh..(h + 1) * dh]);
                let dv = p.t().dot(&dout);
                let dp = dout.dot(&v.t());
                // softmax Jacobian: dS = P ⊙ (dP − rowsum(dP ⊙ P))
                let mut ds = &dp * p;
                let row_dot = ds.sum_axis(Axis(1));
                Zip::from(ds.rows_mut())
                    .and(p.rows())
                    .and(&row_dot)
                    .for_each(|mut d, pr, &r| {
                        d.zip_mut_with(&pr, |dv, &pv| *dv -= pv * r);
                    });
                ds *= scale;
                dqkv.slice_mut(s![rows.clone(), h * dh..(h + 1) * dh]).assign(&ds.dot(&k));
                dqkv.slice_mut(s![rows.clone(), dim + h * dh..dim + (h + 1) * dh])
                    .assign(&ds.t().dot(&q));
                dqkv.slice_mut(s![rows.clone(), 2 * dim + h * dh..2 * dim + (h + 1) * dh])
                    .assign(&dv);
            }
        }
        self.qkv.backward(&cache.x, &dqkv, true).expect("dx requested")
    }

    pub fn visit(&self, prefix: &str, f: &mut VisitFn<'_, T>) {
        self.qkv.visit(&format!("{prefix}.qkv"), f);
        self.proj.visit(&format!("{prefix}.proj"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut VisitMutFn<'_, T>) {
        self.qkv.visit_mut(&format!("{prefix}.qkv"), f);
        self.proj.visit_mut(&format!("{prefix}.proj"), f);
    }
}

/// Two-layer feed-forward block with GELU.
#[derive(Clone, Debug, PartialEq)]
pub struct FeedForward<T> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

pub struct FeedForwardCache<T> {
    x: Array2<T>,
    pre: Array2<T>,
    act: Array2<T>,
}

impl<T: Real> FeedForward<T> {
    pub fn new(rng: &mut Rng, dim: usize, hidden: usize) -> Self {
        Self {
            fc1: Linear::new(rng, dim, hidden, true),
            fc2: Linear::new(rng, hidden, dim, true),
        }
    }

    pub fn forward(&self, x: &Array2<T>) -> (Array2<T>, FeedForwardCache<T>) {
        let pre = self.fc1.forward(x);
        let act = gelu(&pre);
        let y = self.fc2.forward(&act);
        (
            y,
            FeedForwardCache {
                x: x.clone(),
                pre,
                act,
            },
        )
    }

    pub fn backward(&mut self, cache: &FeedForwardCache<T>, dy: &Array2<T>) -> Array2<T> {
        let dact = self.fc2.backward(&cache.act, dy, true).expect("dx requested");
        let dpre = gelu_backward(&cache.pre, &dact);
        self.fc1.backward(&cache.x, &dpre, true).expect("dx requested")
    }

    pub fn visit(&self, prefix: &str, f: &mut VisitFn<'_, T>) {
        self.fc1.visit(&format!("{prefix}.fc1"), f);
        self.fc2.visit(&format!("{prefix}.fc2"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut VisitMutFn<'_, T>) {
        self.fc1.visit_mut(&format!("{prefix}.fc1"), f);
        self.fc2.visit_mut(&format!("{prefix}.fc2"), f);
    }
}
