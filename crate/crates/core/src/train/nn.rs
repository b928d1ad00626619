//! Non-linear building blocks with hand-written backward passes.

use crate::dense::DenseMatrix;
use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::train::optim::{Moments, Optimizer};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu<T: Scalar>(x: T) -> T {
    // 0.5 x (1 + tanh u) = x sigmoid(2u)
    x * sigmoid_2u(x)
}

fn sigmoid_2u<T: Scalar>(x: T) -> T {
    let inner = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    T::one() / (T::one() + (-(inner + inner)).exp())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let s = sigmoid_2u(x);
    let d_inner = T::lit(GELU_C) * (T::one() + T::lit(3.0 * GELU_A) * x * x);
    s + T::lit(2.0) * x * s * (T::one() - s) * d_inner
}

pub fn gelu_forward<T: Scalar>(x: &DenseMatrix<T>) -> DenseMatrix<T> {
    x.map(gelu)
}

pub fn gelu_backward<T: Scalar>(x: &DenseMatrix<T>, dy: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
    dy.hadamard(&x.map(gelu_grad))
}

/// Mean squared error over all entries and its gradient.
pub fn mse_loss<T: Scalar>(pred: &DenseMatrix<T>, target: &DenseMatrix<T>) -> Result<(T, DenseMatrix<T>)> {
    let diff = pred.sub(target)?;
    let count = T::lit(diff.len().max(1) as f64);
    let loss = diff.as_slice().iter().map(|&d| d * d).sum::<T>() / count;
    let grad = diff.scale(T::lit(2.0) / count);
    Ok((loss, grad))
}

/// Mean token cross-entropy from raw logits and its gradient.
pub fn cross_entropy<T: Scalar>(logits: &DenseMatrix<T>, targets: &[usize]) -> Result<(T, DenseMatrix<T>)> {
    if targets.len() != logits.rows() {
        return Err(shape_err("cross_entropy", logits.rows(), targets.len()));
    }
    let vocab = logits.cols();
    let count = T::lit(targets.len().max(1) as f64);
    let mut grad = DenseMatrix::zeros(logits.rows(), vocab);
    let mut total = T::zero();
    for (r, &t) in targets.iter().enumerate() {
        if t >= vocab {
            return Err(Error::InvalidArgument(format!("target {t} outside vocabulary {vocab}")));
        }
        let row = logits.row(r);
        let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        total = total + (log_z - row[t]);
        let g = grad.row_mut(r);
        for (gv, &v) in g.iter_mut().zip(row) {
            *gv = (v - log_z).exp() / count;
        }
        g[t] = g[t] - T::one() / count;
    }
    Ok((total / count, grad))
}

/// Layer normalization over the feature dimension with affine parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<T = f32> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    eps: T,
    state_g: Moments<T>,
    state_b: Moments<T>,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache<T> {
    xhat: DenseMatrix<T>,
    inv_std: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormGrads<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: vec![T::one(); dim],
            beta: vec![T::zero(); dim],
            eps: T::lit(1e-5),
            state_g: Moments::default(),
            state_b: Moments::default(),
        }
    }

    pub fn forward(&self, x: &DenseMatrix<T>) -> Result<(DenseMatrix<T>, LayerNormCache<T>)> {
        let d = self.gamma.len();
        if x.cols() != d {
            return Err(shape_err("LayerNorm::forward", d, x.cols()));
        }
        let dn = T::lit(d as f64);
        let mut xhat = DenseMatrix::zeros(x.rows(), d);
        let mut y = DenseMatrix::zeros(x.rows(), d);
        let mut inv_std = Vec::with_capacity(x.rows());
        for r in 0..x.rows() {
            let row = x.row(r);
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let inv = T::one() / (var + self.eps).sqrt();
            inv_std.push(inv);
            let xh = xhat.row_mut(r);
            for (o, &v) in xh.iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
            let xh = xhat.row(r).to_vec();
            for (c, o) in y.row_mut(r).iter_mut().enumerate() {
                *o = self.gamma[c] * xh[c] + self.beta[c];
            }
        }
        Ok((y, LayerNormCache { xhat, inv_std }))
    }

    pub fn backward(&self, dy: &DenseMatrix<T>, cache: &LayerNormCache<T>) -> Result<(DenseMatrix<T>, LayerNormGrads<T>)> {
        let d = self.gamma.len();
        if dy.shape() != cache.xhat.shape() {
            return Err(shape_err("LayerNorm::backward", format!("{:?}", cache.xhat.shape()), format!("{:?}", dy.shape())));
        }
        let dn = T::lit(d as f64);
        let mut grads = LayerNormGrads {
            gamma: vec![T::zero(); d],
            beta: vec![T::zero(); d],
        };
        let mut dx = DenseMatrix::zeros(dy.rows(), d);
        for r in 0..dy.rows() {
            let g = dy.row(r);
            let xh = cache.xhat.row(r);
            let mut sum_dxh = T::zero();
            let mut sum_dxh_xh = T::zero();
            for c in 0..d {
                grads.gamma[c] = grads.gamma[c] + g[c] * xh[c];
                grads.beta[c] = grads.beta[c] + g[c];
                let dxh = g[c] * self.gamma[c];
                sum_dxh = sum_dxh + dxh;
                sum_dxh_xh = sum_dxh_xh + dxh * xh[c];
            }
            let scale = cache.inv_std[r] / dn;
            for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                let dxh = g[c] * self.gamma[c];
                *o = scale * (dn * dxh - sum_dxh - xh[c] * sum_dxh_xh);
            }
        }
        Ok((dx, grads))
    }

    pub fn step(&mut self, grads: &LayerNormGrads<T>, opt: &Optimizer<T>) -> Result<()> {
        let g = opt.combine(&grads.gamma, &self.gamma, false);
        opt.update(&mut self.state_g, &mut self.gamma, &g)?;
        let g = opt.combine(&grads.beta, &self.beta, false);
        opt.update(&mut self.state_b, &mut self.beta, &g)
    }
}

/// Trainable lookup table.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding<T = f32> {
    pub table: DenseMatrix<T>,
    state: Moments<T>,
}

impl<T: Scalar> Embedding<T> {
    pub fn new(table: DenseMatrix<T>) -> Self {
        Self {
            table,
            state: Moments::default(),
        }
    }

    pub fn lookup(&self, ids: &[usize]) -> Result<DenseMatrix<T>> {
        let d = self.table.cols();
        let mut out = DenseMatrix::zeros(ids.len(), d);
        for (r, &id) in ids.iter().enumerate() {
            if id >= self.table.rows() {
                return Err(Error::InvalidArgument(format!("id {id} outside table of {}", self.table.rows())));
            }
            out.row_mut(r).copy_from_slice(self.table.row(id));
        }
        Ok(out)
    }

    /// Scatter-adds rows of `dy` into a table-shaped gradient.
    pub fn backward(&self, ids: &[usize], dy: &DenseMatrix<T>) -> DenseMatrix<T> {
        let mut g = DenseMatrix::zeros(self.table.rows(), self.table.cols());
        for (r, &id) in ids.iter().enumerate() {
            for (o, &v) in g.row_mut(id).iter_mut().zip(dy.row(r)) {
                *o = *o + v;
            }
        }
        g
    }

    pub fn step(&mut self, grad: &DenseMatrix<T>, opt: &Optimizer<T>) -> Result<()> {
        let g = opt.combine(grad.as_slice(), self.table.as_slice(), false);
        opt.update(&mut self.state, self.table.as_mut_slice(), &g)
    }
}

/// Attention probabilities kept for the backward pass, one `ctx x ctx`
/// lower-triangular block per (sequence, head).
#[derive(Debug, Clone)]
pub struct AttentionCache<T> {
    probs: Vec<T>,
}

/// Causal multi-head attention core on packed `q, k, v` (`batch*ctx x d`).
pub fn causal_attention<T: Scalar>(
    q: &DenseMatrix<T>,
    k: &DenseMatrix<T>,
    v: &DenseMatrix<T>,
    batch: usize,
    ctx: usize,
    heads: usize,
) -> Result<(DenseMatrix<T>, AttentionCache<T>)> {
    let d = q.cols();
    check_attention(q, k, v, batch, ctx, heads)?;
    let hd = d / heads;
    let scale = T::one() / T::lit(hd as f64).sqrt();
    let mut out = DenseMatrix::zeros(batch * ctx, d);
    let mut probs = vec![T::zero(); batch * heads * ctx * ctx];
    for b in 0..batch {
        for h in 0..heads {
            let c0 = h * hd;
            let p = &mut probs[(b * heads + h) * ctx * ctx..][..ctx * ctx];
            for t in 0..ctx {
                let qt = &q.row(b * ctx + t)[c0..c0 + hd];
                let mut max = T::neg_infinity();
                for s in 0..=t {
                    let ks = &k.row(b * ctx + s)[c0..c0 + hd];
                    let score = qt.iter().zip(ks).map(|(&a, &b)| a * b).sum::<T>() * scale;
                    p[t * ctx + s] = score;
                    max = max.max(score);
                }
                let mut sum = T::zero();
                for s in 0..=t {
                    let e = (p[t * ctx + s] - max).exp();
                    p[t * ctx + s] = e;
                    sum = sum + e;
                }
                let o = &mut out.row_mut(b * ctx + t)[c0..c0 + hd];
                for s in 0..=t {
                    let w = p[t * ctx + s] / sum;
                    p[t * ctx + s] = w;
                    let vs = &v.row(b * ctx + s)[c0..c0 + hd];
                    for (ov, &vv) in o.iter_mut().zip(vs) {
                        *ov = *ov + w * vv;
                    }
                }
            }
        }
    }
    Ok((out, AttentionCache { probs }))
}

fn check_attention<T: Scalar>(
    q: &DenseMatrix<T>,
    k: &DenseMatrix<T>,
    v: &DenseMatrix<T>,
    batch: usize,
    ctx: usize,
    heads: usize,
) -> Result<()> {
    if heads == 0 || !q.cols().is_multiple_of(heads) {
        return Err(Error::InvalidArgument(format!("{} features not divisible by {heads} heads", q.cols())));
    }
    for m in [q, k, v] {
        if m.shape() != (batch * ctx, q.cols()) {
            return Err(shape_err(
                "causal_attention",
                format!("{}x{}", batch * ctx, q.cols()),
                format!("{}x{}", m.rows(), m.cols()),
            ));
        }
    }
    Ok(())
}

/// Gradients of [`causal_attention`] with respect to `q`, `k`, `v`.
#[allow(clippy::too_many_arguments)]
pub fn causal_attention_backward<T: Scalar>(
    q: &DenseMatrix<T>,
    k: &DenseMatrix<T>,
    v: &DenseMatrix<T>,
    cache: &AttentionCache<T>,
    d_out: &DenseMatrix<T>,
    batch: usize,
    ctx: usize,
    heads: usize,
) -> Result<(DenseMatrix<T>, DenseMatrix<T>, DenseMatrix<T>)> {
    check_attention(q, k, v, batch, ctx, heads)?;
    let d = q.cols();
    let hd = d / heads;
    let scale = T::one() / T::lit(hd as f64).sqrt();
    let mut dq = DenseMatrix::zeros(batch * ctx, d);
    let mut dk = DenseMatrix::zeros(batch * ctx, d);
    let mut dv = DenseMatrix::zeros(batch * ctx, d);
    let mut dp = vec![T::zero(); ctx];
    for b in 0..batch {
        for h in 0..heads {
            let c0 = h * hd;
            let p = &cache.probs[(b * heads + h) * ctx * ctx..][..ctx * ctx];
            for t in 0..ctx {
                let dot = &d_out.row(b * ctx + t)[c0..c0 + hd];
                let mut weighted = T::zero();
                for s in 0..=t {
                    let vs = &v.row(b * ctx + s)[c0..c0 + hd];
                    dp[s] = dot.iter().zip(vs).map(|(&a, &b)| a * b).sum();
                    weighted = weighted + p[t * ctx + s] * dp[s];
                    let w = p[t * ctx + s];
                    for (o, &g) in dv.row_mut(b * ctx + s)[c0..c0 + hd].iter_mut().zip(dot) {
                        *o = *o + w * g;
                    }
                }
                for s in 0..=t {
                    let ds = p[t * ctx + s] * (dp[s] - weighted) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    let ks = k.row(b * ctx + s)[c0..c0 + hd].to_vec();
                    for (o, &kv) in dq.row_mut(b * ctx + t)[c0..c0 + hd].iter_mut().zip(&ks) {
                        *o = *o + ds * kv;
                    }
                    let qt = q.row(b * ctx + t)[c0..c0 + hd].to_vec();
                    for (o, &qv) in dk.row_mut(b * ctx + s)[c0..c0 + hd].iter_mut().zip(&qt) {
                        *o = *o + ds * qv;
                    }
                }
            }
        }
    }
    Ok((dq, dk, dv))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    fn fd<F: Fn(f64) -> f64>(f: F, x: f64) -> f64 {
        let h = 1e-6;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            assert!((gelu_grad(x) - fd(gelu, x)).abs() < 1e-8);
        }
        assert_eq!(gelu(0.0f64), 0.0);
        for &x in &[-30.0f64, -3.0, -0.7, 0.4, 2.5, 30.0] {
            let u = GELU_C * (x + GELU_A * x * x * x);
            assert!((gelu(x) - 0.5 * x * (1.0 + u.tanh())).abs() < 1e-14 * (1.0 + x.abs()));
        }
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let logits = DenseMatrix::<f64>::zeros(3, 5);
        let (loss, grad) = cross_entropy(&logits, &[0, 4, 2]).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-12);
        assert!(grad.as_slice().iter().sum::<f64>().abs() < 1e-12);
        assert!(cross_entropy(&logits, &[0, 5, 1]).is_err());
    }

    fn scalar_fd(m: &DenseMatrix<f64>, i: usize, f: &dyn Fn(&DenseMatrix<f64>) -> f64) -> f64 {
        let h = 1e-6;
        let mut p = m.clone();
        p.as_mut_slice()[i] += h;
        let mut n = m.clone();
        n.as_mut_slice()[i] -= h;
        (f(&p) - f(&n)) / (2.0 * h)
    }

    #[test]
    fn layernorm_backward_matches_difference() {
        let mut rng = rng_from_seed(1);
        let mut ln = LayerNorm::<f64>::new(6);
        ln.gamma = (0..6).map(|i| 1.0 + 0.1 * i as f64).collect();
        ln.beta = vec![0.3; 6];
        let x = DenseMatrix::random_normal(3, 6, 1.0, &mut rng);
        let w = DenseMatrix::random_normal(3, 6, 1.0, &mut rng);
        let loss = |x: &DenseMatrix<f64>| ln.forward(x).unwrap().0.hadamard(&w).unwrap().as_slice().iter().sum::<f64>();
        let (_, cache) = ln.forward(&x).unwrap();
        let (dx, g) = ln.backward(&w, &cache).unwrap();
        for i in 0..x.len() {
            assert!((dx.as_slice()[i] - scalar_fd(&x, i, &loss)).abs() < 1e-6);
        }
        let xhat = cache.xhat.clone();
        for c in 0..6 {
            let expect: f64 = (0..3).map(|r| w.get(r, c) * xhat.get(r, c)).sum();
            assert!((g.gamma[c] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_backward_matches_difference() {
        let mut rng = rng_from_seed(2);
        let (batch, ctx, heads, d) = (2, 4, 2, 6);
        let q = DenseMatrix::<f64>::random_normal(batch * ctx, d, 1.0, &mut rng);
        let k = DenseMatrix::<f64>::random_normal(batch * ctx, d, 1.0, &mut rng);
        let v = DenseMatrix::<f64>::random_normal(batch * ctx, d, 1.0, &mut rng);
        let w = DenseMatrix::<f64>::random_normal(batch * ctx, d, 1.0, &mut rng);
        let run = |q: &DenseMatrix<f64>, k: &DenseMatrix<f64>, v: &DenseMatrix<f64>| {
            let (o, _) = causal_attention(q, k, v, batch, ctx, heads).unwrap();
            o.hadamard(&w).unwrap().as_slice().iter().sum::<f64>()
        };
        let (_, cache) = causal_attention(&q, &k, &v, batch, ctx, heads).unwrap();
        let (dq, dk, dv) = causal_attention_backward(&q, &k, &v, &cache, &w, batch, ctx, heads).unwrap();
        for i in 0..q.len() {
            assert!((dq.as_slice()[i] - scalar_fd(&q, i, &|m| run(m, &k, &v))).abs() < 1e-6);
            assert!((dk.as_slice()[i] - scalar_fd(&k, i, &|m| run(&q, m, &v))).abs() < 1e-6);
            assert!((dv.as_slice()[i] - scalar_fd(&v, i, &|m| run(&q, &k, m))).abs() < 1e-6);
        }
    }

    #[test]
    fn attention_is_causal() {
        let mut rng = rng_from_seed(3);
        let q = DenseMatrix::<f64>::random_normal(4, 4, 1.0, &mut rng);
        let k = DenseMatrix::<f64>::random_normal(4, 4, 1.0, &mut rng);
        let v = DenseMatrix::<f64>::random_normal(4, 4, 1.0, &mut rng);
        let (o, _) = causal_attention(&q, &k, &v, 1, 4, 1).unwrap();
        let mut v2 = v.clone();
        v2.row_mut(3).iter_mut().for_each(|x| *x += 10.0);
        let (o2, _) = causal_attention(&q, &k, &v2, 1, 4, 1).unwrap();
        assert_eq!(o.slice_rows(0, 3).unwrap(), o2.slice_rows(0, 3).unwrap());
        assert_eq!(o.row(0), v.row(0));
    }
}
