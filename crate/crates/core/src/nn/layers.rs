use rayon::prelude::*;

use super::real::{gemm, gemm_ld, Real};
use super::tensor::{Pool, Tensor};
use crate::error::{Error, Result};

/// Samples per parallel work item. Fixed so partial sums are reduced in the
/// same order for any thread count.
const SAMPLE_CHUNK: usize = 4;

/// Target element count of one im2col block.
const COL_BLOCK: usize = 1 << 18;

/// One kernel shape of a convolution bank.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGroup<T> {
    pub filters: usize,
    pub kt: usize,
    pub kf: usize,
    /// Zero padding (before, after) along time and frequency.
    pub pad_t: (usize, usize),
    pub pad_f: (usize, usize),
    /// `filters x (in_channels * kt * kf)`
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> ConvGroup<T> {
    fn k(&self, cin: usize) -> usize {
        cin * self.kt * self.kf
    }

    fn out_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let ph = h + self.pad_t.0 + self.pad_t.1;
        let pw = w + self.pad_f.0 + self.pad_f.1;
        (ph >= self.kt && pw >= self.kf).then(|| (ph - self.kt + 1, pw - self.kf + 1))
    }

    /// Unfold output rows `t0..t1` of one `cin x h x w` item into
    /// `k x ((t1 - t0) * ow)` columns.
    #[allow(clippy::too_many_arguments)]
    fn im2col(&self, x: &[T], cin: usize, h: usize, w: usize, ow: usize, t0: usize, t1: usize, col: &mut [T]) {
        let n = (t1 - t0) * ow;
        for c in 0..cin {
            let plane = &x[c * h * w..(c + 1) * h * w];
            for i in 0..self.kt {
                for j in 0..self.kf {
                    let row = &mut col[((c * self.kt + i) * self.kf + j) * n..][..n];
                    let (f_lo, f_hi) = valid_range(j, self.pad_f.0, w, ow);
                    for t in t0..t1 {
                        let dst = &mut row[(t - t0) * ow..(t - t0 + 1) * ow];
                        let st = (t + i) as isize - self.pad_t.0 as isize;
                        if st < 0 || st >= h as isize || f_lo >= f_hi {
                            dst.fill(T::zero());
                            continue;
                        }
                        let src = &plane[st as usize * w..(st as usize + 1) * w];
                        dst[..f_lo].fill(T::zero());
                        let s0 = f_lo + j - self.pad_f.0;
                        dst[f_lo..f_hi].copy_from_slice(&src[s0..s0 + (f_hi - f_lo)]);
                        dst[f_hi..].fill(T::zero());
                    }
                }
            }
        }
    }

    /// Patch rows for output rows `t0..t1`: `((t1 - t0) * ow) x k`, one
    /// row per output position.
    #[allow(clippy::too_many_arguments)]
    fn im2row(&self, x: &[T], cin: usize, h: usize, w: usize, ow: usize, t0: usize, t1: usize, out: &mut [T]) {
        let k = self.k(cin);
        for t in t0..t1 {
            for fo in 0..ow {
                let row = &mut out[((t - t0) * ow + fo) * k..][..k];
                let j_lo = self.pad_f.0.saturating_sub(fo).min(self.kf);
                let j_hi = (w + self.pad_f.0).saturating_sub(fo).min(self.kf).max(j_lo);
                for c in 0..cin {
                    for i in 0..self.kt {
                        let dst = &mut row[(c * self.kt + i) * self.kf..][..self.kf];
                        let st = (t + i) as isize - self.pad_t.0 as isize;
                        if st < 0 || st >= h as isize || j_lo == j_hi {
                            dst.fill(T::zero());
                            continue;
                        }
                        let src = &x[c * h * w + st as usize * w..][..w];
                        dst[..j_lo].fill(T::zero());
                        let s0 = fo + j_lo - self.pad_f.0;
                        dst[j_lo..j_hi].copy_from_slice(&src[s0..s0 + (j_hi - j_lo)]);
                        dst[j_hi..].fill(T::zero());
                    }
                }
            }
        }
    }

    /// Adjoint of `im2col`: accumulate columns back onto the item.
    #[allow(clippy::too_many_arguments)]
    fn col2im(&self, col: &[T], cin: usize, h: usize, w: usize, ow: usize, t0: usize, t1: usize, x: &mut [T]) {
        let n = (t1 - t0) * ow;
        for c in 0..cin {
            let plane = &mut x[c * h * w..(c + 1) * h * w];
            for i in 0..self.kt {
                for j in 0..self.kf {
                    let row = &col[((c * self.kt + i) * self.kf + j) * n..][..n];
                    let (f_lo, f_hi) = valid_range(j, self.pad_f.0, w, ow);
                    if f_lo >= f_hi {
                        continue;
                    }
                    for t in t0..t1 {
                        let st = (t + i) as isize - self.pad_t.0 as isize;
                        if st < 0 || st >= h as isize {
                            continue;
                        }
                        let s0 = st as usize * w + f_lo + j - self.pad_f.0;
                        let dst = &mut plane[s0..s0 + (f_hi - f_lo)];
                        let src = &row[(t - t0) * ow + f_lo..(t - t0) * ow + f_hi];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += *s;
                        }
                    }
                }
            }
        }
    }

    /// Output rows per column block: about `COL_BLOCK` elements, but wide
    /// enough to keep the matrix products efficient.
    fn block_rows(&self, cin: usize, ow: usize, oh: usize) -> usize {
        let by_size = COL_BLOCK / (self.k(cin) * ow).max(1);
        by_size.max(256usize.div_ceil(ow)).clamp(1, oh)
    }
}

/// `sum(x - shift)` in f64 with independent partial sums.
fn sum_f64<T: Real>(xs: &[T], shift: f64) -> f64 {
    let mut acc = [0.0f64; 8];
    let chunks = xs.chunks_exact(8);
    let rest = chunks.remainder();
    for c in chunks {
        for (a, v) in acc.iter_mut().zip(c) {
            *a += v.f64() - shift;
        }
    }
    acc.iter().sum::<f64>() + rest.iter().map(|v| v.f64() - shift).sum::<f64>()
}

/// `sum((x - m)^2)` in f64.
fn sum_sq_f64<T: Real>(xs: &[T], m: f64) -> f64 {
    let mut acc = [0.0f64; 8];
    let chunks = xs.chunks_exact(8);
    let rest = chunks.remainder();
    for c in chunks {
        for (a, v) in acc.iter_mut().zip(c) {
            let d = v.f64() - m;
            *a += d * d;
        }
    }
    acc.iter().sum::<f64>() + rest.iter().map(|v| (v.f64() - m).powi(2)).sum::<f64>()
}

fn dot_f64<T: Real>(xs: &[T], ys: &[T]) -> f64 {
    let mut acc = [0.0f64; 8];
    let (cx, cy) = (xs.chunks_exact(8), ys.chunks_exact(8));
    let tail: f64 = cx.remainder().iter().zip(cy.remainder()).map(|(a, b)| a.f64() * b.f64()).sum();
    for (a8, b8) in cx.zip(cy) {
        for ((acc, a), b) in acc.iter_mut().zip(a8).zip(b8) {
            *acc += a.f64() * b.f64();
        }
    }
    acc.iter().sum::<f64>() + tail
}

/// Output positions `f` whose source column `f + j - pad` lies inside `0..w`.
fn valid_range(j: usize, pad: usize, w: usize, ow: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(j);
    let hi = (w + pad).saturating_sub(j).min(ow);
    (lo.min(hi), hi)
}

/// Parallel convolution branches over the same input, concatenated along
/// channels. A plain convolution is a bank with one group.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBank<T> {
    pub in_channels: usize,
    pub groups: Vec<ConvGroup<T>>,
    /// L2 coefficient on the weights (not biases).
    pub l2: f64,
}

impl<T: Real> ConvBank<T> {
    pub fn out_channels(&self) -> usize {
        self.groups.iter().map(|g| g.filters).sum()
    }

    fn out_shape(&self, s: [usize; 3]) -> Result<[usize; 3]> {
        if s[0] != self.in_channels {
            return Err(Error::shape(format!("expects {} channels, got {}", self.in_channels, s[0])));
        }
        let mut hw = None;
        for g in &self.groups {
            let o = g
                .out_hw(s[1], s[2])
                .ok_or_else(|| Error::shape(format!("kernel {}x{} larger than {}x{}", g.kt, g.kf, s[1], s[2])))?;
            if hw.is_some_and(|p| p != o) {
                return Err(Error::shape("branches produce different map sizes"));
            }
            hw = Some(o);
        }
        let (oh, ow) = hw.ok_or_else(|| Error::shape("empty convolution bank"))?;
        Ok([self.out_channels(), oh, ow])
    }

    fn forward(&self, x: &Tensor<T>, pool: &Pool<T>) -> Tensor<T> {
        let [b, cin, h, w] = x.shape;
        let [cout, oh, ow] = self.out_shape([cin, h, w]).expect("shape checked at build");
        let n = oh * ow;
        let mut y = pool.zeros([b, cout, oh, ow]);
        y.data
            .par_chunks_mut(SAMPLE_CHUNK * cout * n)
            .zip(x.data.par_chunks(SAMPLE_CHUNK * cin * h * w))
            .for_each(|(ys, xs)| {
                let mut col = Vec::new();
                for (yi, xi) in ys.chunks_mut(cout * n).zip(xs.chunks(cin * h * w)) {
                    let mut off = 0;
                    for g in &self.groups {
                        let k = g.k(cin);
                        let rows = g.block_rows(cin, ow, oh);
                        col.resize(k * rows * ow, T::zero());
                        let out = &mut yi[off * n..(off + g.filters) * n];
                        for t0 in (0..oh).step_by(rows) {
                            let t1 = (t0 + rows).min(oh);
                            let nb = (t1 - t0) * ow;
                            g.im2col(xi, cin, h, w, ow, t0, t1, &mut col);
                            gemm_ld(g.filters, k, nb, &g.weight, k, false, &col, nb, false, T::zero(), &mut out[t0 * ow..], n);
                        }
                        for (f, row) in out.chunks_mut(n).enumerate() {
                            let bf = g.bias[f];
                            row.iter_mut().for_each(|v| *v += bf);
                        }
                        off += g.filters;
                    }
                }
            });
        y
    }

    /// Returns the input gradient (empty when `need_dx` is false) and
    /// accumulates `[w0, b0, w1, b1, ...]` into `grads`.
    fn backward(&self, x: &Tensor<T>, dy: &Tensor<T>, grads: &mut [Vec<T>], need_dx: bool, pool: &Pool<T>) -> Tensor<T> {
        let [b, cin, h, w] = x.shape;
        let [cout, oh, ow] = [dy.shape[1], dy.shape[2], dy.shape[3]];
        let n = oh * ow;
        let mut dx = if need_dx { pool.zeros(x.shape) } else { Tensor::zeros([b, 0, 0, 0]) };
        let in_len = cin * h * w;
        let mut dx_chunks: Vec<&mut [T]> = if need_dx {
            dx.data.chunks_mut(SAMPLE_CHUNK * in_len).collect()
        } else {
            Vec::new()
        };
        let n_chunks = b.div_ceil(SAMPLE_CHUNK);
        dx_chunks.resize_with(n_chunks, || &mut []);

        let partials: Vec<Vec<Vec<T>>> = dx_chunks
            .into_par_iter()
            .enumerate()
            .map(|(ci, dxs)| {
                let mut part: Vec<Vec<T>> = self
                    .groups
                    .iter()
                    .flat_map(|g| [vec![T::zero(); g.weight.len()], vec![T::zero(); g.filters]])
                    .collect();
                let mut patches = Vec::new();
                let mut dcol = Vec::new();
                let s_end = ((ci + 1) * SAMPLE_CHUNK).min(b);
                for s in ci * SAMPLE_CHUNK..s_end {
                    let xi = x.item(s);
                    let dyi = dy.item(s);
                    let local = s - ci * SAMPLE_CHUNK;
                    let mut off = 0;
                    for (gi, g) in self.groups.iter().enumerate() {
                        let k = g.k(cin);
                        let rows = g.block_rows(cin, ow, oh);
                        patches.resize(k * rows * ow, T::zero());
                        if need_dx {
                            dcol.resize(k * rows * ow, T::zero());
                        }
                        let dyg = &dyi[off * n..(off + g.filters) * n];
                        for t0 in (0..oh).step_by(rows) {
                            let t1 = (t0 + rows).min(oh);
                            let nb = (t1 - t0) * ow;
                            g.im2row(xi, cin, h, w, ow, t0, t1, &mut patches);
                            let dyb = &dyg[t0 * ow..];
                            gemm_ld(g.filters, nb, k, dyb, n, false, &patches, k, false, T::one(), &mut part[2 * gi], k);
                            if need_dx {
                                gemm_ld(k, g.filters, nb, &g.weight, k, true, dyb, n, false, T::zero(), &mut dcol, nb);
                                g.col2im(&dcol, cin, h, w, ow, t0, t1, &mut dxs[local * in_len..(local + 1) * in_len]);
                            }
                        }
                        for (f, row) in dyg.chunks(n).enumerate() {
                            part[2 * gi + 1][f] += row.iter().copied().sum::<T>();
                        }
                        off += g.filters;
                    }
                }
                part
            })
            .collect();
        debug_assert_eq!(cout, self.out_channels());
        for part in partials {
            for (acc, p) in grads.iter_mut().zip(part) {
                acc.iter_mut().zip(p).for_each(|(a, v)| *a += v);
            }
        }
        for (gi, g) in self.groups.iter().enumerate() {
            let coef = T::of(2.0 * self.l2);
            grads[2 * gi].iter_mut().zip(&g.weight).for_each(|(d, w)| *d += coef * *w);
        }
        dx
    }

    fn l2_penalty(&self) -> f64 {
        self.l2
            * self
                .groups
                .iter()
                .flat_map(|g| g.weight.iter())
                .map(|w| w.f64() * w.f64())
                .sum::<f64>()
    }
}

/// Per-channel batch normalization over batch, time and frequency.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T> {
    pub channels: usize,
    pub momentum: f64,
    pub epsilon: f64,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

impl<T: Real> BatchNorm<T> {
    pub fn new(channels: usize, momentum: f64, epsilon: f64) -> Self {
        BatchNorm {
            channels,
            momentum,
            epsilon,
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
        }
    }

    /// Blend batch statistics into the running estimates.
    pub fn update_running(&mut self, mean: &[T], var: &[T]) {
        let m = T::of(self.momentum);
        let one_m = T::one() - m;
        for c in 0..self.channels {
            self.running_mean[c] = m * self.running_mean[c] + one_m * mean[c];
            self.running_var[c] = m * self.running_var[c] + one_m * var[c];
        }
    }
}

/// Floor-division max pooling with non-overlapping windows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaxPool {
    pub pt: usize,
    pub pf: usize,
}

/// Fully connected layer over the flattened `c x h x w` item.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub inputs: usize,
    pub units: usize,
    /// `units x inputs`
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T> {
    Conv(ConvBank<T>),
    BatchNorm(BatchNorm<T>),
    Relu,
    MaxPool(MaxPool),
    Dense(Dense<T>),
}

/// What a layer keeps from the forward pass for its backward pass.
#[derive(Debug)]
pub enum Cache<T> {
    Input(Tensor<T>),
    BatchNorm { x_hat: Tensor<T>, inv_std: Vec<T>, mean: Vec<T>, var: Vec<T> },
    Output(Tensor<T>),
    Argmax { index: Vec<u32>, in_shape: [usize; 4] },
}

impl<T: Real> Layer<T> {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv(_) => "conv",
            Layer::BatchNorm(_) => "batch_norm",
            Layer::Relu => "relu",
            Layer::MaxPool(_) => "max_pool",
            Layer::Dense(_) => "dense",
        }
    }

    /// Output item shape for an input item shape `[c, h, w]`.
    pub fn out_shape(&self, s: [usize; 3]) -> Result<[usize; 3]> {
        match self {
            Layer::Conv(c) => c.out_shape(s),
            Layer::BatchNorm(bn) => {
                if s[0] != bn.channels {
                    return Err(Error::shape(format!("expects {} channels, got {}", bn.channels, s[0])));
                }
                Ok(s)
            }
            Layer::Relu => Ok(s),
            Layer::MaxPool(p) => {
                if p.pt == 0 || p.pf == 0 || s[1] < p.pt || s[2] < p.pf {
                    return Err(Error::shape(format!("pool {}x{} does not fit {}x{}", p.pt, p.pf, s[1], s[2])));
                }
                Ok([s[0], s[1] / p.pt, s[2] / p.pf])
            }
            Layer::Dense(d) => {
                if s.iter().product::<usize>() != d.inputs {
                    return Err(Error::shape(format!("expects {} inputs, got {s:?}", d.inputs)));
                }
                Ok([d.units, 1, 1])
            }
        }
    }

    pub fn params(&self) -> Vec<&[T]> {
        match self {
            Layer::Conv(c) => c.groups.iter().flat_map(|g| [&g.weight[..], &g.bias[..]]).collect(),
            Layer::BatchNorm(bn) => vec![&bn.gamma, &bn.beta],
            Layer::Dense(d) => vec![&d.weight, &d.bias],
            Layer::Relu | Layer::MaxPool(_) => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<T>> {
        match self {
            Layer::Conv(c) => c.groups.iter_mut().flat_map(|g| [&mut g.weight, &mut g.bias]).collect(),
            Layer::BatchNorm(bn) => vec![&mut bn.gamma, &mut bn.beta],
            Layer::Dense(d) => vec![&mut d.weight, &mut d.bias],
            Layer::Relu | Layer::MaxPool(_) => Vec::new(),
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        match self {
            Layer::Conv(c) => (0..c.groups.len()).flat_map(|g| [format!("w{g}"), format!("b{g}")]).collect(),
            Layer::BatchNorm(_) => vec!["gamma".into(), "beta".into()],
            Layer::Dense(_) => vec!["w".into(), "b".into()],
            Layer::Relu | Layer::MaxPool(_) => Vec::new(),
        }
    }

    pub fn l2_penalty(&self) -> f64 {
        match self {
            Layer::Conv(c) => c.l2_penalty(),
            _ => 0.0,
        }
    }

    /// Forward pass. With `train`, batch normalization uses batch
    /// statistics and a cache for `backward` is returned.
    pub fn forward(&self, x: Tensor<T>, train: bool) -> (Tensor<T>, Option<Cache<T>>) {
        self.forward_pooled(x, train, &Pool::default())
    }

    pub fn backward(&self, cache: Cache<T>, dy: Tensor<T>, grads: &mut [Vec<T>], need_dx: bool) -> Tensor<T> {
        self.backward_pooled(cache, dy, grads, need_dx, &Pool::default())
    }

    /// `forward` drawing buffers from, and returning spent ones to, `pool`.
    pub fn forward_pooled(&self, mut x: Tensor<T>, train: bool, pool: &Pool<T>) -> (Tensor<T>, Option<Cache<T>>) {
        match self {
            Layer::Conv(c) => {
                let y = c.forward(&x, pool);
                if train {
                    (y, Some(Cache::Input(x)))
                } else {
                    pool.recycle(x);
                    (y, None)
                }
            }
            Layer::BatchNorm(bn) => {
                let [b, ch, h, w] = x.shape;
                let plane = h * w;
                if !train {
                    for s in 0..b {
                        for c in 0..ch {
                            let inv = T::one() / (bn.running_var[c] + T::of(bn.epsilon)).sqrt();
                            let (m, g, be) = (bn.running_mean[c], bn.gamma[c], bn.beta[c]);
                            let base = (s * ch + c) * plane;
                            for v in &mut x.data[base..base + plane] {
                                *v = g * (*v - m) * inv + be;
                            }
                        }
                    }
                    return (x, None);
                }
                let count = (b * plane) as f64;
                let mut mean = vec![T::zero(); ch];
                let mut var = vec![T::zero(); ch];
                let mut inv_std = vec![T::zero(); ch];
                for c in 0..ch {
                    let planes = || (0..b).map(|s| &x.data[(s * ch + c) * plane..][..plane]);
                    let m = planes().map(|p| sum_f64(p, 0.0)).sum::<f64>() / count;
                    let v = planes().map(|p| sum_sq_f64(p, m)).sum::<f64>() / count;
                    mean[c] = T::of(m);
                    var[c] = T::of(v);
                    inv_std[c] = T::of(1.0 / (v + bn.epsilon).sqrt());
                }
                let mut y = pool.zeros(x.shape);
                for s in 0..b {
                    for c in 0..ch {
                        let base = (s * ch + c) * plane;
                        let (m, inv, g, be) = (mean[c], inv_std[c], bn.gamma[c], bn.beta[c]);
                        for (xv, yv) in x.data[base..base + plane].iter_mut().zip(&mut y.data[base..base + plane]) {
                            *xv = (*xv - m) * inv;
                            *yv = g * *xv + be;
                        }
                    }
                }
                (y, Some(Cache::BatchNorm { x_hat: x, inv_std, mean, var }))
            }
            Layer::Relu => {
                x.data.iter_mut().for_each(|v| *v = v.max(T::zero()));
                let cache = train.then(|| Cache::Output(pool.copy_of(&x)));
                (x, cache)
            }
            Layer::MaxPool(p) => {
                let [b, ch, h, w] = x.shape;
                let (oh, ow) = (h / p.pt, w / p.pf);
                let mut y = pool.zeros([b, ch, oh, ow]);
                let mut index = vec![0u32; if train { b * ch * oh * ow } else { 0 }];
                for bc in 0..b * ch {
                    let src = &x.data[bc * h * w..(bc + 1) * h * w];
                    for t in 0..oh {
                        for f in 0..ow {
                            let mut best = (t * p.pt) * w + f * p.pf;
                            let mut best_v = src[best];
                            for i in 0..p.pt {
                                let r0 = (t * p.pt + i) * w + f * p.pf;
                                for (j, &v) in src[r0..r0 + p.pf].iter().enumerate() {
                                    if v > best_v {
                                        best_v = v;
                                        best = r0 + j;
                                    }
                                }
                            }
                            let o = (bc * oh + t) * ow + f;
                            y.data[o] = best_v;
                            if train {
                                index[o] = best as u32;
                            }
                        }
                    }
                }
                let in_shape = x.shape;
                pool.recycle(x);
                (y, train.then_some(Cache::Argmax { index, in_shape }))
            }
            Layer::Dense(d) => {
                let b = x.batch();
                let mut y = Tensor::zeros([b, d.units, 1, 1]);
                gemm(b, d.inputs, d.units, &x.data, false, &d.weight, true, T::zero(), &mut y.data);
                for row in y.data.chunks_mut(d.units) {
                    row.iter_mut().zip(&d.bias).for_each(|(v, bb)| *v += *bb);
                }
                if train {
                    (y, Some(Cache::Input(x)))
                } else {
                    pool.recycle(x);
                    (y, None)
                }
            }
        }
    }

    /// Backward pass. Parameter gradients are accumulated into `grads`
    /// (one entry per tensor of `params()`).
    pub fn backward_pooled(
        &self,
        cache: Cache<T>,
        mut dy: Tensor<T>,
        grads: &mut [Vec<T>],
        need_dx: bool,
        pool: &Pool<T>,
    ) -> Tensor<T> {
        match (self, cache) {
            (Layer::Conv(c), Cache::Input(x)) => {
                let dx = c.backward(&x, &dy, grads, need_dx, pool);
                pool.recycle(x);
                pool.recycle(dy);
                dx
            }
            (Layer::BatchNorm(bn), Cache::BatchNorm { x_hat, inv_std, .. }) => {
                let [b, ch, h, w] = dy.shape;
                let plane = h * w;
                let count = T::of((b * plane) as f64);
                for c in 0..ch {
                    let (mut dg, mut db) = (0.0f64, 0.0f64);
                    for s in 0..b {
                        let base = (s * ch + c) * plane;
                        dg += dot_f64(&dy.data[base..base + plane], &x_hat.data[base..base + plane]);
                        db += sum_f64(&dy.data[base..base + plane], 0.0);
                    }
                    grads[0][c] += T::of(dg);
                    grads[1][c] += T::of(db);
                    let scale = bn.gamma[c] * inv_std[c] / count;
                    let (dg, db) = (T::of(dg), T::of(db));
                    for s in 0..b {
                        let base = (s * ch + c) * plane;
                        for (d, xh) in dy.data[base..base + plane].iter_mut().zip(&x_hat.data[base..base + plane]) {
                            *d = scale * (count * *d - db - *xh * dg);
                        }
                    }
                }
                pool.recycle(x_hat);
                dy
            }
            (Layer::Relu, Cache::Output(y)) => {
                dy.data
                    .iter_mut()
                    .zip(&y.data)
                    .for_each(|(d, v)| *d = if *v > T::zero() { *d } else { T::zero() });
                pool.recycle(y);
                dy
            }
            (Layer::MaxPool(_), Cache::Argmax { index, in_shape }) => {
                let mut dx = pool.zeros(in_shape);
                let plane_in = in_shape[2] * in_shape[3];
                let plane_out = dy.shape[2] * dy.shape[3];
                for (o, (d, idx)) in dy.data.iter().zip(&index).enumerate() {
                    dx.data[(o / plane_out) * plane_in + *idx as usize] += *d;
                }
                pool.recycle(dy);
                dx
            }
            (Layer::Dense(d), Cache::Input(x)) => {
                let b = x.batch();
                gemm(d.units, b, d.inputs, &dy.data, true, &x.data, false, T::one(), &mut grads[0]);
                for row in dy.data.chunks(d.units) {
                    grads[1].iter_mut().zip(row).for_each(|(g, v)| *g += *v);
                }
                let mut dx = Tensor::zeros(x.shape);
                if need_dx {
                    gemm(b, d.units, d.inputs, &dy.data, false, &d.weight, false, T::zero(), &mut dx.data);
                }
                dx
            }
            _ => unreachable!("cache does not belong to this layer"),
        }
    }
}
