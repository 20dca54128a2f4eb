//! Dense layers with hand-written backward passes.
//!
//! Everything runs in `f64` on row-major `[tokens, features]` matrices. Each
//! layer exposes `forward` (returning whatever the backward pass needs) and a
//! `backward` that accumulates parameter gradients into a gradient struct of
//! the same type and returns the gradient w.r.t. the layer input.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, ArrayViewD, ArrayViewMutD, Axis, Zip};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Seeded generator for an independent `stream` under `seed`.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Named access to every trainable tensor of a module.
///
/// Visiting order is fixed and is what flat parameter vectors, optimizer
/// moments and checkpoints are keyed on.
pub trait Params {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub fn param_count<P: Params + ?Sized>(p: &P) -> usize {
    let mut n = 0;
    p.visit("", &mut |_, a| n += a.len());
    n
}

pub fn flatten<P: Params + ?Sized>(p: &P) -> Vec<f64> {
    let mut out = Vec::with_capacity(param_count(p));
    p.visit("", &mut |_, a| out.extend(a.iter().copied()));
    out
}

/// Overwrites parameters from a flat vector in visiting order.
pub fn unflatten<P: Params + ?Sized>(p: &mut P, flat: &[f64]) {
    let mut offset = 0;
    p.visit_mut("", &mut |_, mut a| {
        for (dst, src) in a.iter_mut().zip(&flat[offset..]) {
            *dst = *src;
        }
        offset += a.len();
    });
    assert_eq!(offset, flat.len(), "flat parameter length mismatch");
}

pub fn fill<P: Params + ?Sized>(p: &mut P, value: f64) {
    p.visit_mut("", &mut |_, mut a| a.fill(value));
}

/// A zeroed copy, used as a gradient accumulator.
pub fn zeros_like<P: Params + Clone>(p: &P) -> P {
    let mut g = p.clone();
    fill(&mut g, 0.0);
    g
}

pub fn l2_norm<P: Params + ?Sized>(p: &P) -> f64 {
    let mut s = 0.0;
    p.visit("", &mut |_, a| s += a.iter().map(|x| x * x).sum::<f64>());
    s.sqrt()
}

pub fn all_finite<P: Params + ?Sized>(p: &P) -> bool {
    let mut ok = true;
    p.visit("", &mut |_, a| ok &= a.iter().all(|x| x.is_finite()));
    ok
}

#[derive(Clone, Debug)]
pub struct Linear {
    /// `[in, out]`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    /// Xavier-uniform weights, zero bias.
    pub fn new(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (input + output) as f64).sqrt();
        let weight = Array2::from_shape_simple_fn((input, output), || rng.random_range(-limit..limit));
        Self {
            weight,
            bias: Array1::zeros(output),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Array2::zeros((input, output)),
            bias: Array1::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: &ArrayView2<'_, f64>) -> Array2<f64> {
        let mut y = x.dot(&self.weight);
        y += &self.bias;
        y
    }

    /// Accumulates into `grad` and returns `dL/dx`.
    pub fn backward(
        &self,
        x: &ArrayView2<'_, f64>,
        dy: &ArrayView2<'_, f64>,
        grad: &mut Linear,
    ) -> Array2<f64> {
        general_mat_mul(1.0, &x.t(), dy, 1.0, &mut grad.weight);
        grad.bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight.t())
    }

    /// Parameter gradients only, for layers whose input gradient is unused.
    pub fn backward_params(&self, x: &ArrayView2<'_, f64>, dy: &ArrayView2<'_, f64>, grad: &mut Linear) {
        general_mat_mul(1.0, &x.t(), dy, 1.0, &mut grad.weight);
        grad.bias += &dy.sum_axis(Axis(0));
    }
}

impl Params for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        f(&join(prefix, "weight"), self.weight.view().into_dyn());
        f(&join(prefix, "bias"), self.bias.view().into_dyn());
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        f(&join(prefix, "weight"), self.weight.view_mut().into_dyn());
        f(&join(prefix, "bias"), self.bias.view_mut().into_dyn());
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

pub struct LayerNormCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

const LN_EPS: f64 = 1e-6;

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
        }
    }

    pub fn forward(&self, x: &ArrayView2<'_, f64>) -> (Array2<f64>, LayerNormCache) {
        let d = x.ncols() as f64;
        let mut xhat = x.to_owned();
        let mut rstd = Array1::zeros(x.nrows());
        for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
            let mean = row.sum() / d;
            row -= mean;
            let var = row.iter().map(|v| v * v).sum::<f64>() / d;
            *r = 1.0 / (var + LN_EPS).sqrt();
            row *= *r;
        }
        let mut y = &xhat * &self.gamma;
        y += &self.beta;
        (y, LayerNormCache { xhat, rstd })
    }

    pub fn backward(
        &self,
        cache: &LayerNormCache,
        dy: &ArrayView2<'_, f64>,
        grad: &mut LayerNorm,
    ) -> Array2<f64> {
        grad.gamma += &(dy * &cache.xhat).sum_axis(Axis(0));
        grad.beta += &dy.sum_axis(Axis(0));
        let d = dy.ncols() as f64;
        let mut dx = dy * &self.gamma;
        for ((mut row, xh), r) in dx
            .rows_mut()
            .into_iter()
            .zip(cache.xhat.rows())
            .zip(cache.rstd.iter())
        {
            let mean_g = row.sum() / d;
            let mean_gx = row.iter().zip(xh.iter()).map(|(g, x)| g * x).sum::<f64>() / d;
            Zip::from(&mut row)
                .and(&xh)
                .for_each(|g, &x| *g = r * (*g - mean_g - x * mean_gx));
        }
        dx
    }
}

impl Params for LayerNorm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        f(&join(prefix, "gamma"), self.gamma.view().into_dyn());
        f(&join(prefix, "beta"), self.beta.view().into_dyn());
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        f(&join(prefix, "gamma"), self.gamma.view_mut().into_dyn());
        f(&join(prefix, "beta"), self.beta.view_mut().into_dyn());
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Row-wise softmax, in place.
pub fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row /= s;
    }
}

/// Multi-head self-attention with a fused QKV projection.
#[derive(Clone, Debug)]
pub struct Attention {
    pub heads: usize,
    pub qkv: Linear,
    pub proj: Linear,
}

pub struct AttentionCache {
    qkv: Array2<f64>,
    probs: Vec<Array2<f64>>,
    ctx: Array2<f64>,
}

impl Attention {
    pub fn new(dim: usize, heads: usize, rng: &mut impl Rng) -> Self {
        assert!(heads > 0 && dim % heads == 0, "dim {dim} not divisible by {heads} heads");
        Self {
            heads,
            qkv: Linear::new(dim, 3 * dim, rng),
            proj: Linear::new(dim, dim, rng),
        }
    }

    fn dim(&self) -> usize {
        self.proj.input_dim()
    }

    pub fn forward(&self, x: &ArrayView2<'_, f64>) -> (Array2<f64>, AttentionCache) {
        let n = x.nrows();
        let d = self.dim();
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qkv = self.qkv.forward(x);
        let mut ctx = Array2::zeros((n, d));
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let q = qkv.slice(ndarray::s![.., h * dh..(h + 1) * dh]);
            let k = qkv.slice(ndarray::s![.., d + h * dh..d + (h + 1) * dh]);
            let v = qkv.slice(ndarray::s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
            let mut p = Array2::zeros((n, n));
            general_mat_mul(scale, &q, &k.t(), 0.0, &mut p);
            softmax_rows(&mut p);
            let mut out = ctx.slice_mut(ndarray::s![.., h * dh..(h + 1) * dh]);
            general_mat_mul(1.0, &p, &v, 0.0, &mut out);
            probs.push(p);
        }
        let y = self.proj.forward(&ctx.view());
        (y, AttentionCache { qkv, probs, ctx })
    }

    pub fn backward(
        &self,
        x: &ArrayView2<'_, f64>,
        cache: &AttentionCache,
        dy: &ArrayView2<'_, f64>,
        grad: &mut Attention,
    ) -> Array2<f64> {
        let n = x.nrows();
        let d = self.dim();
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let dctx = self.proj.backward(&cache.ctx.view(), dy, &mut grad.proj);
        let mut dqkv = Array2::zeros((n, 3 * d));
        let mut dp = Array2::zeros((n, n));
        for (h, p) in cache.probs.iter().enumerate() {
            let q = cache.qkv.slice(ndarray::s![.., h * dh..(h + 1) * dh]);
            let k = cache.qkv.slice(ndarray::s![.., d + h * dh..d + (h + 1) * dh]);
            let v = cache.qkv.slice(ndarray::s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
            let dout = dctx.slice(ndarray::s![.., h * dh..(h + 1) * dh]);
            // dV = P^T dO
            general_mat_mul(
                1.0,
                &p.t(),
                &dout,
                0.0,
                &mut dqkv.slice_mut(ndarray::s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]),
            );
            // dP = dO V^T, then through the softmax.
            general_mat_mul(1.0, &dout, &v.t(), 0.0, &mut dp);
            for (mut drow, prow) in dp.rows_mut().into_iter().zip(p.rows()) {
                let dot = drow.iter().zip(prow.iter()).map(|(a, b)| a * b).sum::<f64>();
                Zip::from(&mut drow).and(&prow).for_each(|g, &pv| *g = pv * (*g - dot));
            }
            general_mat_mul(
                scale,
                &dp,
                &k,
                0.0,
                &mut dqkv.slice_mut(ndarray::s![.., h * dh..(h + 1) * dh]),
            );
            general_mat_mul(
                scale,
                &dp.t(),
                &q,
                0.0,
                &mut dqkv.slice_mut(ndarray::s![.., d + h * dh..d + (h + 1) * dh]),
            );
        }
        self.qkv.backward(x, &dqkv.view(), &mut grad.qkv)
    }
}

impl Params for Attention {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        self.qkv.visit(&join(prefix, "qkv"), f);
        self.proj.visit(&join(prefix, "proj"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        self.qkv.visit_mut(&join(prefix, "qkv"), f);
        self.proj.visit_mut(&join(prefix, "proj"), f);
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `h + mlp(ln(h))`.
#[derive(Clone, Debug)]
pub struct Block {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

pub struct BlockCache {
    x: Array2<f64>,
    norm1: LayerNormCache,
    n1: Array2<f64>,
    attn: AttentionCache,
    norm2: LayerNormCache,
    n2: Array2<f64>,
    pre_act: Array2<f64>,
    act: Array2<f64>,
}

impl Block {
    pub fn new(dim: usize, heads: usize, mlp_ratio: usize, rng: &mut impl Rng) -> Self {
        let hidden = dim * mlp_ratio;
        Self {
            norm1: LayerNorm::new(dim),
            attn: Attention::new(dim, heads, rng),
            norm2: LayerNorm::new(dim),
            fc1: Linear::new(dim, hidden, rng),
            fc2: Linear::new(hidden, dim, rng),
        }
    }

    pub fn forward(&self, x: Array2<f64>) -> (Array2<f64>, BlockCache) {
        let (n1, norm1) = self.norm1.forward(&x.view());
        let (a, attn) = self.attn.forward(&n1.view());
        let h = &x + &a;
        let (n2, norm2) = self.norm2.forward(&h.view());
        let pre_act = self.fc1.forward(&n2.view());
        let act = pre_act.mapv(gelu);
        let out = &h + &self.fc2.forward(&act.view());
        let cache = BlockCache {
            x,
            norm1,
            n1,
            attn,
            norm2,
            n2,
            pre_act,
            act,
        };
        (out, cache)
    }

    /// Forward without keeping activations.
    pub fn infer(&self, x: &ArrayView2<'_, f64>) -> Array2<f64> {
        let (n1, _) = self.norm1.forward(x);
        let (a, _) = self.attn.forward(&n1.view());
        let h = x + &a;
        let (n2, _) = self.norm2.forward(&h.view());
        let act = self.fc1.forward(&n2.view()).mapv(gelu);
        &h + &self.fc2.forward(&act.view())
    }

    pub fn backward(&self, c: &BlockCache, dout: &ArrayView2<'_, f64>, grad: &mut Block) -> Array2<f64> {
        let dact = self.fc2.backward(&c.act.view(), dout, &mut grad.fc2);
        let dpre = &dact * &c.pre_act.mapv(gelu_grad);
        let dn2 = self.fc1.backward(&c.n2.view(), &dpre.view(), &mut grad.fc1);
        let mut dh = self.norm2.backward(&c.norm2, &dn2.view(), &mut grad.norm2);
        dh += dout;
        let dn1 = self.attn.backward(&c.n1.view(), &c.attn, &dh.view(), &mut grad.attn);
        let mut dx = self.norm1.backward(&c.norm1, &dn1.view(), &mut grad.norm1);
        dx += &dh;
        debug_assert_eq!(dx.dim(), c.x.dim());
        dx
    }
}

impl Params for Block {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.attn.visit(&join(prefix, "attn"), f);
        self.norm2.visit(&join(prefix, "norm2"), f);
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        self.norm1.visit_mut(&join(prefix, "norm1"), f);
        self.attn.visit_mut(&join(prefix, "attn"), f);
        self.norm2.visit_mut(&join(prefix, "norm2"), f);
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}

pub(crate) fn run_blocks(blocks: &[Block], mut x: Array2<f64>) -> (Array2<f64>, Vec<BlockCache>) {
    let mut caches = Vec::with_capacity(blocks.len());
    for b in blocks {
        let (y, c) = b.forward(x);
        caches.push(c);
        x = y;
    }
    (x, caches)
}

pub(crate) fn backprop_blocks(
    blocks: &[Block],
    caches: &[BlockCache],
    mut dy: Array2<f64>,
    grads: &mut [Block],
) -> Array2<f64> {
    for ((b, c), g) in blocks.iter().zip(caches).zip(grads.iter_mut()).rev() {
        dy = b.backward(c, &dy.view(), g);
    }
    dy
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// AdamW with decoupled weight decay. Decay applies to weight matrices only;
/// biases, norms, mask tokens and positional tables are exempt.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    decay: Vec<bool>,
    pub steps: u64,
}

impl AdamW {
    pub fn new<P: Params + ?Sized>(config: AdamWConfig, params: &P) -> Self {
        let mut decay = Vec::new();
        params.visit("", &mut |name, a| {
            let d = a.ndim() >= 2 && !name.ends_with("pos_embed");
            decay.extend(std::iter::repeat_n(d, a.len()));
        });
        let n = decay.len();
        Self {
            config,
            m: vec![0.0; n],
            v: vec![0.0; n],
            decay,
            steps: 0,
        }
    }

    pub fn step<P: Params + ?Sized>(&mut self, params: &mut P, grads: &P, lr: f64) {
        let g = flatten(grads);
        assert_eq!(g.len(), self.m.len(), "gradient size mismatch");
        self.steps += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - c.beta2.powi(self.steps as i32);
        let mut i = 0;
        let (m, v, decay) = (&mut self.m, &mut self.v, &self.decay);
        params.visit_mut("", &mut |_, mut a| {
            for p in a.iter_mut() {
                let gi = g[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.eps);
                let wd = if decay[i] { c.weight_decay * *p } else { 0.0 };
                *p -= lr * (update + wd);
                i += 1;
            }
        });
    }
}

/// Linear warmup to `peak`, then cosine decay to `floor` at `total` steps.
pub fn warmup_cosine(step: usize, total: usize, warmup: usize, peak: f64, floor: f64) -> f64 {
    if step < warmup {
        return peak * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    floor + 0.5 * (peak - floor) * (1.0 + (std::f64::consts::PI * progress).cos())
}
