//! Trainable building blocks with hand-derived backward passes.
//!
//! Every block exposes `forward` returning its output plus a cache, and
//! `backward` consuming that cache, accumulating parameter gradients into a
//! same-shaped gradient block and returning the input gradient.

use serde::{Deserialize, Serialize};

use crate::numerics::{
    matmul_nt, matmul_tn, matmul_unchecked, row_stats, softmax_rows_inplace, AttnMask, Rng,
    Tensor,
};

/// Uniform visitor over every trainable tensor of a parameter block, in a
/// fixed order.
pub trait Params {
    fn visit(&self, f: &mut dyn FnMut(&Tensor));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |t| n += t.len());
        n
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit(&mut |t| out.extend_from_slice(t.data()));
        out
    }

    fn load_flat(&mut self, flat: &[f64]) {
        let mut off = 0;
        self.visit_mut(&mut |t| {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        });
        assert_eq!(off, flat.len(), "flat parameter length mismatch");
    }

    /// Overwrites one entry addressed by its position in [`Params::flatten`].
    fn set_flat(&mut self, index: usize, value: f64) {
        let mut off = 0;
        self.visit_mut(&mut |t| {
            let n = t.len();
            if (off..off + n).contains(&index) {
                t.data_mut()[index - off] = value;
            }
            off += n;
        });
        assert!(index < off, "flat index out of range");
    }

    fn zero(&mut self) {
        self.visit_mut(&mut |t| t.fill(0.0));
    }

    fn zeros_like(&self) -> Self
    where
        Self: Clone + Sized,
    {
        let mut z = self.clone();
        z.zero();
        z
    }

    /// `self += alpha * other` over every tensor.
    fn axpy_from(&mut self, alpha: f64, other: &Self)
    where
        Self: Sized,
    {
        let mut flat = Vec::new();
        other.visit(&mut |t| flat.push(t.clone()));
        let mut it = flat.into_iter();
        self.visit_mut(&mut |t| t.axpy(alpha, &it.next().expect("same layout")));
    }
}

fn xavier(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::from_fn(&[rows, cols], |_| rng.uniform_range(-a, a))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    /// `[in, out]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

impl Linear {
    pub fn new(input: usize, output: usize, rng: &mut Rng) -> Self {
        Self {
            weight: xavier(input, output, rng),
            bias: Tensor::zeros(&[output]),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[input, output]),
            bias: Tensor::zeros(&[output]),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let mut y = matmul_unchecked(x, &self.weight);
        let c = y.cols();
        for row in y.data_mut().chunks_mut(c) {
            for (v, b) in row.iter_mut().zip(self.bias.data()) {
                *v += b;
            }
        }
        y
    }

    pub fn backward(&self, x: &Tensor, dy: &Tensor, grad: &mut Linear) -> Tensor {
        grad.weight.add_assign(&matmul_tn(x, dy));
        let c = dy.cols();
        for row in dy.data().chunks(c) {
            for (g, d) in grad.bias.data_mut().iter_mut().zip(row) {
                *g += d;
            }
        }
        matmul_nt(dy, &self.weight)
    }

    /// Weight-only backward for layers whose input gradient is not needed.
    pub fn backward_params(&self, x: &Tensor, dy: &Tensor, grad: &mut Linear) {
        grad.weight.add_assign(&matmul_tn(x, dy));
        let c = dy.cols();
        for row in dy.data().chunks(c) {
            for (g, d) in grad.bias.data_mut().iter_mut().zip(row) {
                *g += d;
            }
        }
    }
}

impl Params for Linear {
    fn visit(&self, f: &mut dyn FnMut(&Tensor)) {
        f(&self.weight);
        f(&self.bias);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gain: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug)]
pub struct LayerNormCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new(width: usize) -> Self {
        Self {
            gain: Tensor::full(&[width], 1.0),
            bias: Tensor::zeros(&[width]),
        }
    }

    pub fn forward(&self, x: &Tensor) -> (Tensor, LayerNormCache) {
        let c = x.cols();
        let mut xhat = x.clone();
        let mut inv_std = Vec::with_capacity(x.rows());
        for row in xhat.data_mut().chunks_mut(c) {
            let (mean, is) = row_stats(row);
            inv_std.push(is);
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
        }
        let mut y = xhat.clone();
        for row in y.data_mut().chunks_mut(c) {
            for ((v, g), b) in row.iter_mut().zip(self.gain.data()).zip(self.bias.data()) {
                *v = *v * g + b;
            }
        }
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&self, cache: &LayerNormCache, dy: &Tensor, grad: &mut LayerNorm) -> Tensor {
        let c = dy.cols();
        let n = c as f64;
        let mut dx = Tensor::zeros(dy.shape());
        let mut dxhat = vec![0.0; c];
        for r in 0..dy.rows() {
            let dyr = dy.row(r);
            let xh = cache.xhat.row(r);
            for j in 0..c {
                grad.gain.data_mut()[j] += dyr[j] * xh[j];
                grad.bias.data_mut()[j] += dyr[j];
                dxhat[j] = dyr[j] * self.gain.data()[j];
            }
            let mean_d = dxhat.iter().sum::<f64>() / n;
            let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n;
            let is = cache.inv_std[r];
            for (j, out) in dx.row_mut(r).iter_mut().enumerate() {
                *out = is * (dxhat[j] - mean_d - xh[j] * mean_dx);
            }
        }
        dx
    }
}

impl Params for LayerNorm {
    fn visit(&self, f: &mut dyn FnMut(&Tensor)) {
        f(&self.gain);
        f(&self.bias);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        f(&mut self.gain);
        f(&mut self.bias);
    }
}

/// Pre-norm single-head attention sublayer: `x + O(attn(Q(LN x), K(mem), V(mem)))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Attention {
    pub norm: LayerNorm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
}

#[derive(Clone, Debug)]
pub struct AttentionCache {
    ln: LayerNormCache,
    xn: Tensor,
    keys_in: Option<Tensor>,
    values_in: Option<Tensor>,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    probs: Tensor,
    ctx: Tensor,
}

impl AttentionCache {
    pub fn probs(&self) -> &Tensor {
        &self.probs
    }
}

/// Gradients w.r.t. the memory inputs of a cross-attention sublayer.
pub struct MemoryGrad {
    pub keys: Tensor,
    pub values: Tensor,
}

impl Attention {
    pub fn new(width: usize, rng: &mut Rng) -> Self {
        Self {
            norm: LayerNorm::new(width),
            query: Linear::new(width, width, rng),
            key: Linear::new(width, width, rng),
            value: Linear::new(width, width, rng),
            out: Linear::new(width, width, rng),
        }
    }

    fn attend(
        &self,
        x: &Tensor,
        ln: LayerNormCache,
        xn: Tensor,
        q: Tensor,
        k: Tensor,
        v: Tensor,
        mask: Option<&AttnMask>,
        keys_in: Option<Tensor>,
        values_in: Option<Tensor>,
    ) -> (Tensor, AttentionCache) {
        let scale = 1.0 / (q.cols() as f64).sqrt();
        let mut probs = matmul_nt(&q, &k);
        probs.data_mut().iter_mut().for_each(|s| *s *= scale);
        if let Some(m) = mask {
            for i in 0..probs.rows() {
                let row_mask = m.row(i);
                if row_mask.iter().any(|&a| a) {
                    for (s, &a) in probs.row_mut(i).iter_mut().zip(row_mask) {
                        if !a {
                            *s = f64::NEG_INFINITY;
                        }
                    }
                }
            }
        }
        softmax_rows_inplace(&mut probs);
        let ctx = matmul_unchecked(&probs, &v);
        let mut y = self.out.forward(&ctx);
        y.add_assign(x);
        let cache = AttentionCache {
            ln,
            xn,
            keys_in,
            values_in,
            q,
            k,
            v,
            probs,
            ctx,
        };
        (y, cache)
    }

    pub fn forward_self(&self, x: &Tensor) -> (Tensor, AttentionCache) {
        let (xn, ln) = self.norm.forward(x);
        let q = self.query.forward(&xn);
        let k = self.key.forward(&xn);
        let v = self.value.forward(&xn);
        self.attend(x, ln, xn, q, k, v, None, None, None)
    }

    /// Cross-attention from `x` onto a memory given as separate key and
    /// value inputs (keys typically carry positional encodings).
    pub fn forward_cross(
        &self,
        x: &Tensor,
        keys_in: &Tensor,
        values_in: &Tensor,
        mask: Option<&AttnMask>,
    ) -> (Tensor, AttentionCache) {
        let (xn, ln) = self.norm.forward(x);
        let q = self.query.forward(&xn);
        let k = self.key.forward(keys_in);
        let v = self.value.forward(values_in);
        self.attend(
            x,
            ln,
            xn,
            q,
            k,
            v,
            mask,
            Some(keys_in.clone()),
            Some(values_in.clone()),
        )
    }

    pub fn backward(
        &self,
        cache: &AttentionCache,
        dy: &Tensor,
        grad: &mut Attention,
    ) -> (Tensor, Option<MemoryGrad>) {
        let dctx = self.out.backward(&cache.ctx, dy, &mut grad.out);
        let dprobs = matmul_nt(&dctx, &cache.v);
        let dv = matmul_tn(&cache.probs, &dctx);
        let scale = 1.0 / (cache.q.cols() as f64).sqrt();
        let mut dscores = dprobs;
        for i in 0..dscores.rows() {
            let p = cache.probs.row(i);
            let row = dscores.row_mut(i);
            let dot: f64 = row.iter().zip(p).map(|(a, b)| a * b).sum();
            for (d, &pp) in row.iter_mut().zip(p) {
                *d = pp * (*d - dot) * scale;
            }
        }
        let dq = matmul_unchecked(&dscores, &cache.k);
        let dk = matmul_tn(&dscores, &cache.q);

        let mut dxn = self.query.backward(&cache.xn, &dq, &mut grad.query);
        let memory = match (&cache.keys_in, &cache.values_in) {
            (Some(kin), Some(vin)) => Some(MemoryGrad {
                keys: self.key.backward(kin, &dk, &mut grad.key),
                values: self.value.backward(vin, &dv, &mut grad.value),
            }),
            _ => {
                dxn.add_assign(&self.key.backward(&cache.xn, &dk, &mut grad.key));
                dxn.add_assign(&self.value.backward(&cache.xn, &dv, &mut grad.value));
                None
            }
        };
        let mut dx = self.norm.backward(&cache.ln, &dxn, &mut grad.norm);
        dx.add_assign(dy);
        (dx, memory)
    }
}

impl Params for Attention {
    fn visit(&self, f: &mut dyn FnMut(&Tensor)) {
        self.norm.visit(f);
        self.query.visit(f);
        self.key.visit(f);
        self.value.visit(f);
        self.out.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        self.norm.visit_mut(f);
        self.query.visit_mut(f);
        self.key.visit_mut(f);
        self.value.visit_mut(f);
        self.out.visit_mut(f);
    }
}

/// Pre-norm feed-forward sublayer: `x + W2 relu(W1 LN(x))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeedForward {
    pub norm: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Clone, Debug)]
pub struct FeedForwardCache {
    ln: LayerNormCache,
    xn: Tensor,
    pre: Tensor,
    hidden: Tensor,
}

impl FeedForward {
    pub fn new(width: usize, hidden: usize, rng: &mut Rng) -> Self {
        Self {
            norm: LayerNorm::new(width),
            fc1: Linear::new(width, hidden, rng),
            fc2: Linear::new(hidden, width, rng),
        }
    }

    pub fn forward(&self, x: &Tensor) -> (Tensor, FeedForwardCache) {
        let (xn, ln) = self.norm.forward(x);
        let pre = self.fc1.forward(&xn);
        let hidden = pre.map(|v| v.max(0.0));
        let mut y = self.fc2.forward(&hidden);
        y.add_assign(x);
        (
            y,
            FeedForwardCache {
                ln,
                xn,
                pre,
                hidden,
            },
        )
    }

    pub fn backward(&self, cache: &FeedForwardCache, dy: &Tensor, grad: &mut FeedForward) -> Tensor {
        let mut dh = self.fc2.backward(&cache.hidden, dy, &mut grad.fc2);
        for (d, p) in dh.data_mut().iter_mut().zip(cache.pre.data()) {
            if *p <= 0.0 {
                *d = 0.0;
            }
        }
        let dxn = self.fc1.backward(&cache.xn, &dh, &mut grad.fc1);
        let mut dx = self.norm.backward(&cache.ln, &dxn, &mut grad.norm);
        dx.add_assign(dy);
        dx
    }
}

impl Params for FeedForward {
    fn visit(&self, f: &mut dyn FnMut(&Tensor)) {
        self.norm.visit(f);
        self.fc1.visit(f);
        self.fc2.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        self.norm.visit_mut(f);
        self.fc1.visit_mut(f);
        self.fc2.visit_mut(f);
    }
}

/// Stack of affine layers with a rectifier between consecutive layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

#[derive(Clone, Debug)]
pub struct MlpCache {
    inputs: Vec<Tensor>,
    pre: Vec<Tensor>,
}

impl Mlp {
    pub fn new(widths: &[usize], rng: &mut Rng) -> Self {
        Self {
            layers: widths
                .windows(2)
                .map(|w| Linear::new(w[0], w[1], rng))
                .collect(),
        }
    }

    pub fn forward(&self, x: &Tensor) -> (Tensor, MlpCache) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&h);
            inputs.push(h);
            h = if i + 1 < self.layers.len() {
                z.map(|v| v.max(0.0))
            } else {
                z.clone()
            };
            pre.push(z);
        }
        (h, MlpCache { inputs, pre })
    }

    pub fn backward(&self, cache: &MlpCache, dy: &Tensor, grad: &mut Mlp) -> Tensor {
        let mut d = dy.clone();
        let last = self.layers.len() - 1;
        for i in (0..self.layers.len()).rev() {
            if i < last {
                for (g, p) in d.data_mut().iter_mut().zip(cache.pre[i].data()) {
                    if *p <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            d = self.layers[i].backward(&cache.inputs[i], &d, &mut grad.layers[i]);
        }
        d
    }
}

impl Params for Mlp {
    fn visit(&self, f: &mut dyn FnMut(&Tensor)) {
        for l in &self.layers {
            l.visit(f);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        for l in &mut self.layers {
            l.visit_mut(f);
        }
    }
}

impl Params for Tensor {
    fn visit(&self, f: &mut dyn FnMut(&Tensor)) {
        f(self);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        f(self);
    }
}

impl<T: Params> Params for Vec<T> {
    fn visit(&self, f: &mut dyn FnMut(&Tensor)) {
        for p in self {
            p.visit(f);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        for p in self {
            p.visit_mut(f);
        }
    }
}


impl<A: Params, B: Params> Params for (A, B) {
    fn visit(&self, f: &mut dyn FnMut(&Tensor)) {
        self.0.visit(f);
        self.1.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        self.0.visit_mut(f);
        self.1.visit_mut(f);
    }
}
