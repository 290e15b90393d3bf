//! Differentiable primitives with explicit forward caches and hand-written
//! backward passes. Gradients accumulate into the store's grad buffers, so
//! callers zero grads once per optimization step.

use super::params::{ParamId, ParamSet};
use super::tensor::{mm_nn, mm_nt, mm_tn, Tensor};
use rand_chacha::ChaCha8Rng;

pub const LN_EPS: f64 = 1e-5;
const MASK_NEG: f64 = -1e30;

fn add_bias(y: &mut [f64], b: &[f64]) {
    let n = b.len();
    for row in y.chunks_mut(n) {
        for (o, &bv) in row.iter_mut().zip(b) {
            *o += bv;
        }
    }
}

fn colsum_acc(g: &[f64], cols: usize, out: &mut [f64]) {
    for row in g.chunks(cols) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

pub struct LinearCache {
    x: Tensor,
}

/// y = x @ w + b, folding all leading dims of x into rows.
pub fn linear_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> (Tensor, LinearCache) {
    let (din, dout) = (w.shape[0], w.shape[1]);
    let rows = x.rows_for(din);
    let mut shape = x.shape.clone();
    *shape.last_mut().unwrap() = dout;
    let mut y = Tensor::zeros(&shape);
    mm_nn(&x.data, &w.data, rows, din, dout, &mut y.data);
    add_bias(&mut y.data, &b.data);
    (y, LinearCache { x: x.clone() })
}

/// Returns grad wrt x; accumulates grads for w and b.
pub fn linear_backward(
    cache: &LinearCache,
    w: &Tensor,
    gy: &Tensor,
    gw: &mut Tensor,
    gb: &mut Tensor,
) -> Tensor {
    let (din, dout) = (w.shape[0], w.shape[1]);
    let rows = cache.x.rows_for(din);
    mm_tn(&cache.x.data, &gy.data, din, rows, dout, &mut gw.data, true);
    colsum_acc(&gy.data, dout, &mut gb.data);
    let mut gx = Tensor::zeros(&cache.x.shape);
    mm_nt(&gy.data, &w.data, rows, dout, din, &mut gx.data, false);
    gx
}

// ---------------------------------------------------------------------------
// ReLU
// ---------------------------------------------------------------------------

pub struct ReluCache {
    mask: Vec<bool>,
}

pub fn relu_forward(x: &Tensor) -> (Tensor, ReluCache) {
    let mut y = x.clone();
    let mask: Vec<bool> = x.data.iter().map(|&v| v > 0.0).collect();
    for (v, &m) in y.data.iter_mut().zip(&mask) {
        if !m {
            *v = 0.0;
        }
    }
    (y, ReluCache { mask })
}

pub fn relu_backward(cache: &ReluCache, gy: &Tensor) -> Tensor {
    let mut gx = gy.clone();
    for (v, &m) in gx.data.iter_mut().zip(&cache.mask) {
        if !m {
            *v = 0.0;
        }
    }
    gx
}

// ---------------------------------------------------------------------------
// LayerNorm over the last dimension, with gain and bias
// ---------------------------------------------------------------------------

pub struct LayerNormCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
}

pub fn layer_norm_forward(x: &Tensor, gain: &Tensor, bias: &Tensor) -> (Tensor, LayerNormCache) {
    let d = gain.len();
    let rows = x.rows_for(d);
    let mut y = Tensor::zeros(&x.shape);
    let mut xhat = Tensor::zeros(&x.shape);
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let xr = &x.data[r * d..(r + 1) * d];
        let mean = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std[r] = is;
        for i in 0..d {
            let xh = (xr[i] - mean) * is;
            xhat.data[r * d + i] = xh;
            y.data[r * d + i] = xh * gain.data[i] + bias.data[i];
        }
    }
    (y, LayerNormCache { xhat, inv_std })
}

pub fn layer_norm_backward(
    cache: &LayerNormCache,
    gain: &Tensor,
    gy: &Tensor,
    ggain: &mut Tensor,
    gbias: &mut Tensor,
) -> Tensor {
    let d = gain.len();
    let rows = gy.rows_for(d);
    let mut gx = Tensor::zeros(&gy.shape);
    for r in 0..rows {
        let gyr = &gy.data[r * d..(r + 1) * d];
        let xhr = &cache.xhat.data[r * d..(r + 1) * d];
        let mut mean_gxhat = 0.0;
        let mut mean_gxhat_xhat = 0.0;
        for i in 0..d {
            let gxh = gyr[i] * gain.data[i];
            mean_gxhat += gxh;
            mean_gxhat_xhat += gxh * xhr[i];
            ggain.data[i] += gyr[i] * xhr[i];
            gbias.data[i] += gyr[i];
        }
        mean_gxhat /= d as f64;
        mean_gxhat_xhat /= d as f64;
        let is = cache.inv_std[r];
        for i in 0..d {
            let gxh = gyr[i] * gain.data[i];
            gx.data[r * d + i] = is * (gxh - mean_gxhat - xhr[i] * mean_gxhat_xhat);
        }
    }
    gx
}

// ---------------------------------------------------------------------------
// Softmax
// ---------------------------------------------------------------------------

/// Numerically stable row-wise softmax over the last dimension.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let c = x.last_dim();
    let mut y = x.clone();
    for row in y.data.chunks_mut(c) {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    y
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// ---------------------------------------------------------------------------
// Single-head self-attention with projections
// ---------------------------------------------------------------------------

pub struct AttnCache {
    x: Tensor,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    /// Attention weights [B, T, T].
    a: Tensor,
    o: Tensor,
}

/// Scaled dot-product self-attention over [batch, tokens, dim]. `mask` is
/// [batch, tokens] with 1 for valid tokens; padded tokens are excluded as
/// keys so the outputs at valid tokens do not depend on padding content.
pub fn self_attention_forward(
    x: &Tensor,
    wq: &Tensor,
    wk: &Tensor,
    wv: &Tensor,
    wo: &Tensor,
    mask: Option<&Tensor>,
) -> (Tensor, AttnCache) {
    assert_eq!(x.shape.len(), 3, "attention expects [batch, tokens, dim]");
    let (bsz, t, d) = (x.shape[0], x.shape[1], x.shape[2]);
    let rows = bsz * t;
    let scale = 1.0 / (d as f64).sqrt();

    let mut q = Tensor::zeros(&x.shape);
    let mut k = Tensor::zeros(&x.shape);
    let mut v = Tensor::zeros(&x.shape);
    mm_nn(&x.data, &wq.data, rows, d, d, &mut q.data);
    mm_nn(&x.data, &wk.data, rows, d, d, &mut k.data);
    mm_nn(&x.data, &wv.data, rows, d, d, &mut v.data);

    let mut a = Tensor::zeros(&[bsz, t, t]);
    let mut o = Tensor::zeros(&x.shape);
    for b in 0..bsz {
        let qb = &q.data[b * t * d..(b + 1) * t * d];
        let kb = &k.data[b * t * d..(b + 1) * t * d];
        let vb = &v.data[b * t * d..(b + 1) * t * d];
        let ab = &mut a.data[b * t * t..(b + 1) * t * t];
        mm_nt(qb, kb, t, d, t, ab, false);
        for i in 0..t {
            let srow = &mut ab[i * t..(i + 1) * t];
            for j in 0..t {
                srow[j] *= scale;
                if let Some(m) = mask {
                    if m.data[b * t + j] == 0.0 {
                        srow[j] = MASK_NEG;
                    }
                }
            }
            // softmax in place
            let mx = srow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for sv in srow.iter_mut() {
                *sv = (*sv - mx).exp();
                sum += *sv;
            }
            for sv in srow.iter_mut() {
                *sv /= sum;
            }
        }
        let ob = &mut o.data[b * t * d..(b + 1) * t * d];
        mm_nn(ab, vb, t, t, d, ob);
    }

    let mut y = Tensor::zeros(&x.shape);
    mm_nn(&o.data, &wo.data, rows, d, d, &mut y.data);
    (y, AttnCache { x: x.clone(), q, k, v, a, o })
}

#[allow(clippy::too_many_arguments)]
pub fn self_attention_backward(
    cache: &AttnCache,
    wq: &Tensor,
    wk: &Tensor,
    wv: &Tensor,
    wo: &Tensor,
    gy: &Tensor,
    gwq: &mut Tensor,
    gwk: &mut Tensor,
    gwv: &mut Tensor,
    gwo: &mut Tensor,
) -> Tensor {
    let (bsz, t, d) = (cache.x.shape[0], cache.x.shape[1], cache.x.shape[2]);
    let rows = bsz * t;
    let scale = 1.0 / (d as f64).sqrt();

    // Output projection.
    mm_tn(&cache.o.data, &gy.data, d, rows, d, &mut gwo.data, true);
    let mut go = Tensor::zeros(&cache.x.shape);
    mm_nt(&gy.data, &wo.data, rows, d, d, &mut go.data, false);

    let mut gq = Tensor::zeros(&cache.x.shape);
    let mut gk = Tensor::zeros(&cache.x.shape);
    let mut gv = Tensor::zeros(&cache.x.shape);
    for b in 0..bsz {
        let ab = &cache.a.data[b * t * t..(b + 1) * t * t];
        let qb = &cache.q.data[b * t * d..(b + 1) * t * d];
        let kb = &cache.k.data[b * t * d..(b + 1) * t * d];
        let vb = &cache.v.data[b * t * d..(b + 1) * t * d];
        let gob = &go.data[b * t * d..(b + 1) * t * d];
        // gv = a^T @ go
        let gvb = &mut gv.data[b * t * d..(b + 1) * t * d];
        mm_tn(ab, gob, t, t, d, gvb, false);
        // ga = go @ v^T
        let mut ga = vec![0.0; t * t];
        mm_nt(gob, vb, t, d, t, &mut ga, false);
        // softmax backward row-wise: gs = a * (ga - sum_j(ga * a))
        let mut gs = vec![0.0; t * t];
        for i in 0..t {
            let arow = &ab[i * t..(i + 1) * t];
            let garow = &ga[i * t..(i + 1) * t];
            let dot: f64 = arow.iter().zip(garow).map(|(x, y)| x * y).sum();
            for j in 0..t {
                gs[i * t + j] = arow[j] * (garow[j] - dot) * scale;
            }
        }
        // gq = gs @ k ; gk = gs^T @ q
        let gqb = &mut gq.data[b * t * d..(b + 1) * t * d];
        mm_nn(&gs, kb, t, t, d, gqb);
        let gkb = &mut gk.data[b * t * d..(b + 1) * t * d];
        mm_tn(&gs, qb, t, t, d, gkb, false);
    }

    mm_tn(&cache.x.data, &gq.data, d, rows, d, &mut gwq.data, true);
    mm_tn(&cache.x.data, &gk.data, d, rows, d, &mut gwk.data, true);
    mm_tn(&cache.x.data, &gv.data, d, rows, d, &mut gwv.data, true);

    let mut gx = Tensor::zeros(&cache.x.shape);
    mm_nt(&gq.data, &wq.data, rows, d, d, &mut gx.data, false);
    let mut tmp = Tensor::zeros(&cache.x.shape);
    mm_nt(&gk.data, &wk.data, rows, d, d, &mut tmp.data, false);
    for (a, b) in gx.data.iter_mut().zip(&tmp.data) {
        *a += b;
    }
    mm_nt(&gv.data, &wv.data, rows, d, d, &mut tmp.data, false);
    for (a, b) in gx.data.iter_mut().zip(&tmp.data) {
        *a += b;
    }
    gx
}

// ---------------------------------------------------------------------------
// Transformer encoder block (pre-LN): x + attn(ln1(x)), then + mlp(ln2(.))
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub dim: usize,
    pub hidden: usize,
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

pub struct EncoderBlockCache {
    ln1: LayerNormCache,
    attn: AttnCache,
    ln2: LayerNormCache,
    mlp1: LinearCache,
    relu: ReluCache,
    mlp2: LinearCache,
}

impl EncoderBlock {
    pub fn new(prefix: &str, dim: usize, hidden: usize, store: &mut ParamSet, rng: &mut ChaCha8Rng) -> EncoderBlock {
        let ones = Tensor::from_vec(&[dim], vec![1.0; dim]);
        let zeros = Tensor::zeros(&[dim]);
        EncoderBlock {
            dim,
            hidden,
            ln1_g: store.add(&format!("{prefix}.ln1.g"), ones.clone()),
            ln1_b: store.add(&format!("{prefix}.ln1.b"), zeros.clone()),
            wq: store.add_linear_init(&format!("{prefix}.attn.wq"), &[dim, dim], dim, rng),
            wk: store.add_linear_init(&format!("{prefix}.attn.wk"), &[dim, dim], dim, rng),
            wv: store.add_linear_init(&format!("{prefix}.attn.wv"), &[dim, dim], dim, rng),
            wo: store.add_linear_init(&format!("{prefix}.attn.wo"), &[dim, dim], dim, rng),
            ln2_g: store.add(&format!("{prefix}.ln2.g"), ones),
            ln2_b: store.add(&format!("{prefix}.ln2.b"), zeros),
            w1: store.add_linear_init(&format!("{prefix}.mlp.w1"), &[dim, hidden], dim, rng),
            b1: store.add(&format!("{prefix}.mlp.b1"), Tensor::zeros(&[hidden])),
            w2: store.add_linear_init(&format!("{prefix}.mlp.w2"), &[hidden, dim], hidden, rng),
            b2: store.add(&format!("{prefix}.mlp.b2"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, store: &ParamSet, x: &Tensor, mask: Option<&Tensor>) -> (Tensor, EncoderBlockCache) {
        let (h1, ln1) = layer_norm_forward(x, store.value(self.ln1_g), store.value(self.ln1_b));
        let (attn_out, attn) = self_attention_forward(
            &h1,
            store.value(self.wq),
            store.value(self.wk),
            store.value(self.wv),
            store.value(self.wo),
            mask,
        );
        let mut x2 = x.clone();
        for (a, b) in x2.data.iter_mut().zip(&attn_out.data) {
            *a += b;
        }
        let (h2, ln2) = layer_norm_forward(&x2, store.value(self.ln2_g), store.value(self.ln2_b));
        let (m1, mlp1) = linear_forward(&h2, store.value(self.w1), store.value(self.b1));
        let (m1r, relu) = relu_forward(&m1);
        let (m2, mlp2) = linear_forward(&m1r, store.value(self.w2), store.value(self.b2));
        let mut y = x2;
        for (a, b) in y.data.iter_mut().zip(&m2.data) {
            *a += b;
        }
        (y, EncoderBlockCache { ln1, attn, ln2, mlp1, relu, mlp2 })
    }

    pub fn backward(&self, store: &mut ParamSet, cache: &EncoderBlockCache, gy: &Tensor) -> Tensor {
        fn take(store: &mut ParamSet, id: ParamId) -> Tensor {
            std::mem::replace(store.grad_mut(id), Tensor::zeros(&[0]))
        }
        fn put(store: &mut ParamSet, id: ParamId, g: Tensor) {
            *store.grad_mut(id) = g;
        }

        // y = x2 + mlp(ln2(x2)); gy flows to both branches.
        let (mut gw2, mut gb2) = (take(store, self.w2), take(store, self.b2));
        let gm1r = linear_backward(&cache.mlp2, store.value(self.w2), gy, &mut gw2, &mut gb2);
        put(store, self.w2, gw2);
        put(store, self.b2, gb2);
        let gm1 = relu_backward(&cache.relu, &gm1r);
        let (mut gw1, mut gb1) = (take(store, self.w1), take(store, self.b1));
        let gh2 = linear_backward(&cache.mlp1, store.value(self.w1), &gm1, &mut gw1, &mut gb1);
        put(store, self.w1, gw1);
        put(store, self.b1, gb1);
        let (mut gg2, mut gbb2) = (take(store, self.ln2_g), take(store, self.ln2_b));
        let gx2_from_mlp = layer_norm_backward(&cache.ln2, store.value(self.ln2_g), &gh2, &mut gg2, &mut gbb2);
        put(store, self.ln2_g, gg2);
        put(store, self.ln2_b, gbb2);
        let mut gx2 = gy.clone();
        for (a, b) in gx2.data.iter_mut().zip(&gx2_from_mlp.data) {
            *a += b;
        }

        // x2 = x + attn(ln1(x))
        let mut gwq = take(store, self.wq);
        let mut gwk = take(store, self.wk);
        let mut gwv = take(store, self.wv);
        let mut gwo = take(store, self.wo);
        let gh1 = self_attention_backward(
            &cache.attn,
            store.value(self.wq),
            store.value(self.wk),
            store.value(self.wv),
            store.value(self.wo),
            &gx2,
            &mut gwq,
            &mut gwk,
            &mut gwv,
            &mut gwo,
        );
        put(store, self.wq, gwq);
        put(store, self.wk, gwk);
        put(store, self.wv, gwv);
        put(store, self.wo, gwo);
        let (mut gg1, mut gbb1) = (take(store, self.ln1_g), take(store, self.ln1_b));
        let gx_from_attn = layer_norm_backward(&cache.ln1, store.value(self.ln1_g), &gh1, &mut gg1, &mut gbb1);
        put(store, self.ln1_g, gg1);
        put(store, self.ln1_b, gbb1);
        let mut gx = gx2;
        for (a, b) in gx.data.iter_mut().zip(&gx_from_attn.data) {
            *a += b;
        }
        gx
    }
}

// ---------------------------------------------------------------------------
// GRU cell (gated recurrent core for the implicit-planning agent)
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct GruCell {
    pub dx: usize,
    pub dh: usize,
    wz: ParamId,
    uz: ParamId,
    bz: ParamId,
    wr: ParamId,
    ur: ParamId,
    br: ParamId,
    wh: ParamId,
    uh: ParamId,
    bh: ParamId,
}

pub struct GruCache {
    x: Tensor,
    h: Tensor,
    z: Tensor,
    r: Tensor,
    c: Tensor,
    rh: Tensor,
}

impl GruCell {
    pub fn new(prefix: &str, dx: usize, dh: usize, store: &mut ParamSet, rng: &mut ChaCha8Rng) -> GruCell {
        GruCell {
            dx,
            dh,
            wz: store.add_linear_init(&format!("{prefix}.wz"), &[dx, dh], dx, rng),
            uz: store.add_linear_init(&format!("{prefix}.uz"), &[dh, dh], dh, rng),
            bz: store.add(&format!("{prefix}.bz"), Tensor::zeros(&[dh])),
            wr: store.add_linear_init(&format!("{prefix}.wr"), &[dx, dh], dx, rng),
            ur: store.add_linear_init(&format!("{prefix}.ur"), &[dh, dh], dh, rng),
            br: store.add(&format!("{prefix}.br"), Tensor::zeros(&[dh])),
            wh: store.add_linear_init(&format!("{prefix}.wh"), &[dx, dh], dx, rng),
            uh: store.add_linear_init(&format!("{prefix}.uh"), &[dh, dh], dh, rng),
            bh: store.add(&format!("{prefix}.bh"), Tensor::zeros(&[dh])),
        }
    }

    /// One tick: h' = (1-z) * h + z * tanh(Wh x + Uh (r*h) + bh).
    pub fn forward(&self, store: &ParamSet, x: &Tensor, h: &Tensor) -> (Tensor, GruCache) {
        let rows = x.rows_for(self.dx);
        let dh = self.dh;
        let gate = |w: ParamId, u: ParamId, b: ParamId, hin: &Tensor| -> Tensor {
            let mut pre = Tensor::zeros(&[rows, dh]);
            mm_nn(&x.data, &store.value(w).data, rows, self.dx, dh, &mut pre.data);
            let mut hu = vec![0.0; rows * dh];
            mm_nn(&hin.data, &store.value(u).data, rows, dh, dh, &mut hu);
            for (p, q) in pre.data.iter_mut().zip(&hu) {
                *p += q;
            }
            add_bias(&mut pre.data, &store.value(b).data);
            pre
        };
        let mut z = gate(self.wz, self.uz, self.bz, h);
        z.data.iter_mut().for_each(|v| *v = sigmoid(*v));
        let mut r = gate(self.wr, self.ur, self.br, h);
        r.data.iter_mut().for_each(|v| *v = sigmoid(*v));
        let mut rh = h.clone();
        for (a, b) in rh.data.iter_mut().zip(&r.data) {
            *a *= b;
        }
        let mut c = gate(self.wh, self.uh, self.bh, &rh);
        c.data.iter_mut().for_each(|v| *v = v.tanh());
        let mut hn = Tensor::zeros(&[rows, dh]);
        for i in 0..rows * dh {
            hn.data[i] = (1.0 - z.data[i]) * h.data[i] + z.data[i] * c.data[i];
        }
        (hn, GruCache { x: x.clone(), h: h.clone(), z, r, c, rh })
    }

    /// Returns (grad wrt x, grad wrt h); accumulates parameter grads.
    pub fn backward(&self, store: &mut ParamSet, cache: &GruCache, ghn: &Tensor) -> (Tensor, Tensor) {
        let rows = cache.x.rows_for(self.dx);
        let (dx, dh) = (self.dx, self.dh);
        let n = rows * dh;
        let mut gc = vec![0.0; n];
        let mut gz = vec![0.0; n];
        let mut gh = vec![0.0; n];
        for i in 0..n {
            gc[i] = ghn.data[i] * cache.z.data[i];
            gz[i] = ghn.data[i] * (cache.c.data[i] - cache.h.data[i]);
            gh[i] = ghn.data[i] * (1.0 - cache.z.data[i]);
        }
        // tanh pre-activation
        let mut gac = vec![0.0; n];
        for i in 0..n {
            gac[i] = gc[i] * (1.0 - cache.c.data[i] * cache.c.data[i]);
        }
        // r*h branch
        let mut grh = vec![0.0; n];
        mm_nt(&gac, &store.value(self.uh).data, rows, dh, dh, &mut grh, false);
        let mut gr = vec![0.0; n];
        for i in 0..n {
            gr[i] = grh[i] * cache.h.data[i];
            gh[i] += grh[i] * cache.r.data[i];
        }
        // sigmoid pre-activations
        let mut gaz = vec![0.0; n];
        let mut gar = vec![0.0; n];
        for i in 0..n {
            gaz[i] = gz[i] * cache.z.data[i] * (1.0 - cache.z.data[i]);
            gar[i] = gr[i] * cache.r.data[i] * (1.0 - cache.r.data[i]);
        }

        // Parameter gradients.
        {
            let xd = &cache.x.data;
            mm_tn(xd, &gaz, dx, rows, dh, &mut store.grad_mut(self.wz).data, true);
            mm_tn(xd, &gar, dx, rows, dh, &mut store.grad_mut(self.wr).data, true);
            mm_tn(xd, &gac, dx, rows, dh, &mut store.grad_mut(self.wh).data, true);
            mm_tn(&cache.h.data, &gaz, dh, rows, dh, &mut store.grad_mut(self.uz).data, true);
            mm_tn(&cache.h.data, &gar, dh, rows, dh, &mut store.grad_mut(self.ur).data, true);
            mm_tn(&cache.rh.data, &gac, dh, rows, dh, &mut store.grad_mut(self.uh).data, true);
            colsum_acc(&gaz, dh, &mut store.grad_mut(self.bz).data);
            colsum_acc(&gar, dh, &mut store.grad_mut(self.br).data);
            colsum_acc(&gac, dh, &mut store.grad_mut(self.bh).data);
        }

        // Input/state gradients.
        let mut gx = Tensor::zeros(&cache.x.shape);
        let mut tmp = vec![0.0; rows * dx];
        mm_nt(&gaz, &store.value(self.wz).data, rows, dh, dx, &mut gx.data, false);
        mm_nt(&gar, &store.value(self.wr).data, rows, dh, dx, &mut tmp, false);
        for (a, b) in gx.data.iter_mut().zip(&tmp) {
            *a += b;
        }
        mm_nt(&gac, &store.value(self.wh).data, rows, dh, dx, &mut tmp, false);
        for (a, b) in gx.data.iter_mut().zip(&tmp) {
            *a += b;
        }

        let mut ghp = Tensor::from_vec(&cache.h.shape, gh);
        let mut tmph = vec![0.0; n];
        mm_nt(&gaz, &store.value(self.uz).data, rows, dh, dh, &mut tmph, false);
        for (a, b) in ghp.data.iter_mut().zip(&tmph) {
            *a += b;
        }
        mm_nt(&gar, &store.value(self.ur).data, rows, dh, dh, &mut tmph, false);
        for (a, b) in ghp.data.iter_mut().zip(&tmph) {
            *a += b;
        }
        (gx, ghp)
    }
}
