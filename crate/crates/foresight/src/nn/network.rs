//! Sequential network built from a fixed layer menu, plus the gradient
//! verification harness used by the test suites.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::ops::{
    layer_norm_backward, layer_norm_forward, linear_backward, linear_forward, relu_backward,
    relu_forward, sigmoid, softmax_rows, EncoderBlock, EncoderBlockCache, LayerNormCache,
    LinearCache, ReluCache,
};
use super::params::{ParamId, ParamSet};
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    Linear { inp: usize, out: usize },
    Relu,
    LayerNorm { dim: usize },
    /// Full pre-LN transformer encoder block over [batch, tokens, dim].
    AttentionBlock { dim: usize, hidden: usize },
    SoftmaxHead,
    SigmoidHead,
}

#[derive(Debug, Error)]
pub enum NetError {
    #[error("layer {layer}: input last dim {got}, expected {expected}")]
    ShapeMismatch { layer: usize, got: usize, expected: usize },
    #[error("layer {layer}: non-finite activation")]
    NonFinite { layer: usize },
}

enum LayerKind {
    Linear { w: ParamId, b: ParamId },
    Relu,
    LayerNorm { g: ParamId, b: ParamId },
    Attention(EncoderBlock),
    SoftmaxHead,
    SigmoidHead,
}

pub enum LayerCache {
    Linear(LinearCache),
    Relu(ReluCache),
    LayerNorm(LayerNormCache),
    Attention(EncoderBlockCache),
    /// Cached probabilities.
    Softmax(Tensor),
    Sigmoid(Tensor),
}

pub struct NetCache {
    layers: Vec<LayerCache>,
}

/// Ordered layer stack with its own parameter store. Layer shapes must
/// compose; this is checked at forward time.
pub struct Network {
    pub specs: Vec<LayerSpec>,
    pub store: ParamSet,
    layers: Vec<LayerKind>,
}

impl Network {
    pub fn new(specs: &[LayerSpec], seed: u64) -> Network {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamSet::new();
        let mut layers = Vec::new();
        for (i, spec) in specs.iter().enumerate() {
            match *spec {
                LayerSpec::Linear { inp, out } => {
                    let w = store.add_linear_init(&format!("layer{i}.w"), &[inp, out], inp, &mut rng);
                    let b = store.add(&format!("layer{i}.b"), Tensor::zeros(&[out]));
                    layers.push(LayerKind::Linear { w, b });
                }
                LayerSpec::Relu => layers.push(LayerKind::Relu),
                LayerSpec::LayerNorm { dim } => {
                    let g = store.add(&format!("layer{i}.g"), Tensor::from_vec(&[dim], vec![1.0; dim]));
                    let b = store.add(&format!("layer{i}.b"), Tensor::zeros(&[dim]));
                    layers.push(LayerKind::LayerNorm { g, b });
                }
                LayerSpec::AttentionBlock { dim, hidden } => {
                    let block = EncoderBlock::new(&format!("layer{i}"), dim, hidden, &mut store, &mut rng);
                    layers.push(LayerKind::Attention(block));
                }
                LayerSpec::SoftmaxHead => layers.push(LayerKind::SoftmaxHead),
                LayerSpec::SigmoidHead => layers.push(LayerKind::SigmoidHead),
            }
        }
        Network { specs: specs.to_vec(), store, layers }
    }

    pub fn param_count(&self) -> usize {
        self.store.num_scalars()
    }

    /// Forward pass. `mask` is an optional [batch, tokens] padding mask for
    /// attention blocks.
    pub fn forward(&self, input: &Tensor, mask: Option<&Tensor>) -> Result<(Tensor, NetCache), NetError> {
        let mut x = input.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            x = match layer {
                LayerKind::Linear { w, b } => {
                    let wt = self.store.value(*w);
                    if x.last_dim() != wt.shape[0] {
                        return Err(NetError::ShapeMismatch { layer: i, got: x.last_dim(), expected: wt.shape[0] });
                    }
                    let (y, c) = linear_forward(&x, wt, self.store.value(*b));
                    caches.push(LayerCache::Linear(c));
                    y
                }
                LayerKind::Relu => {
                    let (y, c) = relu_forward(&x);
                    caches.push(LayerCache::Relu(c));
                    y
                }
                LayerKind::LayerNorm { g, b } => {
                    let gt = self.store.value(*g);
                    if x.last_dim() != gt.len() {
                        return Err(NetError::ShapeMismatch { layer: i, got: x.last_dim(), expected: gt.len() });
                    }
                    let (y, c) = layer_norm_forward(&x, gt, self.store.value(*b));
                    caches.push(LayerCache::LayerNorm(c));
                    y
                }
                LayerKind::Attention(block) => {
                    if x.last_dim() != block.dim {
                        return Err(NetError::ShapeMismatch { layer: i, got: x.last_dim(), expected: block.dim });
                    }
                    let (y, c) = block.forward(&self.store, &x, mask);
                    caches.push(LayerCache::Attention(c));
                    y
                }
                LayerKind::SoftmaxHead => {
                    let y = softmax_rows(&x);
                    caches.push(LayerCache::Softmax(y.clone()));
                    y
                }
                LayerKind::SigmoidHead => {
                    let mut y = x.clone();
                    y.data.iter_mut().for_each(|v| *v = sigmoid(*v));
                    caches.push(LayerCache::Sigmoid(y.clone()));
                    y
                }
            };
            if x.data.iter().any(|v| !v.is_finite()) {
                return Err(NetError::NonFinite { layer: i });
            }
        }
        Ok((x, NetCache { layers: caches }))
    }

    /// Backward pass from a gradient wrt the network output. Accumulates
    /// parameter gradients into the store and returns the gradient wrt the
    /// input.
    pub fn backward(&mut self, cache: &NetCache, loss_grad: &Tensor) -> Tensor {
        assert_eq!(cache.layers.len(), self.layers.len(), "stale cache");
        let mut g = loss_grad.clone();
        for (layer, c) in self.layers.iter().zip(cache.layers.iter()).rev() {
            g = match (layer, c) {
                (LayerKind::Linear { w, b }, LayerCache::Linear(c)) => {
                    let wt = self.store.value(*w).clone();
                    let mut gw = std::mem::replace(self.store.grad_mut(*w), Tensor::zeros(&[0]));
                    let mut gb = std::mem::replace(self.store.grad_mut(*b), Tensor::zeros(&[0]));
                    let gx = linear_backward(c, &wt, &g, &mut gw, &mut gb);
                    *self.store.grad_mut(*w) = gw;
                    *self.store.grad_mut(*b) = gb;
                    gx
                }
                (LayerKind::Relu, LayerCache::Relu(c)) => relu_backward(c, &g),
                (LayerKind::LayerNorm { g: gid, b: bid }, LayerCache::LayerNorm(c)) => {
                    let gt = self.store.value(*gid).clone();
                    let mut gg = std::mem::replace(self.store.grad_mut(*gid), Tensor::zeros(&[0]));
                    let mut gb = std::mem::replace(self.store.grad_mut(*bid), Tensor::zeros(&[0]));
                    let gx = layer_norm_backward(c, &gt, &g, &mut gg, &mut gb);
                    *self.store.grad_mut(*gid) = gg;
                    *self.store.grad_mut(*bid) = gb;
                    gx
                }
                (LayerKind::Attention(block), LayerCache::Attention(c)) => block.backward(&mut self.store, c, &g),
                (LayerKind::SoftmaxHead, LayerCache::Softmax(p)) => {
                    // Full softmax jacobian: gx = p * (g - sum_j g_j p_j) per row.
                    let cdim = p.last_dim();
                    let mut gx = Tensor::zeros(&p.shape);
                    for r in 0..p.rows_for(cdim) {
                        let prow = &p.data[r * cdim..(r + 1) * cdim];
                        let grow = &g.data[r * cdim..(r + 1) * cdim];
                        let dot: f64 = prow.iter().zip(grow).map(|(a, b)| a * b).sum();
                        for j in 0..cdim {
                            gx.data[r * cdim + j] = prow[j] * (grow[j] - dot);
                        }
                    }
                    gx
                }
                (LayerKind::SigmoidHead, LayerCache::Sigmoid(s)) => {
                    let mut gx = g.clone();
                    for (v, &sv) in gx.data.iter_mut().zip(&s.data) {
                        *v *= sv * (1.0 - sv);
                    }
                    gx
                }
                _ => unreachable!("cache/layer kind mismatch"),
            };
        }
        g
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// (parameter name, worst relative error among sampled entries)
    pub per_param: Vec<(String, f64)>,
    pub worst: f64,
}

/// Compare analytic gradients against central finite differences
/// (h = 1e-4 on 64-bit scalars). The loss is a fixed random weighting of the
/// network outputs, which exercises every output path. Samples up to
/// `entries_per_param` scalar entries from every parameter.
pub fn grad_check(
    net: &mut Network,
    input: &Tensor,
    mask: Option<&Tensor>,
    entries_per_param: usize,
    seed: u64,
) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (out, _) = net.forward(input, mask).expect("grad_check forward failed");
    let weights: Vec<f64> = (0..out.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let loss_of = |out: &Tensor| -> f64 { out.data.iter().zip(&weights).map(|(a, b)| a * b).sum() };

    net.store.zero_grads();
    let (out, cache) = net.forward(input, mask).unwrap();
    let lgrad = Tensor::from_vec(&out.shape, weights.clone());
    net.backward(&cache, &lgrad);
    let analytic: Vec<Tensor> = net.store.entries().iter().map(|e| e.grad.clone()).collect();

    let h = 1e-4;
    let mut per_param = Vec::new();
    let mut worst: f64 = 0.0;
    for pi in 0..analytic.len() {
        let name = net.store.entries()[pi].name.clone();
        let len = analytic[pi].len();
        if len == 0 {
            continue;
        }
        let mut idxs: Vec<usize> = (0..len).collect();
        if len > entries_per_param {
            for i in 0..entries_per_param {
                let j = rng.gen_range(i..len);
                idxs.swap(i, j);
            }
            idxs.truncate(entries_per_param);
        }
        let mut param_worst: f64 = 0.0;
        for &j in &idxs {
            let orig = net.store.entries()[pi].value.data[j];
            net.store.entries_mut()[pi].value.data[j] = orig + h;
            let lp = loss_of(&net.forward(input, mask).unwrap().0);
            net.store.entries_mut()[pi].value.data[j] = orig - h;
            let lm = loss_of(&net.forward(input, mask).unwrap().0);
            net.store.entries_mut()[pi].value.data[j] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let a = analytic[pi].data[j];
            let rel = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-6);
            param_worst = param_worst.max(rel);
        }
        worst = worst.max(param_worst);
        per_param.push((name, param_worst));
    }
    GradCheckReport { per_param, worst }
}
