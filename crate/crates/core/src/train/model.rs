//! Toy models: a GELU MLP for regression and a small decoder-only
//! character LM. Both are built from [`Linear`] layers so any of them can be
//! dense, double-pruned or dynamic-mask.

use crate::dense::DenseMatrix;
use crate::error::{Error, Result};
use crate::nm::{random_mask, magnitude_mask, NmMask, NmPattern};
use crate::rng::{derive_seed, rng_from_seed, SeededRng};
use crate::scalar::Scalar;
use crate::train::config::{MaskMode, ModelKind, PrunedModules, TrainConfig};
use crate::train::data::{Batch, Dataset};
use crate::train::layer::{DenseLinear, DynamicSparseLinear, Linear, LinearGrads, SparseLinearLayer};
use crate::train::nn::{
    causal_attention, causal_attention_backward, cross_entropy, gelu_backward, gelu_forward, mse_loss, AttentionCache,
    Embedding, LayerNorm, LayerNormCache, LayerNormGrads,
};
use crate::train::optim::Optimizer;

const INIT_STREAM: u64 = 0x1417;
const MASK_STREAM: u64 = 0x3a5c;

/// How one linear layer should be built.
#[derive(Debug, Clone, Copy)]
struct LayerPlan {
    pattern: Option<NmPattern>,
    mode: MaskMode,
    decay: f64,
    mask_seed: u64,
    adapter_decay: bool,
}

fn build_linear<T: Scalar>(weight: DenseMatrix<T>, bias: bool, plan: LayerPlan) -> Result<Linear<T>> {
    let bias = bias.then(|| vec![T::zero(); weight.rows()]);
    let Some(pattern) = plan.pattern else {
        return Ok(Linear::Dense(DenseLinear::new(weight, bias)?));
    };
    let (d_out, d_in) = weight.shape();
    pattern.check_divisible(d_in)?;
    pattern.check_divisible(d_out)?;
    match plan.mode {
        MaskMode::Dynamic => Ok(Linear::Dynamic(DynamicSparseLinear::new(weight, pattern, bias, plan.decay)?)),
        MaskMode::StaticRandom | MaskMode::StaticMagnitude => {
            let mask = if plan.mode == MaskMode::StaticRandom {
                random_mask(d_out, d_in, pattern, plan.mask_seed)?
            } else {
                magnitude_mask(&weight, pattern)?
            };
            let mut layer = SparseLinearLayer::new(&weight, mask, bias)?;
            layer.set_adapter_decay(plan.adapter_decay);
            Ok(Linear::Sparse(layer))
        }
    }
}

/// Stack of linear layers with GELU between them.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T = f32> {
    pub layers: Vec<Linear<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads<T> {
    pub layers: Vec<LinearGrads<T>>,
}

impl<T: Scalar> Mlp<T> {
    #[allow(clippy::type_complexity)]
    fn forward_cached(&self, x: &DenseMatrix<T>) -> Result<(DenseMatrix<T>, Vec<DenseMatrix<T>>, Vec<DenseMatrix<T>>)> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&h)?;
            inputs.push(h);
            h = if i + 1 < self.layers.len() { gelu_forward(&z) } else { z.clone() };
            pre.push(z);
        }
        Ok((h, inputs, pre))
    }

    pub fn predict(&self, x: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
        Ok(self.forward_cached(x)?.0)
    }

    pub fn loss_and_grads(&self, x: &DenseMatrix<T>, y: &DenseMatrix<T>) -> Result<(T, MlpGrads<T>)> {
        let (out, inputs, pre) = self.forward_cached(x)?;
        let (loss, mut d) = mse_loss(&out, y)?;
        let mut grads = Vec::with_capacity(self.layers.len());
        for i in (0..self.layers.len()).rev() {
            if i + 1 < self.layers.len() {
                d = gelu_backward(&pre[i], &d)?;
            }
            let (dx, g) = self.layers[i].backward(&inputs[i], &d)?;
            grads.push(g);
            d = dx;
        }
        grads.reverse();
        Ok((loss, MlpGrads { layers: grads }))
    }

    pub fn apply(&mut self, grads: &MlpGrads<T>, opt: &Optimizer<T>) -> Result<()> {
        for (l, g) in self.layers.iter_mut().zip(&grads.layers) {
            l.step(g, opt)?;
        }
        Ok(())
    }
}

/// One pre-norm transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct Block<T = f32> {
    pub ln1: LayerNorm<T>,
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub o: Linear<T>,
    pub ln2: LayerNorm<T>,
    pub up: Linear<T>,
    pub down: Linear<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockGrads<T> {
    pub ln1: LayerNormGrads<T>,
    pub q: LinearGrads<T>,
    pub k: LinearGrads<T>,
    pub v: LinearGrads<T>,
    pub o: LinearGrads<T>,
    pub ln2: LayerNormGrads<T>,
    pub up: LinearGrads<T>,
    pub down: LinearGrads<T>,
}

struct BlockCache<T> {
    c1: LayerNormCache<T>,
    a: DenseMatrix<T>,
    q: DenseMatrix<T>,
    k: DenseMatrix<T>,
    v: DenseMatrix<T>,
    attn: AttentionCache<T>,
    att: DenseMatrix<T>,
    c2: LayerNormCache<T>,
    c: DenseMatrix<T>,
    u: DenseMatrix<T>,
    g: DenseMatrix<T>,
}

impl<T: Scalar> Block<T> {
    fn linears(&self) -> [&Linear<T>; 6] {
        [&self.q, &self.k, &self.v, &self.o, &self.up, &self.down]
    }

    fn linears_mut(&mut self) -> [&mut Linear<T>; 6] {
        [&mut self.q, &mut self.k, &mut self.v, &mut self.o, &mut self.up, &mut self.down]
    }

    fn forward(&self, h: &DenseMatrix<T>, batch: usize, ctx: usize, heads: usize) -> Result<(DenseMatrix<T>, BlockCache<T>)> {
        let (a, c1) = self.ln1.forward(h)?;
        let q = self.q.forward(&a)?;
        let k = self.k.forward(&a)?;
        let v = self.v.forward(&a)?;
        let (att, attn) = causal_attention(&q, &k, &v, batch, ctx, heads)?;
        let h1 = h.add(&self.o.forward(&att)?)?;
        let (c, c2) = self.ln2.forward(&h1)?;
        let u = self.up.forward(&c)?;
        let g = gelu_forward(&u);
        let out = h1.add(&self.down.forward(&g)?)?;
        Ok((
            out,
            BlockCache {
                c1,
                a,
                q,
                k,
                v,
                attn,
                att,
                c2,
                c,
                u,
                g,
            },
        ))
    }

    fn backward(
        &self,
        cache: &BlockCache<T>,
        dh: &DenseMatrix<T>,
        batch: usize,
        ctx: usize,
        heads: usize,
    ) -> Result<(DenseMatrix<T>, BlockGrads<T>)> {
        let (dg, g_down) = self.down.backward(&cache.g, dh)?;
        let du = gelu_backward(&cache.u, &dg)?;
        let (dc, g_up) = self.up.backward(&cache.c, &du)?;
        let (dh1_ln, g_ln2) = self.ln2.backward(&dc, &cache.c2)?;
        let dh1 = dh.add(&dh1_ln)?;
        let (datt, g_o) = self.o.backward(&cache.att, &dh1)?;
        let (dq, dk, dv) =
            causal_attention_backward(&cache.q, &cache.k, &cache.v, &cache.attn, &datt, batch, ctx, heads)?;
        let (mut da, g_q) = self.q.backward(&cache.a, &dq)?;
        let (da_k, g_k) = self.k.backward(&cache.a, &dk)?;
        let (da_v, g_v) = self.v.backward(&cache.a, &dv)?;
        da.axpy(T::one(), &da_k)?;
        da.axpy(T::one(), &da_v)?;
        let (dh_ln, g_ln1) = self.ln1.backward(&da, &cache.c1)?;
        Ok((
            dh1.add(&dh_ln)?,
            BlockGrads {
                ln1: g_ln1,
                q: g_q,
                k: g_k,
                v: g_v,
                o: g_o,
                ln2: g_ln2,
                up: g_up,
                down: g_down,
            },
        ))
    }

    fn apply(&mut self, g: &BlockGrads<T>, opt: &Optimizer<T>) -> Result<()> {
        self.ln1.step(&g.ln1, opt)?;
        self.q.step(&g.q, opt)?;
        self.k.step(&g.k, opt)?;
        self.v.step(&g.v, opt)?;
        self.o.step(&g.o, opt)?;
        self.ln2.step(&g.ln2, opt)?;
        self.up.step(&g.up, opt)?;
        self.down.step(&g.down, opt)
    }
}

/// Decoder-only character LM with learned positions and a dense head.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyLm<T = f32> {
    pub tok: Embedding<T>,
    pub pos: Embedding<T>,
    pub blocks: Vec<Block<T>>,
    pub ln_f: LayerNorm<T>,
    pub head: Linear<T>,
    pub heads: usize,
    pub context: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmGrads<T> {
    pub tok: DenseMatrix<T>,
    pub pos: DenseMatrix<T>,
    pub blocks: Vec<BlockGrads<T>>,
    pub ln_f: LayerNormGrads<T>,
    pub head: LinearGrads<T>,
}

impl<T: Scalar> TinyLm<T> {
    fn check_tokens(&self, inputs: &[usize], batch: usize, ctx: usize) -> Result<()> {
        if ctx == 0 || ctx > self.context || inputs.len() != batch * ctx {
            return Err(Error::InvalidArgument(format!(
                "token batch {batch}x{ctx} does not fit context {} ({} ids)",
                self.context,
                inputs.len()
            )));
        }
        Ok(())
    }

    #[allow(clippy::type_complexity)]
    fn forward_cached(
        &self,
        inputs: &[usize],
        batch: usize,
        ctx: usize,
    ) -> Result<(DenseMatrix<T>, Vec<BlockCache<T>>, DenseMatrix<T>, LayerNormCache<T>, Vec<usize>)> {
        self.check_tokens(inputs, batch, ctx)?;
        let positions: Vec<usize> = (0..inputs.len()).map(|i| i % ctx).collect();
        let mut h = self.tok.lookup(inputs)?.add(&self.pos.lookup(&positions)?)?;
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (out, cache) = block.forward(&h, batch, ctx, self.heads)?;
            caches.push(cache);
            h = out;
        }
        let (f, cf) = self.ln_f.forward(&h)?;
        let logits = self.head.forward(&f)?;
        Ok((logits, caches, f, cf, positions))
    }

    pub fn logits(&self, inputs: &[usize], batch: usize, ctx: usize) -> Result<DenseMatrix<T>> {
        Ok(self.forward_cached(inputs, batch, ctx)?.0)
    }

    pub fn loss_and_grads(&self, inputs: &[usize], targets: &[usize], batch: usize, ctx: usize) -> Result<(T, LmGrads<T>)> {
        let (logits, caches, f, cf, positions) = self.forward_cached(inputs, batch, ctx)?;
        let (loss, dlogits) = cross_entropy(&logits, targets)?;
        let (df, g_head) = self.head.backward(&f, &dlogits)?;
        let (mut dh, g_lnf) = self.ln_f.backward(&df, &cf)?;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (block, cache) in self.blocks.iter().zip(&caches).rev() {
            let (d, g) = block.backward(cache, &dh, batch, ctx, self.heads)?;
            blocks.push(g);
            dh = d;
        }
        blocks.reverse();
        let pos = self.pos.backward(&positions, &dh);
        Ok((
            loss,
            LmGrads {
                tok: self.tok.backward(inputs, &dh),
                pos,
                blocks,
                ln_f: g_lnf,
                head: g_head,
            },
        ))
    }

    pub fn apply(&mut self, grads: &LmGrads<T>, opt: &Optimizer<T>) -> Result<()> {
        self.tok.step(&grads.tok, opt)?;
        self.pos.step(&grads.pos, opt)?;
        for (b, g) in self.blocks.iter_mut().zip(&grads.blocks) {
            b.apply(g, opt)?;
        }
        self.ln_f.step(&grads.ln_f, opt)?;
        self.head.step(&grads.head, opt)
    }
}

#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum ToyModel<T = f32> {
    Mlp(Mlp<T>),
    Lm(TinyLm<T>),
}

#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum ModelGrads<T> {
    Mlp(MlpGrads<T>),
    Lm(LmGrads<T>),
}

impl<T: Scalar> ModelGrads<T> {
    /// Linear-layer gradients in the same order as [`ToyModel::linears`].
    pub fn linears(&self) -> Vec<&LinearGrads<T>> {
        match self {
            ModelGrads::Mlp(g) => g.layers.iter().collect(),
            ModelGrads::Lm(g) => {
                let mut out = Vec::new();
                for b in &g.blocks {
                    out.extend([&b.q, &b.k, &b.v, &b.o, &b.up, &b.down]);
                }
                out.push(&g.head);
                out
            }
        }
    }
}

impl<T: Scalar> ToyModel<T> {
    /// Builds the model described by `config`; weights and masks are drawn
    /// from streams derived from `config.train.seed`.
    pub fn build(config: &TrainConfig, dataset: &Dataset<T>) -> Result<Self> {
        let seed = config.train.seed;
        let mut rng = rng_from_seed(derive_seed(seed, INIT_STREAM));
        let mut mask_counter = 0u64;
        let mut plan = |pattern: Option<NmPattern>| {
            mask_counter += 1;
            LayerPlan {
                pattern,
                mode: config.sparsity.mask,
                decay: config.sparsity.decay,
                mask_seed: derive_seed(derive_seed(seed, MASK_STREAM), mask_counter),
                adapter_decay: config.adapter.weight_decay,
            }
        };
        let spec = &config.model;
        match spec.kind {
            ModelKind::Mlp => {
                let mut dims = vec![spec.input_dim];
                dims.extend(std::iter::repeat_n(spec.hidden, spec.layers - 1));
                dims.push(spec.output_dim);
                let count = spec.layers;
                let mut layers = Vec::with_capacity(count);
                for i in 0..count {
                    let (d_in, d_out) = (dims[i], dims[i + 1]);
                    let exempt = (i == 0 && config.sparsity.dense_first) || (i + 1 == count && config.sparsity.dense_head);
                    let pattern = if exempt { None } else { config.block_pattern(i, count) };
                    let w = DenseMatrix::random_normal(d_out, d_in, 1.0 / (d_in as f64).sqrt(), &mut rng);
                    layers.push(build_linear(w, true, plan(pattern))?);
                }
                Ok(ToyModel::Mlp(Mlp { layers }))
            }
            ModelKind::Lm => {
                let Dataset::Text(text) = dataset else {
                    return Err(Error::InvalidArgument("language model needs a text dataset".into()));
                };
                let (d, vocab, blocks_n) = (spec.hidden, text.vocab_size(), spec.layers);
                let std = 0.02;
                let proj_std = std / (2.0 * blocks_n as f64).sqrt();
                let tok = Embedding::new(DenseMatrix::random_normal(vocab, d, std, &mut rng));
                let pos = Embedding::new(DenseMatrix::random_normal(spec.context, d, std, &mut rng));
                let attention = config.sparsity.modules == PrunedModules::MlpAttention;
                let mut blocks = Vec::with_capacity(blocks_n);
                for b in 0..blocks_n {
                    let p = config.block_pattern(b, blocks_n);
                    let attn_p = if attention { p } else { None };
                    let qkv_p = if b == 0 && config.sparsity.dense_first { None } else { attn_p };
                    let mut lin = |d_out: usize, d_in: usize, s: f64, pattern: Option<NmPattern>| {
                        build_linear(DenseMatrix::random_normal(d_out, d_in, s, &mut rng), true, plan(pattern))
                    };
                    blocks.push(Block {
                        ln1: LayerNorm::new(d),
                        q: lin(d, d, std, qkv_p)?,
                        k: lin(d, d, std, qkv_p)?,
                        v: lin(d, d, std, qkv_p)?,
                        o: lin(d, d, proj_std, attn_p)?,
                        ln2: LayerNorm::new(d),
                        up: lin(4 * d, d, std, p)?,
                        down: lin(d, 4 * d, proj_std, p)?,
                    });
                }
                let head_pattern = if config.sparsity.dense_head { None } else { config.block_pattern(blocks_n - 1, blocks_n) };
                let head = build_linear(DenseMatrix::random_normal(vocab, d, std, &mut rng), true, plan(head_pattern))?;
                Ok(ToyModel::Lm(TinyLm {
                    tok,
                    pos,
                    blocks,
                    ln_f: LayerNorm::new(d),
                    head,
                    heads: spec.heads,
                    context: spec.context,
                }))
            }
        }
    }

    /// Model output for a batch: predictions (MLP) or logits (LM).
    pub fn predict(&self, batch: &Batch<T>) -> Result<DenseMatrix<T>> {
        match (self, batch) {
            (ToyModel::Mlp(m), Batch::Regression { x, .. }) => m.predict(x),
            (ToyModel::Lm(m), Batch::Tokens { inputs, batch, context, .. }) => m.logits(inputs, *batch, *context),
            _ => Err(Error::InvalidArgument("batch kind does not match model".into())),
        }
    }

    pub fn loss(&self, batch: &Batch<T>) -> Result<T> {
        match (self, batch) {
            (ToyModel::Mlp(m), Batch::Regression { x, y }) => Ok(mse_loss(&m.predict(x)?, y)?.0),
            (ToyModel::Lm(m), Batch::Tokens { inputs, targets, batch, context }) => {
                Ok(cross_entropy(&m.logits(inputs, *batch, *context)?, targets)?.0)
            }
            _ => Err(Error::InvalidArgument("batch kind does not match model".into())),
        }
    }

    pub fn loss_and_grads(&self, batch: &Batch<T>) -> Result<(T, ModelGrads<T>)> {
        match (self, batch) {
            (ToyModel::Mlp(m), Batch::Regression { x, y }) => {
                let (l, g) = m.loss_and_grads(x, y)?;
                Ok((l, ModelGrads::Mlp(g)))
            }
            (ToyModel::Lm(m), Batch::Tokens { inputs, targets, batch, context }) => {
                let (l, g) = m.loss_and_grads(inputs, targets, *batch, *context)?;
                Ok((l, ModelGrads::Lm(g)))
            }
            _ => Err(Error::InvalidArgument("batch kind does not match model".into())),
        }
    }

    pub fn apply(&mut self, grads: &ModelGrads<T>, opt: &Optimizer<T>) -> Result<()> {
        match (self, grads) {
            (ToyModel::Mlp(m), ModelGrads::Mlp(g)) => m.apply(g, opt),
            (ToyModel::Lm(m), ModelGrads::Lm(g)) => m.apply(g, opt),
            _ => Err(Error::InvalidArgument("gradient kind does not match model".into())),
        }
    }

    /// Every linear layer: MLP layers in order, or per block
    /// `q, k, v, o, up, down` followed by the head.
    pub fn linears(&self) -> Vec<&Linear<T>> {
        match self {
            ToyModel::Mlp(m) => m.layers.iter().collect(),
            ToyModel::Lm(m) => {
                let mut out: Vec<&Linear<T>> = m.blocks.iter().flat_map(|b| b.linears()).collect();
                out.push(&m.head);
                out
            }
        }
    }

    pub fn linears_mut(&mut self) -> Vec<&mut Linear<T>> {
        match self {
            ToyModel::Mlp(m) => m.layers.iter_mut().collect(),
            ToyModel::Lm(m) => {
                let mut out: Vec<&mut Linear<T>> = m.blocks.iter_mut().flat_map(|b| b.linears_mut()).collect();
                out.push(&mut m.head);
                out
            }
        }
    }

    /// Masks of all pruned layers, in [`linears`](Self::linears) order.
    pub fn masks(&self) -> Vec<NmMask> {
        self.linears().into_iter().filter_map(|l| l.mask().cloned()).collect()
    }

    /// Turns on zero-product adapters of rank `min(rank, d_in, d_out)` in
    /// every double-pruned layer. Returns how many layers got adapters.
    pub fn activate_adapters(&mut self, rank: usize, rng: &mut SeededRng) -> Result<usize> {
        let mut count = 0;
        for l in self.linears_mut() {
            if let Some(s) = l.as_sparse_mut() {
                let r = rank.min(s.d_in()).min(s.d_out());
                if r > 0 {
                    s.activate_adapters(r, rng)?;
                    count += 1;
                }
            }
        }
        Ok(count)
    }

    /// Stored trainable values (sparse layers count kept values only).
    pub fn parameter_count(&self) -> usize {
        let linear: usize = self.linears().iter().map(|l| l.parameter_count()).sum();
        match self {
            ToyModel::Mlp(_) => linear,
            ToyModel::Lm(m) => {
                let ln = |l: &LayerNorm<T>| l.gamma.len() * 2;
                linear
                    + m.tok.table.len()
                    + m.pos.table.len()
                    + ln(&m.ln_f)
                    + m.blocks.iter().map(|b| ln(&b.ln1) + ln(&b.ln2)).sum::<usize>()
            }
        }
    }
}
