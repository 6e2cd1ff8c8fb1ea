//! Dense network engine: layers, choice blocks, embedding models and exact
//! reverse-mode gradients.
//!
//! Weights are row-major `(out, in)`. Batches are `Tensor2` with one sample
//! per row. Every forward routine evaluates through [`LayerView`], which lets
//! supernet slices and standalone copies share one arithmetic path.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::rng::Fnv64;
use crate::tensor::{axpy, dot, l2_norm, Tensor2, WeightView};

/// Norms at or below this are treated as zero.
pub const NORM_EPSILON: f32 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
}

impl Activation {
    #[inline]
    fn apply(self, v: f32) -> f32 {
        match self {
            Activation::Identity => v,
            Activation::Relu => {
                if v > 0.0 {
                    v
                } else {
                    0.0
                }
            }
        }
    }
}

/// A dense affine layer followed by an element-wise activation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    weight: Tensor2,
    bias: Vec<f32>,
    activation: Activation,
}

/// Gradient of one [`DenseLayer`].
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weight: Tensor2,
    pub bias: Vec<f32>,
}

impl LayerGrad {
    pub fn zeros_like(layer: &DenseLayer) -> Self {
        LayerGrad { weight: Tensor2::zeros(layer.out_dim(), layer.in_dim()), bias: vec![0.0; layer.out_dim()] }
    }

    pub fn is_zero(&self) -> bool {
        self.weight.as_slice().iter().chain(&self.bias).all(|v| *v == 0.0)
    }
}

/// Borrowed layer parameters, possibly a prefix slice of larger storage.
#[derive(Debug, Clone, Copy)]
pub struct LayerView<'a> {
    pub weight: WeightView<'a>,
    pub bias: &'a [f32],
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new(weight: Tensor2, bias: Vec<f32>, activation: Activation) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(shape_err!("bias length {} for {} output units", bias.len(), weight.rows()));
        }
        if bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::NonFinite("bias".into()));
        }
        Ok(DenseLayer { weight, bias, activation })
    }

    /// Kaiming-uniform fan-in initialization, zero bias.
    pub fn init<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, activation: Activation, rng: &mut R) -> Self {
        let bound = libm::sqrtf(6.0 / in_dim.max(1) as f32);
        let data = (0..in_dim * out_dim).map(|_| rng.random_range(-bound..bound)).collect();
        DenseLayer {
            weight: Tensor2::new(out_dim, in_dim, data).expect("finite init"),
            bias: vec![0.0; out_dim],
            activation,
        }
    }

    #[inline]
    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    #[inline]
    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn weight(&self) -> &Tensor2 {
        &self.weight
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weight_mut(&mut self) -> &mut Tensor2 {
        &mut self.weight
    }

    pub fn bias_mut(&mut self) -> &mut [f32] {
        &mut self.bias
    }

    /// Weight and bias as mutable slices, in that order.
    pub fn params_mut(&mut self) -> (&mut [f32], &mut [f32]) {
        (self.weight.as_mut_slice(), &mut self.bias)
    }

    pub fn view(&self) -> LayerView<'_> {
        LayerView { weight: self.weight.view(), bias: &self.bias, activation: self.activation }
    }

    pub fn flops(&self) -> u64 {
        2 * self.in_dim() as u64 * self.out_dim() as u64
    }

    pub fn forward(&self, x: &Tensor2) -> Result<Tensor2> {
        if x.cols() != self.in_dim() {
            return Err(shape_err!("input width {} for a layer expecting {}", x.cols(), self.in_dim()));
        }
        Ok(layer_forward(self.view(), x))
    }

    /// Backward through one layer given its input, its (post-activation)
    /// output and the upstream gradient. Returns the parameter gradient and
    /// the gradient with respect to the input.
    pub fn backward(&self, input: &Tensor2, output: &Tensor2, upstream: &Tensor2) -> (LayerGrad, Tensor2) {
        let n = input.rows();
        let (out_dim, in_dim) = (self.out_dim(), self.in_dim());
        let mut grad = LayerGrad::zeros_like(self);
        let mut dx = Tensor2::zeros(n, in_dim);
        let mut gz = vec![0.0f32; out_dim];
        for s in 0..n {
            let g = upstream.row(s);
            let y = output.row(s);
            for o in 0..out_dim {
                gz[o] = match self.activation {
                    Activation::Identity => g[o],
                    Activation::Relu => {
                        if y[o] > 0.0 {
                            g[o]
                        } else {
                            0.0
                        }
                    }
                };
            }
            let x = input.row(s);
            for o in 0..out_dim {
                if gz[o] == 0.0 {
                    continue;
                }
                axpy(gz[o], x, grad.weight.row_mut(o));
                grad.bias[o] += gz[o];
                axpy(gz[o], self.weight.row(o), dx.row_mut(s));
            }
        }
        (grad, dx)
    }
}

/// `activation(x · Wᵀ + b)` for every row of `x`.
pub fn layer_forward(layer: LayerView<'_>, x: &Tensor2) -> Tensor2 {
    let (n, out_dim) = (x.rows(), layer.weight.rows());
    debug_assert_eq!(x.cols(), layer.weight.cols());
    let mut y = Tensor2::zeros(n, out_dim);
    for s in 0..n {
        let xs = x.row(s);
        let ys = y.row_mut(s);
        for o in 0..out_dim {
            ys[o] = layer.activation.apply(dot(xs, layer.weight.row(o)) + layer.bias[o]);
        }
    }
    y
}

/// The four layer-position choices of the search space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    /// One linear layer.
    Linear,
    /// One linear layer with ReLU.
    LinearRelu,
    /// Linear+ReLU into half width, then linear+ReLU to the output width.
    Bottleneck,
    /// Linear+ReLU plus a parameter-free shortcut on the first
    /// `min(in, out)` units.
    Residual,
}

impl BlockKind {
    pub const ALL: [BlockKind; 4] = [BlockKind::Linear, BlockKind::LinearRelu, BlockKind::Bottleneck, BlockKind::Residual];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<BlockKind> {
        BlockKind::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            BlockKind::Linear => "linear",
            BlockKind::LinearRelu => "linear_relu",
            BlockKind::Bottleneck => "bottleneck",
            BlockKind::Residual => "residual",
        }
    }

    pub fn from_name(s: &str) -> Option<BlockKind> {
        BlockKind::ALL.into_iter().find(|k| k.name() == s)
    }

    /// Activations of the block's layers in order.
    pub fn activations(self) -> &'static [Activation] {
        match self {
            BlockKind::Linear => &[Activation::Identity],
            BlockKind::LinearRelu | BlockKind::Residual => &[Activation::Relu],
            BlockKind::Bottleneck => &[Activation::Relu, Activation::Relu],
        }
    }

    /// Widths of each layer's output for a block producing `width` units.
    pub fn layer_widths(self, width: usize) -> Vec<usize> {
        match self {
            BlockKind::Bottleneck => vec![bottleneck_width(width), width],
            _ => vec![width],
        }
    }
}

/// Inner width of a bottleneck block producing `width` units.
#[inline]
pub fn bottleneck_width(width: usize) -> usize {
    width.div_ceil(2)
}

/// One choice block: a kind plus its dense layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    kind: BlockKind,
    layers: Vec<DenseLayer>,
}

/// A block evaluated through layer views.
#[derive(Debug, Clone, Copy)]
pub struct BlockView<'a> {
    pub kind: BlockKind,
    pub first: LayerView<'a>,
    pub second: Option<LayerView<'a>>,
}

/// Activations recorded by a forward pass through one block.
#[derive(Debug, Clone)]
pub struct BlockTrace {
    pub input: Tensor2,
    /// Post-activation output of each layer, before any shortcut.
    pub layer_outputs: Vec<Tensor2>,
    pub output: Tensor2,
}

impl Block {
    pub fn new(kind: BlockKind, layers: Vec<DenseLayer>) -> Result<Self> {
        let acts = kind.activations();
        if layers.len() != acts.len() {
            return Err(shape_err!("{} block needs {} layers, got {}", kind.name(), acts.len(), layers.len()));
        }
        for (i, (l, a)) in layers.iter().zip(acts).enumerate() {
            if l.activation != *a {
                return Err(shape_err!("{} block layer {i} has activation {:?}", kind.name(), l.activation));
            }
        }
        if let [a, b] = layers.as_slice() {
            if b.in_dim() != a.out_dim() {
                return Err(shape_err!("bottleneck inner width {} vs {}", a.out_dim(), b.in_dim()));
            }
        }
        Ok(Block { kind, layers })
    }

    pub fn init<R: Rng + ?Sized>(kind: BlockKind, in_dim: usize, width: usize, rng: &mut R) -> Self {
        let mut layers = Vec::new();
        let mut prev = in_dim;
        for (w, a) in kind.layer_widths(width).into_iter().zip(kind.activations()) {
            layers.push(DenseLayer::init(prev, w, *a, rng));
            prev = w;
        }
        Block { kind, layers }
    }

    pub fn kind(&self) -> BlockKind {
        self.kind
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn view(&self) -> BlockView<'_> {
        BlockView { kind: self.kind, first: self.layers[0].view(), second: self.layers.get(1).map(|l| l.view()) }
    }

    pub fn flops(&self) -> u64 {
        self.layers.iter().map(DenseLayer::flops).sum()
    }

    pub fn forward_trace(&self, x: &Tensor2) -> BlockTrace {
        block_forward_trace(self.view(), x)
    }

    /// Returns gradients for each layer and the input gradient.
    pub fn backward(&self, trace: &BlockTrace, upstream: &Tensor2) -> (Vec<LayerGrad>, Tensor2) {
        match self.kind {
            BlockKind::Linear | BlockKind::LinearRelu => {
                let (g, dx) = self.layers[0].backward(&trace.input, &trace.layer_outputs[0], upstream);
                (vec![g], dx)
            }
            BlockKind::Bottleneck => {
                let (g2, dh) = self.layers[1].backward(&trace.layer_outputs[0], &trace.layer_outputs[1], upstream);
                let (g1, dx) = self.layers[0].backward(&trace.input, &trace.layer_outputs[0], &dh);
                (vec![g1, g2], dx)
            }
            BlockKind::Residual => {
                let (g, mut dx) = self.layers[0].backward(&trace.input, &trace.layer_outputs[0], upstream);
                let m = self.in_dim().min(self.out_dim());
                for s in 0..dx.rows() {
                    let up = &upstream.row(s)[..m];
                    for (d, u) in dx.row_mut(s)[..m].iter_mut().zip(up) {
                        *d += *u;
                    }
                }
                (vec![g], dx)
            }
        }
    }
}

pub fn block_forward(block: BlockView<'_>, x: &Tensor2) -> Tensor2 {
    block_forward_trace(block, x).output
}

pub fn block_forward_trace(block: BlockView<'_>, x: &Tensor2) -> BlockTrace {
    let h1 = layer_forward(block.first, x);
    let (layer_outputs, output) = match (block.kind, block.second) {
        (BlockKind::Bottleneck, Some(second)) => {
            let h2 = layer_forward(second, &h1);
            let out = h2.clone();
            (vec![h1, h2], out)
        }
        (BlockKind::Residual, _) => {
            let mut out = h1.clone();
            let m = x.cols().min(out.cols());
            for s in 0..out.rows() {
                let xs = &x.row(s)[..m];
                for (o, xi) in out.row_mut(s)[..m].iter_mut().zip(xs) {
                    *o += *xi;
                }
            }
            (vec![h1], out)
        }
        _ => {
            let out = h1.clone();
            (vec![h1], out)
        }
    };
    BlockTrace { input: x.clone(), layer_outputs, output }
}

/// A resolved architecture: block kinds and output widths, no weights.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelArch {
    pub input_dim: usize,
    pub blocks: Vec<(BlockKind, usize)>,
    pub embedding_dim: usize,
}

impl ModelArch {
    /// A plain ReLU MLP with the given hidden widths.
    pub fn mlp(input_dim: usize, hidden: &[usize], embedding_dim: usize) -> Self {
        ModelArch { input_dim, blocks: hidden.iter().map(|w| (BlockKind::LinearRelu, *w)).collect(), embedding_dim }
    }
}

/// Sum of `2 * in * out` over every dense layer, head included.
pub fn count_flops(arch: &ModelArch) -> u64 {
    let mut prev = arch.input_dim;
    let mut total = 0u64;
    for &(kind, width) in &arch.blocks {
        for w in kind.layer_widths(width) {
            total += 2 * prev as u64 * w as u64;
            prev = w;
        }
    }
    total + 2 * prev as u64 * arch.embedding_dim as u64
}

/// Architecture plus weights. Maps inputs to `embedding_dim` features;
/// [`EmbeddingModel::embed`] L2-normalizes them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingModel {
    blocks: Vec<Block>,
    head: DenseLayer,
}

/// Activations recorded by [`EmbeddingModel::forward_trace`].
#[derive(Debug, Clone)]
pub struct ModelTrace {
    pub blocks: Vec<BlockTrace>,
    pub head_input: Tensor2,
    pub features: Tensor2,
}

/// Gradients for every dense layer of a model, in [`EmbeddingModel::layers`]
/// order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub layers: Vec<LayerGrad>,
}

impl ModelGrads {
    pub fn is_zero(&self) -> bool {
        self.layers.iter().all(LayerGrad::is_zero)
    }
}

impl EmbeddingModel {
    pub fn new(blocks: Vec<Block>, head: DenseLayer) -> Result<Self> {
        if head.activation != Activation::Identity {
            return Err(shape_err!("embedding head must be linear"));
        }
        for w in blocks.windows(2) {
            if w[1].in_dim() != w[0].out_dim() {
                return Err(shape_err!("block widths do not chain: {} -> {}", w[0].out_dim(), w[1].in_dim()));
            }
        }
        if let Some(last) = blocks.last() {
            if head.in_dim() != last.out_dim() {
                return Err(shape_err!("head expects {} inputs, last block gives {}", head.in_dim(), last.out_dim()));
            }
        }
        Ok(EmbeddingModel { blocks, head })
    }

    /// Fresh Kaiming-uniform weights for `arch`; layers are drawn in order.
    pub fn init<R: Rng + ?Sized>(arch: &ModelArch, rng: &mut R) -> Self {
        let mut prev = arch.input_dim;
        let mut blocks = Vec::with_capacity(arch.blocks.len());
        for &(kind, width) in &arch.blocks {
            let b = Block::init(kind, prev, width, rng);
            prev = b.out_dim();
            blocks.push(b);
        }
        let head = DenseLayer::init(prev, arch.embedding_dim, Activation::Identity, rng);
        EmbeddingModel { blocks, head }
    }

    pub fn arch(&self) -> ModelArch {
        ModelArch {
            input_dim: self.input_dim(),
            blocks: self.blocks.iter().map(|b| (b.kind, b.out_dim())).collect(),
            embedding_dim: self.embedding_dim(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.blocks.first().map_or(self.head.in_dim(), Block::in_dim)
    }

    pub fn embedding_dim(&self) -> usize {
        self.head.out_dim()
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn head(&self) -> &DenseLayer {
        &self.head
    }

    /// Every dense layer, blocks first, head last.
    pub fn layers(&self) -> impl Iterator<Item = &DenseLayer> {
        self.blocks.iter().flat_map(|b| b.layers.iter()).chain(core::iter::once(&self.head))
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut DenseLayer> {
        self.blocks.iter_mut().flat_map(|b| b.layers.iter_mut()).chain(core::iter::once(&mut self.head))
    }

    pub fn flops(&self) -> u64 {
        self.layers().map(DenseLayer::flops).sum()
    }

    pub fn num_params(&self) -> usize {
        self.layers().map(|l| l.weight.as_slice().len() + l.bias.len()).sum()
    }

    /// Hash of every parameter bit pattern; identifies the embedding producer.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv64::default();
        for b in &self.blocks {
            h.write_u32(b.kind.index() as u32);
        }
        for l in self.layers() {
            h.write_u32(l.in_dim() as u32);
            h.write_u32(l.out_dim() as u32);
            h.write_f32s(l.weight.as_slice());
            h.write_f32s(&l.bias);
        }
        h.finish()
    }

    fn check_input(&self, x: &Tensor2) -> Result<()> {
        if x.cols() != self.input_dim() {
            return Err(shape_err!("input width {} for a model expecting {}", x.cols(), self.input_dim()));
        }
        Ok(())
    }

    /// Raw (unnormalized) embedding features.
    pub fn features(&self, x: &Tensor2) -> Result<Tensor2> {
        self.check_input(x)?;
        let mut h = x.clone();
        for b in &self.blocks {
            h = block_forward(b.view(), &h);
        }
        Ok(layer_forward(self.head.view(), &h))
    }

    /// Unit-norm embeddings, one row per input row.
    pub fn embed(&self, x: &Tensor2) -> Result<Tensor2> {
        let mut f = self.features(x)?;
        normalize_rows(&mut f)?;
        Ok(f)
    }

    pub fn forward_trace(&self, x: &Tensor2) -> Result<ModelTrace> {
        self.check_input(x)?;
        let mut traces = Vec::with_capacity(self.blocks.len());
        let mut h = x.clone();
        for b in &self.blocks {
            let t = b.forward_trace(&h);
            h = t.output.clone();
            traces.push(t);
        }
        let features = layer_forward(self.head.view(), &h);
        Ok(ModelTrace { blocks: traces, head_input: h, features })
    }

    /// Gradients of every parameter given `d loss / d features`.
    pub fn backward(&self, trace: &ModelTrace, upstream: &Tensor2) -> Result<ModelGrads> {
        self.backward_with_input_grad(trace, upstream).map(|(g, _)| g)
    }

    pub fn backward_with_input_grad(&self, trace: &ModelTrace, upstream: &Tensor2) -> Result<(ModelGrads, Tensor2)> {
        if upstream.rows() != trace.features.rows() || upstream.cols() != self.embedding_dim() {
            return Err(shape_err!(
                "upstream {}x{} for features {}x{}",
                upstream.rows(),
                upstream.cols(),
                trace.features.rows(),
                self.embedding_dim()
            ));
        }
        let (head_grad, mut g) = self.head.backward(&trace.head_input, &trace.features, upstream);
        let mut per_block = Vec::with_capacity(self.blocks.len());
        for (b, t) in self.blocks.iter().zip(&trace.blocks).rev() {
            let (lg, dx) = b.backward(t, &g);
            per_block.push(lg);
            g = dx;
        }
        let mut layers: Vec<LayerGrad> = per_block.into_iter().rev().flatten().collect();
        layers.push(head_grad);
        Ok((ModelGrads { layers }, g))
    }
}

/// Plain sequential forward through `layers`.
pub fn forward(layers: &[DenseLayer], x: &Tensor2) -> Result<Tensor2> {
    let mut h = x.clone();
    for (i, l) in layers.iter().enumerate() {
        if h.cols() != l.in_dim() {
            return Err(shape_err!("layer {i} expects width {}, got {}", l.in_dim(), h.cols()));
        }
        h = layer_forward(l.view(), &h);
    }
    Ok(h)
}

/// Parameter gradients of a plain layer sequence for `d loss / d output`.
pub fn backward(layers: &[DenseLayer], x: &Tensor2, upstream: &Tensor2) -> Result<Vec<LayerGrad>> {
    let mut acts = vec![x.clone()];
    for (i, l) in layers.iter().enumerate() {
        let h = acts.last().expect("non-empty");
        if h.cols() != l.in_dim() {
            return Err(shape_err!("layer {i} expects width {}, got {}", l.in_dim(), h.cols()));
        }
        acts.push(layer_forward(l.view(), h));
    }
    let out = acts.last().expect("non-empty");
    if upstream.rows() != out.rows() || upstream.cols() != out.cols() {
        return Err(shape_err!("upstream {}x{} for output {}x{}", upstream.rows(), upstream.cols(), out.rows(), out.cols()));
    }
    let mut grads = Vec::with_capacity(layers.len());
    let mut g = upstream.clone();
    for (i, l) in layers.iter().enumerate().rev() {
        let (lg, dx) = l.backward(&acts[i], &acts[i + 1], &g);
        grads.push(lg);
        g = dx;
    }
    grads.reverse();
    Ok(grads)
}

/// Unit-L2 copy of `v`.
pub fn l2_normalize(v: &[f32]) -> Result<Vec<f32>> {
    let n = l2_norm(v);
    if !(n > NORM_EPSILON) {
        return Err(Error::Degenerate(format!("vector norm {n} is too small to normalize")));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

pub fn normalize_rows(t: &mut Tensor2) -> Result<()> {
    for r in 0..t.rows() {
        let row = t.row_mut(r);
        let n = l2_norm(row);
        if !(n > NORM_EPSILON) {
            return Err(Error::Degenerate(format!("row {r} has norm {n}")));
        }
        for v in row.iter_mut() {
            *v /= n;
        }
    }
    Ok(())
}
