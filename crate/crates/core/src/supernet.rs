//! Weight-sharing super-network over a layered search space.
//!
//! Every layer stores one block per kind at the maximum width. A sub-network
//! picks a kind and a width per layer and uses the first `width` units of the
//! stored block (prefix slicing). Sub-network evaluation reads the stored
//! parameters through strided views, so it performs the same arithmetic as a
//! model extracted with [`Supernet::extract_standalone`].

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{arg_err, config_err, Error, Result};
use crate::losses::{Classifier, LossKind};
use crate::nn::{
    block_forward, block_forward_trace, layer_forward, normalize_rows, Activation, Block, BlockKind, BlockTrace, BlockView,
    DenseLayer, EmbeddingModel, LayerGrad, LayerView, ModelArch,
};
use crate::optim::{sgd_update, OptimizerState};
use crate::rng::{stream, tags, StreamRng};
use crate::tensor::Tensor2;
use crate::train::{batch_grads, feature_grads, run_epochs, Guidance, TrainLog, TrainRecipe};

/// Default width multipliers: 0.2, 0.4, ..., 2.0.
pub const DEFAULT_WIDTH_CHOICES: [f64; 10] = [0.2, 0.4, 0.6, 0.8, 1.0, 1.2, 1.4, 1.6, 1.8, 2.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchSpace {
    pub num_layers: usize,
    /// Number of block kinds offered per layer, taken from [`BlockKind::ALL`].
    pub block_kinds: usize,
    pub width_choices: Vec<f64>,
    pub base_width: usize,
    pub input_dim: usize,
    pub embedding_dim: usize,
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            num_layers: 6,
            block_kinds: 4,
            width_choices: DEFAULT_WIDTH_CHOICES.to_vec(),
            base_width: 32,
            input_dim: 32,
            embedding_dim: 16,
        }
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 {
            return Err(config_err!("search space needs at least one layer"));
        }
        if self.block_kinds == 0 || self.block_kinds > BlockKind::ALL.len() {
            return Err(config_err!("block kinds must lie in 1..={}, got {}", BlockKind::ALL.len(), self.block_kinds));
        }
        if self.width_choices.is_empty() || self.width_choices.iter().any(|m| !(*m > 0.0) || !m.is_finite()) {
            return Err(config_err!("width multipliers must be positive"));
        }
        if self.width_choices.windows(2).any(|w| w[1] <= w[0]) {
            return Err(config_err!("width multipliers must be strictly increasing"));
        }
        if self.base_width == 0 || self.input_dim == 0 || self.embedding_dim == 0 {
            return Err(config_err!("widths must be positive"));
        }
        let widths: Vec<usize> = (0..self.width_choices.len()).map(|i| self.width(i)).collect();
        if widths.windows(2).any(|w| w[1] <= w[0]) {
            return Err(config_err!("width multipliers {:?} collapse to equal unit counts {widths:?}", self.width_choices));
        }
        Ok(())
    }

    /// Units produced by width choice `i`: `ceil(multiplier * base_width)`.
    pub fn width(&self, i: usize) -> usize {
        (libm::ceil(self.width_choices[i] * self.base_width as f64 - 1e-9) as usize).max(1)
    }

    pub fn max_width(&self) -> usize {
        self.width(self.width_choices.len() - 1)
    }

    pub fn kind(&self, i: usize) -> BlockKind {
        BlockKind::ALL[i]
    }

    /// Number of distinct architectures.
    pub fn size(&self) -> f64 {
        libm::pow((self.block_kinds * self.width_choices.len()) as f64, self.num_layers as f64)
    }

    pub fn check(&self, arch: &ArchDescriptor) -> Result<()> {
        if arch.layers.len() != self.num_layers {
            return Err(arg_err!("descriptor has {} layers, space has {}", arch.layers.len(), self.num_layers));
        }
        for (l, c) in arch.layers.iter().enumerate() {
            if c.block >= self.block_kinds || c.width >= self.width_choices.len() {
                return Err(arg_err!("layer {l} choice ({}, {}) out of range", c.block, c.width));
            }
        }
        Ok(())
    }

    pub fn resolve(&self, arch: &ArchDescriptor) -> Result<ModelArch> {
        self.check(arch)?;
        Ok(ModelArch {
            input_dim: self.input_dim,
            blocks: arch.layers.iter().map(|c| (self.kind(c.block), self.width(c.width))).collect(),
            embedding_dim: self.embedding_dim,
        })
    }

    pub fn arch_flops(&self, arch: &ArchDescriptor) -> Result<u64> {
        Ok(crate::nn::count_flops(&self.resolve(arch)?))
    }

    /// Every architecture in the space, in lexicographic gene order.
    /// Intended for small spaces only.
    pub fn enumerate(&self) -> Result<Vec<ArchDescriptor>> {
        if self.size() > 1e6 {
            return Err(config_err!("space of {} architectures is too large to enumerate", self.size()));
        }
        let choices = self.block_kinds * self.width_choices.len();
        let total = self.size() as usize;
        let mut out = Vec::with_capacity(total);
        for mut code in 0..total {
            let mut layers = vec![LayerChoice { block: 0, width: 0 }; self.num_layers];
            for l in (0..self.num_layers).rev() {
                let g = code % choices;
                code /= choices;
                layers[l] = LayerChoice { block: g / self.width_choices.len(), width: g % self.width_choices.len() };
            }
            out.push(ArchDescriptor { layers });
        }
        Ok(out)
    }

    /// The architecture with the widest setting of `block` in every layer.
    pub fn max_arch(&self, block: usize) -> ArchDescriptor {
        ArchDescriptor { layers: vec![LayerChoice { block, width: self.width_choices.len() - 1 }; self.num_layers] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LayerChoice {
    pub block: usize,
    pub width: usize,
}

/// One block choice and one width choice per layer.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ArchDescriptor {
    pub layers: Vec<LayerChoice>,
}

impl fmt::Display for ArchDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, c) in self.layers.iter().enumerate() {
            if i > 0 {
                f.write_str("-")?;
            }
            write!(f, "{}.{}", c.block, c.width)?;
        }
        Ok(())
    }
}

impl FromStr for ArchDescriptor {
    type Err = Error;

    /// Parses the `block.width-block.width-...` form produced by `Display`.
    fn from_str(s: &str) -> Result<Self> {
        let mut layers = Vec::new();
        for part in s.trim().split('-') {
            let (b, w) = part.split_once('.').ok_or_else(|| arg_err!("bad layer choice {part:?}"))?;
            let block = b.parse().map_err(|_| arg_err!("bad block index {b:?}"))?;
            let width = w.parse().map_err(|_| arg_err!("bad width index {w:?}"))?;
            layers.push(LayerChoice { block, width });
        }
        Ok(ArchDescriptor { layers })
    }
}

/// Each layer's block and width drawn independently and uniformly.
pub fn sample_uniform<R: Rng + ?Sized>(space: &SearchSpace, rng: &mut R) -> ArchDescriptor {
    let layers = (0..space.num_layers)
        .map(|_| {
            let block = rng.random_range(0..space.block_kinds);
            let width = rng.random_range(0..space.width_choices.len());
            LayerChoice { block, width }
        })
        .collect();
    ArchDescriptor { layers }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Supernet {
    space: SearchSpace,
    /// `layers[l][b]`: block of kind `b` in layer `l`, at maximum width.
    layers: Vec<Vec<Block>>,
    head: DenseLayer,
    classifier: Classifier,
}

impl Supernet {
    /// Fresh weights from `seed`; the shared classifier uses the loss
    /// hyperparameters of `recipe`.
    pub fn new(space: SearchSpace, num_classes: usize, recipe: &TrainRecipe) -> Result<Self> {
        space.validate()?;
        let mut rng = stream(recipe.seed, tags::INIT);
        let w = space.max_width();
        let mut layers = Vec::with_capacity(space.num_layers);
        for l in 0..space.num_layers {
            let in_dim = if l == 0 { space.input_dim } else { w };
            layers.push((0..space.block_kinds).map(|b| Block::init(space.kind(b), in_dim, w, &mut rng)).collect());
        }
        let head = DenseLayer::init(w, space.embedding_dim, Activation::Identity, &mut rng);
        let classifier = Classifier::init(num_classes, space.embedding_dim, &mut stream(recipe.seed, tags::CLASSIFIER))?
            .with_hyper(recipe.scale, recipe.margin, recipe.temperature)?;
        Ok(Supernet { space, layers, head, classifier })
    }

    /// Reassembles a supernet from stored parts, checking shapes.
    pub fn from_parts(space: SearchSpace, layers: Vec<Vec<Block>>, head: DenseLayer, classifier: Classifier) -> Result<Self> {
        space.validate()?;
        let w = space.max_width();
        if layers.len() != space.num_layers || head.in_dim() != w || head.out_dim() != space.embedding_dim {
            return Err(crate::error::shape_err!("supernet parts do not match the search space"));
        }
        for (l, row) in layers.iter().enumerate() {
            let in_dim = if l == 0 { space.input_dim } else { w };
            if row.len() != space.block_kinds {
                return Err(crate::error::shape_err!("layer {l} holds {} blocks", row.len()));
            }
            for (b, block) in row.iter().enumerate() {
                if block.kind() != space.kind(b) || block.in_dim() != in_dim || block.out_dim() != w {
                    return Err(crate::error::shape_err!("layer {l} block {b} has the wrong kind or shape"));
                }
            }
        }
        if classifier.dim() != space.embedding_dim {
            return Err(crate::error::shape_err!("classifier width {} for embedding {}", classifier.dim(), space.embedding_dim));
        }
        Ok(Supernet { space, layers, head, classifier })
    }

    pub fn space(&self) -> &SearchSpace {
        &self.space
    }

    pub fn blocks(&self) -> &[Vec<Block>] {
        &self.layers
    }

    pub fn head(&self) -> &DenseLayer {
        &self.head
    }

    pub fn classifier(&self) -> &Classifier {
        &self.classifier
    }

    /// Active-slice views of every block of `arch`, and the head view.
    pub fn views(&self, arch: &ArchDescriptor) -> Result<(Vec<BlockView<'_>>, LayerView<'_>)> {
        self.space.check(arch)?;
        let mut prev = self.space.input_dim;
        let mut views = Vec::with_capacity(arch.layers.len());
        for (l, c) in arch.layers.iter().enumerate() {
            let block = &self.layers[l][c.block];
            let width = self.space.width(c.width);
            let widths = block.kind().layer_widths(width);
            let stored = block.layers();
            let slice = |i: usize, rows: usize, cols: usize| {
                let s = &stored[i];
                LayerView { weight: s.weight().view().prefix(rows, cols), bias: &s.bias()[..rows], activation: s.activation() }
            };
            let first = slice(0, widths[0], prev);
            let second = if widths.len() > 1 { Some(slice(1, widths[1], widths[0])) } else { None };
            views.push(BlockView { kind: block.kind(), first, second });
            prev = width;
        }
        let head = LayerView {
            weight: self.head.weight().view().prefix(self.space.embedding_dim, prev),
            bias: self.head.bias(),
            activation: Activation::Identity,
        };
        Ok((views, head))
    }

    /// Raw features of `arch` evaluated in place on the shared weights.
    pub fn subnet_features(&self, arch: &ArchDescriptor, x: &Tensor2) -> Result<Tensor2> {
        if x.cols() != self.space.input_dim {
            return Err(crate::error::shape_err!("input width {} for a space expecting {}", x.cols(), self.space.input_dim));
        }
        let (views, head) = self.views(arch)?;
        let mut h = x.clone();
        for v in views {
            h = block_forward(v, &h);
        }
        Ok(layer_forward(head, &h))
    }

    /// Unit-norm embeddings of `arch` evaluated in place on the shared weights.
    pub fn subnet_forward(&self, arch: &ArchDescriptor, x: &Tensor2) -> Result<Tensor2> {
        let mut f = self.subnet_features(arch, x)?;
        normalize_rows(&mut f)?;
        Ok(f)
    }

    /// Copies the active slices of `arch` into a self-contained model.
    pub fn extract_standalone(&self, arch: &ArchDescriptor) -> Result<EmbeddingModel> {
        let (views, head) = self.views(arch)?;
        let copy = |v: LayerView<'_>| DenseLayer::new(v.weight.to_tensor(), v.bias.to_vec(), v.activation);
        let mut blocks = Vec::with_capacity(views.len());
        for v in views {
            let mut layers = vec![copy(v.first)?];
            if let Some(s) = v.second {
                layers.push(copy(s)?);
            }
            blocks.push(Block::new(v.kind, layers)?);
        }
        EmbeddingModel::new(blocks, copy(head)?)
    }

    /// Optimizer slot of stored layer `j` of block `b` in layer `l`
    /// (weight slot; bias is the next one).
    fn slot(&self, l: usize, b: usize, j: usize) -> usize {
        let mut s = 0;
        for (li, row) in self.layers.iter().enumerate() {
            for (bi, block) in row.iter().enumerate() {
                if (li, bi) == (l, b) {
                    return s + 2 * j;
                }
                s += 2 * block.layers().len();
            }
        }
        s
    }

    fn head_slot(&self) -> usize {
        self.layers.iter().flatten().map(|b| 2 * b.layers().len()).sum()
    }

    /// Averaged forward over every block at maximum width; returns the
    /// per-layer block traces and the head input.
    fn warmup_forward(&self, x: &Tensor2) -> (Vec<Vec<BlockTrace>>, Tensor2) {
        let inv = 1.0 / self.space.block_kinds as f32;
        let mut h = x.clone();
        let mut traces = Vec::with_capacity(self.layers.len());
        for row in &self.layers {
            let ts: Vec<BlockTrace> = row.iter().map(|b| block_forward_trace(b.view(), &h)).collect();
            let mut sum = ts[0].output.clone();
            for t in &ts[1..] {
                for (s, o) in sum.as_mut_slice().iter_mut().zip(t.output.as_slice()) {
                    *s += *o;
                }
            }
            for v in sum.as_mut_slice() {
                *v *= inv;
            }
            h = sum;
            traces.push(ts);
        }
        (traces, h)
    }

    /// Gradients for every stored block and the head during warm-up.
    fn warmup_backward(&self, traces: &[Vec<BlockTrace>], head_input: &Tensor2, features: &Tensor2, grad_f: &Tensor2) -> (Vec<Vec<Vec<LayerGrad>>>, LayerGrad) {
        let inv = 1.0 / self.space.block_kinds as f32;
        let (head_grad, mut g) = self.head.backward(head_input, features, grad_f);
        let mut grads = vec![Vec::new(); self.layers.len()];
        for l in (0..self.layers.len()).rev() {
            let mut gb = g.clone();
            for v in gb.as_mut_slice() {
                *v *= inv;
            }
            let mut dx: Option<Tensor2> = None;
            let mut per_block = Vec::with_capacity(self.layers[l].len());
            for (block, t) in self.layers[l].iter().zip(&traces[l]) {
                let (lg, d) = block.backward(t, &gb);
                per_block.push(lg);
                dx = Some(match dx {
                    None => d,
                    Some(mut acc) => {
                        for (a, v) in acc.as_mut_slice().iter_mut().zip(d.as_slice()) {
                            *a += *v;
                        }
                        acc
                    }
                });
            }
            grads[l] = per_block;
            g = dx.expect("at least one block kind");
        }
        (grads, head_grad)
    }
}

/// SGD step on the leading `g.rows() x g.cols()` slice of a stored layer.
fn sliced_step(opt: &mut OptimizerState, slot: usize, stored: &mut DenseLayer, g: &LayerGrad, lr: f32) -> Result<()> {
    let (wd, mom) = (opt.config.weight_decay, opt.config.momentum);
    let stride = stored.in_dim();
    let (rows, cols) = (g.weight.rows(), g.weight.cols());
    let (w, b) = stored.params_mut();
    let v = opt.velocity(slot, w.len());
    for r in 0..rows {
        let range = r * stride..r * stride + cols;
        sgd_update(&mut w[range.clone()], g.weight.row(r), &mut v[range], lr, wd, mom)?;
    }
    let vb = opt.velocity(slot + 1, b.len());
    sgd_update(&mut b[..rows], &g.bias, &mut vb[..rows], lr, wd, mom)
}

fn all_finite(grads: &[&LayerGrad], cls: &Tensor2) -> Result<()> {
    let ok = grads.iter().all(|g| g.weight.all_finite() && g.bias.iter().all(|v| v.is_finite())) && cls.all_finite();
    if ok {
        Ok(())
    } else {
        Err(Error::NonFinite("supernet gradient".into()))
    }
}

/// Trains the supernet with the composite loss of `recipe.weights`.
///
/// The first `warmup_epochs` epochs average all block kinds at maximum width
/// in every layer. Afterwards one architecture is sampled uniformly per
/// batch and only its active slices (plus the shared classifier) are updated.
/// The classifier carries over from warm-up unchanged.
pub fn train_supernet(
    supernet: &mut Supernet,
    train: &LabeledDataset,
    recipe: &TrainRecipe,
    warmup_epochs: usize,
    gallery_classifier: Option<&Classifier>,
) -> Result<TrainLog> {
    recipe.validate()?;
    if warmup_epochs > recipe.epochs {
        return Err(config_err!("warm-up of {warmup_epochs} epochs exceeds {} total epochs", recipe.epochs));
    }
    if train.dim() != supernet.space.input_dim {
        return Err(crate::error::shape_err!("data width {} for a space expecting {}", train.dim(), supernet.space.input_dim));
    }
    if train.class_count() != supernet.classifier.num_classes() {
        return Err(config_err!("supernet classifier has {} classes, data {}", supernet.classifier.num_classes(), train.class_count()));
    }
    let guidance = if recipe.weights.lambda2 > 0.0 {
        let g = gallery_classifier.ok_or_else(|| config_err!("a positive second loss weight needs the gallery classifier"))?;
        if !g.is_frozen() {
            return Err(config_err!("gallery classifier must be frozen"));
        }
        if g.num_classes() != train.class_count() || g.dim() != supernet.space.embedding_dim {
            return Err(config_err!("gallery classifier does not match the training label space or embedding width"));
        }
        Guidance::Bct { gallery_classifier: g }
    } else {
        Guidance::None
    };

    let mut opt = OptimizerState::new(recipe.sgd())?;
    let mut arch_rng: StreamRng = stream(recipe.seed, tags::ARCH_SAMPLE);
    let (kind, weights): (LossKind, _) = (recipe.loss, recipe.weights);
    let single_kind = supernet.space.block_kinds == 1;
    let cls_slot = supernet.head_slot() + 2;
    run_epochs(train, recipe, 1.0, guidance, |batch| {
        let sn = &mut *supernet;
        if batch.epoch < warmup_epochs && !single_kind {
            let (traces, head_input) = sn.warmup_forward(&batch.x);
            let features = layer_forward(sn.head.view(), &head_input);
            let (loss, grad_f, grad_cls) = feature_grads(&features, &sn.classifier, kind, weights, &batch.guidance, &batch.labels)?;
            if !loss.is_finite() {
                return Ok(loss);
            }
            let (grads, head_grad) = sn.warmup_backward(&traces, &head_input, &features, &grad_f);
            let flat: Vec<&LayerGrad> = grads.iter().flatten().flatten().chain(core::iter::once(&head_grad)).collect();
            all_finite(&flat, &grad_cls)?;
            for l in 0..grads.len() {
                for b in 0..grads[l].len() {
                    for j in 0..grads[l][b].len() {
                        let slot = sn.slot(l, b, j);
                        sliced_step(&mut opt, slot, &mut sn.layers[l][b].layers_mut()[j], &grads[l][b][j], batch.lr)?;
                    }
                }
            }
            let hs = sn.head_slot();
            sliced_step(&mut opt, hs, &mut sn.head, &head_grad, batch.lr)?;
            opt.step(cls_slot, sn.classifier.prototypes_mut()?.as_mut_slice(), grad_cls.as_slice(), batch.lr)?;
            return Ok(loss);
        }
        // With one block kind the averaged warm-up network is the max-width
        // architecture, so it shares the sampled-path update below.
        let arch = if batch.epoch < warmup_epochs {
            sn.space.max_arch(0)
        } else {
            sample_uniform(&sn.space, &mut arch_rng)
        };
        let model = sn.extract_standalone(&arch)?;
        let g = batch_grads(&model, &sn.classifier, kind, weights, &batch.guidance, &batch.x, &batch.labels)?;
        if !g.loss.is_finite() {
            return Ok(g.loss);
        }
        let flat: Vec<&LayerGrad> = g.model.layers.iter().collect();
        all_finite(&flat, &g.classifier)?;
        let mut it = g.model.layers.iter();
        for (l, c) in arch.layers.iter().enumerate() {
            let n_layers = sn.layers[l][c.block].layers().len();
            for j in 0..n_layers {
                let slot = sn.slot(l, c.block, j);
                let lg = it.next().expect("one gradient per layer");
                sliced_step(&mut opt, slot, &mut sn.layers[l][c.block].layers_mut()[j], lg, batch.lr)?;
            }
        }
        let hs = sn.head_slot();
        sliced_step(&mut opt, hs, &mut sn.head, it.next().expect("head gradient"), batch.lr)?;
        opt.step(cls_slot, sn.classifier.prototypes_mut()?.as_mut_slice(), g.classifier.as_slice(), batch.lr)?;
        Ok(g.loss)
    })
}

/// Descriptor, flops and a short human-readable summary.
pub fn describe(space: &SearchSpace, arch: &ArchDescriptor) -> Result<String> {
    let m = space.resolve(arch)?;
    let parts: Vec<String> = m.blocks.iter().map(|(k, w)| alloc::format!("{}:{w}", k.name())).collect();
    Ok(alloc::format!("{} [{}] {} flops", arch, parts.join(" "), crate::nn::count_flops(&m)))
}
