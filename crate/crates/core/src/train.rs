//! Gallery and query training, and pruning-derived query architectures.
//!
//! Four query-training methods are supported:
//!
//! - `vanilla`: the base classification loss on the query's own classifier.
//! - `kd`: base loss plus a distillation term against the gallery logits.
//! - `finetune`: weights inherited from the pruned gallery, classifier copied
//!   from the gallery classifier, then plain base-loss training.
//! - `bct`: base loss on the query classifier plus the same loss evaluated
//!   against the frozen gallery classifier.
//!
//! Every trainer runs through one epoch loop ([`run_epochs`]) so that the
//! supernet trainer shares shuffling, augmentation and scheduling with plain
//! training.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{jitter, LabeledDataset};
use crate::error::{config_err, shape_err, Error, Result};
use crate::losses::{
    accumulate_classification, cos_backward, cosines, kd_terms, Classifier, CompositeWeights, LossKind, Prepared, Unit,
    DEFAULT_KD_TEMPERATURE, DEFAULT_MARGIN, DEFAULT_SCALE, DEFAULT_TEMPERATURE,
};
use crate::nn::{Block, DenseLayer, EmbeddingModel, ModelArch, ModelGrads};
use crate::optim::{lr_at, LrSchedule, OptimizerState, ScheduleKind, SgdConfig};
use crate::rng::{stream, tags};
use crate::tensor::Tensor2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMethod {
    Vanilla,
    Kd,
    Finetune,
    Bct,
}

impl TrainMethod {
    pub const ALL: [TrainMethod; 4] = [TrainMethod::Vanilla, TrainMethod::Finetune, TrainMethod::Bct, TrainMethod::Kd];

    pub fn name(self) -> &'static str {
        match self {
            TrainMethod::Vanilla => "vanilla",
            TrainMethod::Kd => "kd",
            TrainMethod::Finetune => "finetune",
            TrainMethod::Bct => "bct",
        }
    }
}

impl FromStr for TrainMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" | "scratch" => Ok(TrainMethod::Vanilla),
            "kd" => Ok(TrainMethod::Kd),
            "finetune" => Ok(TrainMethod::Finetune),
            "bct" => Ok(TrainMethod::Bct),
            other => Err(config_err!("unknown training method {other:?}")),
        }
    }
}

/// Everything needed to train one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainRecipe {
    pub method: TrainMethod,
    pub loss: LossKind,
    pub weights: CompositeWeights,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f32,
    pub schedule: ScheduleKind,
    pub weight_decay: f32,
    pub momentum: f32,
    /// Per-epoch gaussian jitter on inputs (re-normalized afterwards).
    pub augment_sigma: f32,
    pub scale: f32,
    pub margin: f32,
    pub temperature: f32,
    pub kd_temperature: f32,
    /// Learning-rate multiplier applied when fine-tuning.
    pub finetune_lr_scale: f32,
    pub seed: u64,
}

impl Default for TrainRecipe {
    fn default() -> Self {
        TrainRecipe {
            method: TrainMethod::Vanilla,
            loss: LossKind::CosFace,
            weights: CompositeWeights::VANILLA,
            epochs: 40,
            batch_size: 64,
            base_lr: 0.1,
            schedule: ScheduleKind::Cosine,
            weight_decay: 5e-4,
            momentum: 0.9,
            augment_sigma: 0.0,
            scale: DEFAULT_SCALE,
            margin: DEFAULT_MARGIN,
            temperature: DEFAULT_TEMPERATURE,
            kd_temperature: DEFAULT_KD_TEMPERATURE,
            finetune_lr_scale: 0.1,
            seed: 0,
        }
    }
}

impl TrainRecipe {
    pub fn with_method(mut self, method: TrainMethod) -> Self {
        self.method = method;
        self.weights = match method {
            TrainMethod::Vanilla | TrainMethod::Finetune => CompositeWeights::VANILLA,
            TrainMethod::Bct | TrainMethod::Kd => CompositeWeights::BCT,
        };
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig { learning_rate: self.base_lr, weight_decay: self.weight_decay, momentum: self.momentum }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.sgd().validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(config_err!("epochs and batch size must be positive"));
        }
        if !(self.kd_temperature > 0.0) || !(self.finetune_lr_scale > 0.0) || !(self.augment_sigma >= 0.0) {
            return Err(config_err!("invalid recipe hyperparameters"));
        }
        Ok(())
    }

    fn fresh_classifier(&self, classes: usize, dim: usize) -> Result<Classifier> {
        Classifier::init(classes, dim, &mut stream(self.seed, tags::CLASSIFIER))?.with_hyper(self.scale, self.margin, self.temperature)
    }
}

/// Extra supervision on top of the query's own classification loss.
#[derive(Debug, Clone, Copy)]
pub enum Guidance<'a> {
    None,
    /// Second classification term against a frozen classifier.
    Bct { gallery_classifier: &'a Classifier },
    /// Distillation from teacher logits `scale * cos(teacher(x), teacher_classifier)`.
    Kd { teacher: &'a EmbeddingModel, teacher_classifier: &'a Classifier, temperature: f64 },
}

/// Per-batch form of [`Guidance`].
pub(crate) enum BatchGuidance<'a> {
    None,
    Bct(&'a Classifier, Prepared),
    Kd(&'a [Vec<f64>], f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchGrads {
    pub loss: f64,
    pub model: ModelGrads,
    pub classifier: Tensor2,
}

/// Mean composite loss over a batch and gradients for the model and the query
/// classifier. `teacher` rows align with the batch rows for distillation.
pub(crate) fn batch_grads(
    model: &EmbeddingModel,
    query: &Classifier,
    kind: LossKind,
    weights: CompositeWeights,
    guidance: &BatchGuidance<'_>,
    x: &Tensor2,
    labels: &[u32],
) -> Result<BatchGrads> {
    let trace = model.forward_trace(x)?;
    let (loss, grad_f, classifier) = feature_grads(&trace.features, query, kind, weights, guidance, labels)?;
    let model_grads = model.backward(&trace, &grad_f)?;
    Ok(BatchGrads { loss, model: model_grads, classifier })
}

/// Mean composite loss over raw batch features, with gradients for the
/// features and the query classifier.
pub(crate) fn feature_grads(
    features: &Tensor2,
    query: &Classifier,
    kind: LossKind,
    weights: CompositeWeights,
    guidance: &BatchGuidance<'_>,
    labels: &[u32],
) -> Result<(f64, Tensor2, Tensor2)> {
    let n = features.rows();
    if labels.len() != n {
        return Err(shape_err!("{} labels for {n} feature rows", labels.len()));
    }
    let pq = Prepared::new(query);
    let mut grad_f = Tensor2::zeros(n, features.cols());
    let mut grad_w = Tensor2::zeros(query.num_classes(), query.dim());
    let inv = 1.0 / n as f64;
    let mut loss = 0.0;
    for s in 0..n {
        let label = labels[s] as usize;
        if label >= query.num_classes() {
            return Err(crate::error::arg_err!("label {label} out of range for {} classes", query.num_classes()));
        }
        // A collapsed feature row has no direction to learn from.
        let Ok(u) = Unit::new(features.row(s)) else { continue };
        let gf = grad_f.row_mut(s);
        if weights.lambda1 > 0.0 {
            loss += accumulate_classification(kind, &u, query, &pq, label, weights.lambda1 as f64 * inv, gf, Some(&mut grad_w));
        }
        if weights.lambda2 > 0.0 {
            match guidance {
                BatchGuidance::None => {}
                BatchGuidance::Bct(g, pg) => {
                    loss += accumulate_classification(kind, &u, g, pg, label, weights.lambda2 as f64 * inv, gf, None);
                }
                BatchGuidance::Kd(teacher, t) => {
                    let (scale, _) = query.logit_params(kind);
                    let student: Vec<f64> = cosines(&u, &pq).into_iter().map(|c| scale * c).collect();
                    let (l, g) = kd_terms(&student, &teacher[s], *t);
                    let w = weights.lambda2 as f64 * inv;
                    loss += l * w;
                    let dcos: Vec<f64> = g.iter().map(|v| v * w * scale).collect();
                    cos_backward(&u, &pq, &dcos, gf, Some(&mut grad_w));
                }
            }
        }
    }
    Ok((loss, grad_f, grad_w))
}

/// Applies SGD to every model layer and (unless frozen) the classifier.
/// Slots: layer `i` weight `2i`, bias `2i+1`, classifier last.
pub(crate) fn apply_grads(model: &mut EmbeddingModel, cls: &mut Classifier, opt: &mut OptimizerState, grads: &BatchGrads, lr: f32) -> Result<()> {
    let mut slot = 0;
    for (layer, g) in model.layers_mut().zip(&grads.model.layers) {
        let (w, b) = layer.params_mut();
        opt.step(slot, w, g.weight.as_slice(), lr)?;
        opt.step(slot + 1, b, &g.bias, lr)?;
        slot += 2;
    }
    let protos = cls.prototypes_mut()?;
    opt.step(slot, protos.as_mut_slice(), grads.classifier.as_slice(), lr)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f32,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.mean_loss)
    }
}

/// One mini-batch handed to a step function by [`run_epochs`].
pub(crate) struct Batch<'a> {
    pub x: Tensor2,
    pub labels: Vec<u32>,
    pub guidance: BatchGuidance<'a>,
    pub epoch: usize,
    pub lr: f32,
}

/// The shared epoch loop: per-epoch jitter, per-epoch shuffle, cosine (or
/// other) schedule over all steps, divergence detection.
pub(crate) fn run_epochs<F>(data: &LabeledDataset, recipe: &TrainRecipe, lr_scale: f32, guidance: Guidance<'_>, mut step: F) -> Result<TrainLog>
where
    F: FnMut(Batch<'_>) -> Result<f64>,
{
    recipe.validate()?;
    if data.is_empty() {
        return Err(config_err!("training set is empty"));
    }
    let n = data.len();
    let per_epoch = n.div_ceil(recipe.batch_size);
    let schedule = LrSchedule::new(recipe.schedule.clone(), recipe.base_lr * lr_scale, recipe.epochs * per_epoch)?;
    let mut shuffle_rng = stream(recipe.seed, tags::SHUFFLE);
    let mut aug_rng = stream(recipe.seed, tags::AUGMENT);
    let mut order: Vec<usize> = (0..n).collect();
    let mut log = TrainLog::default();
    let mut global = 0usize;
    for epoch in 0..recipe.epochs {
        let x_epoch = jitter(data.features(), recipe.augment_sigma, &mut aug_rng)?;
        let teacher_logits: Option<(Vec<Vec<f64>>, f64)> = match guidance {
            Guidance::Kd { teacher, teacher_classifier, temperature } => {
                let f = teacher.features(&x_epoch)?;
                let (scale, _) = teacher_classifier.logit_params(recipe.loss);
                let p = Prepared::new(teacher_classifier);
                let mut rows = Vec::with_capacity(n);
                for r in 0..n {
                    let u = Unit::new(f.row(r))?;
                    rows.push(cosines(&u, &p).into_iter().map(|c| scale * c).collect());
                }
                Some((rows, temperature))
            }
            _ => None,
        };
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        let epoch_lr = lr_at(&schedule, global)?;
        for chunk in order.chunks(recipe.batch_size) {
            let lr = lr_at(&schedule, global)?;
            let x = x_epoch.select_rows(chunk);
            let labels: Vec<u32> = chunk.iter().map(|i| data.labels()[*i]).collect();
            let batch_teacher: Vec<Vec<f64>>;
            let bg = match (&guidance, &teacher_logits) {
                (Guidance::Bct { gallery_classifier }, _) => BatchGuidance::Bct(gallery_classifier, Prepared::new(gallery_classifier)),
                (Guidance::Kd { .. }, Some((rows, t))) => {
                    batch_teacher = chunk.iter().map(|i| rows[*i].clone()).collect();
                    BatchGuidance::Kd(&batch_teacher, *t)
                }
                _ => BatchGuidance::None,
            };
            let loss = step(Batch { x, labels, guidance: bg, epoch, lr })?;
            if !loss.is_finite() {
                return Err(Error::Diverged(alloc::format!("loss {loss} at epoch {epoch}, step {global}, lr {lr}")));
            }
            total += loss * chunk.len() as f64;
            global += 1;
        }
        log.epochs.push(EpochLog { epoch, mean_loss: total / n as f64, lr: epoch_lr });
    }
    Ok(log)
}

/// Trains an already-initialized model and classifier in place.
pub fn fit_model(model: &mut EmbeddingModel, classifier: &mut Classifier, data: &LabeledDataset, recipe: &TrainRecipe, guidance: Guidance<'_>) -> Result<TrainLog> {
    fit_scaled(model, classifier, data, recipe, 1.0, guidance)
}

fn fit_scaled(
    model: &mut EmbeddingModel,
    classifier: &mut Classifier,
    data: &LabeledDataset,
    recipe: &TrainRecipe,
    lr_scale: f32,
    guidance: Guidance<'_>,
) -> Result<TrainLog> {
    if data.dim() != model.input_dim() {
        return Err(shape_err!("data width {} for a model expecting {}", data.dim(), model.input_dim()));
    }
    if classifier.num_classes() != data.class_count() || classifier.dim() != model.embedding_dim() {
        return Err(config_err!(
            "classifier is {}x{}, data has {} classes and embeddings are {}-d",
            classifier.num_classes(),
            classifier.dim(),
            data.class_count(),
            model.embedding_dim()
        ));
    }
    let mut opt = OptimizerState::new(recipe.sgd())?;
    let (kind, weights) = (recipe.loss, recipe.weights);
    run_epochs(data, recipe, lr_scale, guidance, |b| {
        let g = batch_grads(model, classifier, kind, weights, &b.guidance, &b.x, &b.labels)?;
        if g.loss.is_finite() {
            apply_grads(model, classifier, &mut opt, &g, b.lr)?;
        }
        Ok(g.loss)
    })
}

/// A gallery model and its (frozen) classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GalleryModel {
    pub model: EmbeddingModel,
    pub classifier: Classifier,
}

/// Trains the gallery embedding model with plain classification training.
pub fn train_gallery(train: &LabeledDataset, arch: &ModelArch, recipe: &TrainRecipe) -> Result<(GalleryModel, TrainLog)> {
    if recipe.method != TrainMethod::Vanilla {
        return Err(config_err!("gallery training uses the vanilla method, got {}", recipe.method.name()));
    }
    train.check_complete()?;
    let mut model = EmbeddingModel::init(arch, &mut stream(recipe.seed, tags::INIT));
    let mut classifier = recipe.fresh_classifier(train.class_count(), arch.embedding_dim)?;
    let r = TrainRecipe { weights: CompositeWeights::VANILLA, ..recipe.clone() };
    let log = fit_model(&mut model, &mut classifier, train, &r, Guidance::None)?;
    classifier.freeze();
    Ok((GalleryModel { model, classifier }, log))
}

/// Where a query model's architecture and initial weights come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum QuerySource {
    /// Fresh initialization of an arbitrary architecture.
    Fresh { arch: ModelArch },
    /// The gallery pruned by `spec`; weights are inherited only by `finetune`.
    Pruned { spec: PruneSpec },
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryModel {
    pub model: EmbeddingModel,
    pub classifier: Classifier,
    pub log: TrainLog,
}

/// Trains a query model with one of the four methods.
///
/// `calibration` feeds activation-based pruning; it is ignored otherwise.
pub fn train_query(
    train: &LabeledDataset,
    source: &QuerySource,
    recipe: &TrainRecipe,
    gallery: Option<&GalleryModel>,
    calibration: Option<&Tensor2>,
) -> Result<QueryModel> {
    recipe.validate()?;
    train.check_complete()?;
    let need_gallery = || gallery.ok_or_else(|| config_err!("method {} needs a gallery checkpoint", recipe.method.name()));
    let pruned = match source {
        QuerySource::Pruned { spec } => {
            let g = gallery.ok_or_else(|| config_err!("pruned query needs a gallery checkpoint"))?;
            let calib = calibration.cloned().unwrap_or_else(|| train.features().clone());
            Some(prune_model(&g.model, spec, &calib)?)
        }
        QuerySource::Fresh { .. } => None,
    };
    let arch = match (source, &pruned) {
        (QuerySource::Fresh { arch }, _) => arch.clone(),
        (_, Some(p)) => p.model.arch(),
        _ => unreachable!(),
    };
    if arch.input_dim != train.dim() {
        return Err(shape_err!("query input width {} for data of width {}", arch.input_dim, train.dim()));
    }

    if recipe.method == TrainMethod::Finetune {
        let g = need_gallery()?;
        let Some(p) = pruned else {
            return Err(config_err!("finetune needs a query architecture derived from the gallery by pruning"));
        };
        if g.classifier.num_classes() != train.class_count() {
            return Err(config_err!("gallery classifier has {} classes, data {}", g.classifier.num_classes(), train.class_count()));
        }
        let mut model = p.model;
        let mut classifier = g.classifier.thawed();
        let r = TrainRecipe { weights: CompositeWeights::VANILLA, ..recipe.clone() };
        let log = fit_scaled(&mut model, &mut classifier, train, &r, recipe.finetune_lr_scale, Guidance::None)?;
        return Ok(QueryModel { model, classifier, log });
    }

    let mut model = EmbeddingModel::init(&arch, &mut stream(recipe.seed, tags::INIT));
    let mut classifier = recipe.fresh_classifier(train.class_count(), arch.embedding_dim)?;
    let (weights, guidance) = match recipe.method {
        TrainMethod::Vanilla => (CompositeWeights { lambda2: 0.0, ..recipe.weights }, Guidance::None),
        TrainMethod::Bct => {
            let g = need_gallery()?;
            if g.classifier.num_classes() != train.class_count() || g.classifier.dim() != arch.embedding_dim {
                return Err(config_err!("gallery classifier does not match the query label space or embedding width"));
            }
            (recipe.weights, Guidance::Bct { gallery_classifier: &g.classifier })
        }
        TrainMethod::Kd => {
            let g = need_gallery()?;
            if g.classifier.num_classes() != train.class_count() {
                return Err(config_err!("gallery classifier does not match the query label space"));
            }
            (
                recipe.weights,
                Guidance::Kd { teacher: &g.model, teacher_classifier: &g.classifier, temperature: recipe.kd_temperature as f64 },
            )
        }
        TrainMethod::Finetune => unreachable!(),
    };
    let weights = if weights.lambda1 == 0.0 && weights.lambda2 == 0.0 { CompositeWeights::VANILLA } else { weights };
    let r = TrainRecipe { weights, ..recipe.clone() };
    let log = fit_model(&mut model, &mut classifier, train, &r, guidance)?;
    Ok(QueryModel { model, classifier, log })
}

/// Classification accuracy of `classifier` over `model` embeddings.
pub fn train_accuracy(model: &EmbeddingModel, classifier: &Classifier, data: &LabeledDataset) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let f = model.features(data.features())?;
    let p = Prepared::new(classifier);
    let mut hits = 0;
    for r in 0..data.len() {
        let cos = cosines(&Unit::new(f.row(r))?, &p);
        let mut best = 0;
        for (j, c) in cos.iter().enumerate() {
            if *c > cos[best] {
                best = j;
            }
        }
        if best == data.labels()[r] as usize {
            hits += 1;
        }
    }
    Ok(hits as f64 / data.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneMethod {
    /// Keep the units whose outgoing weights have the largest L1 norm.
    Magnitude,
    /// Keep the units with the largest mean absolute activation on a
    /// calibration batch.
    Activation,
}

impl PruneMethod {
    pub fn name(self) -> &'static str {
        match self {
            PruneMethod::Magnitude => "magnitude",
            PruneMethod::Activation => "activation",
        }
    }
}

impl FromStr for PruneMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "magnitude" => Ok(PruneMethod::Magnitude),
            "activation" | "channel" => Ok(PruneMethod::Activation),
            other => Err(config_err!("unknown prune method {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneSpec {
    pub method: PruneMethod,
    pub fraction: f64,
}

impl PruneSpec {
    pub fn label(&self) -> String {
        alloc::format!("{}{}", self.method.name(), libm::round(self.fraction * 100.0) as u32)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrunedModel {
    pub model: EmbeddingModel,
    /// Kept unit indices of every hidden block, ascending.
    pub kept: Vec<Vec<usize>>,
}

/// Units kept out of `n` when pruning `fraction` of them.
pub fn kept_units(n: usize, fraction: f64) -> usize {
    n - libm::floor(fraction * n as f64 + 1e-9) as usize
}

/// Indices of the `keep` highest scores (ties to the lower index), ascending.
pub fn top_units(scores: &[f64], keep: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|a, b| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b)));
    let mut kept = order[..keep].to_vec();
    kept.sort_unstable();
    kept
}

/// Prunes every hidden block of a plain MLP model; the embedding head keeps
/// its output width.
pub fn prune_model(model: &EmbeddingModel, spec: &PruneSpec, calibration: &Tensor2) -> Result<PrunedModel> {
    if !(spec.fraction >= 0.0 && spec.fraction < 1.0) {
        return Err(config_err!("prune fraction must lie in [0, 1), got {}", spec.fraction));
    }
    let blocks = model.blocks();
    if let Some(b) = blocks.iter().find(|b| b.layers().len() != 1) {
        return Err(config_err!("{} blocks are not prunable", b.kind().name()));
    }
    let layer = |i: usize| -> &DenseLayer { &blocks[i].layers()[0] };
    let next = |i: usize| -> &DenseLayer { if i + 1 < blocks.len() { layer(i + 1) } else { model.head() } };

    let activations = if spec.method == PruneMethod::Activation {
        if calibration.rows() == 0 || calibration.cols() != model.input_dim() {
            return Err(config_err!("activation pruning needs a non-empty calibration batch of width {}", model.input_dim()));
        }
        let trace = model.forward_trace(calibration)?;
        trace.blocks.into_iter().map(|t| t.output).collect()
    } else {
        Vec::new()
    };

    let mut kept = Vec::with_capacity(blocks.len());
    for i in 0..blocks.len() {
        let width = layer(i).out_dim();
        let keep = kept_units(width, spec.fraction);
        if keep == 0 {
            return Err(config_err!("pruning {} of {width} units leaves nothing", spec.fraction));
        }
        let scores: Vec<f64> = match spec.method {
            PruneMethod::Magnitude => {
                let w = next(i).weight();
                (0..width).map(|j| (0..w.rows()).map(|o| w.get(o, j).abs() as f64).sum()).collect()
            }
            PruneMethod::Activation => {
                let a: &Tensor2 = &activations[i];
                (0..width).map(|j| (0..a.rows()).map(|s| a.get(s, j).abs() as f64).sum::<f64>() / a.rows() as f64).collect()
            }
        };
        kept.push(top_units(&scores, keep));
    }

    let slice = |l: &DenseLayer, rows: Option<&[usize]>, cols: Option<&[usize]>| -> Result<DenseLayer> {
        let all_r: Vec<usize> = (0..l.out_dim()).collect();
        let all_c: Vec<usize> = (0..l.in_dim()).collect();
        let rows = rows.unwrap_or(&all_r);
        let cols = cols.unwrap_or(&all_c);
        let mut data = Vec::with_capacity(rows.len() * cols.len());
        for r in rows {
            data.extend(cols.iter().map(|c| l.weight().get(*r, *c)));
        }
        let bias = rows.iter().map(|r| l.bias()[*r]).collect();
        DenseLayer::new(Tensor2::new(rows.len(), cols.len(), data)?, bias, l.activation())
    };
    let mut new_blocks = Vec::with_capacity(blocks.len());
    for i in 0..blocks.len() {
        let cols = if i == 0 { None } else { Some(kept[i - 1].as_slice()) };
        let l = slice(layer(i), Some(&kept[i]), cols)?;
        new_blocks.push(Block::new(blocks[i].kind(), vec![l])?);
    }
    let head = slice(model.head(), None, kept.last().map(|k| k.as_slice()))?;
    Ok(PrunedModel { model: EmbeddingModel::new(new_blocks, head)?, kept })
}
