//! Classification-based embedding losses.
//!
//! All losses take *raw* features and normalize them internally, as they do
//! the classifier prototypes, so returned gradients are with respect to the
//! unnormalized features and prototype rows. Internals run in `f64`.

use alloc::vec;
use alloc::vec::Vec;
use core::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, config_err, shape_err, Error, Result};
use crate::nn::NORM_EPSILON;
use crate::tensor::Tensor2;

/// Default cosine-margin scale.
pub const DEFAULT_SCALE: f32 = 30.0;
/// Default cosine margin.
pub const DEFAULT_MARGIN: f32 = 0.4;
/// Default norm-softmax temperature.
pub const DEFAULT_TEMPERATURE: f32 = 0.5;
/// Default distillation temperature.
pub const DEFAULT_KD_TEMPERATURE: f32 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossKind {
    /// Softmax over `cos / temperature`.
    #[serde(rename = "norm_softmax")]
    NormSoftmax,
    /// Softmax over `scale * (cos - margin * onehot)`.
    #[serde(rename = "cosface")]
    CosFace,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::NormSoftmax => "norm_softmax",
            LossKind::CosFace => "cosface",
        }
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "norm_softmax" => Ok(LossKind::NormSoftmax),
            "cosface" => Ok(LossKind::CosFace),
            other => Err(config_err!("unknown loss kind {other:?}")),
        }
    }
}

/// Per-class prototypes with the loss hyperparameters that go with them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    prototypes: Tensor2,
    pub scale: f32,
    pub margin: f32,
    pub temperature: f32,
    frozen: bool,
}

impl Classifier {
    pub fn new(prototypes: Tensor2, scale: f32, margin: f32, temperature: f32) -> Result<Self> {
        if prototypes.rows() < 2 {
            return Err(config_err!("classifier needs at least 2 classes, got {}", prototypes.rows()));
        }
        if !(scale > 0.0) || !(margin >= 0.0) || !(temperature > 0.0) {
            return Err(config_err!("invalid classifier hyperparameters s={scale} m={margin} t={temperature}"));
        }
        for r in 0..prototypes.rows() {
            if !(crate::tensor::l2_norm(prototypes.row(r)) > NORM_EPSILON) {
                return Err(Error::Degenerate(alloc::format!("prototype row {r} is zero")));
            }
        }
        Ok(Classifier { prototypes, scale, margin, temperature, frozen: false })
    }

    /// Gaussian prototypes with the default hyperparameters.
    pub fn init<R: Rng + ?Sized>(num_classes: usize, dim: usize, rng: &mut R) -> Result<Self> {
        let data = (0..num_classes * dim).map(|_| StandardNormal.sample(rng)).collect();
        Classifier::new(Tensor2::new(num_classes, dim, data)?, DEFAULT_SCALE, DEFAULT_MARGIN, DEFAULT_TEMPERATURE)
    }

    pub fn with_hyper(mut self, scale: f32, margin: f32, temperature: f32) -> Result<Self> {
        if !(scale > 0.0) || !(margin >= 0.0) || !(temperature > 0.0) {
            return Err(config_err!("invalid classifier hyperparameters s={scale} m={margin} t={temperature}"));
        }
        self.scale = scale;
        self.margin = margin;
        self.temperature = temperature;
        Ok(self)
    }

    pub fn num_classes(&self) -> usize {
        self.prototypes.rows()
    }

    pub fn dim(&self) -> usize {
        self.prototypes.cols()
    }

    pub fn prototypes(&self) -> &Tensor2 {
        &self.prototypes
    }

    /// Mutable prototypes; fails once the classifier is frozen.
    pub fn prototypes_mut(&mut self) -> Result<&mut Tensor2> {
        if self.frozen {
            return Err(Error::Frozen("gallery classifier".into()));
        }
        Ok(&mut self.prototypes)
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn frozen(mut self) -> Self {
        self.frozen = true;
        self
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Trainable copy (used when fine-tuning starts from a frozen classifier).
    pub fn thawed(&self) -> Self {
        Classifier { frozen: false, ..self.clone() }
    }

    /// `(logit scale, margin)` used by `kind`.
    pub fn logit_params(&self, kind: LossKind) -> (f64, f64) {
        match kind {
            LossKind::NormSoftmax => (1.0 / self.temperature as f64, 0.0),
            LossKind::CosFace => (self.scale as f64, self.margin as f64),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompositeWeights {
    pub lambda1: f32,
    pub lambda2: f32,
}

impl CompositeWeights {
    pub const BCT: CompositeWeights = CompositeWeights { lambda1: 1.0, lambda2: 1.0 };
    pub const VANILLA: CompositeWeights = CompositeWeights { lambda1: 1.0, lambda2: 0.0 };

    pub fn new(lambda1: f32, lambda2: f32) -> Result<Self> {
        let w = CompositeWeights { lambda1, lambda2 };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0) || !(self.lambda2 >= 0.0) || (self.lambda1 == 0.0 && self.lambda2 == 0.0) {
            return Err(config_err!("loss weights must be non-negative and not both zero: {:?}", self));
        }
        Ok(())
    }
}

/// Loss value with gradients for the features and the classifier prototypes.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub grad_features: Vec<f32>,
    pub grad_prototypes: Tensor2,
}

/// Composite loss; the gallery classifier never receives a gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositeOutput {
    pub loss: f64,
    pub grad_features: Vec<f32>,
    pub grad_query_prototypes: Tensor2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KdOutput {
    pub loss: f64,
    pub grad_student: Vec<f32>,
}

/// Unit-normalized prototypes, prepared once per batch.
pub(crate) struct Prepared {
    normed: Vec<f64>,
    norms: Vec<f64>,
    classes: usize,
    dim: usize,
}

impl Prepared {
    pub(crate) fn new(cls: &Classifier) -> Self {
        let (classes, dim) = (cls.num_classes(), cls.dim());
        let mut normed = vec![0.0; classes * dim];
        let mut norms = vec![0.0; classes];
        for c in 0..classes {
            let row = cls.prototypes.row(c);
            let n = libm::sqrt(row.iter().map(|v| *v as f64 * *v as f64).sum::<f64>());
            norms[c] = n;
            for (o, v) in normed[c * dim..(c + 1) * dim].iter_mut().zip(row) {
                *o = *v as f64 / n;
            }
        }
        Prepared { normed, norms, classes, dim }
    }

    fn row(&self, c: usize) -> &[f64] {
        &self.normed[c * self.dim..(c + 1) * self.dim]
    }
}

/// A normalized feature vector.
pub(crate) struct Unit {
    e: Vec<f64>,
    norm: f64,
}

impl Unit {
    pub(crate) fn new(f: &[f32]) -> Result<Self> {
        let norm = libm::sqrt(f.iter().map(|v| *v as f64 * *v as f64).sum::<f64>());
        if !(norm > NORM_EPSILON as f64) {
            return Err(Error::Degenerate(alloc::format!("feature norm {norm}")));
        }
        Ok(Unit { e: f.iter().map(|v| *v as f64 / norm).collect(), norm })
    }
}

pub(crate) fn cosines(u: &Unit, p: &Prepared) -> Vec<f64> {
    (0..p.classes).map(|c| u.e.iter().zip(p.row(c)).map(|(a, b)| a * b).sum()).collect()
}

/// Propagates `d loss / d cos_j` to the raw features and raw prototypes,
/// accumulating into the output buffers.
pub(crate) fn cos_backward(u: &Unit, p: &Prepared, dcos: &[f64], grad_f: &mut [f32], grad_w: Option<&mut Tensor2>) {
    let k = p.dim;
    let mut ge = vec![0.0f64; k];
    for (c, d) in dcos.iter().enumerate() {
        if *d == 0.0 {
            continue;
        }
        for (g, v) in ge.iter_mut().zip(p.row(c)) {
            *g += d * v;
        }
    }
    let proj: f64 = ge.iter().zip(&u.e).map(|(a, b)| a * b).sum();
    for ((o, g), e) in grad_f.iter_mut().zip(&ge).zip(&u.e) {
        *o += ((g - proj * e) / u.norm) as f32;
    }
    if let Some(gw) = grad_w {
        for (c, d) in dcos.iter().enumerate() {
            if *d == 0.0 {
                continue;
            }
            let pr = p.row(c);
            // d/d p̂ = d * e; project out the radial part.
            let radial: f64 = u.e.iter().zip(pr).map(|(a, b)| a * b).sum::<f64>() * d;
            for ((o, e), ph) in gw.row_mut(c).iter_mut().zip(&u.e).zip(pr) {
                *o += ((d * e - radial * ph) / p.norms[c]) as f32;
            }
        }
    }
}

fn log_softmax(z: &[f64]) -> Vec<f64> {
    let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + libm::log(z.iter().map(|v| libm::exp(v - mx)).sum::<f64>());
    z.iter().map(|v| v - lse).collect()
}

/// Margin softmax on precomputed cosines: returns the loss and `d loss / d cos`.
pub(crate) fn margin_softmax_on_cos(cos: &[f64], label: usize, scale: f64, margin: f64) -> (f64, Vec<f64>) {
    let z: Vec<f64> = cos.iter().enumerate().map(|(j, c)| scale * (c - if j == label { margin } else { 0.0 })).collect();
    let ls = log_softmax(&z);
    let loss = -ls[label];
    let dcos = ls.iter().enumerate().map(|(j, l)| scale * (libm::exp(*l) - if j == label { 1.0 } else { 0.0 })).collect();
    (loss, dcos)
}

fn check_label(cls: &Classifier, label: usize) -> Result<()> {
    if label >= cls.num_classes() {
        return Err(arg_err!("label {label} out of range for {} classes", cls.num_classes()));
    }
    Ok(())
}

fn check_dim(cls: &Classifier, features: &[f32]) -> Result<()> {
    if features.len() != cls.dim() {
        return Err(shape_err!("features of width {} for a {}-d classifier", features.len(), cls.dim()));
    }
    Ok(())
}

/// Weighted single-sample classification loss; gradients are accumulated
/// (scaled by `weight`) into the given buffers.
pub(crate) fn accumulate_classification(
    kind: LossKind,
    u: &Unit,
    cls: &Classifier,
    prepared: &Prepared,
    label: usize,
    weight: f64,
    grad_f: &mut [f32],
    grad_w: Option<&mut Tensor2>,
) -> f64 {
    let (scale, margin) = cls.logit_params(kind);
    let cos = cosines(u, prepared);
    let (loss, mut dcos) = margin_softmax_on_cos(&cos, label, scale, margin);
    for d in dcos.iter_mut() {
        *d *= weight;
    }
    cos_backward(u, prepared, &dcos, grad_f, grad_w);
    loss * weight
}

fn single(kind: LossKind, features: &[f32], cls: &Classifier, label: usize) -> Result<LossOutput> {
    check_label(cls, label)?;
    check_dim(cls, features)?;
    let u = Unit::new(features)?;
    let p = Prepared::new(cls);
    let mut grad_features = vec![0.0; features.len()];
    let mut grad_prototypes = Tensor2::zeros(cls.num_classes(), cls.dim());
    let loss = accumulate_classification(kind, &u, cls, &p, label, 1.0, &mut grad_features, Some(&mut grad_prototypes));
    Ok(LossOutput { loss, grad_features, grad_prototypes })
}

/// `-log softmax(cos / temperature)[label]`.
pub fn norm_softmax_loss(features: &[f32], classifier: &Classifier, label: usize) -> Result<LossOutput> {
    single(LossKind::NormSoftmax, features, classifier, label)
}

/// `-log( e^{s(cos_y - m)} / (e^{s(cos_y - m)} + sum_{j != y} e^{s cos_j}) )`.
pub fn cosine_margin_loss(features: &[f32], classifier: &Classifier, label: usize) -> Result<LossOutput> {
    single(LossKind::CosFace, features, classifier, label)
}

pub fn classification_loss(kind: LossKind, features: &[f32], classifier: &Classifier, label: usize) -> Result<LossOutput> {
    single(kind, features, classifier, label)
}

/// `lambda1 * L(f, query) + lambda2 * L(f, gallery)`; only the features and the
/// query classifier receive gradients.
pub fn bct_composite_loss(
    features: &[f32],
    query: &Classifier,
    gallery: &Classifier,
    label: usize,
    weights: CompositeWeights,
    kind: LossKind,
) -> Result<CompositeOutput> {
    weights.validate()?;
    if query.num_classes() != gallery.num_classes() {
        return Err(config_err!(
            "query classifier has {} classes, gallery classifier {}",
            query.num_classes(),
            gallery.num_classes()
        ));
    }
    check_label(query, label)?;
    check_dim(query, features)?;
    check_dim(gallery, features)?;
    let u = Unit::new(features)?;
    let mut grad_features = vec![0.0; features.len()];
    let mut grad_query_prototypes = Tensor2::zeros(query.num_classes(), query.dim());
    let mut loss = 0.0;
    if weights.lambda1 > 0.0 {
        let pq = Prepared::new(query);
        loss += accumulate_classification(
            kind,
            &u,
            query,
            &pq,
            label,
            weights.lambda1 as f64,
            &mut grad_features,
            Some(&mut grad_query_prototypes),
        );
    }
    if weights.lambda2 > 0.0 {
        let pg = Prepared::new(gallery);
        loss += accumulate_classification(kind, &u, gallery, &pg, label, weights.lambda2 as f64, &mut grad_features, None);
    }
    Ok(CompositeOutput { loss, grad_features, grad_query_prototypes })
}

/// Logits `scale * cos_j` (no margin) of `features` under `classifier`.
pub fn class_logits(features: &[f32], classifier: &Classifier, kind: LossKind) -> Result<Vec<f64>> {
    check_dim(classifier, features)?;
    let u = Unit::new(features)?;
    let (scale, _) = classifier.logit_params(kind);
    Ok(cosines(&u, &Prepared::new(classifier)).into_iter().map(|c| scale * c).collect())
}

/// `T^2 * KL(softmax(teacher / T) || softmax(student / T))` and its gradient
/// with respect to the student logits.
pub fn kd_loss(student: &[f64], teacher: &[f64], temperature: f64) -> Result<KdOutput> {
    if student.len() != teacher.len() {
        return Err(shape_err!("{} student logits vs {} teacher logits", student.len(), teacher.len()));
    }
    if !(temperature > 0.0) {
        return Err(arg_err!("distillation temperature must be positive, got {temperature}"));
    }
    let (loss, g) = kd_terms(student, teacher, temperature);
    Ok(KdOutput { loss, grad_student: g.into_iter().map(|v| v as f32).collect() })
}

pub(crate) fn kd_terms(student: &[f64], teacher: &[f64], t: f64) -> (f64, Vec<f64>) {
    let ls: Vec<f64> = log_softmax(&student.iter().map(|v| v / t).collect::<Vec<_>>());
    let lt: Vec<f64> = log_softmax(&teacher.iter().map(|v| v / t).collect::<Vec<_>>());
    let mut kl = 0.0;
    for (a, b) in lt.iter().zip(&ls) {
        let p = libm::exp(*a);
        if p > 0.0 {
            kl += p * (a - b);
        }
    }
    let grad = ls.iter().zip(&lt).map(|(s, tt)| t * (libm::exp(*s) - libm::exp(*tt))).collect();
    (t * t * kl.max(0.0), grad)
}
