//! Straight-line f64 reference implementations and central differences.
//!
//! Nothing here calls into the library's math; tests compare the library's
//! analytic gradients against numeric derivatives of these references.
#![allow(dead_code)]

use hvs_core::nn::{Activation, Block, BlockKind, DenseLayer, EmbeddingModel};
use hvs_core::Tensor2;

pub const STEP: f64 = 1e-5;

/// Central-difference gradient of `f` at `x`.
pub fn numeric_grad(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + STEP;
            let up = f(&p);
            p[i] = orig - STEP;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * STEP)
        })
        .collect()
}

/// Central-difference noise floor. Below this norm a saturated loss has no
/// measurable gradient and the comparison becomes absolute.
const NORM_FLOOR: f64 = 1e-6;

/// `||a - b|| / max(||a||, ||b||, NORM_FLOOR)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(NORM_FLOOR)
}

pub fn widen(v: &[f32]) -> Vec<f64> {
    v.iter().map(|x| *x as f64).collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn neg_log_softmax(z: &[f64], label: usize) -> f64 {
    let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + z.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
    lse - z[label]
}

/// Margin softmax over cosines: logits `scale * (cos_j - margin [j == label])`.
pub fn margin_softmax(features: &[f64], prototypes: &[Vec<f64>], label: usize, scale: f64, margin: f64) -> f64 {
    let z: Vec<f64> = prototypes
        .iter()
        .enumerate()
        .map(|(j, p)| scale * (cosine(features, p) - if j == label { margin } else { 0.0 }))
        .collect();
    neg_log_softmax(&z, label)
}

pub fn norm_softmax(features: &[f64], prototypes: &[Vec<f64>], label: usize, temperature: f64) -> f64 {
    margin_softmax(features, prototypes, label, 1.0 / temperature, 0.0)
}

pub fn cos_face(features: &[f64], prototypes: &[Vec<f64>], label: usize, scale: f64, margin: f64) -> f64 {
    margin_softmax(features, prototypes, label, scale, margin)
}

/// `T^2 KL(p_teacher || p_student)` with softened softmaxes.
pub fn distillation(student: &[f64], teacher: &[f64], t: f64) -> f64 {
    let soft = |z: &[f64]| {
        let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| ((v - mx) / t).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect::<Vec<f64>>()
    };
    let (ps, pt) = (soft(student), soft(teacher));
    t * t * pt.iter().zip(&ps).filter(|(p, _)| **p > 0.0).map(|(p, q)| p * (p / q).ln()).sum::<f64>()
}

/// Plain f64 copy of one dense layer.
#[derive(Clone, Debug)]
pub struct RefLayer {
    pub rows: usize,
    pub cols: usize,
    pub relu: bool,
}

impl RefLayer {
    pub fn of(l: &DenseLayer) -> Self {
        RefLayer { rows: l.out_dim(), cols: l.in_dim(), relu: l.activation() == Activation::Relu }
    }

    pub fn param_count(&self) -> usize {
        self.rows * self.cols + self.rows
    }

    /// `params` holds the row-major weight followed by the bias.
    pub fn forward(&self, params: &[f64], x: &[f64]) -> Vec<f64> {
        let (w, b) = params.split_at(self.rows * self.cols);
        (0..self.rows)
            .map(|o| {
                let z: f64 = (0..self.cols).map(|i| w[o * self.cols + i] * x[i]).sum::<f64>() + b[o];
                if self.relu {
                    z.max(0.0)
                } else {
                    z
                }
            })
            .collect()
    }
}

pub fn layer_params(l: &DenseLayer) -> Vec<f64> {
    let mut p = widen(l.weight().as_slice());
    p.extend(widen(l.bias()));
    p
}

/// Reference block: its layers plus the shortcut rule of its kind.
#[derive(Clone, Debug)]
pub struct RefBlock {
    pub kind: BlockKind,
    pub layers: Vec<RefLayer>,
}

impl RefBlock {
    pub fn of(b: &Block) -> Self {
        RefBlock { kind: b.kind(), layers: b.layers().iter().map(RefLayer::of).collect() }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(RefLayer::param_count).sum()
    }

    pub fn forward(&self, params: &[f64], x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        let mut at = 0;
        for l in &self.layers {
            h = l.forward(&params[at..at + l.param_count()], &h);
            at += l.param_count();
        }
        if self.kind == BlockKind::Residual {
            for (o, xi) in h.iter_mut().zip(x) {
                *o += xi;
            }
        }
        h
    }
}

pub fn block_params(b: &Block) -> Vec<f64> {
    b.layers().iter().flat_map(layer_params).collect()
}

/// Reference model: blocks then the head, parameters in layer order.
#[derive(Clone, Debug)]
pub struct RefModel {
    pub blocks: Vec<RefBlock>,
    pub head: RefLayer,
}

impl RefModel {
    pub fn of(m: &EmbeddingModel) -> Self {
        RefModel { blocks: m.blocks().iter().map(RefBlock::of).collect(), head: RefLayer::of(m.head()) }
    }

    pub fn forward(&self, params: &[f64], x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        let mut at = 0;
        for b in &self.blocks {
            h = b.forward(&params[at..at + b.param_count()], &h);
            at += b.param_count();
        }
        self.head.forward(&params[at..], &h)
    }
}

pub fn model_params(m: &EmbeddingModel) -> Vec<f64> {
    m.layers().flat_map(layer_params).collect()
}

/// `sum_ij c_ij * f(x_i)_j`, a linear probe on a batch of outputs.
pub fn probe_sum(outputs: &[Vec<f64>], probe: &Tensor2) -> f64 {
    outputs.iter().enumerate().map(|(i, o)| o.iter().zip(probe.row(i)).map(|(a, c)| a * *c as f64).sum::<f64>()).sum()
}

pub fn rows(t: &Tensor2) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| widen(t.row(r))).collect()
}
