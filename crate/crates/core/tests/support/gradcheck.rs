//! Finite-difference checks of every loss and layer against `oracle`.
#![allow(dead_code)]

use hvs_core::losses::{bct_composite_loss, cosine_margin_loss, kd_loss, norm_softmax_loss, Classifier, CompositeWeights, LossKind};
use hvs_core::nn::{Activation, Block, BlockKind, DenseLayer, EmbeddingModel};
use hvs_core::rng::stream;
use hvs_core::Tensor2;
use rand::Rng;

use super::oracle::{self, numeric_grad, rel_err, widen, RefBlock, RefLayer, RefModel};

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub instances: usize,
    pub max_rel_err: f64,
}

fn tensor<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor2 {
    Tensor2::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
}

fn vector<R: Rng>(n: usize, rng: &mut R) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()
}

fn layer<R: Rng>(in_dim: usize, out_dim: usize, act: Activation, rng: &mut R) -> DenseLayer {
    DenseLayer::new(tensor(out_dim, in_dim, rng), vector(out_dim, rng), act).unwrap()
}

fn block<R: Rng>(kind: BlockKind, in_dim: usize, width: usize, rng: &mut R) -> Block {
    let mut layers = Vec::new();
    let mut prev = in_dim;
    for (w, a) in kind.layer_widths(width).into_iter().zip(kind.activations()) {
        layers.push(layer(prev, w, *a, rng));
        prev = w;
    }
    Block::new(kind, layers).unwrap()
}

fn flatten_grads<'a>(grads: impl IntoIterator<Item = &'a hvs_core::nn::LayerGrad>) -> Vec<f64> {
    grads.into_iter().flat_map(|g| widen(g.weight.as_slice()).into_iter().chain(widen(&g.bias))).collect()
}

fn batch_inputs(x: &Tensor2) -> Vec<Vec<f64>> {
    oracle::rows(x)
}

/// Parameter and input gradients of `probe_sum(f(x))` for one batch.
fn compare<F>(f: F, params: &[f64], x: &Tensor2, probe: &Tensor2, analytic_params: &[f64], analytic_input: &Tensor2) -> f64
where
    F: Fn(&[f64], &[f64]) -> Vec<f64>,
{
    let xs = batch_inputs(x);
    let by_params = numeric_grad(|p| oracle::probe_sum(&xs.iter().map(|xi| f(p, xi)).collect::<Vec<_>>(), probe), params);
    let flat_x: Vec<f64> = xs.iter().flatten().copied().collect();
    let d = x.cols();
    let by_input = numeric_grad(
        |fx| oracle::probe_sum(&fx.chunks(d).map(|xi| f(params, xi)).collect::<Vec<_>>(), probe),
        &flat_x,
    );
    rel_err(analytic_params, &by_params).max(rel_err(&widen(analytic_input.as_slice()), &by_input))
}

fn check_layer(act: Activation, instances: usize, seed: u64) -> f64 {
    let mut rng = stream(seed, 0xd1);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (n, i, o) = (rng.random_range(1..4), rng.random_range(1..7), rng.random_range(1..7));
        let l = layer(i, o, act, &mut rng);
        let x = tensor(n, i, &mut rng);
        let probe = tensor(n, o, &mut rng);
        let y = l.forward(&x).unwrap();
        let (g, dx) = l.backward(&x, &y, &probe);
        let r = RefLayer::of(&l);
        worst = worst.max(compare(|p, xi| r.forward(p, xi), &oracle::layer_params(&l), &x, &probe, &flatten_grads([&g]), &dx));
    }
    worst
}

fn check_block(kind: BlockKind, instances: usize, seed: u64) -> f64 {
    let mut rng = stream(seed, 0xb1 + kind.index() as u64);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (n, i, w) = (rng.random_range(1..4), rng.random_range(1..7), rng.random_range(1..7));
        let b = block(kind, i, w, &mut rng);
        let x = tensor(n, i, &mut rng);
        let probe = tensor(n, b.out_dim(), &mut rng);
        let trace = b.forward_trace(&x);
        let (g, dx) = b.backward(&trace, &probe);
        let r = RefBlock::of(&b);
        worst = worst.max(compare(|p, xi| r.forward(p, xi), &oracle::block_params(&b), &x, &probe, &flatten_grads(&g), &dx));
    }
    worst
}

fn check_model(instances: usize, seed: u64) -> f64 {
    let mut rng = stream(seed, 0xe1);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (n, input, k) = (rng.random_range(1..3), rng.random_range(2..6), rng.random_range(2..5));
        let depth = rng.random_range(1..4);
        let mut blocks = Vec::new();
        let mut prev = input;
        for _ in 0..depth {
            let kind = BlockKind::ALL[rng.random_range(0..4)];
            let w = rng.random_range(1..6);
            blocks.push(block(kind, prev, w, &mut rng));
            prev = w;
        }
        let m = EmbeddingModel::new(blocks, layer(prev, k, Activation::Identity, &mut rng)).unwrap();
        let x = tensor(n, input, &mut rng);
        let probe = tensor(n, k, &mut rng);
        let trace = m.forward_trace(&x).unwrap();
        let (g, dx) = m.backward_with_input_grad(&trace, &probe).unwrap();
        let r = RefModel::of(&m);
        worst = worst.max(compare(|p, xi| r.forward(p, xi), &oracle::model_params(&m), &x, &probe, &flatten_grads(&g.layers), &dx));
    }
    worst
}

struct LossCase {
    features: Vec<f32>,
    prototypes: Tensor2,
    label: usize,
}

fn loss_case<R: Rng>(rng: &mut R) -> LossCase {
    let (c, k) = (rng.random_range(2..8), rng.random_range(2..8));
    LossCase { features: vector(k, rng), prototypes: tensor(c, k, rng), label: rng.random_range(0..c) }
}

fn split_rows(flat: &[f64], cols: usize) -> Vec<Vec<f64>> {
    flat.chunks(cols).map(<[f64]>::to_vec).collect()
}

fn check_classification(kind: LossKind, instances: usize, seed: u64) -> f64 {
    let mut rng = stream(seed, 0xc1 + kind as u64);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let case = loss_case(&mut rng);
        let (s, m, t) = (rng.random_range(2.0f32..30.0), rng.random_range(0.0f32..0.5), rng.random_range(0.3f32..2.0));
        let cls = Classifier::new(case.prototypes.clone(), s, m, t).unwrap();
        let reference = |f: &[f64], p: &[Vec<f64>]| match kind {
            LossKind::NormSoftmax => oracle::norm_softmax(f, p, case.label, t as f64),
            LossKind::CosFace => oracle::cos_face(f, p, case.label, s as f64, m as f64),
        };
        let out = match kind {
            LossKind::NormSoftmax => norm_softmax_loss(&case.features, &cls, case.label).unwrap(),
            LossKind::CosFace => cosine_margin_loss(&case.features, &cls, case.label).unwrap(),
        };
        let k = case.features.len();
        let protos = oracle::rows(&case.prototypes);
        let f64s = widen(&case.features);
        let gf = numeric_grad(|f| reference(f, &protos), &f64s);
        let flat_p: Vec<f64> = protos.iter().flatten().copied().collect();
        let gp = numeric_grad(|p| reference(&f64s, &split_rows(p, k)), &flat_p);
        let value_err = (out.loss - reference(&f64s, &protos)).abs() / reference(&f64s, &protos).abs().max(1.0);
        worst = worst
            .max(rel_err(&widen(&out.grad_features), &gf))
            .max(rel_err(&widen(out.grad_prototypes.as_slice()), &gp))
            .max(value_err);
    }
    worst
}

fn check_composite(instances: usize, seed: u64) -> f64 {
    let mut rng = stream(seed, 0xc7);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let case = loss_case(&mut rng);
        let k = case.features.len();
        let gallery = tensor(case.prototypes.rows(), k, &mut rng);
        let (l1, l2) = (rng.random_range(0.0f32..2.0), rng.random_range(0.0f32..2.0));
        let (s, m) = (rng.random_range(2.0f32..30.0), rng.random_range(0.0f32..0.5));
        let q = Classifier::new(case.prototypes.clone(), s, m, 1.0).unwrap();
        let g = Classifier::new(gallery.clone(), s, m, 1.0).unwrap().frozen();
        let w = CompositeWeights::new(l1, l2).unwrap();
        let out = bct_composite_loss(&case.features, &q, &g, case.label, w, LossKind::CosFace).unwrap();
        let gp_rows = oracle::rows(&gallery);
        let reference = |f: &[f64], p: &[Vec<f64>]| {
            l1 as f64 * oracle::cos_face(f, p, case.label, s as f64, m as f64)
                + l2 as f64 * oracle::cos_face(f, &gp_rows, case.label, s as f64, m as f64)
        };
        let protos = oracle::rows(&case.prototypes);
        let f64s = widen(&case.features);
        let gf = numeric_grad(|f| reference(f, &protos), &f64s);
        let flat_p: Vec<f64> = protos.iter().flatten().copied().collect();
        let gp = numeric_grad(|p| reference(&f64s, &split_rows(p, k)), &flat_p);
        worst = worst.max(rel_err(&widen(&out.grad_features), &gf)).max(rel_err(&widen(out.grad_query_prototypes.as_slice()), &gp));
    }
    worst
}

fn check_distillation(instances: usize, seed: u64) -> f64 {
    let mut rng = stream(seed, 0xc9);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let c = rng.random_range(2..8);
        let student: Vec<f64> = (0..c).map(|_| rng.random_range(-10.0..10.0)).collect();
        let teacher: Vec<f64> = (0..c).map(|_| rng.random_range(-10.0..10.0)).collect();
        let t = rng.random_range(0.5..8.0);
        let out = kd_loss(&student, &teacher, t).unwrap();
        let g = numeric_grad(|s| oracle::distillation(s, &teacher, t), &student);
        worst = worst.max(rel_err(&widen(&out.grad_student), &g));
    }
    worst
}

/// Runs every check on `instances` random cases each.
pub fn run_all(instances: usize, seed: u64) -> Vec<CheckResult> {
    let mut out = vec![
        CheckResult { name: "dense/identity", instances, max_rel_err: check_layer(Activation::Identity, instances, seed) },
        CheckResult { name: "dense/relu", instances, max_rel_err: check_layer(Activation::Relu, instances, seed) },
    ];
    let block_names = ["block/linear", "block/linear_relu", "block/bottleneck", "block/residual"];
    for (kind, name) in BlockKind::ALL.into_iter().zip(block_names) {
        out.push(CheckResult { name, instances, max_rel_err: check_block(kind, instances, seed) });
    }
    out.push(CheckResult { name: "model", instances, max_rel_err: check_model(instances, seed) });
    out.push(CheckResult { name: "loss/norm_softmax", instances, max_rel_err: check_classification(LossKind::NormSoftmax, instances, seed) });
    out.push(CheckResult { name: "loss/cosine_margin", instances, max_rel_err: check_classification(LossKind::CosFace, instances, seed) });
    out.push(CheckResult { name: "loss/composite", instances, max_rel_err: check_composite(instances, seed) });
    out.push(CheckResult { name: "loss/distillation", instances, max_rel_err: check_distillation(instances, seed) });
    out
}
