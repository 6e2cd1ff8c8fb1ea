//! Embedding indexes, retrieval and verification metrics, the compatibility
//! rule and the amortized embedding cost model.
//!
//! Similarity is the dot product of unit embeddings. Rankings break ties by
//! the lower gallery row index. Open-set thresholds follow one rule for both
//! TPIR@FPIR and TAR@FAR: with `N` negative scores, at most
//! `floor(target * N + 1e-9)` of them may reach the threshold, and the
//! threshold is the smallest observed score satisfying that. Equivalently, a
//! positive is accepted iff its score is strictly above the
//! `(allowed + 1)`-th largest negative score.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{arg_err, shape_err, Error, Result};
use crate::nn::{EmbeddingModel, NORM_EPSILON};
use crate::tensor::{dot, l2_norm, Tensor2};

/// Tolerance on the unit-norm invariant of index rows.
pub const UNIT_TOLERANCE: f32 = 1e-4;

/// Unit-norm embeddings with identity labels and the producing model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingIndex {
    embeddings: Tensor2,
    labels: Vec<u32>,
    producer: u64,
}

impl EmbeddingIndex {
    pub fn new(embeddings: Tensor2, labels: Vec<u32>, producer: u64) -> Result<Self> {
        if embeddings.rows() != labels.len() {
            return Err(shape_err!("{} embeddings for {} labels", embeddings.rows(), labels.len()));
        }
        for r in 0..embeddings.rows() {
            let n = l2_norm(embeddings.row(r));
            if (n - 1.0).abs() > UNIT_TOLERANCE {
                return Err(Error::Degenerate(alloc::format!("index row {r} has norm {n}")));
            }
        }
        Ok(EmbeddingIndex { embeddings, labels, producer })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn embeddings(&self) -> &Tensor2 {
        &self.embeddings
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn producer(&self) -> u64 {
        self.producer
    }

    #[inline]
    fn sim(&self, probe: &[f32], g: usize) -> f32 {
        dot(probe, self.embeddings.row(g))
    }
}

/// One unit-norm embedding per sample, order preserved.
pub fn embed_set(model: &EmbeddingModel, data: &LabeledDataset) -> Result<EmbeddingIndex> {
    if data.dim() != model.input_dim() {
        return Err(shape_err!("data width {} for a model expecting {}", data.dim(), model.input_dim()));
    }
    let e = if data.is_empty() { Tensor2::zeros(0, model.embedding_dim()) } else { model.embed(data.features())? };
    EmbeddingIndex::new(e, data.labels().to_vec(), model.fingerprint())
}

fn check_dims(a: &EmbeddingIndex, b: &EmbeddingIndex) -> Result<()> {
    if a.dim() != b.dim() && !a.is_empty() && !b.is_empty() {
        return Err(shape_err!("probe dim {} vs gallery dim {}", a.dim(), b.dim()));
    }
    Ok(())
}

/// Best gallery row for a probe: `(score, row)`, ties to the lower row.
fn best_match(probe: &[f32], gallery: &EmbeddingIndex) -> (f32, usize) {
    let mut best = (f32::NEG_INFINITY, 0usize);
    for g in 0..gallery.len() {
        let s = gallery.sim(probe, g);
        if s > best.0 {
            best = (s, g);
        }
    }
    best
}

/// Fraction of probes whose `k` nearest gallery rows contain the probe's label.
/// `k` larger than the gallery is clamped to the gallery size.
pub fn topk_accuracy(probe: &EmbeddingIndex, gallery: &EmbeddingIndex, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(arg_err!("k must be at least 1"));
    }
    if gallery.is_empty() {
        return Err(arg_err!("gallery is empty"));
    }
    check_dims(probe, gallery)?;
    if probe.is_empty() {
        return Ok(0.0);
    }
    let k = k.min(gallery.len());
    let mut hits = 0usize;
    for p in 0..probe.len() {
        let q = probe.embeddings.row(p);
        let label = probe.labels[p];
        // Best-ranked row carrying the probe's label.
        let mut target: Option<(f32, usize)> = None;
        for g in 0..gallery.len() {
            if gallery.labels[g] == label {
                let s = gallery.sim(q, g);
                if target.is_none_or(|(ts, _)| s > ts) {
                    target = Some((s, g));
                }
            }
        }
        let Some((ts, ti)) = target else { continue };
        let mut ahead = 0usize;
        for g in 0..gallery.len() {
            let s = gallery.sim(q, g);
            if s > ts || (s == ts && g < ti) {
                ahead += 1;
                if ahead >= k {
                    break;
                }
            }
        }
        if ahead < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / probe.len() as f64)
}

/// Number of negatives allowed at or above the threshold.
pub fn allowed_negatives(target: f64, n: usize) -> usize {
    libm::floor(target * n as f64 + 1e-9) as usize
}

/// Scores strictly above this value are accepted; `None` disables the
/// threshold (every score is accepted).
pub fn acceptance_floor(negatives: &[f32], target: f64) -> Option<f32> {
    let allowed = allowed_negatives(target, negatives.len());
    if allowed >= negatives.len() {
        return None;
    }
    let mut sorted = negatives.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    Some(sorted[allowed])
}

fn check_target(t: f64, what: &str) -> Result<()> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(arg_err!("{what} must lie in (0, 1], got {t}"));
    }
    Ok(())
}

/// Open-set identification rate: fraction of mated probes whose best gallery
/// score clears the threshold set on non-mated probes *and* whose rank-1
/// gallery identity is correct.
pub fn tpir_at_fpir(mated: &EmbeddingIndex, nonmated: &EmbeddingIndex, gallery: &EmbeddingIndex, fpir_target: f64) -> Result<f64> {
    check_target(fpir_target, "FPIR target")?;
    if mated.is_empty() || nonmated.is_empty() || gallery.is_empty() {
        return Err(arg_err!("TPIR needs non-empty mated, non-mated and gallery sets"));
    }
    check_dims(mated, gallery)?;
    check_dims(nonmated, gallery)?;
    let neg: Vec<f32> = (0..nonmated.len()).map(|p| best_match(nonmated.embeddings.row(p), gallery).0).collect();
    let floor = acceptance_floor(&neg, fpir_target);
    let mut hits = 0usize;
    for p in 0..mated.len() {
        let (s, g) = best_match(mated.embeddings.row(p), gallery);
        let clears = floor.is_none_or(|f| s > f);
        if clears && gallery.labels[g] == mated.labels[p] {
            hits += 1;
        }
    }
    Ok(hits as f64 / mated.len() as f64)
}

/// True-accept rate at the threshold set on impostor scores.
pub fn tar_at_far(genuine: &[f32], impostor: &[f32], far_target: f64) -> Result<f64> {
    check_target(far_target, "FAR target")?;
    if genuine.is_empty() || impostor.is_empty() {
        return Err(arg_err!("TAR needs non-empty genuine and impostor score lists"));
    }
    let floor = acceptance_floor(impostor, far_target);
    let accepted = genuine.iter().filter(|s| floor.is_none_or(|f| **s > f)).count();
    Ok(accepted as f64 / genuine.len() as f64)
}

/// All probe/gallery pair scores split into genuine (same label) and impostor.
pub fn verification_scores(probe: &EmbeddingIndex, gallery: &EmbeddingIndex) -> Result<(Vec<f32>, Vec<f32>)> {
    check_dims(probe, gallery)?;
    let (mut gen, mut imp) = (Vec::new(), Vec::new());
    for p in 0..probe.len() {
        let q = probe.embeddings.row(p);
        for g in 0..gallery.len() {
            let s = gallery.sim(q, g);
            if probe.labels[p] == gallery.labels[g] {
                gen.push(s);
            } else {
                imp.push(s);
            }
        }
    }
    Ok((gen, imp))
}

/// The compatibility rule: heterogeneous accuracy strictly above the query
/// model's homogeneous accuracy.
pub fn check_compatibility(m_qg: f64, m_qq: f64) -> bool {
    m_qg > m_qq
}

/// Per-image embedding cost averaged over indexing and querying at `ratio`
/// queries per gallery image: `(F_g + r F_q) / (1 + r)`.
pub fn amortized_cost(gallery_flops: f64, query_flops: f64, ratio: f64) -> Result<f64> {
    if !(ratio >= 0.0) {
        return Err(arg_err!("query/gallery ratio must be non-negative, got {ratio}"));
    }
    if ratio.is_infinite() {
        return Ok(query_flops);
    }
    Ok((gallery_flops + ratio * query_flops) / (1.0 + ratio))
}

/// Retrieval metric used for `M(probe model, gallery model)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Metric {
    TopK { k: usize },
    Tpir { fpir: f64 },
    Tar { far: f64 },
}

impl Metric {
    pub fn name(&self) -> String {
        match self {
            Metric::TopK { k } => alloc::format!("top{k}"),
            Metric::Tpir { fpir } => alloc::format!("tpir@{fpir}"),
            Metric::Tar { far } => alloc::format!("tar@{far}"),
        }
    }

    /// Parses `top<k>`, `tpir` or `tar` with the given target.
    pub fn parse(name: &str, target: f64) -> Result<Metric> {
        match name {
            "tpir" => Ok(Metric::Tpir { fpir: target }),
            "tar" => Ok(Metric::Tar { far: target }),
            n if n.starts_with("top") => n[3..]
                .parse()
                .ok()
                .filter(|k| *k > 0)
                .map(|k| Metric::TopK { k })
                .ok_or_else(|| arg_err!("bad top-k metric {n:?}")),
            other => Err(arg_err!("unknown metric {other:?}")),
        }
    }

    /// Evaluates the metric. `nonmated` is required for TPIR only.
    pub fn evaluate(&self, probes: &EmbeddingIndex, nonmated: Option<&EmbeddingIndex>, gallery: &EmbeddingIndex) -> Result<f64> {
        match *self {
            Metric::TopK { k } => topk_accuracy(probes, gallery, k),
            Metric::Tpir { fpir } => {
                let nm = nonmated.ok_or_else(|| arg_err!("TPIR needs non-mated probes"))?;
                tpir_at_fpir(probes, nm, gallery, fpir)
            }
            Metric::Tar { far } => {
                let (g, i) = verification_scores(probes, gallery)?;
                tar_at_far(&g, &i, far)
            }
        }
    }
}

/// Homogeneous and heterogeneous accuracies of one (query, gallery) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric_name: String,
    pub m_qq: f64,
    pub m_qg: f64,
    pub m_gg: f64,
    pub compatible: bool,
    pub query_flops: u64,
    pub gallery_flops: u64,
}

/// Probe/gallery material for one evaluation.
#[derive(Debug, Clone, Copy)]
pub struct EvalSets<'a> {
    pub probes: &'a LabeledDataset,
    pub nonmated: Option<&'a LabeledDataset>,
    pub gallery: &'a LabeledDataset,
}

/// `M(probe_model, gallery_model)`: probes embedded by `probe_model`, gallery
/// rows (and nothing else) by `gallery_model`.
pub fn cross_metric(metric: &Metric, probe_model: &EmbeddingModel, gallery_model: &EmbeddingModel, sets: EvalSets<'_>) -> Result<f64> {
    let probes = embed_set(probe_model, sets.probes)?;
    let nonmated = sets.nonmated.map(|d| embed_set(probe_model, d)).transpose()?;
    let gallery = embed_set(gallery_model, sets.gallery)?;
    metric.evaluate(&probes, nonmated.as_ref(), &gallery)
}

/// Full report: `M(q,q)`, `M(q,g)`, `M(g,g)` and the compatibility verdict.
pub fn evaluate_pair(metric: &Metric, query: &EmbeddingModel, gallery: &EmbeddingModel, sets: EvalSets<'_>) -> Result<EvalReport> {
    let m_qq = cross_metric(metric, query, query, sets)?;
    let m_qg = cross_metric(metric, query, gallery, sets)?;
    let m_gg = cross_metric(metric, gallery, gallery, sets)?;
    Ok(EvalReport {
        metric_name: metric.name(),
        m_qq,
        m_qg,
        m_gg,
        compatible: check_compatibility(m_qg, m_qq),
        query_flops: query.flops(),
        gallery_flops: gallery.flops(),
    })
}

/// Builds an index from raw rows, normalizing each (test and tooling helper).
pub fn index_from_rows(rows: &Tensor2, labels: Vec<u32>, producer: u64) -> Result<EmbeddingIndex> {
    let mut e = rows.clone();
    for r in 0..e.rows() {
        if !(l2_norm(e.row(r)) > NORM_EPSILON) {
            return Err(Error::Degenerate(alloc::format!("row {r} is zero")));
        }
    }
    crate::nn::normalize_rows(&mut e)?;
    EmbeddingIndex::new(e, labels, producer)
}
