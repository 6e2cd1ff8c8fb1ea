//! Labeled embedding-training data: a synthetic identity-cluster generator and
//! identity-disjoint open-set splits.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, config_err, shape_err, Error, Result};
use crate::nn::normalize_rows;
use crate::rng::{stream, tags};
use crate::tensor::Tensor2;

/// Feature vectors with class labels in `[0, class_count)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    features: Tensor2,
    labels: Vec<u32>,
    class_count: usize,
}

impl LabeledDataset {
    pub fn new(features: Tensor2, labels: Vec<u32>, class_count: usize) -> Result<Self> {
        if labels.len() != features.rows() {
            return Err(shape_err!("{} labels for {} samples", labels.len(), features.rows()));
        }
        if let Some(l) = labels.iter().find(|l| **l as usize >= class_count) {
            return Err(arg_err!("label {l} out of range for {class_count} classes"));
        }
        Ok(LabeledDataset { features, labels, class_count })
    }

    pub fn empty(dim: usize, class_count: usize) -> Self {
        LabeledDataset { features: Tensor2::zeros(0, dim), labels: Vec::new(), class_count }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn features(&self) -> &Tensor2 {
        &self.features
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    /// Classes with no samples.
    pub fn missing_classes(&self) -> Vec<u32> {
        let mut seen = vec![false; self.class_count];
        for l in &self.labels {
            seen[*l as usize] = true;
        }
        (0..self.class_count as u32).filter(|c| !seen[*c as usize]).collect()
    }

    /// Errors unless every class has at least one sample.
    pub fn check_complete(&self) -> Result<()> {
        match self.missing_classes().first() {
            None => Ok(()),
            Some(c) => Err(config_err!("class {c} has no samples")),
        }
    }

    pub fn subset(&self, idx: &[usize]) -> LabeledDataset {
        LabeledDataset {
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|i| self.labels[*i]).collect(),
            class_count: self.class_count,
        }
    }

    /// Row indices grouped by label, each group in ascending order.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut by = vec![Vec::new(); self.class_count];
        for (i, l) in self.labels.iter().enumerate() {
            by[*l as usize].push(i);
        }
        by
    }
}

/// Draws `num_identities` unit prototypes, then `samples_per_identity` samples
/// per identity as `normalize(prototype + noise_sigma * N(0, I))`. Rows are
/// identity-major.
pub fn generate_synthetic(
    num_identities: usize,
    samples_per_identity: usize,
    input_dim: usize,
    noise_sigma: f32,
    seed: u64,
) -> Result<LabeledDataset> {
    if num_identities < 2 || samples_per_identity < 1 || input_dim < 2 {
        return Err(arg_err!(
            "need >= 2 identities, >= 1 sample each and dim >= 2 (got {num_identities}, {samples_per_identity}, {input_dim})"
        ));
    }
    if !(noise_sigma >= 0.0) || !noise_sigma.is_finite() {
        return Err(arg_err!("noise sigma must be a non-negative number, got {noise_sigma}"));
    }
    let mut rng = stream(seed, tags::DATA);
    let mut protos = Tensor2::new(
        num_identities,
        input_dim,
        (0..num_identities * input_dim).map(|_| StandardNormal.sample(&mut rng)).collect(),
    )?;
    normalize_rows(&mut protos)?;

    let n = num_identities * samples_per_identity;
    let mut data = Vec::with_capacity(n * input_dim);
    let mut labels = Vec::with_capacity(n);
    for id in 0..num_identities {
        for _ in 0..samples_per_identity {
            for p in protos.row(id) {
                let g: f32 = StandardNormal.sample(&mut rng);
                data.push(p + noise_sigma * g);
            }
            labels.push(id as u32);
        }
    }
    let mut features = Tensor2::new(n, input_dim, data)?;
    if noise_sigma > 0.0 {
        normalize_rows(&mut features)?;
    }
    LabeledDataset::new(features, labels, num_identities)
}

/// Gaussian jitter followed by re-normalization; the training-time stand-in for
/// image augmentation.
pub fn jitter<R: Rng + ?Sized>(features: &Tensor2, sigma: f32, rng: &mut R) -> Result<Tensor2> {
    if sigma == 0.0 {
        return Ok(features.clone());
    }
    let data = features
        .as_slice()
        .iter()
        .map(|v| {
            let g: f32 = StandardNormal.sample(rng);
            v + sigma * g
        })
        .collect();
    let mut t = Tensor2::new(features.rows(), features.cols(), data)?;
    normalize_rows(&mut t)?;
    Ok(t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    /// Identities held out entirely for testing.
    pub test_identities: usize,
    /// Fraction of each training identity's samples used for training.
    pub train_frac: f64,
    /// Fraction of each training identity's samples held out for validation.
    pub val_frac: f64,
    /// Samples per mated test identity enrolled in the gallery.
    pub gallery_per_id: usize,
    /// Fraction of test identities withheld from the gallery.
    pub nonmated_id_frac: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { test_identities: 20, train_frac: 0.95, val_frac: 0.05, gallery_per_id: 2, nonmated_id_frac: 0.25, seed: 0 }
    }
}

/// Source row indices of every split part.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test_gallery: Vec<usize>,
    pub test_probe_mated: Vec<usize>,
    pub test_probe_nonmated: Vec<usize>,
}

/// Identity-disjoint train/test partition with an open-set test protocol.
///
/// Train and val share the dense training label space. The three test parts
/// share a second dense label space over the test identities; non-mated
/// identities have no gallery rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpenSetSplit {
    pub train: LabeledDataset,
    pub val: LabeledDataset,
    pub test_gallery: LabeledDataset,
    pub test_probe_mated: LabeledDataset,
    pub test_probe_nonmated: LabeledDataset,
    /// Source identity of each training label.
    pub train_identities: Vec<u32>,
    /// Source identity of each test label.
    pub test_identities: Vec<u32>,
    pub indices: SplitIndices,
}

/// Rounds `frac * n` to the nearest count (halves round up).
fn frac_count(frac: f64, n: usize) -> usize {
    libm::floor(frac * n as f64 + 0.5) as usize
}

pub fn make_open_set_split(dataset: &LabeledDataset, cfg: &SplitConfig) -> Result<OpenSetSplit> {
    let in_unit = |f: f64| f > 0.0 && f < 1.0;
    if !in_unit(cfg.train_frac) || !(cfg.val_frac >= 0.0 && cfg.val_frac < 1.0) {
        return Err(config_err!("split fractions must lie in (0, 1): train {} val {}", cfg.train_frac, cfg.val_frac));
    }
    if (cfg.train_frac + cfg.val_frac - 1.0).abs() > 1e-6 {
        return Err(config_err!("train and val fractions must sum to 1, got {}", cfg.train_frac + cfg.val_frac));
    }
    if !(cfg.nonmated_id_frac >= 0.0 && cfg.nonmated_id_frac < 1.0) {
        return Err(config_err!("non-mated identity fraction must lie in [0, 1)"));
    }
    if cfg.gallery_per_id == 0 {
        return Err(config_err!("gallery needs at least one sample per identity"));
    }
    let by_class = dataset.indices_by_class();
    let present: Vec<u32> = (0..dataset.class_count() as u32).filter(|c| !by_class[*c as usize].is_empty()).collect();
    if cfg.test_identities == 0 || present.len() < cfg.test_identities + 2 {
        return Err(config_err!(
            "{} identities cannot supply {} test identities and >= 2 training identities",
            present.len(),
            cfg.test_identities
        ));
    }

    let mut rng = stream(cfg.seed, tags::SPLIT);
    let mut shuffled = present.clone();
    shuffled.shuffle(&mut rng);
    let mut test_ids: Vec<u32> = shuffled[..cfg.test_identities].to_vec();
    let mut train_ids: Vec<u32> = shuffled[cfg.test_identities..].to_vec();
    test_ids.sort_unstable();
    train_ids.sort_unstable();

    let mut idx = SplitIndices::default();
    let mut train_map = BTreeMap::new();
    for (dense, id) in train_ids.iter().enumerate() {
        train_map.insert(*id, dense as u32);
        let mut rows = by_class[*id as usize].clone();
        rows.shuffle(&mut rng);
        let n_val = frac_count(cfg.val_frac, rows.len()).min(rows.len() - 1);
        idx.val.extend_from_slice(&rows[..n_val]);
        idx.train.extend_from_slice(&rows[n_val..]);
    }

    let n_nonmated = frac_count(cfg.nonmated_id_frac, test_ids.len());
    if n_nonmated >= test_ids.len() {
        return Err(config_err!("no mated test identity left after withholding {n_nonmated}"));
    }
    let mut order: Vec<usize> = (0..test_ids.len()).collect();
    order.shuffle(&mut rng);
    let mut nonmated = vec![false; test_ids.len()];
    for o in &order[..n_nonmated] {
        nonmated[*o] = true;
    }
    let mut test_map = BTreeMap::new();
    for (dense, id) in test_ids.iter().enumerate() {
        test_map.insert(*id, dense as u32);
        let mut rows = by_class[*id as usize].clone();
        if nonmated[dense] {
            idx.test_probe_nonmated.extend_from_slice(&rows);
            continue;
        }
        if rows.len() <= cfg.gallery_per_id {
            return Err(config_err!("test identity {id} has {} samples, gallery needs {} plus a probe", rows.len(), cfg.gallery_per_id));
        }
        rows.shuffle(&mut rng);
        idx.test_gallery.extend_from_slice(&rows[..cfg.gallery_per_id]);
        idx.test_probe_mated.extend_from_slice(&rows[cfg.gallery_per_id..]);
    }
    for part in [&mut idx.train, &mut idx.val, &mut idx.test_gallery, &mut idx.test_probe_mated, &mut idx.test_probe_nonmated] {
        part.sort_unstable();
    }

    let relabel = |rows: &[usize], map: &BTreeMap<u32, u32>, classes: usize| -> Result<LabeledDataset> {
        let labels = rows.iter().map(|r| map[&dataset.labels()[*r]]).collect();
        LabeledDataset::new(dataset.features().select_rows(rows), labels, classes)
    };
    Ok(OpenSetSplit {
        train: relabel(&idx.train, &train_map, train_ids.len())?,
        val: relabel(&idx.val, &train_map, train_ids.len())?,
        test_gallery: relabel(&idx.test_gallery, &test_map, test_ids.len())?,
        test_probe_mated: relabel(&idx.test_probe_mated, &test_map, test_ids.len())?,
        test_probe_nonmated: relabel(&idx.test_probe_nonmated, &test_map, test_ids.len())?,
        train_identities: train_ids,
        test_identities: test_ids,
        indices: idx,
    })
}

impl OpenSetSplit {
    /// Enrollment set for validation retrieval: the first `per_id` training
    /// rows of every training identity. Validation probes are [`Self::val`].
    pub fn val_gallery(&self, per_id: usize) -> LabeledDataset {
        let rows: Vec<usize> = self.train.indices_by_class().iter().flat_map(|r| r.iter().take(per_id).copied()).collect();
        let mut rows = rows;
        rows.sort_unstable();
        self.train.subset(&rows)
    }

    /// True when no source identity appears on both sides of the train/test cut.
    pub fn identities_disjoint(&self) -> bool {
        self.train_identities.iter().all(|id| self.test_identities.binary_search(id).is_err())
    }

    /// Number of identities enrolled in the test gallery.
    pub fn gallery_identities(&self) -> usize {
        self.test_gallery.class_count() - self.test_gallery.missing_classes().len()
    }
}

impl From<OpenSetSplit> for Vec<LabeledDataset> {
    fn from(s: OpenSetSplit) -> Self {
        vec![s.train, s.val, s.test_gallery, s.test_probe_mated, s.test_probe_nonmated]
    }
}

/// Error helper for callers that need a non-empty set.
pub fn require_non_empty(d: &LabeledDataset, what: &str) -> Result<()> {
    if d.is_empty() {
        return Err(Error::Argument(alloc::format!("{what} is empty")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_noise_samples_equal_prototype() {
        let d = generate_synthetic(3, 4, 5, 0.0, 11).unwrap();
        for id in 0..3 {
            let first = d.features().row(id * 4);
            for s in 1..4 {
                assert_eq!(d.features().row(id * 4 + s), first);
            }
            let n: f32 = first.iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(generate_synthetic(5, 3, 8, 0.2, 7).unwrap(), generate_synthetic(5, 3, 8, 0.2, 7).unwrap());
        assert_ne!(generate_synthetic(5, 3, 8, 0.2, 7).unwrap(), generate_synthetic(5, 3, 8, 0.2, 8).unwrap());
    }

    #[test]
    fn generation_rejects_bad_counts() {
        assert!(generate_synthetic(1, 3, 8, 0.1, 0).is_err());
        assert!(generate_synthetic(3, 3, 1, 0.1, 0).is_err());
        assert!(generate_synthetic(3, 3, 4, -0.1, 0).is_err());
    }

    #[test]
    fn no_nonmated_means_empty_nonmated_probes() {
        let d = generate_synthetic(12, 6, 4, 0.1, 1).unwrap();
        let cfg = SplitConfig { test_identities: 4, nonmated_id_frac: 0.0, ..Default::default() };
        let s = make_open_set_split(&d, &cfg).unwrap();
        assert!(s.test_probe_nonmated.is_empty());
        assert_eq!(s.gallery_identities(), 4);
        assert!(s.identities_disjoint());
    }

    #[test]
    fn too_few_identities_is_config_error() {
        let d = generate_synthetic(5, 6, 4, 0.1, 1).unwrap();
        let cfg = SplitConfig { test_identities: 4, ..Default::default() };
        assert!(matches!(make_open_set_split(&d, &cfg), Err(Error::Config(_))));
        let bad = SplitConfig { test_identities: 1, train_frac: 0.9, val_frac: 0.3, ..Default::default() };
        assert!(make_open_set_split(&d, &bad).is_err());
    }

    #[test]
    fn missing_class_detection() {
        let d = LabeledDataset::new(Tensor2::zeros(2, 2), vec![0, 2], 3).unwrap();
        assert_eq!(d.missing_classes(), vec![1]);
        assert!(d.check_complete().is_err());
        assert!(LabeledDataset::new(Tensor2::zeros(1, 2), vec![3], 3).is_err());
    }
}
