//! Brute-force sweep oracles for the retrieval metrics.
//!
//! Instances draw embeddings from 4-d unit vectors with entries in
//! {0, ±1/2, ±1}; every dot product between them is a small multiple of 1/4,
//! exact in f32 under any summation order, and ties are common.
#![allow(dead_code)]

use hvs_core::retrieval::{tar_at_far, topk_accuracy, tpir_at_fpir, verification_scores, EmbeddingIndex};
use hvs_core::rng::stream;
use hvs_core::Tensor2;
use rand::Rng;

pub fn exact_unit_vectors() -> Vec<[f32; 4]> {
    let mut out = Vec::new();
    for i in 0..4 {
        for s in [1.0f32, -1.0] {
            let mut v = [0.0; 4];
            v[i] = s;
            out.push(v);
        }
    }
    for mask in 0..16u32 {
        out.push(core::array::from_fn(|i| if mask >> i & 1 == 1 { -0.5 } else { 0.5 }));
    }
    out
}

pub struct Set {
    pub rows: Vec<[f32; 4]>,
    pub labels: Vec<u32>,
}

impl Set {
    pub fn random<R: Rng>(n: usize, labels: u32, rng: &mut R) -> Set {
        let pool = exact_unit_vectors();
        Set {
            rows: (0..n).map(|_| pool[rng.random_range(0..pool.len())]).collect(),
            labels: (0..n).map(|_| rng.random_range(0..labels)).collect(),
        }
    }

    pub fn index(&self) -> EmbeddingIndex {
        let data = self.rows.iter().flatten().copied().collect();
        EmbeddingIndex::new(Tensor2::new(self.rows.len(), 4, data).unwrap(), self.labels.clone(), 0).unwrap()
    }
}

fn sim(a: &[f32; 4], b: &[f32; 4]) -> f32 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2] + a[3] * b[3]
}

/// Gallery rows ordered by score descending, then row ascending.
fn ranking(probe: &[f32; 4], gallery: &Set) -> Vec<(f32, usize)> {
    let mut r: Vec<(f32, usize)> = gallery.rows.iter().enumerate().map(|(i, g)| (sim(probe, g), i)).collect();
    r.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    r
}

pub fn topk(probes: &Set, gallery: &Set, k: usize) -> f64 {
    if probes.rows.is_empty() {
        return 0.0;
    }
    let hits = probes
        .rows
        .iter()
        .zip(&probes.labels)
        .filter(|(p, l)| ranking(p, gallery).iter().take(k).any(|(_, i)| gallery.labels[*i] == **l))
        .count();
    hits as f64 / probes.rows.len() as f64
}

/// Lowest threshold among `-inf` and the negative scores whose
/// false-accept fraction (scores strictly above it) stays within `target`.
fn sweep_threshold(negatives: &[f32], target: f64) -> f32 {
    let mut candidates = vec![f32::NEG_INFINITY];
    candidates.extend_from_slice(negatives);
    candidates.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = negatives.len() as f64;
    for t in candidates {
        let above = negatives.iter().filter(|s| **s > t).count() as f64;
        if above <= target * n + 1e-9 {
            return t;
        }
    }
    unreachable!("the largest negative always qualifies")
}

pub fn tpir(mated: &Set, nonmated: &Set, gallery: &Set, target: f64) -> f64 {
    let neg: Vec<f32> = nonmated.rows.iter().map(|p| ranking(p, gallery)[0].0).collect();
    let t = sweep_threshold(&neg, target);
    let hits = mated
        .rows
        .iter()
        .zip(&mated.labels)
        .filter(|(p, l)| {
            let (s, i) = ranking(p, gallery)[0];
            s > t && gallery.labels[i] == **l
        })
        .count();
    hits as f64 / mated.rows.len() as f64
}

pub fn pair_scores(probes: &Set, gallery: &Set) -> (Vec<f32>, Vec<f32>) {
    let (mut gen, mut imp) = (Vec::new(), Vec::new());
    for (p, pl) in probes.rows.iter().zip(&probes.labels) {
        for (g, gl) in gallery.rows.iter().zip(&gallery.labels) {
            if pl == gl {
                gen.push(sim(p, g));
            } else {
                imp.push(sim(p, g));
            }
        }
    }
    (gen, imp)
}

pub fn tar(genuine: &[f32], impostor: &[f32], target: f64) -> f64 {
    let t = sweep_threshold(impostor, target);
    genuine.iter().filter(|s| **s > t).count() as f64 / genuine.len() as f64
}

fn random_target<R: Rng>(rng: &mut R) -> f64 {
    const FIXED: [f64; 6] = [0.05, 0.1, 0.2, 0.25, 0.5, 1.0];
    if rng.random_bool(0.5) {
        FIXED[rng.random_range(0..FIXED.len())]
    } else {
        rng.random_range(0.001..1.0)
    }
}

#[derive(Debug, Default)]
pub struct MetricReport {
    pub instances: usize,
    pub mismatches: Vec<String>,
}

/// Compares all three metrics with their oracles on `instances` random cases.
pub fn run_metric_oracles(instances: usize, seed: u64) -> MetricReport {
    let mut rng = stream(seed, 0x4e7);
    let mut report = MetricReport { instances, ..MetricReport::default() };
    for case in 0..instances {
        let labels = rng.random_range(2..7);
        let gallery = Set::random(rng.random_range(1..21), labels, &mut rng);
        let probes = Set::random(rng.random_range(1..21), labels, &mut rng);
        let nonmated = Set::random(rng.random_range(1..21), labels, &mut rng);

        let k = rng.random_range(1..8);
        let got = topk_accuracy(&probes.index(), &gallery.index(), k).unwrap();
        let want = topk(&probes, &gallery, k);
        if got != want {
            report.mismatches.push(format!("case {case}: top-{k} {got} vs oracle {want}"));
        }

        let target = random_target(&mut rng);
        let got = tpir_at_fpir(&probes.index(), &nonmated.index(), &gallery.index(), target).unwrap();
        let want = tpir(&probes, &nonmated, &gallery, target);
        if got != want {
            report.mismatches.push(format!("case {case}: TPIR@{target} {got} vs oracle {want}"));
        }

        let (gen, imp) = pair_scores(&probes, &gallery);
        let (lib_gen, lib_imp) = verification_scores(&probes.index(), &gallery.index()).unwrap();
        if gen != lib_gen || imp != lib_imp {
            report.mismatches.push(format!("case {case}: verification score lists differ"));
        }
        if !gen.is_empty() && !imp.is_empty() {
            let target = random_target(&mut rng);
            let got = tar_at_far(&gen, &imp, target).unwrap();
            let want = tar(&gen, &imp, target);
            if got != want {
                report.mismatches.push(format!("case {case}: TAR@{target} {got} vs oracle {want}"));
            }
        }
    }
    report
}
