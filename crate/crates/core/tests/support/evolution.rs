//! Exhaustive-enumeration oracle for evolutionary search on small spaces.
#![allow(dead_code)]

use hvs_core::data::generate_synthetic;
use hvs_core::retrieval::Metric;
use hvs_core::rng::mix64;
use hvs_core::search::{evaluate_reward, evolve, evolve_with, EvolutionConfig, Reward, RewardContext, RewardKind};
use hvs_core::supernet::{ArchDescriptor, SearchSpace, Supernet};
use hvs_core::nn::ModelArch;
use hvs_core::train::{train_gallery, TrainRecipe};

/// Every 2-layer space with at most three block kinds and three widths.
pub fn small_spaces() -> Vec<SearchSpace> {
    let mut out = Vec::new();
    for kinds in 1..=3 {
        for widths in 1..=3 {
            out.push(SearchSpace {
                num_layers: 2,
                block_kinds: kinds,
                width_choices: (1..=widths).map(|i| i as f64 * 0.5).collect(),
                base_width: 6,
                input_dim: 5,
                embedding_dim: 4,
            });
        }
    }
    out
}

/// A fixed pseudo-random reward per descriptor.
pub fn hashed_reward(arch: &ArchDescriptor, salt: u64) -> Reward {
    let mut h = salt;
    for c in &arch.layers {
        h = mix64(h ^ (c.block as u64) << 8 ^ c.width as u64);
    }
    let r1 = (h >> 11) as f64 / (1u64 << 53) as f64;
    let r2 = (mix64(h) >> 11) as f64 / (1u64 << 53) as f64;
    Reward { r1, r2, value: r1 * r2 }
}

/// Median of the enumerated flops (lower median), used as a budget.
pub fn enumerated_median(space: &SearchSpace) -> u64 {
    let mut f: Vec<u64> = space.enumerate().unwrap().iter().map(|a| space.arch_flops(a).unwrap()).collect();
    f.sort_unstable();
    f[(f.len() - 1) / 2]
}

fn exhaustive_best(space: &SearchSpace, budget: u64, mut reward: impl FnMut(&ArchDescriptor) -> f64) -> f64 {
    space
        .enumerate()
        .unwrap()
        .iter()
        .filter(|a| space.arch_flops(a).unwrap() <= budget)
        .map(|a| reward(a))
        .fold(f64::NEG_INFINITY, f64::max)
}

#[derive(Debug, Default)]
pub struct EvolutionReport {
    pub runs: usize,
    pub failures: Vec<String>,
}

/// Evolution against hashed rewards and against real supernet rewards, each
/// compared with the best reward found by enumeration.
pub fn run_exhaustive_checks(seeds: &[u64]) -> EvolutionReport {
    let mut report = EvolutionReport::default();
    for space in small_spaces() {
        for &seed in seeds {
            for budget in [u64::MAX, enumerated_median(&space)] {
                let config = EvolutionConfig { seed, flop_budget: Some(budget), ..EvolutionConfig::default() };
                let log = evolve_with(&space, &config, RewardKind::R3, |a| Ok(hashed_reward(a, seed))).unwrap();
                let want = exhaustive_best(&space, budget, |a| hashed_reward(a, seed).value);
                report.runs += 1;
                if log.best().unwrap().reward.value != want {
                    report.failures.push(format!("hashed {space:?} seed {seed} budget {budget}: {} vs {want}", log.best().unwrap().reward.value));
                }
            }
            let (sn, ctx) = toy_supernet(&space, seed);
            for kind in RewardKind::ALL {
                let config = EvolutionConfig { seed, flop_budget: Some(u64::MAX), ..EvolutionConfig::default() };
                let log = evolve(&sn, &config, kind, &ctx).unwrap();
                let want = exhaustive_best(&space, u64::MAX, |a| evaluate_reward(&sn, a, kind, &ctx, None).unwrap().value);
                report.runs += 1;
                if log.best().unwrap().reward.value != want {
                    report.failures.push(format!("supernet {space:?} seed {seed} {kind:?}: {} vs {want}", log.best().unwrap().reward.value));
                }
            }
        }
    }
    report
}

/// An untrained supernet and a validation context on toy clusters.
pub fn toy_supernet(space: &SearchSpace, seed: u64) -> (Supernet, RewardContext) {
    let data = generate_synthetic(6, 6, space.input_dim, 0.3, seed).unwrap();
    let recipe = TrainRecipe { epochs: 2, ..TrainRecipe::default() }.with_seed(seed);
    let sn = Supernet::new(space.clone(), data.class_count(), &recipe).unwrap();
    let (gallery, _) = train_gallery(&data, &ModelArch::mlp(space.input_dim, &[8], space.embedding_dim), &recipe).unwrap();
    let idx: Vec<usize> = (0..data.len()).collect();
    let (probe_idx, gallery_idx): (Vec<usize>, Vec<usize>) = idx.iter().partition(|i| *i % 3 != 0);
    let ctx = RewardContext::new(Metric::TopK { k: 1 }, data.subset(&probe_idx), data.subset(&gallery_idx), &gallery.model).unwrap();
    (sn, ctx)
}
