//! Evolutionary architecture search over a trained supernet.
//!
//! Candidates are scored on the validation split with one of three rewards:
//! `r1 = M(q, q)`, `r2 = M(q, g)` or `r3 = r1 * r2`, where `q` is the
//! candidate sub-network (weights inherited from the supernet) and `g` the
//! gallery model. Every candidate must fit a flop budget.
//!
//! Each generation after the first keeps the best `population - crossover -
//! random` candidates unchanged, adds `crossover` mutated children of those
//! elites and fills the rest with fresh uniform samples. Rewards are cached
//! by descriptor.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;
use core::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{arg_err, config_err, Error, Result};
use crate::nn::EmbeddingModel;
use crate::retrieval::{embed_set, EmbeddingIndex, Metric};
use crate::rng::{stream, tags, Fnv64, StreamRng};
use crate::supernet::{sample_uniform, ArchDescriptor, LayerChoice, SearchSpace, Supernet};

/// Rejection-sampling attempts before a budget is declared infeasible.
pub const MAX_REJECTIONS: usize = 10_000;
/// Samples used to estimate the default (median) flop budget.
pub const BUDGET_SAMPLES: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    R1,
    R2,
    R3,
}

impl RewardKind {
    pub const ALL: [RewardKind; 3] = [RewardKind::R1, RewardKind::R2, RewardKind::R3];

    pub fn name(self) -> &'static str {
        match self {
            RewardKind::R1 => "r1",
            RewardKind::R2 => "r2",
            RewardKind::R3 => "r3",
        }
    }

    pub fn combine(self, r1: f64, r2: f64) -> f64 {
        match self {
            RewardKind::R1 => r1,
            RewardKind::R2 => r2,
            RewardKind::R3 => r1 * r2,
        }
    }
}

impl FromStr for RewardKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "r1" => Ok(RewardKind::R1),
            "r2" => Ok(RewardKind::R2),
            "r3" => Ok(RewardKind::R3),
            other => Err(config_err!("unknown reward {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvolutionConfig {
    pub generations: usize,
    pub population_size: usize,
    pub crossover_size: usize,
    pub mutate_prob: f64,
    pub random_select_prob: f64,
    /// `None` means the median flops of uniformly sampled architectures.
    pub flop_budget: Option<u64>,
    pub seed: u64,
}

impl Default for EvolutionConfig {
    fn default() -> Self {
        EvolutionConfig {
            generations: 20,
            population_size: 50,
            crossover_size: 40,
            mutate_prob: 0.1,
            random_select_prob: 0.1,
            flop_budget: None,
            seed: 0,
        }
    }
}

impl EvolutionConfig {
    /// Fresh uniform samples per generation.
    pub fn random_count(&self) -> usize {
        libm::round(self.random_select_prob * self.population_size as f64) as usize
    }

    /// Candidates carried over unchanged per generation.
    pub fn elite_count(&self) -> usize {
        self.population_size.saturating_sub(self.crossover_size + self.random_count())
    }

    pub fn validate(&self) -> Result<()> {
        if self.generations == 0 || self.population_size == 0 {
            return Err(config_err!("generations and population size must be positive"));
        }
        if self.crossover_size > self.population_size {
            return Err(config_err!("crossover size {} exceeds population {}", self.crossover_size, self.population_size));
        }
        for p in [self.mutate_prob, self.random_select_prob] {
            if !(0.0..=1.0).contains(&p) {
                return Err(config_err!("probabilities must lie in [0, 1], got {p}"));
            }
        }
        if self.crossover_size + self.random_count() > self.population_size {
            return Err(config_err!("crossover and random samples exceed the population"));
        }
        if self.elite_count() == 0 && self.generations > 1 {
            return Err(config_err!("no elites left: population {} <= crossover {} + random {}", self.population_size, self.crossover_size, self.random_count()));
        }
        Ok(())
    }
}

/// Reward of one candidate, with both components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Reward {
    pub r1: f64,
    pub r2: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub arch: ArchDescriptor,
    pub flops: u64,
    pub reward: Reward,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationLog {
    pub generation: usize,
    pub candidates: Vec<Candidate>,
    pub best_reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchLog {
    pub reward_kind: RewardKind,
    pub flop_budget: u64,
    pub generations: Vec<GenerationLog>,
    /// The five best distinct architectures over the whole run.
    pub top: Vec<Candidate>,
}

impl SearchLog {
    pub fn best(&self) -> Option<&Candidate> {
        self.top.first()
    }
}

/// Each gene (block index, width index) resampled uniformly with
/// probability `mutate_prob`.
pub fn mutate<R: Rng + ?Sized>(space: &SearchSpace, arch: &ArchDescriptor, mutate_prob: f64, rng: &mut R) -> ArchDescriptor {
    let layers = arch
        .layers
        .iter()
        .map(|c| {
            let mut c = *c;
            if rng.random_bool(mutate_prob) {
                c.block = rng.random_range(0..space.block_kinds);
            }
            if rng.random_bool(mutate_prob) {
                c.width = rng.random_range(0..space.width_choices.len());
            }
            c
        })
        .collect();
    ArchDescriptor { layers }
}

/// Gene-wise uniform crossover.
pub fn crossover<R: Rng + ?Sized>(a: &ArchDescriptor, b: &ArchDescriptor, rng: &mut R) -> Result<ArchDescriptor> {
    if a.layers.len() != b.layers.len() {
        return Err(arg_err!("crossover of {}- and {}-layer descriptors", a.layers.len(), b.layers.len()));
    }
    let layers = a
        .layers
        .iter()
        .zip(&b.layers)
        .map(|(x, y)| {
            let block = if rng.random_bool(0.5) { x.block } else { y.block };
            let width = if rng.random_bool(0.5) { x.width } else { y.width };
            LayerChoice { block, width }
        })
        .collect();
    Ok(ArchDescriptor { layers })
}

/// Median flops over [`BUDGET_SAMPLES`] uniform samples (lower median).
pub fn median_flops(space: &SearchSpace, seed: u64) -> Result<u64> {
    space.validate()?;
    let mut rng = stream(seed, tags::BUDGET);
    let mut flops = Vec::with_capacity(BUDGET_SAMPLES);
    for _ in 0..BUDGET_SAMPLES {
        flops.push(space.arch_flops(&sample_uniform(space, &mut rng))?);
    }
    flops.sort_unstable();
    Ok(flops[(BUDGET_SAMPLES - 1) / 2])
}

fn sample_within<R: Rng + ?Sized>(space: &SearchSpace, budget: u64, rng: &mut R) -> Result<ArchDescriptor> {
    for _ in 0..MAX_REJECTIONS {
        let a = sample_uniform(space, rng);
        if space.arch_flops(&a)? <= budget {
            return Ok(a);
        }
    }
    Err(config_err!("no architecture within {budget} flops after {MAX_REJECTIONS} samples"))
}

/// Evolution with an arbitrary reward function. Candidates passed to
/// `reward` always satisfy the flop budget.
pub fn evolve_with<F>(space: &SearchSpace, config: &EvolutionConfig, kind: RewardKind, mut reward: F) -> Result<SearchLog>
where
    F: FnMut(&ArchDescriptor) -> Result<Reward>,
{
    space.validate()?;
    config.validate()?;
    let budget = match config.flop_budget {
        Some(b) => b,
        None => median_flops(space, config.seed)?,
    };
    let mut rng: StreamRng = stream(config.seed, tags::EVOLVE);
    let mut cache: BTreeMap<ArchDescriptor, Candidate> = BTreeMap::new();
    let mut score = |arch: ArchDescriptor, cache: &mut BTreeMap<ArchDescriptor, Candidate>| -> Result<Candidate> {
        if let Some(c) = cache.get(&arch) {
            return Ok(c.clone());
        }
        let flops = space.arch_flops(&arch)?;
        if flops > budget {
            return Err(Error::OverBudget { flops, budget });
        }
        let r = reward(&arch)?;
        let c = Candidate { arch: arch.clone(), flops, reward: r };
        cache.insert(arch, c.clone());
        Ok(c)
    };

    let mut population = Vec::with_capacity(config.population_size);
    for _ in 0..config.population_size {
        let a = sample_within(space, budget, &mut rng)?;
        population.push(score(a, &mut cache)?);
    }
    let mut generations = Vec::with_capacity(config.generations);
    let rank = |pop: &mut Vec<Candidate>| {
        pop.sort_by(|a, b| b.reward.value.total_cmp(&a.reward.value).then_with(|| a.arch.cmp(&b.arch)));
    };
    rank(&mut population);
    generations.push(GenerationLog { generation: 0, best_reward: population[0].reward.value, candidates: population.clone() });

    for g in 1..config.generations {
        let elites: Vec<Candidate> = population[..config.elite_count()].to_vec();
        let mut next = elites.clone();
        for _ in 0..config.crossover_size {
            let mut child = None;
            for _ in 0..MAX_REJECTIONS {
                let a = &elites[rng.random_range(0..elites.len())].arch;
                let b = &elites[rng.random_range(0..elites.len())].arch;
                let c = mutate(space, &crossover(a, b, &mut rng)?, config.mutate_prob, &mut rng);
                if space.arch_flops(&c)? <= budget {
                    child = Some(c);
                    break;
                }
            }
            let c = child.ok_or_else(|| config_err!("no crossover child within {budget} flops"))?;
            next.push(score(c, &mut cache)?);
        }
        while next.len() < config.population_size {
            let a = sample_within(space, budget, &mut rng)?;
            next.push(score(a, &mut cache)?);
        }
        population = next;
        rank(&mut population);
        generations.push(GenerationLog { generation: g, best_reward: population[0].reward.value, candidates: population.clone() });
    }

    let mut all: Vec<Candidate> = cache.into_values().collect();
    all.sort_by(|a, b| b.reward.value.total_cmp(&a.reward.value).then_with(|| a.arch.cmp(&b.arch)));
    all.truncate(5);
    Ok(SearchLog { reward_kind: kind, flop_budget: budget, generations, top: all })
}

/// Validation material for reward evaluation: probes, the gallery rows, and
/// the gallery rows embedded once by the gallery model.
#[derive(Debug, Clone)]
pub struct RewardContext {
    pub metric: Metric,
    pub probes: LabeledDataset,
    pub gallery: LabeledDataset,
    gallery_index: EmbeddingIndex,
}

impl RewardContext {
    pub fn new(metric: Metric, probes: LabeledDataset, gallery: LabeledDataset, gallery_model: &EmbeddingModel) -> Result<Self> {
        if matches!(metric, Metric::Tpir { .. }) {
            return Err(config_err!("validation rewards need a closed-set metric"));
        }
        crate::data::require_non_empty(&probes, "validation probes")?;
        crate::data::require_non_empty(&gallery, "validation gallery")?;
        let gallery_index = embed_set(gallery_model, &gallery)?;
        Ok(RewardContext { metric, probes, gallery, gallery_index })
    }

    pub fn gallery_index(&self) -> &EmbeddingIndex {
        &self.gallery_index
    }
}

fn arch_producer(arch: &ArchDescriptor) -> u64 {
    let mut h = Fnv64::default();
    for c in &arch.layers {
        h.write_u32(c.block as u32);
        h.write_u32(c.width as u32);
    }
    h.finish()
}

/// Scores `arch` with inherited supernet weights; both components are
/// always computed so logs can report them.
pub fn evaluate_reward(supernet: &Supernet, arch: &ArchDescriptor, kind: RewardKind, ctx: &RewardContext, budget: Option<u64>) -> Result<Reward> {
    if let Some(budget) = budget {
        let flops = supernet.space().arch_flops(arch)?;
        if flops > budget {
            return Err(Error::OverBudget { flops, budget });
        }
    }
    let producer = arch_producer(arch);
    let embed = |set: &LabeledDataset| -> Result<EmbeddingIndex> {
        EmbeddingIndex::new(supernet.subnet_forward(arch, set.features())?, set.labels().to_vec(), producer)
    };
    // A subnet that maps a validation sample to zero cannot retrieve it.
    let (probes, own) = match (embed(&ctx.probes), embed(&ctx.gallery)) {
        (Ok(p), Ok(o)) => (p, o),
        (Err(Error::Degenerate(_)), _) | (_, Err(Error::Degenerate(_))) => return Ok(Reward { r1: 0.0, r2: 0.0, value: 0.0 }),
        (Err(e), _) | (_, Err(e)) => return Err(e),
    };
    let r1 = ctx.metric.evaluate(&probes, None, &own)?;
    let r2 = ctx.metric.evaluate(&probes, None, &ctx.gallery_index)?;
    Ok(Reward { r1, r2, value: kind.combine(r1, r2) })
}

/// Evolutionary search over a frozen supernet.
pub fn evolve(supernet: &Supernet, config: &EvolutionConfig, kind: RewardKind, ctx: &RewardContext) -> Result<SearchLog> {
    evolve_with(supernet.space(), config, kind, |arch| evaluate_reward(supernet, arch, kind, ctx, None))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn space() -> SearchSpace {
        SearchSpace { num_layers: 3, block_kinds: 2, width_choices: vec![0.5, 1.0, 1.5], base_width: 4, input_dim: 3, embedding_dim: 2 }
    }

    #[test]
    fn config_counts() {
        let c = EvolutionConfig::default();
        assert_eq!((c.random_count(), c.elite_count()), (5, 5));
        assert!(c.validate().is_ok());
        assert!(EvolutionConfig { crossover_size: 60, ..c.clone() }.validate().is_err());
        assert!(EvolutionConfig { crossover_size: 45, ..c.clone() }.validate().is_err());
        assert!(EvolutionConfig { mutate_prob: 1.5, ..c }.validate().is_err());
    }

    #[test]
    fn reward_kinds() {
        assert_eq!(RewardKind::R3.combine(0.5, 0.4), 0.2);
        assert_eq!("R2".parse::<RewardKind>().unwrap(), RewardKind::R2);
        assert!("r4".parse::<RewardKind>().is_err());
    }

    #[test]
    fn mutate_zero_is_identity() {
        let s = space();
        let mut rng = stream(1, 0);
        let a = sample_uniform(&s, &mut rng);
        assert_eq!(mutate(&s, &a, 0.0, &mut rng), a);
    }

    #[test]
    fn crossover_length_mismatch() {
        let a: ArchDescriptor = "0.0-1.1".parse().unwrap();
        let b: ArchDescriptor = "0.0".parse().unwrap();
        assert!(crossover(&a, &b, &mut stream(0, 0)).is_err());
    }

    #[test]
    fn infeasible_budget_is_config_error() {
        let c = EvolutionConfig { flop_budget: Some(1), ..Default::default() };
        let err = evolve_with(&space(), &c, RewardKind::R1, |_| Ok(Reward { r1: 0.0, r2: 0.0, value: 0.0 }));
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn logged_candidates_respect_budget() {
        let s = space();
        let budget = median_flops(&s, 3).unwrap();
        let c = EvolutionConfig { generations: 4, population_size: 10, crossover_size: 6, seed: 3, ..Default::default() };
        let log = evolve_with(&s, &c, RewardKind::R1, |a| {
            let v = a.layers.iter().map(|l| l.width as f64).sum::<f64>();
            Ok(Reward { r1: v, r2: v, value: v })
        })
        .unwrap();
        assert_eq!(log.flop_budget, budget);
        for g in &log.generations {
            assert!(g.candidates.iter().all(|c| c.flops <= budget));
        }
        assert!(log.generations.windows(2).all(|w| w[1].best_reward >= w[0].best_reward));
    }
}
