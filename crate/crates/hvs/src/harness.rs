//! Experiment runner: method comparison, architecture/accuracy correlation
//! study, reward ablation, and result emission.
//!
//! Every run derives all randomness from the seeds listed in the
//! configuration, so repeated runs produce byte-identical result files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use hvs_core::data::{generate_synthetic, make_open_set_split, OpenSetSplit, SplitConfig};
use hvs_core::losses::CompositeWeights;
use hvs_core::nn::{EmbeddingModel, ModelArch};
use hvs_core::retrieval::{amortized_cost, check_compatibility, cross_metric, EvalSets, Metric};
use hvs_core::rng::{derive_seed, stream, tags};
use hvs_core::search::{evolve, EvolutionConfig, RewardContext, RewardKind};
use hvs_core::supernet::{sample_uniform, train_supernet, ArchDescriptor, SearchSpace, Supernet};
use hvs_core::train::{
    train_gallery, train_query, GalleryModel, PruneMethod, PruneSpec, QuerySource, TrainMethod, TrainRecipe,
};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::checkpoint::load_gallery;
use crate::error::{HvsError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Training identities; test identities come from the split config.
    pub identities: usize,
    pub per_id: usize,
    pub dim: usize,
    pub noise: f32,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { identities: 100, per_id: 20, dim: 32, noise: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub experiment_id: String,
    pub data: DataConfig,
    pub split: SplitConfig,
    pub gallery_hidden: Vec<usize>,
    pub embedding_dim: usize,
    pub gallery_recipe: TrainRecipe,
    /// Used for every query model: method comparison, study and retraining.
    pub query_recipe: TrainRecipe,
    pub prune_specs: Vec<PruneSpec>,
    pub methods: Vec<TrainMethod>,
    pub space: SearchSpace,
    pub supernet_recipe: TrainRecipe,
    pub warmup_epochs: usize,
    pub evolution: EvolutionConfig,
    /// Epoch override for the correlation study's query models.
    pub study_epochs: Option<usize>,
    pub study_archs: usize,
    pub study_repetitions: usize,
    /// Validation reward metric (`top<k>` only).
    pub val_metric: String,
    /// Test metric: `top<k>`, `tpir` or `tar`.
    pub test_metric: String,
    /// FPIR / FAR target for open-set test metrics.
    pub metric_target: f64,
    pub seeds: Vec<u64>,
    pub output_dir: Option<PathBuf>,
    /// Use this gallery for every seed instead of training one.
    pub gallery_checkpoint: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let query_recipe = TrainRecipe { epochs: 80, base_lr: 0.03, ..TrainRecipe::default() };
        ExperimentConfig {
            experiment_id: "hvs".into(),
            data: DataConfig::default(),
            split: SplitConfig::default(),
            gallery_hidden: vec![256, 256],
            embedding_dim: 16,
            gallery_recipe: TrainRecipe { epochs: 40, base_lr: 0.03, augment_sigma: 0.3, ..TrainRecipe::default() },
            query_recipe,
            prune_specs: vec![
                PruneSpec { method: PruneMethod::Magnitude, fraction: 0.9 },
                PruneSpec { method: PruneMethod::Activation, fraction: 0.9 },
            ],
            methods: TrainMethod::ALL.to_vec(),
            space: SearchSpace::default(),
            supernet_recipe: TrainRecipe { epochs: 40, base_lr: 0.03, ..TrainRecipe::default() },
            warmup_epochs: 10,
            evolution: EvolutionConfig::default(),
            study_epochs: Some(40),
            study_archs: 40,
            study_repetitions: 3,
            val_metric: "top5".into(),
            test_metric: "top1".into(),
            metric_target: 0.01,
            seeds: vec![0, 1, 2, 3, 4],
            output_dir: None,
            gallery_checkpoint: None,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(HvsError::Config("seeds list is empty".into()));
        }
        if let Some(p) = &self.gallery_checkpoint {
            if !p.exists() {
                return Err(HvsError::Config(format!("gallery checkpoint {} does not exist", p.display())));
            }
        }
        self.test_metric()?;
        self.val_metric()?;
        self.space.validate()?;
        if self.space.input_dim != self.data.dim || self.space.embedding_dim != self.embedding_dim {
            return Err(HvsError::Config("search space input/embedding widths must match the data and gallery".into()));
        }
        Ok(())
    }

    pub fn test_metric(&self) -> Result<Metric> {
        Ok(Metric::parse(&self.test_metric, self.metric_target)?)
    }

    pub fn val_metric(&self) -> Result<Metric> {
        let m = Metric::parse(&self.val_metric, self.metric_target)?;
        if !matches!(m, Metric::TopK { .. }) {
            return Err(HvsError::Config("validation metric must be top-k".into()));
        }
        Ok(m)
    }

    pub fn gallery_arch(&self) -> ModelArch {
        ModelArch::mlp(self.data.dim, &self.gallery_hidden, self.embedding_dim)
    }

    /// Chance level of heterogeneous top-1: one over the test identities.
    pub fn chance_level(&self) -> f64 {
        1.0 / self.split.test_identities.max(1) as f64
    }
}

/// One row of a result table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub experiment: String,
    pub seed: u64,
    pub condition: String,
    pub arch: String,
    pub flops: u64,
    pub m_qq: f64,
    pub m_qg: f64,
    pub compatible: bool,
}

impl ResultRow {
    pub fn new(experiment: &str, seed: u64, condition: impl Into<String>, arch: impl Into<String>, flops: u64, m_qq: f64, m_qg: f64) -> Self {
        ResultRow {
            experiment: experiment.into(),
            seed,
            condition: condition.into(),
            arch: arch.into(),
            flops,
            m_qq,
            m_qg,
            compatible: check_compatibility(m_qg, m_qq),
        }
    }
}

pub const CSV_HEADER: &str = "experiment,seed,condition,arch,flops,m_qq,m_qg,compatible";

/// Append-only table of results.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ResultTable {
    rows: Vec<ResultRow>,
}

impl ResultTable {
    pub fn push(&mut self, row: ResultRow) {
        self.rows.push(row);
    }

    pub fn extend(&mut self, other: ResultTable) {
        self.rows.extend(other.rows);
    }

    pub fn rows(&self) -> &[ResultRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Rows ordered by (experiment, seed), insertion order otherwise.
    pub fn sorted_rows(&self) -> Vec<ResultRow> {
        let mut rows = self.rows.clone();
        rows.sort_by(|a, b| a.experiment.cmp(&b.experiment).then(a.seed.cmp(&b.seed)));
        rows
    }

    /// Rows with the given condition.
    pub fn condition<'a>(&'a self, condition: &'a str) -> impl Iterator<Item = &'a ResultRow> + 'a {
        self.rows.iter().filter(move |r| r.condition == condition)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).has_headers(false).from_writer(Vec::new());
        w.write_record(CSV_HEADER.split(','))?;
        for r in self.sorted_rows() {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| HvsError::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().from_reader(text.as_bytes());
        let header: Vec<String> = r.headers()?.iter().map(String::from).collect();
        if header.join(",") != CSV_HEADER {
            return Err(HvsError::Format(format!("unexpected result header {header:?}")));
        }
        let rows = r.deserialize().collect::<std::result::Result<Vec<ResultRow>, _>>()?;
        Ok(ResultTable { rows })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.sorted_rows())? + "\n")
    }
}

/// Writes `<stem>.csv` and `<stem>.json` into `dir`.
pub fn emit_results(table: &ResultTable, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir)?;
    let csv_path = dir.join(format!("{stem}.csv"));
    let json_path = dir.join(format!("{stem}.json"));
    fs::write(&csv_path, table.to_csv()?)?;
    fs::write(&json_path, table.to_json()?)?;
    Ok((csv_path, json_path))
}

/// `ratio,cost` rows of the amortized embedding cost for `ratios`.
pub fn cost_curve_csv(gallery_flops: f64, query_flops: f64, ratios: &[f64]) -> Result<String> {
    let mut out = String::from("ratio,cost\n");
    for r in ratios {
        out.push_str(&format!("{r},{}\n", amortized_cost(gallery_flops, query_flops, *r)?));
    }
    Ok(out)
}

/// Log-spaced query/gallery ratios from 0 through `10^max_exp`.
pub fn default_ratios(max_exp: u32, per_decade: u32) -> Vec<f64> {
    let mut r = vec![0.0];
    for i in 0..=(max_exp * per_decade) {
        r.push(10f64.powf(i as f64 / per_decade as f64));
    }
    r
}

/// Data, split and gallery for one seed.
pub struct SeedContext {
    pub seed: u64,
    pub split: OpenSetSplit,
    pub gallery: GalleryModel,
}

impl SeedContext {
    pub fn eval_sets(&self) -> EvalSets<'_> {
        EvalSets {
            probes: &self.split.test_probe_mated,
            nonmated: Some(&self.split.test_probe_nonmated),
            gallery: &self.split.test_gallery,
        }
    }

    /// `(M(q,q), M(q,g))` on the test split.
    pub fn evaluate(&self, metric: &Metric, query: &EmbeddingModel) -> Result<(f64, f64)> {
        let sets = self.eval_sets();
        Ok((cross_metric(metric, query, query, sets)?, cross_metric(metric, query, &self.gallery.model, sets)?))
    }
}

pub fn make_split(config: &ExperimentConfig, seed: u64) -> Result<OpenSetSplit> {
    let total = config.data.identities + config.split.test_identities;
    let data = generate_synthetic(total, config.data.per_id, config.data.dim, config.data.noise, derive_seed(seed, tags::DATA))?;
    let split_cfg = SplitConfig { seed: derive_seed(seed, tags::SPLIT), ..config.split.clone() };
    Ok(make_open_set_split(&data, &split_cfg)?)
}

/// Generates data, splits it and trains (or loads) the gallery.
pub fn prepare_seed(config: &ExperimentConfig, seed: u64) -> Result<SeedContext> {
    let split = make_split(config, seed)?;
    let gallery = match &config.gallery_checkpoint {
        Some(p) => load_gallery(p)?,
        None => {
            let recipe = config.gallery_recipe.clone().with_method(TrainMethod::Vanilla).with_seed(derive_seed(seed, 0x6a11));
            let (g, log) = train_gallery(&split.train, &config.gallery_arch(), &recipe)?;
            info!("seed {seed}: gallery trained, final loss {:?}", log.final_loss());
            g
        }
    };
    if gallery.model.input_dim() != config.data.dim || gallery.classifier.num_classes() != split.train.class_count() {
        return Err(HvsError::Config("gallery checkpoint does not match the configured data".into()));
    }
    Ok(SeedContext { seed, split, gallery })
}

fn query_recipe(config: &ExperimentConfig, method: TrainMethod, seed: u64) -> TrainRecipe {
    config.query_recipe.clone().with_method(method).with_seed(seed)
}

/// Every configured method on every configured pruned architecture.
pub fn run_method_comparison(config: &ExperimentConfig) -> Result<ResultTable> {
    config.validate()?;
    let metric = config.test_metric()?;
    let mut table = ResultTable::default();
    for &seed in &config.seeds {
        let ctx = prepare_seed(config, seed)?;
        let g = &ctx.gallery.model;
        info!("seed {seed}: gallery M(g,g)={:.4}", cross_metric(&metric, g, g, ctx.eval_sets())?);
        for spec in &config.prune_specs {
            for &method in &config.methods {
                let recipe = query_recipe(config, method, seed);
                let q = train_query(&ctx.split.train, &QuerySource::Pruned { spec: *spec }, &recipe, Some(&ctx.gallery), None)?;
                let (m_qq, m_qg) = ctx.evaluate(&metric, &q.model)?;
                info!("seed {seed} {} {}: M(q,q)={m_qq:.4} M(q,g)={m_qg:.4}", method.name(), spec.label());
                table.push(ResultRow::new(&config.experiment_id, seed, method.name(), spec.label(), q.model.flops(), m_qq, m_qg));
            }
        }
    }
    Ok(table)
}

/// Pearson correlation; NaN (with a warning) when undefined.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len();
    if n != y.len() || n < 2 {
        warn!("correlation undefined for {n} points");
        return f64::NAN;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        warn!("correlation undefined: a variable is constant");
        return f64::NAN;
    }
    sxy / (sxx * syy).sqrt()
}

/// Median, ignoring NaN; NaN for an empty input.
pub fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyPoint {
    pub arch: String,
    pub flops: u64,
    pub hom_vanilla: f64,
    pub hom_bct: f64,
    pub het_bct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRepetition {
    pub seed: u64,
    /// corr(hom-BCT, het-BCT)
    pub corr_bct: f64,
    /// corr(hom-vanilla, het-BCT)
    pub corr_vanilla: f64,
    pub points: Vec<StudyPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub repetitions: Vec<StudyRepetition>,
    pub median_corr_bct: f64,
    pub median_corr_vanilla: f64,
}

impl CorrelationReport {
    pub fn scatter_csv(&self) -> String {
        let mut out = String::from("seed,arch,flops,hom_vanilla,hom_bct,het_bct\n");
        for r in &self.repetitions {
            for p in &r.points {
                out.push_str(&format!("{},{},{},{},{},{}\n", r.seed, p.arch, p.flops, p.hom_vanilla, p.hom_bct, p.het_bct));
            }
        }
        out
    }
}

/// Trains `n_archs` uniformly sampled architectures with vanilla and with
/// BCT training and correlates their accuracies, once per repetition.
pub fn run_correlation_study(config: &ExperimentConfig, n_archs: usize) -> Result<CorrelationReport> {
    config.validate()?;
    let metric = config.test_metric()?;
    let reps = config.study_repetitions.max(1);
    let mut repetitions = Vec::with_capacity(reps);
    for r in 0..reps {
        let seed = config.seeds[r % config.seeds.len()] + (r / config.seeds.len()) as u64 * 1000;
        let ctx = prepare_seed(config, seed)?;
        let mut rng = stream(seed, tags::STUDY);
        let mut points = Vec::with_capacity(n_archs);
        let mut i = 0usize;
        while points.len() < n_archs {
            if i >= n_archs * MAX_STUDY_DRAWS {
                return Err(HvsError::Config(format!("only {} of {n_archs} sampled architectures trained without collapsing", points.len())));
            }
            let arch = sample_uniform(&config.space, &mut rng);
            let resolved = config.space.resolve(&arch)?;
            let src = QuerySource::Fresh { arch: resolved };
            let mut acc = BTreeMap::new();
            for method in [TrainMethod::Vanilla, TrainMethod::Bct] {
                let mut recipe = query_recipe(config, method, derive_seed(seed, 0x5700 + 2 * i as u64 + (method == TrainMethod::Bct) as u64));
                if let Some(e) = config.study_epochs {
                    recipe.epochs = e;
                }
                let q = train_query(&ctx.split.train, &src, &recipe, Some(&ctx.gallery), None)?;
                match ctx.evaluate(&metric, &q.model) {
                    Ok(a) => {
                        acc.insert(method.name(), a);
                    }
                    Err(HvsError::Core(hvs_core::Error::Degenerate(e))) => {
                        warn!("study seed {seed} arch {arch}: {} embedding collapsed ({e}), redrawing", method.name());
                        break;
                    }
                    Err(e) => return Err(e),
                }
            }
            i += 1;
            if acc.len() < 2 {
                continue;
            }
            let p = StudyPoint {
                arch: arch.to_string(),
                flops: config.space.arch_flops(&arch)?,
                hom_vanilla: acc["vanilla"].0,
                hom_bct: acc["bct"].0,
                het_bct: acc["bct"].1,
            };
            info!("study seed {seed} arch {}: {p:?}", points.len());
            points.push(p);
        }
        let hv: Vec<f64> = points.iter().map(|p| p.hom_vanilla).collect();
        let hb: Vec<f64> = points.iter().map(|p| p.hom_bct).collect();
        let eb: Vec<f64> = points.iter().map(|p| p.het_bct).collect();
        repetitions.push(StudyRepetition { seed, corr_bct: pearson(&hb, &eb), corr_vanilla: pearson(&hv, &eb), points });
    }
    let median_corr_bct = median(&repetitions.iter().map(|r| r.corr_bct).collect::<Vec<_>>());
    let median_corr_vanilla = median(&repetitions.iter().map(|r| r.corr_vanilla).collect::<Vec<_>>());
    Ok(CorrelationReport { repetitions, median_corr_bct, median_corr_vanilla })
}

/// Draw limit per requested study architecture before giving up.
pub const MAX_STUDY_DRAWS: usize = 10;

/// The four search conditions of the reward ablation.
pub const ABLATION_CONDITIONS: [(&str, bool, RewardKind); 4] = [
    ("vanilla+r1", false, RewardKind::R1),
    ("bct+r1", true, RewardKind::R1),
    ("bct+r2", true, RewardKind::R2),
    ("bct+r3", true, RewardKind::R3),
];

/// Trains a supernet on the seed's training split; `bct` adds the gallery
/// classifier term.
pub fn train_seed_supernet(config: &ExperimentConfig, ctx: &SeedContext, bct: bool) -> Result<Supernet> {
    let weights = if bct { CompositeWeights::BCT } else { CompositeWeights::VANILLA };
    let recipe = TrainRecipe { weights, ..config.supernet_recipe.clone() }.with_seed(derive_seed(ctx.seed, 0x50e7));
    let mut sn = Supernet::new(config.space.clone(), ctx.split.train.class_count(), &recipe)?;
    let log = train_supernet(&mut sn, &ctx.split.train, &recipe, config.warmup_epochs, Some(&ctx.gallery.classifier))?;
    info!("seed {}: {} supernet trained, final loss {:?}", ctx.seed, if bct { "bct" } else { "vanilla" }, log.final_loss());
    Ok(sn)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub seed: u64,
    pub condition: String,
    pub mean_het: f64,
}

/// Searches with every ablation condition, retrains each condition's five
/// best architectures from scratch with BCT, and reports test accuracies.
pub fn run_reward_ablation(config: &ExperimentConfig) -> Result<(ResultTable, Vec<AblationSummary>)> {
    config.validate()?;
    let test_metric = config.test_metric()?;
    let val_metric = config.val_metric()?;
    let mut table = ResultTable::default();
    let mut summary = Vec::new();
    for &seed in &config.seeds {
        let ctx = prepare_seed(config, seed)?;
        let vanilla_sn = train_seed_supernet(config, &ctx, false)?;
        let bct_sn = train_seed_supernet(config, &ctx, true)?;
        let val_gallery = ctx.split.val_gallery(config.split.gallery_per_id);
        let reward_ctx = RewardContext::new(val_metric, ctx.split.val.clone(), val_gallery, &ctx.gallery.model)?;
        let evo = EvolutionConfig { seed: derive_seed(seed, tags::EVOLVE), ..config.evolution.clone() };
        let mut retrained: BTreeMap<ArchDescriptor, (u64, f64, f64)> = BTreeMap::new();
        for (name, bct, kind) in ABLATION_CONDITIONS {
            let sn = if bct { &bct_sn } else { &vanilla_sn };
            let log = evolve(sn, &evo, kind, &reward_ctx)?;
            let mut hets = Vec::new();
            for c in &log.top {
                if !retrained.contains_key(&c.arch) {
                    let src = QuerySource::Fresh { arch: config.space.resolve(&c.arch)? };
                    let recipe = query_recipe(config, TrainMethod::Bct, derive_seed(seed, 0xab1a));
                    let q = train_query(&ctx.split.train, &src, &recipe, Some(&ctx.gallery), None)?;
                    let (qq, qg) = ctx.evaluate(&test_metric, &q.model)?;
                    retrained.insert(c.arch.clone(), (q.model.flops(), qq, qg));
                }
                let (flops, qq, qg) = retrained[&c.arch];
                hets.push(qg);
                table.push(ResultRow::new(&config.experiment_id, seed, name, c.arch.to_string(), flops, qq, qg));
            }
            let mean_het = hets.iter().sum::<f64>() / hets.len().max(1) as f64;
            info!("seed {seed} {name}: mean best-5 M(q,g) = {mean_het:.4}");
            summary.push(AblationSummary { seed, condition: name.into(), mean_het });
        }
    }
    Ok((table, summary))
}

/// Median over seeds of each condition's mean best-5 heterogeneous accuracy.
pub fn ablation_medians(summary: &[AblationSummary]) -> BTreeMap<String, f64> {
    let mut by: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for s in summary {
        by.entry(s.condition.clone()).or_default().push(s.mean_het);
    }
    by.into_iter().map(|(k, v)| (k, median(&v))).collect()
}
