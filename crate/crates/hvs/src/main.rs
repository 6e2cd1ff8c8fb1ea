use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use hvs::checkpoint::{load_gallery, load_model, load_supernet, save_model, save_supernet};
use hvs::dataset::{load_dataset, load_split, save_dataset, save_split};
use hvs::harness::{
    ablation_medians, cost_curve_csv, default_ratios, emit_results, run_correlation_study, run_method_comparison,
    run_reward_ablation, ExperimentConfig,
};
use hvs_core::data::{generate_synthetic, make_open_set_split, OpenSetSplit, SplitConfig};
use hvs_core::losses::{CompositeWeights, LossKind};
use hvs_core::nn::ModelArch;
use hvs_core::retrieval::{evaluate_pair, EvalSets, Metric};
use hvs_core::search::{evolve, EvolutionConfig, RewardContext, RewardKind};
use hvs_core::supernet::{train_supernet, SearchSpace, Supernet};
use hvs_core::train::{prune_model, train_gallery, train_query, GalleryModel, PruneMethod, PruneSpec, QuerySource, TrainMethod, TrainRecipe};

#[derive(Parser)]
#[command(name = "hvs", about = "Compatibility-aware heterogeneous visual search", version = hvs::VERSION)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic identity-cluster dataset (and optionally its split).
    GenData(GenData),
    /// Evaluate a query checkpoint against a gallery checkpoint.
    Eval(Eval),
    /// Amortized embedding cost as a function of the query/gallery ratio.
    CostCurve(CostCurve),
    /// Train the gallery model; its classifier is frozen in the checkpoint.
    TrainGallery(TrainGallery),
    /// Train a query model with vanilla, kd, bct or finetune.
    TrainQuery(TrainQuery),
    /// Prune the hidden layers of a gallery checkpoint.
    Prune(Prune),
    /// Warm up and train the weight-sharing supernet against a gallery.
    TrainSupernet(TrainSupernetArgs),
    /// Evolutionary search over a trained supernet.
    Search(Search),
    /// Method comparison over pruned query architectures.
    Compare(Experiment),
    /// Correlation study over sampled architectures.
    Study(Experiment),
    /// Reward ablation over supernet searches.
    Ablate(Experiment),
}

#[derive(Args)]
struct DataArgs {
    /// Dataset file (HVSD).
    #[arg(long)]
    data: PathBuf,
    /// Split file (JSON); a default split seeded by --split-seed otherwise.
    #[arg(long)]
    split: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
}

impl DataArgs {
    fn load(&self) -> anyhow::Result<OpenSetSplit> {
        let d = load_dataset(&self.data).with_context(|| format!("reading {}", self.data.display()))?;
        Ok(match &self.split {
            Some(p) => load_split(p, &d)?,
            None => make_open_set_split(&d, &SplitConfig { seed: self.split_seed, ..Default::default() })?,
        })
    }
}

#[derive(Args)]
struct GenData {
    #[arg(long, default_value_t = 120)]
    identities: usize,
    #[arg(long, default_value_t = 20)]
    per_id: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 0.1)]
    noise: f32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Also write a split file here.
    #[arg(long)]
    split_out: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    test_identities: usize,
}

#[derive(Args)]
struct Eval {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    query_ckpt: PathBuf,
    #[arg(long)]
    gallery_ckpt: PathBuf,
    /// top<k>, tpir or tar
    #[arg(long, default_value = "top1")]
    metric: String,
    /// FPIR / FAR target for tpir / tar.
    #[arg(long, default_value_t = 0.01)]
    target: f64,
}

#[derive(Args)]
struct CostCurve {
    #[arg(long)]
    gallery_flops: f64,
    #[arg(long)]
    query_flops: f64,
    #[arg(long, default_value_t = 6)]
    max_exp: u32,
    #[arg(long, default_value_t = 4)]
    per_decade: u32,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RecipeArgs {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// norm_softmax or cosface
    #[arg(long)]
    loss: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Recipe JSON; flags override its fields.
    #[arg(long)]
    recipe: Option<PathBuf>,
}

impl RecipeArgs {
    fn build(&self, default_epochs: usize) -> anyhow::Result<TrainRecipe> {
        let mut r = match &self.recipe {
            Some(p) => serde_json::from_str(&fs::read_to_string(p)?)?,
            None => TrainRecipe { epochs: default_epochs, ..TrainRecipe::default() },
        };
        if let Some(e) = self.epochs {
            r.epochs = e;
        }
        if let Some(lr) = self.lr {
            r.base_lr = lr;
        }
        if let Some(b) = self.batch_size {
            r.batch_size = b;
        }
        if let Some(l) = &self.loss {
            r.loss = l.parse::<LossKind>()?;
        }
        r.seed = self.seed;
        Ok(r)
    }
}

#[derive(Args)]
struct TrainGallery {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_delimiter = ',', default_value = "256,256")]
    hidden: Vec<usize>,
    #[arg(long, default_value_t = 16)]
    embedding_dim: usize,
    #[command(flatten)]
    recipe: RecipeArgs,
    #[arg(long)]
    out: PathBuf,
    /// Training log (JSON).
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct TrainQuery {
    #[command(flatten)]
    data: DataArgs,
    /// vanilla, kd, finetune or bct
    #[arg(long)]
    method: String,
    #[arg(long)]
    gallery_ckpt: Option<PathBuf>,
    /// Fresh MLP hidden widths (ignored when --prune-method is given).
    #[arg(long, value_delimiter = ',', default_value = "26,26")]
    hidden: Vec<usize>,
    /// Derive the architecture by pruning the gallery: magnitude or activation.
    #[arg(long)]
    prune_method: Option<String>,
    #[arg(long, default_value_t = 0.9)]
    prune_fraction: f64,
    #[command(flatten)]
    recipe: RecipeArgs,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct Prune {
    #[arg(long)]
    gallery_ckpt: PathBuf,
    #[arg(long)]
    method: String,
    #[arg(long)]
    fraction: f64,
    /// Calibration data for activation pruning (training split is used).
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainSupernetArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Search space JSON; defaults otherwise.
    #[arg(long)]
    space: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    warmup: usize,
    #[arg(long, default_value_t = 1.0)]
    lambda1: f32,
    #[arg(long, default_value_t = 1.0)]
    lambda2: f32,
    #[arg(long)]
    gallery_ckpt: Option<PathBuf>,
    #[command(flatten)]
    recipe: RecipeArgs,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct Search {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    supernet_ckpt: PathBuf,
    #[arg(long)]
    gallery_ckpt: PathBuf,
    #[arg(long, default_value = "r3")]
    reward: String,
    #[arg(long)]
    budget: Option<u64>,
    #[arg(long, default_value_t = 20)]
    generations: usize,
    #[arg(long, default_value_t = 50)]
    population: usize,
    #[arg(long, default_value_t = 40)]
    crossover: usize,
    #[arg(long, default_value_t = 0.1)]
    mutate: f64,
    #[arg(long, default_value_t = 0.1)]
    random: f64,
    #[arg(long, default_value = "top5")]
    metric: String,
    #[arg(long, default_value_t = 2)]
    gallery_per_id: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Search log (JSON); the top five go next to it as top5.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Experiment {
    /// Experiment configuration (JSON); defaults otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

impl Experiment {
    fn config(&self) -> anyhow::Result<(ExperimentConfig, PathBuf)> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = &self.seeds {
            c.seeds = s.clone();
        }
        if let Some(d) = &self.out_dir {
            c.output_dir = Some(d.clone());
        }
        let dir = c.output_dir.clone().unwrap_or_else(|| PathBuf::from("results"));
        Ok((c, dir))
    }
}

/// `println!` that reports a closed stdout as an error instead of panicking.
macro_rules! out {
    ($($t:tt)*) => {
        writeln!(std::io::stdout().lock(), $($t)*)?
    };
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData(a) => {
            let d = generate_synthetic(a.identities, a.per_id, a.dim, a.noise, a.seed)?;
            save_dataset(&a.out, &d)?;
            if let Some(p) = &a.split_out {
                let cfg = SplitConfig { test_identities: a.test_identities, seed: a.seed, ..Default::default() };
                save_split(p, &make_open_set_split(&d, &cfg)?, &cfg)?;
            }
            out!("wrote {} samples of width {} to {}", d.len(), d.dim(), a.out.display());
        }
        Command::Eval(a) => {
            let split = a.data.load()?;
            let q = load_model(&a.query_ckpt)?;
            let g = load_gallery(&a.gallery_ckpt)?;
            let metric = Metric::parse(&a.metric, a.target)?;
            let sets = EvalSets { probes: &split.test_probe_mated, nonmated: Some(&split.test_probe_nonmated), gallery: &split.test_gallery };
            let report = evaluate_pair(&metric, &q.model, &g.model, sets)?;
            out!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::CostCurve(a) => {
            let csv = cost_curve_csv(a.gallery_flops, a.query_flops, &default_ratios(a.max_exp, a.per_decade))?;
            match &a.out {
                Some(p) => fs::write(p, csv)?,
                None => std::io::stdout().lock().write_all(csv.as_bytes())?,
            }
        }
        Command::TrainGallery(a) => {
            let split = a.data.load()?;
            let recipe = a.recipe.build(40)?;
            let arch = ModelArch::mlp(split.train.dim(), &a.hidden, a.embedding_dim);
            let (g, log) = train_gallery(&split.train, &arch, &recipe)?;
            save_model(&a.out, &g)?;
            if let Some(p) = &a.log {
                write_json(p, &log)?;
            }
            out!("gallery: {} flops, final loss {:?}", g.model.flops(), log.final_loss());
        }
        Command::TrainQuery(a) => {
            let split = a.data.load()?;
            let method: TrainMethod = a.method.parse()?;
            let recipe = a.recipe.build(80)?.with_method(method);
            let gallery = a.gallery_ckpt.as_deref().map(load_gallery).transpose()?;
            let source = match &a.prune_method {
                Some(m) => QuerySource::Pruned { spec: PruneSpec { method: m.parse::<PruneMethod>()?, fraction: a.prune_fraction } },
                None => QuerySource::Fresh { arch: ModelArch::mlp(split.train.dim(), &a.hidden, gallery.as_ref().map_or(16, |g| g.model.embedding_dim())) },
            };
            let q = train_query(&split.train, &source, &recipe, gallery.as_ref(), None)?;
            save_model(&a.out, &GalleryModel { model: q.model.clone(), classifier: q.classifier })?;
            if let Some(p) = &a.log {
                write_json(p, &q.log)?;
            }
            out!("query ({}): {} flops, final loss {:?}", method.name(), q.model.flops(), q.log.final_loss());
        }
        Command::Prune(a) => {
            let g = load_gallery(&a.gallery_ckpt)?;
            let split = a.data.load()?;
            let spec = PruneSpec { method: a.method.parse()?, fraction: a.fraction };
            let p = prune_model(&g.model, &spec, split.train.features())?;
            save_model(&a.out, &GalleryModel { model: p.model.clone(), classifier: g.classifier.thawed() })?;
            out!("pruned to {:?}: {} flops", p.model.arch().blocks, p.model.flops());
        }
        Command::TrainSupernet(a) => {
            let split = a.data.load()?;
            let space: SearchSpace = match &a.space {
                Some(p) => serde_json::from_str(&fs::read_to_string(p)?)?,
                None => SearchSpace { input_dim: split.train.dim(), ..SearchSpace::default() },
            };
            let mut recipe = a.recipe.build(40)?;
            recipe.weights = CompositeWeights::new(a.lambda1, a.lambda2)?;
            let gallery = a.gallery_ckpt.as_deref().map(load_gallery).transpose()?;
            let mut sn = Supernet::new(space, split.train.class_count(), &recipe)?;
            let log = train_supernet(&mut sn, &split.train, &recipe, a.warmup, gallery.as_ref().map(|g| &g.classifier))?;
            save_supernet(&a.out, &sn)?;
            if let Some(p) = &a.log {
                write_json(p, &log)?;
            }
            out!("supernet trained, final loss {:?}", log.final_loss());
        }
        Command::Search(a) => {
            let split = a.data.load()?;
            let sn = load_supernet(&a.supernet_ckpt)?;
            let g = load_gallery(&a.gallery_ckpt)?;
            let metric = Metric::parse(&a.metric, 0.0)?;
            let ctx = RewardContext::new(metric, split.val.clone(), split.val_gallery(a.gallery_per_id), &g.model)?;
            let kind: RewardKind = a.reward.parse()?;
            let cfg = EvolutionConfig {
                generations: a.generations,
                population_size: a.population,
                crossover_size: a.crossover,
                mutate_prob: a.mutate,
                random_select_prob: a.random,
                flop_budget: a.budget,
                seed: a.seed,
            };
            let log = evolve(&sn, &cfg, kind, &ctx)?;
            write_json(&a.out, &log)?;
            let top = a.out.with_file_name("top5.json");
            write_json(&top, &log.top)?;
            for c in &log.top {
                out!("{} reward {:.4} ({} flops)", c.arch, c.reward.value, c.flops);
            }
        }
        Command::Compare(e) => {
            let (c, dir) = e.config()?;
            let t = run_method_comparison(&c)?;
            let (csv, _) = emit_results(&t, &dir, "method_comparison")?;
            out!("{} rows written to {}", t.len(), csv.display());
        }
        Command::Study(e) => {
            let (c, dir) = e.config()?;
            let r = run_correlation_study(&c, c.study_archs)?;
            fs::create_dir_all(&dir)?;
            write_json(&dir.join("correlation.json"), &r)?;
            fs::write(dir.join("correlation_scatter.csv"), r.scatter_csv())?;
            out!("median corr(hom-bct, het-bct) = {:.4}, corr(hom-vanilla, het-bct) = {:.4}", r.median_corr_bct, r.median_corr_vanilla);
        }
        Command::Ablate(e) => {
            let (c, dir) = e.config()?;
            let (t, summary) = run_reward_ablation(&c)?;
            emit_results(&t, &dir, "reward_ablation")?;
            write_json(&dir.join("reward_ablation_summary.json"), &summary)?;
            for (cond, m) in ablation_medians(&summary) {
                out!("{cond}: median mean best-5 M(q,g) = {m:.4}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        // Output piped into `head` and friends.
        Err(e) if e.downcast_ref::<std::io::Error>().is_some_and(|e| e.kind() == std::io::ErrorKind::BrokenPipe) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
