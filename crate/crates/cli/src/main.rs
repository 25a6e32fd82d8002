use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use moe_shear::grouping::{partition, PartitionAlgorithm};
use moe_shear::io::{self, generate_synthetic, random_tokens, SyntheticSpec};
use moe_shear::merging::{LearnConfig, MergeStrategy, TopKPolicy};
use moe_shear::pipeline::{
    self, apply_groups, compare_strategies, enumerate_drop, evaluate, hint_stats, hints_csv, load_groups, read_json,
    run_pipeline, save_groups, similarities, similarity_csv_name, write_json, PruneJob, PruneSettings,
};
use moe_shear::similarity::{Metric, RepresentationKind, SimilarityMatrix};
use moe_shear::{Batch, Error, Model, Real, Result, Storage};
use serde_json::json;

#[derive(Parser)]
#[command(name = "moe-shear", version, about = "Prune mixture-of-experts layers by merging similar experts")]
struct Cli {
    /// Seed for every random choice.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true, value_enum, default_value_t = LogFormat::Plain)]
    log: LogFormat,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum LogFormat {
    Json,
    Plain,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic model with planted duplicate experts.
    GenSynth(GenSynth),
    /// Pairwise expert similarity, one CSV per layer.
    Sim(Sim),
    /// Partition similarity matrices into groups.
    Group(Group),
    /// Merge groups into a smaller model.
    Prune(Prune),
    /// Score every way of dropping experts from each layer.
    EnumDrop(EnumDrop),
    /// Expert visit statistics on calibration data.
    Hints(Hints),
    /// Run several pruning settings side by side.
    Compare(Compare),
    /// Compare a pruned model against the original.
    Eval(Eval),
    /// Run a full job described by a JSON file.
    Run(Run),
}

#[derive(Args)]
struct CalibArgs {
    /// Calibration embeddings container.
    #[arg(long)]
    calib: Option<PathBuf>,
    /// Calibration rows to sample.
    #[arg(long, default_value_t = 128)]
    samples: usize,
}

impl CalibArgs {
    fn load(&self, seed: u64) -> Result<Vec<Batch>> {
        match &self.calib {
            Some(p) => io::load_calibration(p, self.samples, 1, seed),
            None => Ok(Vec::new()),
        }
    }
}

#[derive(Args)]
struct GenSynth {
    /// JSON recipe; defaults to 8 experts in 4 planted pairs.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Override the recipe's noise level.
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    out: PathBuf,
    /// Also write standard-normal calibration embeddings here.
    #[arg(long)]
    calib_out: Option<PathBuf>,
    #[arg(long, default_value_t = 512)]
    calib_rows: usize,
}

#[derive(Args)]
struct Sim {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_parser = parse_metric, default_value = "cka-linear")]
    metric: Metric,
    #[arg(long = "repr", value_parser = parse_repr, default_value = "data")]
    representation: RepresentationKind,
    #[command(flatten)]
    calib: CalibArgs,
    /// Mixup-augment the calibration batch.
    #[arg(long)]
    augment: bool,
    /// RBF bandwidth as a multiple of the median distance.
    #[arg(long, default_value_t = 1.0)]
    rbf_factor: f64,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct Group {
    /// Similarity CSVs, one per layer in layer order.
    #[arg(long, required = true, num_args = 1..)]
    sim: Vec<PathBuf>,
    #[arg(long)]
    r: usize,
    #[arg(long, value_parser = parse_algo, default_value = "greedy")]
    algo: PartitionAlgorithm,
    /// Metric that produced the CSVs (negative MSE is shifted for spectral clustering).
    #[arg(long, value_parser = parse_metric, default_value = "cka-linear")]
    metric: Metric,
    /// Experts that must stay alone, as a comma separated list.
    #[arg(long, value_delimiter = ',')]
    protected: Vec<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct LearnArgs {
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    /// Keep λ at 1 instead of learning it.
    #[arg(long)]
    fixed_lambda: bool,
}

impl LearnArgs {
    fn config(&self, samples: usize) -> LearnConfig {
        LearnConfig {
            lr: self.lr,
            epochs: self.epochs,
            samples,
            batch_size: self.batch_size,
            learn_lambda: !self.fixed_lambda,
            ..LearnConfig::default()
        }
    }
}

#[derive(Args)]
struct Prune {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    groups: PathBuf,
    #[arg(long, value_parser = parse_strategy, default_value = "uniform")]
    strategy: MergeStrategy,
    #[command(flatten)]
    calib: CalibArgs,
    #[command(flatten)]
    learn: LearnArgs,
    /// Scale top-k with the number of kept experts instead of preserving it.
    #[arg(long)]
    proportional_top_k: bool,
    /// Embeddings for the report; 64 random tokens otherwise.
    #[arg(long)]
    eval: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Report path; defaults to report.json next to the output.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct EnumDrop {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    calib: CalibArgs,
    #[arg(long, default_value_t = 2)]
    drop: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Hints {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    calib: CalibArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Compare {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    calib: CalibArgs,
    /// JSON array of pruning settings.
    #[arg(long)]
    jobs: PathBuf,
    #[arg(long)]
    eval: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    pruned: PathBuf,
    #[arg(long)]
    eval: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    tokens: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Run {
    #[arg(long)]
    job: PathBuf,
}

fn parse_named<T: serde::de::DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(json!(s)).map_err(|_| format!("unknown value '{s}'"))
}

fn parse_metric(s: &str) -> std::result::Result<Metric, String> {
    parse_named(s)
}

fn parse_repr(s: &str) -> std::result::Result<RepresentationKind, String> {
    parse_named(s)
}

fn parse_algo(s: &str) -> std::result::Result<PartitionAlgorithm, String> {
    parse_named(s)
}

fn parse_strategy(s: &str) -> std::result::Result<MergeStrategy, String> {
    parse_named(s)
}

fn load(path: &Path) -> Result<Model> {
    Ok(io::load_model::<Storage>(path)?.cast())
}

fn load_eval(path: Option<&PathBuf>, tokens: usize, d_model: usize, seed: u64) -> Result<moe_shear::Matrix<Real>> {
    match path {
        Some(p) => io::load_embeddings(p),
        None => Ok(pipeline::eval_tokens(tokens, d_model, seed)),
    }
}

fn init_logging(format: LogFormat) {
    let mut b = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"));
    if let LogFormat::Json = format {
        b.format(|buf, record| {
            let line = json!({
                "level": record.level().as_str(),
                "target": record.target(),
                "message": record.args().to_string(),
            });
            writeln!(buf, "{line}")
        });
    }
    b.init();
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let seed = cli.seed.unwrap_or(0);
    match cli.command {
        Command::GenSynth(a) => {
            let mut spec: SyntheticSpec = match &a.spec {
                Some(p) => read_json(p)?,
                None => SyntheticSpec::default(),
            };
            if let Some(n) = a.noise {
                spec.noise_sigma = n;
            }
            if let Some(s) = cli.seed {
                spec.seed = s;
            }
            let m = generate_synthetic::<Storage>(&spec)?;
            io::save_model(&m, &a.out)?;
            log::info!("wrote {} ({} parameters)", a.out.display(), m.param_count());
            if let Some(c) = &a.calib_out {
                let x = random_tokens::<Storage>(a.calib_rows, spec.d_model, spec.seed.wrapping_add(1));
                io::save_embeddings(c, &x, "synthetic")?;
                log::info!("wrote {} ({} rows)", c.display(), a.calib_rows);
            }
        }
        Command::Sim(a) => {
            let m = load(&a.model)?;
            let settings = PruneSettings {
                metric: a.metric,
                representation: a.representation,
                augment: a.augment,
                rbf_factor: a.rbf_factor,
                seed,
                ..PruneSettings::default()
            };
            let sims = similarities(&m, &a.calib.load(seed)?, &settings)?;
            fs::create_dir_all(&a.out_dir)?;
            for (l, s) in sims.iter().enumerate() {
                let path = a.out_dir.join(similarity_csv_name(l));
                fs::write(&path, s.to_csv())?;
                log::info!("wrote {}", path.display());
            }
        }
        Command::Group(a) => {
            let protected = a.protected.iter().copied().collect();
            let parts = a
                .sim
                .iter()
                .enumerate()
                .map(|(l, p)| {
                    let sim = SimilarityMatrix::<Real>::from_csv(&fs::read_to_string(p)?, a.metric)?;
                    partition(&sim, a.algo, a.r, &protected, seed.wrapping_add(l as u64)).map_err(|e| e.in_layer(l))
                })
                .collect::<Result<Vec<_>>>()?;
            save_groups(&a.out, &parts)?;
            for (l, p) in parts.iter().enumerate() {
                log::info!("layer {l}: {:?} objective {:.6}", p.groups, p.objective_value.unwrap_or(f64::NAN));
            }
        }
        Command::Prune(a) => {
            let m = load(&a.model)?;
            let parts = load_groups(&a.groups, &m)?;
            let calib = a.calib.load(seed)?;
            let policy = if a.proportional_top_k {
                TopKPolicy::Proportional
            } else {
                TopKPolicy::Preserve
            };
            let learn = a.learn.config(a.calib.samples);
            let (pruned, specs, learned) = apply_groups(&m, &parts, &calib, a.strategy, &learn, policy, seed)?;
            let x = load_eval(a.eval.as_ref(), 64, m.d_model, seed)?;
            let eval = evaluate(&m, &pruned, &x)?;
            io::save_model(&pruned.cast::<Storage>(), &a.out)?;
            let layers: Vec<_> = parts
                .iter()
                .zip(&specs)
                .zip(&learned)
                .map(|((p, s), o)| {
                    json!({
                        "groups": p.groups,
                        "merge": s,
                        "learned_eval_loss": o.as_ref().map(|o| o.eval_loss),
                        "uniform_eval_loss": o.as_ref().map(|o| o.uniform_eval_loss),
                    })
                })
                .collect();
            let report_path = a
                .report
                .unwrap_or_else(|| a.out.parent().unwrap_or(Path::new(".")).join("report.json"));
            write_json(&report_path, &json!({ "layers": layers, "eval": eval }))?;
            log::info!(
                "wrote {}; end-to-end mse {:.3e}, parameters {} -> {}",
                a.out.display(),
                eval.end_to_end_mse,
                eval.params_before,
                eval.params_after
            );
        }
        Command::EnumDrop(a) => {
            let m = load(&a.model)?;
            let calib = a.calib.load(seed)?;
            let first = calib
                .first()
                .ok_or_else(|| Error::Config("enum-drop needs --calib".into()))?;
            let tables = enumerate_drop(&m, a.drop, first.embeddings())?;
            for t in &tables {
                log::info!("layer {}: best drop {:?} loss {:.6e}", t.layer, t.best, t.best_loss);
            }
            write_json(&a.out, &tables)?;
        }
        Command::Hints(a) => {
            let m = load(&a.model)?;
            let visits = hint_stats(&m, &a.calib.load(seed)?)?;
            fs::write(&a.out, hints_csv(&m, &visits))?;
            log::info!("wrote {}", a.out.display());
        }
        Command::Compare(a) => {
            let m = load(&a.model)?;
            let jobs: Vec<PruneSettings> = read_json(&a.jobs)?;
            let x = load_eval(a.eval.as_ref(), 64, m.d_model, seed)?;
            let rows = compare_strategies(&m, &a.calib.load(seed)?, &x, &jobs)?;
            for r in &rows {
                log::info!("{}: end-to-end mse {:.3e}", r.label, r.eval.end_to_end_mse);
            }
            write_json(&a.out, &rows)?;
        }
        Command::Eval(a) => {
            let m = load(&a.model)?;
            let pruned = load(&a.pruned)?;
            let x = load_eval(a.eval.as_ref(), a.tokens, m.d_model, seed)?;
            let report = evaluate(&m, &pruned, &x)?;
            log::info!("end-to-end mse {:.3e}", report.end_to_end_mse);
            write_json(&a.out, &report)?;
        }
        Command::Run(a) => {
            let mut job: PruneJob = read_json(&a.job)?;
            if let Some(s) = cli.seed {
                job.settings.seed = s;
            }
            run_pipeline(&job)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.log);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
