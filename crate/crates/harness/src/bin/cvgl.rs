//! Command-line entry point. Exit codes: 0 success, 1 usage or config,
//! 2 invariant or test failure, 3 I/O or format.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use cvgl_harness::ablate::{ablate, check_equivalence, Grid};
use cvgl_harness::checkpoint::Checkpoint;
use cvgl_harness::dataset::{gen_dataset, Dataset, DatasetConfig};
use cvgl_harness::descriptors::DescriptorFile;
use cvgl_harness::eval::{evaluate_both, Direction, HeldOut, DEFAULT_KS};
use cvgl_harness::manifest::{Split, ViewKind};
use cvgl_harness::report::Report;
use cvgl_harness::train::{describe_all, init_checkpoint, train_from};
use cvgl_harness::{gradsuite, HarnessError, Result, TrainConfig};

const THREADS_ENV: &str = "CVGL_THREADS";

#[derive(Parser)]
#[command(name = "cvgl", version, about = "Cross-view geo-localization on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic two-view dataset and its manifest.
    GenData(GenData),
    /// Train a model and write a checkpoint.
    Train(TrainCmd),
    /// Evaluate a checkpoint on the held-out locations.
    Eval(EvalCmd),
    /// Run the finite-difference gradient suites.
    Gradcheck(GradcheckCmd),
    /// Train and evaluate a grid of ablation variants.
    Ablate(AblateCmd),
    /// Write descriptors of one split and view.
    ExportDescriptors(ExportCmd),
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    train_locations: usize,
    #[arg(long, default_value_t = 50)]
    heldout_locations: usize,
    #[arg(long, default_value_t = 8)]
    a_views: usize,
    #[arg(long, default_value_t = 1)]
    b_views: usize,
    #[arg(long, default_value_t = 64)]
    image_size: usize,
}

/// Mirrors [`TrainConfig`].
#[derive(Args, Clone)]
struct ConfigArgs {
    #[arg(long, default_value_t = 0.005)]
    lr: f64,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 24)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    image_size: usize,
    #[arg(long, default_value_t = 3)]
    experts: usize,
    #[arg(long, default_value_t = 32)]
    num_queries: usize,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    use_adapter: bool,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    use_mscr: bool,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    use_moe: bool,
}

impl From<&ConfigArgs> for TrainConfig {
    fn from(a: &ConfigArgs) -> Self {
        TrainConfig {
            lr: a.lr,
            epochs: a.epochs,
            batch_size: a.batch_size,
            seed: a.seed,
            image_size: a.image_size,
            experts: a.experts,
            num_queries: a.num_queries,
            use_adapter: a.use_adapter,
            use_mscr: a.use_mscr,
            use_moe: a.use_moe,
        }
    }
}

#[derive(Args)]
struct TrainCmd {
    /// Dataset directory or manifest file.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Continue from this checkpoint; its config must match the flags.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum DirectionArg {
    A2b,
    B2a,
    Both,
}

#[derive(Args)]
struct EvalCmd {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "both")]
    direction: DirectionArg,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_KS)]
    k: Vec<usize>,
    /// Report path; printed to stdout when omitted.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Directory receiving query and gallery descriptor files.
    #[arg(long)]
    descriptors: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckCmd {
    #[arg(long, default_value = "all")]
    scope: String,
}

#[derive(Args)]
struct AblateCmd {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = vec![1, 3, 5])]
    expert_counts: Vec<usize>,
    /// MSCR settings to cross with the expert counts.
    #[arg(long, value_delimiter = ',', default_values_t = vec![true, false])]
    mscr: Vec<bool>,
    #[arg(long)]
    no_dense: bool,
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Query,
    Gallery,
}

#[derive(Args)]
struct ExportCmd {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    split: SplitArg,
    #[arg(long, value_parser = ["a", "b", "A", "B"])]
    view: String,
    #[arg(long)]
    out: PathBuf,
}

fn write_text(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| HarnessError::io(p, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn export(store: &Checkpoint, data: &Dataset, idx: &[usize], out: &Path) -> Result<usize> {
    let imgs: Vec<_> = idx.iter().map(|&i| &data.images[i]).collect();
    let rows = describe_all(&store.params, &store.config.model_config(), &imgs)?;
    let ids = idx.iter().map(|&i| data.manifest.records[i].location as u64).collect();
    let file = DescriptorFile::from_rows(&rows, ids)?;
    file.save(out)?;
    Ok(file.count())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => {
            let cfg = DatasetConfig {
                train_locations: a.train_locations,
                heldout_locations: a.heldout_locations,
                a_views: a.a_views,
                b_views: a.b_views,
                image_size: a.image_size,
                seed: a.seed,
                ..DatasetConfig::default()
            };
            let start = Instant::now();
            let m = gen_dataset(&cfg, &a.out)?;
            println!(
                "wrote {} records for {} locations to {} in {:.1}s",
                m.records.len(),
                m.locations,
                a.out.display(),
                start.elapsed().as_secs_f64()
            );
        }
        Command::Train(a) => {
            let cfg = TrainConfig::from(&a.config);
            cfg.validate()?;
            let data = Dataset::load(&a.data)?;
            let ckpt = match &a.resume {
                Some(p) => Checkpoint::load(p, Some(&cfg))?,
                None => init_checkpoint(&cfg)?,
            };
            let outcome = train_from(ckpt, &data, |e| println!("{e}"))?;
            outcome.checkpoint.save(&a.out)?;
            println!("backbone_sha256={}", outcome.backbone_hash);
            println!("checkpoint={}", a.out.display());
        }
        Command::Eval(a) => {
            let ckpt = Checkpoint::load(&a.checkpoint, None)?;
            let data = Dataset::load(&a.data)?;
            let held = HeldOut::encode(&ckpt.params, &ckpt.config, &data)?;
            if let Some(dir) = &a.descriptors {
                std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
                export(&ckpt, &data, &data.indices(Split::Query, ViewKind::A), &dir.join("query_a.cvgd"))?;
                export(&ckpt, &data, &data.indices(Split::Gallery, ViewKind::B), &dir.join("gallery_b.cvgd"))?;
            }
            let report = match a.direction {
                DirectionArg::Both => evaluate_both(&held, &a.k)?.1,
                DirectionArg::A2b => held.evaluate(Direction::AToB, &a.k)?.report(),
                DirectionArg::B2a => held.evaluate(Direction::BToA, &a.k)?.report(),
            };
            write_text(a.report.as_deref(), &report.to_string())?;
        }
        Command::Gradcheck(a) => {
            let start = Instant::now();
            let results = gradsuite::run(&a.scope)?;
            println!("{:<10} {:<28} {:>10} {:>8} result", "scope", "case", "rel err", "tol");
            for r in &results {
                println!("{r}");
            }
            let failed = results.iter().filter(|r| !r.passed()).count();
            println!(
                "{} cases, {} failed, {:.1}s",
                results.len(),
                failed,
                start.elapsed().as_secs_f64()
            );
            if failed > 0 {
                return Err(HarnessError::Invariant(format!("{failed} gradient checks failed")));
            }
        }
        Command::Ablate(a) => {
            let grid = Grid {
                base: TrainConfig::from(&a.config),
                experts: a.expert_counts,
                mscr: a.mscr,
                include_dense: !a.no_dense,
            };
            grid.base.validate()?;
            let data = Dataset::load(&a.data)?;
            let table = ablate(&grid, &data, |r| {
                eprintln!("{}: A->B R@1 {:.4}, B->A R@1 {:.4}", r.config.label(), r.a2b.0, r.b2a.0)
            })?;
            println!("{table}");
            let report: Report = table.report();
            if let Some(p) = &a.report {
                write_text(Some(p), &report.to_string())?;
            }
            check_equivalence(&table)?;
        }
        Command::ExportDescriptors(a) => {
            let ckpt = Checkpoint::load(&a.checkpoint, None)?;
            let data = Dataset::load(&a.data)?;
            let view: ViewKind = a.view.to_ascii_uppercase().parse().map_err(HarnessError::Config)?;
            let split = match a.split {
                SplitArg::Train => Split::Train,
                SplitArg::Query => Split::Query,
                SplitArg::Gallery => Split::Gallery,
            };
            let idx = data.indices(split, view);
            if idx.is_empty() {
                return Err(HarnessError::Config("the requested split and view hold no images".into()));
            }
            let n = export(&ckpt, &data, &idx, &a.out)?;
            println!("wrote {n} descriptors to {}", a.out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    if let Ok(v) = std::env::var(THREADS_ENV) {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    eprintln!("error: {e}");
                    return ExitCode::from(1);
                }
            }
            _ => {
                eprintln!("error: {THREADS_ENV} must be a positive integer, got {v:?}");
                return ExitCode::from(1);
            }
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
