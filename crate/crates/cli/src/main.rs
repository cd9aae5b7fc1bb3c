use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use flam_core::pipeline::{self, ManipulateRequest, StageRecord};
use flam_core::{Error, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "flam", version, about = "Feature-level attribute manipulation")]
struct Cli {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Seed for every random stream of the run.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override a config value by dot path, e.g. `manipulator.epochs=10`.
    #[arg(long = "set", value_name = "K=V", global = true)]
    sets: Vec<String>,

    /// Run directory for artifacts and the manifest.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic train, query and gallery feature files.
    GenData,
    /// Train one embedder and dictionary per attribute type.
    TrainEmbedders,
    /// Train the feature manipulators.
    TrainManipulator {
        /// Ablation variant, e.g. `M/OS/Adv` or `S/-/Adv`.
        #[arg(long)]
        variant: Option<String>,
    },
    /// Evaluate the stored manipulators; `--sweep` instead trains and
    /// compares every configured ablation variant.
    Evaluate {
        #[arg(long)]
        sweep: bool,
    },
    /// Manipulate one query and print `rank,id,similarity` lines.
    Manipulate {
        /// Feature file holding the query.
        #[arg(long)]
        input: PathBuf,
        /// Record index within the input file.
        #[arg(long, default_value_t = 0)]
        query: usize,
        #[arg(long = "attr")]
        attr_type: String,
        #[arg(long)]
        class: usize,
        #[arg(long, default_value_t = 10)]
        k: usize,
        /// Defaults to the run directory's checkpoint for the attribute.
        #[arg(long)]
        embedder: Option<PathBuf>,
        #[arg(long)]
        manipulator: Option<PathBuf>,
        #[arg(long)]
        gallery: Option<PathBuf>,
    },
    /// Print the stored report and sweep tables.
    Report,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Contract(_) => 2,
        Error::Training(_) | Error::Diverged { .. } => 4,
        _ => 3,
    }
}

fn resolve(cli: &Cli) -> flam_core::Result<RunConfig> {
    let base = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut cfg = base.with_overrides(&cli.sets)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    Ok(cfg)
}

fn print_stage(name: &str, rec: &StageRecord) {
    eprintln!("{name}: {:.1}s", rec.wall_clock_secs);
    for a in &rec.artifacts {
        println!("{}  {}", a.sha256, a.path);
    }
}

fn run(cli: Cli) -> flam_core::Result<()> {
    let mut cfg = resolve(&cli)?;
    match cli.command {
        Command::GenData => print_stage("gen-data", &pipeline::stage_gen_data(&cfg)?),
        Command::TrainEmbedders => print_stage("train-embedders", &pipeline::stage_train_embedders(&cfg)?),
        Command::TrainManipulator { variant } => {
            if let Some(v) = variant {
                cfg.manipulator.apply_variant(&v)?;
            }
            let rec = pipeline::stage_train_manipulator(&cfg)?;
            eprintln!("variant {}", cfg.manipulator.variant_name());
            print_stage("train-manipulator", &rec);
        }
        Command::Evaluate { sweep: false } => {
            let (rec, report) = pipeline::stage_evaluate(&cfg)?;
            print!("{}", report.to_text());
            print_stage("evaluate", &rec);
        }
        Command::Evaluate { sweep: true } => {
            let (rec, sweep) = pipeline::stage_sweep(&cfg)?;
            print!("{}", sweep.to_text());
            print_stage("sweep", &rec);
        }
        Command::Manipulate {
            input,
            query,
            attr_type,
            class,
            k,
            embedder,
            manipulator,
            gallery,
        } => {
            let mut req = ManipulateRequest::in_run(&cfg.out, input, &attr_type, class, k);
            req.query = query;
            if let Some(p) = embedder {
                req.embedder = p;
            }
            if let Some(p) = manipulator {
                req.manipulator = p;
            }
            if let Some(p) = gallery {
                req.gallery = p;
            }
            print!("{}", pipeline::format_hits(&pipeline::manipulate_and_search(&req)?));
        }
        Command::Report => print!("{}", pipeline::render_report(&cfg.out)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
