use std::path::{Path, PathBuf};
use std::process::ExitCode;

use binpick::eval::Criterion;
use binpick::pipeline::{cmd_eval, cmd_gen, cmd_infer, cmd_report, cmd_train, RunConfig, Source, Split, Stage};
use binpick::{Error, Result};
use clap::{Parser, Subcommand};

/// Synthetic bin-picking scenes, 6D pose hypothesis networks and AP evaluation.
#[derive(Parser, Debug)]
#[command(name = "binpick", version)]
struct Cli {
    /// TOML run configuration; defaults apply to every missing key.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory holding the dataset, checkpoints, dumps and metrics.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    /// Worker threads for generation and inference (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate scenes, depth frames and annotations.
    Gen,
    /// Train the detector and pose heads, or the joint registration network.
    Train {
        #[arg(long)]
        stage: Stage,
    },
    /// Write hypothesis dumps for a dataset split.
    Infer {
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Evaluate hypothesis dumps (both criteria and all present dumps by default).
    Eval {
        #[arg(long)]
        criterion: Option<Criterion>,
        #[arg(long)]
        source: Option<Source>,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Merge evaluation directories into one table; inputs are `label=dir` or `dir`.
    Report {
        #[arg(required = true)]
        inputs: Vec<String>,
    },
}

fn load_config(cli: &Cli) -> Result<(RunConfig, PathBuf)> {
    let (mut cfg, base) = match &cli.config {
        Some(p) => (
            RunConfig::load(p)?,
            p.parent().map(Path::to_path_buf).unwrap_or_default(),
        ),
        None => (RunConfig::default(), PathBuf::from(".")),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok((cfg, base))
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    if let Command::Report { inputs } = &cli.command {
        let pairs: Vec<(String, PathBuf)> = inputs
            .iter()
            .map(|s| match s.split_once('=') {
                Some((label, dir)) => (label.to_string(), PathBuf::from(dir)),
                None => (s.clone(), PathBuf::from(s)),
            })
            .collect();
        let (table, curves) = cmd_report(&pairs, &cli.out)?;
        println!("{}\n{}", table.display(), curves.display());
        return Ok(());
    }
    let (cfg, base) = load_config(&cli)?;
    let model = cfg.model.load(&base)?;
    let out = &cli.out;
    match &cli.command {
        Command::Gen => {
            cmd_gen(&cfg, &model, out)?;
        }
        Command::Train { stage } => {
            let path = cmd_train(&cfg, &model, out, *stage)?;
            println!("{}", path.display());
        }
        Command::Infer { split } => {
            for p in cmd_infer(&cfg, &model, out, *split)? {
                println!("{}", p.display());
            }
        }
        Command::Eval { criterion, source, split } => {
            let criteria = match criterion {
                Some(c) => vec![*c],
                None => vec![Criterion::Sym, Criterion::Add],
            };
            let sources = match source {
                Some(s) => vec![*s],
                None => [Source::Raw, Source::Registered]
                    .into_iter()
                    .filter(|s| out.join(s.dump_name()).is_file())
                    .collect(),
            };
            if sources.is_empty() {
                return Err(Error::Data(format!("no hypothesis dump in {}", out.display())));
            }
            for s in sources {
                for m in cmd_eval(&cfg, &model, out, *split, s, &criteria)? {
                    println!("{} {} ap={} f1={}", s.name(), m.criterion.name(), m.ap, m.f1_best);
                }
            }
        }
        Command::Report { .. } => unreachable!(),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
