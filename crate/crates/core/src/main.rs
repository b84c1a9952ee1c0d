use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use clda::harness::{
    emit_plot_data, gradcheck_suite, run_ablation_grid, run_experiment, ExperimentConfig, GridAxis, HarnessError,
    RunReport,
};
use clda::trainer::Variant;

#[derive(Parser)]
#[command(name = "clda", version, about = "Contrastive semi-supervised domain adaptation engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunFlags {
    /// Run a single seed (overrides the config's seed list).
    #[arg(long, conflicts_with = "seeds")]
    seed: Option<u64>,
    /// Run seeds 0..n (overrides the config's seed list).
    #[arg(long)]
    seeds: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Parallel workers.
    #[arg(long)]
    workers: Option<usize>,
    /// Training variant, e.g. CLDA, S+T, CLDA-no-instance.
    #[arg(long)]
    variant: Option<Variant>,
}

#[derive(Subcommand)]
enum Command {
    /// Train every seed of a config and write a report.
    Train {
        config: PathBuf,
        #[command(flatten)]
        flags: RunFlags,
    },
    /// Run a Cartesian grid over one or more config axes.
    Ablate {
        config: PathBuf,
        /// `name=v1,v2,...`; repeatable.
        #[arg(long = "axis", required = true)]
        axes: Vec<String>,
        #[command(flatten)]
        flags: RunFlags,
    },
    /// Finite-difference check of every loss gradient.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Negative control: add a term with a deliberately missing gradient.
        #[arg(long, hide = true)]
        broken_gradient: bool,
    },
    /// Write the split of one seed as CSV.
    Datagen {
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Seed to generate (defaults to the config's first seed).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Flatten reports into `axis,value,seed,metric,score` rows.
    Plotdata {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        /// Output file (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_with_flags(path: &Path, flags: &RunFlags) -> Result<ExperimentConfig, HarnessError> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = flags.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(n) = flags.seeds {
        cfg.seeds = (0..n).collect();
    }
    if let Some(out) = &flags.out {
        cfg.out_dir = out.to_string_lossy().into_owned();
    }
    if let Some(w) = flags.workers {
        cfg.workers = w;
    }
    if let Some(v) = flags.variant {
        cfg.train.variant = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_report(report: &RunReport) {
    for s in &report.seeds {
        match s.best_test_accuracy {
            Some(acc) => println!(
                "seed {:>4}  best-val step {:>5}  val {:.4}  test {:.4}",
                s.seed,
                s.best_step.unwrap_or(0),
                s.best_val_accuracy.unwrap_or(f64::NAN),
                acc
            ),
            None => println!("seed {:>4}  {:?}: {}", s.seed, s.status, s.error.as_deref().unwrap_or("")),
        }
    }
    let t = &report.summary.best_test;
    if let (Some(m), Some(sd)) = (t.mean, t.std) {
        println!("test accuracy {m:.4} ± {sd:.4} over {} seeds", t.n);
    }
}

fn run(cli: Cli) -> Result<ExitCode, HarnessError> {
    match cli.command {
        Command::Train { config, flags } => {
            let cfg = load_with_flags(&config, &flags)?;
            let report = run_experiment(&cfg)?;
            print_report(&report);
            println!("report: {}", Path::new(&cfg.out_dir).join(clda::harness::REPORT_FILE).display());
            Ok(if report.all_ok() { ExitCode::SUCCESS } else { ExitCode::from(2) })
        }
        Command::Ablate { config, axes, flags } => {
            let cfg = load_with_flags(&config, &flags)?;
            let axes: Vec<GridAxis> = axes.iter().map(|a| GridAxis::parse(a)).collect::<Result<_, _>>()?;
            let grid = run_ablation_grid(&cfg, &axes)?;
            print!("{}", std::fs::read_to_string(&grid.csv_path).unwrap_or_default());
            let ok = grid.cells.iter().all(|c| c.report.all_ok());
            Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(2) })
        }
        Command::Gradcheck { seed, broken_gradient } => {
            let summary = gradcheck_suite(seed, broken_gradient).map_err(|e| HarnessError::Run(e.to_string()))?;
            for e in &summary.entries {
                println!(
                    "{:<9} worst rel error {:.3e}  ({} configs, {} coords, {} near relu kinks skipped)  {}",
                    e.loss,
                    e.worst_rel_error,
                    e.configs,
                    e.checked,
                    e.excluded,
                    if e.passed { "ok" } else { "FAIL" }
                );
            }
            Ok(if summary.passed() { ExitCode::SUCCESS } else { ExitCode::from(3) })
        }
        Command::Datagen { config, out, seed } => {
            let cfg = ExperimentConfig::load(&config)?;
            let seed = seed.unwrap_or(cfg.seeds[0]);
            let (split, _) = cfg
                .build_split(seed)
                .map_err(|e| HarnessError::Config(e.to_string()))?;
            let file = std::fs::File::create(&out).map_err(|source| HarnessError::Io {
                path: out.clone(),
                source,
            })?;
            split.write_csv(file).map_err(|e| HarnessError::Run(e.to_string()))?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Plotdata { reports, out } => {
            let loaded: Vec<RunReport> = reports.iter().map(|p| RunReport::load(p)).collect::<Result<_, _>>()?;
            let csv = emit_plot_data(&loaded);
            match out {
                Some(path) => std::fs::write(&path, csv).map_err(|source| HarnessError::Io { path, source })?,
                None => print!("{csv}"),
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // Usage errors count as configuration errors.
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
