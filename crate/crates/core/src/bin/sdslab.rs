use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use sdslab::image::write_atomic;
use sdslab::lab::ablation::{ablation_suite, ROWS};
use sdslab::lab::experiment::{build_scene, consistency_of_run_dir, run_in_scene};
use sdslab::lab::gradfield::{gradient_csv, gradient_field, mean_pairwise_cosine, select, InitKind};
use sdslab::lab::{ExperimentConfig, InitCache};
use sdslab::LabError;

/// Toy score-distillation lab.
#[derive(Parser)]
#[command(name = "sdslab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run both stages and write the run artifacts.
    Run { config: PathBuf },
    /// Dump latent gradients of the random and shape inits for the first camera.
    Gradfield {
        config: PathBuf,
        /// Comma-separated timesteps.
        #[arg(long, default_value = "50,600", value_delimiter = ',')]
        t: Vec<usize>,
        /// Noise draws per timestep.
        #[arg(long, default_value_t = 20)]
        draws: usize,
    },
    /// Run the six component rows over a seed list.
    Ablate {
        config: PathBuf,
        /// Inclusive range `a..b` or comma-separated list.
        #[arg(long, default_value = "1..10", value_parser = parse_seeds)]
        seeds: Seeds,
    },
    /// Recompute the mode assignment of a finished run directory.
    Consistency { run_dir: PathBuf },
}

#[derive(Clone, Debug)]
struct Seeds(Vec<u64>);

fn parse_seeds(s: &str) -> Result<Seeds, String> {
    let bad = |_| format!("invalid seed list '{s}'");
    if let Some((a, b)) = s.split_once("..") {
        let (a, b): (u64, u64) = (a.trim().parse().map_err(bad)?, b.trim().parse().map_err(bad)?);
        if a > b {
            return Err(format!("empty seed range '{s}'"));
        }
        return Ok(Seeds((a..=b).collect()));
    }
    s.split(',')
        .map(|x| x.trim().parse().map_err(bad))
        .collect::<Result<Vec<_>, _>>()
        .map(Seeds)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("sdslab: {e}");
            ExitCode::from(match e {
                LabError::Config(_) | LabError::Range { .. } => 2,
                LabError::Divergence { .. } => 3,
                _ => 1,
            })
        }
    }
}

fn dispatch(command: Command) -> sdslab::Result<()> {
    match command {
        Command::Run { config } => {
            let config = ExperimentConfig::load(&config)?;
            let scene = build_scene(&config)?;
            let report = run_in_scene(&config, &scene, None)?;
            let dir = config.resolved_output_dir();
            report.write_artifacts(&dir)?;
            print!("{}", report.assignment.to_csv());
            println!("consistency {}", report.assignment.consistency);
            println!("final_chs {}", report.final_chs);
            println!("checksum {}", report.checksum());
            println!("wrote {}", dir.display());
        }
        Command::Gradfield { config, t, draws } => {
            let config = ExperimentConfig::load(&config)?;
            let scene = build_scene(&config)?;
            let samples = gradient_field(&config, &scene, &InitCache::new(), &t, draws)?;
            let path = config.resolved_output_dir().join("gradfield.csv");
            write_atomic(&path, gradient_csv(&samples).as_bytes())?;
            println!("init,t,mean_pairwise_cosine");
            for init in [InitKind::Random, InitKind::Shape] {
                for &step in &t {
                    let c = mean_pairwise_cosine(&select(&samples, init, step));
                    println!("{},{step},{c}", init.name());
                }
            }
            println!("wrote {}", path.display());
        }
        Command::Ablate { config, seeds } => {
            let config = ExperimentConfig::load(&config)?;
            let table = ablation_suite(&config, &seeds.0, |r| {
                eprintln!("{} seed {}: consistency {} final_chs {}", ROWS[r.row].name, r.seed, r.consistency, r.final_chs);
            })?;
            let dir = config.resolved_output_dir();
            write_atomic(&dir.join("ablation.csv"), table.summary_csv().as_bytes())?;
            write_atomic(&dir.join("ablation_seeds.csv"), table.seeds_csv().as_bytes())?;
            print!("{}", table.summary_csv());
            println!("wrote {}", dir.display());
        }
        Command::Consistency { run_dir } => {
            let assignment = consistency_of_run_dir(&run_dir)?;
            print!("{}", assignment.to_csv());
            println!("consistency {}", assignment.consistency);
        }
    }
    Ok(())
}
