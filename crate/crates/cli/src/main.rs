use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use tmd_core::distance::DistanceTable;
use tmd_core::env::generate_dataset;
use tmd_core::mdp::{TabularMdp, TabularPolicy};
use tmd_core::oracle::{d_sd_pi, d_sd_star};
use tmd_core::train::{ablate, ablation_csv, RunConfig, Trainer};
use tmd_core::verify::{run_suite, SUITES};

#[derive(Parser)]
#[command(name = "tmd", version, about = "Temporal metric distillation: training, evaluation and tabular oracles")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a critic; writes final.ckpt (+ .json sidecar) and metrics.csv
    Train {
        config: PathBuf,
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the config's tasks and print a JSON report
    Eval { checkpoint: PathBuf, config: PathBuf },
    /// Run an invariant suite; exits non-zero on failure
    Verify {
        /// operators, oracle, gradients, divergence, end-to-end or all
        suite: String,
    },
    /// Train every loss variant on every seed and write a CSV summary
    Ablate {
        config: PathBuf,
        /// Write the CSV here instead of stdout
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump d* and the uniform-behavior distance of an MDP document as CSV
    Oracle {
        mdp: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Generate the config's dataset as JSON lines
    GenData {
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train { config, out } => {
            let cfg = RunConfig::load(&config)?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let mut t = Trainer::new(cfg)?;
            t.run(Some(&out))?;
            t.save(&out.join("final.ckpt"))?;
            t.write_metrics(&out.join("metrics.csv"))?;
            if let Some(last) = t.metrics.last() {
                eprintln!("trained {} steps, final loss {}", t.step, last.loss.total);
            }
        }
        Command::Eval { checkpoint, config } => {
            let mut t = Trainer::new(RunConfig::load(&config)?)?;
            t.load_state(&checkpoint)?;
            println!("{}", serde_json::to_string_pretty(&t.evaluate()?)?);
        }
        Command::Verify { suite } => {
            let names: Vec<&str> = match suite.as_str() {
                "all" => SUITES.to_vec(),
                s if SUITES.contains(&s) => vec![s],
                s => bail!("unknown suite {s:?}; expected one of {} or all", SUITES.join(", ")),
            };
            let mut ok = true;
            for name in names {
                let report = run_suite(name).expect("listed suite");
                println!("[{name}]");
                print!("{}", report.summary());
                ok &= report.passed();
            }
            return Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE });
        }
        Command::Ablate { config, out } => {
            let csv = ablation_csv(&ablate(&RunConfig::load(&config)?)?);
            match out {
                Some(path) => fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?,
                None => print!("{csv}"),
            }
        }
        Command::Oracle { mdp, out } => {
            let text = fs::read_to_string(&mdp).with_context(|| format!("reading {}", mdp.display()))?;
            let mdp: TabularMdp = serde_json::from_str(&text).context("parsing MDP document")?;
            fs::create_dir_all(&out)?;
            write_table(&d_sd_star(&mdp), &out.join("d_star.csv"))?;
            let beta = TabularPolicy::uniform(mdp.n_states(), mdp.n_actions());
            write_table(&d_sd_pi(&mdp, &beta)?.table, &out.join("d_beta.csv"))?;
        }
        Command::GenData { config, out } => {
            let cfg = RunConfig::load(&config)?;
            let world = cfg.world()?;
            let data = generate_dataset(&world, &cfg.dataset_spec()?)?;
            let file = fs::File::create(&out).with_context(|| format!("creating {}", out.display()))?;
            data.write_jsonl(BufWriter::new(file))?;
            eprintln!("{} trajectories, {} transitions", data.trajectories.len(), data.n_transitions());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn write_table(d: &DistanceTable, path: &Path) -> Result<()> {
    let file = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    d.write_csv(BufWriter::new(file))?;
    Ok(())
}
