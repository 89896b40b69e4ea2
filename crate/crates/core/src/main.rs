use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dcp_lab::experiment::{self, ExperimentConfig};

#[derive(Parser)]
#[command(name = "dcp-lab", about = "Missing-modality prompt learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, overriding the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; falls back to DCP_LAB_THREADS, then the config.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate every variant × seed × rate cell.
    Run(Common),
    /// Train one model per missing rate 0.0, 0.1, …, 1.0 and write a curve.
    Sweep(Common),
    /// Aggregate summary CSVs into a ranked mean ± sd table.
    Compare {
        #[arg(required = true)]
        summaries: Vec<PathBuf>,
        /// Write the table here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Instantiate every ablation config and check variant contracts.
    Selftest(Common),
}

fn load(c: &Common) -> dcp_lab::Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => experiment::load_config(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seeds = vec![s];
    }
    if let Some(o) = &c.out {
        cfg.output = o.clone();
    }
    let env = std::env::var("DCP_LAB_THREADS").ok();
    match (c.threads, env) {
        (Some(t), _) => cfg.threads = t,
        (None, Some(v)) => {
            cfg.threads = v
                .parse()
                .map_err(|_| dcp_lab::Error::Config(format!("DCP_LAB_THREADS=`{v}` is not a count")))?
        }
        _ => {}
    }
    Ok(cfg)
}

fn print_census(out: &experiment::RunOutput) {
    for (v, c) in &out.census {
        println!(
            "census {v}: trainable={} total={} fraction={:.4}",
            c.trainable,
            c.total,
            c.fraction()
        );
    }
}

fn real_main(cli: Cli) -> dcp_lab::Result<()> {
    match cli.command {
        Command::Run(c) => {
            let cfg = load(&c)?;
            let out = experiment::run(&cfg)?;
            print_census(&out);
            println!("config_hash={}", out.hash);
            println!("wrote {} cell files and {}", out.cell_files.len(), out.summary_path.display());
        }
        Command::Sweep(c) => {
            let cfg = load(&c)?;
            let out = experiment::sweep(&cfg, &experiment::default_rates())?;
            print_census(&out.run);
            println!("config_hash={}", out.run.hash);
            println!("wrote {}", out.curve_path.display());
        }
        Command::Compare { summaries, out } => {
            let res = experiment::compare_files(&summaries)?;
            for r in &res.rejected {
                eprintln!("{r}");
            }
            match out {
                Some(p) => std::fs::write(&p, &res.table).map_err(|e| dcp_lab::Error::Io { path: p, source: e })?,
                None => print!("{}", res.table),
            }
        }
        Command::Selftest(c) => {
            let cfg = load(&c)?;
            for line in experiment::selftest(&cfg)? {
                println!("{line}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match real_main(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
