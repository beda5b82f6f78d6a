//! `fecil`: run, evaluate and ablate class-incremental training.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fecil_core::ablation::{run_ablation, thread_budget};
use fecil_core::checkpoint::load_compact;
use fecil_core::config::Config;
use fecil_core::gradcheck::{run_suite, TOLERANCE};
use fecil_core::mixaug::AugMode;
use fecil_core::report::{plotdata, write_run, RunSummary};
use fecil_core::trainer::{accuracy, compact_logits, load_datasets};
use fecil_core::Error;

#[derive(Parser)]
#[command(name = "fecil", version, about = "Dynamic feature expansion with rehearsal-CutMix compression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train all incremental steps and write metrics, summary and checkpoints.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override `run.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a compact checkpoint on the test classes it knows.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Config naming the dataset.
        #[arg(long)]
        config: PathBuf,
    },
    /// Finite-difference check of every differentiable primitive.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compare compression augmentations over several seeds.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        /// Comma-separated subset of none,mixup,cutmix,r_mixup,r_cutmix.
        #[arg(long, value_delimiter = ',')]
        modes: Option<Vec<AugMode>>,
    },
    /// Per-step accuracy series from a metrics.csv.
    Plotdata {
        #[arg(long)]
        metrics: PathBuf,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn load_config(path: &Path) -> Result<Config, Failure> {
    Config::load(path).map_err(|e| Failure::Usage(e.to_string()))
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, text).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn execute(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Run { config, out, seed } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = seed {
                cfg.run.seed = s;
            }
            fs::create_dir_all(&out).map_err(|e| Failure::Runtime(format!("{}: {e}", out.display())))?;
            let session = fecil_core::trainer::Session::new(cfg.clone())?;
            let (_, reports) = session.run(Some(&out))?;
            let summary = RunSummary::new(
                &reports,
                cfg.run.seed,
                cfg.dataset.seed,
                cfg.train.compress_aug,
                cfg.run.record_epoch_time,
            )?;
            write_run(&out, &summary, &reports, cfg.run.record_epoch_time)?;
            for r in &reports {
                println!(
                    "step {}: {} classes, big top1 {:.2}, compact top1 {:.2} top5 {:.2}",
                    r.step, r.classes_seen, r.big.top1, r.compact.top1, r.compact.top5
                );
            }
            println!("avg {:.2} last {:.2}", summary.compact.avg_top1, summary.compact.last_top1);
        }
        Command::Eval { checkpoint, config } => {
            let cfg = load_config(&config)?;
            let (mut net, norm) = load_compact(&checkpoint)?;
            let (_, test) = load_datasets(&cfg)?;
            let ids = net.head.class_ids.clone();
            let seen = test.filter_classes(&ids)?;
            // head rows follow the class order, so a class's row is its label
            let labels: Vec<usize> = seen.labels.iter().map(|c| ids.iter().position(|x| x == c).unwrap()).collect();
            let logits = compact_logits(&mut net, &seen.images, &norm, cfg.run.eval_batch_size)?;
            let acc = accuracy(&logits, &labels)?;
            let json = serde_json::json!({
                "classes": ids.len(),
                "samples": labels.len(),
                "top1": acc.top1,
                "top5": acc.top5,
            });
            println!("{json}");
        }
        Command::Gradcheck { trials, seed } => {
            let reports = run_suite(trials, seed)?;
            let mut ok = true;
            for r in &reports {
                let verdict = if r.passed() { "ok" } else { "FAIL" };
                println!(
                    "{:<24} {:>5} trials  max rel err {:.3e}  {verdict}",
                    r.primitive, r.trials, r.max_rel_error
                );
                ok &= r.passed();
            }
            if !ok {
                return Err(Failure::Runtime(format!("gradient check exceeded {TOLERANCE:e}")));
            }
        }
        Command::Ablate { config, out, seeds, modes } => {
            let cfg = load_config(&config)?;
            let modes = modes.unwrap_or_else(|| AugMode::ALL.to_vec());
            let seeds: Vec<u64> = (0..seeds).map(|s| cfg.run.seed + s).collect();
            let (table, _) = run_ablation(&cfg, &seeds, &modes, thread_budget(), Some(&out))?;
            write_file(&out.join("ablation.csv"), &table.to_csv()?)?;
            write_file(&out.join("ablation.md"), &table.to_markdown())?;
            print!("{}", table.to_markdown());
        }
        Command::Plotdata { metrics, out } => {
            let text = fs::read_to_string(&metrics).map_err(|e| Failure::Runtime(format!("{}: {e}", metrics.display())))?;
            let series = plotdata(&text, &metrics.display().to_string())?;
            match out {
                Some(p) => write_file(&p, &series)?,
                None => print!("{series}"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
