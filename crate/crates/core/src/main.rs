use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use siamtrack::synth::{gen_sequence, SequenceSpec};
use siamtrack::{checkpoint, gradcheck, metrics, seqio, tracker, train, Config, SiamModel};

#[derive(Parser)]
#[command(name = "siamtrack", version, about = "Siamese anchor-proposal tracker")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Finite-difference check of every primitive and composite block.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        cases: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// One forward pass; prints every intermediate shape.
    Forward {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train on synthetic triples and write a checkpoint and loss log.
    TrainToy {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: PathBuf,
    },
    /// Track a sequence directory from its first ground-truth box.
    Track {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        seq: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Precision/success evaluation of a prediction file.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Render a synthetic sequence directory.
    Gen {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: Option<&PathBuf>) -> Result<Config> {
    match path {
        Some(p) => Ok(Config::load(p)?),
        None => Ok(Config::default()),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gradcheck { cases, seed } => {
            let reports = gradcheck::full_suite(cases, seed)?;
            let mut failed = 0;
            for r in &reports {
                let status = if r.passed() { "ok" } else { "FAIL" };
                println!("{:<20} {:>4} cases  max rel err {:.3e}  {status}", r.name, r.cases, r.max_rel_err);
                failed += usize::from(!r.passed());
            }
            if failed > 0 {
                bail!("{failed} gradient checks failed");
            }
        }
        Command::Forward { config } => {
            let model = SiamModel::new(load_config(config.as_ref())?, 0)?;
            for (name, shape) in model.shape_report()? {
                println!("{name:<14} {shape:?}");
            }
            println!("parameters     {}", model.store.num_scalars());
        }
        Command::TrainToy { config, out, log } => {
            let cfg = match config {
                Some(p) => Config::load(&p)?,
                None => Config::toy(),
            };
            let run = train::train_toy(&cfg)?;
            std::fs::write(&log, train::loss_csv(&run.log)).with_context(|| format!("writing {}", log.display()))?;
            checkpoint::save(&run.model, &out)?;
            if let (Some(first), Some(last)) = (run.log.first(), run.log.last()) {
                println!("loss {:.4} -> {:.4} over {} steps", first.loss.total, last.loss.total, run.log.len());
            }
        }
        Command::Track { ckpt, seq, out } => {
            let model = checkpoint::load(&ckpt)?;
            let (frames, gt) = seqio::read_sequence(&seq)?;
            let pred = tracker::track_sequence(&model, &frames, &gt[0])?;
            seqio::write_boxes(&out, &pred)?;
            println!("tracked {} frames", pred.len());
        }
        Command::Eval { pred, gt, json } => {
            let result = metrics::eval_ope(&seqio::read_boxes(&pred)?, &seqio::read_boxes(&gt)?)?;
            println!("precision@20 {:.4}  success AUC {:.4}", result.precision_at_20, result.success_auc);
            if let Some(path) = json {
                std::fs::write(&path, serde_json::to_string_pretty(&result)?)
                    .with_context(|| format!("writing {}", path.display()))?;
            }
        }
        Command::Gen { seed, spec, out } => {
            let spec: SequenceSpec = match spec {
                Some(p) => {
                    let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
                    serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
                }
                None => SequenceSpec::default(),
            };
            let seq = gen_sequence(seed, &spec)?;
            seqio::write_sequence(&out, &seq)?;
            println!("wrote {} frames to {}", seq.frames.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
