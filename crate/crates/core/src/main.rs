use clap::{Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use wise_core::editor::EditMode;
use wise_core::harness::{
    evaluate, gen_dataset, load_edited, load_stream, merge_ablate, prepare, report, run_experiment, save_edited,
    save_world, summary_text, sweep, write_artifacts, DatasetConfig, ExperimentConfig, SweepGrid,
};
use wise_core::merge::MergeStrategy;
use wise_core::{Result, WiseError};

#[derive(Parser)]
#[command(name = "wise", version, about = "Lifelong model editing with side memories on a tiny transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain a model on the corpus the config describes.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic fact world (stream.jsonl, corpus.txt, irrelevant.txt, held_out.txt).
    GenData {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 6)]
        subject_len: usize,
    },
    /// Apply an edit stream and save the model with its side memories.
    Edit {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        stream: PathBuf,
        #[arg(long, default_value = "merge")]
        mode: EditMode,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score an edited checkpoint on a stream.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        stream: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Full experiment: edit, evaluate at every checkpoint, write all artifacts.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Grid over mask ratio and shard count.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        grid: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Same stream under several merge strategies.
    MergeAblate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "ties,linear,sign")]
        strategies: Vec<MergeStrategy>,
    },
}

fn existing(path: &Path) -> Result<&Path> {
    if path.exists() {
        Ok(path)
    } else {
        Err(WiseError::Input(format!("{} does not exist", path.display())))
    }
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::load(existing(path)?)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain { config, out } => {
            let mut cfg = load_config(&config)?;
            cfg.pretrained = None;
            let bench = prepare(&cfg)?;
            bench.model.save(&out)?;
            if let Some(log) = &bench.pretrain_log {
                println!("final loss {:.4}", log.losses.last().copied().unwrap_or(f64::NAN));
            }
            println!("saved {}", out.display());
        }
        Command::GenData { seed, n, out, subject_len } => {
            let mut dc = DatasetConfig::new(seed, n);
            dc.subject_len = subject_len;
            let world = gen_dataset(&dc)?;
            save_world(&world, &out)?;
            println!("wrote {} edits to {}", world.stream.len(), out.display());
        }
        Command::Edit { config, stream, mode, out } => {
            let mut cfg = load_config(&config)?;
            let n = load_stream(existing(&stream)?)?.len();
            cfg.stream = Some(stream);
            cfg.mode = mode;
            cfg.checkpoints = vec![n];
            let (bench, result) = run_experiment(&cfg)?;
            save_edited(&out, &bench.model, &result.memories, result.aggregation)?;
            print!("{}", summary_text(&result.reports));
            println!("saved {}", out.display());
        }
        Command::Eval { ckpt, stream, report: path } => {
            let (model, bank) = load_edited(existing(&ckpt)?)?;
            let stream = load_stream(existing(&stream)?)?;
            let metrics = evaluate(&model, &bank, &stream)?;
            let summary = report(std::slice::from_ref(&metrics), &path)?;
            print!("{}", summary_text(&[metrics]));
            println!("wrote {} and {}", path.display(), summary.display());
        }
        Command::Run { config, out } => {
            let cfg = load_config(&config)?;
            let (bench, result) = run_experiment(&cfg)?;
            write_artifacts(&result, &bench.model, &out)?;
            print!("{}", summary_text(&result.reports));
            println!("wrote {}", out.display());
        }
        Command::Sweep { config, grid, out } => {
            let cfg = load_config(&config)?;
            let grid = match grid {
                Some(g) => SweepGrid::load(existing(&g)?)?,
                None => SweepGrid::default(),
            };
            let res = sweep(&cfg, &grid)?;
            let csv = res.to_csv();
            match out {
                Some(p) => std::fs::write(&p, &csv)?,
                None => print!("{csv}"),
            }
            if let Some((rho, k, avg)) = res.best() {
                println!("best rho={rho} k={k} avg={avg:.4} k*rho={:.2}", k as f64 * rho);
            }
        }
        Command::MergeAblate { config, strategies } => {
            let cfg = load_config(&config)?;
            println!("strategy,rel,gen,loc,avg");
            for (s, r) in merge_ablate(&cfg, &strategies)? {
                println!("{s},{:.4},{:.4},{:.4},{:.4}", r.rel, r.gen, r.loc, r.avg);
            }
        }
    }
    Ok(())
}

fn one_line(msg: &str) -> String {
    msg.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("bad arguments");
            eprintln!("wise: {}", one_line(first.trim_start_matches("error:")));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("wise: {}", one_line(&e.to_string()));
            ExitCode::FAILURE
        }
    }
}
