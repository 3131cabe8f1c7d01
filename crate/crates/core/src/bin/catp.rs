use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use catp::checkpoint::{load_checkpoint, load_models, save_checkpoint, save_models};
use catp::config::ExperimentConfig;
use catp::datasets::write_archive;
use catp::evaluation::{baseline_hyper, diagnose_scores, run_rounds, score_samples, summarize, TrapThresholds};
use catp::manager::extract_attention;
use catp::training::{ablation_matrix, prepare, Trainer};
use catp::{CatpError, Corpus, Result};

/// Manager-worker trajectory prediction experiments.
#[derive(Parser)]
#[command(name = "catp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment file (TOML, or JSON by extension).
    #[arg(long)]
    config: PathBuf,
    /// Overrides `hyper.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to `out_dir` from the config, then
    /// `$CATP_OUT_ROOT/<verb>-<config hash>`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// `dotted.key=value`, applied before validation. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, env = "CATP_OUT_ROOT", default_value = "runs", hide_env_values = true)]
    out_root: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Build the configured corpus and write it as an archive.
    Generate(Common),
    /// Train a manager and its workers.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from `<out>/checkpoint`.
        #[arg(long)]
        resume: bool,
        /// Stop after this many iterations and leave a checkpoint to resume from.
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Score saved models on the test split, or run the multi-round protocol.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Directory written by `train` (its `model` subdirectory or the run itself).
        #[arg(long)]
        model: Option<PathBuf>,
        /// Split scored with `--model`.
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
        /// Top-k depth; defaults to `hyper.top_k`.
        #[arg(long)]
        k: Option<usize>,
        /// Add single-worker baseline rows to the multi-round report.
        #[arg(long)]
        baseline: bool,
    },
    /// Train every cell of the configured ablation grid.
    Ablate(Common),
    /// Write the manager's attention maps for one test sample.
    ExportAttention {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        /// Test-split sample index.
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Split {
    Train,
    Val,
    Test,
}

struct Run {
    config: ExperimentConfig,
    corpus: Corpus,
    out: PathBuf,
}

fn setup(c: &Common, verb: &str) -> Result<Run> {
    let mut overrides = c.overrides.clone();
    if let Some(seed) = c.seed {
        overrides.push(format!("hyper.seed={seed}"));
    }
    let config = ExperimentConfig::load(&c.config, &overrides)?;
    let base = c.config.parent().unwrap_or(Path::new("."));
    let corpus = config.dataset.load(base)?;
    let out = match (&c.out, &config.out_dir) {
        (Some(o), _) => o.clone(),
        (None, Some(o)) => o.clone(),
        (None, None) => c.out_root.join(format!("{verb}-{}", &config.hash()?[..12])),
    };
    fs::create_dir_all(&out)?;
    fs::write(out.join("config.json"), serde_json::to_string_pretty(&config)?)?;
    Ok(Run { config, corpus, out })
}

fn model_dir(path: &Path) -> PathBuf {
    let nested = path.join("model");
    if nested.join("manager.json").exists() {
        nested
    } else {
        path.to_path_buf()
    }
}

fn generate(c: &Common) -> Result<()> {
    let run = setup(c, "generate")?;
    let dir = run.out.join("corpus");
    let manifest = write_archive(&run.corpus, &dir)?;
    println!(
        "wrote {} train / {} val / {} test samples to {} (hash {})",
        manifest.counts[0],
        manifest.counts[1],
        manifest.counts[2],
        dir.display(),
        manifest.archive_hash()
    );
    Ok(())
}

fn train(c: &Common, resume: bool, max_steps: Option<usize>) -> Result<()> {
    let run = setup(c, "train")?;
    let hp = &run.config.hyper;
    let ckpt = run.out.join("checkpoint");
    let mut trainer = if resume {
        let snap = load_checkpoint(&ckpt)?;
        if &snap.hyper != hp {
            return Err(CatpError::config("checkpoint hyperparameters differ from the config"));
        }
        Trainer::restore(snap, &run.corpus)?
    } else {
        Trainer::new(hp, &run.corpus)?
    };
    let mut log = fs::File::create(run.out.join("metrics.jsonl"))?;
    for record in &trainer.state().loss_history {
        writeln!(log, "{}", serde_json::to_string(record)?)?;
    }
    let mut steps = 0;
    while !trainer.is_done() {
        if max_steps.is_some_and(|m| steps >= m) {
            save_checkpoint(&ckpt, &trainer.snapshot())?;
            println!("stopped after {steps} iterations; checkpoint in {}", ckpt.display());
            return Ok(());
        }
        steps += 1;
        let record = match trainer.step() {
            Ok((record, _)) => record,
            Err(e @ CatpError::Divergence { .. }) => {
                let dir = run.out.join("divergence");
                save_checkpoint(&dir, &trainer.snapshot())?;
                eprintln!("diagnostic snapshot written to {}", dir.display());
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        writeln!(log, "{}", serde_json::to_string(&record)?)?;
        if let Some(top1) = record.val_top1 {
            println!(
                "iteration {:>6}  val top-1 {:.6}  accuracy {:.4}  trap {}",
                record.iteration + 1,
                top1,
                record.manager_accuracy.unwrap_or(f64::NAN),
                record.trap.map_or("-".into(), |f| format!("{f:?}"))
            );
            save_checkpoint(&ckpt, &trainer.snapshot())?;
        }
    }
    log.flush()?;
    save_checkpoint(&ckpt, &trainer.snapshot())?;
    let [_, val, test] = catp::training::prepare_corpus(&run.corpus)?;
    let outcome = trainer.finish(Some(&val))?;
    save_models(&run.out.join("model"), &outcome.manager, &outcome.workers)?;
    let scores = score_samples(&outcome.manager, &outcome.workers, &test, hp.worker_loss)?;
    let summary = serde_json::json!({
        "config_hash": run.config.hash()?,
        "iterations": outcome.state.iteration,
        "best_iteration": outcome.best_iteration,
        "volumes": outcome.state.volumes,
        "validation": outcome.final_diagnostics,
        "test": summarize(&scores, hp.top_k)?,
    });
    fs::write(run.out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn evaluate(c: &Common, model: Option<&Path>, split: Split, k: Option<usize>, baseline: bool) -> Result<()> {
    let run = setup(c, "evaluate")?;
    let hp = &run.config.hyper;
    if let Some(model) = model {
        let (manager, workers) = load_models::<f64>(&model_dir(model))?;
        let k = k.unwrap_or(hp.top_k);
        if k == 0 || k > workers.len() {
            return Err(CatpError::invalid(format!("k must lie in 1..={}, got {k}", workers.len())));
        }
        let (name, samples) = match split {
            Split::Train => ("train", &run.corpus.train),
            Split::Val => ("val", &run.corpus.val),
            Split::Test => ("test", &run.corpus.test),
        };
        let prepared = prepare(samples, &run.corpus.schema, run.corpus.max_step)?;
        let scores = score_samples(&manager, &workers, &prepared, hp.worker_loss)?;
        let summary = serde_json::json!({
            "config_hash": run.config.hash()?,
            "split": name,
            "summary": summarize(&scores, k)?,
            "diagnostics": diagnose_scores(&scores, TrapThresholds::default())?,
        });
        fs::write(run.out.join("evaluation.json"), serde_json::to_string_pretty(&summary)?)?;
        println!("{}", serde_json::to_string_pretty(&summary)?);
        return Ok(());
    }
    let hash = run.config.hash()?;
    let rounds = run.config.rounds;
    let mode = run.config.split_mode;
    let mut report = run_rounds(hp, &run.corpus, rounds, mode, "CATP", hash.clone())?;
    if baseline {
        let base = run_rounds(&baseline_hyper(hp), &run.corpus, rounds, mode, "Baseline", hash)?;
        report.rows.extend(base.rows);
        report.rounds.extend(base.rounds);
    }
    let table = report.to_table();
    fs::write(run.out.join("report.md"), &table)?;
    fs::write(run.out.join("report.jsonl"), report.to_records()?)?;
    print!("{table}");
    Ok(())
}

fn ablate(c: &Common) -> Result<()> {
    let run = setup(c, "ablate")?;
    let table = ablation_matrix(&run.config.hyper, &run.config.ablation, &run.corpus)?;
    fs::write(run.out.join("ablation.md"), table.to_table())?;
    fs::write(run.out.join("ablation.json"), serde_json::to_string_pretty(&table)?)?;
    print!("{}", table.to_table());
    Ok(())
}

fn export_attention(c: &Common, model: &Path, index: usize) -> Result<()> {
    let run = setup(c, "attention")?;
    let (manager, _) = load_models::<f64>(&model_dir(model))?;
    let sample = run
        .corpus
        .test
        .get(index)
        .ok_or_else(|| CatpError::invalid(format!("test split has {} samples, no index {index}", run.corpus.test.len())))?;
    let prepared = prepare(std::slice::from_ref(sample), &run.corpus.schema, run.corpus.max_step)?;
    let maps = extract_attention(&manager, &prepared[0].context)?;
    let path = run.out.join(format!("attention_{index}.txt"));
    fs::write(&path, maps.to_text())?;
    println!("wrote {}", path.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Generate(c) => generate(c),
        Command::Train {
            common,
            resume,
            max_steps,
        } => train(common, *resume, *max_steps),
        Command::Evaluate {
            common,
            model,
            split,
            k,
            baseline,
        } => evaluate(common, model.as_deref(), *split, *k, *baseline),
        Command::Ablate(c) => ablate(c),
        Command::ExportAttention { common, model, index } => export_attention(common, model, *index),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
