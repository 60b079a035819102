use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use lixp::adapters::Classifier;
use lixp::config::EpisodeFile;
use lixp::data::sample_pairs;
use lixp::eval::{compare_runs, run_episodes, EpisodePools, EpisodeSpec, ResultTable};
use lixp::format::{export_embeddings, import_embeddings, read_checkpoint, write_checkpoint};
use lixp::{gradcheck, seed, trainer, Experiment, Model};

/// Context-aware contrastive pretraining, few-shot adapters and episodic
/// evaluation on synthetic paired data.
#[derive(Parser)]
#[command(name = "lixp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from an experiment config; writes a checkpoint and the training log.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Start from this checkpoint instead of a fresh init (post-training
        /// when the config enables the contextual objective).
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Checkpoint path; the log goes next to it as `<stem>.log.csv`.
        #[arg(long, default_value = "model.ckpt")]
        out: PathBuf,
    },
    /// One training run per τ_ctx initialization; one log CSV per run plus a
    /// long-format trajectory CSV.
    SweepTau {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1e-4,1e-2,1")]
        inits: Vec<f64>,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Embed a held-out pool of the config's synthetic task with a trained
    /// checkpoint and write a LIXPEMB1 file.
    ExportEmbeddings {
        #[arg(long)]
        ckpt: PathBuf,
        /// Experiment config describing the data and the encoders.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
        /// Rows per class; defaults to the config's samples_per_class.
        #[arg(long)]
        samples_per_class: Option<usize>,
        /// Also write the embedded class texts (label c on row c).
        #[arg(long)]
        texts_out: Option<PathBuf>,
    },
    /// Evaluate one classifier on embedding files.
    Adapt {
        #[arg(long)]
        support: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        texts: PathBuf,
        /// One of: zero_shot, prototypical, tip, cv_tip, nn_plurality,
        /// nn_softmax, nn_rank, snn_zero_shot.
        #[arg(long)]
        method: String,
        #[arg(long)]
        shots: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        episodes: usize,
        /// Result CSV; a JSON mirror is written alongside.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the episodic protocol described by a spec file.
    Episodes {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Absolute/relative gains between two result tables plus the log-linear fit.
    Compare {
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long)]
        contextual: PathBuf,
        /// Gain CSV; a JSON mirror with the fit is written alongside.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Support,
    Test,
}

fn model_from_checkpoint(e: &Experiment, ckpt: &Path) -> Result<Model> {
    let mut model = e.build_model()?;
    let stored = read_checkpoint(ckpt)?;
    let loaded = model.load_params(&stored)?;
    let missing: Vec<&str> = model
        .store
        .iter()
        .filter(|p| stored.find(&p.name).is_none())
        .map(|p| p.name.as_str())
        .collect();
    if missing
        .iter()
        .any(|n| n.starts_with("image.") || n.starts_with("text."))
    {
        bail!(
            "{} does not match the encoders in the config; missing {}",
            ckpt.display(),
            missing.join(", ")
        );
    }
    eprintln!("loaded {loaded} parameters from {}", ckpt.display());
    Ok(model)
}

fn log_path(ckpt: &Path) -> PathBuf {
    let stem = ckpt.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    ckpt.with_file_name(format!("{stem}.log.csv"))
}

fn print_table(table: &ResultTable) {
    println!(
        "{:<16} {:>5} {:>8} {:>8} {:>8}",
        "classifier", "K", "episodes", "mean", "std"
    );
    for a in table.aggregates() {
        println!(
            "{:<16} {:>5} {:>8} {:>8.4} {:>8.4}",
            a.classifier, a.shots, a.episodes, a.mean, a.std
        );
    }
}

fn save_table(table: &ResultTable, out: Option<&Path>) -> Result<()> {
    print_table(table);
    if let Some(out) = out {
        table.save(out)?;
        eprintln!(
            "wrote {} and {}",
            out.display(),
            out.with_extension("json").display()
        );
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train {
            config,
            resume,
            out,
        } => {
            let e = Experiment::load(&config)?;
            let model = match &resume {
                Some(ckpt) => model_from_checkpoint(&e, ckpt)?,
                None => e.build_model()?,
            };
            let data = e.training_data()?;
            let (model, log) = trainer::train(model, &data, &e.lixp, &e.train)?;
            write_checkpoint(&model.store, &out)?;
            log.save_csv(log_path(&out))?;
            if let Some(r) = log.last() {
                println!(
                    "step {} total {:.5} base {:.5} ctx {} tau1 {:.4} tau2 {:.4} tau_ctx {:.4e} bias {:.4}",
                    r.step,
                    r.total,
                    r.base_term,
                    r.ctx_term.map_or("-".into(), |c| format!("{c:.5}")),
                    r.tau1,
                    r.tau2,
                    r.tau_ctx,
                    r.bias
                );
            }
            eprintln!("wrote {} and {}", out.display(), log_path(&out).display());
        }
        Command::SweepTau {
            config,
            inits,
            out_dir,
        } => {
            let e = Experiment::load(&config)?;
            let data = e.training_data()?;
            let logs = trainer::tau_ctx_sweep(&e.model_config(), &data, &e.lixp, &e.train, &inits)?;
            fs::create_dir_all(&out_dir)
                .with_context(|| format!("creating {}", out_dir.display()))?;
            let mut long = csv::Writer::from_path(out_dir.join("tau_ctx_trajectories.csv"))?;
            long.write_record(["init", "step", "tau_ctx", "base_term", "ctx_term", "total"])?;
            for (init, log) in inits.iter().zip(&logs) {
                log.save_csv(out_dir.join(format!("sweep_tau_ctx_{init:e}.csv")))?;
                for r in &log.records {
                    long.write_record([
                        format!("{init:e}"),
                        r.step.to_string(),
                        r.tau_ctx.to_string(),
                        r.base_term.to_string(),
                        r.ctx_term.map(|c| c.to_string()).unwrap_or_default(),
                        r.total.to_string(),
                    ])?;
                }
                let last = log.last().map_or(f64::NAN, |r| r.tau_ctx);
                println!("init {init:e}: final tau_ctx {last:.4e}");
            }
            long.flush()?;
            eprintln!("wrote trajectories to {}", out_dir.display());
        }
        Command::ExportEmbeddings {
            ckpt,
            data,
            out,
            split,
            samples_per_class,
            texts_out,
        } => {
            let e = Experiment::load(&data)?;
            let model = model_from_checkpoint(&e, &ckpt)?;
            let per_class = samples_per_class.unwrap_or(e.data.samples_per_class);
            let pairs = match split {
                Split::Train => e.training_data()?,
                Split::Support => {
                    sample_pairs(&e.data.resampled(per_class, seed::purpose::SUPPORT_POOL))?
                }
                Split::Test => {
                    sample_pairs(&e.data.resampled(per_class, seed::purpose::TEST_POOL))?
                }
            };
            export_embeddings(&model.embed_images(&pairs.images)?, &pairs.labels, &out)?;
            println!("{} rows -> {}", pairs.labels.len(), out.display());
            if let Some(path) = texts_out {
                let texts = model.embed_texts(&e.data.class_texts())?;
                let labels: Vec<usize> = (0..texts.len()).collect();
                export_embeddings(&texts, &labels, &path)?;
                println!("{} class texts -> {}", labels.len(), path.display());
            }
        }
        Command::Adapt {
            support,
            test,
            texts,
            method,
            shots,
            seed,
            episodes,
            out,
        } => {
            let classifier = Classifier::from_name(&method)?;
            ensure!(
                shots > 0 || !classifier.needs_support(),
                "{method} needs support examples; pass --shots >= 1"
            );
            let pools = EpisodePools::from_files(
                &import_embeddings(&support)?,
                &import_embeddings(&test)?,
                &import_embeddings(&texts)?,
            )?;
            let spec = EpisodeSpec {
                shots: vec![shots],
                num_episodes: episodes,
                seed,
                classifiers: vec![classifier],
                parallel: true,
            };
            save_table(&run_episodes(&pools, &spec)?, out.as_deref())?;
        }
        Command::Episodes { spec, out } => {
            let f = EpisodeFile::load(&spec)?;
            let pools = EpisodePools::from_files(
                &import_embeddings(&f.support)?,
                &import_embeddings(&f.test)?,
                &import_embeddings(&f.texts)?,
            )?;
            save_table(&run_episodes(&pools, &f.spec)?, out.as_deref())?;
        }
        Command::Compare {
            baseline,
            contextual,
            out,
        } => {
            let report = compare_runs(
                &ResultTable::load(&baseline)?,
                &ResultTable::load(&contextual)?,
            )?;
            println!(
                "{:<16} {:>5} {:>6} {:>9} {:>10} {:>9} {:>9}",
                "classifier", "K", "N*K", "baseline", "contextual", "abs", "rel"
            );
            for c in &report.cells {
                println!(
                    "{:<16} {:>5} {:>6} {:>9.4} {:>10.4} {:>+9.4} {:>+9.4}",
                    c.classifier,
                    c.shots,
                    c.num_examples,
                    c.baseline,
                    c.contextual,
                    c.absolute,
                    c.relative
                );
            }
            match report.fit {
                Some(f) => println!(
                    "fit: relative_gain = {:.6} * log10(N*K) + {:.6}",
                    f.slope, f.intercept
                ),
                None => println!("fit: not enough distinct example counts"),
            }
            if let Some(out) = out {
                let file = fs::File::create(&out)
                    .with_context(|| format!("creating {}", out.display()))?;
                report.write_csv(std::io::BufWriter::new(file))?;
                let json = out.with_extension("json");
                fs::write(&json, serde_json::to_string_pretty(&report)?)
                    .with_context(|| format!("writing {}", json.display()))?;
                eprintln!("wrote {} and {}", out.display(), json.display());
            }
        }
        Command::Gradcheck { seeds } => {
            ensure!(seeds > 0, "--seeds must be positive");
            let start = std::time::Instant::now();
            let outcomes = gradcheck::run_suite(seeds)?;
            let mut ok = true;
            for o in &outcomes {
                println!(
                    "{:<36} max rel err {:.3e}  frozen law {}  {}",
                    o.name,
                    o.max_rel_error,
                    if o.frozen_ok { "ok" } else { "VIOLATED" },
                    if o.passed() { "PASS" } else { "FAIL" }
                );
                ok &= o.passed();
            }
            println!(
                "{} cases, {seeds} seeds each, tolerance {:.0e}, {:.1}s: {}",
                outcomes.len(),
                gradcheck::TOLERANCE,
                start.elapsed().as_secs_f64(),
                if ok { "PASS" } else { "FAIL" }
            );
            return Ok(ok);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
