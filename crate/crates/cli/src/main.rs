use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use relkit::checkpoint::Checkpoint;
use relkit::commonsense::{build_commonsense_subgraph, subgraph_report, train_transe, PathConfig};
use relkit::config::ExperimentConfig;
use relkit::data::synth::{concept_triples, generate_corpus, SynthConfig};
use relkit::data::{write_triplet_corpus, Vocabulary};
use relkit::eval::Setup;
use relkit::nn::{finite_difference_check, labeled_rng};
use relkit::pipeline::{
    concept_graph, load_training_corpus, split_corpus, supervision_records, transe_config, Experiment,
};
use relkit::relational::build_relational_graph;

const SEED_ENV: &str = "RELKIT_SEED";

#[derive(Parser)]
#[command(name = "relkit", version, about = "Knowledge-aided scene graph relationship prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides RELKIT_SEED and the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus, concept triples and a matching config.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 40)]
        images: usize,
        #[arg(long, default_value_t = 20)]
        test_images: usize,
        #[arg(long, default_value_t = 8)]
        classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Build the relational graph and the merged concept graph; print both as JSON.
    BuildKg {
        #[command(flatten)]
        common: Common,
        /// Write the JSON here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Mine scored concept paths between labels and print the subgraph as JSON.
    MinePaths {
        #[command(flatten)]
        common: Common,
        /// Comma-separated instance labels.
        #[arg(long, value_delimiter = ',', required = true)]
        labels: Vec<String>,
        #[arg(long)]
        max_edges: Option<usize>,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Reduce the training annotations to a one-shot split.
    SampleOneshot {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and write a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Total epochs to reach; defaults to optimizer.max_epochs.
        #[arg(long)]
        epochs: Option<u64>,
    },
    /// Evaluate a checkpoint on the test images.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Restrict to these setups (PredCls, SGCls).
        #[arg(long)]
        setup: Vec<String>,
        /// Write the metrics JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of the full training loss on one image.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1e-5)]
        epsilon: f64,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    let env_seed = match std::env::var(SEED_ENV) {
        Ok(s) => Some(
            s.trim()
                .parse::<u64>()
                .with_context(|| format!("{SEED_ENV}={s:?} is not an unsigned integer"))?,
        ),
        Err(_) => None,
    };
    if let Some(seed) = common.seed.or(env_seed) {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn synth(out: &Path, images: usize, test_images: usize, classes: usize, seed: u64) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    if !(1..=relkit::data::synth::OBJECT_NAMES.len()).contains(&classes) {
        bail!(
            "--classes must be between 1 and {}",
            relkit::data::synth::OBJECT_NAMES.len()
        );
    }
    let cfg = SynthConfig {
        seed,
        num_images: images,
        num_object_classes: classes,
        ..Default::default()
    };
    let (vocab, train) = generate_corpus(&cfg);
    let (_, test) = generate_corpus(&SynthConfig {
        seed: seed.wrapping_add(1),
        num_images: test_images,
        id_prefix: "test".into(),
        ..cfg
    });
    vocab.save(&out.join("vocab.json"))?;
    write_triplet_corpus(&out.join("train.jsonl"), &train)?;
    write_triplet_corpus(&out.join("test.jsonl"), &test)?;
    let tsv: String = concept_triples(&vocab, seed)
        .into_iter()
        .map(|(h, r, t)| format!("{h}\t{r}\t{t}\n"))
        .collect();
    std::fs::write(out.join("concepts.tsv"), tsv)?;
    let mut config = ExperimentConfig {
        seed,
        ..Default::default()
    };
    config.data.test = Some("test.jsonl".into());
    std::fs::write(out.join("config.toml"), config.to_toml()?)?;
    println!("wrote {} train and {} test images to {}", images, test_images, out.display());
    Ok(())
}

fn build_kg(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<()> {
    let vocab = Vocabulary::load(&cfg.data.vocab)?;
    let corpus = load_training_corpus(cfg, &vocab)?;
    let (_, examples) = split_corpus(cfg, corpus);
    let kg = build_relational_graph(&supervision_records(&examples), &vocab)?;
    let commonsense = concept_graph(cfg)?.map(|g| {
        serde_json::json!({
            "concepts": g.concepts,
            "relations": g.relations,
            "edges": g.edges,
        })
    });
    let doc = serde_json::json!({
        "relational": kg.to_json(),
        "commonsense": commonsense,
    });
    write_or_print(out, &serde_json::to_string_pretty(&doc)?)
}

fn mine_paths(
    cfg: &ExperimentConfig,
    labels: &[String],
    max_edges: Option<usize>,
    threshold: Option<f64>,
) -> Result<()> {
    let graph = concept_graph(cfg)?.context("data.concept_triples is not set")?;
    let paths = PathConfig {
        max_edges: max_edges.unwrap_or(cfg.paths.max_edges),
        threshold: threshold.unwrap_or(cfg.paths.threshold),
    };
    paths.validate()?;
    let model = train_transe(&graph, &transe_config(cfg))?;
    let sub = build_commonsense_subgraph(labels, &graph, &model, &paths)?;
    let report = subgraph_report(&sub, &graph, &model)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn sample_oneshot(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let vocab = Vocabulary::load(&cfg.data.vocab)?;
    let corpus = load_training_corpus(cfg, &vocab)?;
    let total = corpus.len();
    let split = relkit::data::build_one_shot_split(&corpus);
    write_triplet_corpus(out, &split.images)?;
    println!(
        "kept {} of {} images, {} registered triplet keys",
        split.images.len(),
        total,
        split.registry.len()
    );
    Ok(())
}

fn train(cfg: ExperimentConfig, out: &Path, resume: Option<&Path>, epochs: Option<u64>) -> Result<()> {
    let target = epochs.unwrap_or(cfg.optimizer.max_epochs as u64);
    let exp = Experiment::build(cfg)?;
    let mut state = match resume {
        Some(p) => exp.resume(Checkpoint::load(p)?)?,
        None => exp.initial_state(),
    };
    let start = Instant::now();
    exp.train_until(&mut state, target, |s, _| {
        info!(
            "epoch {:>4}  loss {:.5}  steps {}  skipped {}",
            s.epoch, s.mean_loss, s.steps, s.skipped
        );
        Ok(())
    })?;
    exp.checkpoint(&state)?.save(out)?;
    println!(
        "trained to epoch {} in {:.1}s; checkpoint {}",
        state.epoch,
        start.elapsed().as_secs_f64(),
        out.display()
    );
    Ok(())
}

fn eval(mut cfg: ExperimentConfig, checkpoint: &Path, setups: &[String], out: Option<&Path>) -> Result<()> {
    for s in setups {
        s.parse::<Setup>()?;
    }
    if !setups.is_empty() {
        cfg.eval.setups = setups.to_vec();
    }
    let ck = Checkpoint::load(checkpoint)?;
    let exp = Experiment::build(cfg)?;
    let state = exp.resume(ck)?;
    let report = exp.evaluate(&state.store)?;
    println!("model (epoch {})", state.epoch);
    print!("{}", report.model.to_text());
    println!("frequency baseline");
    print!("{}", report.frequency_baseline.to_text());
    if let Some(p) = out {
        std::fs::write(p, report.to_json()? + "\n").with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn gradcheck(cfg: ExperimentConfig, epsilon: f64) -> Result<bool> {
    let seed = cfg.seed;
    let exp = Experiment::build(cfg)?;
    let example = exp
        .examples
        .iter()
        .find(|e| !e.supervised.is_empty())
        .context("no training image has supervised triplets")?;
    let batch = std::slice::from_ref(example);
    let mut store = exp.initial_state().store;
    let check = finite_difference_check(&mut store, epsilon, |tape, st| {
        let mut rng = labeled_rng(seed, "gradcheck");
        exp.model
            .batch_loss(tape, st, batch, &mut rng)?
            .ok_or_else(|| relkit::Error::State("image lost its supervision".into()))
    })?;
    println!(
        "max relative error {:.3e} over {} coordinates (worst: {}[{}], analytic {:.6e}, numeric {:.6e})",
        check.max_rel_error,
        check.coordinates,
        check.worst_param,
        check.worst_index,
        check.worst_analytic,
        check.worst_numeric
    );
    Ok(check.max_rel_error < 1e-4)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Synth {
            out,
            images,
            test_images,
            classes,
            seed,
        } => synth(&out, images, test_images, classes, seed)?,
        Command::BuildKg { common, out } => build_kg(&load_config(&common)?, out.as_deref())?,
        Command::MinePaths {
            common,
            labels,
            max_edges,
            threshold,
        } => mine_paths(&load_config(&common)?, &labels, max_edges, threshold)?,
        Command::SampleOneshot { common, out } => sample_oneshot(&load_config(&common)?, &out)?,
        Command::Train {
            common,
            out,
            resume,
            epochs,
        } => train(load_config(&common)?, &out, resume.as_deref(), epochs)?,
        Command::Eval {
            common,
            checkpoint,
            setup,
            out,
        } => eval(load_config(&common)?, &checkpoint, &setup, out.as_deref())?,
        Command::Gradcheck { common, epsilon } => {
            if !gradcheck(load_config(&common)?, epsilon)? {
                eprintln!("gradient check failed: relative error is not below 1e-4");
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
