use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use rand::rngs::StdRng;
use rand::SeedableRng;
use vctree::scoring::ScoreMatrix;
use vctree::sgg::branch_statistics;
use vctree::treebuild::{binarize_lcrs, max_spanning_tree, BuildMode, TreeJson};

use vctree_harness::config::ExperimentConfig;
use vctree_harness::experiment::{eval_checkpoint, eval_predictions, read_trees, run_experiment};
use vctree_harness::synth::{generate_scenes, generate_vqa, SynthSpec};

#[derive(Parser)]
#[command(name = "vctree", version, about = "Visual context trees for scene graphs and VQA")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Greedy,
    Sampled,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate one experiment configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint, or a prediction dump, on a dataset.
    Eval {
        #[arg(long, required_unless_present = "predictions")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// sggen, sgcls, predcls or vqa.
        #[arg(long)]
        protocol: String,
        /// Prediction dump to score instead of running a model.
        #[arg(long, conflicts_with = "checkpoint")]
        predictions: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_values_t = [20, 50, 100])]
        k: Vec<usize>,
    },
    /// Build a binarized tree from a square score matrix.
    BuildTree {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long, value_enum, default_value = "greedy")]
        mode: ModeArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write synthetic train.json and test.json.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also generate questions.
        #[arg(long)]
        vqa: bool,
    },
    /// Child label histograms for one category over a directory of trees.
    Stats {
        #[arg(long)]
        trees: PathBuf,
        #[arg(long)]
        category: String,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let chain: Vec<String> = e.chain().map(|c| c.to_string()).collect();
            let msg = serde_json::json!({ "error": chain.first(), "causes": &chain[1..] });
            eprintln!("{msg}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train { config, seed } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.reseed(s);
            }
            let out = run_experiment(&cfg)?;
            println!("{}", out.report.to_json()?);
        }
        Command::Eval {
            checkpoint,
            data,
            protocol,
            predictions,
            k,
        } => {
            let report = match (checkpoint, predictions) {
                (_, Some(p)) => eval_predictions(&p, &data, &protocol, &k)?,
                (Some(c), None) => eval_checkpoint(&c, &data, &protocol)?,
                (None, None) => anyhow::bail!("eval needs --checkpoint or --predictions"),
            };
            println!("{}", serde_json::to_string_pretty(&serde_json::to_value(&report)?)?);
        }
        Command::BuildTree { scores, mode, out, seed } => {
            let text = std::fs::read_to_string(&scores).with_context(|| format!("reading {}", scores.display()))?;
            let rows: Vec<Vec<f64>> = serde_json::from_str(&text).context("scores must be a square array of numbers")?;
            let n = rows.len();
            anyhow::ensure!(rows.iter().all(|r| r.len() == n), "score matrix is not square");
            let values: Vec<f64> = rows.into_iter().flatten().collect();
            anyhow::ensure!(values.iter().all(|v| v.is_finite() && *v >= 0.0), "scores must be finite and nonnegative");
            let s = ScoreMatrix::from_values(n, values)?;
            let mode = match mode {
                ModeArg::Greedy => BuildMode::Greedy,
                ModeArg::Sampled => BuildMode::Sampled,
            };
            let (tree, _) = max_spanning_tree(&s, mode, &mut StdRng::seed_from_u64(seed))?;
            let json = TreeJson::from_binary(&binarize_lcrs(&tree));
            std::fs::write(&out, serde_json::to_string_pretty(&json)?)
                .with_context(|| format!("writing {}", out.display()))?;
        }
        Command::GenData { spec, out, vqa } => {
            let text = std::fs::read_to_string(&spec).with_context(|| format!("reading {}", spec.display()))?;
            let spec: SynthSpec = serde_json::from_str(&text).context("parsing generator spec")?;
            let (train, test) = if vqa { generate_vqa(&spec)? } else { generate_scenes(&spec)? };
            std::fs::create_dir_all(&out)?;
            train.save(&out.join("train.json"))?;
            test.save(&out.join("test.json"))?;
        }
        Command::Stats { trees, category } => {
            let files = read_trees(&trees)?;
            let mut names: Vec<String> = Vec::new();
            let id = |name: &str, names: &mut Vec<String>| match names.iter().position(|n| n == name) {
                Some(i) => i,
                None => {
                    names.push(name.to_string());
                    names.len() - 1
                }
            };
            let mut pairs = Vec::with_capacity(files.len());
            for (i, t) in files.iter().enumerate() {
                let labels = t.labels.as_ref().with_context(|| format!("tree {i} carries no labels"))?;
                anyhow::ensure!(labels.len() == t.n, "tree {i}: {} labels for {} nodes", labels.len(), t.n);
                let ids = labels.iter().map(|l| id(l, &mut names)).collect();
                pairs.push((t.to_binary()?, ids));
            }
            let cat = names.iter().position(|n| *n == category);
            let hist = cat.map(|c| branch_statistics(&pairs, c)).unwrap_or_default();
            let named = |m: &std::collections::BTreeMap<usize, usize>| {
                m.iter().map(|(&k, &v)| (names[k].clone(), v)).collect::<std::collections::BTreeMap<_, _>>()
            };
            let report = serde_json::json!({
                "category": category,
                "trees": files.len(),
                "left": named(&hist.left),
                "right": named(&hist.right),
            });
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
    }
    Ok(())
}
