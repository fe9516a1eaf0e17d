use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use rfcnet::config::{ExperimentConfig, Profile, MODEL_NAMES};
use rfcnet::dataset::{generate_dataset, Dataset, Split};
use rfcnet::grid::grid_search;
use rfcnet::mnist::{GlyphBank, MNIST_DIR_ENV};
use rfcnet::models::{ModelSpec, Network};
use rfcnet::nn::FmKind;
use rfcnet::report::{write_report, EvalRecord};
use rfcnet::train::{evaluate_split, train_on_dataset, Checkpoint};

const STAMP_FILE: &str = "stamp.json";

#[derive(Parser)]
#[command(name = "rfcnet", version, about = "Synthetic video segmentation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the train, val, test and clean_test splits to disk.
    GenerateData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset seed; overrides scene.seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory; defaults to dataset.dir.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Directory with the four IDX digit files. Falls back to
        /// $RFCNET_MNIST_DIR, then to the bundled subset.
        #[arg(long)]
        mnist_dir: Option<PathBuf>,
        /// Worker threads; defaults to dataset.workers.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Train one named model.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Model name from the config's [models] table.
        #[arg(long)]
        model: String,
        /// Dataset directory; defaults to dataset.dir.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Run directory for metrics, checkpoints and the stamp.
        #[arg(long)]
        out: PathBuf,
        /// Training seed; overrides train.seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Checkpoint whose matching parameters initialize the model.
        #[arg(long)]
        init_from: Option<PathBuf>,
    },
    /// Per-class and mean IoU of a checkpoint on one or more splits.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Split to evaluate; repeat for several.
        #[arg(long = "split", required = true)]
        splits: Vec<String>,
        /// Dataset directory; defaults to dataset.dir of the config.
        #[arg(long)]
        data: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Name recorded in the results; defaults to the checkpoint's directory.
        #[arg(long)]
        name: Option<String>,
        /// Directory for eval-<split>.json and the stamp.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Trainable parameter counts per module group.
    CountParams {
        /// Model name; every reference model when omitted.
        #[arg(long)]
        spec: Option<String>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Tables and a bar chart from eval results.
    Report {
        /// eval-*.json files or directories holding them.
        #[arg(long = "input", required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also write mean_iou.png.
        #[arg(long)]
        plot: bool,
    },
    /// Train every cell of the [grid] section and rank by validation mean IoU.
    GridSearch {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config (TOML). Takes precedence over --profile.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in config: full or tiny.
    #[arg(long, default_value = "full")]
    profile: Profile,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        Ok(match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::profile(self.profile),
        })
    }
}

#[derive(Serialize)]
struct Stamp<'a> {
    command: &'a str,
    config_hash: String,
    seed: u64,
    version: &'a str,
    config: &'a ExperimentConfig,
}

fn write_stamp(dir: &Path, command: &str, cfg: &ExperimentConfig, seed: u64) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| dir.display().to_string())?;
    let stamp = Stamp {
        command,
        config_hash: cfg.hash(),
        seed,
        version: env!("CARGO_PKG_VERSION"),
        config: cfg,
    };
    let path = dir.join(STAMP_FILE);
    std::fs::write(&path, serde_json::to_string_pretty(&stamp)?).with_context(|| path.display().to_string())?;
    Ok(())
}

fn trainable(name: &str, spec: &ModelSpec) -> Result<()> {
    if spec.fm_kind == Some(FmKind::Identity) {
        bail!("model `{name}` uses identity filter modules, which exist only for testing and cannot be trained");
    }
    Ok(())
}

fn data_dir(cfg: &ExperimentConfig, data: Option<PathBuf>) -> PathBuf {
    data.unwrap_or_else(|| cfg.dataset.dir.clone())
}

fn eval_files(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for input in inputs {
        if input.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(input)
                .with_context(|| input.display().to_string())?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    p.file_name()
                        .and_then(|n| n.to_str())
                        .is_some_and(|n| n.starts_with("eval-") && n.ends_with(".json"))
                })
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(input.clone());
        }
    }
    if files.is_empty() {
        bail!("no eval-*.json files found");
    }
    Ok(files)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateData {
            cfg,
            seed,
            out,
            mnist_dir,
            workers,
        } => {
            let mut cfg = cfg.load()?;
            if let Some(seed) = seed {
                cfg.scene.seed = seed;
            }
            let out = data_dir(&cfg, out);
            let source = mnist_dir.clone().or_else(|| std::env::var_os(MNIST_DIR_ENV).map(PathBuf::from));
            let glyphs = GlyphBank::resolve(mnist_dir.as_deref())?;
            let label = source.map_or_else(|| "bundled".to_string(), |p| p.display().to_string());
            let workers = workers.unwrap_or(cfg.dataset.workers).max(1);
            let manifest = generate_dataset(&cfg.dataset_spec(&label), &glyphs, &out, workers)?;
            write_stamp(&out, "generate-data", &cfg, cfg.scene.seed)?;
            for split in Split::ALL {
                println!("{split:<11} {:>6} sequences", manifest.splits.get(split));
            }
            println!("wrote {} shards to {}", manifest.shards.len(), out.display());
        }
        Command::Train {
            cfg,
            model,
            data,
            out,
            seed,
            init_from,
        } => {
            let mut cfg = cfg.load()?;
            if let Some(seed) = seed {
                cfg.train.seed = seed;
            }
            if init_from.is_some() {
                cfg.train.init_from = init_from;
            }
            let spec = cfg.model(&model)?.clone();
            trainable(&model, &spec)?;
            let ds = Dataset::open(&data_dir(&cfg, data))?;
            write_stamp(&out, "train", &cfg, cfg.train.seed)?;
            let outcome = train_on_dataset(&spec, &ds, &cfg.train, Some(&out))?;
            for r in &outcome.history {
                println!(
                    "epoch {:>3}  loss {:.4}  val mIoU {:.2}  {:.0}s",
                    r.epoch,
                    r.train_loss,
                    100.0 * r.val_miou,
                    r.wall_time_secs
                );
            }
            println!(
                "best epoch {} with val mIoU {:.2}{}",
                outcome.best.epoch,
                100.0 * outcome.best.best_val_miou,
                if outcome.stopped_early { " (stopped early)" } else { "" }
            );
        }
        Command::Eval {
            checkpoint,
            splits,
            data,
            cfg,
            name,
            out,
        } => {
            let cfg = cfg.load()?;
            let splits = splits.iter().map(|s| s.parse::<Split>()).collect::<Result<Vec<_>, _>>()?;
            let ck = Checkpoint::load(&checkpoint)?;
            let net = Network::build(&ck.spec)?;
            let ds = Dataset::open(&data_dir(&cfg, data))?;
            let name = name.unwrap_or_else(|| {
                checkpoint
                    .parent()
                    .and_then(|p| p.file_name())
                    .map_or_else(|| "model".into(), |n| n.to_string_lossy().into_owned())
            });
            let mut params = ck.params.clone();
            for split in splits {
                let report = evaluate_split(&net, &mut params, &ds, split, cfg.train.eval_batch_size)?;
                println!("{report}\n");
                if let Some(dir) = &out {
                    std::fs::create_dir_all(dir).with_context(|| dir.display().to_string())?;
                    let rec = EvalRecord {
                        model: name.clone(),
                        checkpoint: checkpoint.clone(),
                        report,
                    };
                    let path = dir.join(format!("eval-{split}.json"));
                    std::fs::write(&path, serde_json::to_string_pretty(&rec)?)
                        .with_context(|| path.display().to_string())?;
                }
            }
            if let Some(dir) = &out {
                write_stamp(dir, "eval", &cfg, ck.rng_seed)?;
            }
        }
        Command::CountParams { spec, cfg } => {
            let cfg = cfg.load()?;
            let names: Vec<String> = match spec {
                Some(s) => vec![s],
                None => MODEL_NAMES.iter().map(|s| s.to_string()).collect(),
            };
            for name in names {
                let table = Network::build(cfg.model(&name)?)?.count_params()?;
                println!("{name}\n{table}");
            }
        }
        Command::Report { inputs, out, plot } => {
            let records = eval_files(&inputs)?
                .iter()
                .map(|p| EvalRecord::load(p))
                .collect::<Result<Vec<_>, _>>()?;
            print!("{}", write_report(&records, &out, plot)?);
        }
        Command::GridSearch { cfg, data, out, seed } => {
            let mut cfg = cfg.load()?;
            if let Some(seed) = seed {
                cfg.train.seed = seed;
            }
            let grid = cfg.grid_spec()?;
            trainable("grid", &grid.base)?;
            let ds = Dataset::open(&data_dir(&cfg, data))?;
            write_stamp(&out, "grid-search", &cfg, cfg.train.seed)?;
            let mut tr = ds.open_split(Split::Train, None)?;
            let mut va = ds.open_split(Split::Val, None)?;
            let ranking = grid_search(&grid, &mut tr, &mut va, &cfg.train, &out)?;
            print!("{ranking}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
