use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use prunekit::bench::bench_throughput;
use prunekit::checkpoint;
use prunekit::config::{CorpusSection, ExperimentConfig, Method};
use prunekit::corpus::{self, Splits};
use prunekit::grid::{self, Dataset};
use prunekit::report::{self, TableFormat};
use prunekit_core::adapters::AdapterSpec;
use prunekit_core::criteria::{prune_model, CalibrationSet, Criterion, DEFAULT_DAMP};
use prunekit_core::model::{MiniGptConfig, TaggedModel};
use prunekit_core::reconstruct::{sequential_reconstruct, ReconMethod, ReconOptions};
use prunekit_core::retrain::{install_dense_masks, pretrain, retrain, tune_lr, PretrainOptions, RetrainRecipe, DEFAULT_LR_GRID};
use prunekit_core::sparsity::MaskPattern;

#[derive(Parser)]
#[command(name = "prunekit", version, about = "Prune a small byte-level GPT and retrain it without losing sparsity")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a dense model from scratch.
    Pretrain(PretrainArgs),
    /// Prune a checkpoint with a criterion and pattern.
    Prune(PruneArgs),
    /// Retrain a pruned checkpoint with a method such as `masked-lora+bias+ln`.
    Retrain(RetrainArgs),
    /// Prune and reconstruct layer by layer on calibration data.
    Reconstruct(ReconstructArgs),
    /// Report perplexity of a checkpoint on a corpus split.
    Eval(EvalArgs),
    /// Run an experiment grid from a TOML config.
    Grid(GridArgs),
    /// Measure retraining throughput.
    Bench(BenchArgs),
    /// Write seeded synthetic text.
    Synth(SynthArgs),
}

#[derive(Args)]
struct CorpusArgs {
    /// Byte corpus split 90/5/5 into train/val/test.
    #[arg(long, conflicts_with = "synthetic_bytes")]
    corpus: Option<PathBuf>,
    /// Use generated text of this many bytes instead of a file.
    #[arg(long)]
    synthetic_bytes: Option<usize>,
    #[arg(long, default_value_t = 0)]
    synthetic_seed: u64,
}

impl CorpusArgs {
    fn splits(&self) -> Result<Splits> {
        if self.corpus.is_none() && self.synthetic_bytes.is_none() {
            bail!("pass --corpus FILE or --synthetic-bytes N");
        }
        let section = CorpusSection { file: self.corpus.clone(), synthetic_bytes: self.synthetic_bytes, synthetic_seed: self.synthetic_seed, ..Default::default() };
        Ok(grid::load_splits(&section)?)
    }
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20_000)]
    steps: usize,
    #[arg(long, default_value_t = 4)]
    batch_size: usize,
    #[arg(long, default_value_t = 2e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.02)]
    warmup_fraction: f64,
    /// Decoupled AdamW weight decay.
    #[arg(long, default_value_t = 0.1)]
    weight_decay: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Model initialisation seed.
    #[arg(long, default_value_t = 0)]
    model_seed: u64,
}

#[derive(Args)]
struct PruneArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "magnitude")]
    criterion: Criterion,
    /// `0.5`, `unstructured:0.5`, `2:4`, ...
    #[arg(long)]
    pattern: MaskPattern,
    /// Needed for wanda and sparsegpt.
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long, default_value_t = 128)]
    calibration_sequences: usize,
    #[arg(long, default_value_t = DEFAULT_DAMP)]
    damp: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct RetrainArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long, default_value = "masked-lora+bias+ln")]
    method: Method,
    #[arg(long, default_value_t = 1000)]
    iters: usize,
    /// Fixed learning rate; without it the grid is searched.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    lr_grid: Option<Vec<f64>>,
    #[arg(long, default_value_t = 16)]
    rank: usize,
    #[arg(long, default_value_t = 32.0)]
    alpha: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    val_windows: usize,
    /// Write `iter,lr,train_loss,val_ppl` here.
    #[arg(long)]
    trajectory: Option<PathBuf>,
    /// Allow retraining a checkpoint without masks (dense control).
    #[arg(long)]
    dense: bool,
}

#[derive(Args)]
struct ReconstructArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long, default_value = "magnitude")]
    criterion: Criterion,
    #[arg(long)]
    pattern: MaskPattern,
    /// `direct` or `masked-lora`.
    #[arg(long, default_value = "masked-lora")]
    method: String,
    #[arg(long, default_value_t = 16)]
    rank: usize,
    #[arg(long, default_value_t = 32.0)]
    alpha: f64,
    #[arg(long, default_value_t = 500)]
    steps: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 128)]
    calibration_sequences: usize,
    #[arg(long, default_value_t = DEFAULT_DAMP)]
    damp: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also solve the least-squares optimum per layer.
    #[arg(long)]
    oracle: bool,
    /// Write the per-layer log here (stdout otherwise).
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    corpus: CorpusArgs,
    /// `train`, `val` or `test`.
    #[arg(long, default_value = "test")]
    split: String,
}

#[derive(Args)]
struct GridArgs {
    config: PathBuf,
    /// Table format: `markdown` or `csv`.
    #[arg(long, default_value = "markdown")]
    format: String,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long, default_value = "masked-lora+bias+ln")]
    method: Method,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 10.0)]
    seconds: f64,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1_000_000)]
    bytes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn load(path: &Path) -> Result<TaggedModel<f32>> {
    checkpoint::load(path).with_context(|| format!("loading {}", path.display()))
}

fn retrain_recipe(method: &Method, iters: usize, rank: usize, alpha: f64, seed: u64, lr_grid: Option<Vec<f64>>) -> Result<RetrainRecipe> {
    let Method::Retrain { adapter, subset } = method else {
        bail!("`{method}` is not a retraining method");
    };
    Ok(RetrainRecipe {
        subset: subset.clone(),
        adapter: adapter.map(|kind| AdapterSpec { rank, alpha, ..AdapterSpec::new(kind) }),
        iters,
        lr_grid: lr_grid.unwrap_or_else(|| DEFAULT_LR_GRID.to_vec()),
        seed,
        ..RetrainRecipe::selective(&[])
    })
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Pretrain(a) => {
            let splits = a.corpus.splits()?;
            let config = MiniGptConfig { seed: a.model_seed, ..MiniGptConfig::default() };
            let opts = PretrainOptions { steps: a.steps, batch_size: a.batch_size, lr: a.lr, warmup_fraction: a.warmup_fraction, weight_decay: a.weight_decay, seed: a.seed };
            let every = (a.steps / 20).max(1);
            let mut acc = 0.0;
            let m = pretrain::<f32>(config, &opts, &splits.train, |i, loss| {
                acc += loss;
                if (i + 1) % every == 0 {
                    eprintln!("step {:>6}  loss {:.4}", i + 1, acc / every as f64);
                    acc = 0.0;
                }
            })?;
            println!("val perplexity {:.4}", m.perplexity(&splits.val)?);
            checkpoint::save(&m, &a.out)?;
        }
        Command::Prune(a) => {
            let mut m = load(&a.checkpoint)?;
            let calib = if a.criterion.needs_calibration() {
                let splits = a.corpus.splits()?;
                Some(CalibrationSet::sample(&splits.train, a.calibration_sequences, m.config().context_length, a.seed)?)
            } else {
                None
            };
            prune_model(&mut m, a.criterion, a.pattern, calib.as_ref(), a.damp)?;
            checkpoint::save(&m, &a.out)?;
            println!("pruned {} layers to {}", m.layers().len(), a.pattern);
        }
        Command::Retrain(a) => {
            let mut m = load(&a.checkpoint)?;
            if a.dense {
                install_dense_masks(&mut m)?;
            }
            let splits = a.corpus.splits()?;
            let data = Dataset::new(splits, a.val_windows, m.config().context_length)?;
            let recipe = retrain_recipe(&a.method, a.iters, a.rank, a.alpha, a.seed, a.lr_grid)?;
            let out = match a.lr {
                Some(lr) => retrain(&m, &recipe, lr, &data.splits.train, &data.val_windows)?,
                None => {
                    let t = tune_lr(&m, &recipe, &data.splits.train, &data.val_windows)?;
                    for row in &t.grid {
                        match &row.result {
                            Ok(p) => eprintln!("lr {:e}: val ppl {p:.4}", row.lr),
                            Err(e) => eprintln!("lr {:e}: {e}", row.lr),
                        }
                    }
                    t.best
                }
            };
            if out.unmerged_lora {
                eprintln!("note: LoRA adapters left unmerged (merging would densify the weights)");
            }
            if let Some(path) = &a.trajectory {
                report::write_trajectory(path, &out.trajectory)?;
            }
            println!("lr {:e}  val perplexity {:.4}  test perplexity {:.4}", out.lr, out.final_ppl(), out.model.perplexity(&data.splits.test)?);
            checkpoint::save(&out.model, &a.out)?;
        }
        Command::Reconstruct(a) => {
            let mut m = load(&a.checkpoint)?;
            let splits = a.corpus.splits()?;
            let method = match a.method.as_str() {
                "direct" => ReconMethod::Direct,
                "masked-lora" => ReconMethod::MaskedLora { rank: a.rank, alpha: a.alpha },
                other => bail!("unknown reconstruction method `{other}`"),
            };
            let calib = CalibrationSet::sample(&splits.train, a.calibration_sequences, m.config().context_length, a.seed)?;
            let opts = ReconOptions { criterion: a.criterion, pattern: a.pattern, method, steps: a.steps, lr: a.lr, damp: a.damp, seed: a.seed, with_oracle: a.oracle };
            let rep = sequential_reconstruct(&mut m, &calib, &opts)?;
            match &a.log {
                Some(p) => report::write_recon_log(std::fs::File::create(p).with_context(|| p.display().to_string())?, &rep.records)?,
                None => report::write_recon_log(std::io::stdout(), &rep.records)?,
            }
            eprintln!("test perplexity {:.4}", m.perplexity(&splits.test)?);
            checkpoint::save(&m, &a.out)?;
        }
        Command::Eval(a) => {
            let m = load(&a.checkpoint)?;
            let s = a.corpus.splits()?;
            let tokens = match a.split.as_str() {
                "train" => &s.train,
                "val" => &s.val,
                "test" => &s.test,
                other => bail!("unknown split `{other}`"),
            };
            println!("{:.6}", m.perplexity(tokens)?);
        }
        Command::Grid(a) => {
            let format = match a.format.as_str() {
                "markdown" | "md" => TableFormat::Markdown,
                "csv" => TableFormat::Csv,
                other => bail!("unknown table format `{other}`"),
            };
            let cfg = ExperimentConfig::load(&a.config)?;
            let data = grid::load_dataset(&cfg)?;
            let every = (cfg.pretrain.steps / 20).max(1);
            let dense = grid::dense_model(&cfg, &data, |i, loss| {
                if (i + 1) % every == 0 {
                    eprintln!("pretrain step {:>6}  loss {loss:.4}", i + 1);
                }
            })?;
            eprintln!("dense test perplexity {:.4}", dense.perplexity(&data.splits.test)?);
            let workers = grid::worker_limit();
            let report = grid::run_grid(&cfg, &dense, &data, Some(&cfg.output_dir), workers, |r| match (&r.error, r.test_ppl) {
                (None, Some(p)) => eprintln!("{} {:.2} {} seed {}: test ppl {p:.4}", r.pattern, r.sparsity, r.method, r.seed),
                (e, _) => eprintln!("{} {:.2} {} seed {}: FAILED {}", r.pattern, r.sparsity, r.method, r.seed, e.as_deref().unwrap_or("")),
            })?;
            for path in report.emit(&cfg.output_dir, format)? {
                println!("{}", path.display());
            }
        }
        Command::Bench(a) => {
            let m = load(&a.checkpoint)?;
            let splits = a.corpus.splits()?;
            let recipe = retrain_recipe(&a.method, 1_000_000, 16, 32.0, 0, None)?;
            let t = bench_throughput(&m, &recipe, a.lr, &splits.train, Duration::from_secs_f64(a.seconds))?;
            println!(
                "{:.1} tokens/s over {} steps; trainable {} of {} ({:.4}%), optimizer floats {}",
                t.tokens_per_sec,
                t.steps,
                t.audit.trainable,
                t.audit.total,
                100.0 * t.audit.fraction,
                t.audit.optimizer_floats
            );
        }
        Command::Synth(a) => {
            std::fs::write(&a.out, corpus::synthetic_text(a.bytes, a.seed)).with_context(|| a.out.display().to_string())?;
        }
    }
    Ok(())
}
