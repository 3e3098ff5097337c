//! Grid execution: dense model → prune → retrain or reconstruct →
//! evaluate, for every configured cell.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use prunekit_core::adapters::AdapterSpec;
use prunekit_core::criteria::{prune_model, CalibrationSet};
use prunekit_core::data::validation_windows;
use prunekit_core::model::TaggedModel;
use prunekit_core::reconstruct::{sequential_reconstruct, ReconOptions};
use prunekit_core::retrain::{memory_audit, pretrain, retrain, tune_lr, RetrainOutcome, RetrainRecipe};
use prunekit_core::sparsity::MaskPattern;

use crate::checkpoint;
use crate::config::{CorpusSection, ExperimentConfig, Method};
use crate::corpus::{self, Splits};
use crate::error::{io_err, Error, Result};
use crate::report::{self, sparsity_bp, CellKey, CellResult, ExperimentReport};

/// Environment variable bounding concurrent grid cells.
pub const WORKERS_ENV: &str = "PRUNEKIT_WORKERS";

/// `PRUNEKIT_WORKERS` if set to a positive integer, else the available
/// parallelism.
pub fn worker_limit() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Token splits plus the fixed validation windows used for tuning.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub splits: Splits,
    pub val_windows: Vec<Vec<usize>>,
}

impl Dataset {
    pub fn new(splits: Splits, windows: usize, context_length: usize) -> Result<Self> {
        let val_windows = validation_windows(&splits.val, windows, context_length + 1, 0)?;
        Ok(Self { splits, val_windows })
    }
}

pub fn load_splits(c: &CorpusSection) -> Result<Splits> {
    if let Some(file) = &c.file {
        return corpus::ingest_corpus(file);
    }
    if let Some(bytes) = c.synthetic_bytes {
        return corpus::split_bytes(corpus::synthetic_text(bytes, c.synthetic_seed).as_bytes(), 0);
    }
    let read = |p: &Option<std::path::PathBuf>| -> Result<Vec<usize>> {
        let p = p.as_ref().ok_or_else(|| Error::Config("corpus source missing".into()))?;
        Ok(std::fs::read(p).map_err(io_err(p))?.into_iter().map(usize::from).collect())
    };
    Ok(Splits { train: read(&c.train)?, val: read(&c.val)?, test: read(&c.test)? })
}

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    Dataset::new(load_splits(&cfg.corpus)?, cfg.grid.val_windows, cfg.model.context_length)
}

/// Loads the configured dense checkpoint if it exists; otherwise
/// pretrains and, when a checkpoint path is configured, saves it.
pub fn dense_model(cfg: &ExperimentConfig, data: &Dataset, on_step: impl FnMut(usize, f64)) -> Result<TaggedModel<f32>> {
    if let Some(path) = cfg.pretrain.checkpoint.as_ref().filter(|p| p.is_file()) {
        let m: TaggedModel<f32> = checkpoint::load(path)?;
        if *m.config() != cfg.model_config() {
            return Err(Error::Config(format!("checkpoint {} holds a different model config", path.display())));
        }
        return Ok(m);
    }
    let m = pretrain::<f32>(cfg.model_config(), &cfg.pretrain.options(), &data.splits.train, on_step)?;
    if let Some(path) = &cfg.pretrain.checkpoint {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        checkpoint::save(&m, path)?;
    }
    Ok(m)
}

/// Grid cells in configured order: columns, then methods, then seeds.
pub fn cells(cfg: &ExperimentConfig) -> Result<Vec<(CellKey, MaskPattern, Method)>> {
    let mut out = Vec::new();
    for pattern in cfg.columns()? {
        let name = match pattern {
            MaskPattern::Unstructured { .. } => "unstructured".to_string(),
            nm => nm.to_string(),
        };
        for method in cfg.methods()? {
            for &seed in &cfg.grid.seeds {
                let key = CellKey { pattern: name.clone(), sparsity_bp: sparsity_bp(pattern.nominal_sparsity()), method: method.to_string(), seed };
                out.push((key, pattern, method.clone()));
            }
        }
    }
    Ok(out)
}

pub fn recipe_for(cfg: &ExperimentConfig, method: &Method, seed: u64) -> Option<RetrainRecipe> {
    let Method::Retrain { adapter, subset } = method else { return None };
    let g = &cfg.grid;
    Some(RetrainRecipe {
        subset: subset.clone(),
        adapter: adapter.map(|kind| AdapterSpec { rank: g.rank, alpha: g.alpha, ..AdapterSpec::new(kind) }),
        iters: g.iters,
        lr_grid: g.lr_grid.clone(),
        warmup_fraction: g.warmup_fraction,
        batch_size: g.batch_size,
        grad_accum: g.grad_accum,
        seed,
    })
}

/// Runs one cell. `lr` fixes the retraining rate instead of tuning it.
/// `out_dir` receives the trajectory, reconstruction log and checkpoint.
pub fn run_cell(
    cfg: &ExperimentConfig,
    dense: &TaggedModel<f32>,
    data: &Dataset,
    key: &CellKey,
    pattern: MaskPattern,
    method: &Method,
    lr: Option<f64>,
    out_dir: Option<&Path>,
) -> Result<CellResult> {
    let g = &cfg.grid;
    let criterion = cfg.criterion()?;
    let ctx = cfg.model.context_length;
    let mut model = dense.clone();
    let needs_calib = criterion.needs_calibration() || matches!(method, Method::Reconstruct { .. });
    let calib = if needs_calib { Some(CalibrationSet::sample(&data.splits.train, g.calibration_sequences, ctx, key.seed)?) } else { None };
    let mut result = CellResult::failed(key, "");
    result.error = None;
    let total = model.parameter_count() as f64;
    if let Some(rm) = method.recon_method(g.rank, g.alpha) {
        let opts = ReconOptions {
            criterion,
            pattern,
            method: rm,
            steps: g.recon_steps,
            lr: g.recon_lr,
            damp: g.damp,
            seed: key.seed,
            with_oracle: false,
        };
        let rep = sequential_reconstruct(&mut model, calib.as_ref().expect("calibration sampled"), &opts)?;
        result.trainable_fraction = Some(rep.largest_block_trainable as f64 / total);
        result.optimizer_floats = Some(rep.peak_optimizer_floats);
        if let Some(dir) = out_dir {
            let path = dir.join("recon_logs").join(format!("{}.csv", key.slug()));
            std::fs::create_dir_all(path.parent().unwrap()).map_err(io_err(dir))?;
            let file = std::fs::File::create(&path).map_err(io_err(&path))?;
            report::write_recon_log(file, &rep.records)?;
        }
    } else {
        prune_model(&mut model, criterion, pattern, calib.as_ref(), g.damp)?;
    }
    if let Some(recipe) = recipe_for(cfg, method, key.seed) {
        let audit = memory_audit(&model, &recipe)?;
        let start = Instant::now();
        let (outcome, runs): (RetrainOutcome<f32>, usize) = match lr {
            Some(lr) => (retrain(&model, &recipe, lr, &data.splits.train, &data.val_windows)?, 1),
            None => (tune_lr(&model, &recipe, &data.splits.train, &data.val_windows)?.best, recipe.lr_grid.len()),
        };
        let tokens = (runs * recipe.iters * recipe.batch_size * recipe.grad_accum * ctx) as f64;
        result.tokens_per_sec = Some(tokens / start.elapsed().as_secs_f64());
        result.trainable_fraction = Some(audit.fraction);
        result.optimizer_floats = Some(audit.optimizer_floats);
        result.lr = Some(outcome.lr);
        if let Some(dir) = out_dir {
            let rel = format!("trajectories/{}.csv", key.slug());
            std::fs::create_dir_all(dir.join("trajectories")).map_err(io_err(dir))?;
            report::write_trajectory(&dir.join(&rel), &outcome.trajectory)?;
            result.trajectory = Some(rel);
        }
        model = outcome.model;
    } else if matches!(method, Method::None) {
        result.trainable_fraction = Some(0.0);
        result.optimizer_floats = Some(0);
    }
    result.test_ppl = Some(model.perplexity(&data.splits.test)?);
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir.join("checkpoints")).map_err(io_err(dir))?;
        checkpoint::save(&model, dir.join("checkpoints").join(format!("{}.perp", key.slug())))?;
    }
    Ok(result)
}

/// Runs every cell with up to `workers` cells in flight. Cell failures are
/// recorded in the report and do not stop the grid. With
/// `reuse_lr_across_seeds`, first-seed cells run first and the rest reuse
/// their tuned rate.
pub fn run_grid(
    cfg: &ExperimentConfig,
    dense: &TaggedModel<f32>,
    data: &Dataset,
    out_dir: Option<&Path>,
    workers: usize,
    on_cell: impl Fn(&CellResult) + Sync,
) -> Result<ExperimentReport> {
    let all = cells(cfg)?;
    let configured: Vec<CellKey> = all.iter().map(|c| c.0.clone()).collect();
    let slots: Vec<Mutex<Option<CellResult>>> = all.iter().map(|_| Mutex::new(None)).collect();
    let first_seed = cfg.grid.seeds[0];
    let phases: Vec<Vec<usize>> = if cfg.grid.reuse_lr_across_seeds {
        let (a, b): (Vec<usize>, Vec<usize>) = (0..all.len()).partition(|&i| all[i].0.seed == first_seed);
        vec![a, b]
    } else {
        vec![(0..all.len()).collect()]
    };
    for phase in phases {
        let next = AtomicUsize::new(0);
        let run = || loop {
            let j = next.fetch_add(1, Ordering::SeqCst);
            let Some(&i) = phase.get(j) else { break };
            let (key, pattern, method) = &all[i];
            let lr = if cfg.grid.reuse_lr_across_seeds && key.seed != first_seed {
                let tuned = CellKey { seed: first_seed, ..key.clone() };
                let pos = configured.iter().position(|k| *k == tuned).expect("first-seed cell configured");
                slots[pos].lock().unwrap().as_ref().and_then(|r| r.lr)
            } else {
                None
            };
            let res = run_cell(cfg, dense, data, key, *pattern, method, lr, out_dir).unwrap_or_else(|e| CellResult::failed(key, e.to_string()));
            on_cell(&res);
            *slots[i].lock().unwrap() = Some(res);
        };
        std::thread::scope(|s| {
            for _ in 0..workers.max(1).min(phase.len().max(1)) {
                s.spawn(run);
            }
        });
    }
    let results = slots.into_iter().filter_map(|s| s.into_inner().unwrap()).collect();
    Ok(ExperimentReport { configured, results })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::from_toml(
            r#"
            [model]
            vocab_size = 256
            context_length = 8
            d_model = 16
            n_heads = 2
            n_layers = 1
            d_ff = 32
            [corpus]
            synthetic_bytes = 20000
            [pretrain]
            steps = 30
            lr = 0.01
            [grid]
            sparsities = [0.5, 0.7]
            methods = ["none", "bias+ln"]
            seeds = [0, 1, 2]
            iters = 4
            lr_grid = [1e-3]
            val_windows = 4
            "#,
        )
        .unwrap();
        cfg.validate().unwrap();
        cfg.grid.calibration_sequences = 4;
        cfg
    }

    #[test]
    fn grid_accounting() {
        let cfg = tiny_cfg();
        assert_eq!(cells(&cfg).unwrap().len(), 12);
        let data = load_dataset(&cfg).unwrap();
        let dense = dense_model(&cfg, &data, |_, _| {}).unwrap();
        let report = run_grid(&cfg, &dense, &data, None, 2, |_| {}).unwrap();
        assert!(report.missing().is_empty());
        assert_eq!(report.results.len(), 12);
        assert_eq!(report.aggregates().len(), 4);
        assert!(report.results.iter().all(|r| r.error.is_none()), "{:?}", report.results);
        let csv = report.to_csv().unwrap();
        assert_eq!(csv.lines().count(), 1 + 12 + 4);
    }

    #[test]
    fn failing_cells_do_not_stop_the_grid() {
        let mut cfg = tiny_cfg();
        cfg.grid.patterns = vec!["unstructured".into(), "3:5".into()];
        cfg.grid.sparsities = vec![0.5];
        cfg.grid.methods = vec!["none".into()];
        cfg.grid.seeds = vec![0];
        let data = load_dataset(&cfg).unwrap();
        let dense = dense_model(&cfg, &data, |_, _| {}).unwrap();
        let report = run_grid(&cfg, &dense, &data, None, 1, |_| {}).unwrap();
        assert_eq!(report.results.len(), 2);
        assert!(report.results[0].error.is_none());
        assert!(report.results[1].error.as_deref().unwrap().contains("3:5"));
    }

    #[test]
    fn worker_env_is_read() {
        std::env::set_var(WORKERS_ENV, "3");
        assert_eq!(worker_limit(), 3);
        std::env::set_var(WORKERS_ENV, "zero");
        assert!(worker_limit() >= 1);
        std::env::remove_var(WORKERS_ENV);
    }
}
