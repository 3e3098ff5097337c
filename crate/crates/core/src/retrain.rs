//! Full-network-loss training: dense pretraining, and retraining of a
//! pruned model under a recipe (parameter subset and/or adapters) with
//! sparsity enforced after every step.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::adapters::{attach, merge, AdapterKind, AdapterSpec, MergeReport};
use crate::autograd::Tape;
use crate::data::BatchSampler;
use crate::error::{bail, Error, Result};
use crate::model::{MiniGptConfig, TaggedModel};
use crate::optim::{AdamW, AdamWConfig, LrSchedule, OptimizerState};
use crate::param::GroupTag;
use crate::scalar::Scalar;
use crate::sparsity::{MaskRegistry, SparsityMask};

/// Starting learning rates tried by [`tune_lr`] by default.
pub const DEFAULT_LR_GRID: [f64; 5] = [5e-6, 1e-5, 5e-5, 1e-4, 5e-4];
/// Random probes per layer when checking a merge.
pub const MERGE_PROBES: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct RetrainRecipe {
    /// Base parameter groups to train.
    pub subset: Vec<GroupTag>,
    pub adapter: Option<AdapterSpec>,
    pub iters: usize,
    pub lr_grid: Vec<f64>,
    pub warmup_fraction: f64,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub seed: u64,
}

impl RetrainRecipe {
    /// Retrains only the listed groups.
    pub fn selective(subset: &[GroupTag]) -> Self {
        Self {
            subset: subset.to_vec(),
            adapter: None,
            iters: 1000,
            lr_grid: DEFAULT_LR_GRID.to_vec(),
            warmup_fraction: 0.1,
            batch_size: 2,
            grad_accum: 4,
            seed: 0,
        }
    }

    /// Adapters on every prunable layer, with biases and LayerNorm
    /// parameters trained alongside.
    pub fn adapter(kind: AdapterKind) -> Self {
        Self { adapter: Some(AdapterSpec::new(kind)), ..Self::selective(&[GroupTag::Bias, GroupTag::Ln]) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.subset.is_empty() && self.adapter.is_none() {
            bail!(Config, "recipe trains nothing: empty subset and no adapter");
        }
        if self.subset.contains(&GroupTag::Adapter) {
            bail!(Config, "select adapters through the adapter field, not the subset");
        }
        if self.iters == 0 {
            bail!(Config, "recipe needs at least one iteration");
        }
        if self.batch_size == 0 || self.grad_accum == 0 {
            bail!(Config, "batch size and gradient accumulation must be positive");
        }
        if self.lr_grid.iter().any(|&lr| !(lr > 0.0 && lr.is_finite())) {
            bail!(Config, "learning rates must be positive: {:?}", self.lr_grid);
        }
        Ok(())
    }

    /// Human-readable name such as `bias+ln` or `masked-lora+bias+ln`.
    pub fn label(&self) -> String {
        let mut parts: Vec<String> = Vec::new();
        if let Some(a) = &self.adapter {
            parts.push(a.kind.as_str().into());
        }
        parts.extend(self.subset.iter().map(|t| String::from(t.as_str())));
        parts.join("+")
    }

    /// Validation cadence: every `max(1, iters / 20)` steps.
    pub fn eval_every(&self) -> usize {
        (self.iters / 20).max(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryPoint {
    pub iter: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_ppl: f64,
}

#[derive(Debug, Clone)]
pub struct RetrainOutcome<T> {
    pub model: TaggedModel<T>,
    pub lr: f64,
    pub trajectory: Vec<TrajectoryPoint>,
    pub merges: Vec<MergeReport>,
    /// Set when LoRA adapters stay attached because merging would densify.
    pub unmerged_lora: bool,
}

impl<T> RetrainOutcome<T> {
    pub fn final_ppl(&self) -> f64 {
        self.trajectory.last().map_or(f64::NAN, |p| p.val_ppl)
    }
}

/// Gives every prunable layer an all-keep mask so a dense model can go
/// through [`retrain`] as a control.
pub fn install_dense_masks<T: Scalar>(model: &mut TaggedModel<T>) -> Result<()> {
    for l in 0..model.layers().len() {
        if model.mask(l).is_none() {
            let w = model.weight(l);
            let mask = SparsityMask::dense(w.rows(), w.cols(), model.layers()[l].name.clone());
            model.set_mask(l, mask)?;
        }
    }
    Ok(())
}

/// Clones `model`, attaches the recipe's adapters and marks exactly the
/// recipe's parameters trainable.
pub fn prepare<T: Scalar>(model: &TaggedModel<T>, recipe: &RetrainRecipe) -> Result<TaggedModel<T>> {
    recipe.validate()?;
    let mut m = model.clone();
    if m.has_adapters() {
        bail!(Contract, "model already carries adapters");
    }
    m.freeze_all();
    if let Some(spec) = &recipe.adapter {
        for l in 0..m.layers().len() {
            let name = m.layers()[l].name.clone();
            let mask = if spec.kind == AdapterKind::Lora { None } else { m.mask(l) };
            let pair = attach(&name, m.weight(l), spec, recipe.seed.wrapping_mul(1_000_003).wrapping_add(l as u64), mask)?;
            m.set_adapter(l, pair)?;
        }
    }
    let mut tags = recipe.subset.clone();
    if recipe.adapter.is_some() {
        tags.push(GroupTag::Adapter);
    }
    m.set_trainable_groups(&tags);
    Ok(m)
}

fn mask_registry<T: Scalar>(model: &TaggedModel<T>) -> Result<MaskRegistry> {
    let mut reg = MaskRegistry::default();
    for (l, layer) in model.layers().iter().enumerate() {
        let Some(mask) = model.mask(l) else {
            bail!(Contract, "prunable layer `{}` has no mask; prune first or install dense masks", layer.name);
        };
        reg.register(&model.params()[layer.weight].name, mask.clone())?;
    }
    Ok(reg)
}

/// One optimizer step's worth of accumulated gradients; returns the mean
/// micro-batch loss.
fn accumulate_step<T: Scalar>(model: &mut TaggedModel<T>, sampler: &mut BatchSampler<'_>, accum: usize) -> Result<f64> {
    model.zero_grads();
    let mut total = 0.0;
    let inv = T::one() / T::from_usize(accum);
    for _ in 0..accum {
        let tokens = sampler.next_batch();
        let mut tape = Tape::new();
        let (loss, pass) = model.loss_on_tape(&mut tape, &tokens, sampler.rows(), sampler.len())?;
        total += tape.value(loss)[0].as_f64();
        let scaled = tape.scale(loss, inv);
        tape.backward(scaled)?;
        model.collect_grads(&tape, &pass)?;
    }
    Ok(total / accum as f64)
}

/// Step-by-step retraining of a prepared copy of a pruned model, with
/// masks re-applied after every optimizer step.
pub struct RetrainSession<'a, T> {
    model: TaggedModel<T>,
    opt: AdamW<T>,
    schedule: LrSchedule,
    sampler: BatchSampler<'a>,
    accum: usize,
    iter: usize,
}

impl<'a, T: Scalar> RetrainSession<'a, T> {
    pub fn new(model: &TaggedModel<T>, recipe: &RetrainRecipe, lr: f64, train: &'a [usize]) -> Result<Self> {
        let registry = mask_registry(model)?;
        let m = prepare(model, recipe)?;
        let schedule = LrSchedule::with_warmup_fraction(lr, recipe.iters, recipe.warmup_fraction)?;
        let opt = AdamW::new(AdamWConfig::default(), m.all_params()).with_masks(registry);
        let len = m.config().context_length + 1;
        let sampler = BatchSampler::new(train, recipe.batch_size, len, recipe.seed)?;
        Ok(Self { model: m, opt, schedule, sampler, accum: recipe.grad_accum, iter: 0 })
    }

    /// Runs one optimizer step and returns `(lr, mean loss)`. Past the
    /// schedule's end the rate stays at its final value (zero).
    pub fn step(&mut self) -> Result<(f64, f64)> {
        let loss = accumulate_step(&mut self.model, &mut self.sampler, self.accum)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite { iter: self.iter, loss });
        }
        let lr = self.schedule.lr_at(self.iter.min(self.schedule.total_iters))?;
        self.opt.step(&mut self.model.all_params_mut(), lr)?;
        self.iter += 1;
        Ok((lr, loss))
    }

    /// Steps taken so far.
    pub fn iter(&self) -> usize {
        self.iter
    }

    /// Training tokens consumed per step (predicted positions).
    pub fn tokens_per_step(&self) -> usize {
        self.accum * self.sampler.rows() * (self.sampler.len() - 1)
    }

    pub fn model(&self) -> &TaggedModel<T> {
        &self.model
    }

    pub fn into_model(self) -> TaggedModel<T> {
        self.model
    }
}

/// Retrains a pruned model with starting learning rate `lr`. Adapters are
/// merged at the end except plain LoRA, which stays attached (flagged).
pub fn retrain<T: Scalar>(
    model: &TaggedModel<T>,
    recipe: &RetrainRecipe,
    lr: f64,
    train: &[usize],
    val: &[Vec<usize>],
) -> Result<RetrainOutcome<T>> {
    let mut session = RetrainSession::new(model, recipe, lr, train)?;
    let every = recipe.eval_every();
    let mut trajectory = Vec::new();
    let mut last = (0.0, 0.0);
    for _ in 0..recipe.iters {
        last = session.step()?;
        let done = session.iter();
        if done % every == 0 && done < recipe.iters {
            let val_ppl = session.model().perplexity_of_sequences(val)?;
            trajectory.push(TrajectoryPoint { iter: done, lr: last.0, train_loss: last.1, val_ppl });
        }
    }
    let mut m = session.into_model();
    m.zero_grads();
    m.freeze_all();
    let mut merges = Vec::new();
    let mut unmerged_lora = false;
    for l in 0..m.layers().len() {
        let Some(pair) = m.adapter(l) else { continue };
        if pair.kind == AdapterKind::Lora {
            unmerged_lora = true;
            continue;
        }
        let pair = m.take_adapter(l).expect("adapter present");
        let (w, report) = merge(pair, m.weight(l), m.bias(l), MERGE_PROBES, recipe.seed ^ l as u64)?;
        m.weight_mut(l).data_mut().copy_from_slice(w.data());
        merges.push(report);
    }
    let val_ppl = m.perplexity_of_sequences(val)?;
    trajectory.push(TrajectoryPoint { iter: recipe.iters, lr: last.0, train_loss: last.1, val_ppl });
    Ok(RetrainOutcome { model: m, lr, trajectory, merges, unmerged_lora })
}

/// Outcome of one grid member.
#[derive(Debug, Clone, PartialEq)]
pub struct GridRow {
    pub lr: f64,
    /// Final validation perplexity, or the failure message.
    pub result: core::result::Result<f64, String>,
}

#[derive(Debug, Clone)]
pub struct TuneOutcome<T> {
    pub best_lr: f64,
    pub best: RetrainOutcome<T>,
    pub grid: Vec<GridRow>,
}

/// Runs [`retrain`] for every grid value and keeps the lowest final
/// validation perplexity (ties go to the smaller learning rate).
pub fn tune_lr<T: Scalar>(
    model: &TaggedModel<T>,
    recipe: &RetrainRecipe,
    train: &[usize],
    val: &[Vec<usize>],
) -> Result<TuneOutcome<T>> {
    recipe.validate()?;
    if recipe.lr_grid.is_empty() {
        bail!(Config, "learning-rate grid is empty");
    }
    let mut order = recipe.lr_grid.clone();
    order.sort_by(|a, b| a.partial_cmp(b).expect("finite rates"));
    let mut best: Option<RetrainOutcome<T>> = None;
    let mut grid = Vec::new();
    for &lr in &order {
        match retrain(model, recipe, lr, train, val) {
            Ok(out) => {
                let ppl = out.final_ppl();
                let finite = ppl.is_finite();
                grid.push(GridRow { lr, result: if finite { Ok(ppl) } else { Err(format!("perplexity {ppl}")) } });
                if finite && best.as_ref().map_or(true, |b| ppl < b.final_ppl()) {
                    best = Some(out);
                }
            }
            Err(e @ (Error::NonFinite { .. } | Error::Numerical(_))) => grid.push(GridRow { lr, result: Err(format!("{e}")) }),
            Err(e) => return Err(e),
        }
    }
    match best {
        Some(best) => Ok(TuneOutcome { best_lr: best.lr, best, grid }),
        None => {
            let detail: Vec<String> = grid
                .iter()
                .map(|r| format!("{:e}: {}", r.lr, r.result.as_ref().err().map(String::as_str).unwrap_or("?")))
                .collect();
            bail!(Numerical, "every learning rate diverged ({})", detail.join("; "))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MemoryAudit {
    pub trainable: usize,
    /// Base model entries (adapters excluded).
    pub total: usize,
    pub fraction: f64,
    pub optimizer_floats: usize,
}

/// Trainable entries and optimizer footprint of `recipe` on `model`.
pub fn memory_audit<T: Scalar>(model: &TaggedModel<T>, recipe: &RetrainRecipe) -> Result<MemoryAudit> {
    let prepared = prepare(model, recipe)?;
    let trainable = prepared.trainable_count();
    let total = prepared.parameter_count();
    let state = OptimizerState::new(AdamWConfig::default(), prepared.all_params());
    Ok(MemoryAudit { trainable, total, fraction: trainable as f64 / total as f64, optimizer_floats: state.allocated_floats() })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    /// Seed for the batch order (initialisation uses the model config seed).
    pub seed: u64,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        Self { steps: 20_000, batch_size: 4, lr: 2e-3, warmup_fraction: 0.02, weight_decay: 0.1, seed: 0 }
    }
}

/// Trains a freshly initialised dense model on `train`. `on_step` sees
/// every step's index and loss.
pub fn pretrain<T: Scalar>(
    config: MiniGptConfig,
    opts: &PretrainOptions,
    train: &[usize],
    mut on_step: impl FnMut(usize, f64),
) -> Result<TaggedModel<T>> {
    if opts.steps == 0 || opts.batch_size == 0 {
        bail!(Config, "pretraining needs positive steps and batch size");
    }
    let mut m = TaggedModel::<T>::init(config)?;
    m.set_trainable_groups(&GroupTag::ALL);
    let schedule = LrSchedule::with_warmup_fraction(opts.lr, opts.steps, opts.warmup_fraction)?;
    let cfg = AdamWConfig { weight_decay: opts.weight_decay, ..AdamWConfig::default() };
    let mut opt = AdamW::new(cfg, m.all_params());
    let mut sampler = BatchSampler::new(train, opts.batch_size, config.context_length + 1, opts.seed)?;
    for it in 0..opts.steps {
        let loss = accumulate_step(&mut m, &mut sampler, 1)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite { iter: it, loss });
        }
        opt.step(&mut m.all_params_mut(), schedule.lr_at(it)?)?;
        on_step(it, loss);
    }
    m.zero_grads();
    m.freeze_all();
    Ok(m)
}
