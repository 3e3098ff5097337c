//! Layer-wise reconstruction: fit a sparse replacement `M ⊙ Ŵ` to the
//! dense layer's outputs on calibration inputs, minimising
//! `‖W X − (M ⊙ Ŵ) X‖²`, either directly or through a masked low-rank
//! update, plus an exact least-squares oracle.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::adapters::{attach, merged_weight, AdapterKind, AdapterSpec};
use crate::autograd::{Tape, Var};
use crate::criteria::{capture_activations, criterion_mask, input_stages, CalibrationSet, Criterion};
use crate::error::{bail, Error, Result};
use crate::linalg::{cholesky, cholesky_solve, gram, pinv_solve};
use crate::model::TaggedModel;
use crate::optim::{AdamW, AdamWConfig, LrSchedule};
use crate::param::{GroupTag, Parameter};
use crate::scalar::Scalar;
use crate::sparsity::{apply_mask, MaskPattern, MaskRegistry, SparsityMask};
use crate::tensor::Tensor;

/// Relative Gram damping used by [`lstsq_oracle`].
pub const ORACLE_DAMP: f64 = 1e-8;

/// One layer's reconstruction target and the weights to start from.
#[derive(Debug, Clone)]
pub struct ReconstructionProblem<T> {
    /// Original dense weight (`n × m`).
    pub target: Tensor<T>,
    pub mask: SparsityMask,
    /// Inputs, `m × S`.
    pub inputs: Tensor<T>,
    /// Starting point for optimisation (already masked).
    pub start: Tensor<T>,
    /// `W X` in f64, computed once from the original weight.
    outputs: Vec<f64>,
    /// `X Xᵀ` in f64.
    gram: Vec<f64>,
}

impl<T: Scalar> ReconstructionProblem<T> {
    /// Starts from `M ⊙ W`.
    pub fn new(target: Tensor<T>, mask: SparsityMask, inputs: Tensor<T>) -> Result<Self> {
        let start = apply_mask(&target, &mask)?;
        Self::with_start(target, mask, inputs, start)
    }

    pub fn with_start(target: Tensor<T>, mask: SparsityMask, inputs: Tensor<T>, start: Tensor<T>) -> Result<Self> {
        if !target.is_matrix() || !inputs.is_matrix() {
            bail!(Dimension, "reconstruction needs matrices, got {:?} and {:?}", target.shape(), inputs.shape());
        }
        let (n, m) = (target.rows(), target.cols());
        if inputs.rows() != m {
            bail!(Dimension, "inputs have {} features, weight expects {m}", inputs.rows());
        }
        target.check_same_shape(&mask.shape(), "reconstruction mask")?;
        start.check_same_shape(&[n, m], "reconstruction start")?;
        let w: Vec<f64> = target.data().iter().map(|v| v.as_f64()).collect();
        let x: Vec<f64> = inputs.data().iter().map(|v| v.as_f64()).collect();
        let s = inputs.cols();
        let mut outputs = vec![0.0; n * s];
        crate::kernels::gemm(&w, &x, &mut outputs, n, m, s);
        let gram = gram(&x, m, s);
        let mut start = start;
        crate::sparsity::mask_in_place(start.data_mut(), &mask);
        Ok(Self { target, mask, inputs, start, outputs, gram })
    }

    pub fn rows(&self) -> usize {
        self.target.rows()
    }

    pub fn cols(&self) -> usize {
        self.target.cols()
    }

    pub fn gram(&self) -> &[f64] {
        &self.gram
    }

    /// The objective as a differentiable tape expression of the effective
    /// weight `w_hat`, in Gram form `Σ((R·G) ⊙ R)` with `R = W − Ŵ`.
    pub fn objective_on_tape(&self, tape: &mut Tape<T>, w_hat: Var) -> Result<Var> {
        let (n, m) = (self.rows(), self.cols());
        let target = tape.constant(&[n, m], self.target.data().to_vec())?;
        let resid = tape.sub(target, w_hat)?;
        let g = tape.constant(&[m, m], self.gram.iter().map(|&v| T::from_f64(v)).collect())?;
        let rg = tape.matmul(resid, g)?;
        let prod = tape.mul(rg, resid)?;
        Ok(tape.sum(prod))
    }

    /// `‖W X − (M ⊙ Ŵ) X‖²` accumulated in f64.
    pub fn objective(&self, w_hat: &Tensor<T>) -> Result<f64> {
        let (n, m) = (self.rows(), self.cols());
        w_hat.check_same_shape(&[n, m], "objective")?;
        let mut masked: Vec<f64> = w_hat.data().iter().map(|v| v.as_f64()).collect();
        crate::sparsity::mask_in_place(&mut masked, &self.mask);
        let x: Vec<f64> = self.inputs.data().iter().map(|v| v.as_f64()).collect();
        let s = self.inputs.cols();
        let mut y = vec![0.0; n * s];
        crate::kernels::gemm(&masked, &x, &mut y, n, m, s);
        Ok(self.outputs.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum())
    }
}

/// Exact minimiser of the reconstruction objective.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleSolution<T> {
    pub weight: Tensor<T>,
    pub objective: f64,
    /// Rows whose damped Gram was singular (solved by pseudo-inverse).
    pub flagged_rows: Vec<usize>,
}

/// Row-wise normal equations on each row's kept columns.
pub fn lstsq_oracle<T: Scalar>(problem: &ReconstructionProblem<T>) -> Result<OracleSolution<T>> {
    let (n, m) = (problem.rows(), problem.cols());
    let g = &problem.gram;
    let mean_diag = (0..m).map(|j| g[j * m + j]).sum::<f64>() / m as f64;
    let damp = ORACLE_DAMP * mean_diag;
    let w: Vec<f64> = problem.target.data().iter().map(|v| v.as_f64()).collect();
    let mut out = vec![0.0f64; n * m];
    let mut flagged = Vec::new();
    for r in 0..n {
        let kept: Vec<usize> = (0..m).filter(|&c| problem.mask.keep()[r * m + c]).collect();
        let k = kept.len();
        if k == 0 {
            continue;
        }
        let wr = &w[r * m..(r + 1) * m];
        let mut a = vec![0.0; k * k];
        let mut b = vec![0.0; k];
        for (i, &ci) in kept.iter().enumerate() {
            let grow = &g[ci * m..(ci + 1) * m];
            for (j, &cj) in kept.iter().enumerate() {
                a[i * k + j] = grow[cj];
            }
            a[i * k + i] += damp;
            b[i] = grow.iter().zip(wr).map(|(x, y)| x * y).sum();
        }
        let sol = match cholesky(&a, k) {
            Ok(l) => cholesky_solve(&l, k, &b),
            Err(_) => {
                flagged.push(r);
                pinv_solve(&a, k, &b)
            }
        };
        for (i, &ci) in kept.iter().enumerate() {
            out[r * m + ci] = sol[i];
        }
    }
    let weight = Tensor::new(&[n, m], out.into_iter().map(T::from_f64).collect())?;
    let objective = problem.objective(&weight)?;
    Ok(OracleSolution { weight, objective, flagged_rows: flagged })
}

/// Best objective over every unstructured mask with the pattern's prune
/// count (tensor-level), each solved by [`lstsq_oracle`]. Exponential in
/// the weight size; meant for tiny verification layers.
pub fn exhaustive_best<T: Scalar>(target: &Tensor<T>, inputs: &Tensor<T>, sparsity: f64) -> Result<(SparsityMask, f64)> {
    let total = target.numel();
    if total > 20 {
        bail!(Config, "exhaustive search limited to 20 weights, got {total}");
    }
    let prune = (sparsity * total as f64).round() as usize;
    let pattern = MaskPattern::unstructured(sparsity)?;
    let mut best: Option<(SparsityMask, f64)> = None;
    for bits in 0u32..(1 << total) {
        if bits.count_ones() as usize != total - prune {
            continue;
        }
        let keep: Vec<bool> = (0..total).map(|i| bits >> i & 1 == 1).collect();
        let mask = SparsityMask::from_keep(target.rows(), target.cols(), keep, pattern, "exhaustive")?;
        let problem = ReconstructionProblem::new(target.clone(), mask.clone(), inputs.clone())?;
        let obj = lstsq_oracle(&problem)?.objective;
        if best.as_ref().map_or(true, |(_, b)| obj < *b) {
            best = Some((mask, obj));
        }
    }
    best.ok_or_else(|| Error::Config(format!("no mask keeps {} of {total} weights", total - prune)))
}

/// How the sparse weight is parametrised during reconstruction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ReconMethod {
    /// Optimise the kept entries of `Ŵ` directly.
    Direct,
    /// `Ŵ = Ŵ₀ + (α/r)(M ⊙ BA)` with only `B`, `A` trained.
    MaskedLora { rank: usize, alpha: f64 },
}

impl ReconMethod {
    pub fn label(&self) -> String {
        match self {
            ReconMethod::Direct => "direct".into(),
            ReconMethod::MaskedLora { rank, .. } => format!("masked-lora-r{rank}"),
        }
    }
}

/// Result of [`reconstruct_layer`].
#[derive(Debug, Clone)]
pub struct LayerFit<T> {
    pub weight: Tensor<T>,
    pub obj_initial: f64,
    pub obj_final: f64,
    /// Floats held in optimizer moments during the fit.
    pub optimizer_floats: usize,
    /// Entries the optimizer updated.
    pub trainable_entries: usize,
}

/// Minimises the reconstruction objective with AdamW under a linear
/// warmup/decay schedule. The best iterate is returned, so the final
/// objective never exceeds the initial one.
pub fn reconstruct_layer<T: Scalar>(
    problem: &ReconstructionProblem<T>,
    method: ReconMethod,
    steps: usize,
    lr: f64,
    seed: u64,
) -> Result<LayerFit<T>> {
    if steps == 0 {
        bail!(Config, "reconstruction needs at least one step");
    }
    if !(lr >= 0.0 && lr.is_finite()) {
        bail!(Config, "learning rate must be a nonnegative number, got {lr}");
    }
    let (n, m) = (problem.rows(), problem.cols());
    let obj_initial = problem.objective(&problem.start)?;
    let mask_t: Vec<T> = problem.mask.as_scalars();
    let schedule = LrSchedule::new(lr, steps)?;

    let mut params: Vec<Parameter<T>> = match method {
        ReconMethod::Direct => {
            let v = Parameter::new("w_hat", GroupTag::LinearWeight, problem.start.clone().with_requires_grad(true));
            vec![v]
        }
        ReconMethod::MaskedLora { rank, alpha } => {
            let spec = AdapterSpec { rank, alpha, ..AdapterSpec::new(AdapterKind::MaskedLora) };
            let pair = attach("w_hat", &problem.start, &spec, seed, Some(&problem.mask))?;
            vec![pair.b, pair.a]
        }
    };
    let mut masks = MaskRegistry::default();
    if method == ReconMethod::Direct {
        masks.register("w_hat", problem.mask.clone())?;
    }
    let mut opt = AdamW::new(AdamWConfig::default(), params.iter()).with_masks(masks);
    let optimizer_floats = opt.state.allocated_floats();
    let trainable_entries = params.iter().map(Parameter::numel).sum();

    let weight_of = |params: &[Parameter<T>]| -> Result<Tensor<T>> {
        match method {
            ReconMethod::Direct => apply_mask(&params[0].tensor, &problem.mask),
            ReconMethod::MaskedLora { rank, alpha } => {
                let spec = AdapterSpec { rank, alpha, ..AdapterSpec::new(AdapterKind::MaskedLora) };
                let mut pair = attach("w_hat", &problem.start, &spec, seed, Some(&problem.mask))?;
                pair.b.tensor = params[0].tensor.clone();
                pair.a.tensor = params[1].tensor.clone();
                merged_weight(&pair, &problem.start)
            }
        }
    };

    let mut best: Option<(f64, Vec<Tensor<T>>)> = None;
    for it in 0..=steps {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.leaf(&p.tensor)).collect();
        let mk = tape.constant(&[n, m], mask_t.clone())?;
        let what = match method {
            ReconMethod::Direct => tape.mul(vars[0], mk)?,
            ReconMethod::MaskedLora { rank, alpha } => {
                let ba = tape.matmul(vars[0], vars[1])?;
                let masked = tape.mul(ba, mk)?;
                let scaled = tape.scale(masked, T::from_f64(alpha / rank as f64));
                let w0 = tape.constant(&[n, m], problem.start.data().to_vec())?;
                tape.add(w0, scaled)?
            }
        };
        let loss = problem.objective_on_tape(&mut tape, what)?;
        let value = tape.value(loss)[0].as_f64();
        if !value.is_finite() {
            return Err(Error::NonFinite { iter: it, loss: value });
        }
        if best.as_ref().map_or(true, |(b, _)| value < *b) {
            best = Some((value, params.iter().map(|p| p.tensor.clone()).collect()));
        }
        if it == steps {
            break;
        }
        tape.backward(loss)?;
        for (p, &v) in params.iter_mut().zip(&vars) {
            p.tensor.zero_grad();
            tape.deliver_grad(v, &mut p.tensor)?;
        }
        let mut refs: Vec<&mut Parameter<T>> = params.iter_mut().collect();
        opt.step(&mut refs, schedule.lr_at(it)?)?;
    }
    if let Some((_, tensors)) = best {
        for (p, t) in params.iter_mut().zip(tensors) {
            p.tensor = t;
        }
    }
    let mut weight = weight_of(&params)?;
    weight.set_requires_grad(false);
    let mut obj_final = problem.objective(&weight)?;
    if obj_final > obj_initial {
        weight = problem.start.clone();
        obj_final = obj_initial;
    }
    Ok(LayerFit { weight, obj_initial, obj_final, optimizer_floats, trainable_entries })
}

/// Settings for [`sequential_reconstruct`].
#[derive(Debug, Clone, PartialEq)]
pub struct ReconOptions {
    pub criterion: Criterion,
    pub pattern: MaskPattern,
    pub method: ReconMethod,
    /// Optimizer steps per layer; 0 only prunes.
    pub steps: usize,
    pub lr: f64,
    pub damp: f64,
    pub seed: u64,
    /// Also solve the least-squares oracle per layer for the log.
    pub with_oracle: bool,
}

/// One row of the per-layer reconstruction log.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerRecord {
    pub layer: String,
    pub criterion: Criterion,
    pub steps: usize,
    pub obj_initial: f64,
    pub obj_final: f64,
    pub obj_oracle: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReconReport {
    pub records: Vec<LayerRecord>,
    /// Largest optimizer footprint seen while fitting any single layer.
    pub peak_optimizer_floats: usize,
    /// Largest per-block sum of trainable entries.
    pub largest_block_trainable: usize,
}

/// Prunes `model` block by block with the chosen criterion and refits each
/// layer to the outputs of its original dense weight. Inputs are captured
/// from the current model, so upstream layers are already pruned and
/// reconstructed when a layer is processed.
pub fn sequential_reconstruct<T: Scalar>(
    model: &mut TaggedModel<T>,
    calib: &CalibrationSet,
    opts: &ReconOptions,
) -> Result<ReconReport> {
    opts.pattern.validate()?;
    let dense: Vec<Tensor<T>> = (0..model.layers().len()).map(|l| model.weight(l).clone()).collect();
    let mut report = ReconReport::default();
    for b in 0..model.n_blocks() {
        let mut block_trainable = 0;
        for stage in input_stages(model, b) {
            let inputs = capture_activations(model, calib)?;
            for l in stage {
                let name = model.layers()[l].name.clone();
                let x = &inputs[l];
                let (mask, compensated) = criterion_mask(opts.criterion, &dense[l], Some(x), opts.pattern, opts.damp, &name)?;
                let start = match compensated {
                    Some(w) => w,
                    None => apply_mask(&dense[l], &mask)?,
                };
                let problem = ReconstructionProblem::with_start(dense[l].clone(), mask.clone(), x.clone(), start)?;
                let (weight, obj_initial, obj_final) = if opts.steps == 0 {
                    let o = problem.objective(&problem.start)?;
                    (problem.start.clone(), o, o)
                } else {
                    let fit = reconstruct_layer(&problem, opts.method, opts.steps, opts.lr, opts.seed ^ l as u64)?;
                    report.peak_optimizer_floats = report.peak_optimizer_floats.max(fit.optimizer_floats);
                    block_trainable += fit.trainable_entries;
                    (fit.weight, fit.obj_initial, fit.obj_final)
                };
                let obj_oracle = if opts.with_oracle { Some(lstsq_oracle(&problem)?.objective) } else { None };
                model.weight_mut(l).data_mut().copy_from_slice(weight.data());
                model.set_mask(l, mask)?;
                report.records.push(LayerRecord { layer: name, criterion: opts.criterion, steps: opts.steps, obj_initial, obj_final, obj_oracle });
            }
        }
        report.largest_block_trainable = report.largest_block_trainable.max(block_trainable);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::criteria::{prune_model, DEFAULT_DAMP};
    use crate::gradcheck::{central_differences, relative_error, STEP};
    use crate::model::MiniGptConfig;
    use crate::sparsity::{build_mask, magnitude_scores, Grouping};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap()
    }

    fn mask_of(keep: &[bool], rows: usize, cols: usize) -> SparsityMask {
        SparsityMask::from_keep(rows, cols, keep.to_vec(), MaskPattern::unstructured(0.5).unwrap(), "w").unwrap()
    }

    fn magnitude_problem(n: usize, m: usize, s: usize, seed: u64) -> ReconstructionProblem<f64> {
        let w = randn(&[n, m], seed);
        let x = randn(&[m, s], seed + 1000);
        let mask = build_mask(&magnitude_scores(&w).unwrap(), MaskPattern::unstructured(0.5).unwrap(), Grouping::Tensor, "w").unwrap();
        ReconstructionProblem::new(w, mask, x).unwrap()
    }

    #[test]
    fn objective_examples() {
        let w: Tensor<f64> = Tensor::from_rows(&[&[2.0, 1.0]]).unwrap();
        let eye = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        let dense = ReconstructionProblem::new(w.clone(), SparsityMask::dense(1, 2, "w"), eye.clone()).unwrap();
        assert_eq!(dense.objective(&w).unwrap(), 0.0);
        let p = ReconstructionProblem::new(w.clone(), mask_of(&[true, false], 1, 2), eye).unwrap();
        assert_eq!(p.objective(&Tensor::from_rows(&[&[2.0, 0.0]]).unwrap()).unwrap(), 1.0);
        let sol: OracleSolution<f64> = lstsq_oracle(&p).unwrap();
        assert!((sol.weight.data()[0] - 2.0).abs() < 1e-7 && sol.weight.data()[1] == 0.0);
        assert!((sol.objective - 1.0).abs() < 1e-7);
    }

    #[test]
    fn oracle_hand_example() {
        let w: Tensor<f64> = Tensor::from_rows(&[&[1.0, 1.0]]).unwrap();
        let x = Tensor::from_rows(&[&[1.0, 1.0], &[1.0, 0.0]]).unwrap();
        let p = ReconstructionProblem::new(w, mask_of(&[true, false], 1, 2), x).unwrap();
        let sol: OracleSolution<f64> = lstsq_oracle(&p).unwrap();
        assert!((sol.weight.data()[0] - 1.5).abs() < 1e-7);
        assert!((sol.objective - 0.5).abs() < 1e-7);
        assert!(sol.flagged_rows.is_empty());
    }

    #[test]
    fn dense_mask_oracle_recovers_weight() {
        let w = randn(&[4, 5], 1);
        let x = randn(&[5, 12], 2);
        let p = ReconstructionProblem::new(w.clone(), SparsityMask::dense(4, 5, "w"), x).unwrap();
        let sol: OracleSolution<f64> = lstsq_oracle(&p).unwrap();
        assert!(sol.weight.max_abs_diff(&w) < 1e-6);
        assert!(sol.objective < 1e-10);
    }

    #[test]
    fn rank_deficient_rows_are_flagged() {
        let w = randn(&[2, 3], 3);
        let x = Tensor::new(&[3, 4], vec![0.0; 12]).unwrap();
        let p = ReconstructionProblem::new(w, SparsityMask::dense(2, 3, "w"), x).unwrap();
        let sol: OracleSolution<f64> = lstsq_oracle(&p).unwrap();
        assert_eq!(sol.flagged_rows, vec![0, 1]);
        assert!(sol.weight.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn oracle_separates_by_row_and_dominates() {
        for seed in 0..5 {
            let p = magnitude_problem(6, 8, 20, seed);
            let sol: OracleSolution<f64> = lstsq_oracle(&p).unwrap();
            let mut per_row = 0.0;
            for r in 0..6 {
                let keep: Vec<bool> = (0..48).map(|i| i / 8 == r && p.mask.keep()[i]).collect();
                let wr = Tensor::new(&[1, 8], p.target.data()[r * 8..r * 8 + 8].to_vec()).unwrap();
                let mr = mask_of(&keep[r * 8..r * 8 + 8], 1, 8);
                let pr = ReconstructionProblem::new(wr, mr, p.inputs.clone()).unwrap();
                per_row += lstsq_oracle(&pr).unwrap().objective;
            }
            assert!(((per_row - sol.objective) / sol.objective).abs() < 1e-8);
            let start = p.objective(&p.start).unwrap();
            assert!(sol.objective <= start);
            let fit = reconstruct_layer(&p, ReconMethod::Direct, 50, 1e-2, 0).unwrap();
            assert!(fit.obj_final >= sol.objective * (1.0 - 1e-9));
        }
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        for seed in 0..20 {
            let p = magnitude_problem(4, 6, 10, 50 + seed);
            let w_hat = randn(&[4, 6], 90 + seed);
            let mut tape = Tape::new();
            let v = tape.leaf(&w_hat.clone().with_requires_grad(true));
            let mk = tape.constant(&[4, 6], p.mask.as_scalars()).unwrap();
            let what = tape.mul(v, mk).unwrap();
            let loss = p.objective_on_tape(&mut tape, what).unwrap();
            let obj = p.objective(&w_hat).unwrap();
            assert!(((tape.value(loss)[0] - obj) / obj).abs() < 1e-10);
            tape.backward(loss).unwrap();
            let fd = central_differences(w_hat.data(), STEP, |vals| {
                p.objective(&Tensor::new(&[4, 6], vals.to_vec()).unwrap()).unwrap()
            });
            let err = relative_error(tape.grad(v).unwrap(), &fd, 1e-6);
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn direct_fit_approaches_oracle() {
        for seed in 0..5 {
            let p = magnitude_problem(8, 8, 32, 200 + seed);
            let oracle = lstsq_oracle(&p).unwrap().objective;
            let fit = reconstruct_layer(&p, ReconMethod::Direct, 500, 0.05, 0).unwrap();
            assert!(fit.obj_final <= oracle * 1.05, "seed {seed}: {} vs {oracle}", fit.obj_final);
            assert!(p.mask.covers_support(fit.weight.data()));
        }
    }

    #[test]
    fn zero_lr_is_a_no_op() {
        let p = magnitude_problem(5, 8, 16, 7);
        for method in [ReconMethod::Direct, ReconMethod::MaskedLora { rank: 2, alpha: 4.0 }] {
            let fit = reconstruct_layer(&p, method, 10, 0.0, 1).unwrap();
            assert_eq!(fit.weight, p.start);
            assert_eq!(fit.obj_final, fit.obj_initial);
        }
    }

    #[test]
    fn full_rank_masked_lora_matches_direct() {
        let p = magnitude_problem(6, 6, 24, 11);
        let direct = reconstruct_layer(&p, ReconMethod::Direct, 1500, 0.05, 0).unwrap();
        let lora = reconstruct_layer(&p, ReconMethod::MaskedLora { rank: 6, alpha: 6.0 }, 1500, 0.05, 0).unwrap();
        assert!(lora.obj_final <= direct.obj_final * 1.01 + 1e-9, "{} vs {}", lora.obj_final, direct.obj_final);
        assert!(p.mask.covers_support(lora.weight.data()));
    }

    #[test]
    fn exhaustive_search_beats_magnitude() {
        let w = randn(&[2, 4], 5);
        let x = randn(&[4, 4], 6);
        let (mask, best) = exhaustive_best(&w, &x, 0.5).unwrap();
        assert_eq!(mask.zeros(), 4);
        let p = magnitude_problem(2, 4, 4, 5);
        let p = ReconstructionProblem::new(w, p.mask, x).unwrap();
        assert!(best <= lstsq_oracle(&p).unwrap().objective + 1e-12);
    }

    fn tiny() -> MiniGptConfig {
        MiniGptConfig { vocab_size: 32, context_length: 8, d_model: 16, n_heads: 2, n_layers: 2, d_ff: 32, biases: true, seed: 2 }
    }

    #[test]
    fn zero_steps_equals_criterion_pruning() {
        let corpus: Vec<usize> = (0..300).map(|i| (i * 13 + i / 7) % 32).collect();
        let calib = CalibrationSet::sample(&corpus, 4, 8, 1).unwrap();
        for criterion in Criterion::ALL {
            let base = TaggedModel::<f64>::init(tiny()).unwrap();
            let mut pruned = base.clone();
            prune_model(&mut pruned, criterion, MaskPattern::unstructured(0.5).unwrap(), Some(&calib), DEFAULT_DAMP).unwrap();
            let mut recon = base.clone();
            let opts = ReconOptions {
                criterion,
                pattern: MaskPattern::unstructured(0.5).unwrap(),
                method: ReconMethod::Direct,
                steps: 0,
                lr: 0.0,
                damp: DEFAULT_DAMP,
                seed: 0,
                with_oracle: false,
            };
            sequential_reconstruct(&mut recon, &calib, &opts).unwrap();
            assert_eq!(recon, pruned, "{criterion}");
        }
    }

    #[test]
    fn sequential_reconstruction_improves_every_layer() {
        let corpus: Vec<usize> = (0..300).map(|i| (i * 13 + i / 7) % 32).collect();
        let calib = CalibrationSet::sample(&corpus, 4, 8, 1).unwrap();
        let mut model = TaggedModel::<f64>::init(tiny()).unwrap();
        let opts = ReconOptions {
            criterion: Criterion::Magnitude,
            pattern: MaskPattern::unstructured(0.5).unwrap(),
            method: ReconMethod::MaskedLora { rank: 4, alpha: 8.0 },
            steps: 40,
            lr: 1e-2,
            damp: DEFAULT_DAMP,
            seed: 0,
            with_oracle: true,
        };
        let report = sequential_reconstruct(&mut model, &calib, &opts).unwrap();
        assert_eq!(report.records.len(), 12);
        for r in &report.records {
            assert!(r.obj_final <= r.obj_initial, "{}", r.layer);
            assert!(r.obj_oracle.unwrap() <= r.obj_final * (1.0 + 1e-9));
        }
        for l in 0..12 {
            assert!(model.mask(l).unwrap().covers_support(model.weight(l).data()));
        }
        // Largest layer is fc (32×16): B 32×4 + A 4×16 = 192 entries, ×2 moments.
        assert_eq!(report.peak_optimizer_floats, 2 * 192);
        assert!(report.peak_optimizer_floats <= 2 * report.largest_block_trainable);
    }
}
