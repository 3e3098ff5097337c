//! Calibration-driven pruning: activation-scaled magnitude (Wanda) and
//! Hessian-based pruning with weight compensation (SparseGPT), plus the
//! model-level driver shared with plain magnitude pruning.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

#[cfg(not(feature = "std"))]
use num_traits::Float;

use crate::autograd::Tape;
use crate::data::validation_windows;
use crate::error::{bail, Error, Result};
use crate::linalg::{cholesky_upper, gram, spd_inverse};
use crate::model::TaggedModel;
use crate::scalar::Scalar;
use crate::sparsity::{build_mask, magnitude_scores, prune_order, Grouping, MaskPattern, SparsityMask};
use crate::tensor::Tensor;

/// Columns processed together by [`sparsegpt_prune`].
pub const SPARSEGPT_BLOCK: usize = 8;
/// Default Hessian damping as a fraction of its mean diagonal.
pub const DEFAULT_DAMP: f64 = 0.01;

/// Token sequences whose layer inputs drive data-aware criteria.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CalibrationSet {
    pub sequences: Vec<Vec<usize>>,
    pub seed: u64,
}

impl CalibrationSet {
    /// `count` random windows of `len` tokens drawn with `seed`.
    pub fn sample(corpus: &[usize], count: usize, len: usize, seed: u64) -> Result<Self> {
        if count == 0 {
            bail!(Data, "calibration set must hold at least one sequence");
        }
        Ok(Self { sequences: validation_windows(corpus, count, len, seed)?, seed })
    }

    /// Total token positions, i.e. columns of every captured input matrix.
    pub fn positions(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }
}

/// Input matrix (features × positions) of every prunable layer over the
/// calibration set, in layer declaration order.
pub fn capture_activations<T: Scalar>(model: &TaggedModel<T>, calib: &CalibrationSet) -> Result<Vec<Tensor<T>>> {
    if calib.sequences.is_empty() || calib.positions() == 0 {
        bail!(Data, "calibration set is empty");
    }
    let n_layers = model.layers().len();
    let mut rows: Vec<Vec<T>> = vec![Vec::new(); n_layers];
    let mut widths = vec![0usize; n_layers];
    // Sequences of equal length are batched; others run one by one.
    let mut start = 0;
    while start < calib.sequences.len() {
        let len = calib.sequences[start].len();
        let mut end = start + 1;
        while end < calib.sequences.len() && end - start < 16 && calib.sequences[end].len() == len {
            end += 1;
        }
        let tokens: Vec<usize> = calib.sequences[start..end].iter().flatten().copied().collect();
        let mut tape = Tape::new();
        let pass = model.forward(&mut tape, &tokens, end - start, len)?;
        for (l, &v) in pass.layer_inputs.iter().enumerate() {
            widths[l] = tape.shape(v)[1];
            rows[l].extend_from_slice(tape.value(v));
        }
        start = end;
    }
    let positions = calib.positions();
    rows.into_iter()
        .zip(widths)
        .map(|(data, w)| Tensor::new(&[positions, w], data)?.transpose())
        .collect()
}

fn check_inputs<T: Scalar>(w: &Tensor<T>, x: &Tensor<T>) -> Result<()> {
    if !w.is_matrix() || !x.is_matrix() {
        bail!(Dimension, "weight {:?} and inputs {:?} must be matrices", w.shape(), x.shape());
    }
    if x.rows() != w.cols() {
        bail!(Dimension, "inputs have {} features, weight expects {}", x.rows(), w.cols());
    }
    Ok(())
}

/// Euclidean norm of every input feature (row of `x`), accumulated in f64.
pub fn feature_norms<T: Scalar>(x: &Tensor<T>) -> Vec<f64> {
    x.data()
        .chunks_exact(x.cols())
        .map(|row| row.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt())
        .collect()
}

/// `|W_ij| · ‖X_j‖₂`.
pub fn wanda_scores<T: Scalar>(w: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    check_inputs(w, x)?;
    Ok(wanda_scores_from_norms(w, &feature_norms(x)))
}

pub fn wanda_scores_from_norms<T: Scalar>(w: &Tensor<T>, norms: &[f64]) -> Tensor<T> {
    let m = w.cols();
    let data = w
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| T::from_f64(v.as_f64().abs() * norms[i % m]))
        .collect();
    Tensor::new(w.shape(), data).expect("same shape as weight")
}

/// Prunes `w` to `pattern` given calibration inputs `x` (features ×
/// positions), compensating the kept weights column block by column block.
pub fn sparsegpt_prune<T: Scalar>(
    w: &Tensor<T>,
    x: &Tensor<T>,
    pattern: MaskPattern,
    damp: f64,
    owner: &str,
) -> Result<(SparsityMask, Tensor<T>)> {
    check_inputs(w, x)?;
    let xf: Vec<f64> = x.data().iter().map(|v| v.as_f64()).collect();
    let h = gram(&xf, x.rows(), x.cols());
    sparsegpt_prune_gram(w, &h, pattern, damp, owner)
}

/// [`sparsegpt_prune`] from a precomputed `H = XXᵀ`.
pub fn sparsegpt_prune_gram<T: Scalar>(
    w: &Tensor<T>,
    gram: &[f64],
    pattern: MaskPattern,
    damp: f64,
    owner: &str,
) -> Result<(SparsityMask, Tensor<T>)> {
    if !w.is_matrix() {
        bail!(Dimension, "weight must be a matrix, got {:?}", w.shape());
    }
    let (n, m) = (w.rows(), w.cols());
    if gram.len() != m * m {
        bail!(Dimension, "Hessian of {} entries for {m} input features", gram.len());
    }
    pattern.validate()?;
    pattern.check_shape(m)?;
    if !(damp >= 0.0 && damp.is_finite()) {
        bail!(Config, "damping must be a nonnegative number, got {damp}");
    }
    let mut wf: Vec<f64> = w.data().iter().map(|v| v.as_f64()).collect();
    let mut h = gram.to_vec();
    for j in 0..m {
        if h[j * m + j] == 0.0 {
            h[j * m + j] = 1.0;
            for r in 0..n {
                wf[r * m + j] = 0.0;
            }
        }
    }
    let mean_diag = (0..m).map(|j| h[j * m + j]).sum::<f64>() / m as f64;
    for j in 0..m {
        h[j * m + j] += damp * mean_diag;
    }
    let singular = |e: Error| match e {
        Error::Numerical(msg) => Error::Numerical(format!("Hessian of `{owner}` is singular ({msg}); increase damping above {damp}")),
        other => other,
    };
    let hinv = spd_inverse(&h, m).map_err(singular)?;
    let u = cholesky_upper(&hinv, m).map_err(singular)?;

    let block = match pattern {
        MaskPattern::SemiStructured { m: g, .. } => SPARSEGPT_BLOCK.div_ceil(g) * g,
        MaskPattern::Unstructured { .. } => SPARSEGPT_BLOCK,
    };
    let mut keep = vec![true; n * m];
    let mut pruned = 0usize;
    let mut err = vec![0.0f64; n * block];
    for i1 in (0..m).step_by(block) {
        let i2 = (i1 + block).min(m);
        let cnt = i2 - i1;
        if let MaskPattern::Unstructured { sparsity } = pattern {
            // Cumulative rounding keeps the overall count exact.
            let target = (sparsity * (n * i2) as f64).round() as usize;
            let k = target - pruned;
            let scores: Vec<f64> = (0..n * cnt)
                .map(|t| {
                    let (r, c) = (t / cnt, i1 + t % cnt);
                    let d = u[c * m + c];
                    wf[r * m + c] * wf[r * m + c] / (d * d)
                })
                .collect();
            let mut idx: Vec<usize> = (0..n * cnt).collect();
            prune_order(&scores, &mut idx);
            for &t in &idx[..k] {
                keep[(t / cnt) * m + i1 + t % cnt] = false;
            }
            pruned = target;
        }
        for i in i1..i2 {
            if let MaskPattern::SemiStructured { n: keep_n, m: g } = pattern {
                if (i - i1) % g == 0 {
                    for r in 0..n {
                        let scores: Vec<f64> = (i..i + g)
                            .map(|c| {
                                let d = u[c * m + c];
                                wf[r * m + c] * wf[r * m + c] / (d * d)
                            })
                            .collect();
                        let mut idx: Vec<usize> = (0..g).collect();
                        prune_order(&scores, &mut idx);
                        for &t in &idx[..g - keep_n] {
                            keep[r * m + i + t] = false;
                        }
                    }
                }
            }
            let d = u[i * m + i];
            for r in 0..n {
                let wv = wf[r * m + i];
                let q = if keep[r * m + i] { wv } else { 0.0 };
                let e = (wv - q) / d;
                wf[r * m + i] = q;
                err[r * block + (i - i1)] = e;
                if e != 0.0 {
                    for j in i + 1..i2 {
                        wf[r * m + j] -= e * u[i * m + j];
                    }
                }
            }
        }
        for r in 0..n {
            for t in 0..cnt {
                let e = err[r * block + t];
                if e == 0.0 {
                    continue;
                }
                let urow = &u[(i1 + t) * m..(i1 + t + 1) * m];
                let wrow = &mut wf[r * m..(r + 1) * m];
                for j in i2..m {
                    wrow[j] -= e * urow[j];
                }
            }
        }
    }
    for (v, &k) in wf.iter_mut().zip(&keep) {
        if !k {
            *v = 0.0;
        }
    }
    let mask = SparsityMask::from_keep(n, m, keep, pattern, owner)?;
    let out = Tensor::new(&[n, m], wf.into_iter().map(T::from_f64).collect())?;
    Ok((mask, out))
}

/// Pruning criterion applied uniformly to every prunable layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Criterion {
    Magnitude,
    Wanda,
    SparseGpt,
}

impl Criterion {
    pub const ALL: [Criterion; 3] = [Criterion::Magnitude, Criterion::Wanda, Criterion::SparseGpt];

    pub fn as_str(self) -> &'static str {
        match self {
            Criterion::Magnitude => "magnitude",
            Criterion::Wanda => "wanda",
            Criterion::SparseGpt => "sparsegpt",
        }
    }

    pub fn needs_calibration(self) -> bool {
        self != Criterion::Magnitude
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s.trim().to_ascii_lowercase().chars().filter(|c| !matches!(c, '-' | '_')).collect();
        Ok(match norm.as_str() {
            "magnitude" | "mag" => Criterion::Magnitude,
            "wanda" => Criterion::Wanda,
            "sparsegpt" => Criterion::SparseGpt,
            _ => bail!(Config, "unknown pruning criterion `{s}`"),
        })
    }
}

/// Mask for one layer under a data-aware criterion, plus the compensated
/// weight when the criterion produces one.
pub fn criterion_mask<T: Scalar>(
    criterion: Criterion,
    w: &Tensor<T>,
    x: Option<&Tensor<T>>,
    pattern: MaskPattern,
    damp: f64,
    owner: &str,
) -> Result<(SparsityMask, Option<Tensor<T>>)> {
    let need_x = || match x {
        Some(x) => Ok(x),
        None => Err(Error::Config(format!("{criterion} pruning needs calibration inputs"))),
    };
    match criterion {
        Criterion::Magnitude => Ok((build_mask(&magnitude_scores(w)?, pattern, Grouping::Tensor, owner)?, None)),
        Criterion::Wanda => Ok((build_mask(&wanda_scores(w, need_x()?)?, pattern, Grouping::Row, owner)?, None)),
        Criterion::SparseGpt => {
            let (mask, w2) = sparsegpt_prune(w, need_x()?, pattern, damp, owner)?;
            Ok((mask, Some(w2)))
        }
    }
}

/// Prunable layers of `block` grouped by shared input, in forward order.
pub fn input_stages<T: Scalar>(model: &TaggedModel<T>, block: usize) -> Vec<Vec<usize>> {
    let mut stages: Vec<Vec<usize>> = Vec::new();
    for l in model.block_layers(block) {
        let stage = model.layers()[l].kind.input_stage();
        if stages.len() <= stage {
            stages.resize(stage + 1, Vec::new());
        }
        stages[stage].push(l);
    }
    stages
}

/// Prunes every prunable layer of `model` to `pattern` and installs the
/// masks. Data-aware criteria walk the layers in forward order, capturing
/// each layer's inputs from the model with everything upstream already
/// pruned.
pub fn prune_model<T: Scalar>(
    model: &mut TaggedModel<T>,
    criterion: Criterion,
    pattern: MaskPattern,
    calib: Option<&CalibrationSet>,
    damp: f64,
) -> Result<()> {
    pattern.validate()?;
    if !criterion.needs_calibration() {
        for l in 0..model.layers().len() {
            let name = model.layers()[l].name.clone();
            let (mask, _) = criterion_mask(criterion, model.weight(l), None, pattern, damp, &name)?;
            model.set_mask(l, mask)?;
        }
        return Ok(());
    }
    let Some(calib) = calib else {
        bail!(Config, "{criterion} pruning needs a calibration set");
    };
    for b in 0..model.n_blocks() {
        for stage in input_stages(model, b) {
            let inputs = capture_activations(model, calib)?;
            for l in stage {
                let name = model.layers()[l].name.clone();
                let (mask, w2) = criterion_mask(criterion, model.weight(l), Some(&inputs[l]), pattern, damp, &name)?;
                if let Some(w2) = w2 {
                    model.weight_mut(l).data_mut().copy_from_slice(w2.data());
                }
                model.set_mask(l, mask)?;
            }
        }
    }
    Ok(())
}
