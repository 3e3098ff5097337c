//! Binary masks: construction from scores, application, and enforcement
//! during training.
//!
//! Weights are `out×in` matrices. N:M groups run along each row's input
//! dimension: entries `[r, g·m .. (g+1)·m)` form one group.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use num_traits::Float;

use crate::error::{bail, Error, Result};
use crate::param::Parameter;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MaskPattern {
    /// Prune `round(sparsity · numel)` entries.
    Unstructured { sparsity: f64 },
    /// Keep exactly `n` of every `m` consecutive input-dimension entries.
    SemiStructured { n: usize, m: usize },
}

impl MaskPattern {
    pub fn unstructured(sparsity: f64) -> Result<Self> {
        let p = MaskPattern::Unstructured { sparsity };
        p.validate()?;
        Ok(p)
    }

    pub fn n_m(n: usize, m: usize) -> Result<Self> {
        let p = MaskPattern::SemiStructured { n, m };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            MaskPattern::Unstructured { sparsity } => {
                if !(0.0..1.0).contains(&sparsity) {
                    bail!(Pattern, "unstructured sparsity {sparsity} outside [0, 1)");
                }
            }
            MaskPattern::SemiStructured { n, m } => {
                if !(0 < n && n < m) {
                    bail!(Pattern, "N:M pattern needs 0 < n < m, got {n}:{m}");
                }
            }
        }
        Ok(())
    }

    /// Checks that a `rows×cols` weight can carry this pattern.
    pub fn check_shape(&self, cols: usize) -> Result<()> {
        self.validate()?;
        if let MaskPattern::SemiStructured { n, m } = *self {
            if cols % m != 0 {
                bail!(Pattern, "{n}:{m} needs an input dimension divisible by {m}, got {cols}");
            }
        }
        Ok(())
    }

    /// Fraction of entries a mask of this pattern zeroes.
    pub fn nominal_sparsity(&self) -> f64 {
        match *self {
            MaskPattern::Unstructured { sparsity } => sparsity,
            MaskPattern::SemiStructured { n, m } => 1.0 - n as f64 / m as f64,
        }
    }
}

impl fmt::Display for MaskPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MaskPattern::Unstructured { sparsity } => write!(f, "unstructured:{sparsity}"),
            MaskPattern::SemiStructured { n, m } => write!(f, "{n}:{m}"),
        }
    }
}

impl FromStr for MaskPattern {
    type Err = Error;

    /// Accepts `2:4`, `unstructured:0.5`, or a bare fraction `0.5`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let parse_err = || Error::Pattern(alloc::format!("cannot parse pattern `{s}`"));
        if let Some(rest) = s.strip_prefix("unstructured:") {
            return MaskPattern::unstructured(rest.parse().map_err(|_| parse_err())?);
        }
        if let Some((n, m)) = s.split_once(':') {
            return MaskPattern::n_m(n.parse().map_err(|_| parse_err())?, m.parse().map_err(|_| parse_err())?);
        }
        MaskPattern::unstructured(s.parse().map_err(|_| parse_err())?)
    }
}

/// How unstructured masks pick their prune set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Grouping {
    /// Lowest scores across the whole tensor.
    #[default]
    Tensor,
    /// Lowest scores within each output row, every row pruned by the same
    /// fraction (up to one entry of rounding).
    Row,
}

/// Binary keep-mask matched to one weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SparsityMask {
    rows: usize,
    cols: usize,
    keep: Vec<bool>,
    pub pattern: MaskPattern,
    pub owner: String,
}

impl SparsityMask {
    pub fn from_keep(rows: usize, cols: usize, keep: Vec<bool>, pattern: MaskPattern, owner: impl Into<String>) -> Result<Self> {
        if keep.len() != rows * cols {
            bail!(Dimension, "mask of {} entries for {rows}x{cols}", keep.len());
        }
        Ok(Self { rows, cols, keep, pattern, owner: owner.into() })
    }

    pub fn dense(rows: usize, cols: usize, owner: impl Into<String>) -> Self {
        Self {
            rows,
            cols,
            keep: vec![true; rows * cols],
            pattern: MaskPattern::Unstructured { sparsity: 0.0 },
            owner: owner.into(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn numel(&self) -> usize {
        self.keep.len()
    }

    pub fn zeros(&self) -> usize {
        self.keep.iter().filter(|&&k| !k).count()
    }

    pub fn sparsity(&self) -> f64 {
        self.zeros() as f64 / self.numel() as f64
    }

    /// 0/1 entries in the requested element type.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self.keep.iter().map(|&k| if k { T::one() } else { T::zero() }).collect();
        Tensor::new(&[self.rows, self.cols], data).expect("mask dims are positive")
    }

    pub fn as_scalars<T: Scalar>(&self) -> Vec<T> {
        self.keep.iter().map(|&k| if k { T::one() } else { T::zero() }).collect()
    }

    /// `true` when every nonzero of `w` sits on a kept coordinate.
    pub fn covers_support<T: Scalar>(&self, w: &[T]) -> bool {
        w.len() == self.keep.len() && w.iter().zip(&self.keep).all(|(&x, &k)| k || x == T::zero())
    }

    /// Exhaustive check of the N:M group invariant.
    pub fn satisfies_n_m(&self, n: usize, m: usize) -> bool {
        if m == 0 || self.cols % m != 0 {
            return false;
        }
        self.keep.chunks_exact(m).all(|g| g.iter().filter(|&&k| k).count() == n)
    }
}

/// `|W|` entrywise.
pub fn magnitude_scores<T: Scalar>(w: &Tensor<T>) -> Result<Tensor<T>> {
    if !w.is_matrix() {
        bail!(Dimension, "magnitude scores need a 2-D weight, got {:?}", w.shape());
    }
    Ok(w.map(|x| x.abs()))
}

/// Prune order for one comparison group: ascending score, and among equal
/// scores the higher flat index goes first so lower indices are kept.
pub(crate) fn prune_order<T: Scalar>(scores: &[T], idx: &mut [usize]) {
    idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(core::cmp::Ordering::Equal).then(b.cmp(&a)));
}

fn rounded(x: f64) -> usize {
    Float::round(x) as usize
}

pub fn build_mask<T: Scalar>(
    scores: &Tensor<T>,
    pattern: MaskPattern,
    grouping: Grouping,
    owner: &str,
) -> Result<SparsityMask> {
    if !scores.is_matrix() {
        bail!(Dimension, "mask scores must be 2-D, got {:?}", scores.shape());
    }
    let (rows, cols) = (scores.shape()[0], scores.shape()[1]);
    pattern.check_shape(cols)?;
    let s = scores.data();
    if s.iter().any(|x| !x.is_finite()) {
        bail!(Numerical, "non-finite pruning score for `{owner}`");
    }
    let mut keep = vec![true; rows * cols];
    match pattern {
        MaskPattern::Unstructured { sparsity } => match grouping {
            Grouping::Tensor => {
                let mut idx: Vec<usize> = (0..s.len()).collect();
                prune_order(s, &mut idx);
                let prune = rounded(sparsity * s.len() as f64);
                for &i in &idx[..prune] {
                    keep[i] = false;
                }
            }
            Grouping::Row => {
                let per_row = sparsity * cols as f64;
                for r in 0..rows {
                    let prune = rounded(per_row * (r + 1) as f64) - rounded(per_row * r as f64);
                    let mut idx: Vec<usize> = (r * cols..(r + 1) * cols).collect();
                    prune_order(s, &mut idx);
                    for &i in &idx[..prune] {
                        keep[i] = false;
                    }
                }
            }
        },
        MaskPattern::SemiStructured { n, m } => {
            for g0 in (0..s.len()).step_by(m) {
                let mut idx: Vec<usize> = (g0..g0 + m).collect();
                prune_order(s, &mut idx);
                for &i in &idx[..m - n] {
                    keep[i] = false;
                }
            }
        }
    }
    SparsityMask::from_keep(rows, cols, keep, pattern, owner)
}

/// `W ⊙ M`.
pub fn apply_mask<T: Scalar>(w: &Tensor<T>, mask: &SparsityMask) -> Result<Tensor<T>> {
    w.check_same_shape(&mask.shape(), "apply_mask")?;
    let mut out = w.clone();
    mask_in_place(out.data_mut(), mask);
    Ok(out)
}

pub(crate) fn mask_in_place<T: Scalar>(data: &mut [T], mask: &SparsityMask) {
    for (x, &k) in data.iter_mut().zip(&mask.keep) {
        if !k {
            *x = T::zero();
        }
    }
}

/// Fraction of zeros in a binary tensor.
pub fn sparsity_of<T: Scalar>(m: &Tensor<T>) -> Result<f64> {
    let mut zeros = 0usize;
    for &x in m.data() {
        if x == T::zero() {
            zeros += 1;
        } else if x != T::one() {
            bail!(Contract, "mask entry {x} is not binary");
        }
    }
    Ok(zeros as f64 / m.numel() as f64)
}

/// Fraction of exactly-zero entries of an arbitrary tensor.
pub fn zero_fraction<T: Scalar>(w: &[T]) -> f64 {
    w.iter().filter(|&&x| x == T::zero()).count() as f64 / w.len() as f64
}

/// Masks the optimizer re-applies after every update, keyed by parameter
/// name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MaskRegistry {
    masks: BTreeMap<String, SparsityMask>,
}

impl MaskRegistry {
    pub fn register(&mut self, param: &str, mask: SparsityMask) -> Result<()> {
        if self.masks.contains_key(param) {
            bail!(Contract, "mask for `{param}` registered twice");
        }
        self.masks.insert(param.into(), mask);
        Ok(())
    }

    pub fn get(&self, param: &str) -> Option<&SparsityMask> {
        self.masks.get(param)
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    /// `param ← param ⊙ M` when a mask is registered for it; other
    /// parameters are left alone.
    pub fn enforce<T: Scalar>(&self, param: &mut Parameter<T>) -> Result<()> {
        if let Some(mask) = self.masks.get(&param.name) {
            param.tensor.check_same_shape(&mask.shape(), "enforce_mask")?;
            mask_in_place(param.tensor.data_mut(), mask);
        }
        Ok(())
    }
}
