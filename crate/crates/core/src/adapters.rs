//! Low-rank reparametrizations of a frozen (possibly sparse) linear layer.
//!
//! | kind          | forward                               | merge                      |
//! |---------------|---------------------------------------|----------------------------|
//! | `Lora`        | `Wx + s·B(Ax)`                        | `W + s·BA` (densifies)     |
//! | `LoraPrune`   | `Wx + s·B(Ax)`                        | `W + s·(M ⊙ BA)`           |
//! | `MultLora`    | `((BA) ⊙ W)x`                         | `(BA) ⊙ W`                 |
//! | `MaskedLora`  | `(W + s·(M ⊙ BA))x`                   | `W + s·(M ⊙ BA)`           |
//!
//! `s = α/r` for the additive kinds and 1 for `MultLora`. The effective
//! weight of `MultLora` and `MaskedLora` is computed by the same routine in
//! the forward pass and in [`merge`], so merging reproduces the adapter
//! forward bit for bit.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::autograd::{Tape, Var};
use crate::error::{bail, Error, Result};
use crate::kernels::gemm;
use crate::param::{GroupTag, Parameter};
use crate::scalar::Scalar;
use crate::sparsity::SparsityMask;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AdapterKind {
    Lora,
    LoraPrune,
    MultLora,
    MaskedLora,
}

impl AdapterKind {
    pub const ALL: [AdapterKind; 4] = [AdapterKind::Lora, AdapterKind::LoraPrune, AdapterKind::MultLora, AdapterKind::MaskedLora];

    pub fn as_str(self) -> &'static str {
        match self {
            AdapterKind::Lora => "lora",
            AdapterKind::LoraPrune => "lora-prune",
            AdapterKind::MultLora => "mult-lora",
            AdapterKind::MaskedLora => "masked-lora",
        }
    }

    /// Whether merging keeps the sparsity pattern of the base weight.
    pub fn mergeable(self) -> bool {
        self != AdapterKind::Lora
    }

    pub fn to_byte(self) -> u8 {
        self as u8
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        Self::ALL.get(b as usize).copied()
    }

    fn requires_mask(self) -> bool {
        matches!(self, AdapterKind::LoraPrune | AdapterKind::MaskedLora)
    }
}

impl fmt::Display for AdapterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AdapterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s.trim().to_ascii_lowercase().chars().filter(|c| !matches!(c, '-' | '_')).collect();
        Ok(match norm.as_str() {
            "lora" => AdapterKind::Lora,
            "loraprune" => AdapterKind::LoraPrune,
            "multlora" => AdapterKind::MultLora,
            "maskedlora" => AdapterKind::MaskedLora,
            _ => bail!(Config, "unknown adapter kind `{s}`"),
        })
    }
}

/// Parametrization of the multiplicative adapter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum MultVariant {
    /// `((BA) ⊙ W)x` with `B = A = 1/√r`, so `BA` starts as all ones.
    #[default]
    AllOnesInit,
    /// `((1 + BA) ⊙ W)x` with `B = 0`.
    OnePlus,
}

impl MultVariant {
    pub fn to_byte(self) -> u8 {
        self as u8
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(MultVariant::AllOnesInit),
            1 => Some(MultVariant::OnePlus),
            _ => None,
        }
    }
}

/// Kind, rank and rescale for attaching adapters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdapterSpec {
    pub kind: AdapterKind,
    pub rank: usize,
    pub alpha: f64,
    pub variant: MultVariant,
}

impl AdapterSpec {
    pub fn new(kind: AdapterKind) -> Self {
        Self { kind, rank: 16, alpha: 32.0, variant: MultVariant::default() }
    }
}

/// Std of the Gaussian init of `A` for the additive kinds.
pub const A_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterPair<T> {
    pub kind: AdapterKind,
    pub variant: MultVariant,
    /// `n × r`.
    pub b: Parameter<T>,
    /// `r × m`.
    pub a: Parameter<T>,
    pub rank: usize,
    pub alpha: f64,
    pub weight_name: String,
    pub mask: Option<SparsityMask>,
}

impl<T: Scalar> AdapterPair<T> {
    /// Multiplier on the `BA` contribution.
    pub fn scale(&self) -> T {
        match self.kind {
            AdapterKind::MultLora => T::one(),
            _ => T::from_f64(self.alpha / self.rank as f64),
        }
    }

    pub fn numel(&self) -> usize {
        self.b.numel() + self.a.numel()
    }

    pub fn cast<U: Scalar>(&self) -> AdapterPair<U> {
        AdapterPair {
            kind: self.kind,
            variant: self.variant,
            b: Parameter::new(self.b.name.clone(), self.b.tag, self.b.tensor.cast()),
            a: Parameter::new(self.a.name.clone(), self.a.tag, self.a.tensor.cast()),
            rank: self.rank,
            alpha: self.alpha,
            weight_name: self.weight_name.clone(),
            mask: self.mask.clone(),
        }
    }

    /// Rebuilds a pair from stored factors (checkpoint loading).
    pub fn from_parts(
        kind: AdapterKind,
        variant: MultVariant,
        alpha: f64,
        weight_name: &str,
        b: Tensor<T>,
        a: Tensor<T>,
        mask: Option<SparsityMask>,
    ) -> Result<Self> {
        if !b.is_matrix() || !a.is_matrix() || b.cols() != a.rows() {
            bail!(Dimension, "adapter factors {:?} and {:?} do not compose", b.shape(), a.shape());
        }
        check_mask_presence(kind, mask.as_ref())?;
        let rank = a.rows();
        Ok(Self {
            kind,
            variant,
            b: Parameter::new(format!("{weight_name}.lora.B"), GroupTag::Adapter, b),
            a: Parameter::new(format!("{weight_name}.lora.A"), GroupTag::Adapter, a),
            rank,
            alpha,
            weight_name: weight_name.into(),
            mask,
        })
    }
}

fn check_mask_presence(kind: AdapterKind, mask: Option<&SparsityMask>) -> Result<()> {
    match (kind.requires_mask(), mask.is_some(), kind) {
        (true, false, _) => bail!(Config, "{kind} adapters need a sparsity mask"),
        (false, true, AdapterKind::Lora) => bail!(Config, "plain LoRA adapters take no mask"),
        _ => Ok(()),
    }
}

/// Creates adapter factors for the frozen weight `w` (named after the
/// layer, e.g. `blocks.0.attn.q`). The returned factors are trainable.
pub fn attach<T: Scalar>(
    weight_name: &str,
    w: &Tensor<T>,
    spec: &AdapterSpec,
    seed: u64,
    mask: Option<&SparsityMask>,
) -> Result<AdapterPair<T>> {
    if w.requires_grad() {
        bail!(Contract, "attach: base weight `{weight_name}` must be frozen");
    }
    if !w.is_matrix() {
        bail!(Dimension, "attach: weight must be a matrix, got {:?}", w.shape());
    }
    check_mask_presence(spec.kind, mask)?;
    let (n, m) = (w.rows(), w.cols());
    if let Some(mk) = mask {
        if mk.shape() != [n, m] {
            bail!(Dimension, "attach: mask {:?} for weight {n}x{m}", mk.shape());
        }
    }
    let r = spec.rank;
    if r == 0 || r > n.min(m) {
        bail!(Config, "adapter rank {r} must lie in 1..={}", n.min(m));
    }
    if !(spec.alpha.is_finite() && spec.alpha > 0.0) {
        bail!(Config, "adapter alpha must be positive, got {}", spec.alpha);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (b, a) = if spec.kind == AdapterKind::MultLora && spec.variant == MultVariant::AllOnesInit {
        let v = T::one() / T::from_usize(r).sqrt();
        (Tensor::full(&[n, r], v), Tensor::full(&[r, m], v))
    } else {
        let dist = Normal::new(0.0, A_INIT_STD).expect("positive std");
        let a: Vec<T> = (0..r * m).map(|_| T::from_f64(dist.sample(&mut rng))).collect();
        (Tensor::zeros(&[n, r]), Tensor::new(&[r, m], a)?)
    };
    let mut pair = AdapterPair::from_parts(spec.kind, spec.variant, spec.alpha, weight_name, b, a, mask.cloned())?;
    pair.rank = r;
    pair.b.set_trainable(true);
    pair.a.set_trainable(true);
    Ok(pair)
}

/// Records the adapted linear layer `x ↦ W_eff x + bias` on a tape, where
/// `bv`/`av` are the tape handles of the pair's factors.
pub fn linear_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    pair: &AdapterPair<T>,
    x: Var,
    w: Var,
    bias: Option<Var>,
    bv: Var,
    av: Var,
) -> Result<Var> {
    match pair.kind {
        AdapterKind::Lora | AdapterKind::LoraPrune => {
            let base = tape.linear(x, w, bias)?;
            let u = tape.linear(x, av, None)?;
            let delta = tape.linear(u, bv, None)?;
            let delta = tape.scale(delta, pair.scale());
            tape.add(base, delta)
        }
        AdapterKind::MultLora | AdapterKind::MaskedLora => {
            let weff = effective_weight_on_tape(tape, pair, w, bv, av)?;
            tape.linear(x, weff, bias)
        }
    }
}

fn effective_weight_on_tape<T: Scalar>(tape: &mut Tape<T>, pair: &AdapterPair<T>, w: Var, bv: Var, av: Var) -> Result<Var> {
    let ba = tape.matmul(bv, av)?;
    match (pair.kind, pair.variant) {
        (AdapterKind::MultLora, MultVariant::AllOnesInit) => tape.mul(ba, w),
        (AdapterKind::MultLora, MultVariant::OnePlus) => {
            let prod = tape.mul(ba, w)?;
            tape.add(w, prod)
        }
        (AdapterKind::MaskedLora, _) => {
            let Some(mask) = &pair.mask else {
                bail!(Contract, "masked adapter on `{}` has no mask", pair.weight_name);
            };
            let m = tape.constant(&[mask.rows(), mask.cols()], mask.as_scalars())?;
            let masked = tape.mul(ba, m)?;
            let scaled = tape.scale(masked, pair.scale());
            tape.add(w, scaled)
        }
        _ => unreachable!("additive kinds never build an effective weight"),
    }
}

/// Untracked adapter forward for `x: rows × m`.
pub fn adapter_forward<T: Scalar>(pair: &AdapterPair<T>, w: &Tensor<T>, bias: Option<&Tensor<T>>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.shape(), x.data().to_vec())?;
    let wv = tape.constant(w.shape(), w.data().to_vec())?;
    let bv_bias = match bias {
        Some(b) => Some(tape.constant(b.shape(), b.data().to_vec())?),
        None => None,
    };
    let bv = tape.constant(pair.b.tensor.shape(), pair.b.tensor.data().to_vec())?;
    let av = tape.constant(pair.a.tensor.shape(), pair.a.tensor.data().to_vec())?;
    let y = linear_on_tape(&mut tape, pair, xv, wv, bv_bias, bv, av)?;
    Ok(tape.to_tensor(y))
}

/// Plain `x · Wᵀ + b`.
pub fn plain_forward<T: Scalar>(w: &Tensor<T>, bias: Option<&Tensor<T>>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.shape(), x.data().to_vec())?;
    let wv = tape.constant(w.shape(), w.data().to_vec())?;
    let bv = match bias {
        Some(b) => Some(tape.constant(b.shape(), b.data().to_vec())?),
        None => None,
    };
    let y = tape.linear(xv, wv, bv)?;
    Ok(tape.to_tensor(y))
}

/// The weight a merge produces, computed with the same elementwise
/// arithmetic as the forward pass.
pub fn merged_weight<T: Scalar>(pair: &AdapterPair<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, r, m) = (pair.b.tensor.rows(), pair.rank, pair.a.tensor.cols());
    w.check_same_shape(&[n, m], "merge")?;
    let mut ba = vec![T::zero(); n * m];
    gemm(pair.b.tensor.data(), pair.a.tensor.data(), &mut ba, n, r, m);
    let s = pair.scale();
    let wd = w.data();
    let out: Vec<T> = match (pair.kind, pair.variant) {
        (AdapterKind::Lora, _) => wd.iter().zip(&ba).map(|(&w, &p)| w + p * s).collect(),
        (AdapterKind::LoraPrune | AdapterKind::MaskedLora, _) => {
            let Some(mask) = &pair.mask else {
                bail!(Contract, "{} adapter on `{}` has no mask", pair.kind, pair.weight_name);
            };
            let mk = mask.as_scalars::<T>();
            wd.iter().zip(&ba).zip(&mk).map(|((&w, &p), &k)| w + (p * k) * s).collect()
        }
        (AdapterKind::MultLora, MultVariant::AllOnesInit) => wd.iter().zip(&ba).map(|(&w, &p)| p * w).collect(),
        (AdapterKind::MultLora, MultVariant::OnePlus) => wd.iter().zip(&ba).map(|(&w, &p)| w + p * w).collect(),
    };
    Tensor::new(&[n, m], out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergeReport {
    pub kind: AdapterKind,
    pub weight_name: String,
    pub mergeable: bool,
    /// Nonzero pattern of the weight before merging.
    pub pre_support: Vec<bool>,
    pub post_support: Vec<bool>,
    /// Largest per-probe relative deviation `‖y_adapter − y_merged‖∞ / ‖y_adapter‖∞`.
    pub max_forward_deviation: f64,
}

impl MergeReport {
    /// Every nonzero of the merged weight lies inside `support`.
    pub fn post_within(&self, support: &[bool]) -> bool {
        self.post_support.iter().zip(support).all(|(&p, &s)| !p || s)
    }

    pub fn post_sparsity(&self) -> f64 {
        let zeros = self.post_support.iter().filter(|&&p| !p).count();
        zeros as f64 / self.post_support.len() as f64
    }
}

/// Folds the adapter into `w`, returning the new weight and a report that
/// compares adapter and merged forwards on `probes` Gaussian inputs.
pub fn merge<T: Scalar>(
    pair: AdapterPair<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    probes: usize,
    seed: u64,
) -> Result<(Tensor<T>, MergeReport)> {
    let merged = merged_weight(&pair, w)?;
    let mut max_dev = 0.0f64;
    if probes > 0 {
        let m = w.cols();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<T> = (0..probes * m)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                T::from_f64(z)
            })
            .collect();
        let x = Tensor::new(&[probes, m], data)?;
        let ya = adapter_forward(&pair, w, bias, &x)?;
        let ym = plain_forward(&merged, bias, &x)?;
        let n = w.rows();
        for (ra, rm) in ya.data().chunks_exact(n).zip(ym.data().chunks_exact(n)) {
            let scale = ra.iter().fold(0.0f64, |acc, v| acc.max(v.as_f64().abs()));
            let diff = ra.iter().zip(rm).fold(0.0f64, |acc, (a, b)| acc.max((a.as_f64() - b.as_f64()).abs()));
            let rel = if scale > 0.0 { diff / scale } else { diff };
            max_dev = max_dev.max(rel);
        }
    }
    let report = MergeReport {
        kind: pair.kind,
        weight_name: pair.weight_name.clone(),
        mergeable: pair.kind.mergeable(),
        pre_support: w.data().iter().map(|&x| x != T::zero()).collect(),
        post_support: merged.data().iter().map(|&x| x != T::zero()).collect(),
        max_forward_deviation: max_dev,
    };
    Ok((merged, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_differences, relative_error, STEP};
    use crate::sparsity::{build_mask, magnitude_scores, Grouping, MaskPattern};

    fn gaussian(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap()
    }

    fn pruned(n: usize, m: usize, seed: u64) -> (Tensor<f64>, SparsityMask) {
        let mut w = gaussian(&[n, m], seed);
        let mask = build_mask(&magnitude_scores(&w).unwrap(), MaskPattern::unstructured(0.5).unwrap(), Grouping::Tensor, "w").unwrap();
        crate::sparsity::mask_in_place(w.data_mut(), &mask);
        (w, mask)
    }

    fn spec(kind: AdapterKind, rank: usize) -> AdapterSpec {
        AdapterSpec { rank, ..AdapterSpec::new(kind) }
    }

    #[test]
    fn masked_lora_worked_example() {
        let w = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 2.0]]).unwrap();
        let mask = SparsityMask::from_keep(2, 2, vec![true, false, false, true], MaskPattern::unstructured(0.5).unwrap(), "w").unwrap();
        // B·A = [[0.5, 9], [7, 0.5]] with r = 2.
        let b = Tensor::from_rows(&[&[0.5, 9.0], &[7.0, 0.5]]).unwrap();
        let a = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        let pair = AdapterPair::from_parts(AdapterKind::MaskedLora, MultVariant::AllOnesInit, 2.0, "w", b, a, Some(mask)).unwrap();
        assert_eq!(pair.scale(), 1.0);
        let x = Tensor::from_rows(&[&[1.0, 1.0]]).unwrap();
        let y = adapter_forward(&pair, &w, None, &x).unwrap();
        assert_eq!(y.data(), &[1.5, 2.5]);
        assert_eq!(merged_weight(&pair, &w).unwrap().data(), &[1.5, 0.0, 0.0, 2.5]);
    }

    #[test]
    fn mult_lora_init_is_all_ones() {
        let w = gaussian(&[6, 8], 1);
        let pair = attach("w", &w, &spec(AdapterKind::MultLora, 4), 0, None).unwrap();
        assert!(pair.b.tensor.data().iter().chain(pair.a.tensor.data()).all(|&v| v == 0.5));
        let x = gaussian(&[10, 8], 2);
        let y = adapter_forward(&pair, &w, None, &x).unwrap();
        let base = plain_forward(&w, None, &x).unwrap();
        assert_eq!(y, base);
    }

    #[test]
    fn attach_is_identity_for_every_kind() {
        let (w, mask) = pruned(12, 16, 3);
        let bias = gaussian(&[12], 4);
        let x = gaussian(&[10, 16], 5);
        let base = plain_forward(&w, Some(&bias), &x).unwrap();
        for kind in AdapterKind::ALL {
            let mk = (kind != AdapterKind::Lora).then_some(&mask);
            let pair = attach("w", &w, &spec(kind, 4), 7, mk).unwrap();
            let y = adapter_forward(&pair, &w, Some(&bias), &x).unwrap();
            let dev = y.max_abs_diff(&base) / base.data().iter().fold(0.0f64, |a, v| a.max(v.abs()));
            match kind {
                AdapterKind::MultLora => assert!(dev <= 1e-6, "{kind}: {dev}"),
                _ => assert_eq!(dev, 0.0, "{kind}"),
            }
        }
        let one_plus = AdapterSpec { variant: MultVariant::OnePlus, ..spec(AdapterKind::MultLora, 4) };
        let pair = attach("w", &w, &one_plus, 7, None).unwrap();
        assert_eq!(adapter_forward(&pair, &w, Some(&bias), &x).unwrap(), base);
    }

    #[test]
    fn mask_presence_is_checked() {
        let (w, mask) = pruned(8, 8, 1);
        assert!(matches!(attach("w", &w, &spec(AdapterKind::MaskedLora, 2), 0, None), Err(Error::Config(_))));
        assert!(matches!(attach("w", &w, &spec(AdapterKind::LoraPrune, 2), 0, None), Err(Error::Config(_))));
        assert!(matches!(attach("w", &w, &spec(AdapterKind::Lora, 2), 0, Some(&mask)), Err(Error::Config(_))));
        assert!(attach("w", &w, &spec(AdapterKind::MultLora, 2), 0, Some(&mask)).is_ok());
        assert!(attach("w", &w, &spec(AdapterKind::Lora, 9), 0, None).is_err());
        let trainable = w.clone().with_requires_grad(true);
        assert!(matches!(attach("w", &trainable, &spec(AdapterKind::Lora, 2), 0, None), Err(Error::Contract(_))));
    }

    fn randomize(pair: &mut AdapterPair<f64>, seed: u64) {
        let b = gaussian(pair.b.tensor.shape(), seed);
        let a = gaussian(pair.a.tensor.shape(), seed + 1);
        pair.b.tensor.data_mut().copy_from_slice(b.data());
        pair.a.tensor.data_mut().copy_from_slice(a.data());
    }

    #[test]
    fn lora_factorwise_matches_explicit_product() {
        let w = gaussian(&[8, 8], 10);
        let mut pair = attach("w", &w, &spec(AdapterKind::Lora, 2), 0, None).unwrap();
        randomize(&mut pair, 11);
        let x = gaussian(&[5, 8], 12);
        let y = adapter_forward(&pair, &w, None, &x).unwrap();
        // Explicit (W + s·BA) x computed with plain loops.
        let s = pair.scale();
        let (b, a) = (pair.b.tensor.data(), pair.a.tensor.data());
        for row in 0..5 {
            for i in 0..8 {
                let mut acc = 0.0;
                for j in 0..8 {
                    let ba: f64 = (0..2).map(|t| b[i * 2 + t] * a[t * 8 + j]).sum();
                    acc += (w.data()[i * 8 + j] + s * ba) * x.data()[row * 8 + j];
                }
                let got = y.data()[row * 8 + i];
                assert!((got - acc).abs() <= 1e-6 * acc.abs().max(1.0));
            }
        }
    }

    #[test]
    fn merge_exact_for_masked_and_mult() {
        let (w, mask) = pruned(16, 24, 20);
        let bias = gaussian(&[16], 21);
        for kind in [AdapterKind::MaskedLora, AdapterKind::MultLora] {
            let mut pair = attach("w", &w, &spec(kind, 4), 0, Some(&mask)).unwrap();
            randomize(&mut pair, 22);
            let (merged, report) = merge(pair, &w, Some(&bias), 100, 5).unwrap();
            assert!(report.mergeable);
            assert!(report.max_forward_deviation < 1e-5, "{kind}: {}", report.max_forward_deviation);
            assert!(report.post_within(mask.keep()), "{kind}");
            assert!(mask.covers_support(merged.data()));
        }
    }

    #[test]
    fn lora_merge_densifies_and_lora_prune_deviates() {
        let (w, mask) = pruned(16, 24, 30);
        let mut pair = attach("w", &w, &spec(AdapterKind::Lora, 4), 0, None).unwrap();
        randomize(&mut pair, 31);
        let (_, report) = merge(pair, &w, None, 10, 1).unwrap();
        assert!(!report.mergeable);
        assert!(report.post_sparsity() < 0.5);

        let mut pair = attach("w", &w, &spec(AdapterKind::LoraPrune, 4), 0, Some(&mask)).unwrap();
        randomize(&mut pair, 32);
        let (merged, report) = merge(pair, &w, None, 10, 1).unwrap();
        assert!(report.mergeable);
        assert!(report.max_forward_deviation > 0.0);
        assert!(mask.covers_support(merged.data()));
    }

    fn check_factor_grads(kind: AdapterKind, variant: MultVariant, seed: u64) {
        let (w, mask) = pruned(6, 8, seed);
        let bias = gaussian(&[6], seed + 1);
        let x = gaussian(&[4, 8], seed + 2);
        let target = gaussian(&[4, 6], seed + 3);
        let mk = (kind != AdapterKind::Lora).then_some(&mask);
        let sp = AdapterSpec { variant, ..spec(kind, 3) };
        let mut pair = attach("w", &w, &sp, seed, mk).unwrap();
        randomize(&mut pair, seed + 4);

        let loss_of = |pair: &AdapterPair<f64>| -> f64 {
            let y = adapter_forward(pair, &w, Some(&bias), &x).unwrap();
            y.data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum()
        };
        let mut tape = Tape::new();
        let xv = tape.constant(&[4, 8], x.data().to_vec()).unwrap();
        let wv = tape.leaf(&w);
        let biasv = tape.leaf(&bias);
        let bv = tape.leaf(&pair.b.tensor);
        let av = tape.leaf(&pair.a.tensor);
        let y = linear_on_tape(&mut tape, &pair, xv, wv, Some(biasv), bv, av).unwrap();
        let t = tape.constant(&[4, 6], target.data().to_vec()).unwrap();
        let d = tape.sub(y, t).unwrap();
        let sq = tape.mul(d, d).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        assert!(tape.grad(wv).is_none(), "frozen base received a gradient");

        let b0 = pair.b.tensor.data().to_vec();
        let fd_b = central_differences(&b0, STEP, |v| {
            let mut p = pair.clone();
            p.b.tensor.data_mut().copy_from_slice(v);
            loss_of(&p)
        });
        let a0 = pair.a.tensor.data().to_vec();
        let fd_a = central_differences(&a0, STEP, |v| {
            let mut p = pair.clone();
            p.a.tensor.data_mut().copy_from_slice(v);
            loss_of(&p)
        });
        let eb = relative_error(tape.grad(bv).unwrap(), &fd_b, 1e-6);
        let ea = relative_error(tape.grad(av).unwrap(), &fd_a, 1e-6);
        assert!(eb < 1e-4 && ea < 1e-4, "{kind} {variant:?}: B {eb}, A {ea}");
    }

    #[test]
    fn factor_gradients_match_finite_differences() {
        for seed in 0..5 {
            for kind in AdapterKind::ALL {
                check_factor_grads(kind, MultVariant::AllOnesInit, 100 + seed);
            }
            check_factor_grads(AdapterKind::MultLora, MultVariant::OnePlus, 200 + seed);
        }
    }

    #[test]
    fn kind_parsing() {
        for k in AdapterKind::ALL {
            assert_eq!(k.as_str().parse::<AdapterKind>().unwrap(), k);
            assert_eq!(AdapterKind::from_byte(k.to_byte()), Some(k));
        }
        assert_eq!("MaskedLoRA".parse::<AdapterKind>().unwrap(), AdapterKind::MaskedLora);
        assert!("dora".parse::<AdapterKind>().is_err());
    }
}
