//! TOML experiment configuration. Unknown keys are rejected.
//!
//! ```toml
//! output_dir = "runs/demo"
//!
//! [corpus]
//! file = "data/book.txt"          # or: train/val/test, or synthetic_bytes
//!
//! [pretrain]
//! steps = 20000
//! checkpoint = "runs/dense.perp"  # loaded if present, written otherwise
//!
//! [grid]
//! sparsities = [0.5, 0.6, 0.7]
//! patterns = ["unstructured", "2:4"]
//! criterion = "magnitude"
//! methods = ["none", "bias+ln", "masked-lora+bias+ln", "recon:masked-lora"]
//! seeds = [0, 1, 2]
//! ```

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use prunekit_core::adapters::AdapterKind;
use prunekit_core::criteria::{Criterion, DEFAULT_DAMP};
use prunekit_core::model::MiniGptConfig;
use prunekit_core::param::GroupTag;
use prunekit_core::reconstruct::ReconMethod;
use prunekit_core::retrain::{PretrainOptions, DEFAULT_LR_GRID};
use prunekit_core::sparsity::MaskPattern;

use crate::error::{io_err, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub model: ModelSection,
    pub corpus: CorpusSection,
    #[serde(default)]
    pub pretrain: PretrainSection,
    #[serde(default)]
    pub grid: GridSection,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub vocab_size: usize,
    pub context_length: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub biases: bool,
    pub seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        MiniGptConfig::default().into()
    }
}

impl From<MiniGptConfig> for ModelSection {
    fn from(c: MiniGptConfig) -> Self {
        Self {
            vocab_size: c.vocab_size,
            context_length: c.context_length,
            d_model: c.d_model,
            n_heads: c.n_heads,
            n_layers: c.n_layers,
            d_ff: c.d_ff,
            biases: c.biases,
            seed: c.seed,
        }
    }
}

impl From<&ModelSection> for MiniGptConfig {
    fn from(m: &ModelSection) -> Self {
        Self {
            vocab_size: m.vocab_size,
            context_length: m.context_length,
            d_model: m.d_model,
            n_heads: m.n_heads,
            n_layers: m.n_layers,
            d_ff: m.d_ff,
            biases: m.biases,
            seed: m.seed,
        }
    }
}

/// Exactly one source: a single file split 90/5/5, three pre-split files,
/// or generated text.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    pub file: Option<PathBuf>,
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub synthetic_bytes: Option<usize>,
    pub synthetic_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub checkpoint: Option<PathBuf>,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let o = PretrainOptions::default();
        Self { steps: o.steps, batch_size: o.batch_size, lr: o.lr, warmup_fraction: o.warmup_fraction, weight_decay: o.weight_decay, seed: o.seed, checkpoint: None }
    }
}

impl PretrainSection {
    pub fn options(&self) -> PretrainOptions {
        PretrainOptions {
            steps: self.steps,
            batch_size: self.batch_size,
            lr: self.lr,
            warmup_fraction: self.warmup_fraction,
            weight_decay: self.weight_decay,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    pub sparsities: Vec<f64>,
    /// `unstructured` (crossed with `sparsities`) and/or N:M such as `2:4`.
    pub patterns: Vec<String>,
    pub criterion: String,
    pub methods: Vec<String>,
    /// Adds every non-empty subset of {bias, ln, head, embedding,
    /// masked-lora} as a method.
    pub ablation: bool,
    pub seeds: Vec<u64>,
    pub iters: usize,
    pub lr_grid: Vec<f64>,
    /// Tune the learning rate on the first seed only and reuse it.
    pub reuse_lr_across_seeds: bool,
    pub warmup_fraction: f64,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub rank: usize,
    pub alpha: f64,
    pub calibration_sequences: usize,
    pub damp: f64,
    pub recon_steps: usize,
    pub recon_lr: f64,
    pub val_windows: usize,
}

impl Default for GridSection {
    fn default() -> Self {
        Self {
            sparsities: vec![0.3, 0.4, 0.5, 0.6, 0.7, 0.8],
            patterns: vec!["unstructured".into()],
            criterion: "magnitude".into(),
            methods: vec!["none".into(), "bias+ln".into(), "masked-lora+bias+ln".into()],
            ablation: false,
            seeds: vec![0, 1, 2],
            iters: 1000,
            lr_grid: DEFAULT_LR_GRID.to_vec(),
            reuse_lr_across_seeds: false,
            warmup_fraction: 0.1,
            batch_size: 2,
            grad_accum: 4,
            rank: 16,
            alpha: 32.0,
            calibration_sequences: 128,
            damp: DEFAULT_DAMP,
            recon_steps: 500,
            recon_lr: 1e-3,
            val_windows: 100,
        }
    }
}

/// What happens to a model after pruning.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    /// Evaluate the pruned model as is.
    None,
    /// Retrain a parameter subset, optionally with adapters.
    Retrain { adapter: Option<AdapterKind>, subset: Vec<GroupTag> },
    /// Layer-wise reconstruction instead of retraining.
    Reconstruct { masked_lora: bool },
}

impl Method {
    pub fn recon_method(&self, rank: usize, alpha: f64) -> Option<ReconMethod> {
        match self {
            Method::Reconstruct { masked_lora: false } => Some(ReconMethod::Direct),
            Method::Reconstruct { masked_lora: true } => Some(ReconMethod::MaskedLora { rank, alpha }),
            _ => None,
        }
    }

    /// The 31 non-empty subsets of {bias, ln, head, embedding,
    /// masked-lora}.
    pub fn ablation_set() -> Vec<Method> {
        let groups = [GroupTag::Bias, GroupTag::Ln, GroupTag::Head, GroupTag::Embedding];
        (1u32..32)
            .map(|bits| Method::Retrain {
                adapter: (bits & 16 != 0).then_some(AdapterKind::MaskedLora),
                subset: groups.iter().enumerate().filter(|(i, _)| bits & (1 << i) != 0).map(|(_, &g)| g).collect(),
            })
            .collect()
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::None => f.write_str("none"),
            Method::Reconstruct { masked_lora: false } => f.write_str("recon:direct"),
            Method::Reconstruct { masked_lora: true } => f.write_str("recon:masked-lora"),
            Method::Retrain { adapter, subset } => {
                let parts: Vec<&str> = adapter.iter().map(|a| a.as_str()).chain(subset.iter().map(|g| g.as_str())).collect();
                f.write_str(&parts.join("+"))
            }
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    /// `none`, `recon:direct`, `recon:masked-lora`, or `+`-joined group
    /// names with at most one adapter kind (`masked-lora+bias+ln`).
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "none" => return Ok(Method::None),
            "recon:direct" => return Ok(Method::Reconstruct { masked_lora: false }),
            "recon:masked-lora" => return Ok(Method::Reconstruct { masked_lora: true }),
            _ => {}
        }
        let mut adapter = None;
        let mut subset = Vec::new();
        for token in s.split('+') {
            if let Ok(kind) = token.parse::<AdapterKind>() {
                if adapter.replace(kind).is_some() {
                    return Err(Error::Config(format!("method `{s}` names two adapters")));
                }
            } else {
                let tag: GroupTag = token.parse().map_err(|_| Error::Config(format!("method `{s}`: unknown component `{token}`")))?;
                if tag == GroupTag::Adapter || subset.contains(&tag) {
                    return Err(Error::Config(format!("method `{s}`: invalid component `{token}`")));
                }
                subset.push(tag);
            }
        }
        Ok(Method::Retrain { adapter, subset })
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    /// Reads and validates a config file. Relative corpus and checkpoint
    /// paths are taken relative to the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(dir) = path.parent() {
            cfg.rebase(dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn rebase(&mut self, dir: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(q) = p.as_mut().filter(|q| q.is_relative()) {
                *q = dir.join(&*q);
            }
        };
        let c = &mut self.corpus;
        [&mut c.file, &mut c.train, &mut c.val, &mut c.test, &mut self.pretrain.checkpoint].into_iter().for_each(fix);
        if self.output_dir.is_relative() {
            self.output_dir = dir.join(&self.output_dir);
        }
    }

    pub fn model_config(&self) -> MiniGptConfig {
        (&self.model).into()
    }

    pub fn criterion(&self) -> Result<Criterion> {
        Ok(self.grid.criterion.parse()?)
    }

    /// Configured methods plus the ablation set, without duplicates, in
    /// first-seen order.
    pub fn methods(&self) -> Result<Vec<Method>> {
        let mut out: Vec<Method> = Vec::new();
        let parsed = self.grid.methods.iter().map(|m| m.parse()).collect::<Result<Vec<Method>>>()?;
        let extra = if self.grid.ablation { Method::ablation_set() } else { Vec::new() };
        for m in parsed.into_iter().chain(extra) {
            if !out.contains(&m) {
                out.push(m);
            }
        }
        Ok(out)
    }

    /// `(pattern, nominal sparsity)` columns: unstructured crossed with the
    /// sparsity grid, N:M patterns at their own sparsity.
    pub fn columns(&self) -> Result<Vec<MaskPattern>> {
        let mut out = Vec::new();
        for p in &self.grid.patterns {
            if p.trim() == "unstructured" {
                for &s in &self.grid.sparsities {
                    out.push(MaskPattern::unstructured(s)?);
                }
            } else {
                match p.parse::<MaskPattern>()? {
                    nm @ MaskPattern::SemiStructured { .. } => out.push(nm),
                    MaskPattern::Unstructured { .. } => {
                        return Err(Error::Config(format!("pattern `{p}`: use `unstructured` with the sparsity grid")))
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        let c = &self.corpus;
        let split = [&c.train, &c.val, &c.test];
        let sources = c.file.is_some() as u8 + split.iter().any(|p| p.is_some()) as u8 + c.synthetic_bytes.is_some() as u8;
        if sources != 1 {
            return Err(Error::Config("corpus needs exactly one of `file`, `train`/`val`/`test`, `synthetic_bytes`".into()));
        }
        if split.iter().any(|p| p.is_some()) && split.iter().any(|p| p.is_none()) {
            return Err(Error::Config("pre-split corpus needs all of `train`, `val`, `test`".into()));
        }
        for p in [&c.file, &c.train, &c.val, &c.test].into_iter().flatten() {
            if !p.is_file() {
                return Err(Error::Config(format!("corpus file {} does not exist", p.display())));
            }
        }
        let g = &self.grid;
        if g.seeds.is_empty() || g.seeds.iter().collect::<BTreeSet<_>>().len() != g.seeds.len() {
            return Err(Error::Config(format!("seeds must be non-empty and distinct, got {:?}", g.seeds)));
        }
        if g.patterns.is_empty() {
            return Err(Error::Config("no patterns configured".into()));
        }
        if self.columns()?.is_empty() {
            return Err(Error::Config("grid has no columns".into()));
        }
        if self.methods()?.is_empty() {
            return Err(Error::Config("no methods configured".into()));
        }
        self.criterion()?;
        if g.lr_grid.is_empty() || g.lr_grid.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
            return Err(Error::Config(format!("learning-rate grid must hold positive rates, got {:?}", g.lr_grid)));
        }
        if g.iters == 0 || g.batch_size == 0 || g.grad_accum == 0 || g.rank == 0 || g.val_windows == 0 || g.calibration_sequences == 0 {
            return Err(Error::Config("iters, batch_size, grad_accum, rank, val_windows and calibration_sequences must be positive".into()));
        }
        if self.pretrain.steps == 0 || self.pretrain.batch_size == 0 {
            return Err(Error::Config("pretrain steps and batch size must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "[corpus]\nsynthetic_bytes = 70000\n";

    #[test]
    fn defaults_fill_in() {
        let cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.model_config(), MiniGptConfig::default());
        assert_eq!(cfg.grid.seeds.len(), 3);
        assert_eq!(cfg.pretrain.steps, 20_000);
        assert_eq!(cfg.columns().unwrap().len(), 6);
    }

    #[test]
    fn unknown_keys_fail() {
        let err = ExperimentConfig::from_toml("[corpus]\nsynthetic_bytes = 1\n[grid]\nsparsity = [0.5]\n").unwrap_err();
        assert!(err.to_string().contains("sparsity"), "{err}");
        assert!(ExperimentConfig::from_toml("colour = 1\n[corpus]\nsynthetic_bytes = 1\n").is_err());
    }

    #[test]
    fn invariants_are_checked() {
        let mut cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        cfg.grid.seeds = vec![1, 1];
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        cfg.corpus.file = Some("/definitely/not/here.txt".into());
        cfg.corpus.synthetic_bytes = None;
        assert!(cfg.validate().unwrap_err().to_string().contains("does not exist"));
        let mut cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        cfg.corpus.file = Some("x".into());
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn method_strings_round_trip() {
        for s in ["none", "bias+ln", "masked-lora+bias+ln", "mult-lora", "lora-prune+head", "recon:direct", "recon:masked-lora"] {
            let m: Method = s.parse().unwrap();
            assert_eq!(m.to_string(), s);
        }
        assert!("lora+masked-lora".parse::<Method>().is_err());
        assert!("bias+bias".parse::<Method>().is_err());
        assert!("weights".parse::<Method>().is_err());
    }

    #[test]
    fn ablation_adds_31_methods() {
        let set = Method::ablation_set();
        assert_eq!(set.len(), 31);
        assert_eq!(set.iter().collect::<BTreeSet<_>>().len(), 31);
        let mut cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        cfg.grid.methods = vec!["none".into(), "bias+ln".into()];
        cfg.grid.ablation = true;
        assert_eq!(cfg.methods().unwrap().len(), 32);
    }

    #[test]
    fn nm_patterns_are_single_columns() {
        let mut cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        cfg.grid.patterns = vec!["unstructured".into(), "2:4".into(), "4:8".into()];
        cfg.grid.sparsities = vec![0.5, 0.7];
        let cols = cfg.columns().unwrap();
        assert_eq!(cols.len(), 4);
        assert_eq!(cols[2], MaskPattern::n_m(2, 4).unwrap());
    }
}
