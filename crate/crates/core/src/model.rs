//! Miniature pre-norm decoder-only transformer with group-tagged parameters.
//!
//! Topology (per block `i`, `d = d_model`, `f = d_ff`, `V = vocab_size`):
//!
//! ```text
//! embedding.weight                    V×d   embedding
//! blocks.i.ln_1.{weight,bias}         d, d  ln
//! blocks.i.attn.{q,k,v,o}.weight      d×d   linear-weight   (prunable)
//! blocks.i.attn.{q,k,v,o}.bias        d     bias
//! blocks.i.ln_2.{weight,bias}         d, d  ln
//! blocks.i.mlp.fc1.weight / .bias     f×d,f linear-weight / bias
//! blocks.i.mlp.fc2.weight / .bias     d×f,d linear-weight / bias
//! ln_f.{weight,bias}                  d, d  ln
//! head.weight / head.bias             V×d,V head
//! ```
//!
//! With biases enabled the total is
//! `V·d + L·(4d² + 2df + 9d + f) + 2d + V·d + V`; without biases the
//! `5d + f` per-block bias entries and the head bias disappear. Positions
//! are encoded with fixed sinusoids, so the embedding table is the only
//! input-side parameter.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::adapters::{self, AdapterPair};
use crate::autograd::{Tape, Var};
use crate::error::{bail, Error, Result};
use crate::param::{GroupTag, Parameter};
use crate::scalar::Scalar;
use crate::sparsity::SparsityMask;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MiniGptConfig {
    pub vocab_size: usize,
    pub context_length: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    /// LLaMA-style models carry no biases at all.
    pub biases: bool,
    pub seed: u64,
}

impl Default for MiniGptConfig {
    /// The desk-scale model used by the experiment harness (~0.79M
    /// parameters).
    fn default() -> Self {
        Self {
            vocab_size: 256,
            context_length: 32,
            d_model: 256,
            n_heads: 4,
            n_layers: 1,
            d_ff: 768,
            biases: true,
            seed: 0,
        }
    }
}

impl MiniGptConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.vocab_size, self.context_length, self.d_model, self.n_heads, self.n_layers, self.d_ff];
        if dims.iter().any(|&d| d == 0) {
            bail!(Config, "all model dimensions must be positive: {self:?}");
        }
        if self.d_model % self.n_heads != 0 {
            bail!(Config, "d_model {} not divisible by n_heads {}", self.d_model, self.n_heads);
        }
        Ok(())
    }
}

/// Which projection a prunable layer is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Query,
    Key,
    Value,
    Output,
    Fc1,
    Fc2,
}

impl LayerKind {
    pub const ORDER: [LayerKind; 6] =
        [LayerKind::Query, LayerKind::Key, LayerKind::Value, LayerKind::Output, LayerKind::Fc1, LayerKind::Fc2];

    fn path(self) -> &'static str {
        match self {
            LayerKind::Query => "attn.q",
            LayerKind::Key => "attn.k",
            LayerKind::Value => "attn.v",
            LayerKind::Output => "attn.o",
            LayerKind::Fc1 => "mlp.fc1",
            LayerKind::Fc2 => "mlp.fc2",
        }
    }

    /// Layers sharing an input capture point get the same stage number.
    pub fn input_stage(self) -> usize {
        match self {
            LayerKind::Query | LayerKind::Key | LayerKind::Value => 0,
            LayerKind::Output => 1,
            LayerKind::Fc1 => 2,
            LayerKind::Fc2 => 3,
        }
    }
}

/// A prunable linear layer and the parameter indices backing it.
#[derive(Debug, Clone, PartialEq)]
pub struct PrunableLayer {
    pub name: String,
    pub block: usize,
    pub kind: LayerKind,
    pub weight: usize,
    pub bias: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
struct BlockParams {
    ln1: (usize, usize),
    ln2: (usize, usize),
    /// Indices into `layers`, in `LayerKind::ORDER`.
    layers: [usize; 6],
}

/// The model plus its pruning state (one optional mask per prunable layer)
/// and any attached adapters.
#[derive(Debug, Clone, PartialEq)]
pub struct TaggedModel<T> {
    config: MiniGptConfig,
    params: Vec<Parameter<T>>,
    layers: Vec<PrunableLayer>,
    blocks: Vec<BlockParams>,
    embedding: usize,
    ln_f: (usize, usize),
    head: (usize, Option<usize>),
    masks: Vec<Option<SparsityMask>>,
    adapters: Vec<Option<AdapterPair<T>>>,
}

/// Handles into one recorded forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub logits: Var,
    /// Input of every prunable layer, indexed like [`TaggedModel::layers`].
    pub layer_inputs: Vec<Var>,
    pub param_vars: Vec<Var>,
    /// `(B, A)` vars for layers with an adapter.
    pub adapter_vars: Vec<Option<(Var, Var)>>,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn normal<T: Scalar>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let dist = Normal::new(0.0, std).expect("positive std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64(dist.sample(&mut self.rng))).collect();
        Tensor::new(shape, data).expect("positive dims")
    }
}

const INIT_STD: f64 = 0.02;

impl<T: Scalar> TaggedModel<T> {
    /// Deterministic initialisation from `config.seed`: normal(0, 0.02)
    /// weights (residual projections scaled by `1/sqrt(2L)`), zero biases,
    /// unit LayerNorm scales.
    pub fn init(config: MiniGptConfig) -> Result<Self> {
        config.validate()?;
        let MiniGptConfig { vocab_size: v, d_model: d, d_ff: f, n_layers: l, biases, .. } = config;
        let mut init = Init { rng: ChaCha8Rng::seed_from_u64(config.seed) };
        let resid_std = INIT_STD / (2.0 * l as f64).sqrt();
        let mut params = Vec::new();
        let push = |params: &mut Vec<Parameter<T>>, name: String, tag, t| {
            params.push(Parameter::new(name, tag, t));
            params.len() - 1
        };
        let embedding = push(&mut params, "embedding.weight".into(), GroupTag::Embedding, init.normal(&[v, d], INIT_STD));
        let mut layers = Vec::new();
        let mut blocks = Vec::new();
        for b in 0..l {
            let ln1 = (
                push(&mut params, format!("blocks.{b}.ln_1.weight"), GroupTag::Ln, Tensor::full(&[d], T::one())),
                push(&mut params, format!("blocks.{b}.ln_1.bias"), GroupTag::Ln, Tensor::zeros(&[d])),
            );
            let mut idx = [0usize; 6];
            let mut ln2 = (0, 0);
            for (slot, kind) in LayerKind::ORDER.into_iter().enumerate() {
                if kind == LayerKind::Fc1 {
                    ln2 = (
                        push(&mut params, format!("blocks.{b}.ln_2.weight"), GroupTag::Ln, Tensor::full(&[d], T::one())),
                        push(&mut params, format!("blocks.{b}.ln_2.bias"), GroupTag::Ln, Tensor::zeros(&[d])),
                    );
                }
                let (out_dim, in_dim) = match kind {
                    LayerKind::Fc1 => (f, d),
                    LayerKind::Fc2 => (d, f),
                    _ => (d, d),
                };
                let std = if matches!(kind, LayerKind::Output | LayerKind::Fc2) { resid_std } else { INIT_STD };
                let name = format!("blocks.{b}.{}", kind.path());
                let weight = push(&mut params, format!("{name}.weight"), GroupTag::LinearWeight, init.normal(&[out_dim, in_dim], std));
                let bias = biases.then(|| push(&mut params, format!("{name}.bias"), GroupTag::Bias, Tensor::zeros(&[out_dim])));
                layers.push(PrunableLayer { name, block: b, kind, weight, bias });
                idx[slot] = layers.len() - 1;
            }
            blocks.push(BlockParams { ln1, ln2, layers: idx });
        }
        let ln_f = (
            push(&mut params, "ln_f.weight".into(), GroupTag::Ln, Tensor::full(&[d], T::one())),
            push(&mut params, "ln_f.bias".into(), GroupTag::Ln, Tensor::zeros(&[d])),
        );
        let head_w = push(&mut params, "head.weight".into(), GroupTag::Head, init.normal(&[v, d], INIT_STD));
        let head_b = biases.then(|| push(&mut params, "head.bias".into(), GroupTag::Head, Tensor::zeros(&[v])));
        let n_layers = layers.len();
        Ok(Self {
            config,
            params,
            layers,
            blocks,
            embedding,
            ln_f,
            head: (head_w, head_b),
            masks: vec![None; n_layers],
            adapters: vec![None; n_layers],
        })
    }

    /// Rebuilds a model from named tensors (e.g. a checkpoint). Every
    /// parameter of the topology must be present with the right shape.
    pub fn from_named(config: MiniGptConfig, named: Vec<(String, GroupTag, Tensor<T>)>) -> Result<Self> {
        let mut model = Self::init(config)?;
        let mut seen = vec![false; model.params.len()];
        for (name, tag, tensor) in named {
            let Some(i) = model.param_index(&name) else {
                bail!(Data, "unexpected parameter `{name}`");
            };
            let p = &mut model.params[i];
            if p.tag != tag {
                bail!(Data, "parameter `{name}` tagged {tag}, expected {}", p.tag);
            }
            tensor.check_same_shape(p.tensor.shape(), &name)?;
            let shape = tensor.shape().to_vec();
            p.tensor = Tensor::new(&shape, tensor.into_data())?;
            seen[i] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            bail!(Data, "missing parameter `{}`", model.params[i].name);
        }
        Ok(model)
    }

    pub fn config(&self) -> &MiniGptConfig {
        &self.config
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn param(&self, name: &str) -> Option<&Parameter<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn layers(&self) -> &[PrunableLayer] {
        &self.layers
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Prunable layer indices of one block in forward order.
    pub fn block_layers(&self, block: usize) -> [usize; 6] {
        self.blocks[block].layers
    }

    pub fn weight(&self, layer: usize) -> &Tensor<T> {
        &self.params[self.layers[layer].weight].tensor
    }

    pub fn weight_mut(&mut self, layer: usize) -> &mut Tensor<T> {
        let i = self.layers[layer].weight;
        &mut self.params[i].tensor
    }

    pub fn bias(&self, layer: usize) -> Option<&Tensor<T>> {
        self.layers[layer].bias.map(|i| &self.params[i].tensor)
    }

    pub fn mask(&self, layer: usize) -> Option<&SparsityMask> {
        self.masks[layer].as_ref()
    }

    pub fn masks(&self) -> &[Option<SparsityMask>] {
        &self.masks
    }

    /// Installs a mask and zeroes the pruned coordinates of the weight.
    pub fn set_mask(&mut self, layer: usize, mask: SparsityMask) -> Result<()> {
        let w = self.weight_mut(layer);
        w.check_same_shape(&mask.shape(), "set_mask")?;
        crate::sparsity::mask_in_place(w.data_mut(), &mask);
        self.masks[layer] = Some(mask);
        Ok(())
    }

    pub fn clear_masks(&mut self) {
        self.masks.iter_mut().for_each(|m| *m = None);
    }

    pub fn adapter(&self, layer: usize) -> Option<&AdapterPair<T>> {
        self.adapters[layer].as_ref()
    }

    pub fn adapters(&self) -> &[Option<AdapterPair<T>>] {
        &self.adapters
    }

    pub fn set_adapter(&mut self, layer: usize, pair: AdapterPair<T>) -> Result<()> {
        let (n, m) = (self.weight(layer).shape()[0], self.weight(layer).shape()[1]);
        if pair.b.tensor.shape()[0] != n || pair.a.tensor.shape()[1] != m {
            bail!(Dimension, "adapter for `{}` does not match its {n}x{m} weight", self.layers[layer].name);
        }
        self.adapters[layer] = Some(pair);
        Ok(())
    }

    pub fn take_adapter(&mut self, layer: usize) -> Option<AdapterPair<T>> {
        self.adapters[layer].take()
    }

    pub fn has_adapters(&self) -> bool {
        self.adapters.iter().any(Option::is_some)
    }

    /// Entries of the base model (adapters excluded).
    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Parameter::numel).sum()
    }

    pub fn freeze_all(&mut self) {
        self.params.iter_mut().for_each(|p| p.set_trainable(false));
        for pair in self.adapters.iter_mut().flatten() {
            pair.b.set_trainable(false);
            pair.a.set_trainable(false);
        }
    }

    /// Marks every base parameter whose tag is in `tags` trainable (and
    /// adapter factors when `Adapter` is listed).
    pub fn set_trainable_groups(&mut self, tags: &[GroupTag]) {
        for p in self.params.iter_mut() {
            p.set_trainable(tags.contains(&p.tag));
        }
        let on = tags.contains(&GroupTag::Adapter);
        for pair in self.adapters.iter_mut().flatten() {
            pair.b.set_trainable(on);
            pair.a.set_trainable(on);
        }
    }

    /// Every parameter the optimizer may touch: base parameters followed by
    /// adapter factors in layer order.
    pub fn all_params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut out: Vec<&mut Parameter<T>> = self.params.iter_mut().collect();
        for pair in self.adapters.iter_mut().flatten() {
            out.push(&mut pair.b);
            out.push(&mut pair.a);
        }
        out
    }

    pub fn all_params(&self) -> Vec<&Parameter<T>> {
        let mut out: Vec<&Parameter<T>> = self.params.iter().collect();
        for pair in self.adapters.iter().flatten() {
            out.push(&pair.b);
            out.push(&pair.a);
        }
        out
    }

    pub fn trainable_count(&self) -> usize {
        self.all_params().iter().filter(|p| p.trainable()).map(|p| p.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in self.all_params_mut() {
            p.tensor.zero_grad();
        }
    }

    /// Records a forward pass over `batch` sequences of `seq` tokens each.
    pub fn forward(&self, tape: &mut Tape<T>, tokens: &[usize], batch: usize, seq: usize) -> Result<ForwardPass> {
        let cfg = &self.config;
        if tokens.len() != batch * seq || batch == 0 || seq == 0 {
            bail!(Dimension, "{} tokens for batch {batch} x seq {seq}", tokens.len());
        }
        if seq > cfg.context_length {
            bail!(Data, "sequence of {seq} exceeds context length {}", cfg.context_length);
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
            bail!(Data, "token {bad} outside vocabulary of {}", cfg.vocab_size);
        }
        let param_vars: Vec<Var> = self.params.iter().map(|p| tape.leaf(&p.tensor)).collect();
        let adapter_vars: Vec<Option<(Var, Var)>> = self
            .adapters
            .iter()
            .map(|a| a.as_ref().map(|pair| (tape.leaf(&pair.b.tensor), tape.leaf(&pair.a.tensor))))
            .collect();
        let pv = |i: usize| param_vars[i];

        let emb = tape.embedding(pv(self.embedding), tokens)?;
        let pos = tape.constant(&[batch * seq, cfg.d_model], positional_rows::<T>(batch, seq, cfg.d_model))?;
        let mut h = tape.add(emb, pos)?;

        let mut layer_inputs = vec![h; self.layers.len()];
        for block in &self.blocks {
            let [q, k, v, o, fc1, fc2] = block.layers;
            let x = tape.layer_norm(h, pv(block.ln1.0), pv(block.ln1.1))?;
            for li in [q, k, v] {
                layer_inputs[li] = x;
            }
            let qv = self.linear(tape, &param_vars, &adapter_vars, q, x)?;
            let kv = self.linear(tape, &param_vars, &adapter_vars, k, x)?;
            let vv = self.linear(tape, &param_vars, &adapter_vars, v, x)?;
            let att = tape.causal_attention(qv, kv, vv, batch, seq, cfg.n_heads)?;
            layer_inputs[o] = att;
            let proj = self.linear(tape, &param_vars, &adapter_vars, o, att)?;
            h = tape.add(h, proj)?;
            let x2 = tape.layer_norm(h, pv(block.ln2.0), pv(block.ln2.1))?;
            layer_inputs[fc1] = x2;
            let up = self.linear(tape, &param_vars, &adapter_vars, fc1, x2)?;
            let act = tape.gelu(up);
            layer_inputs[fc2] = act;
            let down = self.linear(tape, &param_vars, &adapter_vars, fc2, act)?;
            h = tape.add(h, down)?;
        }
        let hf = tape.layer_norm(h, pv(self.ln_f.0), pv(self.ln_f.1))?;
        let logits = tape.linear(hf, pv(self.head.0), self.head.1.map(pv))?;
        Ok(ForwardPass { logits, layer_inputs, param_vars, adapter_vars })
    }

    fn linear(
        &self,
        tape: &mut Tape<T>,
        param_vars: &[Var],
        adapter_vars: &[Option<(Var, Var)>],
        layer: usize,
        x: Var,
    ) -> Result<Var> {
        let l = &self.layers[layer];
        let w = param_vars[l.weight];
        let b = l.bias.map(|i| param_vars[i]);
        match (&self.adapters[layer], adapter_vars[layer]) {
            (Some(pair), Some((bv, av))) => adapters::linear_on_tape(tape, pair, x, w, b, bv, av),
            _ => tape.linear(x, w, b),
        }
    }

    /// Moves tape gradients into the grad slots of trainable parameters.
    pub fn collect_grads(&mut self, tape: &Tape<T>, pass: &ForwardPass) -> Result<()> {
        for (p, &v) in self.params.iter_mut().zip(&pass.param_vars) {
            if p.trainable() {
                tape.deliver_grad(v, &mut p.tensor)?;
            }
        }
        for (pair, vars) in self.adapters.iter_mut().zip(&pass.adapter_vars) {
            if let (Some(pair), Some((bv, av))) = (pair, vars) {
                if pair.b.trainable() {
                    tape.deliver_grad(*bv, &mut pair.b.tensor)?;
                }
                if pair.a.trainable() {
                    tape.deliver_grad(*av, &mut pair.a.tensor)?;
                }
            }
        }
        Ok(())
    }

    /// Records forward + mean next-token cross-entropy for `rows` rows of
    /// `len` tokens (each row predicts its last `len − 1` tokens).
    pub fn loss_on_tape(&self, tape: &mut Tape<T>, tokens: &[usize], rows: usize, len: usize) -> Result<(Var, ForwardPass)> {
        if len < 2 || tokens.len() != rows * len {
            bail!(Dimension, "loss needs rows of at least 2 tokens, got {rows} x {len} for {} tokens", tokens.len());
        }
        let seq = len - 1;
        let mut inputs = Vec::with_capacity(rows * seq);
        let mut targets = Vec::with_capacity(rows * seq);
        for r in tokens.chunks_exact(len) {
            inputs.extend_from_slice(&r[..seq]);
            targets.extend_from_slice(&r[1..]);
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= self.config.vocab_size) {
            bail!(Data, "token {bad} outside vocabulary of {}", self.config.vocab_size);
        }
        let pass = self.forward(tape, &inputs, rows, seq)?;
        let loss = tape.cross_entropy(pass.logits, &targets)?;
        Ok((loss, pass))
    }

    /// Mean next-token cross-entropy of a `rows × len` token matrix.
    pub fn forward_loss(&self, tokens: &[usize], rows: usize, len: usize) -> Result<f64> {
        let mut tape = Tape::new();
        let (loss, _) = self.loss_on_tape(&mut tape, tokens, rows, len)?;
        Ok(tape.value(loss)[0].as_f64())
    }

    /// `exp` of the mean next-token NLL over non-overlapping windows of
    /// `context_length` predictions.
    pub fn perplexity(&self, corpus: &[usize]) -> Result<f64> {
        let (nll, count) = self.total_nll(corpus)?;
        Ok(Float::exp(nll / count as f64))
    }

    /// Summed NLL and number of predicted tokens over the windows used by
    /// [`perplexity`](Self::perplexity).
    pub fn total_nll(&self, corpus: &[usize]) -> Result<(f64, usize)> {
        if corpus.len() < 2 {
            bail!(Data, "perplexity needs at least 2 tokens, got {}", corpus.len());
        }
        let t = self.config.context_length;
        let full = (corpus.len() - 1) / t;
        let mut total = 0.0f64;
        let mut count = 0usize;
        const CHUNK: usize = 16;
        let mut w = 0;
        while w < full {
            let rows = (full - w).min(CHUNK);
            let mut tokens = Vec::with_capacity(rows * (t + 1));
            for r in 0..rows {
                let s = (w + r) * t;
                tokens.extend_from_slice(&corpus[s..s + t + 1]);
            }
            let loss = self.forward_loss(&tokens, rows, t + 1)?;
            total += loss * (rows * t) as f64;
            count += rows * t;
            w += rows;
        }
        let tail_start = full * t;
        if corpus.len() - tail_start >= 2 {
            let tail = &corpus[tail_start..];
            let loss = self.forward_loss(tail, 1, tail.len())?;
            total += loss * (tail.len() - 1) as f64;
            count += tail.len() - 1;
        }
        Ok((total, count))
    }

    /// Perplexity over explicit sequences (each predicts its last `len − 1`
    /// tokens).
    pub fn perplexity_of_sequences(&self, seqs: &[Vec<usize>]) -> Result<f64> {
        if seqs.is_empty() {
            bail!(Data, "no validation sequences");
        }
        let len = seqs[0].len();
        if seqs.iter().any(|s| s.len() != len) {
            bail!(Dimension, "validation sequences must share a length");
        }
        let mut total = 0.0;
        for chunk in seqs.chunks(16) {
            let tokens: Vec<usize> = chunk.iter().flatten().copied().collect();
            total += self.forward_loss(&tokens, chunk.len(), len)? * chunk.len() as f64;
        }
        Ok(Float::exp(total / seqs.len() as f64))
    }

    /// Parameters whose tag is in `selector`, with their share of all base
    /// parameter entries.
    pub fn param_groups(&self, selector: &[GroupTag]) -> Result<ParamSubset> {
        if selector.is_empty() {
            bail!(Config, "parameter group selector is empty");
        }
        let names: Vec<String> =
            self.all_params().iter().filter(|p| selector.contains(&p.tag)).map(|p| p.name.clone()).collect();
        let count = self.all_params().iter().filter(|p| selector.contains(&p.tag)).map(|p| p.numel()).sum();
        Ok(ParamSubset { names, count, fraction: count as f64 / self.parameter_count() as f64 })
    }

    /// Converts every tensor to another element type (masks and adapters
    /// included).
    pub fn cast<U: Scalar>(&self) -> TaggedModel<U> {
        TaggedModel {
            config: self.config,
            params: self.params.iter().map(|p| Parameter::new(p.name.clone(), p.tag, p.tensor.cast())).collect(),
            layers: self.layers.clone(),
            blocks: self.blocks.clone(),
            embedding: self.embedding,
            ln_f: self.ln_f,
            head: self.head,
            masks: self.masks.clone(),
            adapters: self.adapters.iter().map(|a| a.as_ref().map(AdapterPair::cast)).collect(),
        }
    }
}

/// Result of [`TaggedModel::param_groups`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSubset {
    pub names: Vec<String>,
    pub count: usize,
    pub fraction: f64,
}

/// Parses a comma separated list such as `bias,ln`.
pub fn parse_groups(s: &str) -> Result<Vec<GroupTag>> {
    let tags: Result<Vec<GroupTag>> = s.split(',').filter(|p| !p.trim().is_empty()).map(str::parse).collect();
    let tags = tags?;
    if tags.is_empty() {
        return Err(Error::Config("empty parameter group list".into()));
    }
    Ok(tags)
}

/// Sinusoidal position codes for `batch` copies of positions `0..seq`.
pub fn positional_rows<T: Scalar>(batch: usize, seq: usize, d: usize) -> Vec<T> {
    let mut table = Vec::with_capacity(seq * d);
    for t in 0..seq {
        for j in 0..d {
            let pair = (j / 2) as f64;
            let freq = Float::powf(10000.0f64, -2.0 * pair / d as f64);
            let angle = t as f64 * freq;
            table.push(T::from_f64(if j % 2 == 0 { Float::sin(angle) } else { Float::cos(angle) }));
        }
    }
    let mut out = Vec::with_capacity(batch * seq * d);
    for _ in 0..batch {
        out.extend_from_slice(&table);
    }
    out
}
