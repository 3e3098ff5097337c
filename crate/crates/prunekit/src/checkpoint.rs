//! `PERP1` checkpoints.
//!
//! Layout, all integers little-endian `u64`:
//!
//! ```text
//! "PERP1" count record*
//! record = name_len name tag:u8 dtype:u8 rank dims[rank] data
//! ```
//!
//! `dtype` is 0 for `f32` and 1 for `f64`; tensors are stored raw. Besides
//! the model parameters a checkpoint carries a `__config__` record (UTF-8
//! `key=value` lines, including mask patterns and adapter settings), one
//! `<layer>.mask` record of 0/1 bytes per masked layer, and
//! `<layer>.lora.B` / `<layer>.lora.A` for attached adapters. Metadata
//! records use tag 255 and dtype 2 (bytes).

use std::collections::BTreeMap;
use std::path::Path;

use prunekit_core::adapters::{AdapterKind, AdapterPair, MultVariant};
use prunekit_core::model::{MiniGptConfig, TaggedModel};
use prunekit_core::param::GroupTag;
use prunekit_core::scalar::DType;
use prunekit_core::sparsity::{MaskPattern, SparsityMask};
use prunekit_core::tensor::Tensor;
use prunekit_core::Scalar;

use crate::error::{io_err, Error, Result};

pub const MAGIC: &[u8; 5] = b"PERP1";
const META_TAG: u8 = 255;
const DTYPE_BYTES: u8 = 2;
const CONFIG_RECORD: &str = "__config__";

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Writer(Vec<u8>);

impl Writer {
    fn u64(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u64).to_le_bytes());
    }

    fn header(&mut self, name: &str, tag: u8, dtype: u8, dims: &[usize]) {
        self.u64(name.len());
        self.0.extend_from_slice(name.as_bytes());
        self.0.push(tag);
        self.0.push(dtype);
        self.u64(dims.len());
        dims.iter().for_each(|&d| self.u64(d));
    }

    fn tensor<T: Scalar>(&mut self, name: &str, tag: GroupTag, t: &Tensor<T>) {
        self.header(name, tag.to_byte(), T::DTYPE as u8, t.shape());
        for &v in t.data() {
            match T::DTYPE {
                DType::F32 => self.0.extend_from_slice(&(v.as_f64() as f32).to_le_bytes()),
                DType::F64 => self.0.extend_from_slice(&v.as_f64().to_le_bytes()),
            }
        }
    }

    fn bytes(&mut self, name: &str, dims: &[usize], data: &[u8]) {
        self.header(name, META_TAG, DTYPE_BYTES, dims);
        self.0.extend_from_slice(data);
    }
}

fn config_text<T: Scalar>(model: &TaggedModel<T>) -> String {
    let c = model.config();
    let mut s = format!(
        "vocab_size={}\ncontext_length={}\nd_model={}\nn_heads={}\nn_layers={}\nd_ff={}\nbiases={}\nseed={}\n",
        c.vocab_size, c.context_length, c.d_model, c.n_heads, c.n_layers, c.d_ff, c.biases, c.seed
    );
    for (l, layer) in model.layers().iter().enumerate() {
        if let Some(mask) = model.mask(l) {
            s += &format!("mask.{}={}\n", layer.name, mask.pattern);
        }
        if let Some(a) = model.adapter(l) {
            s += &format!("adapter.{}={},{},{}\n", layer.name, a.kind, a.variant.to_byte(), a.alpha);
        }
    }
    s
}

/// Serialises a model with its masks and adapters.
pub fn encode<T: Scalar>(model: &TaggedModel<T>) -> Vec<u8> {
    let masks = model.masks().iter().filter(|m| m.is_some()).count();
    let adapters = model.adapters().iter().filter(|a| a.is_some()).count();
    let mut w = Writer(MAGIC.to_vec());
    w.u64(1 + model.params().len() + masks + 2 * adapters);
    let text = config_text(model);
    w.bytes(CONFIG_RECORD, &[text.len()], text.as_bytes());
    for p in model.params() {
        w.tensor(&p.name, p.tag, &p.tensor);
    }
    for (l, layer) in model.layers().iter().enumerate() {
        if let Some(mask) = model.mask(l) {
            let keep: Vec<u8> = mask.keep().iter().map(|&k| k as u8).collect();
            w.bytes(&format!("{}.mask", layer.name), &mask.shape(), &keep);
        }
    }
    for a in model.adapters().iter().flatten() {
        w.tensor(&a.b.name, a.b.tag, &a.b.tensor);
        w.tensor(&a.a.name, a.a.tag, &a.a.tensor);
    }
    w.0
}

enum Payload<T> {
    Tensor(GroupTag, Tensor<T>),
    Bytes(Vec<usize>, Vec<u8>),
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| bad("truncated file"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
        usize::try_from(v).map_err(|_| bad("length overflows usize"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn record<T: Scalar>(&mut self) -> Result<(String, Payload<T>)> {
        let len = self.u64()?;
        let name = String::from_utf8(self.take(len)?.to_vec()).map_err(|_| bad("record name is not UTF-8"))?;
        let tag = self.u8()?;
        let dtype = self.u8()?;
        let rank = self.u64()?;
        let dims = (0..rank).map(|_| self.u64()).collect::<Result<Vec<_>>>()?;
        let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| bad("tensor size overflows"))?;
        if tag == META_TAG {
            if dtype != DTYPE_BYTES {
                return Err(bad(format!("metadata record `{name}` has dtype {dtype}")));
            }
            return Ok((name, Payload::Bytes(dims, self.take(numel)?.to_vec())));
        }
        let tag = GroupTag::from_byte(tag).ok_or_else(|| bad(format!("record `{name}` has unknown tag {tag}")))?;
        let data: Vec<T> = match dtype {
            0 => self.take(numel.checked_mul(4).ok_or_else(|| bad("tensor size overflows"))?)?
                .chunks_exact(4)
                .map(|c| T::from_f64(f32::from_le_bytes(c.try_into().unwrap()) as f64))
                .collect(),
            1 => self.take(numel.checked_mul(8).ok_or_else(|| bad("tensor size overflows"))?)?
                .chunks_exact(8)
                .map(|c| T::from_f64(f64::from_le_bytes(c.try_into().unwrap())))
                .collect(),
            d => return Err(bad(format!("record `{name}` has unknown dtype {d}"))),
        };
        Ok((name, Payload::Tensor(tag, Tensor::new(&dims, data)?)))
    }
}

fn parse_config(text: &str) -> Result<(MiniGptConfig, BTreeMap<String, String>)> {
    let mut kv = BTreeMap::new();
    for line in text.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("config line `{line}`")))?;
        kv.insert(k.to_string(), v.to_string());
    }
    let num = |k: &str| -> Result<u64> {
        kv.get(k).ok_or_else(|| bad(format!("config lacks `{k}`")))?.parse().map_err(|_| bad(format!("config `{k}` is not a number")))
    };
    let config = MiniGptConfig {
        vocab_size: num("vocab_size")? as usize,
        context_length: num("context_length")? as usize,
        d_model: num("d_model")? as usize,
        n_heads: num("n_heads")? as usize,
        n_layers: num("n_layers")? as usize,
        d_ff: num("d_ff")? as usize,
        biases: match kv.get("biases").map(String::as_str) {
            Some("true") => true,
            Some("false") => false,
            _ => return Err(bad("config `biases` must be true or false")),
        },
        seed: num("seed")?,
    };
    Ok((config, kv))
}

/// Parses a checkpoint produced by [`encode`].
pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<TaggedModel<T>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(bad("missing PERP1 magic"));
    }
    let count = r.u64()?;
    let (first, payload) = r.record::<T>()?;
    let Payload::Bytes(_, text) = payload else {
        return Err(bad("first record must be __config__"));
    };
    if first != CONFIG_RECORD {
        return Err(bad("first record must be __config__"));
    }
    let (config, kv) = parse_config(std::str::from_utf8(&text).map_err(|_| bad("config is not UTF-8"))?)?;
    let mut params = Vec::new();
    let mut masks = BTreeMap::new();
    let mut factors = BTreeMap::new();
    for _ in 1..count {
        match r.record::<T>()? {
            (name, Payload::Bytes(dims, data)) => {
                let layer = name.strip_suffix(".mask").ok_or_else(|| bad(format!("unexpected metadata `{name}`")))?.to_string();
                masks.insert(layer, (dims, data));
            }
            (name, Payload::Tensor(GroupTag::Adapter, t)) => {
                factors.insert(name, t);
            }
            (name, Payload::Tensor(tag, t)) => params.push((name, tag, t)),
        }
    }
    if r.pos != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let mut model = TaggedModel::from_named(config, params)?;
    for (layer, (dims, data)) in masks {
        let l = model.layer_index(&layer).ok_or_else(|| bad(format!("mask for unknown layer `{layer}`")))?;
        let pattern: MaskPattern = kv
            .get(&format!("mask.{layer}"))
            .ok_or_else(|| bad(format!("no pattern recorded for mask `{layer}`")))?
            .parse()?;
        if dims.len() != 2 || data.iter().any(|&b| b > 1) {
            return Err(bad(format!("mask `{layer}` is not a 0/1 matrix")));
        }
        let keep = data.iter().map(|&b| b == 1).collect();
        model.set_mask(l, SparsityMask::from_keep(dims[0], dims[1], keep, pattern, layer.clone())?)?;
    }
    for (key, value) in kv.iter().filter(|(k, _)| k.starts_with("adapter.")) {
        let layer = &key["adapter.".len()..];
        let l = model.layer_index(layer).ok_or_else(|| bad(format!("adapter for unknown layer `{layer}`")))?;
        let fields: Vec<&str> = value.split(',').collect();
        let [kind, variant, alpha] = fields[..] else {
            return Err(bad(format!("adapter entry `{value}`")));
        };
        let kind: AdapterKind = kind.parse()?;
        let variant = variant.parse().ok().and_then(MultVariant::from_byte).ok_or_else(|| bad(format!("adapter variant `{variant}`")))?;
        let alpha: f64 = alpha.parse().map_err(|_| bad(format!("adapter alpha `{alpha}`")))?;
        let mut factor = |suffix: &str| factors.remove(&format!("{layer}.lora.{suffix}")).ok_or_else(|| bad(format!("adapter `{layer}` lacks factor {suffix}")));
        let (b, a) = (factor("B")?, factor("A")?);
        let mask = if kind == AdapterKind::Lora { None } else { model.mask(l).cloned() };
        let pair = AdapterPair::from_parts(kind, variant, alpha, layer, b, a, mask)?;
        model.set_adapter(l, pair)?;
    }
    if let Some(name) = factors.keys().next() {
        return Err(bad(format!("adapter factor `{name}` has no adapter entry")));
    }
    Ok(model)
}

pub fn save<T: Scalar>(model: &TaggedModel<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(model)).map_err(io_err(path))
}

pub fn load<T: Scalar>(path: impl AsRef<Path>) -> Result<TaggedModel<T>> {
    let path = path.as_ref();
    decode(&std::fs::read(path).map_err(io_err(path))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use prunekit_core::adapters::{attach, AdapterSpec};
    use prunekit_core::criteria::{prune_model, Criterion};

    fn small() -> MiniGptConfig {
        MiniGptConfig { vocab_size: 32, context_length: 8, d_model: 16, n_heads: 2, n_layers: 2, d_ff: 32, biases: true, seed: 9 }
    }

    #[test]
    fn dense_round_trip() {
        let m = TaggedModel::<f32>::init(small()).unwrap();
        let bytes = encode(&m);
        assert_eq!(&bytes[..5], MAGIC);
        let back: TaggedModel<f32> = decode(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(encode(&back), bytes);
    }

    #[test]
    fn masks_and_adapters_round_trip() {
        let mut m = TaggedModel::<f64>::init(small()).unwrap();
        prune_model(&mut m, Criterion::Magnitude, MaskPattern::n_m(2, 4).unwrap(), None, 0.0).unwrap();
        for (l, kind) in [(0, AdapterKind::MaskedLora), (3, AdapterKind::MultLora), (7, AdapterKind::Lora)] {
            let name = m.layers()[l].name.clone();
            let mask = if kind == AdapterKind::Lora { None } else { m.mask(l) };
            let mut pair = attach(&name, m.weight(l), &AdapterSpec { rank: 2, ..AdapterSpec::new(kind) }, l as u64, mask).unwrap();
            pair.b.tensor.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v += 0.01 * i as f64);
            pair.b.set_trainable(false);
            pair.a.set_trainable(false);
            m.set_adapter(l, pair).unwrap();
        }
        let bytes = encode(&m);
        let back: TaggedModel<f64> = decode(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(encode(&back), bytes);
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let bytes = encode(&TaggedModel::<f32>::init(small()).unwrap());
        assert!(decode::<f32>(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode::<f32>(b"PERP2").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode::<f32>(&extra).is_err());
    }

    #[test]
    fn f32_file_widens_exactly() {
        let m = TaggedModel::<f32>::init(small()).unwrap();
        let wide: TaggedModel<f64> = decode(&encode(&m)).unwrap();
        assert_eq!(wide, m.cast::<f64>());
    }
}
