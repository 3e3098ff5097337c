use alloc::string::String;
use core::fmt;
use core::str::FromStr;

use crate::error::Error;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Retraining group every parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum GroupTag {
    Bias,
    Ln,
    Head,
    Embedding,
    LinearWeight,
    Adapter,
}

impl GroupTag {
    pub const ALL: [GroupTag; 6] = [
        GroupTag::Bias,
        GroupTag::Ln,
        GroupTag::Head,
        GroupTag::Embedding,
        GroupTag::LinearWeight,
        GroupTag::Adapter,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            GroupTag::Bias => "bias",
            GroupTag::Ln => "ln",
            GroupTag::Head => "head",
            GroupTag::Embedding => "embedding",
            GroupTag::LinearWeight => "linear-weight",
            GroupTag::Adapter => "adapter",
        }
    }

    pub fn to_byte(self) -> u8 {
        self as u8
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        Self::ALL.get(b as usize).copied()
    }
}

impl fmt::Display for GroupTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GroupTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let tag = match s.trim().to_ascii_lowercase().as_str() {
            "bias" | "biases" => GroupTag::Bias,
            "ln" | "layernorm" => GroupTag::Ln,
            "head" => GroupTag::Head,
            "embedding" | "emb" => GroupTag::Embedding,
            "linear-weight" | "linear" => GroupTag::LinearWeight,
            "adapter" => GroupTag::Adapter,
            other => return Err(Error::Config(alloc::format!("unknown parameter group `{other}`"))),
        };
        Ok(tag)
    }
}

/// A named tensor with its group tag. Trainable exactly when the tensor
/// requires grad.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub tag: GroupTag,
    pub tensor: Tensor<T>,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, tag: GroupTag, tensor: Tensor<T>) -> Self {
        Self { name: name.into(), tag, tensor }
    }

    pub fn trainable(&self) -> bool {
        self.tensor.requires_grad()
    }

    pub fn set_trainable(&mut self, flag: bool) {
        self.tensor.set_requires_grad(flag);
    }

    pub fn numel(&self) -> usize {
        self.tensor.numel()
    }
}
