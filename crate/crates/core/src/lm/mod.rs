//! A small decoder-only transformer with hook points around each
//! feed-forward sublayer.

mod backprop;
pub mod ff;
mod model;
pub mod tokenizer;
mod train;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use ff::{ActivationKind, FeedForwardWeights};
pub use model::{ForwardOutput, LayerParams, Model, Params};
pub use tokenizer::{Tokenizer, TokenizerMode};
pub use train::{cross_entropy, train_lm, train_model, unigram_entropy, TrainConfig, TrainLog};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub context_length: usize,
    pub activation: ActivationKind,
    #[serde(default)]
    pub post_ff_norm: bool,
    #[serde(default)]
    pub key_bias: bool,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale defaults for a given vocabulary size.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            n_layers: 2,
            d_model: 64,
            d_ff: 256,
            n_heads: 4,
            vocab_size,
            context_length: 32,
            activation: ActivationKind::Swiglu,
            post_ff_norm: false,
            key_bias: false,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.d_model == 0 || self.n_heads == 0 {
            return Err(Error::invalid("n_layers, d_model and n_heads must be positive"));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::invalid(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        if self.d_ff < self.d_model {
            return Err(Error::invalid(format!(
                "d_ff {} must be at least d_model {}",
                self.d_ff, self.d_model
            )));
        }
        if self.vocab_size < 2 {
            return Err(Error::invalid("vocabulary needs at least two entries"));
        }
        if self.context_length < 2 {
            return Err(Error::invalid("context length must be at least 2"));
        }
        Ok(())
    }
}

/// Where in a feed-forward sublayer an activation is read or written.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HookSite {
    /// Sublayer input, after the pre-FF layer norm.
    FfIn,
    /// Neuron activations (the keys).
    FfNeuron,
    /// Sublayer output, before the residual add.
    FfOut,
}

impl fmt::Display for HookSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HookSite::FfIn => "ff_in",
            HookSite::FfNeuron => "ff_neuron",
            HookSite::FfOut => "ff_out",
        })
    }
}

impl FromStr for HookSite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ff_in" => Ok(HookSite::FfIn),
            "ff_neuron" => Ok(HookSite::FfNeuron),
            "ff_out" => Ok(HookSite::FfOut),
            _ => Err(Error::UnknownHook(s.to_string())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HookPoint {
    pub layer: usize,
    pub site: HookSite,
}

impl HookPoint {
    pub fn new(layer: usize, site: HookSite) -> Self {
        Self { layer, site }
    }
}

impl fmt::Display for HookPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "layers.{}.{}", self.layer, self.site)
    }
}

impl FromStr for HookPoint {
    type Err = Error;

    /// Parses `layers.<i>.<site>`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::UnknownHook(s.to_string());
        let rest = s.strip_prefix("layers.").ok_or_else(bad)?;
        let (layer, site) = rest.split_once('.').ok_or_else(bad)?;
        Ok(HookPoint::new(layer.parse().map_err(|_| bad())?, site.parse()?))
    }
}
