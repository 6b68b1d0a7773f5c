use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Positive rational channel scale, written `"num/den"` in configs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct WidthMultiplier {
    num: u32,
    den: u32,
}

impl WidthMultiplier {
    pub const ONE: WidthMultiplier = WidthMultiplier { num: 1, den: 1 };

    pub fn new(num: u32, den: u32) -> Result<Self> {
        if num == 0 || den == 0 {
            return Err(Error::config(
                "width_multiplier",
                format!("{num}/{den} must be strictly positive"),
            ));
        }
        Ok(WidthMultiplier { num, den })
    }

    /// Scaled channel count, rounded to nearest and never below one.
    pub fn scale(&self, channels: usize) -> usize {
        let num = self.num as usize;
        let den = self.den as usize;
        ((channels * num + den / 2) / den).max(1)
    }
}

impl fmt::Display for WidthMultiplier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

impl FromStr for WidthMultiplier {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::config("width_multiplier", format!("cannot parse {s:?} as num/den"));
        let (n, d) = match s.split_once('/') {
            Some((n, d)) => (n.trim(), d.trim()),
            None => (s.trim(), "1"),
        };
        let num = n.parse::<u32>().map_err(|_| bad())?;
        let den = d.parse::<u32>().map_err(|_| bad())?;
        WidthMultiplier::new(num, den)
    }
}

impl TryFrom<String> for WidthMultiplier {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<WidthMultiplier> for String {
    fn from(w: WidthMultiplier) -> String {
        w.to_string()
    }
}

/// Residual pore-map regressor layout.
///
/// `stage_channels[0]` is the stem convolution width; each following entry is
/// one stage of `blocks_per_stage` residual blocks. Defaults reproduce the
/// 80x80, 64-64-128-256-512 network with two blocks per stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResPoreConfig {
    pub input_size: usize,
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: usize,
    pub first_kernel: usize,
    pub block_kernel: usize,
    pub width_multiplier: WidthMultiplier,
}

impl Default for ResPoreConfig {
    fn default() -> Self {
        ResPoreConfig {
            input_size: 80,
            stage_channels: vec![64, 64, 128, 256, 512],
            blocks_per_stage: 2,
            first_kernel: 7,
            block_kernel: 3,
            width_multiplier: WidthMultiplier::ONE,
        }
    }
}

impl ResPoreConfig {
    /// Full-depth network with every width scaled by `num/den`.
    pub fn scaled(num: u32, den: u32) -> Result<Self> {
        Ok(ResPoreConfig {
            width_multiplier: WidthMultiplier::new(num, den)?,
            ..Self::default()
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 {
            return Err(Error::config("input_size", "must be positive"));
        }
        if self.stage_channels.len() < 2 {
            return Err(Error::config(
                "stage_channels",
                "needs the stem width plus at least one stage",
            ));
        }
        if self.stage_channels.contains(&0) {
            return Err(Error::config("stage_channels", "widths must be positive"));
        }
        if self.blocks_per_stage == 0 {
            return Err(Error::config("blocks_per_stage", "must be positive"));
        }
        for (field, k) in [("first_kernel", self.first_kernel), ("block_kernel", self.block_kernel)] {
            if k % 2 == 0 {
                return Err(Error::config(field, format!("kernel size {k} must be odd")));
            }
        }
        Ok(())
    }

    /// Channel plan after applying the width multiplier.
    pub fn channels(&self) -> Vec<usize> {
        self.stage_channels
            .iter()
            .map(|&c| self.width_multiplier.scale(c))
            .collect()
    }

    pub fn stages(&self) -> usize {
        self.stage_channels.len() - 1
    }

    pub fn residual_blocks(&self) -> usize {
        self.stages() * self.blocks_per_stage
    }

    /// Pixels per pore map, the input width of the domain head.
    pub fn map_len(&self) -> usize {
        self.input_size * self.input_size
    }
}

/// Fully connected domain classifier on the flattened pore map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainHeadConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub classes: usize,
}

impl Default for DomainHeadConfig {
    fn default() -> Self {
        DomainHeadConfig {
            input_dim: 80 * 80,
            hidden_dims: vec![1024, 100],
            classes: 2,
        }
    }
}

impl DomainHeadConfig {
    pub fn for_map(pore: &ResPoreConfig) -> Self {
        DomainHeadConfig {
            input_dim: pore.map_len(),
            ..Self::default()
        }
    }

    pub fn validate(&self, pore: &ResPoreConfig) -> Result<()> {
        if self.classes != 2 {
            return Err(Error::config("classes", "the domain head is binary"));
        }
        if self.input_dim != pore.map_len() {
            return Err(Error::config(
                "input_dim",
                format!(
                    "{} does not match the {}x{} pore map",
                    self.input_dim, pore.input_size, pore.input_size
                ),
            ));
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::config("hidden_dims", "widths must be positive"));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every linear layer in order.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::new();
        let mut prev = self.input_dim;
        for &h in self.hidden_dims.iter().chain(std::iter::once(&self.classes)) {
            dims.push((prev, h));
            prev = h;
        }
        dims
    }
}
