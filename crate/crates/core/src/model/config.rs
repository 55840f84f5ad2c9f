use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::KvConfig;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackbonePreset {
    /// Normalizer-free, stage depths `[2, 2, 2, 2]`.
    Nf18,
    /// Normalizer-free, stage depths `[3, 4, 6, 3]`.
    Nf50,
    /// Depthwise-separable blocks, stage depths `[2, 2, 2, 2]`.
    DwsBaseline,
}

impl BackbonePreset {
    pub const ALL: [BackbonePreset; 3] = [Self::Nf18, Self::Nf50, Self::DwsBaseline];

    pub fn depths(self) -> [usize; 4] {
        match self {
            Self::Nf18 | Self::DwsBaseline => [2, 2, 2, 2],
            Self::Nf50 => [3, 4, 6, 3],
        }
    }

    pub fn id(self) -> u8 {
        match self {
            Self::Nf18 => 0,
            Self::Nf50 => 1,
            Self::DwsBaseline => 2,
        }
    }

    pub fn from_id(id: u8) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.id() == id)
            .ok_or_else(|| Error::Format(format!("unknown backbone preset id {id}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Nf18 => "nf18",
            Self::Nf50 => "nf50",
            Self::DwsBaseline => "dws-baseline",
        }
    }
}

impl FromStr for BackbonePreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown backbone `{s}` (nf18|nf50|dws-baseline)")))
    }
}

impl fmt::Display for BackbonePreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-step likelihood family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    /// Independent Gaussian per coordinate.
    Bc,
    /// Full 2×2 covariance via a lower-triangular scale factor.
    Dim,
}

impl HeadKind {
    pub fn id(self) -> u8 {
        match self {
            Self::Bc => 0,
            Self::Dim => 1,
        }
    }

    pub fn from_id(id: u8) -> Result<Self> {
        match id {
            0 => Ok(Self::Bc),
            1 => Ok(Self::Dim),
            _ => Err(Error::Format(format!("unknown head id {id}"))),
        }
    }

    /// Width of the per-step scale parameterization.
    pub fn scale_width(self) -> usize {
        match self {
            Self::Bc => 2,
            Self::Dim => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Bc => "bc",
            Self::Dim => "dim",
        }
    }
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bc" => Ok(Self::Bc),
            "dim" => Ok(Self::Dim),
            _ => Err(Error::Config(format!("unknown head `{s}` (bc|dim)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub nll: f64,
    pub ade: f64,
    pub fde: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            nll: 1.0,
            ade: 1.0,
            fde: 1.0,
        }
    }
}

impl LossWeights {
    pub fn nll_only() -> Self {
        Self {
            nll: 1.0,
            ade: 0.0,
            fde: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let w = [self.nll, self.ade, self.fde];
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        if w.iter().all(|&v| v == 0.0) {
            return Err(Error::Config("loss weights are all zero".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackbonePreset,
    pub attention: bool,
    pub head: HeadKind,
    /// Decoder hidden width K.
    pub hidden: usize,
    pub raster_size: usize,
    pub channels: usize,
    /// Stage widths are `base_width · [1, 2, 4, 8]`.
    pub base_width: usize,
    pub window: usize,
    pub heads: usize,
    /// Meters per unit of the normalized decoder input and head output.
    pub output_scale: f64,
    pub loss: LossWeights,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackbonePreset::Nf18,
            attention: true,
            head: HeadKind::Bc,
            hidden: 32,
            raster_size: 64,
            channels: 8,
            base_width: 16,
            window: 4,
            heads: 2,
            output_scale: 10.0,
            loss: LossWeights::default(),
        }
    }
}

impl ModelConfig {
    /// Narrow configuration for single-core training runs.
    pub fn micro() -> Self {
        Self {
            base_width: 4,
            hidden: 24,
            ..Self::default()
        }
    }

    pub fn widths(&self) -> [usize; 4] {
        [1, 2, 4, 8].map(|m| m * self.base_width)
    }

    /// Side of the final feature map: four stride-2 reductions, each
    /// `ceil(s / 2)`.
    pub fn feature_size(&self) -> usize {
        (0..4).fold(self.raster_size, |s, _| s.div_ceil(2))
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        let fail = |m: String| Err(Error::Config(m));
        if self.hidden == 0 || self.base_width == 0 || self.channels == 0 || self.raster_size == 0 {
            return fail("hidden, base_width, channels and raster_size must be positive".into());
        }
        if !(self.output_scale.is_finite() && self.output_scale > 0.0) {
            return fail(format!("output_scale must be positive, got {}", self.output_scale));
        }
        if self.attention {
            let (f, c) = (self.feature_size(), self.widths()[3]);
            if self.window == 0 || f % self.window != 0 {
                return fail(format!("attention window {} must divide the {f}×{f} feature map", self.window));
            }
            if self.heads == 0 || c % self.heads != 0 {
                return fail(format!("attention heads {} must divide width {c}", self.heads));
            }
        }
        Ok(())
    }

    /// Reads `backbone`, `attention`, `head`, `hidden`, `raster_size`,
    /// `channels`, `base_width`, `window`, `heads`, `output_scale`,
    /// `lambda_nll`, `lambda_ade`, `lambda_fde` on top of `base`.
    pub fn from_kv(kv: &mut KvConfig, base: ModelConfig) -> Result<Self> {
        let cfg = Self {
            backbone: kv.take_or("backbone", base.backbone)?,
            attention: kv.take_bool_or("attention", base.attention)?,
            head: kv.take_or("head", base.head)?,
            hidden: kv.take_or("hidden", base.hidden)?,
            raster_size: kv.take_or("raster_size", base.raster_size)?,
            channels: kv.take_or("channels", base.channels)?,
            base_width: kv.take_or("base_width", base.base_width)?,
            window: kv.take_or("window", base.window)?,
            heads: kv.take_or("heads", base.heads)?,
            output_scale: kv.take_or("output_scale", base.output_scale)?,
            loss: LossWeights {
                nll: kv.take_or("lambda_nll", base.loss.nll)?,
                ade: kv.take_or("lambda_ade", base.loss.ade)?,
                fde: kv.take_or("lambda_fde", base.loss.fde)?,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Short label such as `bc+nf18+attention+ade`.
    pub fn label(&self) -> String {
        let mut s = format!("{}+{}", self.head.name(), self.backbone);
        if self.attention {
            s.push_str("+attention");
        }
        if self.loss.ade > 0.0 || self.loss.fde > 0.0 {
            s.push_str("+ade");
        }
        s
    }
}
