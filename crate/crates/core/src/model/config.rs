use std::fmt;
use std::str::FromStr;

use crate::attention::{window_keys, windowed::bias_table_len, AttnParams, SlideSpec};
use crate::error::{invalid, Result, TeaError};
use crate::ops::Pool;

/// Attention used inside each block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Adaptive sliding plus downsampled attention.
    Tea,
    /// Non-overlapping windows with a relative position bias, shifted by half
    /// a window on every other block.
    Wa,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Tea => "tea",
            Variant::Wa => "wa",
        }
    }
}

impl FromStr for Variant {
    type Err = TeaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tea" => Ok(Variant::Tea),
            "wa" => Ok(Variant::Wa),
            _ => invalid("Variant", format!("unknown variant {s:?} (expected tea or wa)")),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub n_groups: usize,
    pub n_blocks: usize,
    pub spec: SlideSpec,
    /// Upsampling factor; 1 keeps the resolution.
    pub scale: usize,
    pub ffn_expansion: f64,
    pub variant: Variant,
    /// Window side for [`Variant::Wa`].
    pub window: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ModelConfig {
    /// Small super-resolution model that audits and grad-checks in seconds.
    pub fn toy() -> Self {
        Self {
            embed_dim: 32,
            n_groups: 2,
            n_blocks: 2,
            spec: SlideSpec::new(7, 2, 3, 16).expect("valid bundle"),
            scale: 2,
            ffn_expansion: 2.0,
            variant: Variant::Tea,
            window: 8,
        }
    }

    /// Denoising model used for the convergence comparison; the two variants
    /// differ only in their attention and land within a few percent of each
    /// other in size.
    pub fn convergence(variant: Variant) -> Self {
        Self {
            embed_dim: 16,
            n_groups: 1,
            n_blocks: 2,
            scale: 1,
            variant,
            ..Self::toy()
        }
    }

    pub fn hidden_dim(&self) -> usize {
        (self.embed_dim as f64 * self.ffn_expansion).round() as usize
    }

    pub fn head_channels(&self) -> usize {
        3 * self.scale * self.scale
    }

    pub fn validate(&self) -> Result<()> {
        if ![1, 2, 4].contains(&self.scale) {
            return invalid("ModelConfig", format!("scale {} unsupported (expected 1, 2 or 4)", self.scale));
        }
        if self.embed_dim == 0 || self.n_groups == 0 || self.n_blocks == 0 {
            return invalid("ModelConfig", "embed_dim, n_groups and n_blocks must be positive");
        }
        if !(self.ffn_expansion > 0.0 && self.ffn_expansion.is_finite()) || self.hidden_dim() == 0 {
            return invalid("ModelConfig", format!("ffn_expansion {} gives no hidden units", self.ffn_expansion));
        }
        if self.variant == Variant::Wa && self.window == 0 {
            return invalid("ModelConfig", "window must be positive");
        }
        Ok(())
    }

    /// Checks that an `height×width` input can pass through every block.
    pub fn validate_input(&self, height: usize, width: usize) -> Result<()> {
        self.validate()?;
        match self.variant {
            Variant::Tea => window_keys(height, width, &self.spec).map(|_| ()),
            Variant::Wa if !height.is_multiple_of(self.window) || !width.is_multiple_of(self.window) => Err(TeaError::Spec(format!(
                "{height}x{width} is not tiled by {m}x{m} windows",
                m = self.window
            ))),
            Variant::Wa => Ok(()),
        }
    }

    /// Smallest square side accepted by [`Self::validate_input`].
    pub fn min_side(&self) -> usize {
        match self.variant {
            Variant::Tea => self.spec.min_side(),
            Variant::Wa => self.window,
        }
    }

    pub fn attention_params(&self) -> usize {
        let d = self.embed_dim;
        match self.variant {
            Variant::Tea => AttnParams::<f64>::count(d, self.spec.offset_kernel),
            Variant::Wa => 3 * d * d + bias_table_len(self.window),
        }
    }

    pub fn ffn_params(&self) -> usize {
        let (d, h) = (self.embed_dim, self.hidden_dim());
        2 * d * h + h + d
    }

    /// Parameters of one group: its blocks plus the closing conv.
    pub fn group_params(&self) -> usize {
        let d = self.embed_dim;
        self.n_blocks * (self.attention_params() + self.ffn_params()) + 9 * d * d + d
    }

    /// Closed-form parameter count.
    pub fn count_params(&self) -> usize {
        let d = self.embed_dim;
        let shallow = 9 * 3 * d + d;
        let body = 9 * d * d + d;
        let c = self.head_channels();
        let head = 9 * d * c + c;
        shallow + self.n_groups * self.group_params() + body + head
    }

    /// Flat `key=value` lines, one per field.
    pub fn to_kv(&self) -> String {
        format!(
            "variant={}\nembed_dim={}\nn_groups={}\nn_blocks={}\nspec={}\npool={}\nscale={}\nffn_expansion={}\nwindow={}\n",
            self.variant,
            self.embed_dim,
            self.n_groups,
            self.n_blocks,
            self.spec,
            self.spec.pool.name(),
            self.scale,
            self.ffn_expansion,
            self.window
        )
    }

    /// Parses [`Self::to_kv`] output. Missing keys keep their toy defaults;
    /// blank lines and `#` comments are skipped; unknown keys are errors.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::toy();
        let mut pool = None;
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(TeaError::Format(format!("config line {}: expected key=value", n + 1)));
            };
            let (key, value) = (key.trim(), value.trim());
            let bad = |what: &str| TeaError::Format(format!("config line {}: bad {what} {value:?}", n + 1));
            match key {
                "variant" => cfg.variant = value.parse()?,
                "embed_dim" => cfg.embed_dim = value.parse().map_err(|_| bad(key))?,
                "n_groups" => cfg.n_groups = value.parse().map_err(|_| bad(key))?,
                "n_blocks" => cfg.n_blocks = value.parse().map_err(|_| bad(key))?,
                "spec" => cfg.spec = value.parse()?,
                "pool" => pool = Some(Pool::parse(value).ok_or_else(|| bad(key))?),
                "scale" => cfg.scale = value.parse().map_err(|_| bad(key))?,
                "ffn_expansion" => cfg.ffn_expansion = value.parse().map_err(|_| bad(key))?,
                "window" => cfg.window = value.parse().map_err(|_| bad(key))?,
                _ => return Err(TeaError::Format(format!("config line {}: unknown key {key:?}", n + 1))),
            }
        }
        if let Some(p) = pool {
            cfg.spec = cfg.spec.with_pool(p);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
