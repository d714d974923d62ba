use std::fmt;
use std::str::FromStr;

use crate::autograd::Activation;
use crate::error::{DicError, Result};

/// Backbone layout. The first three are the roadmap baselines.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Patchified, constant-resolution stack, no long skips.
    Isotropic,
    /// Constant resolution with dense encoder→decoder skips.
    IsotropicSkip,
    /// Hourglass with a skip after every encoder block.
    UNetDense,
    /// Hourglass with a skip every `skip_stride` blocks plus one per stage end (DiC).
    UNetSparseSkip,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Isotropic, Variant::IsotropicSkip, Variant::UNetDense, Variant::UNetSparseSkip];

    pub fn is_hourglass(self) -> bool {
        matches!(self, Variant::UNetDense | Variant::UNetSparseSkip)
    }

    pub fn has_skips(self) -> bool {
        self != Variant::Isotropic
    }
}

/// Where the (scale, shift) conditioning is applied inside a block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Injection {
    /// Modulates the norm before the second convolution.
    MidBlock,
    /// Modulates the norm at block entry.
    PreBlock,
}

macro_rules! string_enum {
    ($ty:ty, $field:literal, { $($variant:path => $name:literal),+ $(,)? }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($variant => $name),+ })
            }
        }

        impl FromStr for $ty {
            type Err = DicError;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($variant),)+
                    _ => Err(DicError::config($field, format!("unknown value `{s}`"))),
                }
            }
        }
    };
}

string_enum!(Variant, "model.variant", {
    Variant::Isotropic => "isotropic",
    Variant::IsotropicSkip => "isotropic_skip",
    Variant::UNetDense => "unet_dense",
    Variant::UNetSparseSkip => "unet_sparse_skip",
});

string_enum!(Injection, "model.injection", {
    Injection::MidBlock => "mid_block",
    Injection::PreBlock => "pre_block",
});

string_enum!(Activation, "model.activation", {
    Activation::Gelu => "gelu",
    Activation::Silu => "silu",
});

/// Everything needed to build one network.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub base_channels: usize,
    /// Blocks per stage: encoder0, encoder1, mid, decoder1, decoder0.
    pub stage_depths: [usize; 5],
    pub groups: usize,
    pub skip_stride: usize,
    pub num_classes: usize,
    pub in_channels: usize,
    pub image_size: usize,
    pub activation: Activation,
    pub injection: Injection,
    pub gating: bool,
    pub stage_specific_embeddings: bool,
    pub label_drop_prob: f64,
    /// Valid timesteps are `0..timesteps`.
    pub timesteps: usize,
    /// Width of the sinusoidal timestep features.
    pub freq_dim: usize,
    /// Hidden width of each timestep MLP, as a multiple of its output width.
    pub embed_hidden_mult: usize,
}

pub const PRESET_NAMES: [&str; 5] = ["DiC-S", "DiC-B", "DiC-XL", "DiC-H", "DiC-micro"];

impl ModelConfig {
    /// Full DiC at 32×32 latent resolution with 1000 classes.
    fn dic(base_channels: usize, groups: usize, stage_depths: [usize; 5]) -> Self {
        ModelConfig {
            variant: Variant::UNetSparseSkip,
            base_channels,
            stage_depths,
            groups,
            skip_stride: 2,
            num_classes: 1000,
            in_channels: 4,
            image_size: 32,
            activation: Activation::Gelu,
            injection: Injection::MidBlock,
            gating: true,
            stage_specific_embeddings: true,
            label_drop_prob: 0.1,
            timesteps: 1000,
            freq_dim: 256,
            embed_hidden_mult: 3,
        }
    }

    pub fn dic_s() -> Self {
        Self::dic(96, 16, [6, 6, 5, 6, 6])
    }

    pub fn dic_b() -> Self {
        Self::dic(192, 32, [6, 6, 5, 6, 6])
    }

    pub fn dic_xl() -> Self {
        Self::dic(384, 32, [7, 7, 8, 7, 7])
    }

    pub fn dic_h() -> Self {
        Self::dic(384, 32, [14, 14, 10, 14, 14])
    }

    /// Desk-scale model for the toy dataset and gradient checks.
    pub fn dic_micro() -> Self {
        ModelConfig {
            base_channels: 16,
            groups: 4,
            stage_depths: [1, 1, 1, 1, 1],
            num_classes: 2,
            in_channels: 1,
            image_size: 16,
            freq_dim: 32,
            ..Self::dic(16, 4, [1; 5])
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "DiC-S" => Ok(Self::dic_s()),
            "DiC-B" => Ok(Self::dic_b()),
            "DiC-XL" => Ok(Self::dic_xl()),
            "DiC-H" => Ok(Self::dic_h()),
            "DiC-micro" => Ok(Self::dic_micro()),
            _ => Err(DicError::config("model.preset", format!("unknown preset `{name}` (expected one of {PRESET_NAMES:?})"))),
        }
    }

    /// Skip stride actually used by the variant; `None` when it has no skips.
    pub fn effective_skip_stride(&self) -> Option<usize> {
        match self.variant {
            Variant::Isotropic => None,
            Variant::IsotropicSkip | Variant::UNetDense => Some(1),
            Variant::UNetSparseSkip => Some(self.skip_stride),
        }
    }

    /// The label reserved for "no class" (classifier-free guidance).
    pub fn null_class(&self) -> usize {
        self.num_classes
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, field: &str, reason: String| if ok { Ok(()) } else { Err(DicError::config(format!("model.{field}"), reason)) };
        check(self.base_channels > 0, "base_channels", "must be positive".into())?;
        check(self.groups > 0, "groups", "must be positive".into())?;
        check(
            self.base_channels % self.groups == 0,
            "groups",
            format!("{} channels are not divisible into {} groups", self.base_channels, self.groups),
        )?;
        check(self.stage_depths.iter().all(|&d| d > 0), "stage_depths", "every stage needs at least one block".into())?;
        check(self.skip_stride >= 1, "skip_stride", "must be at least 1".into())?;
        check(self.num_classes >= 1, "num_classes", "must be at least 1".into())?;
        check(self.in_channels >= 1, "in_channels", "must be at least 1".into())?;
        check(
            self.image_size >= 4 && self.image_size % 4 == 0,
            "image_size",
            format!("{} is not a positive multiple of 4", self.image_size),
        )?;
        check(
            (0.0..1.0).contains(&self.label_drop_prob),
            "label_drop_prob",
            format!("{} is outside [0, 1)", self.label_drop_prob),
        )?;
        check(self.timesteps >= 1, "timesteps", "must be at least 1".into())?;
        check(self.freq_dim >= 2 && self.freq_dim % 2 == 0, "freq_dim", format!("{} is not a positive even number", self.freq_dim))?;
        check(self.embed_hidden_mult >= 1, "embed_hidden_mult", "must be at least 1".into())?;
        Ok(())
    }

    /// Canonical `key=value` lines, all keys prefixed with `model.`.
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let d = self.stage_depths.map(|v| v.to_string()).join(",");
        [
            ("variant", self.variant.to_string()),
            ("base_channels", self.base_channels.to_string()),
            ("stage_depths", d),
            ("groups", self.groups.to_string()),
            ("skip_stride", self.skip_stride.to_string()),
            ("num_classes", self.num_classes.to_string()),
            ("in_channels", self.in_channels.to_string()),
            ("image_size", self.image_size.to_string()),
            ("activation", self.activation.to_string()),
            ("injection", self.injection.to_string()),
            ("gating", self.gating.to_string()),
            ("stage_specific_embeddings", self.stage_specific_embeddings.to_string()),
            ("label_drop_prob", self.label_drop_prob.to_string()),
            ("timesteps", self.timesteps.to_string()),
            ("freq_dim", self.freq_dim.to_string()),
            ("embed_hidden_mult", self.embed_hidden_mult.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (format!("model.{k}"), v))
        .collect()
    }

    /// Applies one `model.*` key. Returns `Ok(false)` if the key is not a model key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let Some(field) = key.strip_prefix("model.") else { return Ok(false) };
        let value = value.trim();
        match field {
            "preset" => *self = Self::preset(value)?,
            "variant" => self.variant = value.parse()?,
            "base_channels" => self.base_channels = parse_num(key, value)?,
            "stage_depths" => {
                let parts: Vec<usize> = value.split(',').map(|p| parse_num(key, p.trim())).collect::<Result<_>>()?;
                self.stage_depths = parts
                    .try_into()
                    .map_err(|p: Vec<usize>| DicError::config(key, format!("expected 5 depths, got {}", p.len())))?;
            }
            "groups" => self.groups = parse_num(key, value)?,
            "skip_stride" => self.skip_stride = parse_num(key, value)?,
            "num_classes" => self.num_classes = parse_num(key, value)?,
            "in_channels" => self.in_channels = parse_num(key, value)?,
            "image_size" => self.image_size = parse_num(key, value)?,
            "activation" => self.activation = value.parse()?,
            "injection" => self.injection = value.parse()?,
            "gating" => self.gating = parse_num(key, value)?,
            "stage_specific_embeddings" => self.stage_specific_embeddings = parse_num(key, value)?,
            "label_drop_prob" => self.label_drop_prob = parse_num(key, value)?,
            "timesteps" => self.timesteps = parse_num(key, value)?,
            "freq_dim" => self.freq_dim = parse_num(key, value)?,
            "embed_hidden_mult" => self.embed_hidden_mult = parse_num(key, value)?,
            _ => return Err(DicError::UnknownKey(key.to_string())),
        }
        Ok(true)
    }

    pub fn from_kv<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut cfg = Self::dic_micro();
        for (k, v) in pairs {
            if !cfg.set(k, v)? {
                return Err(DicError::UnknownKey(k.to_string()));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub(crate) fn parse_num<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value.parse().map_err(|_| DicError::config(key, format!("cannot parse `{value}`")))
}
