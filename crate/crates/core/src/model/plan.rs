use super::config::{ModelConfig, Variant};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageRole {
    Encoder,
    Mid,
    Decoder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageSpec {
    pub resolution: usize,
    pub channels: usize,
    pub depth: usize,
    pub role: StageRole,
}

/// Per-stage layout. Stage order is encoder0, encoder1, mid, decoder1, decoder0.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StagePlan {
    pub stages: [StageSpec; 5],
}

pub const STAGE_NAMES: [&str; 5] = ["enc0", "enc1", "mid", "dec1", "dec0"];

/// Decoder stage index consuming the skips of each encoder stage.
pub fn mirror(stage: usize) -> usize {
    4 - stage
}

impl StagePlan {
    pub fn new(cfg: &ModelConfig) -> Self {
        let (r, c) = (cfg.image_size, cfg.base_channels);
        let roles = [StageRole::Encoder, StageRole::Encoder, StageRole::Mid, StageRole::Decoder, StageRole::Decoder];
        let (res, ch) = if cfg.variant.is_hourglass() {
            ([r, r / 2, r / 4, r / 2, r], [c, 2 * c, 4 * c, 2 * c, c])
        } else {
            ([r / 2; 5], [c; 5])
        };
        let stages = std::array::from_fn(|i| StageSpec { resolution: res[i], channels: ch[i], depth: cfg.stage_depths[i], role: roles[i] });
        StagePlan { stages }
    }

    /// Channel widths of each stage, in stage order.
    pub fn channels(&self) -> [usize; 5] {
        self.stages.map(|s| s.channels)
    }
}

/// 1-based block counts after which an encoder stage records a skip.
pub fn encoder_skip_points(depth: usize, stride: usize) -> Vec<usize> {
    (1..=depth).filter(|i| i % stride == 0 || *i == depth).collect()
}

/// Decoder block index (0-based) before which each skip is merged, in LIFO pop order.
///
/// The skip recorded after encoder block `p` lands before the decoder block
/// mirrored to it, clamped into the decoder's range when depths differ.
pub fn decoder_merge_points(enc_points: &[usize], enc_depth: usize, dec_depth: usize) -> Vec<usize> {
    enc_points.iter().rev().map(|&p| (enc_depth - p).min(dec_depth - 1)).collect()
}

/// Skip schedule for one encoder/decoder pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SkipPair {
    pub encoder: usize,
    pub decoder: usize,
    pub record_after: Vec<usize>,
    pub merge_before: Vec<usize>,
}

pub fn skip_schedule(cfg: &ModelConfig) -> Vec<SkipPair> {
    let Some(stride) = cfg.effective_skip_stride() else { return Vec::new() };
    [0, 1]
        .into_iter()
        .map(|e| {
            let d = mirror(e);
            let record_after = encoder_skip_points(cfg.stage_depths[e], stride);
            let merge_before = decoder_merge_points(&record_after, cfg.stage_depths[e], cfg.stage_depths[d]);
            SkipPair { encoder: e, decoder: d, record_after, merge_before }
        })
        .collect()
}

impl Variant {
    /// Short label used in tables.
    pub fn label(self) -> &'static str {
        match self {
            Variant::Isotropic => "Isotropic",
            Variant::IsotropicSkip => "IsotropicSkip",
            Variant::UNetDense => "UNetDense",
            Variant::UNetSparseSkip => "UNetSparseSkip",
        }
    }
}
