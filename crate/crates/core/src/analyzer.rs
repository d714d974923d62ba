//! Static parameter, FLOPs and receptive-field accounting.
//!
//! The analyzer walks the architecture from the config alone; it shares no
//! code with the model builder, so agreement between the two is a real check.
//!
//! Cost convention: one unit per multiply-accumulate for convolutions and
//! linear layers; one unit per output element for group norms, activations,
//! and the multiplies of modulation and gating; additions, concatenation,
//! resampling and table lookups are free. Counts are per sample.
//!
//! Winograd-adjusted cost replaces each eligible convolution (stride-1 3×3,
//! stems excluded) by its F(2×2, 3×3) elementwise-product count, which is
//! 4/9 of the direct cost on even maps. Everything else keeps its direct cost.

use std::fmt::{self, Write as _};

use crate::error::Result;
use crate::model::{skip_schedule, ModelConfig, StagePlan, STAGE_NAMES};
use crate::winograd::winograd_mult_count;

/// Receptive-field state along one path: field size and input-pixel stride.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RfState {
    pub rf: usize,
    pub jump: usize,
}

impl Default for RfState {
    fn default() -> Self {
        RfState { rf: 1, jump: 1 }
    }
}

impl RfState {
    pub fn conv(self, k: usize, stride: usize) -> Self {
        RfState { rf: self.rf + (k - 1) * self.jump, jump: self.jump * stride }
    }

    /// Nearest upsampling (or pixel shuffle) by `factor`.
    pub fn upsample(self, factor: usize) -> Self {
        RfState { rf: self.rf, jump: (self.jump / factor).max(1) }
    }

    /// Channel concat of two branches at the same resolution.
    pub fn merge(self, other: Self) -> Self {
        RfState { rf: self.rf.max(other.rf), jump: self.jump.min(other.jump) }
    }
}

/// One row of the per-layer breakdown.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerRow {
    pub name: String,
    pub kind: &'static str,
    pub in_shape: Vec<usize>,
    pub out_shape: Vec<usize>,
    pub params: u64,
    pub flops_direct: u64,
    pub flops_wino: u64,
    /// Receptive field at this layer's output; 0 for non-spatial layers.
    pub rf: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnalysisReport {
    pub config: ModelConfig,
    pub resolution: usize,
    pub params: u64,
    pub flops_direct: u64,
    pub flops_winograd: u64,
    pub receptive_field: usize,
    pub layers: Vec<LayerRow>,
}

struct Walker<'a> {
    cfg: &'a ModelConfig,
    rows: Vec<LayerRow>,
    rf: RfState,
}

impl Walker<'_> {
    fn push(&mut self, name: String, kind: &'static str, in_shape: Vec<usize>, out_shape: Vec<usize>, params: u64, direct: u64, wino: u64, rf: usize) {
        self.rows.push(LayerRow { name, kind, in_shape, out_shape, params, flops_direct: direct, flops_wino: wino, rf });
    }

    fn linear(&mut self, name: String, din: usize, dout: usize) {
        let macs = (din * dout) as u64;
        self.push(name, "linear", vec![din], vec![dout], macs + dout as u64, macs, macs, 0);
    }

    fn vector_act(&mut self, name: String, d: usize) {
        self.push(name, "activation", vec![d], vec![d], 0, d as u64, d as u64, 0);
    }

    fn cond_site(&mut self, prefix: &str, dim: usize) {
        let hidden = self.cfg.embed_hidden_mult * dim;
        self.linear(format!("{prefix}.t_fc1"), self.cfg.freq_dim, hidden);
        self.vector_act(format!("{prefix}.t_act"), hidden);
        self.linear(format!("{prefix}.t_fc2"), hidden, dim);
        let rows = (self.cfg.num_classes + 1) as u64;
        self.push(format!("{prefix}.class_table"), "embedding", vec![1], vec![dim], rows * dim as u64, 0, 0, 0);
    }

    /// Convolution on the main path. `eligible` marks Winograd candidates.
    fn conv(&mut self, name: String, kind: &'static str, cin: usize, cout: usize, hw: usize, k: usize, stride: usize, eligible: bool) -> usize {
        let out = if stride == 1 && k == 3 { hw } else { hw / stride };
        let macs = (out * out * cin * cout * k * k) as u64;
        let wino = if eligible { winograd_mult_count(out, out, cin, cout).winograd_mults } else { macs };
        self.rf = self.rf.conv(k, stride);
        let params = (cout * cin * k * k + cout) as u64;
        self.push(name, kind, vec![cin, hw, hw], vec![cout, out, out], params, macs, wino, self.rf.rf);
        out
    }

    fn pointwise(&mut self, name: String, kind: &'static str, c: usize, hw: usize, params: u64) {
        let n = (c * hw * hw) as u64;
        let shape = vec![c, hw, hw];
        self.push(name, kind, shape.clone(), shape, params, n, n, self.rf.rf);
    }

    fn block(&mut self, prefix: &str, c: usize, hw: usize) {
        let pre = self.cfg.injection == crate::model::Injection::PreBlock;
        for head in ["mod_scale", "mod_shift"] {
            self.linear(format!("{prefix}.{head}"), c, c);
        }
        if self.cfg.gating {
            self.linear(format!("{prefix}.mod_gate"), c, c);
        }
        self.pointwise(format!("{prefix}.norm1"), "group_norm", c, hw, 2 * c as u64);
        if pre {
            self.pointwise(format!("{prefix}.modulate"), "modulate", c, hw, 0);
        }
        self.pointwise(format!("{prefix}.act1"), "activation", c, hw, 0);
        self.conv(format!("{prefix}.conv1"), "conv3x3", c, c, hw, 3, 1, true);
        self.pointwise(format!("{prefix}.norm2"), "group_norm", c, hw, 2 * c as u64);
        if !pre {
            self.pointwise(format!("{prefix}.modulate"), "modulate", c, hw, 0);
        }
        self.pointwise(format!("{prefix}.act2"), "activation", c, hw, 0);
        self.conv(format!("{prefix}.conv2"), "conv3x3", c, c, hw, 3, 1, true);
        if self.cfg.gating {
            self.pointwise(format!("{prefix}.gate"), "gated_residual", c, hw, 0);
        }
    }
}

/// Full analysis at `resolution` (which replaces the config's image size).
pub fn analyze(config: &ModelConfig, resolution: usize) -> Result<AnalysisReport> {
    let mut cfg = config.clone();
    cfg.image_size = resolution;
    cfg.validate()?;
    let plan = StagePlan::new(&cfg);
    let ch = plan.channels();
    let c = cfg.base_channels;
    let hourglass = cfg.variant.is_hourglass();
    let mut w = Walker { cfg: &cfg, rows: Vec::new(), rf: RfState::default() };

    if cfg.stage_specific_embeddings {
        for (s, &d) in ch.iter().enumerate() {
            w.cond_site(&format!("cond.stage{s}"), d);
        }
    } else {
        w.cond_site("cond.shared", c);
        for (s, &d) in ch.iter().enumerate() {
            w.linear(format!("cond.stage{s}.proj"), c, d);
        }
    }
    for (s, &d) in ch.iter().enumerate() {
        w.vector_act(format!("cond.stage{s}.act"), d);
    }

    let mut hw = if hourglass {
        w.conv("stem".into(), "conv3x3", cfg.in_channels, c, resolution, 3, 1, false)
    } else {
        w.conv("stem".into(), "patchify", cfg.in_channels, c, resolution, 2, 2, false)
    };

    let schedule = skip_schedule(&cfg);
    let mut skips: Vec<RfState> = Vec::new();
    for (s, name) in STAGE_NAMES.iter().enumerate() {
        if hourglass && s >= 3 {
            w.rf = w.rf.upsample(2);
            hw *= 2;
            w.conv(format!("up{}", 4 - s), "upsample_conv3x3", ch[s - 1], ch[s], hw, 3, 1, true);
        }
        let record: &[usize] = schedule.iter().find(|p| p.encoder == s).map_or(&[], |p| &p.record_after);
        let merges: &[usize] = schedule.iter().find(|p| p.decoder == s).map_or(&[], |p| &p.merge_before);
        let mut next_merge = 0;
        for i in 0..cfg.stage_depths[s] {
            while next_merge < merges.len() && merges[next_merge] == i {
                let skip = skips.pop().expect("skip schedule is balanced");
                w.rf = w.rf.merge(skip);
                w.conv(format!("{name}.merge{next_merge}"), "concat_conv3x3", 2 * ch[s], ch[s], hw, 3, 1, true);
                next_merge += 1;
            }
            w.block(&format!("{name}.block{i}"), ch[s], hw);
            if record.contains(&(i + 1)) {
                skips.push(w.rf);
            }
        }
        if hourglass && s < 2 {
            hw = w.conv(format!("down{s}"), "conv3x3_s2", ch[s], ch[s + 1], hw, 3, 2, false);
        }
    }

    w.pointwise("head.norm".into(), "group_norm", c, hw, 2 * c as u64);
    w.pointwise("head.act".into(), "activation", c, hw, 0);
    let out_ch = if hourglass { cfg.in_channels } else { 4 * cfg.in_channels };
    w.conv("head.conv".into(), "conv3x3", c, out_ch, hw, 3, 1, true);
    if !hourglass {
        w.rf = w.rf.upsample(2);
        w.push("head.pixel_shuffle".into(), "pixel_shuffle", vec![out_ch, hw, hw], vec![cfg.in_channels, 2 * hw, 2 * hw], 0, 0, 0, w.rf.rf);
    }

    let rows = w.rows;
    let receptive_field = w.rf.rf;
    Ok(AnalysisReport {
        params: rows.iter().map(|r| r.params).sum(),
        flops_direct: rows.iter().map(|r| r.flops_direct).sum(),
        flops_winograd: rows.iter().map(|r| r.flops_wino).sum(),
        receptive_field,
        layers: rows,
        config: cfg,
        resolution,
    })
}

pub fn count_params(config: &ModelConfig) -> Result<u64> {
    Ok(analyze(config, config.image_size)?.params)
}

pub fn count_flops(config: &ModelConfig, resolution: usize, winograd: bool) -> Result<u64> {
    let r = analyze(config, resolution)?;
    Ok(if winograd { r.flops_winograd } else { r.flops_direct })
}

/// Theoretical receptive field of one output pixel, in input pixels (not
/// clipped to the image).
pub fn receptive_field(config: &ModelConfig) -> Result<usize> {
    Ok(analyze(config, config.image_size)?.receptive_field)
}

impl AnalysisReport {
    pub fn winograd_ratio(&self) -> f64 {
        self.flops_winograd as f64 / self.flops_direct as f64
    }

    pub const CSV_HEADER: &'static str = "name,type,in_shape,out_shape,params,flops_direct,flops_wino,rf";

    pub fn to_csv(&self) -> String {
        let shape = |s: &[usize]| s.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("x");
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.layers {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.name,
                r.kind,
                shape(&r.in_shape),
                shape(&r.out_shape),
                r.params,
                r.flops_direct,
                r.flops_wino,
                r.rf
            );
        }
        out
    }
}

impl fmt::Display for AnalysisReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "# FLOPs: 1 unit = 1 multiply-accumulate; norms, activations, modulation and gating cost 1 per element.")?;
        writeln!(f, "# Winograd: stride-1 3x3 convs except the stem, at F(2x2,3x3) product count.")?;
        writeln!(f, "variant          {}", self.config.variant)?;
        writeln!(f, "resolution       {}", self.resolution)?;
        writeln!(f, "params           {} ({:.2} M)", self.params, self.params as f64 / 1e6)?;
        writeln!(f, "flops_direct     {} ({:.2} G)", self.flops_direct, self.flops_direct as f64 / 1e9)?;
        writeln!(f, "flops_winograd   {} ({:.2} G)", self.flops_winograd, self.flops_winograd as f64 / 1e9)?;
        writeln!(f, "winograd_ratio   {:.4}", self.winograd_ratio())?;
        write!(f, "receptive_field  {}", self.receptive_field)
    }
}
