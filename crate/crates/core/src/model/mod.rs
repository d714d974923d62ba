//! The DiC denoiser and its ablation variants.

mod checkpoint;
mod config;
mod plan;

pub use checkpoint::{Checkpoint, OptimizerState};
pub use config::{Injection, ModelConfig, Variant, PRESET_NAMES};
pub use plan::{
    decoder_merge_points, encoder_skip_points, mirror, skip_schedule, SkipPair, StagePlan, StageRole, StageSpec, STAGE_NAMES,
};

pub(crate) use config::parse_num;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{Gradients, Tape, Var};
use crate::error::{DicError, Result};
use crate::tensor::{Element, Tensor};

pub const NORM_EPS: f64 = 1e-5;
/// Std of linear layers and class tables.
const LINEAR_INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Weight and bias slots of a conv, linear or norm layer.
#[derive(Clone, Copy, Debug)]
struct Affine {
    weight: usize,
    bias: usize,
}

#[derive(Clone, Debug)]
struct Block {
    norm1: Affine,
    conv1: Affine,
    norm2: Affine,
    conv2: Affine,
    scale: Affine,
    shift: Affine,
    gate: Option<Affine>,
}

#[derive(Clone, Debug)]
struct Stage {
    blocks: Vec<Block>,
    /// Encoder: 1-based block counts after which the output is recorded.
    record_after: Vec<usize>,
    /// Decoder: (block index, merge conv) in LIFO pop order.
    merges: Vec<(usize, Affine)>,
}

#[derive(Clone, Debug)]
struct CondSite {
    fc1: Affine,
    fc2: Affine,
    table: usize,
}

#[derive(Clone, Debug)]
enum Conditioning {
    StageSpecific(Vec<CondSite>),
    Shared { base: CondSite, proj: Vec<Affine> },
}

/// Which convolution kernel the stride-1 3×3 layers use.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ConvPath {
    #[default]
    Direct,
    /// Forward-only.
    Winograd,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    pub conv_path: ConvPath,
    /// Skip every basic block (identity). Used to audit identity-at-init.
    pub bypass_blocks: bool,
}

/// Labels read by each stage's class table during one forward.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ConditionTrace {
    pub stage_labels: Vec<Vec<usize>>,
}

/// Instantiated parameters plus topology.
#[derive(Clone, Debug)]
pub struct DiCModel<T> {
    config: ModelConfig,
    plan: StagePlan,
    params: Vec<Parameter<T>>,
    stem: Affine,
    stages: Vec<Stage>,
    down: Vec<Affine>,
    up: Vec<Affine>,
    head_norm: Affine,
    head_conv: Affine,
    cond: Conditioning,
}

struct Builder<T> {
    params: Vec<Parameter<T>>,
    rng: ChaCha8Rng,
}

impl<T: Element> Builder<T> {
    fn push(&mut self, name: String, shape: Vec<usize>, std: f64) -> usize {
        let value = if std == 0.0 {
            Tensor::zeros(shape)
        } else {
            let rng = &mut self.rng;
            Tensor::from_fn(shape, |_| T::from_f64(std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)))
        };
        self.params.push(Parameter { name, value });
        self.params.len() - 1
    }

    fn conv(&mut self, name: &str, cout: usize, cin: usize, k: usize, zero: bool) -> Affine {
        let std = if zero { 0.0 } else { (1.0 / (cin * k * k) as f64).sqrt() };
        Affine { weight: self.push(format!("{name}.weight"), vec![cout, cin, k, k], std), bias: self.push(format!("{name}.bias"), vec![cout], 0.0) }
    }

    fn linear(&mut self, name: &str, dout: usize, din: usize, zero: bool) -> Affine {
        let std = if zero { 0.0 } else { LINEAR_INIT_STD };
        Affine { weight: self.push(format!("{name}.weight"), vec![dout, din], std), bias: self.push(format!("{name}.bias"), vec![dout], 0.0) }
    }

    fn norm(&mut self, name: &str, c: usize) -> Affine {
        let weight = self.push(format!("{name}.weight"), vec![c], 0.0);
        self.params[weight].value.data_mut().fill(T::ONE);
        Affine { weight, bias: self.push(format!("{name}.bias"), vec![c], 0.0) }
    }

    fn block(&mut self, name: &str, c: usize, gating: bool) -> Block {
        Block {
            norm1: self.norm(&format!("{name}.norm1"), c),
            conv1: self.conv(&format!("{name}.conv1"), c, c, 3, false),
            norm2: self.norm(&format!("{name}.norm2"), c),
            conv2: self.conv(&format!("{name}.conv2"), c, c, 3, false),
            scale: self.linear(&format!("{name}.mod_scale"), c, c, false),
            shift: self.linear(&format!("{name}.mod_shift"), c, c, false),
            gate: gating.then(|| self.linear(&format!("{name}.mod_gate"), c, c, true)),
        }
    }

    fn cond_site(&mut self, name: &str, cfg: &ModelConfig, dim: usize) -> CondSite {
        let hidden = cfg.embed_hidden_mult * dim;
        CondSite {
            fc1: self.linear(&format!("{name}.t_fc1"), hidden, cfg.freq_dim, false),
            fc2: self.linear(&format!("{name}.t_fc2"), dim, hidden, false),
            table: self.push(format!("{name}.class_table"), vec![cfg.num_classes + 1, dim], LINEAR_INIT_STD),
        }
    }
}

/// Builds a model with deterministic initialization from `seed`.
pub fn build_model<T: Element>(config: &ModelConfig, seed: u64) -> Result<DiCModel<T>> {
    config.validate()?;
    let plan = StagePlan::new(config);
    let ch = plan.channels();
    let c = config.base_channels;
    let hourglass = config.variant.is_hourglass();
    let mut b = Builder { params: Vec::new(), rng: ChaCha8Rng::seed_from_u64(seed) };

    let stem = if hourglass { b.conv("stem", c, config.in_channels, 3, false) } else { b.conv("stem", c, config.in_channels, 2, false) };

    let schedule = skip_schedule(config);
    let mut stages = Vec::with_capacity(5);
    let mut down = Vec::new();
    let mut up = Vec::new();
    for (s, name) in STAGE_NAMES.iter().enumerate() {
        if hourglass && s >= 3 {
            up.push(b.conv(&format!("up{}", 4 - s), ch[s], ch[s - 1], 3, false));
        }
        let mut record_after = Vec::new();
        let mut merges = Vec::new();
        for pair in &schedule {
            if pair.encoder == s {
                record_after = pair.record_after.clone();
            }
            if pair.decoder == s {
                for (j, &at) in pair.merge_before.iter().enumerate() {
                    merges.push((at, b.conv(&format!("{name}.merge{j}"), ch[s], 2 * ch[s], 3, false)));
                }
            }
        }
        let blocks = (0..config.stage_depths[s]).map(|i| b.block(&format!("{name}.block{i}"), ch[s], config.gating)).collect();
        stages.push(Stage { blocks, record_after, merges });
        if hourglass && s < 2 {
            down.push(b.conv(&format!("down{s}"), ch[s + 1], ch[s], 3, false));
        }
    }

    let head_norm = b.norm("head.norm", c);
    let out_ch = if hourglass { config.in_channels } else { 4 * config.in_channels };
    let head_conv = b.conv("head.conv", out_ch, c, 3, true);

    let cond = if config.stage_specific_embeddings {
        Conditioning::StageSpecific((0..5).map(|s| b.cond_site(&format!("cond.stage{s}"), config, ch[s])).collect())
    } else {
        let base = b.cond_site("cond.shared", config, c);
        let proj = (0..5).map(|s| b.linear(&format!("cond.stage{s}.proj"), ch[s], c, false)).collect();
        Conditioning::Shared { base, proj }
    };

    Ok(DiCModel { config: config.clone(), plan, params: b.params, stem, stages, down, up, head_norm, head_conv, cond })
}

/// Sinusoidal features, interleaved as `[sin(tω₀), cos(tω₀), sin(tω₁), …]`.
pub fn timestep_embedding(t: usize, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(DicError::config("model.freq_dim", format!("timestep embedding needs a positive even width, got {dim}")));
    }
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out.push(arg.sin());
        out.push(arg.cos());
    }
    Ok(out)
}

/// Replaces each label by `null_class` with probability `p`.
///
/// Called once per step, before any stage reads the labels.
pub fn apply_label_drop(y: &[usize], p: f64, null_class: usize, rng: &mut impl rand::Rng) -> Vec<usize> {
    y.iter().map(|&label| if p > 0.0 && rng.random::<f64>() < p { null_class } else { label }).collect()
}

/// Output of [`DiCModel::forward`].
pub struct ForwardPass {
    pub output: Var,
    pub params: Vec<Var>,
}

impl<T: Element> DiCModel<T> {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn plan(&self) -> &StagePlan {
        &self.plan
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn param(&self, name: &str) -> Option<&Parameter<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Parameter<T>> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn num_skip_merges(&self) -> usize {
        self.stages.iter().map(|s| s.merges.len()).sum()
    }

    pub fn num_resample_ops(&self) -> usize {
        self.down.len() + self.up.len()
    }

    /// Copy with every parameter converted to another element type.
    pub fn cast<U: Element>(&self) -> DiCModel<U> {
        DiCModel {
            config: self.config.clone(),
            plan: self.plan.clone(),
            params: self.params.iter().map(|p| Parameter { name: p.name.clone(), value: p.value.cast() }).collect(),
            stem: self.stem,
            stages: self.stages.clone(),
            down: self.down.clone(),
            up: self.up.clone(),
            head_norm: self.head_norm,
            head_conv: self.head_conv,
            cond: self.cond.clone(),
        }
    }

    /// Replaces parameter values, checking names and shapes.
    pub fn load_params(&mut self, params: Vec<(String, Tensor<T>)>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(DicError::shape("load_params", format!("expected {} tensors, got {}", self.params.len(), params.len())));
        }
        for (slot, (name, value)) in self.params.iter_mut().zip(params) {
            if slot.name != name || slot.value.shape() != value.shape() {
                return Err(DicError::shape(
                    "load_params",
                    format!("{} {:?} does not match {} {:?}", name, value.shape(), slot.name, slot.value.shape()),
                ));
            }
            slot.value = value;
        }
        Ok(())
    }

    /// Puts every parameter on the tape as a leaf.
    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.value.clone(), requires_grad)).collect()
    }

    /// Extracts parameter gradients in registry order.
    pub fn gradients(&self, grads: &mut Gradients<T>, params: &[Var]) -> Vec<Tensor<T>> {
        params
            .iter()
            .zip(&self.params)
            .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.value.shape().to_vec())))
            .collect()
    }

    fn check_inputs(&self, x_shape: &[usize], t: &[usize], y: &[usize]) -> Result<()> {
        let cfg = &self.config;
        let want = [x_shape.first().copied().unwrap_or(0), cfg.in_channels, cfg.image_size, cfg.image_size];
        if x_shape != want {
            return Err(DicError::shape("forward", format!("input {x_shape:?}, expected {want:?}")));
        }
        let n = want[0];
        if t.len() != n || y.len() != n {
            return Err(DicError::shape("forward", format!("batch {n} with {} timesteps and {} labels", t.len(), y.len())));
        }
        if let Some(&bad) = t.iter().find(|&&v| v >= cfg.timesteps) {
            return Err(DicError::index("forward", format!("timestep {bad} outside [0, {})", cfg.timesteps)));
        }
        if let Some(&bad) = y.iter().find(|&&v| v > cfg.num_classes) {
            return Err(DicError::index("forward", format!("class {bad} above null class {}", cfg.num_classes)));
        }
        Ok(())
    }

    fn timestep_features(&self, tape: &mut Tape<T>, t: &[usize]) -> Result<Var> {
        let dim = self.config.freq_dim;
        let mut data = Vec::with_capacity(t.len() * dim);
        for &ti in t {
            data.extend(timestep_embedding(ti, dim)?.into_iter().map(T::from_f64));
        }
        Ok(tape.constant(Tensor::new(vec![t.len(), dim], data)?))
    }

    fn site_vector(&self, tape: &mut Tape<T>, p: &[Var], site: &CondSite, temb: Var, y: &[usize]) -> Result<Var> {
        let h = tape.linear(temb, p[site.fc1.weight], Some(p[site.fc1.bias]))?;
        let h = tape.activation(h, self.config.activation);
        let h = tape.linear(h, p[site.fc2.weight], Some(p[site.fc2.bias]))?;
        let e = tape.embedding(p[site.table], y)?;
        tape.add(h, e)
    }

    /// Condition vectors `c_s` for all five stages.
    fn stage_vectors(&self, tape: &mut Tape<T>, p: &[Var], t: &[usize], y: &[usize], trace: Option<&mut ConditionTrace>) -> Result<Vec<Var>> {
        let temb = self.timestep_features(tape, t)?;
        let mut seen = Vec::new();
        let out = match &self.cond {
            Conditioning::StageSpecific(sites) => sites
                .iter()
                .map(|site| {
                    seen.push(y.to_vec());
                    self.site_vector(tape, p, site, temb, y)
                })
                .collect::<Result<Vec<_>>>()?,
            Conditioning::Shared { base, proj } => {
                let c = self.site_vector(tape, p, base, temb, y)?;
                proj.iter()
                    .map(|a| {
                        seen.push(y.to_vec());
                        tape.linear(c, p[a.weight], Some(p[a.bias]))
                    })
                    .collect::<Result<Vec<_>>>()?
            }
        };
        if let Some(trace) = trace {
            trace.stage_labels = seen;
        }
        Ok(out)
    }

    fn conv_s1(&self, tape: &mut Tape<T>, x: Var, a: Affine, p: &[Var], path: ConvPath) -> Result<Var> {
        match path {
            ConvPath::Direct => tape.conv3x3(x, p[a.weight], Some(p[a.bias]), 1),
            ConvPath::Winograd => tape.winograd_conv3x3(x, p[a.weight], Some(p[a.bias])),
        }
    }

    fn norm(&self, tape: &mut Tape<T>, x: Var, a: Affine, p: &[Var]) -> Result<Var> {
        tape.group_norm(x, self.config.groups, p[a.weight], p[a.bias], NORM_EPS)
    }

    /// (scale, shift, gate) projections of the activated stage vector.
    fn block_modulation(&self, tape: &mut Tape<T>, blk: &Block, cond: Var, p: &[Var]) -> Result<(Var, Var, Option<Var>)> {
        let scale = tape.linear(cond, p[blk.scale.weight], Some(p[blk.scale.bias]))?;
        let shift = tape.linear(cond, p[blk.shift.weight], Some(p[blk.shift.bias]))?;
        let gate = match blk.gate {
            Some(g) => Some(tape.linear(cond, p[g.weight], Some(p[g.bias]))?),
            None => None,
        };
        Ok((scale, shift, gate))
    }

    fn block_forward(&self, tape: &mut Tape<T>, x: Var, blk: &Block, cond: Var, p: &[Var], path: ConvPath) -> Result<Var> {
        let act = self.config.activation;
        let (scale, shift, gate) = self.block_modulation(tape, blk, cond, p)?;
        let mut u = self.norm(tape, x, blk.norm1, p)?;
        if self.config.injection == Injection::PreBlock {
            u = tape.modulate(u, scale, shift)?;
        }
        u = tape.activation(u, act);
        u = self.conv_s1(tape, u, blk.conv1, p, path)?;
        u = self.norm(tape, u, blk.norm2, p)?;
        if self.config.injection == Injection::MidBlock {
            u = tape.modulate(u, scale, shift)?;
        }
        u = tape.activation(u, act);
        u = self.conv_s1(tape, u, blk.conv2, p, path)?;
        match gate {
            Some(g) => tape.gated_residual(x, g, u),
            None => tape.add(x, u),
        }
    }

    /// Records the full forward pass on `tape` using parameter leaves `p`.
    pub fn forward_with(
        &self,
        tape: &mut Tape<T>,
        p: &[Var],
        x: Var,
        t: &[usize],
        y: &[usize],
        opts: ForwardOptions,
        trace: Option<&mut ConditionTrace>,
    ) -> Result<Var> {
        self.check_inputs(tape.shape(x), t, y)?;
        if p.len() != self.params.len() {
            return Err(DicError::shape("forward", format!("{} parameter leaves for {} parameters", p.len(), self.params.len())));
        }
        let path = opts.conv_path;
        let act = self.config.activation;
        let hourglass = self.config.variant.is_hourglass();

        let conds = self.stage_vectors(tape, p, t, y, trace)?;
        // Stems always run direct, matching the analyzer's eligibility rule.
        let mut h = if hourglass {
            tape.conv3x3(x, p[self.stem.weight], Some(p[self.stem.bias]), 1)?
        } else {
            tape.conv2d(x, p[self.stem.weight], Some(p[self.stem.bias]), 2, 0)?
        };

        let mut skips: Vec<Var> = Vec::new();
        for (s, stage) in self.stages.iter().enumerate() {
            if hourglass && s >= 3 {
                let a = self.up[s - 3];
                h = tape.upsample_nearest2x(h)?;
                h = self.conv_s1(tape, h, a, p, path)?;
            }
            let cond = tape.activation(conds[s], act);
            let mut merges = stage.merges.iter().peekable();
            for (i, blk) in stage.blocks.iter().enumerate() {
                while let Some(&&(_, a)) = merges.peek().filter(|m| m.0 == i) {
                    merges.next();
                    let skip = skips.pop().ok_or_else(|| DicError::shape("forward", "skip stack underflow"))?;
                    let cat = tape.concat_channels(h, skip)?;
                    h = self.conv_s1(tape, cat, a, p, path)?;
                }
                if !opts.bypass_blocks {
                    h = self.block_forward(tape, h, blk, cond, p, path)?;
                }
                if stage.record_after.contains(&(i + 1)) {
                    skips.push(h);
                }
            }
            if hourglass && s < 2 {
                let a = self.down[s];
                h = tape.conv3x3(h, p[a.weight], Some(p[a.bias]), 2)?;
            }
        }
        debug_assert!(skips.is_empty());

        h = self.norm(tape, h, self.head_norm, p)?;
        h = tape.activation(h, act);
        h = self.conv_s1(tape, h, self.head_conv, p, path)?;
        if !hourglass {
            h = tape.pixel_shuffle(h, 2)?;
        }
        Ok(h)
    }

    /// Forward with fresh parameter leaves. Gradients flow to `x` only if it requires them.
    pub fn forward(&self, tape: &mut Tape<T>, x: Var, t: &[usize], y: &[usize], requires_grad: bool) -> Result<ForwardPass> {
        let params = self.bind(tape, requires_grad);
        let output = self.forward_with(tape, &params, x, t, y, ForwardOptions::default(), None)?;
        Ok(ForwardPass { output, params })
    }

    /// Gradient-free noise prediction.
    pub fn predict(&self, x: &Tensor<T>, t: &[usize], y: &[usize], opts: ForwardOptions) -> Result<Tensor<T>> {
        self.predict_traced(x, t, y, opts, None)
    }

    pub fn predict_traced(&self, x: &Tensor<T>, t: &[usize], y: &[usize], opts: ForwardOptions, trace: Option<&mut ConditionTrace>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = self.forward_with(&mut tape, &p, xv, t, y, opts, trace)?;
        Ok(tape.value(out).clone())
    }

    /// (γ, β, g) fed to block `block` of stage `stage`. `g` is all ones when gating is off.
    pub fn stage_condition(&self, t: &[usize], y: &[usize], stage: usize, block: usize) -> Result<[Tensor<T>; 3]> {
        let blk = self
            .stages
            .get(stage)
            .and_then(|s| s.blocks.get(block))
            .ok_or_else(|| DicError::index("stage_condition", format!("stage {stage} block {block}")))?;
        if t.len() != y.len() {
            return Err(DicError::shape("stage_condition", format!("{} timesteps for {} labels", t.len(), y.len())));
        }
        if let Some(&bad) = t.iter().find(|&&v| v >= self.config.timesteps) {
            return Err(DicError::index("stage_condition", format!("timestep {bad}")));
        }
        if let Some(&bad) = y.iter().find(|&&v| v > self.config.num_classes) {
            return Err(DicError::index("stage_condition", format!("class {bad}")));
        }
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let conds = self.stage_vectors(&mut tape, &p, t, y, None)?;
        let cond = tape.activation(conds[stage], self.config.activation);
        let (scale, shift, gate) = self.block_modulation(&mut tape, blk, cond, &p)?;
        let c = self.plan.stages[stage].channels;
        let g = match gate {
            Some(g) => tape.value(g).clone(),
            None => Tensor::full(vec![t.len(), c], T::ONE),
        };
        Ok([tape.value(scale).clone(), tape.value(shift).clone(), g])
    }
}
