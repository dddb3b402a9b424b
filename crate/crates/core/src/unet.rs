//! The noise-prediction network: a four-level convolutional encoder-decoder
//! over the single-channel (channels × time) signal plane, with fusion blocks
//! carrying the image condition at the deep levels and in the middle block.
//!
//! Layout, for level widths `c1..c4` and condition width `D`:
//!
//! ```text
//! conv_in 1→c1
//! down l=1..4 : res(→c_l) [fuse] res(c_l→c_l) [fuse] · skip · downsample (l < 4)
//! mid         : res · fuse · res
//! up   l=4..1 : concat(skip_l) res(→c_l) [fuse] res [fuse] · upsample (l > 1)
//! norm · silu · conv_out c1→1 (zero-initialised)
//! ```
//!
//! Fusion blocks sit only at the levels listed in `attn_levels` (1-based).

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::conditioning::{
    cross_attention_on_tape, fuse_addition_on_tape, fuse_concatenation_on_tape, AttentionVars, ConditionEmbedding, FusionMode,
};
use crate::error::{bail, Error, Result};
use crate::nn::{norm_groups, normal_init, ParamId, ParamSet, Tape, Var};
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

/// Total spatial downsampling factor of the encoder.
pub const GRID: usize = 8;
const LEVELS: usize = 4;
const UNITS_PER_LEVEL: usize = 2;

/// Structural description of the denoiser.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct DenoiserConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub level_channels: Vec<usize>,
    /// 1-based levels that carry fusion blocks; the middle block always does.
    pub attn_levels: Vec<usize>,
    pub cross_attn_dim: usize,
    pub heads: usize,
    /// Unpadded `(channels, timepoints)`.
    pub sample_shape: (usize, usize),
    pub time_embed_dim: usize,
    pub fusion: FusionMode,
}

impl DenoiserConfig {
    /// 63 electrodes × 250 samples.
    pub fn eeg() -> Self {
        Self {
            in_channels: 1,
            out_channels: 1,
            level_channels: vec![128, 256, 512, 512],
            attn_levels: vec![3, 4],
            cross_attn_dim: 768,
            heads: 8,
            sample_shape: (63, 250),
            time_embed_dim: 512,
            fusion: FusionMode::CrossAttention,
        }
    }

    /// 271 sensors × 200 samples.
    pub fn meg() -> Self {
        Self { sample_shape: (271, 200), ..Self::eeg() }
    }

    /// Small configuration for gradient checks and smoke training.
    pub fn tiny() -> Self {
        Self {
            level_channels: vec![8, 8, 8, 8],
            heads: 1,
            sample_shape: (8, 16),
            time_embed_dim: 32,
            ..Self::eeg()
        }
    }

    pub fn pad_spec(&self) -> PadSpec {
        PadSpec::for_shape(self.sample_shape.0, self.sample_shape.1)
    }

    /// Shape of the padded network input, `[in_channels, H', W']`.
    pub fn input_shape(&self) -> [usize; 3] {
        let p = self.pad_spec();
        [self.in_channels, p.padded.0, p.padded.1]
    }

    pub fn has_fusion(&self, level: usize) -> bool {
        self.attn_levels.contains(&level)
    }

    pub fn validate(&self) -> Result<()> {
        if self.level_channels.len() != LEVELS {
            bail!(Config, "expected {LEVELS} level widths, got {:?}", self.level_channels);
        }
        if self.in_channels == 0 || self.out_channels == 0 || self.level_channels.contains(&0) {
            bail!(Config, "channel counts must be positive");
        }
        if self.sample_shape.0 == 0 || self.sample_shape.1 == 0 {
            bail!(Config, "sample shape must be positive, got {:?}", self.sample_shape);
        }
        if self.cross_attn_dim == 0 || self.time_embed_dim == 0 {
            bail!(Config, "cross-attention and time-embedding widths must be positive");
        }
        if self.level_channels[0] % 2 != 0 {
            bail!(Config, "first level width {} must be even for the sinusoidal time embedding", self.level_channels[0]);
        }
        if let Some(bad) = self.attn_levels.iter().find(|&&l| l == 0 || l > LEVELS) {
            bail!(Config, "fusion level {bad} outside 1..={LEVELS}");
        }
        if self.heads == 0 {
            bail!(Config, "heads must be at least 1");
        }
        for (level, &c) in self.level_channels.iter().enumerate() {
            norm_groups(c)?;
            let fused = self.has_fusion(level + 1) || level + 1 == LEVELS;
            if fused && self.fusion == FusionMode::CrossAttention && c % self.heads != 0 {
                bail!(Config, "level {} width {c} not divisible by {} heads", level + 1, self.heads);
            }
        }
        // decoder inputs concatenate skips
        let mut cur = self.level_channels[LEVELS - 1];
        for level in (0..LEVELS).rev() {
            norm_groups(cur + self.level_channels[level])?;
            cur = self.level_channels[level];
        }
        Ok(())
    }

    /// Number of scalar parameters, computed without allocating them.
    pub fn parameter_count(&self) -> usize {
        let mut total = 0;
        layout(self, &mut |_: &str, shape: &[usize], _: Init| {
            total += shape.iter().product::<usize>();
            ParamId(0)
        });
        total
    }

    /// Activation shapes `[C, H, W]` of the four encoder skip stacks, the
    /// middle block, and each decoder level output, derived from the layout.
    pub fn activation_shapes(&self) -> ActivationShapes {
        let [_, h, w] = self.input_shape();
        let mut encoder = Vec::with_capacity(LEVELS);
        let (mut hh, mut ww) = (h, w);
        for (level, &c) in self.level_channels.iter().enumerate() {
            encoder.push([c, hh, ww]);
            if level + 1 < LEVELS {
                hh /= 2;
                ww /= 2;
            }
        }
        let mid = [self.level_channels[LEVELS - 1], hh, ww];
        let mut decoder = Vec::with_capacity(LEVELS);
        for level in (0..LEVELS).rev() {
            decoder.push([self.level_channels[level], encoder[level][1], encoder[level][2]]);
        }
        ActivationShapes { encoder, mid, decoder, output: [self.out_channels, h, w] }
    }
}

/// Shapes reported by [`DenoiserConfig::activation_shapes`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActivationShapes {
    pub encoder: Vec<[usize; 3]>,
    pub mid: [usize; 3],
    /// Deepest level first.
    pub decoder: Vec<[usize; 3]>,
    pub output: [usize; 3],
}

/// Zero padding applied at the high ends of both axes so extents divide by [`GRID`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PadSpec {
    pub original: (usize, usize),
    pub padded: (usize, usize),
}

impl PadSpec {
    pub fn for_shape(channels: usize, timepoints: usize) -> Self {
        let up = |n: usize| n.div_ceil(GRID) * GRID;
        Self { original: (channels, timepoints), padded: (up(channels), up(timepoints)) }
    }

    /// Offsets of the original data inside the padded plane (always the origin).
    pub fn offsets(&self) -> (usize, usize) {
        (0, 0)
    }

    /// `[N_c×N_t]` → `[1×N_c'×N_t']`.
    pub fn pad(&self, y: &Tensor) -> Result<Tensor> {
        if y.shape() != [self.original.0, self.original.1] {
            bail!(Shape, "signal {:?} does not match pad spec original {:?}", y.shape(), self.original);
        }
        let (pc, pt) = self.padded;
        let (c, t) = self.original;
        let mut out = vec![0.0; pc * pt];
        for i in 0..c {
            out[i * pt..i * pt + t].copy_from_slice(y.row(i));
        }
        Tensor::new(&[1, pc, pt], out)
    }

    /// `[1×N_c'×N_t']` (or `[N_c'×N_t']`) → `[N_c×N_t]`.
    pub fn crop(&self, y: &Tensor) -> Result<Tensor> {
        let (pc, pt) = self.padded;
        if y.shape() != [1, pc, pt] && y.shape() != [pc, pt] {
            bail!(Shape, "padded signal {:?} does not match pad spec {:?}", y.shape(), self.padded);
        }
        let (c, t) = self.original;
        let mut out = Vec::with_capacity(c * t);
        for i in 0..c {
            out.extend_from_slice(&y.data()[i * pt..i * pt + t]);
        }
        Tensor::new(&[c, t], out)
    }
}

/// Pads a `[N_c×N_t]` signal up to the next multiples of [`GRID`].
pub fn pad_to_grid(y: &Tensor) -> Result<(Tensor, PadSpec)> {
    if y.ndim() != 2 {
        bail!(Shape, "brain signal must be channels × time, got {:?}", y.shape());
    }
    let spec = PadSpec::for_shape(y.shape()[0], y.shape()[1]);
    Ok((spec.pad(y)?, spec))
}

/// Sinusoidal embedding of `t`: `dim/2` sines then `dim/2` cosines at
/// frequencies spaced geometrically from 1 down to 1e-4.
pub fn sinusoidal_embedding(t: f64, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        bail!(Config, "time embedding width must be even and positive, got {dim}");
    }
    let half = dim / 2;
    let denom = if half > 1 { (half - 1) as f64 } else { 1.0 };
    let freqs: Vec<f64> = (0..half).map(|k| libm::exp(-libm::log(10_000.0) * k as f64 / denom)).collect();
    let mut out = Vec::with_capacity(dim);
    out.extend(freqs.iter().map(|f| libm::sin(t * f)));
    out.extend(freqs.iter().map(|f| libm::cos(t * f)));
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    Normal,
    Zeros,
    Ones,
    /// Identity on the leading square block plus normal noise.
    IdentityPlusNormal,
}

#[derive(Debug, Clone)]
struct ResIds {
    in_ch: usize,
    out_ch: usize,
    norm1: (ParamId, ParamId),
    conv1: (ParamId, ParamId),
    time: (ParamId, ParamId),
    norm2: (ParamId, ParamId),
    conv2: (ParamId, ParamId),
    shortcut: Option<(ParamId, ParamId)>,
}

#[derive(Debug, Clone)]
enum FusionIds {
    CrossAttention { w_q: ParamId, w_k: ParamId, w_v: ParamId, w_out: ParamId, b_out: ParamId },
    Addition { w: ParamId, b: ParamId },
    Concatenation { w: ParamId, b: ParamId },
}

#[derive(Debug, Clone)]
struct LevelIds {
    units: Vec<(ResIds, Option<FusionIds>)>,
    /// Downsample (encoder) or upsample (decoder) conv.
    resample: Option<(ParamId, ParamId)>,
}

#[derive(Debug, Clone)]
struct Layout {
    conv_in: (ParamId, ParamId),
    time_mlp: [(ParamId, ParamId); 2],
    down: Vec<LevelIds>,
    mid: (ResIds, FusionIds, ResIds),
    /// Deepest level first.
    up: Vec<LevelIds>,
    out_norm: (ParamId, ParamId),
    conv_out: (ParamId, ParamId),
}

/// Walks the architecture, registering every parameter in a fixed order.
fn layout(cfg: &DenoiserConfig, reg: &mut dyn FnMut(&str, &[usize], Init) -> ParamId) -> Layout {
    let c = &cfg.level_channels;
    let temb = cfg.time_embed_dim;
    let d = cfg.cross_attn_dim;

    let conv = |reg: &mut dyn FnMut(&str, &[usize], Init) -> ParamId, name: &str, cin: usize, cout: usize, k: usize, init: Init| {
        (reg(&format!("{name}.weight"), &[cout, cin, k, k], init), reg(&format!("{name}.bias"), &[cout], Init::Zeros))
    };
    let norm = |reg: &mut dyn FnMut(&str, &[usize], Init) -> ParamId, name: &str, ch: usize| {
        (reg(&format!("{name}.gamma"), &[ch], Init::Ones), reg(&format!("{name}.beta"), &[ch], Init::Zeros))
    };
    let dense = |reg: &mut dyn FnMut(&str, &[usize], Init) -> ParamId, name: &str, din: usize, dout: usize, init: Init| {
        (reg(&format!("{name}.weight"), &[din, dout], init), reg(&format!("{name}.bias"), &[dout], Init::Zeros))
    };

    let res = |reg: &mut dyn FnMut(&str, &[usize], Init) -> ParamId, name: &str, cin: usize, cout: usize| ResIds {
        in_ch: cin,
        out_ch: cout,
        norm1: norm(reg, &format!("{name}.norm1"), cin),
        conv1: conv(reg, &format!("{name}.conv1"), cin, cout, 3, Init::Normal),
        time: dense(reg, &format!("{name}.time"), temb, cout, Init::Normal),
        norm2: norm(reg, &format!("{name}.norm2"), cout),
        conv2: conv(reg, &format!("{name}.conv2"), cout, cout, 3, Init::Normal),
        shortcut: (cin != cout).then(|| conv(reg, &format!("{name}.shortcut"), cin, cout, 1, Init::Normal)),
    };
    let fusion = |reg: &mut dyn FnMut(&str, &[usize], Init) -> ParamId, name: &str, ch: usize| match cfg.fusion {
        FusionMode::CrossAttention => FusionIds::CrossAttention {
            w_q: reg(&format!("{name}.attn.w_q"), &[ch, ch], Init::Normal),
            w_k: reg(&format!("{name}.attn.w_k"), &[d, ch], Init::Normal),
            w_v: reg(&format!("{name}.attn.w_v"), &[d, ch], Init::Normal),
            w_out: reg(&format!("{name}.attn.w_out"), &[ch, ch], Init::Normal),
            b_out: reg(&format!("{name}.attn.b_out"), &[ch], Init::Zeros),
        },
        FusionMode::Addition => {
            let (w, b) = dense(reg, &format!("{name}.add"), d, ch, Init::Normal);
            FusionIds::Addition { w, b }
        }
        FusionMode::Concatenation => {
            let (w, b) = dense(reg, &format!("{name}.concat"), ch + d, ch, Init::IdentityPlusNormal);
            FusionIds::Concatenation { w, b }
        }
    };

    let conv_in = conv(reg, "conv_in", cfg.in_channels, c[0], 3, Init::Normal);
    let time_mlp = [dense(reg, "time_mlp.0", c[0], temb, Init::Normal), dense(reg, "time_mlp.1", temb, temb, Init::Normal)];

    let mut down = Vec::with_capacity(LEVELS);
    let mut cur = c[0];
    for level in 0..LEVELS {
        let fused = cfg.has_fusion(level + 1);
        let mut units = Vec::with_capacity(UNITS_PER_LEVEL);
        for unit in 0..UNITS_PER_LEVEL {
            let name = format!("down.{level}.{unit}");
            let r = res(reg, &format!("{name}.res"), cur, c[level]);
            cur = c[level];
            let f = fused.then(|| fusion(reg, &name, cur));
            units.push((r, f));
        }
        let resample = (level + 1 < LEVELS).then(|| conv(reg, &format!("down.{level}.downsample"), cur, cur, 3, Init::Normal));
        down.push(LevelIds { units, resample });
    }

    let mid = (
        res(reg, "mid.res.0", cur, cur),
        fusion(reg, "mid", cur),
        res(reg, "mid.res.1", cur, cur),
    );

    let mut up = Vec::with_capacity(LEVELS);
    for level in (0..LEVELS).rev() {
        let fused = cfg.has_fusion(level + 1);
        let mut units = Vec::with_capacity(UNITS_PER_LEVEL);
        for unit in 0..UNITS_PER_LEVEL {
            let name = format!("up.{level}.{unit}");
            let cin = if unit == 0 { cur + c[level] } else { cur };
            let r = res(reg, &format!("{name}.res"), cin, c[level]);
            cur = c[level];
            let f = fused.then(|| fusion(reg, &name, cur));
            units.push((r, f));
        }
        let resample = (level > 0).then(|| conv(reg, &format!("up.{level}.upsample"), cur, cur, 3, Init::Normal));
        up.push(LevelIds { units, resample });
    }

    let out_norm = norm(reg, "out_norm", c[0]);
    let conv_out = conv(reg, "conv_out", c[0], cfg.out_channels, 3, Init::Zeros);
    Layout { conv_in, time_mlp, down, mid, up, out_norm, conv_out }
}

/// Learnable weights of the denoiser together with the configuration that shapes them.
#[derive(Debug, Clone)]
pub struct DenoiserParams {
    config: DenoiserConfig,
    params: ParamSet,
    layout: Layout,
}

impl PartialEq for DenoiserParams {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

impl DenoiserParams {
    /// Deterministic initialisation from `seed`: normal(0, 0.02) weights,
    /// zero biases, unit norm scales, zero output convolution.
    pub fn init(config: &DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, Stream::Init, 0);
        let mut params = ParamSet::new();
        let mut failure = None;
        let layout = layout(config, &mut |name, shape, init| {
            let value = match init {
                Init::Normal => normal_init(shape, &mut rng),
                Init::Zeros => Tensor::zeros(shape),
                Init::Ones => Tensor::full(shape, 1.0),
                Init::IdentityPlusNormal => {
                    let mut t = normal_init(shape, &mut rng);
                    let cols = shape[1];
                    for i in 0..cols.min(shape[0]) {
                        t.data_mut()[i * cols + i] += 1.0;
                    }
                    t
                }
            };
            params.insert(name, value).unwrap_or_else(|e| {
                failure.get_or_insert(e);
                ParamId(0)
            })
        });
        if let Some(e) = failure {
            return Err(e);
        }
        Ok(Self { config: config.clone(), params, layout })
    }

    /// Initialisation with every tensor drawn at random: weights from
    /// normal(0, 1/fan_in), biases from normal(0, 0.1), norm scales from
    /// 1 + normal(0, 0.1). Activations stay O(1) at every depth, which keeps
    /// finite-difference checks well conditioned and makes all blocks live.
    pub fn randomized(config: &DenoiserConfig, seed: u64) -> Result<Self> {
        let mut out = Self::init(config, seed)?;
        let mut rng = rng::stream(seed, Stream::Init, 1);
        for p in out.params.iter_mut() {
            let shape = p.value.shape().to_vec();
            let unit = crate::rng::normal_tensor(&shape, &mut rng);
            p.value = if p.name.ends_with(".gamma") {
                unit.map(|v| 1.0 + 0.1 * v)
            } else if shape.len() == 1 {
                unit.scale(0.1)
            } else {
                let fan_in: usize = if shape.len() == 4 { shape[1..].iter().product() } else { shape[0] };
                unit.scale(1.0 / libm::sqrt(fan_in as f64))
            };
        }
        Ok(out)
    }

    /// Rebuilds parameters from named tensors, e.g. a loaded checkpoint.
    /// Every name the configuration requires must be present with the right shape.
    pub fn from_named<I>(config: &DenoiserConfig, named: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, Tensor)>,
    {
        let mut out = Self::init(config, 0)?;
        let mut seen = 0;
        for (name, value) in named {
            let Some(p) = out.params.by_name_mut(&name) else {
                bail!(Compatibility, "parameter `{name}` is not part of this configuration");
            };
            if p.value.shape() != value.shape() {
                bail!(Compatibility, "parameter `{name}` has shape {:?}, configuration expects {:?}", value.shape(), p.value.shape());
            }
            p.value = value;
            seen += 1;
        }
        if seen != out.params.len() {
            bail!(Compatibility, "expected {} parameter blocks, got {seen}", out.params.len());
        }
        Ok(out)
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Sets every parameter to zero.
    pub fn zero_all(&mut self) {
        for p in self.params.iter_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Names of the fusion parameters, grouped per block.
    pub fn fusion_block_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .params
            .iter()
            .filter_map(|p| {
                let name = p.name.as_str();
                ["attn.", "add.", "concat."].iter().find_map(|tag| name.find(tag).map(|i| String::from(&name[..i - 1])))
            })
            .collect();
        names.dedup();
        names
    }

    /// Records the forward pass on `tape` and returns the noise estimate node.
    pub fn forward(&self, tape: &mut Tape, y_t: &Tensor, t: usize, cond: &ConditionEmbedding) -> Result<Var> {
        let cfg = &self.config;
        let expected = cfg.input_shape();
        if y_t.shape() != expected {
            bail!(Shape, "denoiser input {:?} does not match configured padded shape {:?}", y_t.shape(), expected);
        }
        cond.expect_dim(cfg.cross_attn_dim)?;
        if t == 0 {
            bail!(Index, "time step must be at least 1");
        }
        let mut net = Net { tape, params: &self.params, heads: cfg.heads };
        let x = net.tape.leaf(y_t.clone());
        let c = net.tape.leaf(cond.tokens().clone());

        let sinusoid = sinusoidal_embedding(t as f64, cfg.level_channels[0])?;
        let sinusoid = net.tape.leaf(Tensor::new(&[1, cfg.level_channels[0]], sinusoid)?);
        let temb = net.dense(sinusoid, self.layout.time_mlp[0])?;
        let temb = net.tape.silu(temb);
        let temb = net.dense(temb, self.layout.time_mlp[1])?;
        let temb = net.tape.silu(temb);

        let mut h = net.conv(x, self.layout.conv_in, 1, 1)?;
        let mut skips = Vec::with_capacity(LEVELS);
        for (level, ids) in self.layout.down.iter().enumerate() {
            for (res, fusion) in &ids.units {
                h = net.res_block(h, temb, res)?;
                if let Some(f) = fusion {
                    h = net.fuse(h, c, f)?;
                }
            }
            net.check(h, &format!("down.{level}"))?;
            skips.push(h);
            if let Some(conv) = ids.resample {
                let padded = net.tape.pad_high(h, 1)?;
                h = net.conv(padded, conv, 2, 0)?;
            }
        }

        let (r0, f, r1) = &self.layout.mid;
        h = net.res_block(h, temb, r0)?;
        h = net.fuse(h, c, f)?;
        h = net.res_block(h, temb, r1)?;
        net.check(h, "mid")?;

        for (ids, level) in self.layout.up.iter().zip((0..LEVELS).rev()) {
            let skip = skips.pop().expect("one skip per level");
            h = net.tape.concat_channels(h, skip)?;
            for (res, fusion) in &ids.units {
                h = net.res_block(h, temb, res)?;
                if let Some(f) = fusion {
                    h = net.fuse(h, c, f)?;
                }
            }
            net.check(h, &format!("up.{level}"))?;
            if let Some(conv) = ids.resample {
                let up = net.tape.upsample2x(h)?;
                h = net.conv(up, conv, 1, 1)?;
            }
        }

        let groups = norm_groups(cfg.level_channels[0])?;
        let (g, b) = (net.p(self.layout.out_norm.0), net.p(self.layout.out_norm.1));
        h = net.tape.group_norm(h, g, b, groups)?;
        h = net.tape.silu(h);
        h = net.conv(h, self.layout.conv_out, 1, 1)?;
        net.check(h, "conv_out")?;
        Ok(h)
    }
}

struct Net<'a> {
    tape: &'a mut Tape,
    params: &'a ParamSet,
    heads: usize,
}

impl Net<'_> {
    fn p(&mut self, id: ParamId) -> Var {
        self.tape.param(self.params, id)
    }

    fn conv(&mut self, x: Var, (w, b): (ParamId, ParamId), stride: usize, pad: usize) -> Result<Var> {
        let (w, b) = (self.p(w), self.p(b));
        self.tape.conv2d(x, w, Some(b), stride, pad)
    }

    fn dense(&mut self, x: Var, (w, b): (ParamId, ParamId)) -> Result<Var> {
        let (w, b) = (self.p(w), self.p(b));
        self.tape.affine(x, w, Some(b))
    }

    fn norm(&mut self, x: Var, (g, b): (ParamId, ParamId), channels: usize) -> Result<Var> {
        let groups = norm_groups(channels)?;
        let (g, b) = (self.p(g), self.p(b));
        self.tape.group_norm(x, g, b, groups)
    }

    fn res_block(&mut self, x: Var, temb: Var, ids: &ResIds) -> Result<Var> {
        let h = self.norm(x, ids.norm1, ids.in_ch)?;
        let h = self.tape.silu(h);
        let h = self.conv(h, ids.conv1, 1, 1)?;
        let h = self.norm(h, ids.norm2, ids.out_ch)?;
        // after the norm: with one channel per group a per-channel shift before it would cancel
        let t = self.dense(temb, ids.time)?;
        let t = self.tape.mean_rows(t)?;
        let h = self.tape.add_channel_vector(h, t)?;
        let h = self.tape.silu(h);
        let h = self.conv(h, ids.conv2, 1, 1)?;
        let skip = match ids.shortcut {
            Some(conv) => self.conv(x, conv, 1, 0)?,
            None => x,
        };
        self.tape.add(skip, h)
    }

    fn fuse(&mut self, x: Var, cond: Var, ids: &FusionIds) -> Result<Var> {
        let shape = self.tape.value(x).shape().to_vec();
        let (h, w) = (shape[1], shape[2]);
        let tokens = self.tape.to_tokens(x)?;
        let fused = match *ids {
            FusionIds::CrossAttention { w_q, w_k, w_v, w_out, b_out } => {
                let vars = AttentionVars { w_q: self.p(w_q), w_k: self.p(w_k), w_v: self.p(w_v), w_out: self.p(w_out), b_out: Some(self.p(b_out)) };
                cross_attention_on_tape(self.tape, tokens, cond, vars, self.heads)?.output
            }
            FusionIds::Addition { w, b } => {
                let (w, b) = (self.p(w), self.p(b));
                fuse_addition_on_tape(self.tape, tokens, cond, w, Some(b))?
            }
            FusionIds::Concatenation { w, b } => {
                let (w, b) = (self.p(w), self.p(b));
                fuse_concatenation_on_tape(self.tape, tokens, cond, w, Some(b))?
            }
        };
        self.tape.from_tokens(fused, h, w)
    }

    fn check(&self, v: Var, block: &str) -> Result<()> {
        if !self.tape.value(v).is_finite() {
            return Err(Error::Numeric(format!("non-finite activation after block `{block}`")));
        }
        Ok(())
    }
}

/// ε̂ = ε_θ(y_t, t, cond) for a padded `[in_channels×H'×W']` input.
pub fn predict_noise(y_t: &Tensor, t: usize, cond: &ConditionEmbedding, params: &DenoiserParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let out = params.forward(&mut tape, y_t, t, cond)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(base: DenoiserConfig) -> DenoiserConfig {
        DenoiserConfig { level_channels: vec![8, 8, 16, 16], time_embed_dim: 16, ..base }
    }

    fn cond(seed: u64, dim: usize) -> ConditionEmbedding {
        ConditionEmbedding::new("c", rng::normal_tensor(&[1, dim], &mut rng::stream(seed, Stream::Synthetic, 0))).unwrap()
    }

    #[test]
    fn pad_examples() {
        assert_eq!(PadSpec::for_shape(63, 250).padded, (64, 256));
        assert_eq!(PadSpec::for_shape(271, 200).padded, (272, 200));
        assert_eq!(PadSpec::for_shape(8, 8).padded, (8, 8));
        let x = rng::normal_tensor(&[5, 11], &mut rng::stream(0, Stream::Synthetic, 0));
        let (p, spec) = pad_to_grid(&x).unwrap();
        assert_eq!(p.shape(), &[1, 8, 16]);
        assert_eq!(p.data()[15], 0.0);
        assert_eq!(spec.crop(&p).unwrap(), x);
        assert!(spec.pad(&Tensor::zeros(&[4, 11])).is_err());
    }

    #[test]
    fn sinusoid() {
        let e0 = sinusoidal_embedding(0.0, 8).unwrap();
        assert_eq!(&e0[..4], &[0.0; 4]);
        assert_eq!(&e0[4..], &[1.0; 4]);
        let e1 = sinusoidal_embedding(1.0, 128).unwrap();
        let e2 = sinusoidal_embedding(2.0, 128).unwrap();
        assert_eq!(e1, sinusoidal_embedding(1.0, 128).unwrap());
        assert!(e1.iter().zip(&e2).any(|(a, b)| (a - b).abs() > 1e-6));
        assert!(sinusoidal_embedding(1.0, 7).is_err());
    }

    #[test]
    fn eeg_plane_shape_contract() {
        let cfg = small(DenoiserConfig::eeg());
        let m = DenoiserParams::randomized(&cfg, 1).unwrap();
        let y = rng::normal_tensor(&cfg.input_shape(), &mut rng::stream(2, Stream::Synthetic, 0));
        assert_eq!(y.shape(), &[1, 64, 256]);
        assert_eq!(predict_noise(&y, 10, &cond(3, 768), &m).unwrap().shape(), &[1, 64, 256]);
    }

    #[test]
    fn zero_network_predicts_zero() {
        let cfg = DenoiserConfig::tiny();
        let y = rng::normal_tensor(&cfg.input_shape(), &mut rng::stream(2, Stream::Synthetic, 0));
        let fresh = DenoiserParams::init(&cfg, 4).unwrap();
        assert!(predict_noise(&y, 5, &cond(1, 768), &fresh).unwrap().data().iter().all(|&v| v == 0.0));
        let mut zero = DenoiserParams::randomized(&cfg, 4).unwrap();
        zero.zero_all();
        assert!(predict_noise(&y, 5, &cond(1, 768), &zero).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conditioning_is_live_and_deterministic() {
        for fusion in FusionMode::ALL {
            let cfg = DenoiserConfig { fusion, ..DenoiserConfig::tiny() };
            let m = DenoiserParams::randomized(&cfg, 5).unwrap();
            let y = rng::normal_tensor(&cfg.input_shape(), &mut rng::stream(6, Stream::Synthetic, 0));
            let a = predict_noise(&y, 40, &cond(7, 768), &m).unwrap();
            let b = predict_noise(&y, 40, &cond(8, 768), &m).unwrap();
            assert!(a.sub(&b).unwrap().max_abs() > 1e-6, "{fusion}");
            let again = predict_noise(&y, 40, &cond(7, 768), &m).unwrap();
            assert!(a.data().iter().zip(again.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
            let later = predict_noise(&y, 41, &cond(7, 768), &m).unwrap();
            assert!(a.sub(&later).unwrap().max_abs() > 1e-9, "{fusion}: time step is ignored");
        }
    }

    #[test]
    fn forward_rejects_bad_inputs() {
        let cfg = DenoiserConfig::tiny();
        let m = DenoiserParams::init(&cfg, 0).unwrap();
        let y = Tensor::zeros(&cfg.input_shape());
        assert!(matches!(predict_noise(&Tensor::zeros(&[1, 8, 8]), 1, &cond(0, 768), &m), Err(Error::Shape(_))));
        assert!(matches!(predict_noise(&y, 1, &cond(0, 512), &m), Err(Error::Shape(_))));
        assert!(predict_noise(&y, 0, &cond(0, 768), &m).is_err());
        let mut bad = DenoiserParams::randomized(&cfg, 0).unwrap();
        bad.params_mut().by_name_mut("conv_in.bias").unwrap().value.data_mut()[0] = f64::INFINITY;
        let err = predict_noise(&y, 1, &cond(0, 768), &bad).unwrap_err();
        assert!(matches!(&err, Error::Numeric(m) if m.contains("down.0")), "{err}");
    }

    #[test]
    fn activation_shapes_mirror() {
        let eeg = DenoiserConfig::eeg().activation_shapes();
        assert_eq!(eeg.encoder, vec![[128, 64, 256], [256, 32, 128], [512, 16, 64], [512, 8, 32]]);
        assert_eq!(eeg.mid, [512, 8, 32]);
        let meg = DenoiserConfig::meg().activation_shapes();
        assert_eq!(meg.encoder, vec![[128, 272, 200], [256, 136, 100], [512, 68, 50], [512, 34, 25]]);
        for s in [eeg, meg] {
            let mut rev = s.decoder.clone();
            rev.reverse();
            assert_eq!(rev, s.encoder);
        }
    }

    #[test]
    fn traced_shapes_match_reported_ones() {
        let cfg = small(DenoiserConfig::meg());
        let m = DenoiserParams::init(&cfg, 0).unwrap();
        let mut tape = Tape::new();
        let out = m.forward(&mut tape, &Tensor::zeros(&cfg.input_shape()), 3, &cond(0, 768)).unwrap();
        assert_eq!(tape.value(out).shape(), &cfg.activation_shapes().output);
        assert_eq!(cfg.activation_shapes().encoder[3], [16, 34, 25]);
    }

    #[test]
    fn fusion_placement() {
        for fusion in FusionMode::ALL {
            let m = DenoiserParams::init(&DenoiserConfig { fusion, ..DenoiserConfig::tiny() }, 0).unwrap();
            assert_eq!(
                m.fusion_block_names(),
                ["down.2.0", "down.2.1", "down.3.0", "down.3.1", "mid", "up.3.0", "up.3.1", "up.2.0", "up.2.1"]
            );
        }
    }

    #[test]
    fn parameter_count_matches_allocation() {
        for fusion in FusionMode::ALL {
            let cfg = DenoiserConfig { fusion, ..small(DenoiserConfig::eeg()) };
            assert_eq!(cfg.parameter_count(), DenoiserParams::init(&cfg, 0).unwrap().params().scalar_count());
        }
    }

    #[test]
    fn config_validation() {
        assert!(DenoiserConfig::eeg().validate().is_ok());
        let bad = DenoiserConfig { level_channels: vec![8, 8, 8], ..DenoiserConfig::tiny() };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = DenoiserConfig { level_channels: vec![40, 40, 40, 40], ..DenoiserConfig::tiny() };
        assert!(bad.validate().is_err());
        let bad = DenoiserConfig { heads: 3, ..DenoiserConfig::tiny() };
        assert!(bad.validate().is_err());
        let bad = DenoiserConfig { attn_levels: vec![5], ..DenoiserConfig::tiny() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn named_roundtrip_and_mismatch() {
        let cfg = DenoiserConfig::tiny();
        let m = DenoiserParams::randomized(&cfg, 2).unwrap();
        let named: Vec<(String, Tensor)> = m.params().iter().map(|p| (p.name.clone(), p.value.clone())).collect();
        assert_eq!(DenoiserParams::from_named(&cfg, named.clone()).unwrap(), m);
        let other = DenoiserConfig { fusion: FusionMode::Addition, ..cfg.clone() };
        assert!(matches!(DenoiserParams::from_named(&other, named.clone()), Err(Error::Compatibility(_))));
        assert!(DenoiserParams::from_named(&cfg, named.into_iter().skip(1)).is_err());
    }
}
