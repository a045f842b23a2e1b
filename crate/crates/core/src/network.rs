//! U-shaped segmentation network built from predictive-corrective blocks.
//!
//! ```text
//! image [1,H,W] -> 4x4 patch embed -> stage0 (H/4, C) -> merge -> stage1 (H/8, 2C)
//!   -> merge -> stage2 (H/16, 4C) -> merge -> stage3 (H/32, 8C) -> bottleneck
//!   -> [expand, concat skip, reduce, blocks] x3 -> 4x4 expansion head -> logits [K,H,W]
//! ```
//!
//! Parameters are registered by name (see [`crate::params`]), so variants that
//! share a sub-network also share its initial values.

use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::kv::{join_list, parse_list, parse_size, KvText};
use crate::params::{init_linear, linear, mix_seed, Bound, ParamStore};
use crate::pcblock::{block_on_tape, init_block, BlockConfig, CrnConfig, MaskRule, Modulation, PpmConfig};
use crate::ssm::ScanOrder;
use crate::tensor::{io as tio, Real, Tape, Tensor, Var};

/// Number of 2x merges between the first and the last encoder stage.
pub const MERGES: usize = 3;

/// Which ablation of the block is wired in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum VariantKind {
    /// Both branches feed the modulation.
    #[default]
    FullPc,
    /// Symmetry input to the fusion is zero.
    CrnOnly,
    /// Symmetry mask replaced by fair coin flips.
    RandomMaskPpm,
    /// Density input to the fusion is zero.
    PpmOnly,
    /// Density branch replaced by a 3x3 convolution.
    CnnCrn,
    /// No modulation at all.
    PlainE2e,
}

impl VariantKind {
    pub const ALL: [VariantKind; 6] = [
        VariantKind::FullPc,
        VariantKind::CrnOnly,
        VariantKind::RandomMaskPpm,
        VariantKind::PpmOnly,
        VariantKind::CnnCrn,
        VariantKind::PlainE2e,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            VariantKind::FullPc => "full",
            VariantKind::CrnOnly => "crn-only",
            VariantKind::RandomMaskPpm => "random-mask",
            VariantKind::PpmOnly => "ppm-only",
            VariantKind::CnnCrn => "cnn-crn",
            VariantKind::PlainE2e => "e2e",
        }
    }

    pub fn modulation(self) -> Modulation {
        match self {
            VariantKind::FullPc | VariantKind::RandomMaskPpm => Modulation::Both,
            VariantKind::CrnOnly => Modulation::DensityOnly,
            VariantKind::PpmOnly => Modulation::MaskOnly,
            VariantKind::CnnCrn => Modulation::ConvDensity,
            VariantKind::PlainE2e => Modulation::Unit,
        }
    }
}

impl fmt::Display for VariantKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for VariantKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        VariantKind::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown variant {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub input_size: (usize, usize),
    pub patch_size: usize,
    pub embed_dim: usize,
    /// Blocks per encoder stage (4 stages).
    pub stage_depths: Vec<usize>,
    pub bottleneck_depth: usize,
    /// Blocks per decoder stage (3 stages, coarse to fine).
    pub decoder_depths: Vec<usize>,
    pub num_classes: usize,
    pub variant: VariantKind,
    pub state_dim: usize,
    pub scan_order: ScanOrder,
    pub ppm: PpmConfig,
    pub crn: CrnConfig,
    /// Seed of the parameter initialisation.
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            input_size: (64, 64),
            patch_size: 4,
            embed_dim: 32,
            stage_depths: vec![2; 4],
            bottleneck_depth: 2,
            decoder_depths: vec![2; 3],
            num_classes: 4,
            variant: VariantKind::FullPc,
            state_dim: 8,
            scan_order: ScanOrder::Bidirectional,
            ppm: PpmConfig::default(),
            crn: CrnConfig::default(),
            seed: 0,
        }
    }
}

/// Keys understood by [`NetworkConfig::apply_kv`].
pub const NETWORK_KEYS: &[&str] = &[
    "input_size",
    "patch_size",
    "embed_dim",
    "stage_depths",
    "bottleneck_depth",
    "decoder_depths",
    "num_classes",
    "variant",
    "state_dim",
    "scan_order",
    "theta",
    "neighborhood_radius",
    "ppm_epsilon",
    "crn_kernel",
    "crn_dilation",
    "crn_hidden",
    "init_seed",
];

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.input_size;
        let unit = self.patch_size << MERGES;
        if self.patch_size == 0 || h == 0 || w == 0 || h % unit != 0 || w % unit != 0 {
            return Err(Error::config(format!(
                "input {h}x{w} must be a positive multiple of {unit} (patch {} and {MERGES} merges)",
                self.patch_size
            )));
        }
        if self.stage_depths.len() != MERGES + 1 || self.decoder_depths.len() != MERGES {
            return Err(Error::config(format!(
                "need {} encoder and {MERGES} decoder depths",
                MERGES + 1
            )));
        }
        if self.embed_dim == 0 || self.state_dim == 0 || self.num_classes < 2 {
            return Err(Error::config(
                "embed_dim, state_dim must be positive and num_classes >= 2",
            ));
        }
        self.ppm.validate()?;
        self.crn.validate()?;
        Ok(())
    }

    /// Channel width of encoder stage `s`.
    pub fn width(&self, stage: usize) -> usize {
        self.embed_dim << stage
    }

    /// Token grid of encoder stage `s`.
    pub fn grid(&self, stage: usize) -> (usize, usize) {
        let f = self.patch_size << stage;
        (self.input_size.0 / f, self.input_size.1 / f)
    }

    pub fn block_config(&self) -> BlockConfig {
        BlockConfig {
            state_dim: self.state_dim,
            order: self.scan_order,
            modulation: self.variant.modulation(),
            ppm: self.ppm,
            crn: self.crn,
            ..BlockConfig::default()
        }
    }

    pub fn to_kv(&self) -> KvText {
        let mut kv = KvText::new();
        kv.set("input_size", format!("{}x{}", self.input_size.0, self.input_size.1));
        kv.set("patch_size", self.patch_size);
        kv.set("embed_dim", self.embed_dim);
        kv.set("stage_depths", join_list(&self.stage_depths));
        kv.set("bottleneck_depth", self.bottleneck_depth);
        kv.set("decoder_depths", join_list(&self.decoder_depths));
        kv.set("num_classes", self.num_classes);
        kv.set("variant", self.variant);
        kv.set("state_dim", self.state_dim);
        kv.set(
            "scan_order",
            match self.scan_order {
                ScanOrder::Forward => "forward",
                ScanOrder::Bidirectional => "bidirectional",
            },
        );
        kv.set("theta", self.ppm.theta);
        kv.set("neighborhood_radius", self.ppm.neighborhood_radius);
        kv.set("ppm_epsilon", self.ppm.epsilon);
        kv.set("crn_kernel", self.crn.kernel_size);
        kv.set("crn_dilation", self.crn.dilation);
        kv.set("crn_hidden", self.crn.mlp_hidden);
        kv.set("init_seed", self.seed);
        kv
    }

    /// Overrides every field whose key is present; other keys are ignored.
    pub fn apply_kv(&mut self, kv: &KvText) -> Result<()> {
        if let Some(s) = kv.get("input_size") {
            self.input_size = parse_size(s)?;
        }
        kv.apply("patch_size", &mut self.patch_size)?;
        kv.apply("embed_dim", &mut self.embed_dim)?;
        if let Some(s) = kv.get("stage_depths") {
            self.stage_depths = parse_list(s)?;
        }
        kv.apply("bottleneck_depth", &mut self.bottleneck_depth)?;
        if let Some(s) = kv.get("decoder_depths") {
            self.decoder_depths = parse_list(s)?;
        }
        kv.apply("num_classes", &mut self.num_classes)?;
        kv.apply("variant", &mut self.variant)?;
        kv.apply("state_dim", &mut self.state_dim)?;
        if let Some(s) = kv.get("scan_order") {
            self.scan_order = match s {
                "forward" => ScanOrder::Forward,
                "bidirectional" => ScanOrder::Bidirectional,
                other => return Err(Error::config(format!("unknown scan_order {other:?}"))),
            };
        }
        kv.apply("theta", &mut self.ppm.theta)?;
        kv.apply("neighborhood_radius", &mut self.ppm.neighborhood_radius)?;
        kv.apply("ppm_epsilon", &mut self.ppm.epsilon)?;
        kv.apply("crn_kernel", &mut self.crn.kernel_size)?;
        kv.apply("crn_dilation", &mut self.crn.dilation)?;
        kv.apply("crn_hidden", &mut self.crn.mlp_hidden)?;
        kv.apply("init_seed", &mut self.seed)?;
        Ok(())
    }
}

/// Per-forward options.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ForwardCtx {
    /// Source of the coin flips of the random-mask variant.
    pub mask_seed: u64,
    /// Feeds zeros instead of encoder stage `s` to its decoder stage.
    pub drop_skip: Option<usize>,
    /// Runs every block without modulation, whatever the variant.
    pub unit_modulation: bool,
}

/// Handles of the intermediate grids of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub embedded: Var,
    /// Encoder stage outputs, fine to coarse.
    pub encoder: Vec<Var>,
    pub bottleneck: Var,
    /// Decoder stage outputs, coarse to fine.
    pub decoder: Vec<Var>,
    /// `[K, H, W]`.
    pub logits: Var,
}

/// `[h, w, c]` to `[(h/f)*(w/f), f*f*c]`, each row one `f x f` patch in row-major order.
pub fn merge_patches<T: Real>(tape: &mut Tape<'_, T>, x: Var, f: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 || s[0] % f != 0 || s[1] % f != 0 {
        return Err(Error::precondition(format!("cannot merge {s:?} by {f}")));
    }
    let (h, w, c) = (s[0] / f, s[1] / f, s[2]);
    let v = tape.reshape(x, &[h, f, w, f, c])?;
    let v = tape.permute(v, &[0, 2, 1, 3, 4])?;
    Ok(tape.reshape(v, &[h * w, f * f * c])?)
}

/// Inverse of [`merge_patches`]: `[h*w, f*f*c]` to `[h*f, w*f, c]`.
pub fn split_patches<T: Real>(tape: &mut Tape<'_, T>, x: Var, h: usize, w: usize, f: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 2 || s[0] != h * w || s[1] % (f * f) != 0 {
        return Err(Error::precondition(format!(
            "cannot split {s:?} into {h}x{w} patches of {f}"
        )));
    }
    let c = s[1] / (f * f);
    let v = tape.reshape(x, &[h, w, f, f, c])?;
    let v = tape.permute(v, &[0, 2, 1, 3, 4])?;
    Ok(tape.reshape(v, &[h * f, w * f, c])?)
}

/// Non-overlapping patch flattening plus a linear embedding: `[1,H,W]` to `[H/p, W/p, C]`.
pub fn patch_embed<T: Real>(tape: &mut Tape<'_, T>, p: &Bound, image: Var, patch: usize) -> Result<Var> {
    let s = tape.shape(image).to_vec();
    let (h, w) = match s.as_slice() {
        [1, h, w] | [h, w] => (*h, *w),
        _ => return Err(Error::precondition(format!("image must be [1,H,W], got {s:?}"))),
    };
    if h % patch != 0 || w % patch != 0 {
        return Err(Error::precondition(format!("{h}x{w} not divisible by patch {patch}")));
    }
    let grid = tape.reshape(image, &[h, w, 1])?;
    let flat = merge_patches(tape, grid, patch)?;
    let e = linear(tape, p, "embed", flat)?;
    let c = tape.shape(e)[1];
    Ok(tape.reshape(e, &[h / patch, w / patch, c])?)
}

/// 2x2 merge plus a linear map `4C -> 2C`.
pub fn downsample<T: Real>(tape: &mut Tape<'_, T>, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let merged = merge_patches(tape, x, 2)?;
    let y = linear(tape, p, prefix, merged)?;
    let c = tape.shape(y)[1];
    Ok(tape.reshape(y, &[s[0] / 2, s[1] / 2, c])?)
}

/// Linear map `C -> 4C'` plus a 2x2 split.
pub fn upsample<T: Real>(tape: &mut Tape<'_, T>, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 {
        return Err(Error::precondition(format!("upsample needs [h,w,c], got {s:?}")));
    }
    let flat = tape.reshape(x, &[s[0] * s[1], s[2]])?;
    let y = linear(tape, p, prefix, flat)?;
    split_patches(tape, y, s[0], s[1], 2)
}

fn blocks<T: Real>(
    tape: &mut Tape<'_, T>,
    p: &Bound,
    prefix: &str,
    depth: usize,
    mut x: Var,
    base: &BlockConfig,
    ctx: &ForwardCtx,
) -> Result<Var> {
    for b in 0..depth {
        let name = format!("{prefix}.blk{b}");
        let mut cfg = *base;
        if ctx.unit_modulation {
            cfg.modulation = Modulation::Unit;
        }
        x = block_on_tape(tape, x, p, &name, &cfg)?;
    }
    Ok(x)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network<T: Real = f32> {
    pub config: NetworkConfig,
    pub params: ParamStore<T>,
}

/// Builds a freshly initialised network for `cfg.variant`.
pub fn build_variant<T: Real>(cfg: &NetworkConfig) -> Result<Network<T>> {
    cfg.validate()?;
    let seed = cfg.seed;
    let c = cfg.embed_dim;
    let bc = cfg.block_config();
    let mut s = ParamStore::new();
    init_linear(&mut s, seed, "embed", cfg.patch_size * cfg.patch_size, c)?;
    for (stage, &depth) in cfg.stage_depths.iter().enumerate() {
        for b in 0..depth {
            init_block(&mut s, seed, &format!("enc{stage}.blk{b}"), cfg.width(stage), &bc)?;
        }
        if stage < MERGES {
            init_linear(
                &mut s,
                seed,
                &format!("down{stage}"),
                4 * cfg.width(stage),
                cfg.width(stage + 1),
            )?;
        }
    }
    for b in 0..cfg.bottleneck_depth {
        init_block(&mut s, seed, &format!("mid.blk{b}"), cfg.width(MERGES), &bc)?;
    }
    for (d, &depth) in cfg.decoder_depths.iter().enumerate() {
        let (cin, cout) = (cfg.width(MERGES - d), cfg.width(MERGES - d - 1));
        init_linear(&mut s, seed, &format!("dec{d}.up"), cin, 4 * cout)?;
        init_linear(&mut s, seed, &format!("dec{d}.reduce"), 2 * cout, cout)?;
        for b in 0..depth {
            init_block(&mut s, seed, &format!("dec{d}.blk{b}"), cout, &bc)?;
        }
    }
    init_linear(&mut s, seed, "head.expand", c, cfg.patch_size * cfg.patch_size * c)?;
    init_linear(&mut s, seed, "head.out", c, cfg.num_classes)?;
    Ok(Network {
        config: cfg.clone(),
        params: s,
    })
}

impl<T: Real> Network<T> {
    fn block_config_for(&self, ctx: &ForwardCtx, stage_tag: &str) -> BlockConfig {
        let mut bc = self.config.block_config();
        if self.config.variant == VariantKind::RandomMaskPpm {
            bc.ppm.mask = MaskRule::Random {
                seed: mix_seed(ctx.mask_seed, stage_tag),
            };
        }
        bc
    }

    /// Records the full forward pass of `image` (`[1,H,W]`) on `tape`.
    pub fn forward_traced(
        &self,
        tape: &mut Tape<'_, T>,
        p: &Bound,
        image: Var,
        ctx: &ForwardCtx,
    ) -> Result<ForwardTrace> {
        let cfg = &self.config;
        let s = tape.shape(image).to_vec();
        let (h, w) = match s.as_slice() {
            [1, h, w] | [h, w] => (*h, *w),
            _ => return Err(Error::precondition(format!("image must be [1,H,W], got {s:?}"))),
        };
        if (h, w) != cfg.input_size {
            return Err(Error::precondition(format!(
                "image {h}x{w} does not match configured {}x{}",
                cfg.input_size.0, cfg.input_size.1
            )));
        }
        let embedded = patch_embed(tape, p, image, cfg.patch_size)?;
        let mut x = embedded;
        let mut encoder = Vec::with_capacity(MERGES + 1);
        for (stage, &depth) in cfg.stage_depths.iter().enumerate() {
            let tag = format!("enc{stage}");
            let bc = self.block_config_for(ctx, &tag);
            x = blocks(tape, p, &tag, depth, x, &bc, ctx)?;
            encoder.push(x);
            if stage < MERGES {
                x = downsample(tape, p, &format!("down{stage}"), x)?;
            }
        }
        let bc = self.block_config_for(ctx, "mid");
        x = blocks(tape, p, "mid", cfg.bottleneck_depth, x, &bc, ctx)?;
        let bottleneck = x;
        let mut decoder = Vec::with_capacity(MERGES);
        for (d, &depth) in cfg.decoder_depths.iter().enumerate() {
            let skip_stage = MERGES - 1 - d;
            let up = upsample(tape, p, &format!("dec{d}.up"), x)?;
            let skip = if ctx.drop_skip == Some(skip_stage) {
                tape.constant(Tensor::zeros(tape.shape(encoder[skip_stage]).to_vec()))
            } else {
                encoder[skip_stage]
            };
            let both = tape.concat(&[up, skip], 2)?;
            let shape = tape.shape(both).to_vec();
            let flat = tape.reshape(both, &[shape[0] * shape[1], shape[2]])?;
            let reduced = linear(tape, p, &format!("dec{d}.reduce"), flat)?;
            let c = tape.shape(reduced)[1];
            x = tape.reshape(reduced, &[shape[0], shape[1], c])?;
            let tag = format!("dec{d}");
            let bc = self.block_config_for(ctx, &tag);
            x = blocks(tape, p, &tag, depth, x, &bc, ctx)?;
            decoder.push(x);
        }
        let (gh, gw) = cfg.grid(0);
        let flat = tape.reshape(x, &[gh * gw, cfg.embed_dim])?;
        let expanded = linear(tape, p, "head.expand", flat)?;
        let pixels = split_patches(tape, expanded, gh, gw, cfg.patch_size)?;
        let pixels = tape.reshape(pixels, &[h * w, cfg.embed_dim])?;
        let scores = linear(tape, p, "head.out", pixels)?;
        let scores = tape.reshape(scores, &[h, w, cfg.num_classes])?;
        let logits = tape.permute(scores, &[2, 0, 1])?;
        Ok(ForwardTrace {
            embedded,
            encoder,
            bottleneck,
            decoder,
            logits,
        })
    }

    /// Records the forward pass and returns the `[K, H, W]` logits.
    pub fn forward_on_tape(&self, tape: &mut Tape<'_, T>, p: &Bound, image: Var, ctx: &ForwardCtx) -> Result<Var> {
        Ok(self.forward_traced(tape, p, image, ctx)?.logits)
    }

    /// Logits for one image without recording gradients.
    pub fn forward(&self, image: &Tensor<T>, ctx: &ForwardCtx) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let x = tape.leaf(image);
        let y = self.forward_on_tape(&mut tape, &p, x, ctx)?;
        Ok(tape.to_tensor(y))
    }

    /// Per-pixel argmax labels.
    pub fn segment(&self, image: &Tensor<T>, ctx: &ForwardCtx) -> Result<Vec<u8>> {
        Ok(argmax_classes(&self.forward(image, ctx)?))
    }

    pub fn num_parameters(&self) -> usize {
        self.params.numel()
    }

    pub fn cast<U: Real>(&self) -> Network<U> {
        Network {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&encode_checkpoint(self))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        decode_checkpoint(&bytes)
    }
}

/// Argmax over the class axis of `[K, H, W]` logits.
pub fn argmax_classes<T: Real>(logits: &Tensor<T>) -> Vec<u8> {
    let s = logits.shape();
    let (k, n) = (s[0], s[1] * s[2]);
    let d = logits.data();
    (0..n)
        .map(|i| {
            let mut best = 0;
            for c in 1..k {
                if d[c * n + i] > d[best * n + i] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PCCK";

/// `PCCK`, `u32` manifest length, manifest text, then one `PCTN` record per parameter.
pub fn encode_checkpoint<T: Real>(net: &Network<T>) -> Vec<u8> {
    let mut kv = net.config.to_kv();
    kv.set("params", net.params.len());
    for (i, (name, t)) in net.params.iter().enumerate() {
        kv.set(&format!("param.{i}"), format!("{name} {}", join_list(t.shape())));
    }
    let text = kv.render();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    for (_, t) in net.params.iter() {
        out.extend_from_slice(&tio::encode(t));
    }
    out
}

pub fn decode_checkpoint<T: Real>(bytes: &[u8]) -> Result<Network<T>> {
    if bytes.len() < 8 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let text = bytes
        .get(8..8 + len)
        .ok_or_else(|| Error::Format("truncated checkpoint manifest".into()))?;
    let text = std::str::from_utf8(text).map_err(|e| Error::Format(format!("manifest is not utf-8: {e}")))?;
    let kv = KvText::parse(text)?;
    let mut cfg = NetworkConfig::default();
    cfg.apply_kv(&kv)?;
    let count: usize = kv.require("params")?;
    let mut rest = &bytes[8 + len..];
    let mut params = ParamStore::new();
    for i in 0..count {
        let entry: String = kv.require(&format!("param.{i}"))?;
        let (name, dims) = entry
            .split_once(' ')
            .ok_or_else(|| Error::Format(format!("bad param entry {entry:?}")))?;
        let shape: Vec<usize> = parse_list(dims)?;
        let t: Tensor<T> = tio::read_from(&mut rest)?;
        if t.shape() != shape.as_slice() {
            return Err(Error::Format(format!(
                "{name}: manifest shape {shape:?} but stored {:?}",
                t.shape()
            )));
        }
        params.insert(name, t)?;
    }
    if !rest.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes in checkpoint", rest.len())));
    }
    let reference: Network<T> = build_variant(&cfg)?;
    let expected: Vec<&str> = reference.params.names();
    if params.names() != expected {
        return Err(Error::Format(
            "parameter names do not match the stored configuration".into(),
        ));
    }
    Ok(Network { config: cfg, params })
}
