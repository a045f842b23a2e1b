//! The predictive-corrective block.
//!
//! Two branches look at the layer-normalised token grid:
//!
//! * the symmetry branch compares every token with its 8 neighbours and its
//!   mirror across the vertical midline, and aggregates the tokens that look
//!   anomalous (cosine similarity below a threshold);
//! * the density branch gathers a dilated patch around each token and mixes it
//!   with softmax weights produced by a small MLP.
//!
//! A pointwise MLP fuses both outputs into the per-token, per-channel factor
//! that scales the scan state.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::params::{init_linear, linear, Bound, Init, ParamStore};
use crate::ssm::{ordered_layer, ScanOrder, SsmVars};
use crate::tensor::{BackwardRule, Real, Result, Tape, Tensor, TensorError, Var};

/// Norms below this make a cosine similarity collapse to 0.
pub const NORM_FLOOR: f64 = 1e-8;

/// A token grid `[H, W, C]` whose mirror axis is the vertical midline.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T: Real = f32> {
    values: Tensor<T>,
}

impl<T: Real> FeatureMap<T> {
    pub fn new(values: Tensor<T>) -> Result<Self> {
        if values.rank() != 3 {
            return Err(TensorError::InvalidArgument {
                op: "feature map",
                msg: format!("expected [H, W, C], got {:?}", values.shape()),
            });
        }
        Ok(Self { values })
    }

    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[2]
    }

    /// Column coordinate of the mirror axis (`W / 2`, between columns when `W` is even).
    pub fn midline(&self) -> f64 {
        self.width() as f64 / 2.0
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }

    pub fn token(&self, row: usize, col: usize) -> &[T] {
        let c = self.channels();
        let at = (row * self.width() + col) * c;
        &self.values.data()[at..at + c]
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.values
    }
}

/// Mirror of `(row, col)` across the vertical midline of a `height x width` grid.
pub fn symmetric_index(pos: (usize, usize), height: usize, width: usize) -> Result<(usize, usize)> {
    if pos.0 >= height || pos.1 >= width {
        return Err(TensorError::InvalidArgument {
            op: "symmetric_index",
            msg: format!("{pos:?} outside {height}x{width} grid"),
        });
    }
    Ok((pos.0, width - 1 - pos.1))
}

/// Cosine similarity clamped to `[-1, 1]`; 0 when either norm is below [`NORM_FLOOR`].
pub fn cosine_similarity<T: Real>(a: &[T], b: &[T]) -> T {
    cosine_parts(a, b).0
}

/// `(similarity, |a|, |b|, degenerate)`.
fn cosine_parts<T: Real>(a: &[T], b: &[T]) -> (T, T, T, bool) {
    let (mut dot, mut na, mut nb) = (T::zero(), T::zero(), T::zero());
    for (&x, &y) in a.iter().zip(b) {
        dot = dot + x * y;
        na = na + x * x;
        nb = nb + y * y;
    }
    let (na, nb) = (na.sqrt(), nb.sqrt());
    let floor = T::lit(NORM_FLOOR);
    if na < floor || nb < floor {
        return (T::zero(), na, nb, true);
    }
    let s = (dot / (na * nb)).max(-T::one()).min(T::one());
    (s, na, nb, false)
}

/// How the symmetry branch decides which comparison pairs count as anomalous.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum MaskRule {
    /// `similarity < theta`.
    #[default]
    Threshold,
    /// Independent fair coin per pair, drawn from `seed`.
    Random { seed: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PpmConfig {
    pub theta: f64,
    pub neighborhood_radius: usize,
    pub epsilon: f64,
    pub mask: MaskRule,
}

impl Default for PpmConfig {
    fn default() -> Self {
        Self {
            theta: 0.7,
            neighborhood_radius: 1,
            epsilon: 1e-6,
            mask: MaskRule::Threshold,
        }
    }
}

impl PpmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(-1.0..=1.0).contains(&self.theta) || !(self.epsilon > 0.0) {
            return Err(TensorError::InvalidArgument {
                op: "ppm config",
                msg: format!(
                    "theta {} must lie in [-1, 1] and epsilon {} be positive",
                    self.theta, self.epsilon
                ),
            });
        }
        Ok(())
    }
}

/// Comparison targets of every token: the in-grid window minus the token
/// itself, plus its mirror. Flat row-major indices, deduplicated.
pub fn comparison_targets(height: usize, width: usize, radius: usize) -> Vec<Vec<usize>> {
    let r = radius as isize;
    let mut out = Vec::with_capacity(height * width);
    for row in 0..height {
        for col in 0..width {
            let mut t = Vec::with_capacity((2 * radius + 1).pow(2));
            for dy in -r..=r {
                for dx in -r..=r {
                    let (rr, cc) = (row as isize + dy, col as isize + dx);
                    if (dy, dx) == (0, 0) || rr < 0 || cc < 0 || rr >= height as isize || cc >= width as isize {
                        continue;
                    }
                    t.push(rr as usize * width + cc as usize);
                }
            }
            let mirror = row * width + (width - 1 - col);
            if !t.contains(&mirror) {
                t.push(mirror);
            }
            out.push(t);
        }
    }
    out
}

#[derive(Clone, Copy)]
struct Pair<T> {
    target: usize,
    sim: T,
    weight: T,
    degenerate: bool,
}

/// Masked pairs per token, with the aggregation denominators.
struct PpmTrace<T> {
    pairs: Vec<Vec<Pair<T>>>,
    norms: Vec<T>,
}

fn ppm_trace<T: Real>(x: &[T], h: usize, w: usize, c: usize, cfg: &PpmConfig) -> PpmTrace<T> {
    let targets = comparison_targets(h, w, cfg.neighborhood_radius);
    let mut coin = match cfg.mask {
        MaskRule::Random { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        MaskRule::Threshold => None,
    };
    let theta = T::lit(cfg.theta);
    let tok = |i: usize| &x[i * c..(i + 1) * c];
    let mut norms = vec![T::zero(); h * w];
    let mut pairs = Vec::with_capacity(h * w);
    for (i, ts) in targets.iter().enumerate() {
        let mut kept = Vec::new();
        for &j in ts {
            let (sim, ni, _, degenerate) = cosine_parts(tok(i), tok(j));
            norms[i] = ni;
            let on = match coin.as_mut() {
                Some(r) => r.random_bool(0.5),
                None => sim < theta,
            };
            if on {
                kept.push(Pair {
                    target: j,
                    sim,
                    weight: T::one() - sim,
                    degenerate,
                });
            }
        }
        pairs.push(kept);
    }
    PpmTrace { pairs, norms }
}

/// Every `(token, target)` pair the mask selects, as flat indices.
pub fn masked_pairs<T: Real>(f: &FeatureMap<T>, cfg: &PpmConfig) -> Result<Vec<(usize, usize)>> {
    cfg.validate()?;
    let trace = ppm_trace(f.values.data(), f.height(), f.width(), f.channels(), cfg);
    Ok(trace
        .pairs
        .iter()
        .enumerate()
        .flat_map(|(i, ps)| ps.iter().map(move |p| (i, p.target)))
        .collect())
}

struct PpmRule<T> {
    channels: usize,
    epsilon: T,
    trace: PpmTrace<T>,
}

impl<T: Real> BackwardRule<T> for PpmRule<T> {
    fn name(&self) -> &'static str {
        "symmetric_mask_aggregation"
    }

    fn backward(&self, inputs: &[&[T]], output: &[T], g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        if !needs[0] {
            return vec![None];
        }
        let (x, c) = (inputs[0], self.channels);
        let mut gx = vec![T::zero(); x.len()];
        for (i, pairs) in self.trace.pairs.iter().enumerate() {
            if pairs.is_empty() {
                continue;
            }
            let gi = &g[i * c..(i + 1) * c];
            let zi = &output[i * c..(i + 1) * c];
            let total = pairs.iter().fold(T::zero(), |acc, p| acc + p.weight);
            let inv = T::one() / (total + self.epsilon);
            for p in pairs {
                let j = p.target;
                // d z_i / d w_ij = (x_j - z_i) / (W_i + eps)
                let mut gw = T::zero();
                for k in 0..c {
                    gw = gw + gi[k] * (x[j * c + k] - zi[k]);
                    gx[j * c + k] = gx[j * c + k] + p.weight * inv * gi[k];
                }
                let gs = -(gw * inv);
                if p.degenerate || gs == T::zero() {
                    continue;
                }
                let (ni, nj) = (self.trace.norms[i], self.trace.norms[j]);
                let cross = gs / (ni * nj);
                let (si, sj) = (gs * p.sim / (ni * ni), gs * p.sim / (nj * nj));
                for k in 0..c {
                    let (xi, xj) = (x[i * c + k], x[j * c + k]);
                    gx[i * c + k] = gx[i * c + k] + cross * xj - si * xi;
                    gx[j * c + k] = gx[j * c + k] + cross * xi - sj * xj;
                }
            }
        }
        vec![Some(gx)]
    }
}

/// Symmetry branch over a `[H, W, C]` grid recorded on `tape`.
pub fn ppm_on_tape<T: Real>(tape: &mut Tape<'_, T>, x: Var, cfg: &PpmConfig) -> Result<Var> {
    cfg.validate()?;
    let shape = tape.shape(x).to_vec();
    if shape.len() != 3 {
        return Err(TensorError::InvalidArgument {
            op: "ppm",
            msg: format!("expected [H, W, C], got {shape:?}"),
        });
    }
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let xs = tape.value(x);
    let trace = ppm_trace(xs, h, w, c, cfg);
    let eps = T::lit(cfg.epsilon);
    let mut out = vec![T::zero(); h * w * c];
    for (i, pairs) in trace.pairs.iter().enumerate() {
        if pairs.is_empty() {
            continue;
        }
        let total = pairs.iter().fold(T::zero(), |acc, p| acc + p.weight);
        let dst = &mut out[i * c..(i + 1) * c];
        for p in pairs {
            let src = &xs[p.target * c..(p.target + 1) * c];
            dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + p.weight * s);
        }
        let inv = T::one() / (total + eps);
        dst.iter_mut().for_each(|d| *d = *d * inv);
    }
    let rule = PpmRule {
        channels: c,
        epsilon: eps,
        trace,
    };
    tape.custom(&[x], out, shape, Box::new(rule))
}

/// Symmetry-branch output `z_mask` for a feature map.
pub fn ppm_forward<T: Real>(f: &FeatureMap<T>, cfg: &PpmConfig) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let x = tape.leaf(&f.values);
    let z = ppm_on_tape(&mut tape, x, cfg)?;
    Ok(tape.to_tensor(z))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CrnConfig {
    pub kernel_size: usize,
    pub dilation: usize,
    pub mlp_hidden: usize,
}

impl Default for CrnConfig {
    fn default() -> Self {
        Self {
            kernel_size: 3,
            dilation: 2,
            mlp_hidden: 18,
        }
    }
}

impl CrnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel_size % 2 == 0 || self.dilation == 0 || self.mlp_hidden == 0 {
            return Err(TensorError::InvalidArgument {
                op: "crn config",
                msg: format!("{self:?}: kernel must be odd, dilation and hidden width positive"),
            });
        }
        Ok(())
    }

    pub fn window(&self) -> usize {
        self.kernel_size * self.kernel_size
    }
}

/// Registers the density branch under `prefix` (`mlp1`, `mlp2`, `out`).
pub fn init_crn<T: Real>(
    store: &mut ParamStore<T>,
    seed: u64,
    prefix: &str,
    channels: usize,
    cfg: &CrnConfig,
) -> Result<()> {
    cfg.validate()?;
    let k = cfg.window();
    init_linear(store, seed, &format!("{prefix}.mlp1"), k * channels, cfg.mlp_hidden)?;
    init_linear(store, seed, &format!("{prefix}.mlp2"), cfg.mlp_hidden, k)?;
    init_linear(store, seed, &format!("{prefix}.out"), channels, channels)
}

/// Unfolded patches `[HW, k*k, C]` and their softmax weights `[HW, k*k]`.
pub fn crn_weights<T: Real>(
    tape: &mut Tape<'_, T>,
    x: Var,
    p: &Bound,
    prefix: &str,
    cfg: &CrnConfig,
) -> Result<(Var, Var)> {
    cfg.validate()?;
    let shape = tape.shape(x).to_vec();
    let patches = tape.unfold(x, cfg.kernel_size, cfg.dilation)?;
    let k = cfg.window();
    let flat = tape.reshape(patches, &[shape[0] * shape[1], k * shape[2]])?;
    let hidden = linear(tape, p, &format!("{prefix}.mlp1"), flat)?;
    let act = tape.gelu(hidden)?;
    let logits = linear(tape, p, &format!("{prefix}.mlp2"), act)?;
    let beta = tape.softmax(logits, 1)?;
    Ok((patches, beta))
}

/// Density branch: softmax-weighted dilated patch sum, then a linear map.
pub fn crn_on_tape<T: Real>(tape: &mut Tape<'_, T>, x: Var, p: &Bound, prefix: &str, cfg: &CrnConfig) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let (patches, beta) = crn_weights(tape, x, p, prefix, cfg)?;
    let pooled = tape.patch_sum(beta, patches)?;
    let out = linear(tape, p, &format!("{prefix}.out"), pooled)?;
    tape.reshape(out, &shape)
}

/// Density-branch output `z_density` for a feature map and stored weights.
pub fn crn_forward<T: Real>(
    f: &FeatureMap<T>,
    cfg: &CrnConfig,
    store: &ParamStore<T>,
    prefix: &str,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let p = store.bind_frozen(&mut tape);
    let x = tape.leaf(&f.values);
    let z = crn_on_tape(&mut tape, x, &p, prefix, cfg)?;
    Ok(tape.to_tensor(z))
}

/// Registers the convolutional replacement of the density branch.
pub fn init_cnn_density<T: Real>(store: &mut ParamStore<T>, seed: u64, prefix: &str, channels: usize) -> Result<()> {
    store.init(
        seed,
        &format!("{prefix}.w"),
        &[channels, channels, 3, 3],
        Init::FanIn(9 * channels),
    )?;
    store.init(seed, &format!("{prefix}.b"), &[channels], Init::Zeros)
}

/// Plain 3x3 "same" convolution of a `[H, W, C]` grid.
pub fn cnn_density_on_tape<T: Real>(tape: &mut Tape<'_, T>, x: Var, p: &Bound, prefix: &str) -> Result<Var> {
    let chw = tape.permute(x, &[2, 0, 1])?;
    let conv = tape.conv2d(chw, p.var(&format!("{prefix}.w"))?, 1, 1)?;
    let hwc = tape.permute(conv, &[1, 2, 0])?;
    tape.add(hwc, p.var(&format!("{prefix}.b"))?)
}

/// Registers the fusion MLP `2C -> 2C -> C`.
///
/// The output bias starts at 1 so a fresh block scales its state by roughly 1.
pub fn init_fusion<T: Real>(store: &mut ParamStore<T>, seed: u64, prefix: &str, channels: usize) -> Result<()> {
    init_linear(store, seed, &format!("{prefix}.l1"), 2 * channels, 2 * channels)?;
    store.init(
        seed,
        &format!("{prefix}.l2.w"),
        &[2 * channels, channels],
        Init::FanIn(2 * channels),
    )?;
    store.init(seed, &format!("{prefix}.l2.b"), &[channels], Init::Const(1.0))
}

/// Pointwise fusion of `[H, W, C]` mask and density maps into the modulation factor.
pub fn fuse_on_tape<T: Real>(tape: &mut Tape<'_, T>, mask: Var, density: Var, p: &Bound, prefix: &str) -> Result<Var> {
    let shape = tape.shape(mask).to_vec();
    if tape.shape(density) != shape.as_slice() || shape.len() != 3 {
        return Err(TensorError::ShapeMismatch {
            op: "fuse",
            lhs: shape,
            rhs: tape.shape(density).to_vec(),
        });
    }
    let both = tape.concat(&[mask, density], 2)?;
    let flat = tape.reshape(both, &[shape[0] * shape[1], 2 * shape[2]])?;
    let hidden = linear(tape, p, &format!("{prefix}.l1"), flat)?;
    let act = tape.gelu(hidden)?;
    let out = linear(tape, p, &format!("{prefix}.l2"), act)?;
    tape.reshape(out, &shape)
}

/// Which branches feed the modulation factor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Modulation {
    /// Symmetry and density branches.
    #[default]
    Both,
    /// Density branch only; the symmetry input to the fusion is zero.
    DensityOnly,
    /// Symmetry branch only; the density input to the fusion is zero.
    MaskOnly,
    /// Symmetry branch plus a 3x3 convolution in place of the density branch.
    ConvDensity,
    /// No modulation: the scan state is used as is.
    Unit,
}

impl Modulation {
    fn uses_crn(self) -> bool {
        matches!(self, Modulation::Both | Modulation::DensityOnly | Modulation::MaskOnly)
    }

    fn uses_fusion(self) -> bool {
        self != Modulation::Unit
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockConfig {
    pub state_dim: usize,
    pub order: ScanOrder,
    pub modulation: Modulation,
    pub ppm: PpmConfig,
    pub crn: CrnConfig,
    pub ln_eps: f64,
}

impl Default for BlockConfig {
    fn default() -> Self {
        Self {
            state_dim: 8,
            order: ScanOrder::Bidirectional,
            modulation: Modulation::Both,
            ppm: PpmConfig::default(),
            crn: CrnConfig::default(),
            ln_eps: 1e-5,
        }
    }
}

/// Registers every parameter of one block under `prefix`.
pub fn init_block<T: Real>(
    store: &mut ParamStore<T>,
    seed: u64,
    prefix: &str,
    channels: usize,
    cfg: &BlockConfig,
) -> Result<()> {
    let (c, n) = (channels, cfg.state_dim);
    store.init(seed, &format!("{prefix}.ln.gamma"), &[c], Init::Const(1.0))?;
    store.init(seed, &format!("{prefix}.ln.beta"), &[c], Init::Zeros)?;
    store.init(seed, &format!("{prefix}.ssm.a_log"), &[n], Init::LogRamp)?;
    init_linear(store, seed, &format!("{prefix}.ssm.step"), c, 1)?;
    init_linear(store, seed, &format!("{prefix}.ssm.input"), c, n)?;
    init_linear(store, seed, &format!("{prefix}.ssm.readout"), c, n)?;
    store.init(seed, &format!("{prefix}.ssm.skip"), &[c], Init::Const(1.0))?;
    init_linear(store, seed, &format!("{prefix}.proj"), c, c)?;
    if cfg.modulation.uses_crn() {
        init_crn(store, seed, &format!("{prefix}.crn"), c, &cfg.crn)?;
    }
    if cfg.modulation == Modulation::ConvDensity {
        init_cnn_density(store, seed, &format!("{prefix}.cnn"), c)?;
    }
    if cfg.modulation.uses_fusion() {
        init_fusion(store, seed, &format!("{prefix}.fuse"), c)?;
    }
    Ok(())
}

/// Tape handles of a block's scan weights; the transition is `-exp(a_log)`.
pub fn ssm_vars<T: Real>(tape: &mut Tape<'_, T>, p: &Bound, prefix: &str) -> Result<SsmVars> {
    let v = |name: &str| p.var(&format!("{prefix}.ssm.{name}"));
    let rates = tape.exp(v("a_log")?)?;
    let transition = tape.neg(rates)?;
    Ok(SsmVars {
        transition,
        step_weight: v("step.w")?,
        step_bias: v("step.b")?,
        input_weight: v("input.w")?,
        input_bias: v("input.b")?,
        readout_weight: v("readout.w")?,
        readout_bias: v("readout.b")?,
        skip: v("skip")?,
    })
}

/// Modulation factor `[H, W, C]` from the normalised grid, or `None` for [`Modulation::Unit`].
pub fn modulation_on_tape<T: Real>(
    tape: &mut Tape<'_, T>,
    normed: Var,
    p: &Bound,
    prefix: &str,
    cfg: &BlockConfig,
) -> Result<Option<Var>> {
    let shape = tape.shape(normed).to_vec();
    let zeros = |tape: &mut Tape<'_, T>| tape.constant(Tensor::zeros(shape.clone()));
    let (mask, density) = match cfg.modulation {
        Modulation::Unit => return Ok(None),
        Modulation::Both => (
            ppm_on_tape(tape, normed, &cfg.ppm)?,
            crn_on_tape(tape, normed, p, &format!("{prefix}.crn"), &cfg.crn)?,
        ),
        Modulation::DensityOnly => {
            let d = crn_on_tape(tape, normed, p, &format!("{prefix}.crn"), &cfg.crn)?;
            (zeros(tape), d)
        }
        Modulation::MaskOnly => {
            let m = ppm_on_tape(tape, normed, &cfg.ppm)?;
            (m, zeros(tape))
        }
        Modulation::ConvDensity => (
            ppm_on_tape(tape, normed, &cfg.ppm)?,
            cnn_density_on_tape(tape, normed, p, &format!("{prefix}.cnn"))?,
        ),
    };
    fuse_on_tape(tape, mask, density, p, &format!("{prefix}.fuse")).map(Some)
}

/// One block over a `[H, W, C]` grid: norm, modulation, scan, projection, residual.
pub fn block_on_tape<T: Real>(
    tape: &mut Tape<'_, T>,
    x: Var,
    p: &Bound,
    prefix: &str,
    cfg: &BlockConfig,
) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 3 {
        return Err(TensorError::InvalidArgument {
            op: "block",
            msg: format!("expected [H, W, C], got {shape:?}"),
        });
    }
    let (l, c) = (shape[0] * shape[1], shape[2]);
    let normed = tape.layer_norm(
        x,
        p.var(&format!("{prefix}.ln.gamma"))?,
        p.var(&format!("{prefix}.ln.beta"))?,
        T::lit(cfg.ln_eps),
    )?;
    let z = modulation_on_tape(tape, normed, p, prefix, cfg)?;
    let tokens = tape.reshape(normed, &[l, c])?;
    let z = z.map(|z| tape.reshape(z, &[l, c])).transpose()?;
    let w = ssm_vars(tape, p, prefix)?;
    let y = ordered_layer(tape, tokens, &w, z, cfg.order)?;
    let proj = linear(tape, p, &format!("{prefix}.proj"), y)?;
    let proj = tape.reshape(proj, &shape)?;
    tape.add(x, proj)
}

/// Runs one block with stored weights (no gradients).
pub fn pcmamba_block_forward<T: Real>(
    f: &FeatureMap<T>,
    store: &ParamStore<T>,
    prefix: &str,
    cfg: &BlockConfig,
) -> Result<FeatureMap<T>> {
    let mut tape = Tape::new();
    let p = store.bind_frozen(&mut tape);
    let x = tape.leaf(&f.values);
    let y = block_on_tape(&mut tape, x, &p, prefix, cfg)?;
    FeatureMap::new(tape.to_tensor(y))
}

#[cfg(test)]
mod tests;
