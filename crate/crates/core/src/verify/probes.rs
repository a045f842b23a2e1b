//! Training-based probes: convergence speed, loss smoothness, predictive
//! variance and data efficiency of one variant against another.

use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::report::ProbeReport;
use crate::data::{generate_phantom, Dataset, DatasetManifest, LesionPlan, Phantom, BACKGROUND};
use crate::error::{Error, Result};
use crate::network::{build_variant, ForwardCtx, Network, NetworkConfig, VariantKind};
use crate::params::mix_seed;
use crate::tensor::{Real, Tensor};
use crate::train::{batch_gradient, train_on, TrainConfig};

/// Training settings the probes use by default: a short cosine schedule
/// with a learning rate large enough to matter within a few epochs.
pub fn probe_train_config() -> TrainConfig {
    TrainConfig {
        lr0: 2e-3,
        lr_min: 1e-4,
        epochs: 8,
        ..TrainConfig::default()
    }
}

/// True when `wins` out of `total` seeds is a strict majority of at least two thirds.
pub fn seed_majority(wins: usize, total: usize) -> bool {
    total > 0 && 3 * wins >= 2 * total
}

/// Parameters every variant shares, i.e. everything outside the density,
/// fusion and convolutional-density branches.
pub fn is_trunk_param(name: &str) -> bool {
    !(name.contains(".crn.") || name.contains(".fuse.") || name.contains(".cnn."))
}

fn paired(variants: &[VariantKind]) -> Option<(VariantKind, VariantKind)> {
    let has = |v| variants.contains(&v);
    (has(VariantKind::FullPc) && has(VariantKind::PlainE2e)).then_some((VariantKind::FullPc, VariantKind::PlainE2e))
}

/// Epochs until mean validation Dice first reaches `dice_threshold`, per
/// variant and seed; `budget + 1` when it never does.
///
/// Each seed fixes the initialisation and the batch order, so all variants
/// start from the same trunk and see the same data.
pub fn convergence_experiment(
    variants: &[VariantKind],
    data: &Dataset,
    network: &NetworkConfig,
    train: &TrainConfig,
    dice_threshold: f64,
    target_epochs: usize,
    seeds: &[u64],
) -> Result<ProbeReport> {
    let started = Instant::now();
    let mut report = ProbeReport::new("convergence", seeds);
    let split = data.split();
    let budget = train.epochs;
    let mut wins = 0;
    for &seed in seeds {
        let mut epochs_to = Vec::new();
        for &variant in variants {
            let mut net = build_variant::<f32>(&NetworkConfig {
                variant,
                seed,
                ..network.clone()
            })?;
            let cfg = TrainConfig {
                seed,
                stop_at_dice: Some(dice_threshold),
                ..train.clone()
            };
            let out = train_on(&mut net, &data.samples, &split.train, &split.val, &cfg)?;
            for e in &out.history.epochs {
                report.measure(
                    Some(seed),
                    format!("{variant}.dice.e{}", e.epoch + 1),
                    e.mean_val_dice(),
                );
            }
            let n = out.history.epochs_to(dice_threshold).unwrap_or(budget + 1);
            report.measure(Some(seed), format!("{variant}.epochs_to"), n as f64);
            epochs_to.push((variant, n));
        }
        let find = |v| epochs_to.iter().find(|(w, _)| *w == v).map(|&(_, n)| n);
        if let Some((pc, e2e)) = paired(variants) {
            let (a, b) = (find(pc).unwrap_or(budget + 1), find(e2e).unwrap_or(budget + 1));
            report.measure(Some(seed), "epoch_ratio", a as f64 / b as f64);
            // The sentinel `budget + 1` never counts as reaching the threshold.
            if a <= budget && a <= target_epochs && a <= b {
                wins += 1;
            }
        }
    }
    if paired(variants).is_some() {
        let ratios = report.values("epoch_ratio");
        report.aggregate(
            "mean_epoch_ratio",
            ratios.iter().sum::<f64>() / ratios.len().max(1) as f64,
        );
        report.check(
            "full_pc_fast_and_not_slower",
            format!("dice >= {dice_threshold} within {target_epochs} epochs and <= plain_e2e, in >= 2/3 seeds"),
            wins as f64,
            seed_majority(wins, seeds.len()),
            seeds.len(),
        );
    }
    report.seconds = started.elapsed().as_secs_f64();
    Ok(report)
}

/// Gradient-difference ratios along a sequence of perturbations.
#[derive(Clone, Debug, PartialEq)]
pub struct LipschitzEstimate {
    pub ratios: Vec<f64>,
    pub max: f64,
}

fn restricted_norm(v: &[f64], free: &[bool]) -> f64 {
    v.iter()
        .zip(free)
        .filter(|(_, &f)| f)
        .map(|(x, _)| x * x)
        .sum::<f64>()
        .sqrt()
}

fn finite_grad(g: Vec<f64>) -> Result<Vec<f64>> {
    if g.iter().all(|v| v.is_finite()) {
        Ok(g)
    } else {
        Err(Error::NonFinite("gradient in smoothness probe".into()))
    }
}

/// Largest `||g(theta + r d) - g(theta)|| / r` over `n_pairs` unit directions `d`
/// supported on the `free` coordinates, where `g` is the gradient restricted
/// to those coordinates.
///
/// `start` seeds the first direction; each later direction is the previous
/// gradient difference, so the ratios climb towards the top curvature the
/// way power iteration does.
pub fn lipschitz_estimate(
    grad: &dyn Fn(&[f64]) -> Result<Vec<f64>>,
    theta: &[f64],
    free: &[bool],
    start: &[f64],
    n_pairs: usize,
    radius: f64,
) -> Result<LipschitzEstimate> {
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(Error::precondition(format!("radius must be positive, got {radius}")));
    }
    if n_pairs == 0 || theta.len() != free.len() || theta.len() != start.len() {
        return Err(Error::precondition("need at least one pair and matching lengths"));
    }
    let mask = |v: &[f64]| -> Vec<f64> { v.iter().zip(free).map(|(&x, &f)| if f { x } else { 0.0 }).collect() };
    let mut dir = mask(start);
    let g0 = finite_grad(grad(theta)?)?;
    let mut ratios = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let norm = restricted_norm(&dir, free);
        if !(norm > 0.0) {
            break;
        }
        let moved: Vec<f64> = theta.iter().zip(&dir).map(|(t, d)| t + radius * d / norm).collect();
        let g1 = finite_grad(grad(&moved)?)?;
        let diff = mask(&g1.iter().zip(&g0).map(|(a, b)| a - b).collect::<Vec<_>>());
        ratios.push(restricted_norm(&diff, free) / radius);
        dir = diff;
    }
    let max = ratios.iter().copied().fold(0.0, f64::max);
    Ok(LipschitzEstimate { ratios, max })
}

/// Smoothness of the training loss of two variants at matched initialisation.
///
/// Both networks are built from the same seed, so their shared trunk starts
/// identical. Perturbations and gradient differences live on that trunk
/// only, and the first direction is drawn per parameter name, so both
/// variants are probed along the same path start.
pub fn smoothness_probe(
    variants: &[VariantKind],
    batch: &[Phantom],
    network: &NetworkConfig,
    train: &TrainConfig,
    n_pairs: usize,
    radius: f64,
    seeds: &[u64],
) -> Result<ProbeReport> {
    let started = Instant::now();
    let mut report = ProbeReport::new("smoothness", seeds);
    if batch.is_empty() {
        return Err(Error::precondition("empty probe batch"));
    }
    let images: Vec<Tensor<f64>> = batch.iter().map(|p| p.image.cast()).collect();
    let mut wins = 0;
    for &seed in seeds {
        let mut estimates = Vec::new();
        for &variant in variants {
            let net = build_variant::<f64>(&NetworkConfig {
                variant,
                seed,
                ..network.clone()
            })?;
            let ctx = ForwardCtx {
                mask_seed: seed,
                ..ForwardCtx::default()
            };
            let mut free = Vec::new();
            let mut start = Vec::new();
            for (name, t) in net.params.iter() {
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, name));
                let trunk = is_trunk_param(name);
                for _ in 0..t.numel() {
                    free.push(trunk);
                    start.push(if trunk { rng.sample(StandardNormal) } else { 0.0 });
                }
            }
            let theta: Vec<f64> = net.params.flatten();
            let grad = |flat: &[f64]| -> Result<Vec<f64>> {
                let mut moved = net.clone();
                moved.params.set_flat(flat)?;
                let items: Vec<(&Tensor<f64>, &[u8], ForwardCtx)> = images
                    .iter()
                    .zip(batch)
                    .map(|(img, p)| (img, p.label.as_slice(), ctx))
                    .collect();
                Ok(batch_gradient(&moved, &items, train)?.1)
            };
            let est = lipschitz_estimate(&grad, &theta, &free, &start, n_pairs, radius)?;
            for (k, r) in est.ratios.iter().enumerate() {
                report.measure(Some(seed), format!("{variant}.ratio.{k}"), *r);
            }
            report.measure(Some(seed), format!("{variant}.lipschitz"), est.max);
            estimates.push((variant, est.max));
        }
        if let Some((pc, e2e)) = paired(variants) {
            let find = |v| estimates.iter().find(|(w, _)| *w == v).map_or(f64::NAN, |&(_, l)| l);
            let ratio = find(pc) / find(e2e);
            report.measure(Some(seed), "lipschitz_ratio", ratio);
            if ratio < 1.0 {
                wins += 1;
            }
        }
    }
    if paired(variants).is_some() {
        let ratios = report.values("lipschitz_ratio");
        report.aggregate(
            "mean_lipschitz_ratio",
            ratios.iter().sum::<f64>() / ratios.len().max(1) as f64,
        );
        report.check(
            "full_pc_smoother",
            "L(full_pc) / L(plain_e2e) < 1 in >= 2/3 seeds",
            wins as f64,
            seed_majority(wins, seeds.len()),
            seeds.len(),
        );
    }
    report.seconds = started.elapsed().as_secs_f64();
    Ok(report)
}

/// Bootstrap setup of [`bias_variance_probe`].
#[derive(Clone, Debug, PartialEq)]
pub struct BiasVarianceConfig {
    pub network: NetworkConfig,
    pub train: TrainConfig,
    /// Generator settings of the sample pool; its seed is mixed with each probe seed.
    pub manifest: DatasetManifest,
    /// Samples each bootstrap training set is drawn from, with replacement.
    pub pool_size: usize,
    pub val_size: usize,
    pub n_resamples: usize,
    pub probe_points: usize,
}

impl Default for BiasVarianceConfig {
    fn default() -> Self {
        Self {
            network: NetworkConfig::default(),
            train: TrainConfig {
                epochs: 3,
                ..probe_train_config()
            },
            manifest: DatasetManifest::default(),
            pool_size: 32,
            val_size: 4,
            n_resamples: 8,
            probe_points: 64,
        }
    }
}

/// Per-pixel class probabilities of `net` at `points` of `image`.
fn probabilities<T: Real>(
    net: &Network<T>,
    image: &Tensor<f32>,
    points: &[usize],
    ctx: &ForwardCtx,
) -> Result<Vec<Vec<f64>>> {
    let logits = net.forward(&image.cast::<T>(), ctx)?;
    let k = logits.shape()[0];
    let hw = logits.numel() / k;
    let data = logits.data();
    Ok(points
        .iter()
        .map(|&px| {
            let z: Vec<f64> = (0..k).map(|c| data[c * hw + px].as_f64()).collect();
            let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        })
        .collect())
}

/// Mean over points of the summed unbiased per-class variance across runs,
/// and of the squared distance between the mean prediction and the one-hot truth.
pub fn variance_and_bias(runs: &[Vec<Vec<f64>>], truth: &[u8]) -> Result<(f64, f64)> {
    let n = runs.len();
    if n < 2 {
        return Err(Error::precondition(format!(
            "variance needs at least two runs, got {n}"
        )));
    }
    let points = truth.len();
    let mut variance = 0.0;
    let mut bias2 = 0.0;
    for (i, &label) in truth.iter().enumerate() {
        let k = runs[0][i].len();
        for c in 0..k {
            // Shifted by the first run, so identical runs give exactly zero.
            let first = runs[0][i][c];
            let shift = runs.iter().map(|r| r[i][c] - first).sum::<f64>() / n as f64;
            let mean = first + shift;
            variance += runs.iter().map(|r| (r[i][c] - first - shift).powi(2)).sum::<f64>() / (n - 1) as f64;
            let target = if c == label as usize { 1.0 } else { 0.0 };
            bias2 += (mean - target).powi(2);
        }
    }
    Ok((variance / points as f64, bias2 / points as f64))
}

/// Predictive variance and squared bias of each variant across bootstrap
/// training sets, at fixed foreground pixels of a held-out phantom.
///
/// Per seed, every variant starts from the same initialisation and trains on
/// the same resamples. A resample whose training diverges is dropped for
/// that variant and counted.
pub fn bias_variance_probe(variants: &[VariantKind], cfg: &BiasVarianceConfig, seeds: &[u64]) -> Result<ProbeReport> {
    if cfg.n_resamples < 2 {
        return Err(Error::precondition(format!(
            "variance across {} resample(s) is undefined",
            cfg.n_resamples
        )));
    }
    if cfg.pool_size == 0 || cfg.val_size == 0 || cfg.probe_points == 0 {
        return Err(Error::precondition(
            "pool, validation set and probe points must be non-empty",
        ));
    }
    let started = Instant::now();
    let mut report = ProbeReport::new("bias_variance", seeds);
    let (h, w) = cfg.network.input_size;
    let mut wins = 0;
    for &seed in seeds {
        let manifest = DatasetManifest {
            n_samples: cfg.pool_size + cfg.val_size,
            height: h,
            width: w,
            seed: mix_seed(cfg.manifest.seed ^ seed, "pool"),
            ..cfg.manifest.clone()
        };
        let pool = Dataset::generate(&manifest)?;
        let val: Vec<usize> = (cfg.pool_size..pool.len()).collect();
        let probe = generate_phantom(
            mix_seed(seed, "probe"),
            h,
            w,
            manifest.noise_sigma,
            &LesionPlan::Random(manifest.lesions),
        )?;
        let foreground: Vec<usize> = (0..h * w).filter(|&i| probe.label[i] != BACKGROUND).collect();
        let mut pick = ChaCha8Rng::seed_from_u64(mix_seed(seed, "points"));
        let count = cfg.probe_points.min(foreground.len());
        let mut points: Vec<usize> = index::sample(&mut pick, foreground.len(), count)
            .iter()
            .map(|i| foreground[i])
            .collect();
        points.sort_unstable();
        let truth: Vec<u8> = points.iter().map(|&i| probe.label[i]).collect();
        let resamples: Vec<Vec<usize>> = (0..cfg.n_resamples)
            .map(|r| {
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, &format!("resample{r}")));
                (0..cfg.pool_size).map(|_| rng.random_range(0..cfg.pool_size)).collect()
            })
            .collect();
        let ctx = ForwardCtx {
            mask_seed: seed,
            ..ForwardCtx::default()
        };
        let train = TrainConfig {
            seed,
            checkpoint_dir: None,
            ..cfg.train.clone()
        };

        let mut variances = Vec::new();
        for &variant in variants {
            let init = build_variant::<f32>(&NetworkConfig {
                variant,
                seed,
                ..cfg.network.clone()
            })?;
            let mut runs = Vec::new();
            let mut excluded = 0usize;
            for resample in &resamples {
                let mut net = init.clone();
                match train_on(&mut net, &pool.samples, resample, &val, &train) {
                    Ok(_) => runs.push(probabilities(&net, &probe.image, &points, &ctx)?),
                    Err(Error::NonFinite(_)) => excluded += 1,
                    Err(e) => return Err(e),
                }
            }
            report.measure(Some(seed), format!("{variant}.excluded"), excluded as f64);
            let (variance, bias2) = if runs.len() >= 2 {
                variance_and_bias(&runs, &truth)?
            } else {
                (f64::NAN, f64::NAN)
            };
            report.measure(Some(seed), format!("{variant}.variance"), variance);
            report.measure(Some(seed), format!("{variant}.bias2"), bias2);
            variances.push((variant, variance));
        }
        if let Some((pc, e2e)) = paired(variants) {
            let find = |v| variances.iter().find(|(w, _)| *w == v).map_or(f64::NAN, |&(_, x)| x);
            let ratio = find(pc) / find(e2e);
            report.measure(Some(seed), "variance_ratio", ratio);
            if ratio < 1.0 {
                wins += 1;
            }
        }
    }
    for &variant in variants {
        let v = report.values(&format!("{variant}.variance"));
        report.aggregate(
            format!("{variant}.mean_variance"),
            v.iter().sum::<f64>() / v.len() as f64,
        );
    }
    if paired(variants).is_some() {
        report.check(
            "full_pc_lower_variance",
            "var(full_pc) < var(plain_e2e) in >= 2/3 seeds",
            wins as f64,
            seed_majority(wins, seeds.len()),
            seeds.len(),
        );
    }
    report.seconds = started.elapsed().as_secs_f64();
    Ok(report)
}

/// Best validation Dice after training on `fraction` of the training split,
/// relative to training on all of it.
///
/// The reduced run gets proportionally more epochs, so both runs take about
/// the same number of optimiser steps. The verdict is a soft check.
pub fn data_efficiency_probe(
    variant: VariantKind,
    data: &Dataset,
    network: &NetworkConfig,
    train: &TrainConfig,
    fraction: f64,
    min_ratio: f64,
    seed: u64,
) -> Result<ProbeReport> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::precondition(format!("fraction {fraction} outside (0, 1]")));
    }
    let started = Instant::now();
    let mut report = ProbeReport::new("data_efficiency", &[seed]);
    let split = data.split();
    let mut subset = split.train.clone();
    subset.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(seed, "subset")));
    subset.truncate(((split.train.len() as f64 * fraction).round() as usize).max(1));
    subset.sort_unstable();

    let batches = |n: usize| n.div_ceil(train.batch_size);
    let small_epochs = (train.epochs * batches(split.train.len())).div_ceil(batches(subset.len()));
    let net_cfg = NetworkConfig {
        variant,
        seed,
        ..network.clone()
    };
    let mut best = Vec::new();
    for (label, indices, epochs) in [("full", &split.train, train.epochs), ("subset", &subset, small_epochs)] {
        let mut net = build_variant::<f32>(&net_cfg)?;
        let cfg = TrainConfig {
            seed,
            epochs,
            ..train.clone()
        };
        let out = train_on(&mut net, &data.samples, indices, &split.val, &cfg)?;
        report.measure(Some(seed), format!("{label}.samples"), indices.len() as f64);
        report.measure(Some(seed), format!("{label}.epochs"), epochs as f64);
        report.measure(Some(seed), format!("{label}.best_dice"), out.history.best_dice());
        best.push(out.history.best_dice());
    }
    let ratio = best[1] / best[0];
    report.aggregate("dice_ratio", ratio);
    report.soft_check(
        format!("{variant}.subset_dice_ratio"),
        format!("dice({fraction}) / dice(1.0) >= {min_ratio}"),
        ratio,
        ratio >= min_ratio,
        1,
    );
    report.seconds = started.elapsed().as_secs_f64();
    Ok(report)
}
