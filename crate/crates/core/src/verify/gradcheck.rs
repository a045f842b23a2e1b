//! Central finite differences against tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::report::ProbeReport;
use crate::network::{build_variant, ForwardCtx, NetworkConfig, VariantKind};
use crate::params::{init_linear, Bound, ParamStore};
use crate::pcblock::{
    block_on_tape, cnn_density_on_tape, comparison_targets, cosine_similarity, crn_on_tape, fuse_on_tape, init_block,
    init_cnn_density, init_crn, init_fusion, ppm_on_tape, BlockConfig, CrnConfig, Modulation, PpmConfig,
};
use crate::ssm::{ordered_layer, scan_op, ScanInputs, ScanOrder, SsmVars};
use crate::tensor::{Real, Result, Tape, Tensor, TensorError, UnaryKind, Var};
use crate::train::seg_loss;

/// Builds a scalar loss from the recorded inputs.
pub type LossBuilder<T> = dyn Fn(&mut Tape<'_, T>, &[Var]) -> Result<Var> + Send + Sync;

/// Reverse-mode gradient of a scalar function with respect to each input.
pub fn tape_gradients<T: Real>(inputs: &[Tensor<T>], f: &LossBuilder<T>) -> Result<Vec<Vec<f64>>> {
    let leaves: Vec<Tensor<T>> = inputs.iter().map(|t| t.clone().with_requires_grad(true)).collect();
    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.leaf(t)).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| match tape.grad(v) {
            Some(g) => g.iter().map(|x| x.as_f64()).collect(),
            None => vec![0.0; t.numel()],
        })
        .collect())
}

/// Central differences of a scalar function with respect to each input.
pub fn numeric_gradients<T: Real>(inputs: &[Tensor<T>], f: &LossBuilder<T>, eps: f64) -> Result<Vec<Vec<f64>>> {
    let eval = |ts: &[Tensor<T>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ts.iter().map(|t| tape.leaf(t)).collect();
        let l = f(&mut tape, &vars)?;
        Ok(tape.value(l)[0].as_f64())
    };
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut numeric = Vec::with_capacity(inputs[i].numel());
        for j in 0..inputs[i].numel() {
            let x = inputs[i].data()[j];
            // Difference the representable points actually evaluated.
            let hi = T::lit(x.as_f64() + eps);
            let lo = T::lit(x.as_f64() - eps);
            work[i].data_mut()[j] = hi;
            let fp = eval(&work)?;
            work[i].data_mut()[j] = lo;
            let fm = eval(&work)?;
            work[i].data_mut()[j] = x;
            numeric.push((fp - fm) / (hi.as_f64() - lo.as_f64()));
        }
        out.push(numeric);
    }
    Ok(out)
}

/// Tape gradients and central differences of a scalar function, per input.
pub fn central_differences<T: Real>(
    inputs: &[Tensor<T>],
    f: &LossBuilder<T>,
    eps: f64,
) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    let analytic = tape_gradients(inputs, f)?;
    let numeric = numeric_gradients(inputs, f, eps)?;
    Ok(analytic.into_iter().zip(numeric).collect())
}

/// `max |a - n| / max(|a|, |n|)`, with a tiny floor on the scale.
pub fn normwise_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    let scale = analytic.iter().chain(numeric).map(|x| x.abs()).fold(1e-12, f64::max);
    diff / scale
}

/// A named differentiable function and the point to check it at.
pub struct GradCase<T: Real> {
    pub name: String,
    pub inputs: Vec<Tensor<T>>,
    pub build: Box<LossBuilder<T>>,
}

/// Numeric precision profile of a suite.
///
/// Differences are always taken in `f64`; `tol` is the accepted normwise
/// error of the tape gradients of the precision under test.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradProfile {
    pub eps: f64,
    pub tol: f64,
}

impl GradProfile {
    pub const F64: GradProfile = GradProfile { eps: 1e-5, tol: 1e-5 };
    pub const F32: GradProfile = GradProfile { eps: 1e-5, tol: 1e-3 };
}

/// Checks every case against its own central differences.
pub fn grad_check(probe: &str, cases: &[GradCase<f64>], profile: GradProfile) -> crate::error::Result<ProbeReport> {
    run_checks(probe, cases, None, profile)
}

/// Checks the tape gradients of `cases` against central differences of
/// `reference`, the same functions in `f64`, evaluated at the same points.
pub fn grad_check_against<T: Real>(
    probe: &str,
    cases: &[GradCase<T>],
    reference: &[GradCase<f64>],
    profile: GradProfile,
) -> crate::error::Result<ProbeReport> {
    if cases.len() != reference.len() || cases.iter().zip(reference).any(|(a, b)| a.name != b.name) {
        return Err(crate::error::Error::precondition("cases and reference do not line up"));
    }
    run_checks(probe, cases, Some(reference), profile)
}

fn non_finite(name: &str) -> impl Fn(TensorError) -> crate::error::Error + '_ {
    move |e| match e {
        TensorError::NonFinite(op) => crate::error::Error::NonFinite(format!("{op} in {name}")),
        other => other.into(),
    }
}

fn run_checks<T: Real>(
    probe: &str,
    cases: &[GradCase<T>],
    reference: Option<&[GradCase<f64>]>,
    profile: GradProfile,
) -> crate::error::Result<ProbeReport> {
    let started = std::time::Instant::now();
    let mut report = ProbeReport::new(probe, &[]);
    let mut worst = 0.0f64;
    for (i, case) in cases.iter().enumerate() {
        let analytic = tape_gradients(&case.inputs, &*case.build).map_err(non_finite(&case.name))?;
        let numeric = match reference {
            Some(reference) => {
                let up: Vec<Tensor<f64>> = case.inputs.iter().map(|t| t.cast()).collect();
                numeric_gradients(&up, &*reference[i].build, profile.eps)
            }
            None => numeric_gradients(&case.inputs, &*case.build, profile.eps),
        }
        .map_err(non_finite(&case.name))?;
        let pairs: Vec<(Vec<f64>, Vec<f64>)> = analytic.into_iter().zip(numeric).collect();
        let mut case_worst = 0.0f64;
        for (a, n) in &pairs {
            if a.iter().chain(n).any(|v| !v.is_finite()) {
                return Err(crate::error::Error::NonFinite(format!("gradient of {}", case.name)));
            }
            case_worst = case_worst.max(normwise_error(a, n));
        }
        report.measure(None, format!("{}.rel_err", case.name), case_worst);
        report.check(
            &case.name,
            format!("rel err <= {:e} (eps {:e})", profile.tol, profile.eps),
            case_worst,
            case_worst <= profile.tol,
            1,
        );
        worst = worst.max(case_worst);
    }
    report.aggregate("max_rel_err", worst);
    report.aggregate("cases", cases.len() as f64);
    report.seconds = started.elapsed().as_secs_f64();
    Ok(report)
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform<T: Real>(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<T> {
    Tensor::<f64>::uniform(shape.to_vec(), lo, hi, &mut rng(seed)).cast()
}

/// Values bounded away from zero, so kinks at the origin stay out of reach of the stencil.
fn away_from_zero<T: Real>(shape: &[usize], seed: u64) -> Tensor<T> {
    let mut r = rng(seed);
    Tensor::<f64>::from_fn(shape.to_vec(), |_| {
        let v = r.random_range(0.2..1.5);
        if r.random_bool(0.5) {
            v
        } else {
            -v
        }
    })
    .cast()
}

/// Contracts `out` with fixed pseudo-random weights; a plain sum would hide
/// errors in outputs that always add up to a constant.
pub fn weighted_sum<T: Real>(tape: &mut Tape<'_, T>, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    let w = tape.constant(uniform(&shape, -1.0, 1.0, seed));
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

fn case<T: Real>(
    name: &str,
    inputs: Vec<Tensor<T>>,
    build: impl Fn(&mut Tape<'_, T>, &[Var]) -> Result<Var> + Send + Sync + 'static,
) -> GradCase<T> {
    GradCase {
        name: name.to_string(),
        inputs,
        build: Box::new(build),
    }
}

/// A case whose inputs are `x` followed by every tensor of `store`.
fn store_case<T: Real>(
    name: &str,
    x: Tensor<T>,
    store: ParamStore<T>,
    f: impl Fn(&mut Tape<'_, T>, Var, &Bound) -> Result<Var> + Send + Sync + 'static,
) -> GradCase<T> {
    let names: Vec<String> = store.names().into_iter().map(String::from).collect();
    let mut inputs = vec![x];
    inputs.extend(store.iter().map(|(_, t)| t.clone()));
    case(name, inputs, move |t, v| {
        let p = Bound::from_pairs(names.iter().cloned().zip(v[1..].iter().copied()));
        let out = f(t, v[0], &p)?;
        weighted_sum(t, out, 99)
    })
}

/// Threshold halfway across the widest gap between observed similarities,
/// so no comparison sits near the discontinuity of the mask.
fn safe_theta<T: Real>(x: &Tensor<T>, radius: usize) -> f64 {
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut sims: Vec<f64> = Vec::new();
    for (i, targets) in comparison_targets(h, w, radius).iter().enumerate() {
        for &j in targets {
            sims.push(cosine_similarity(&x.data()[i * c..(i + 1) * c], &x.data()[j * c..(j + 1) * c]).as_f64());
        }
    }
    sims.sort_by(f64::total_cmp);
    let mid = sims.len() / 2;
    let lo = sims.len() / 4;
    let hi = (3 * sims.len() / 4).max(lo + 1).min(sims.len() - 1);
    let k = (lo..hi)
        .max_by(|&a, &b| (sims[a + 1] - sims[a]).total_cmp(&(sims[b + 1] - sims[b])))
        .unwrap_or(mid);
    0.5 * (sims[k] + sims[k + 1])
}

/// Every learnable operation of the stack, at small sizes.
pub fn operation_cases<T: Real>() -> Vec<GradCase<T>> {
    let mut cases = Vec::new();

    cases.push(case(
        "linear",
        vec![
            uniform(&[5, 4], -1.0, 1.0, 1),
            uniform(&[4, 3], -1.0, 1.0, 2),
            uniform(&[3], -1.0, 1.0, 3),
        ],
        |t, v| {
            let y = t.linear(v[0], v[1], Some(v[2]))?;
            weighted_sum(t, y, 4)
        },
    ));
    cases.push(case(
        "matmul",
        vec![uniform(&[3, 4], -1.0, 1.0, 5), uniform(&[4, 2], -1.0, 1.0, 6)],
        |t, v| {
            let y = t.matmul(v[0], v[1])?;
            weighted_sum(t, y, 7)
        },
    ));
    for (i, kind) in [
        UnaryKind::Neg,
        UnaryKind::Exp,
        UnaryKind::Tanh,
        UnaryKind::Sigmoid,
        UnaryKind::Softplus,
        UnaryKind::Gelu,
        UnaryKind::Square,
        UnaryKind::Relu,
    ]
    .into_iter()
    .enumerate()
    {
        cases.push(case(
            &format!("unary.{kind:?}").to_lowercase(),
            vec![away_from_zero(&[7], 10 + i as u64)],
            move |t, v| {
                let y = t.unary(kind, v[0])?;
                weighted_sum(t, y, 20)
            },
        ));
    }
    for (i, kind) in [UnaryKind::Log, UnaryKind::Sqrt].into_iter().enumerate() {
        cases.push(case(
            &format!("unary.{kind:?}").to_lowercase(),
            vec![uniform(&[7], 0.5, 2.0, 30 + i as u64)],
            move |t, v| {
                let y = t.unary(kind, v[0])?;
                weighted_sum(t, y, 21)
            },
        ));
    }
    cases.push(case(
        "binary.broadcast",
        vec![uniform(&[3, 4], 0.5, 1.5, 40), uniform(&[4], 0.5, 1.5, 41)],
        |t, v| {
            let a = t.add(v[0], v[1])?;
            let b = t.mul(a, v[1])?;
            let c = t.sub(b, v[0])?;
            let d = t.div(c, v[1])?;
            weighted_sum(t, d, 42)
        },
    ));
    cases.push(case("softmax", vec![uniform(&[3, 5], -2.0, 2.0, 50)], |t, v| {
        let y = t.softmax(v[0], 1)?;
        weighted_sum(t, y, 51)
    }));
    cases.push(case("log_softmax", vec![uniform(&[4, 3], -2.0, 2.0, 52)], |t, v| {
        let y = t.log_softmax(v[0], 0)?;
        weighted_sum(t, y, 53)
    }));
    cases.push(case(
        "layer_norm",
        vec![
            uniform(&[4, 6], -2.0, 2.0, 54),
            uniform(&[6], 0.5, 1.5, 55),
            uniform(&[6], -0.5, 0.5, 56),
        ],
        |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], T::lit(1e-5))?;
            weighted_sum(t, y, 57)
        },
    ));
    cases.push(case(
        "conv2d",
        vec![
            uniform(&[2, 5, 6], -1.0, 1.0, 60),
            uniform(&[3, 2, 3, 3], -1.0, 1.0, 61),
        ],
        |t, v| {
            let a = t.conv2d(v[0], v[1], 1, 1)?;
            weighted_sum(t, a, 62)
        },
    ));
    cases.push(case(
        "conv2d.dilated",
        vec![
            uniform(&[2, 6, 6], -1.0, 1.0, 63),
            uniform(&[2, 2, 3, 3], -1.0, 1.0, 64),
        ],
        |t, v| {
            let a = t.conv2d(v[0], v[1], 2, 2)?;
            weighted_sum(t, a, 65)
        },
    ));
    cases.push(case(
        "unfold.patch_sum",
        vec![uniform(&[4, 5, 3], -1.0, 1.0, 66), uniform(&[20, 9], 0.0, 1.0, 67)],
        |t, v| {
            let patches = t.unfold(v[0], 3, 2)?;
            let y = t.patch_sum(v[1], patches)?;
            weighted_sum(t, y, 68)
        },
    ));
    cases.push(case(
        "shape_ops",
        vec![uniform(&[2, 3, 4], -1.0, 1.0, 69), uniform(&[2, 3, 2], -1.0, 1.0, 70)],
        |t, v| {
            let p = t.permute(v[0], &[2, 0, 1])?;
            let r = t.reshape(p, &[2, 3, 4])?;
            let c = t.concat(&[r, v[1]], 2)?;
            let f = t.flip(c, 1)?;
            let s = t.sum_axis(f, 2)?;
            let m = t.mean(f)?;
            let sw = weighted_sum(t, s, 71)?;
            t.add(sw, m)
        },
    ));

    // Scan with every input free, modulated and plain.
    let (l, c, n) = (6, 3, 4);
    let scan_inputs = |seed: u64| -> Vec<Tensor<T>> {
        vec![
            uniform(&[l, c], -1.0, 1.0, seed),
            uniform(&[l, 1], 0.1, 0.9, seed + 1),
            uniform(&[n], -2.0, -0.3, seed + 2),
            uniform(&[l, n], -1.0, 1.0, seed + 3),
            uniform(&[l, n], -1.0, 1.0, seed + 4),
            uniform(&[c], -1.0, 1.0, seed + 5),
            uniform(&[l, c], -1.0, 1.0, seed + 6),
        ]
    };
    let scan_handles = |v: &[Var]| ScanInputs {
        tokens: v[0],
        step: v[1],
        transition: v[2],
        input_weights: v[3],
        readout: v[4],
        skip: v[5],
    };
    cases.push(case("scan.modulated", scan_inputs(80), move |t, v| {
        let y = scan_op(t, scan_handles(v), Some(v[6]))?;
        weighted_sum(t, y, 87)
    }));
    let mut plain = scan_inputs(90);
    plain.pop();
    cases.push(case("scan.plain", plain, move |t, v| {
        let y = scan_op(t, scan_handles(v), None)?;
        weighted_sum(t, y, 97)
    }));
    // Near-zero rates exercise the series branch of the hold factor.
    let mut series = scan_inputs(100);
    series[2] = uniform(&[n], -2e-3, -1e-3, 103);
    cases.push(case("scan.small_rate", series, move |t, v| {
        let y = scan_op(t, scan_handles(v), Some(v[6]))?;
        weighted_sum(t, y, 107)
    }));
    cases.push(case(
        "selective_layer.bidirectional",
        vec![
            uniform(&[l, c], -1.0, 1.0, 110),
            uniform(&[n], -2.0, -0.3, 111),
            uniform(&[c, 1], -0.5, 0.5, 112),
            uniform(&[1], -0.5, 0.5, 113),
            uniform(&[c, n], -0.5, 0.5, 114),
            uniform(&[n], -0.5, 0.5, 115),
            uniform(&[c, n], -0.5, 0.5, 116),
            uniform(&[n], -0.5, 0.5, 117),
            uniform(&[c], -1.0, 1.0, 118),
            uniform(&[l, c], 0.5, 1.5, 119),
        ],
        |t, v| {
            let w = SsmVars {
                transition: v[1],
                step_weight: v[2],
                step_bias: v[3],
                input_weight: v[4],
                input_bias: v[5],
                readout_weight: v[6],
                readout_bias: v[7],
                skip: v[8],
            };
            let y = ordered_layer(t, v[0], &w, Some(v[9]), ScanOrder::Bidirectional)?;
            weighted_sum(t, y, 120)
        },
    ));

    let ppm_x: Tensor<T> = uniform(&[4, 4, 3], -1.0, 1.0, 130);
    let ppm = PpmConfig {
        theta: safe_theta(&ppm_x, 1),
        ..PpmConfig::default()
    };
    cases.push(case("ppm", vec![ppm_x], move |t, v| {
        let y = ppm_on_tape(t, v[0], &ppm)?;
        weighted_sum(t, y, 131)
    }));

    let ch = 3;
    let x: Tensor<T> = uniform(&[5, 5, ch], -1.0, 1.0, 140);
    let crn = CrnConfig::default();
    let mut s = ParamStore::new();
    init_crn(&mut s, 141, "crn", ch, &crn).expect("fresh store");
    cases.push(store_case("crn", x.clone(), s, move |t, x, p| {
        crn_on_tape(t, x, p, "crn", &crn)
    }));

    let mut s = ParamStore::new();
    init_cnn_density(&mut s, 142, "cnn", ch).expect("fresh store");
    cases.push(store_case("cnn_density", x.clone(), s, |t, x, p| {
        cnn_density_on_tape(t, x, p, "cnn")
    }));

    let mut s = ParamStore::new();
    init_fusion(&mut s, 143, "fuse", ch).expect("fresh store");
    let density: Tensor<T> = uniform(&[5, 5, ch], -1.0, 1.0, 144);
    cases.push(case(
        "fusion",
        {
            let mut v = vec![x.clone(), density];
            v.extend(s.iter().map(|(_, t)| t.clone()));
            v
        },
        {
            let names: Vec<String> = s.names().into_iter().map(String::from).collect();
            move |t, v| {
                let p = Bound::from_pairs(names.iter().cloned().zip(v[2..].iter().copied()));
                let y = fuse_on_tape(t, v[0], v[1], &p, "fuse")?;
                weighted_sum(t, y, 145)
            }
        },
    ));

    for (i, modulation) in [Modulation::Both, Modulation::ConvDensity, Modulation::Unit]
        .into_iter()
        .enumerate()
    {
        let x: Tensor<T> = uniform(&[4, 4, 4], -1.0, 1.0, 150 + i as u64);
        // Post-norm similarities decide the mask; pick a threshold clear of them.
        let normed = layer_normed(&x);
        let cfg = BlockConfig {
            state_dim: 3,
            modulation,
            ppm: PpmConfig {
                theta: safe_theta(&normed, 1),
                ..PpmConfig::default()
            },
            ..BlockConfig::default()
        };
        let mut s = ParamStore::new();
        init_block(&mut s, 160 + i as u64, "blk", 4, &cfg).expect("fresh store");
        let name = format!("block.{modulation:?}").to_lowercase();
        cases.push(store_case(&name, x, s, move |t, x, p| {
            block_on_tape(t, x, p, "blk", &cfg)
        }));
    }

    let labels: Vec<u8> = (0..16).map(|i| ((i * 7) % 3) as u8).collect();
    cases.push(case(
        "seg_loss",
        vec![uniform(&[3, 4, 4], -2.0, 2.0, 170)],
        move |t, v| seg_loss(t, v[0], &labels, 1.0, 1.0).map_err(crate::error::Error::into_tensor),
    ));

    let mut s = ParamStore::new();
    init_linear(&mut s, 171, "lin", 3, 2).expect("fresh store");
    cases.push(store_case(
        "param_linear",
        uniform(&[4, 3], -1.0, 1.0, 172),
        s,
        |t, x, p| crate::params::linear(t, p, "lin", x),
    ));
    cases
}

/// Layer norm with unit gain and zero shift, as a block's first step sees it.
fn layer_normed<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let c = *x.shape().last().expect("rank >= 1");
    let mut out = x.clone();
    for tok in out.data_mut().chunks_mut(c) {
        let mean = tok.iter().map(|v| v.as_f64()).sum::<f64>() / c as f64;
        let var = tok.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / c as f64;
        let inv = 1.0 / (var + 1e-5).sqrt();
        tok.iter_mut().for_each(|v| *v = T::lit((v.as_f64() - mean) * inv));
    }
    out
}

/// The smallest complete network: one encoder block, every other stage empty.
pub fn one_block_config(variant: VariantKind) -> NetworkConfig {
    NetworkConfig {
        input_size: (32, 32),
        embed_dim: 4,
        stage_depths: vec![1, 0, 0, 0],
        bottleneck_depth: 0,
        decoder_depths: vec![0, 0, 0],
        state_dim: 2,
        variant,
        seed: 7,
        ..NetworkConfig::default()
    }
}

/// End-to-end case over every parameter of a one-block network.
pub fn network_case<T: Real>(variant: VariantKind) -> crate::error::Result<GradCase<T>> {
    let cfg = one_block_config(variant);
    let net = build_variant::<T>(&cfg)?;
    let names: Vec<String> = net.params.names().into_iter().map(String::from).collect();
    let image: Tensor<T> = uniform(&[1, 32, 32], 0.0, 1.0, 180);
    let inputs: Vec<Tensor<T>> = net.params.iter().map(|(_, t)| t.clone()).collect();
    Ok(case(&format!("network.{}", variant.as_str()), inputs, move |t, v| {
        let p = Bound::from_pairs(names.iter().cloned().zip(v.iter().copied()));
        let x = t.constant(image.clone());
        let y = net
            .forward_on_tape(t, &p, x, &ForwardCtx::default())
            .map_err(crate::error::Error::into_tensor)?;
        weighted_sum(t, y, 181)
    }))
}
