//! Production scans against a textbook stepwise recurrence.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::report::ProbeReport;
use crate::error::Result;
use crate::params::mix_seed;
use crate::ssm::{modulated_scan, selective_scan, SsmParams};
use crate::tensor::{Real, Tensor};

/// Direct evaluation of the discretised recurrence, one token at a time:
/// `x_t = exp(d A) x_{t-1} + (exp(d A) - 1) / A * B_t u_t`,
/// `y_t = C_t (z_t * x_t) + D u_t`, all in `f64`.
pub fn stepwise_scan(u: &[f64], z: Option<&[f64]>, p: &SsmParams<f64>) -> Vec<f64> {
    let (c, n) = (p.channels, p.state_dim);
    let l = u.len() / c;
    let mut x = vec![0.0; c * n];
    let mut y = vec![0.0; l * c];
    for t in 0..l {
        let tok = &u[t * c..(t + 1) * c];
        let pre = p.step_bias + (0..c).map(|k| tok[k] * p.step_weight[k]).sum::<f64>();
        let step = if pre > 30.0 { pre } else { pre.exp().ln_1p() };
        let b: Vec<f64> = (0..n)
            .map(|j| p.input_bias[j] + (0..c).map(|k| tok[k] * p.input_weight[k * n + j]).sum::<f64>())
            .collect();
        let cr: Vec<f64> = (0..n)
            .map(|j| p.readout_bias[j] + (0..c).map(|k| tok[k] * p.readout_weight[k * n + j]).sum::<f64>())
            .collect();
        for ch in 0..c {
            let zt = z.map_or(1.0, |z| z[t * c + ch]);
            let mut out = p.skip[ch] * tok[ch];
            for j in 0..n {
                let a = p.transition[j];
                let decay = (step * a).exp();
                let s = &mut x[ch * n + j];
                *s = decay * *s + (decay - 1.0) / a * b[j] * tok[ch];
                out += cr[j] * zt * *s;
            }
            y[t * c + ch] = out;
        }
    }
    y
}

fn random_params(rng: &mut ChaCha8Rng, c: usize, n: usize) -> SsmParams<f64> {
    let mut p = SsmParams::<f64>::random(c, n, rng);
    p.transition = (0..n).map(|_| -rng.random_range(0.05..3.0)).collect();
    p
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    diff / b.iter().map(|v| v.abs()).fold(1e-300, f64::max)
}

fn to_f64<T: Real>(t: &Tensor<T>) -> Vec<f64> {
    t.data().iter().map(|v| v.as_f64()).collect()
}

fn params_f32(p: &SsmParams<f64>) -> SsmParams<f32> {
    let c = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<f32>>();
    SsmParams {
        channels: p.channels,
        state_dim: p.state_dim,
        transition: c(&p.transition),
        step_weight: c(&p.step_weight),
        step_bias: p.step_bias as f32,
        input_weight: c(&p.input_weight),
        input_bias: c(&p.input_bias),
        readout_weight: c(&p.readout_weight),
        readout_bias: c(&p.readout_bias),
        skip: c(&p.skip),
    }
}

pub const ORACLE_TOL: f64 = 1e-5;

/// Randomised equivalence of both scans with [`stepwise_scan`] over
/// `sizes` x `seeds`, in both precisions, plus the unit-modulation and
/// memoryless identities.
pub fn scan_oracle_suite(sizes: &[usize], seeds: &[u64]) -> Result<ProbeReport> {
    let started = std::time::Instant::now();
    let mut report = ProbeReport::new("scan_oracle", seeds);
    let (c, n) = (3, 4);
    let mut unit_gap = 0.0f64;
    let mut memoryless_gap = 0.0f64;
    for &l in sizes {
        let mut worst = [0.0f64; 3];
        for &seed in seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, &format!("scan{l}")));
            let p = random_params(&mut rng, c, n);
            let u = Tensor::<f64>::randn(vec![l, c], 1.0, &mut rng);
            let z = Tensor::<f64>::uniform(vec![l, c], -1.5, 1.5, &mut rng);

            let oracle = stepwise_scan(u.data(), None, &p);
            let (y, _) = selective_scan(&u, &p)?;
            let e64 = rel_err(y.data(), &oracle);
            let (y32, _) = selective_scan(&u.cast::<f32>(), &params_f32(&p))?;
            let e32 = rel_err(&to_f64(&y32), &oracle);
            let ym = modulated_scan(&u, &z, &p)?;
            let em = rel_err(ym.data(), &stepwise_scan(u.data(), Some(z.data()), &p));
            for (w, e) in worst.iter_mut().zip([e64, e32, em]) {
                *w = w.max(e);
            }

            let ones = Tensor::<f64>::ones(vec![l, c]);
            unit_gap = unit_gap.max(rel_err(modulated_scan(&u, &ones, &p)?.data(), y.data()));

            // A transition this steep makes exp(step * A) underflow to zero.
            let mut frozen = p.clone();
            frozen.transition = vec![-1e4; n];
            let (yf, _) = selective_scan(&u, &frozen)?;
            memoryless_gap = memoryless_gap.max(rel_err(yf.data(), &memoryless(u.data(), &frozen)));
        }
        report.measure(None, format!("selective.f64.L{l}"), worst[0]);
        report.measure(None, format!("selective.f32.L{l}"), worst[1]);
        report.measure(None, format!("modulated.f64.L{l}"), worst[2]);
        let tol = format!("max rel err <= {ORACLE_TOL:e}");
        report.check(
            format!("selective.f64.L{l}"),
            &tol,
            worst[0],
            worst[0] <= ORACLE_TOL,
            seeds.len(),
        );
        report.check(
            format!("selective.f32.L{l}"),
            &tol,
            worst[1],
            worst[1] <= ORACLE_TOL,
            seeds.len(),
        );
        report.check(
            format!("modulated.f64.L{l}"),
            &tol,
            worst[2],
            worst[2] <= ORACLE_TOL,
            seeds.len(),
        );
    }
    report.check(
        "unit_modulation",
        "rel gap <= 1e-12",
        unit_gap,
        unit_gap <= 1e-12,
        seeds.len(),
    );
    report.check(
        "memoryless",
        "rel gap <= 1e-12",
        memoryless_gap,
        memoryless_gap <= 1e-12,
        seeds.len(),
    );
    report.seconds = started.elapsed().as_secs_f64();
    report.aggregate("seconds", report.seconds);
    Ok(report)
}

/// `y_t = C_t B_t u_t * (exp(d A) - 1) / A + D u_t` when the state forgets everything.
fn memoryless(u: &[f64], p: &SsmParams<f64>) -> Vec<f64> {
    let (c, n) = (p.channels, p.state_dim);
    let mut y = Vec::with_capacity(u.len());
    for tok in u.chunks(c) {
        let pre = p.step_bias + (0..c).map(|k| tok[k] * p.step_weight[k]).sum::<f64>();
        let step = pre.exp().ln_1p();
        for ch in 0..c {
            let mut out = p.skip[ch] * tok[ch];
            for j in 0..n {
                let b = p.input_bias[j] + (0..c).map(|k| tok[k] * p.input_weight[k * n + j]).sum::<f64>();
                let cr = p.readout_bias[j] + (0..c).map(|k| tok[k] * p.readout_weight[k * n + j]).sum::<f64>();
                let a = p.transition[j];
                out += cr * ((step * a).exp_m1() / a) * b * tok[ch];
            }
            y.push(out);
        }
    }
    y
}
