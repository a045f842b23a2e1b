//! Selective state-space scans.
//!
//! A diagonal real transition `A` (one rate per state slot, shared across
//! channels) is discretised per token with a zero-order hold. The step size,
//! input weights and readout weights are linear functions of the token, and
//! every channel carries its own `N`-slot hidden state:
//!
//! ```text
//! x_t = decay_t * x_{t-1} + gain_t * u_t
//! h_t = z_t * x_t                      (modulated scan only)
//! y_t = <readout_t, h_t> + skip * u_t
//! ```
//!
//! The modulation `z_t` scales the state after the transition; it never feeds
//! back into the recurrence.

use rand::Rng;

use crate::tensor::{softplus, BackwardRule, Real, Result, Tape, Tensor, TensorError, Var};

/// Below this `|step * rate|` the hold factor uses its second-order series.
pub const TAYLOR_THRESHOLD: f64 = 1e-4;

/// Zero-order-hold input factor `(exp(step*rate) - 1) / rate` and its partials
/// with respect to `step` and `rate`, evaluated in `f64`.
pub fn hold_factor(step: f64, rate: f64) -> (f64, f64, f64) {
    let x = step * rate;
    if x.abs() < TAYLOR_THRESHOLD {
        (step * (1.0 + 0.5 * x), 1.0 + x, 0.5 * step * step)
    } else {
        let f = x.exp_m1() / rate;
        // d/drate = step^2 * (x e^x - e^x + 1) / x^2
        let g = if x.abs() < 1e-2 {
            0.5 + x / 3.0 + x * x / 8.0 + x * x * x / 30.0 + x * x * x * x / 144.0
        } else {
            (x * x.exp() - x.exp_m1()) / (x * x)
        };
        (f, x.exp(), step * step * g)
    }
}

/// Discretises a diagonal system: returns `(exp(step*A), (exp(step*A)-1)/A * B)`.
pub fn zoh_discretize<T: Real>(transition: &[T], input_weights: &[T], step: T) -> Result<(Vec<T>, Vec<T>)> {
    if !(step > T::zero()) {
        return Err(TensorError::InvalidArgument {
            op: "zoh_discretize",
            msg: format!("step must be positive, got {step}"),
        });
    }
    if transition.len() != input_weights.len() {
        return Err(TensorError::ShapeMismatch {
            op: "zoh_discretize",
            lhs: vec![transition.len()],
            rhs: vec![input_weights.len()],
        });
    }
    let s = step.as_f64();
    let decay = transition.iter().map(|&a| T::lit((s * a.as_f64()).exp())).collect();
    let gain = transition
        .iter()
        .zip(input_weights)
        .map(|(&a, &b)| T::lit(hold_factor(s, a.as_f64()).0 * b.as_f64()))
        .collect();
    Ok((decay, gain))
}

/// Weights of one selective SSM layer over `channels` inputs with `state_dim` slots.
///
/// `transition` is the diagonal of `A`; `input_*` produce `B_t`, `readout_*`
/// produce `C_t`, `step_*` produce the pre-softplus step, `skip` is `D`.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmParams<T: Real = f32> {
    pub channels: usize,
    pub state_dim: usize,
    pub transition: Vec<T>,
    pub step_weight: Vec<T>,
    pub step_bias: T,
    pub input_weight: Vec<T>,
    pub input_bias: Vec<T>,
    pub readout_weight: Vec<T>,
    pub readout_bias: Vec<T>,
    pub skip: Vec<T>,
}

/// Initial transition diagonal `A_i = -(i + 1)`.
pub fn default_transition<T: Real>(state_dim: usize) -> Vec<T> {
    (0..state_dim).map(|i| T::lit(-((i + 1) as f64))).collect()
}

impl<T: Real> SsmParams<T> {
    pub fn zeros(channels: usize, state_dim: usize) -> Self {
        Self {
            channels,
            state_dim,
            transition: default_transition(state_dim),
            step_weight: vec![T::zero(); channels],
            step_bias: T::zero(),
            input_weight: vec![T::zero(); channels * state_dim],
            input_bias: vec![T::zero(); state_dim],
            readout_weight: vec![T::zero(); channels * state_dim],
            readout_bias: vec![T::zero(); state_dim],
            skip: vec![T::one(); channels],
        }
    }

    pub fn random<R: Rng + ?Sized>(channels: usize, state_dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (channels as f64).sqrt();
        let mut u = |n: usize| -> Vec<T> { (0..n).map(|_| T::lit(rng.random_range(-bound..bound))).collect() };
        let step_weight = u(channels);
        let input_weight = u(channels * state_dim);
        let input_bias = u(state_dim);
        let readout_weight = u(channels * state_dim);
        let readout_bias = u(state_dim);
        let skip = u(channels);
        let step_bias = T::lit(rng.random_range(-0.5..0.5));
        Self {
            channels,
            state_dim,
            transition: default_transition(state_dim),
            step_weight,
            step_bias,
            input_weight,
            input_bias,
            readout_weight,
            readout_bias,
            skip,
        }
    }

    fn check(&self) -> Result<()> {
        let (c, n) = (self.channels, self.state_dim);
        let ok = c >= 1
            && n >= 1
            && self.transition.len() == n
            && self.step_weight.len() == c
            && self.input_weight.len() == c * n
            && self.input_bias.len() == n
            && self.readout_weight.len() == c * n
            && self.readout_bias.len() == n
            && self.skip.len() == c;
        if ok {
            Ok(())
        } else {
            Err(TensorError::InvalidArgument {
                op: "ssm params",
                msg: format!("inconsistent dimensions for C={c}, N={n}"),
            })
        }
    }
}

/// Per-token discretised parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanStep<T: Real = f32> {
    /// `exp(step * A)`.
    pub decay: Vec<T>,
    /// Hold factor times the token's input weights.
    pub gain: Vec<T>,
    pub readout: Vec<T>,
    pub step: T,
}

fn affine<T: Real>(u: &[T], w: &[T], b: &[T], out_dim: usize) -> Vec<T> {
    // Same accumulation order as the tape's `linear`, so both paths agree bit for bit.
    let mut out = vec![T::zero(); out_dim];
    for (ci, &uc) in u.iter().enumerate() {
        for (o, &wv) in out.iter_mut().zip(&w[ci * out_dim..(ci + 1) * out_dim]) {
            *o = *o + uc * wv;
        }
    }
    out.iter_mut().zip(b).for_each(|(o, &bv)| *o = *o + bv);
    out
}

/// Input-dependent step, input weights and readout for one token.
pub fn selective_params<T: Real>(token: &[T], params: &SsmParams<T>) -> Result<ScanStep<T>> {
    params.check()?;
    if token.len() != params.channels {
        return Err(TensorError::ShapeMismatch {
            op: "selective_params",
            lhs: vec![params.channels],
            rhs: vec![token.len()],
        });
    }
    let n = params.state_dim;
    let pre = affine(token, &params.step_weight, &[params.step_bias], 1)[0];
    let step = softplus(pre);
    let input_w = affine(token, &params.input_weight, &params.input_bias, n);
    let readout = affine(token, &params.readout_weight, &params.readout_bias, n);
    let (decay, gain) = zoh_discretize(&params.transition, &input_w, step)?;
    Ok(ScanStep {
        decay,
        gain,
        readout,
        step,
    })
}

/// Hidden state of one channel-bank while stepping a scan by hand.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanState<T: Real = f32> {
    /// `[C, N]` unmodulated state.
    pub x: Vec<T>,
    /// `[C, N]` state after modulation.
    pub h: Vec<T>,
    channels: usize,
}

impl<T: Real> ScanState<T> {
    pub fn new(channels: usize, state_dim: usize) -> Self {
        Self {
            x: vec![T::zero(); channels * state_dim],
            h: vec![T::zero(); channels * state_dim],
            channels,
        }
    }

    /// Advances one token and returns its output. `z` defaults to all ones.
    pub fn advance(&mut self, step: &ScanStep<T>, token: &[T], z: Option<&[T]>, skip: &[T]) -> Vec<T> {
        let n = step.decay.len();
        (0..self.channels)
            .map(|c| {
                let zc = z.map_or(T::one(), |z| z[c]);
                let mut acc = T::zero();
                for j in 0..n {
                    let k = c * n + j;
                    self.x[k] = step.decay[j] * self.x[k] + step.gain[j] * token[c];
                    self.h[k] = zc * self.x[k];
                    acc = acc + step.readout[j] * self.h[k];
                }
                acc + skip[c] * token[c]
            })
            .collect()
    }
}

/// Output of the forward recurrence, plus what the backward rule needs.
pub(crate) struct ScanTrace<T> {
    pub y: Vec<T>,
    pub states: Vec<T>,
    pub decay: Vec<T>,
    pub gain: Vec<T>,
    pub hold: Vec<T>,
    pub dhold_dstep: Vec<T>,
    pub dhold_drate: Vec<T>,
}

pub(crate) struct ScanDims {
    pub len: usize,
    pub channels: usize,
    pub state_dim: usize,
}

/// Sequential recurrence over `len` tokens. `step` is positive, `input_w` and
/// `readout` are `[len, N]`, `u` and `z` are `[len, C]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn scan_kernel<T: Real>(
    dims: &ScanDims,
    u: &[T],
    step: &[T],
    transition: &[T],
    input_w: &[T],
    readout: &[T],
    skip: &[T],
    z: Option<&[T]>,
) -> ScanTrace<T> {
    let (l, c, n) = (dims.len, dims.channels, dims.state_dim);
    let mut decay = vec![T::zero(); l * n];
    let mut gain = vec![T::zero(); l * n];
    let mut hold = vec![T::zero(); l * n];
    let mut dhold_dstep = vec![T::zero(); l * n];
    let mut dhold_drate = vec![T::zero(); l * n];
    for t in 0..l {
        let s = step[t].as_f64();
        for j in 0..n {
            let a = transition[j].as_f64();
            let (f, ds, da) = hold_factor(s, a);
            decay[t * n + j] = T::lit((s * a).exp());
            hold[t * n + j] = T::lit(f);
            dhold_dstep[t * n + j] = T::lit(ds);
            dhold_drate[t * n + j] = T::lit(da);
            gain[t * n + j] = T::lit(f) * input_w[t * n + j];
        }
    }

    let mut states = vec![T::zero(); l * c * n];
    let mut y = vec![T::zero(); l * c];
    for t in 0..l {
        let dec = &decay[t * n..(t + 1) * n];
        let gn = &gain[t * n..(t + 1) * n];
        let ro = &readout[t * n..(t + 1) * n];
        let (prev, cur) = states.split_at_mut(t * c * n);
        let cur = &mut cur[..c * n];
        for ch in 0..c {
            let ut = u[t * c + ch];
            let xs = &mut cur[ch * n..(ch + 1) * n];
            let mut acc = T::zero();
            if t == 0 {
                for j in 0..n {
                    xs[j] = gn[j] * ut;
                    acc = acc + ro[j] * xs[j];
                }
            } else {
                let xp = &prev[(t - 1) * c * n + ch * n..(t - 1) * c * n + (ch + 1) * n];
                for j in 0..n {
                    xs[j] = dec[j] * xp[j] + gn[j] * ut;
                    acc = acc + ro[j] * xs[j];
                }
            }
            let zt = z.map_or(T::one(), |z| z[t * c + ch]);
            y[t * c + ch] = zt * acc + skip[ch] * ut;
        }
    }
    ScanTrace {
        y,
        states,
        decay,
        gain,
        hold,
        dhold_dstep,
        dhold_drate,
    }
}

struct ScanRule<T> {
    len: usize,
    channels: usize,
    state_dim: usize,
    states: Vec<T>,
    decay: Vec<T>,
    gain: Vec<T>,
    hold: Vec<T>,
    dhold_dstep: Vec<T>,
    dhold_drate: Vec<T>,
    modulated: bool,
}

impl<T: Real> BackwardRule<T> for ScanRule<T> {
    fn name(&self) -> &'static str {
        "selective_scan"
    }

    fn backward(&self, inputs: &[&[T]], _output: &[T], g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let (l, c, n) = (self.len, self.channels, self.state_dim);
        let (u, step, transition, input_w, readout, skip) =
            (inputs[0], inputs[1], inputs[2], inputs[3], inputs[4], inputs[5]);
        let z = self.modulated.then(|| inputs[6]);
        let zt = |t: usize, ch: usize| z.map_or(T::one(), |z| z[t * c + ch]);

        let mut gu = vec![T::zero(); l * c];
        let mut g_skip = vec![T::zero(); c];
        let mut g_readout = vec![T::zero(); l * n];
        let mut gz = vec![T::zero(); if self.modulated { l * c } else { 0 }];
        let mut g_decay = vec![T::zero(); l * n];
        let mut g_gain = vec![T::zero(); l * n];
        let mut costate = vec![T::zero(); c * n];

        for t in (0..l).rev() {
            let xs = &self.states[t * c * n..(t + 1) * c * n];
            let ro = &readout[t * n..(t + 1) * n];
            if t + 1 < l {
                let dec = &self.decay[(t + 1) * n..(t + 2) * n];
                for ch in 0..c {
                    for j in 0..n {
                        costate[ch * n + j] = costate[ch * n + j] * dec[j];
                    }
                }
            }
            for ch in 0..c {
                let gy = g[t * c + ch];
                let ut = u[t * c + ch];
                g_skip[ch] = g_skip[ch] + gy * ut;
                gu[t * c + ch] = gu[t * c + ch] + gy * skip[ch];
                let zc = zt(t, ch);
                let gh = gy * zc;
                let mut dot = T::zero();
                for j in 0..n {
                    let x = xs[ch * n + j];
                    dot = dot + ro[j] * x;
                    g_readout[t * n + j] = g_readout[t * n + j] + gh * x;
                    costate[ch * n + j] = costate[ch * n + j] + gh * ro[j];
                }
                if self.modulated {
                    gz[t * c + ch] = gy * dot;
                }
            }
            for ch in 0..c {
                let ut = u[t * c + ch];
                let mut acc = T::zero();
                for j in 0..n {
                    let lam = costate[ch * n + j];
                    if t > 0 {
                        let xp = self.states[(t - 1) * c * n + ch * n + j];
                        g_decay[t * n + j] = g_decay[t * n + j] + lam * xp;
                    }
                    g_gain[t * n + j] = g_gain[t * n + j] + lam * ut;
                    acc = acc + lam * self.gain[t * n + j];
                }
                gu[t * c + ch] = gu[t * c + ch] + acc;
            }
        }

        let mut g_step = vec![T::zero(); l];
        let mut g_rate = vec![T::zero(); n];
        let mut g_input = vec![T::zero(); l * n];
        for t in 0..l {
            for j in 0..n {
                let k = t * n + j;
                let dd = g_decay[k] * self.decay[k];
                let gh = g_gain[k] * input_w[k];
                g_input[k] = g_gain[k] * self.hold[k];
                g_step[t] = g_step[t] + dd * transition[j] + gh * self.dhold_dstep[k];
                g_rate[j] = g_rate[j] + dd * step[t] + gh * self.dhold_drate[k];
            }
        }

        let mut out = vec![
            needs[0].then_some(gu),
            needs[1].then_some(g_step),
            needs[2].then_some(g_rate),
            needs[3].then_some(g_input),
            needs[4].then_some(g_readout),
            needs[5].then_some(g_skip),
        ];
        if self.modulated {
            out.push(needs[6].then_some(gz));
        }
        out
    }
}

/// Handles to the discretised-scan inputs recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct ScanInputs {
    /// `[L, C]` tokens.
    pub tokens: Var,
    /// `[L]` or `[L, 1]` positive step sizes.
    pub step: Var,
    /// `[N]` diagonal of `A`.
    pub transition: Var,
    /// `[L, N]`.
    pub input_weights: Var,
    /// `[L, N]`.
    pub readout: Var,
    /// `[C]`.
    pub skip: Var,
}

/// Records the (optionally modulated) recurrence as a single tape op.
pub fn scan_op<T: Real>(tape: &mut Tape<'_, T>, inp: ScanInputs, modulation: Option<Var>) -> Result<Var> {
    let us = tape.shape(inp.tokens).to_vec();
    if us.len() != 2 {
        return Err(TensorError::InvalidArgument {
            op: "scan",
            msg: format!("tokens must be [L, C], got {us:?}"),
        });
    }
    let (l, c) = (us[0], us[1]);
    let n = tape.value(inp.transition).len();
    let dims_ok = tape.value(inp.step).len() == l
        && tape.value(inp.input_weights).len() == l * n
        && tape.value(inp.readout).len() == l * n
        && tape.value(inp.skip).len() == c;
    if !dims_ok {
        return Err(TensorError::InvalidArgument {
            op: "scan",
            msg: format!("inconsistent scan operands for L={l}, C={c}, N={n}"),
        });
    }
    if let Some(z) = modulation {
        if tape.shape(z) != us.as_slice() {
            return Err(TensorError::ShapeMismatch {
                op: "modulated_scan",
                lhs: us,
                rhs: tape.shape(z).to_vec(),
            });
        }
    }
    if tape.value(inp.step).iter().any(|&s| !(s > T::zero())) {
        return Err(TensorError::InvalidArgument {
            op: "scan",
            msg: "step sizes must be positive".into(),
        });
    }
    let dims = ScanDims {
        len: l,
        channels: c,
        state_dim: n,
    };
    let trace = scan_kernel(
        &dims,
        tape.value(inp.tokens),
        tape.value(inp.step),
        tape.value(inp.transition),
        tape.value(inp.input_weights),
        tape.value(inp.readout),
        tape.value(inp.skip),
        modulation.map(|z| tape.value(z)),
    );
    let rule = ScanRule {
        len: l,
        channels: c,
        state_dim: n,
        states: trace.states,
        decay: trace.decay,
        gain: trace.gain,
        hold: trace.hold,
        dhold_dstep: trace.dhold_dstep,
        dhold_drate: trace.dhold_drate,
        modulated: modulation.is_some(),
    };
    let mut deps = vec![
        inp.tokens,
        inp.step,
        inp.transition,
        inp.input_weights,
        inp.readout,
        inp.skip,
    ];
    deps.extend(modulation);
    tape.custom(&deps, trace.y, vec![l, c], Box::new(rule))
}

/// Tape handles for the learnable weights of one SSM layer.
#[derive(Clone, Copy, Debug)]
pub struct SsmVars {
    /// `[N]`, already negative.
    pub transition: Var,
    /// `[C, 1]` and `[1]`.
    pub step_weight: Var,
    pub step_bias: Var,
    /// `[C, N]` and `[N]`.
    pub input_weight: Var,
    pub input_bias: Var,
    pub readout_weight: Var,
    pub readout_bias: Var,
    /// `[C]`.
    pub skip: Var,
}

/// Projects `[L, C]` tokens to their selective parameters and runs the scan.
pub fn selective_layer<T: Real>(
    tape: &mut Tape<'_, T>,
    tokens: Var,
    w: &SsmVars,
    modulation: Option<Var>,
) -> Result<Var> {
    let pre = tape.linear(tokens, w.step_weight, Some(w.step_bias))?;
    let step = tape.softplus(pre)?;
    let input_weights = tape.linear(tokens, w.input_weight, Some(w.input_bias))?;
    let readout = tape.linear(tokens, w.readout_weight, Some(w.readout_bias))?;
    scan_op(
        tape,
        ScanInputs {
            tokens,
            step,
            transition: w.transition,
            input_weights,
            readout,
            skip: w.skip,
        },
        modulation,
    )
}

/// Token order used when a 2D grid is flattened into a sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ScanOrder {
    /// Row-major only.
    Forward,
    /// Row-major and reversed row-major, outputs averaged.
    #[default]
    Bidirectional,
}

/// Runs [`selective_layer`] in the configured order over `[L, C]` tokens.
pub fn ordered_layer<T: Real>(
    tape: &mut Tape<'_, T>,
    tokens: Var,
    w: &SsmVars,
    modulation: Option<Var>,
    order: ScanOrder,
) -> Result<Var> {
    let fwd = selective_layer(tape, tokens, w, modulation)?;
    match order {
        ScanOrder::Forward => Ok(fwd),
        ScanOrder::Bidirectional => {
            let rt = tape.flip(tokens, 0)?;
            let rz = modulation.map(|z| tape.flip(z, 0)).transpose()?;
            let rev = selective_layer(tape, rt, w, rz)?;
            let back = tape.flip(rev, 0)?;
            let sum = tape.add(fwd, back)?;
            tape.scale(sum, T::lit(0.5))
        }
    }
}

fn params_on_tape<'a, T: Real>(tape: &mut Tape<'a, T>, p: &SsmParams<T>) -> Result<SsmVars> {
    p.check()?;
    let (c, n) = (p.channels, p.state_dim);
    let mut put =
        |shape: Vec<usize>, data: &[T]| -> Result<Var> { Ok(tape.constant(Tensor::new(shape, data.to_vec())?)) };
    Ok(SsmVars {
        transition: put(vec![n], &p.transition)?,
        step_weight: put(vec![c, 1], &p.step_weight)?,
        step_bias: put(vec![1], &[p.step_bias])?,
        input_weight: put(vec![c, n], &p.input_weight)?,
        input_bias: put(vec![n], &p.input_bias)?,
        readout_weight: put(vec![c, n], &p.readout_weight)?,
        readout_bias: put(vec![n], &p.readout_bias)?,
        skip: put(vec![c], &p.skip)?,
    })
}

fn check_tokens<T: Real>(u: &Tensor<T>, p: &SsmParams<T>) -> Result<()> {
    if u.rank() != 2 || u.shape()[1] != p.channels {
        return Err(TensorError::ShapeMismatch {
            op: "scan tokens",
            lhs: vec![0, p.channels],
            rhs: u.shape().to_vec(),
        });
    }
    Ok(())
}

/// Plain selective scan over `[L, C]` tokens with `x_0 = 0`.
///
/// Returns the outputs `[L, C]` and the hidden states `[L, C * N]`.
pub fn selective_scan<T: Real>(u: &Tensor<T>, params: &SsmParams<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    check_tokens(u, params)?;
    let (l, c, n) = (u.shape()[0], params.channels, params.state_dim);
    let mut step = Vec::with_capacity(l);
    let mut input_w = Vec::with_capacity(l * n);
    let mut readout = Vec::with_capacity(l * n);
    for tok in u.data().chunks_exact(c) {
        let pre = affine(tok, &params.step_weight, &[params.step_bias], 1)[0];
        step.push(softplus(pre));
        input_w.extend(affine(tok, &params.input_weight, &params.input_bias, n));
        readout.extend(affine(tok, &params.readout_weight, &params.readout_bias, n));
    }
    let dims = ScanDims {
        len: l,
        channels: c,
        state_dim: n,
    };
    let trace = scan_kernel(
        &dims,
        u.data(),
        &step,
        &params.transition,
        &input_w,
        &readout,
        &params.skip,
        None,
    );
    Ok((
        Tensor::new(vec![l, c], trace.y)?,
        Tensor::new(vec![l, c * n], trace.states)?,
    ))
}

/// Scan whose state is scaled channel-wise by `z` before the readout.
pub fn modulated_scan<T: Real>(u: &Tensor<T>, z: &Tensor<T>, params: &SsmParams<T>) -> Result<Tensor<T>> {
    check_tokens(u, params)?;
    if z.shape() != u.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "modulated_scan",
            lhs: u.shape().to_vec(),
            rhs: z.shape().to_vec(),
        });
    }
    let mut tape = Tape::new();
    let w = params_on_tape(&mut tape, params)?;
    let tu = tape.leaf(u);
    let tz = tape.leaf(z);
    let y = selective_layer(&mut tape, tu, &w, Some(tz))?;
    Ok(tape.to_tensor(y))
}
