//! Verification probes.
//!
//! Each probe returns a [`ProbeReport`]: raw measurements, the thresholds
//! they were judged against and a verdict. Probes are deterministic given
//! their seeds and configuration.

mod gradcheck;
mod oracle;
mod probes;
mod report;

pub use gradcheck::{
    central_differences, grad_check, grad_check_against, network_case, normwise_error, numeric_gradients,
    one_block_config, operation_cases, tape_gradients, weighted_sum, GradCase, GradProfile, LossBuilder,
};
pub use oracle::{scan_oracle_suite, stepwise_scan, ORACLE_TOL};
pub use probes::{
    bias_variance_probe, convergence_experiment, data_efficiency_probe, is_trunk_param, lipschitz_estimate,
    probe_train_config, seed_majority, smoothness_probe, variance_and_bias, BiasVarianceConfig, LipschitzEstimate,
};
pub use report::{load_reports, render_summary, Check, Measurement, ProbeReport};

use crate::error::Result;
use crate::network::VariantKind;
use crate::tensor::{DType, Real};

fn suite_cases<T: Real>() -> Result<Vec<GradCase<T>>> {
    let mut cases = operation_cases::<T>();
    for v in VariantKind::ALL {
        cases.push(network_case::<T>(v)?);
    }
    Ok(cases)
}

/// Every operation case plus a one-block network of each variant, with
/// gradients taken at the precision of `T`.
pub fn grad_suite<T: Real>(profile: GradProfile) -> Result<ProbeReport> {
    let reference = suite_cases::<f64>()?;
    match T::DTYPE {
        DType::F64 => grad_check("grad_f64", &reference, profile),
        DType::F32 => grad_check_against("grad_f32", &suite_cases::<T>()?, &reference, profile),
    }
}

#[cfg(test)]
mod tests;
