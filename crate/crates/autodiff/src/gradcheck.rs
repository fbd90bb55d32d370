//! Central finite-difference checks of analytic gradients at 64-bit.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradcheckConfig {
    /// Finite-difference step.
    pub step: f64,
    /// Denominator floor of the relative error, so that near-zero gradients
    /// are compared absolutely.
    pub floor: f64,
    /// Check at most this many evenly spaced elements per input.
    pub max_checks_per_input: Option<usize>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-3,
            max_checks_per_input: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mismatch {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub worst: Option<Mismatch>,
}

impl GradcheckReport {
    pub fn merge(&mut self, other: &GradcheckReport) {
        self.checked += other.checked;
        if other.max_rel_error > self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn evaluate<F>(inputs: &[Tensor<f64>], build: &F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    Ok(tape.value(loss).data()[0])
}

/// Compares the gradient of `build`'s scalar output with respect to every
/// input against central differences.
pub fn check_gradients<F>(
    inputs: &[Tensor<f64>],
    config: &GradcheckConfig,
    build: F,
) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|v| tape.grad(*v).map(<[f64]>::to_vec).unwrap_or_default())
        .collect();

    let mut report = GradcheckReport::default();
    let mut probe = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let stride = match config.max_checks_per_input {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        for idx in (0..n).step_by(stride) {
            let base = input.data()[idx];
            let mut data = input.data().to_vec();
            data[idx] = base + config.step;
            probe[i] = Tensor::new(input.shape().to_vec(), data.clone())?;
            let plus = evaluate(&probe, &build)?;
            data[idx] = base - config.step;
            probe[i] = Tensor::new(input.shape().to_vec(), data)?;
            let minus = evaluate(&probe, &build)?;
            probe[i] = input.clone();

            let numeric = (plus - minus) / (2.0 * config.step);
            let a = analytic[i].get(idx).copied().unwrap_or(0.0);
            let err = relative_error(a, numeric, config.floor);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some(Mismatch {
                    input: i,
                    index: idx,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}
