//! Central finite-difference verification of tape gradients.

use crate::error::Result;
use crate::tensor::{Tape, Tensor};

pub const FD_STEP: f32 = 1e-3;
pub const FD_TOLERANCE: f32 = 1e-3;

#[derive(Debug, Clone)]
pub struct GradEntry {
    pub name: String,
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` over the probed elements.
    pub rel_error: f32,
    pub analytic_norm: f32,
    pub probed: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, Default)]
pub struct GradReport {
    pub entries: Vec<GradEntry>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn failures(&self) -> Vec<&GradEntry> {
        self.entries.iter().filter(|e| !e.passed).collect()
    }

    pub fn worst(&self) -> f32 {
        self.entries.iter().map(|e| e.rel_error).fold(0.0, f32::max)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f32,
    pub tolerance: f32,
    /// Probe at most this many evenly spaced elements per input.
    pub max_probes: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: FD_STEP,
            tolerance: FD_TOLERANCE,
            max_probes: usize::MAX,
        }
    }
}

fn analytic_gradients<F>(inputs: &[(&str, Tensor)], f: &F) -> Result<Vec<Vec<f32>>>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let tape = Tape::new();
    let watched: Vec<Tensor> = inputs.iter().map(|(_, t)| tape.watch(t)).collect();
    let loss = f(&watched)?;
    let grads = tape.backward(&loss)?;
    Ok(inputs
        .iter()
        .zip(&watched)
        .map(|((_, t), w)| grads.get(w).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect())
}

/// Compares the tape gradient of the scalar `f(inputs)` with central
/// differences of `f` itself, evaluated in f32.
pub fn check<F>(inputs: &[(&str, Tensor)], f: F, opts: GradCheckOptions) -> Result<GradReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let analytic = analytic_gradients(inputs, &f)?;
    let base: Vec<Tensor> = inputs.iter().map(|(_, t)| t.detach()).collect();
    compare(inputs, &analytic, opts, |k, i, x| {
        let mut args = base.clone();
        args[k] = inputs[k].1.with_value(i, x as f32);
        Ok(f(&args)?.item()? as f64)
    })
}

/// Like [`check`], but the central differences are taken on `reference`, an
/// independent f64 evaluation of the same function. This removes the f32
/// rounding floor (about `ε·|f| / step`) from the numeric side, which matters
/// once the function is deep enough that some gradients sit near that floor.
pub fn check_against_reference<F, R>(
    inputs: &[(&str, Tensor)],
    f: F,
    reference: R,
    opts: GradCheckOptions,
) -> Result<GradReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
    R: Fn(&[Vec<f64>]) -> f64,
{
    let analytic = analytic_gradients(inputs, &f)?;
    let base: Vec<Vec<f64>> = inputs
        .iter()
        .map(|(_, t)| t.data().iter().map(|&v| v as f64).collect())
        .collect();
    compare(inputs, &analytic, opts, |k, i, x| {
        let mut args = base.clone();
        args[k][i] = x;
        Ok(reference(&args))
    })
}

fn compare<E>(inputs: &[(&str, Tensor)], analytic: &[Vec<f32>], opts: GradCheckOptions, eval: E) -> Result<GradReport>
where
    E: Fn(usize, usize, f64) -> Result<f64>,
{
    let mut report = GradReport::default();
    for (k, (name, t)) in inputs.iter().enumerate() {
        let analytic = &analytic[k];
        let n = t.numel();
        let stride = n.div_ceil(opts.max_probes.min(n)).max(1);
        let (mut diff2, mut a2, mut n2, mut probed) = (0.0f64, 0.0f64, 0.0f64, 0);
        for i in (0..n).step_by(stride) {
            let x = t.data()[i] as f64;
            let plus = eval(k, i, x + opts.step as f64)?;
            let minus = eval(k, i, x - opts.step as f64)?;
            let numeric = (plus - minus) / (2.0 * opts.step as f64);
            let a = analytic[i] as f64;
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
            probed += 1;
        }
        let denom = a2.sqrt().max(n2.sqrt());
        let rel = if denom == 0.0 { 0.0 } else { diff2.sqrt() / denom } as f32;
        report.entries.push(GradEntry {
            name: name.to_string(),
            rel_error: rel,
            analytic_norm: a2.sqrt() as f32,
            probed,
            passed: rel <= opts.tolerance && rel.is_finite(),
        });
    }
    Ok(report)
}
