//! Central finite-difference verification of tape gradients.
//!
//! Checks run in `f64`. A coordinate whose `+step` and `-step` evaluations
//! take different branches of a non-smooth op (e.g. a ReLU input changing
//! sign) is reported as skipped instead of compared.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor for the relative error, so that near-zero
    /// gradients are compared absolutely.
    pub abs_floor: f64,
    /// Check at most this many randomly chosen coordinates per parameter.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            tolerance: 1e-5,
            abs_floor: 1e-6,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn skipped(&self) -> usize {
        self.params.iter().map(|p| p.skipped).sum()
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the tape gradient of `f` against central differences for every
/// tensor in `params`.
///
/// `f` receives one leaf per parameter (in order) and must return a
/// one-element loss.
pub fn grad_check<F>(f: F, params: &[(String, Tensor<f64>)], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let analytic: Vec<Vec<f64>> = {
        let tape = Tape::new();
        let leaves: Vec<Var<'_, f64>> = params.iter().map(|(_, t)| tape.variable(t.clone())).collect();
        let loss = f(&tape, &leaves)?;
        let grads = tape.backward(loss)?;
        leaves
            .iter()
            .zip(params)
            .map(|(&v, (_, t))| grads.get(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
            .collect()
    };

    let evaluate = |values: &[Tensor<f64>]| -> Result<(f64, Vec<bool>)> {
        let tape = Tape::new().with_kink_tracking();
        let leaves: Vec<Var<'_, f64>> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = f(&tape, &leaves)?.item();
        Ok((loss, tape.kink_signature()))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut values: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.clone()).collect();
    let mut report = Vec::with_capacity(params.len());
    for (pi, (name, tensor)) in params.iter().enumerate() {
        let n = tensor.numel();
        let coords: Vec<usize> = match opts.max_coords {
            Some(limit) if limit < n => {
                let mut c = sample(&mut rng, n, limit).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        let (mut checked, mut skipped, mut worst) = (0, 0, 0.0f64);
        for &i in &coords {
            let original = values[pi].data()[i];
            values[pi].data_mut()[i] = original + opts.step;
            let (plus, sig_plus) = evaluate(&values)?;
            values[pi].data_mut()[i] = original - opts.step;
            let (minus, sig_minus) = evaluate(&values)?;
            values[pi].data_mut()[i] = original;
            if sig_plus != sig_minus {
                skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * opts.step);
            worst = worst.max(relative_error(analytic[pi][i], numeric, opts.abs_floor));
            checked += 1;
        }
        report.push(ParamCheck {
            name: name.clone(),
            checked,
            skipped,
            max_rel_error: worst,
            passed: worst < opts.tolerance,
        });
    }
    Ok(GradCheckReport {
        params: report,
        tolerance: opts.tolerance,
    })
}
