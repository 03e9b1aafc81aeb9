//! Central finite-difference gradient checking against the tape.
//!
//! The function under test maps leaf variables to an output of any shape. The
//! output is projected onto a fixed random direction `r`, so the checked scalar
//! is `⟨out, r⟩`: the tape differentiates it through a `mul` + `sum`, the
//! numeric side evaluates it in `f64` from the raw `f32` outputs.

use rand::distributions::{Distribution, Uniform};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f32,
    pub tolerance: f64,
    /// Check at most this many coordinates per input (sampled without
    /// replacement); `None` checks all of them.
    pub max_coords: Option<usize>,
    /// Skip coordinates whose one-sided differences disagree by more than
    /// this relative amount, i.e. where the step straddles a relu/maxpool kink.
    pub kink_threshold: Option<f64>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-3,
            tolerance: 1e-3,
            max_coords: None,
            kink_threshold: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub checked: usize,
    pub skipped_kinks: usize,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` over the checked
    /// coordinates; 0 when both vanish.
    pub rel_error: f64,
}

/// The pass criterion is the relative error of the whole checked gradient
/// (all inputs concatenated). Per-input errors are kept for diagnosis: an
/// input whose gradient is tiny next to the output magnitude is dominated by
/// `f32` round-off in the forward pass and says little on its own.
#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub rel_error: f64,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.rel_error < self.tolerance
    }

    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_error).fold(0.0, f64::max)
    }

    pub fn entry(&self, name: &str) -> Option<&GradCheckEntry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

/// Relative error between two gradient vectors as used by [`GradCheckEntry`].
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let denom = norm(analytic).max(norm(numeric));
    if denom < 1e-12 {
        0.0
    } else {
        norm(&diff) / denom
    }
}

/// Checks `f` at `inputs` (every input is treated as differentiable).
pub fn check_gradients<F>(inputs: &[(&str, Tensor)], opts: GradCheckOptions, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);

    // Analytic pass; also fixes the projection direction.
    let mut tape = Tape::new();
    let vars = leaves(&mut tape, inputs);
    let out = f(&mut tape, &vars)?;
    let out_shape = tape.shape(out).to_vec();
    let unit = Uniform::new_inclusive(-1.0f32, 1.0);
    let proj = Tensor::new(
        out_shape.clone(),
        (0..out_shape.iter().product()).map(|_| unit.sample(&mut rng)).collect(),
    )?;
    let r = tape.constant(proj.clone());
    let weighted = tape.mul(out, r)?;
    let loss = tape.sum(weighted);
    tape.backward(loss)?;
    let analytic = grads(&tape, &vars, inputs);

    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out).dot(&proj)
    };
    finite_differences(inputs, opts, &mut rng, &analytic, eval)
}

/// Checks a scalar objective whose tape version is `f` and whose reference
/// value is `numeric`, typically the same objective evaluated in `f64` from
/// the `f32` forward activations. This keeps the final rounding of a mean
/// loss to `f32` out of the difference quotient.
pub fn check_scalar_gradients<F, N>(
    inputs: &[(&str, Tensor)],
    opts: GradCheckOptions,
    f: F,
    numeric: N,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    N: Fn(&[Tensor]) -> Result<f64>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut tape = Tape::new();
    let vars = leaves(&mut tape, inputs);
    let out = f(&mut tape, &vars)?;
    if tape.value(out).len() != 1 {
        return Err(crate::Error::shape("scalar gradient check needs a one-element output"));
    }
    tape.backward(out)?;
    let analytic = grads(&tape, &vars, inputs);
    finite_differences(inputs, opts, &mut rng, &analytic, numeric)
}

fn leaves(tape: &mut Tape, inputs: &[(&str, Tensor)]) -> Vec<Var> {
    inputs
        .iter()
        .map(|(_, t)| tape.leaf(t.clone().with_requires_grad(true)))
        .collect()
}

fn grads(tape: &Tape, vars: &[Var], inputs: &[(&str, Tensor)]) -> Vec<Vec<f32>> {
    vars.iter()
        .zip(inputs)
        .map(|(&v, (_, t))| tape.grad(v).map_or_else(|| vec![0.0; t.len()], <[f32]>::to_vec))
        .collect()
}

fn finite_differences(
    inputs: &[(&str, Tensor)],
    opts: GradCheckOptions,
    rng: &mut ChaCha8Rng,
    analytic: &[Vec<f32>],
    eval: impl Fn(&[Tensor]) -> Result<f64>,
) -> Result<GradCheckReport> {
    let base: Vec<Tensor> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let center = if opts.kink_threshold.is_some() { Some(eval(&base)?) } else { None };
    let mut entries = Vec::with_capacity(inputs.len());
    let (mut all_a, mut all_n) = (Vec::new(), Vec::new());
    for (i, (name, t)) in inputs.iter().enumerate() {
        let coords: Vec<usize> = match opts.max_coords {
            Some(m) if m < t.len() => {
                let mut c = sample(rng, t.len(), m).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..t.len()).collect(),
        };
        let (mut a, mut n) = (Vec::new(), Vec::new());
        let mut skipped = 0;
        for &j in &coords {
            let x = t.data()[j];
            let (xp, xm) = (x + opts.step, x - opts.step);
            let mut values = base.clone();
            values[i].data_mut()[j] = xp;
            let lp = eval(&values)?;
            values[i].data_mut()[j] = xm;
            let lm = eval(&values)?;
            let (dp, dm) = ((xp - x) as f64, (x - xm) as f64);
            if let (Some(threshold), Some(l0)) = (opts.kink_threshold, center) {
                let fwd = (lp - l0) / dp;
                let bwd = (l0 - lm) / dm;
                if (fwd - bwd).abs() > threshold * fwd.abs().max(bwd.abs()).max(1e-6) {
                    skipped += 1;
                    continue;
                }
            }
            n.push((lp - lm) / (dp + dm));
            a.push(analytic[i][j] as f64);
        }
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        entries.push(GradCheckEntry {
            name: name.to_string(),
            checked: a.len(),
            skipped_kinks: skipped,
            analytic_norm: norm(&a),
            numeric_norm: norm(&n),
            rel_error: relative_error(&a, &n),
        });
        all_a.extend(a);
        all_n.extend(n);
    }
    Ok(GradCheckReport {
        tolerance: opts.tolerance,
        rel_error: relative_error(&all_a, &all_n),
        entries,
    })
}
