//! Central finite-difference gradient checker.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Half-width of the central difference.
    pub eps: f64,
    /// Lower bound on the relative-error denominator, so gradients that are
    /// zero up to rounding are judged on absolute error.
    pub abs_floor: f64,
    /// Check at most this many randomly chosen elements per input.
    pub max_elements_per_input: Option<usize>,
    pub seed: u64,
    /// Skip elements whose one-sided slopes `(f(x+eps) - f(x)) / eps` and
    /// `(f(x) - f(x-eps)) / eps` differ by more than this fraction of the
    /// gradient scale: a ReLU or max-pool switch lies inside the stencil and
    /// the central difference is meaningless there.
    pub kink_tolerance: Option<f64>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { eps: 1e-5, abs_floor: 1e-6, max_elements_per_input: None, seed: 0, kink_tolerance: None }
    }
}

/// Worst disagreement found by [`grad_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Number of elements compared.
    pub checked: usize,
    /// Elements skipped as non-differentiable points.
    pub skipped: usize,
    /// `(input index, element index, analytic, numeric)` of the worst element.
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// Compares reverse-mode gradients of the scalar `f(inputs)` against
/// `(f(x + eps) - f(x - eps)) / (2 eps)` element by element.
///
/// `f` receives a fresh graph and one leaf per input, and must return a
/// scalar. Always runs in `f64`.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).data()[0])
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).len() != 1 {
        return Err(Error::Usage(format!("grad_check needs a scalar output, got shape {:?}", g.shape(out))));
    }
    let base = g.value(out).data()[0];
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.get_or_zero(v)).collect();
    drop(g);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut report = GradCheckReport { max_rel_error: 0.0, checked: 0, skipped: 0, worst: None };
    for (ti, input) in inputs.iter().enumerate() {
        let indices: Vec<usize> = match opts.max_elements_per_input {
            Some(m) if m < input.len() => {
                let mut v = sample(&mut rng, input.len(), m).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..input.len()).collect(),
        };
        for i in indices {
            let x0 = input.data()[i];
            work[ti].data_mut()[i] = x0 + opts.eps;
            let plus = eval(&work)?;
            work[ti].data_mut()[i] = x0 - opts.eps;
            let minus = eval(&work)?;
            work[ti].data_mut()[i] = x0;

            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = analytic[ti].data()[i];
            let denom = a.abs().max(numeric.abs()).max(opts.abs_floor);
            let rel = (a - numeric).abs() / denom;
            if let Some(tol) = opts.kink_tolerance {
                let slope_gap = (plus - 2.0 * base + minus).abs() / opts.eps;
                if rel > tol && slope_gap > tol * denom {
                    report.skipped += 1;
                    continue;
                }
            }
            report.checked += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((ti, i, a, numeric));
            }
        }
    }
    Ok(report)
}
