//! Central finite-difference verification of recorded gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::{ensure, Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    /// Coordinates sampled per parameter tensor (all of them when fewer).
    pub samples_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            samples_per_param: 50,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Max of `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose perturbation switched a relu sign or max-pool winner.
    pub skipped_kinks: usize,
    /// (parameter index, flat coordinate) of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    /// (analytic, numeric) at the worst coordinate.
    pub worst_values: Option<(f64, f64)>,
}

fn evaluate<F>(f: &F, params: &[Tensor], track: bool) -> Result<(Graph, Var, Vec<Var>)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.leaf(p.clone(), track)).collect();
    let out = f(&mut g, &vars)?;
    ensure!(
        g.value(out).numel() == 1,
        "gradient check needs a scalar function, got shape {:?}",
        g.value(out).shape()
    );
    Ok((g, out, vars))
}

/// Compares reverse-mode gradients of the scalar `f` against central
/// differences with step `epsilon`.
pub fn grad_check<F>(f: F, params: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    ensure!(opts.epsilon > 0.0, "epsilon must be positive");
    let (mut g, out, vars) = evaluate(&f, params, true)?;
    let f0 = g.value(out).data()[0];
    if !f0.is_finite() {
        return Err(Error::Numerical(format!("non-finite output {f0} at the base point")));
    }
    let signature = g.branch_signature();
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| g.grad(v).map_or_else(|| vec![0.0; p.numel()], <[f64]>::to_vec))
        .collect();
    drop(g);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped_kinks: 0,
        worst: None,
        worst_values: None,
    };
    let mut work = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        let coords: Vec<usize> = if p.numel() <= opts.samples_per_param {
            (0..p.numel()).collect()
        } else {
            let mut c = sample(&mut rng, p.numel(), opts.samples_per_param).into_vec();
            c.sort_unstable();
            c
        };
        for c in coords {
            let base = p.data()[c];
            let mut side = |delta: f64| -> Result<(f64, u64)> {
                work[pi].data_mut()[c] = base + delta;
                let (g, out, _) = evaluate(&f, &work, false)?;
                let v = g.value(out).data()[0];
                if !v.is_finite() {
                    return Err(Error::Numerical(format!(
                        "non-finite output {v} when perturbing parameter {pi} coordinate {c}"
                    )));
                }
                Ok((v, g.branch_signature()))
            };
            let (fp, sp) = side(opts.epsilon)?;
            let (fm, sm) = side(-opts.epsilon)?;
            work[pi].data_mut()[c] = base;
            if sp != signature || sm != signature {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * opts.epsilon);
            let a = analytic[pi][c];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((pi, c));
                report.worst_values = Some((a, numeric));
            }
        }
    }
    Ok(report)
}
