//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradcheckOptions {
    pub epsilon: f64,
    /// Cap on checked coordinates; sampled without replacement when the
    /// parameters have more.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-6,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// `(param, flat index)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
}

/// Compares the tape gradient of the scalar `f` against central
/// differences. Error per coordinate is
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn gradcheck<F>(f: F, params: &[Tensor], opts: &GradcheckOptions) -> Result<GradcheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    if !(1e-7..=1e-3).contains(&opts.epsilon) {
        return Err(Error::InvalidConfig(format!(
            "gradcheck epsilon {} outside [1e-7, 1e-3]",
            opts.epsilon
        )));
    }
    let eval = |ps: &[Tensor]| -> f64 {
        let tape = Tape::inference();
        let vars: Vec<Var<'_>> = ps.iter().map(|p| tape.leaf(p.clone())).collect();
        f(&tape, &vars).item()
    };

    let tape = Tape::new();
    let vars: Vec<Var<'_>> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = f(&tape, &vars);
    let grads = tape.backward(&loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.get(v)).collect();

    let first = loss.item();
    let second = eval(params);
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(p, t)| (0..t.len()).map(move |i| (p, i)))
        .collect();
    let chosen: Vec<(usize, usize)> = match opts.max_coords {
        Some(cap) if cap < coords.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            let mut picks = sample(&mut rng, coords.len(), cap).into_vec();
            picks.sort_unstable();
            picks.into_iter().map(|i| coords[i]).collect()
        }
        _ => coords,
    };

    let mut work = params.to_vec();
    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        coords_checked: chosen.len(),
        worst: None,
    };
    for (p, i) in chosen {
        let orig = work[p].data()[i];
        work[p].data_mut()[i] = orig + opts.epsilon;
        let plus = eval(&work);
        work[p].data_mut()[i] = orig - opts.epsilon;
        let minus = eval(&work);
        work[p].data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * opts.epsilon);
        let a = analytic[p].data()[i];
        let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
        let err = if err.is_nan() { f64::INFINITY } else { err };
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = err;
            report.worst = Some((p, i));
        }
    }
    Ok(report)
}
