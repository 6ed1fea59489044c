//! Central finite-difference verification of the tape's backward pass.
//!
//! The checked graph is evaluated in `f64`. Coordinates whose `±ε` probes
//! land on a different side of a ReLU, max or L1 kink than the base point
//! are skipped and counted; there the one-sided derivatives disagree and no
//! finite difference is meaningful.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{dim_err, GradFault, ParamStore, Tape, Tensor, TensorError, Var};

/// Coordinates above this count are subsampled.
pub const FULL_CHECK_LIMIT: usize = 10_000;
/// Size of the seeded subsample taken above [`FULL_CHECK_LIMIT`].
pub const SUBSAMPLE_SIZE: usize = 1_500;
/// Gradients below this magnitude are compared in absolute terms.
pub const ABS_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, flat coordinate)` of the worst comparison.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub skipped_kinks: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    pub seed: u64,
    pub fault: Option<GradFault>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-3,
            seed: 0x5eed,
            fault: None,
        }
    }
}

/// `f64` copies of the named parameters, ready to be passed as inputs and
/// re-bound with [`Tape::bind_param`] inside the checked closure.
pub fn param_inputs(store: &ParamStore, names: &[String]) -> crate::Result<Vec<Tensor<f64>>> {
    names
        .iter()
        .map(|n| Ok(store.get(n)?.cast::<f64>().with_requires_grad(true)))
        .collect()
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

/// Checks `f` against central differences over every input that has
/// `requires_grad` set.
pub fn grad_check<F, E>(inputs: &[Tensor<f64>], epsilon: f64, f: F) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, E>,
    E: From<TensorError>,
{
    grad_check_with(
        GradCheckOptions {
            epsilon,
            ..Default::default()
        },
        inputs,
        f,
    )
}

pub fn grad_check_with<F, E>(
    opts: GradCheckOptions,
    inputs: &[Tensor<f64>],
    f: F,
) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, E>,
    E: From<TensorError>,
{
    if !(opts.epsilon > 0.0 && opts.epsilon <= 0.1) {
        return Err(dim_err(
            "grad_check",
            format!("epsilon {} outside (0, 0.1]", opts.epsilon),
        )
        .into());
    }
    let eval = |values: &[Tensor<f64>],
                fault: Option<GradFault>|
     -> Result<(Tape<f64>, Vec<Var>, Var), E> {
        let mut tape = Tape::new().with_branch_tracking().with_fault(fault);
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok((tape, vars, loss))
    };

    let (mut tape, vars, loss) = eval(inputs, opts.fault)?;
    tape.backward(loss).map_err(E::from)?;
    let base_sig = tape.branch_signature();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            tape.grad(v)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();
    drop(tape);

    let mut coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .filter(|(_, t)| t.requires_grad())
        .flat_map(|(i, t)| (0..t.numel()).map(move |c| (i, c)))
        .collect();
    if coords.len() > FULL_CHECK_LIMIT {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut picked: Vec<usize> = sample(&mut rng, coords.len(), SUBSAMPLE_SIZE).into_vec();
        picked.sort_unstable();
        coords = picked.into_iter().map(|i| coords[i]).collect();
    }

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        skipped_kinks: 0,
    };
    let mut probe = inputs.to_vec();
    for (i, c) in coords {
        let x0 = inputs[i].data()[c];
        probe[i].data_mut()[c] = x0 + opts.epsilon;
        let (tp, _, lp) = eval(&probe, None)?;
        probe[i].data_mut()[c] = x0 - opts.epsilon;
        let (tm, _, lm) = eval(&probe, None)?;
        probe[i].data_mut()[c] = x0;
        if tp.branch_signature() != base_sig || tm.branch_signature() != base_sig {
            report.skipped_kinks += 1;
            continue;
        }
        let numeric = (tp.scalar(lp) - tm.scalar(lm)) / (2.0 * opts.epsilon);
        let err = relative_error(analytic[i][c], numeric);
        report.checked += 1;
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = err.max(report.max_rel_error);
            report.worst = Some((i, c));
        }
    }
    Ok(report)
}
