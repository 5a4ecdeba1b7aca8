//! Central-difference verification of tape gradients.
//!
//! Checks always run in `f64`: cast model parameters and inputs with
//! [`Tensor::cast`] and rebuild the same graph on a `Tape<f64>`. The function
//! under test must be deterministic; a function whose value depends on
//! anything other than its inputs gives meaningless results.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Which coordinates to perturb.
#[derive(Clone, Copy, Debug)]
pub enum Coords {
    All,
    /// A seeded random subset of at most `count` coordinates drawn across all
    /// inputs.
    Sample { count: usize, seed: u64 },
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    /// `(input index, flat coordinate, analytic, numeric)` of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub checked: usize,
}

/// Denominator floor. A central difference at `eps = 1e-6` carries about
/// `1e-10 · |f|` of rounding error, so gradients below this size cannot be
/// resolved to a relative 1e-3 and are compared in absolute terms instead.
pub const ERROR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(ERROR_FLOOR)
}

/// Max relative error between the tape gradient of `f` at `input` and its
/// central difference with step `eps`, over every coordinate.
pub fn gradcheck<F>(f: F, input: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let report = gradcheck_multi(
        |tape, vars| f(tape, vars[0]),
        std::slice::from_ref(input),
        eps,
        Coords::All,
    )?;
    Ok(report.max_rel_error)
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).len() != 1 {
        return Err(Error::NonScalarLoss(tape.shape(out).to_vec()));
    }
    Ok(tape.value(out).item())
}

/// Gradient check of a scalar function of several tensors.
pub fn gradcheck_multi<F>(
    f: F,
    inputs: &[Tensor<f64>],
    eps: f64,
    coords: Coords,
) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();
    drop(tape);

    let total: usize = inputs.iter().map(Tensor::len).sum();
    let picks: Vec<usize> = match coords {
        Coords::All => (0..total).collect(),
        Coords::Sample { count, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut v = index::sample(&mut rng, total, count.min(total)).into_vec();
            v.sort_unstable();
            v
        }
    };

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for flat in picks {
        let (which, coord) = locate(inputs, flat);
        let orig = work[which].data()[coord];
        work[which].data_mut()[coord] = orig + eps;
        let plus = evaluate(&f, &work)?;
        work[which].data_mut()[coord] = orig - eps;
        let minus = evaluate(&f, &work)?;
        work[which].data_mut()[coord] = orig;

        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic[which][coord];
        let err = relative_error(a, numeric);
        report.checked += 1;
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            if err >= report.max_rel_error {
                report.worst = Some((which, coord, a, numeric));
            }
        }
    }
    Ok(report)
}

fn locate(inputs: &[Tensor<f64>], mut flat: usize) -> (usize, usize) {
    for (i, t) in inputs.iter().enumerate() {
        if flat < t.len() {
            return (i, flat);
        }
        flat -= t.len();
    }
    unreachable!("coordinate beyond inputs")
}
