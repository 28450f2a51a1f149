use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Central-difference half step.
    pub step: f64,
    /// Check a random subset of at most this many input entries.
    pub max_entries: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_entries: None,
            seed: 0,
        }
    }
}

/// Compares tape gradients of a scalar closure against central differences.
///
/// Returns the maximum over checked entries of
/// `|analytic - numeric| / max(1, |analytic|)`.
pub fn gradient_check<F>(mut f: F, inputs: &[Tensor], opts: &GradCheckOptions) -> Result<f64>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut eval = |values: &[Tensor], with_grad: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values
            .iter()
            .map(|t| tape.leaf(t.clone().with_requires_grad(with_grad)))
            .collect();
        let out = f(&mut tape, &vars)?;
        if tape.value(out).numel() != 1 {
            return Err(Error::Shape("gradient_check closure must be scalar".into()));
        }
        let value = tape.scalar(out);
        if !value.is_finite() {
            return Err(Error::Numeric(format!("closure returned {value}")));
        }
        if !with_grad {
            return Ok((value, Vec::new()));
        }
        tape.backward(out)?;
        let grads = vars
            .iter()
            .map(|&v| {
                tape.grad(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; tape.value(v).numel()])
            })
            .collect();
        Ok((value, grads))
    };

    let (_, analytic) = eval(inputs, true)?;

    let entries: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(t, x)| (0..x.numel()).map(move |i| (t, i)))
        .collect();
    let chosen: Vec<(usize, usize)> = match opts.max_entries {
        Some(max) if max < entries.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            let mut picks = sample(&mut rng, entries.len(), max).into_vec();
            picks.sort_unstable();
            picks.into_iter().map(|i| entries[i]).collect()
        }
        _ => entries,
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut worst = 0.0f64;
    for (t, i) in chosen {
        let orig = work[t].data()[i];
        work[t].data_mut()[i] = orig + opts.step;
        let (plus, _) = eval(&work, false)?;
        work[t].data_mut()[i] = orig - opts.step;
        let (minus, _) = eval(&work, false)?;
        work[t].data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * opts.step);
        let a = analytic[t][i];
        if !a.is_finite() || !numeric.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient at input {t}[{i}]")));
        }
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_has_exact_gradient() {
        let x = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let mut tape = Tape::new();
        let v = tape.param(x.clone());
        let sq = tape.mul(v, v).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(v).unwrap(), &[2.0, 4.0, 6.0]);

        let err = gradient_check(
            |tape, v| {
                let sq = tape.mul(v[0], v[0])?;
                Ok(tape.sum(sq))
            },
            &[x],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(err < 1e-8, "err = {err}");
    }

    #[test]
    fn non_finite_closure_is_reported() {
        let x = Tensor::new(vec![1], vec![0.0]).unwrap();
        let r = gradient_check(
            |tape, v| {
                let s = tape.scale(v[0], f64::INFINITY);
                Ok(tape.sum(s))
            },
            &[x],
            &GradCheckOptions::default(),
        );
        assert!(matches!(r, Err(Error::Numeric(_))));
    }
}
