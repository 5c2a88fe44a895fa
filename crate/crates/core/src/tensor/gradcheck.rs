use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Options for [`gradient_check`].
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Central-difference step; must lie in `[1e-7, 1e-4]`.
    pub step: f64,
    /// Check at most this many coordinates, sampled without replacement.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: 1e-5,
            max_coords: None,
            seed: 0,
        }
    }
}

/// Compares tape gradients of a scalar function against central differences
/// and returns the largest relative error
/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
///
/// `f` receives a fresh tape and one leaf per entry of `params`, in order.
pub fn gradient_check<F>(f: F, params: &[Tensor], opts: &GradCheck) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-4).contains(&opts.step) {
        return Err(Error::Numeric(format!(
            "finite-difference step {} outside [1e-7, 1e-4]",
            opts.step
        )));
    }

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let root = f(&mut tape, &vars)?;
    check_finite(tape.value(root).item())?;
    tape.backward(root)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_default())
        .collect();

    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(p, t)| (0..t.len()).map(move |i| (p, i)))
        .collect();
    let chosen: Vec<(usize, usize)> = match opts.max_coords {
        Some(n) if n < coords.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            let mut idx = sample(&mut rng, coords.len(), n).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| coords[i]).collect()
        }
        _ => coords,
    };

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|p| tape.constant(p.clone())).collect();
        let root = f(&mut tape, &vars)?;
        let v = tape.value(root).item();
        check_finite(v)?;
        Ok(v)
    };

    let mut worst = 0.0f64;
    let mut work = params.to_vec();
    for (p, i) in chosen {
        let orig = work[p].data()[i];
        work[p].data_mut()[i] = orig + opts.step;
        let plus = eval(&work)?;
        work[p].data_mut()[i] = orig - opts.step;
        let minus = eval(&work)?;
        work[p].data_mut()[i] = orig;

        let numeric = (plus - minus) / (2.0 * opts.step);
        let a = analytic[p][i];
        check_finite(a)?;
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

fn check_finite(v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("gradient check saw {v}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact_under_central_differences() {
        let err = gradient_check(
            |tape, v| {
                let sq = tape.mul(v[0], v[0])?;
                Ok(tape.sum(sq))
            },
            &[Tensor::scalar(3.0)],
            &GradCheck::default(),
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn step_outside_range_is_rejected() {
        let opts = GradCheck {
            step: 1e-2,
            ..GradCheck::default()
        };
        let r = gradient_check(|tape, v| Ok(tape.sum(v[0])), &[Tensor::scalar(1.0)], &opts);
        assert!(matches!(r, Err(Error::Numeric(_))));
    }

    #[test]
    fn non_finite_function_is_a_numeric_error() {
        let r = gradient_check(
            |tape, v| {
                let big = tape.scale(v[0], f64::INFINITY);
                Ok(tape.sum(big))
            },
            &[Tensor::scalar(1.0)],
            &GradCheck::default(),
        );
        assert!(matches!(r, Err(Error::Numeric(_))));
    }
}
