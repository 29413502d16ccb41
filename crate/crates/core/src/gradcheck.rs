//! Central finite-difference checks of tape gradients.

use serde::Serialize;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub num_parameters_checked: usize,
    pub step_size: f64,
}

/// Compares the tape gradient of `f` at `x` against central differences over
/// every element of `x`.
pub fn finite_difference_check<F>(f: F, x: &Tensor, step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    finite_difference_check_many(|tape, vs| f(tape, vs[0]), std::slice::from_ref(x), step, None)
}

/// Multi-input variant. `probes` restricts the check to `(input, element)`
/// pairs; `None` probes every element of every input.
///
/// Relative error per element is `|g − g̃| / max(|g|, |g̃|, 1e-12)`.
pub fn finite_difference_check_many<F>(
    f: F,
    inputs: &[Tensor],
    step: f64,
    probes: Option<&[(usize, usize)]>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::Contract(format!("finite-difference step must be positive, got {step}")));
    }
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let root = f(&mut tape, &vars)?;
        let v = tape.value(root);
        if !v.is_scalar() {
            return Err(Error::Contract("checked function must return a scalar".into()));
        }
        let v = v.item();
        if !v.is_finite() {
            return Err(Error::Evaluation(format!("function value is {v}")));
        }
        Ok(v)
    };

    eval(inputs)?;
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let root = f(&mut tape, &vars)?;
    let grads = tape.backward(root)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();

    let all: Vec<(usize, usize)>;
    let probes = match probes {
        Some(p) => p,
        None => {
            all = inputs
                .iter()
                .enumerate()
                .flat_map(|(t, x)| (0..x.len()).map(move |i| (t, i)))
                .collect();
            &all
        }
    };

    let mut work = inputs.to_vec();
    let mut max_rel: f64 = 0.0;
    for &(t, i) in probes {
        let orig = work[t].data()[i];
        work[t].data_mut()[i] = orig + step;
        let plus = eval(&work)?;
        work[t].data_mut()[i] = orig - step;
        let minus = eval(&work)?;
        work[t].data_mut()[i] = orig;

        let numeric = (plus - minus) / (2.0 * step);
        let exact = analytic[t].data()[i];
        let denom = exact.abs().max(numeric.abs()).max(1e-12);
        max_rel = max_rel.max((exact - numeric).abs() / denom);
    }
    Ok(GradCheckReport { max_relative_error: max_rel, num_parameters_checked: probes.len(), step_size: step })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::from_vec(vec![0.3, -1.2, 2.5, 0.0]);
        let r = finite_difference_check(|t, v| Ok(t.frobenius_norm_sq(v)), &x, 1e-5).unwrap();
        assert!(r.max_relative_error < 1e-8, "{r:?}");
        assert_eq!(r.num_parameters_checked, 4);
        assert_eq!(r.step_size, 1e-5);
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::from_vec(vec![1.0, 2.0]);
        let r = finite_difference_check(|t, _| Ok(t.constant(Tensor::scalar(4.0))), &x, 1e-5).unwrap();
        assert_eq!(r.max_relative_error, 0.0);
    }

    #[test]
    fn non_finite_value_is_evaluation_error() {
        let x = Tensor::from_vec(vec![1000.0]);
        let r = finite_difference_check(
            |t, v| {
                let e = t.exp(v);
                Ok(t.sum(e))
            },
            &x,
            1e-5,
        );
        assert!(matches!(r, Err(Error::Evaluation(_))));
    }

    #[test]
    fn rejects_non_positive_step() {
        let x = Tensor::from_vec(vec![1.0]);
        assert!(finite_difference_check(|t, v| Ok(t.sum(v)), &x, 0.0).is_err());
    }
}
