use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of comparing analytic gradients with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|a − n| / max(|a|, |n|, floor)` over all checked coordinates;
    /// the floor is `1e-8` unless scaled.
    pub max_rel_error: f64,
    /// `(input index, flat coordinate)` where the maximum occurred.
    pub worst: (usize, usize),
    pub coordinates: usize,
}

/// Checks every coordinate of every input. `f` must return a scalar.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let all: Vec<Vec<usize>> = inputs.iter().map(|t| (0..t.numel()).collect()).collect();
    grad_check_inputs(f, inputs, &all, eps)
}

/// Like [`grad_check`], restricted to `coords[i]` of input `i`.
pub fn grad_check_inputs<F>(
    f: F,
    inputs: &[Tensor],
    coords: &[Vec<usize>],
    eps: f64,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    grad_check_scaled(f, inputs, coords, eps, 0.0)
}

/// Like [`grad_check_inputs`], but the relative-error denominator is at least
/// `floor_fraction` times the largest checked analytic magnitude. Entries far
/// below the component's gradient scale are then judged against that scale,
/// where central-difference rounding noise no longer dominates.
pub fn grad_check_scaled<F>(
    f: F,
    inputs: &[Tensor],
    coords: &[Vec<usize>],
    eps: f64,
    floor_fraction: f64,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    if coords.len() != inputs.len() {
        return Err(Error::Usage(format!(
            "{} coordinate lists for {} inputs",
            coords.len(),
            inputs.len()
        )));
    }
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let tape = Tape::with_finite_check(true);
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let y = f(&tape, &vars)?;
        scalar_of(y)
    };

    let analytic: Vec<Tensor> = {
        let tape = Tape::with_finite_check(true);
        let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
        let y = f(&tape, &vars)?;
        scalar_of(y)?;
        tape.backward(y)?;
        vars.iter()
            .zip(inputs)
            .map(|(&v, x)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(x.shape())))
            .collect()
    };

    let scale = coords
        .iter()
        .zip(&analytic)
        .flat_map(|(list, g)| list.iter().filter_map(|&j| g.data().get(j)))
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (floor_fraction * scale).max(1e-8);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        coordinates: 0,
    };
    let mut probe = inputs.to_vec();
    for (i, list) in coords.iter().enumerate() {
        for &j in list {
            let orig = probe[i].data()[j];
            probe[i].data_mut()[j] = orig + eps;
            let plus = eval(&probe)?;
            probe[i].data_mut()[j] = orig - eps;
            let minus = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[i].data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            report.coordinates += 1;
            if rel > report.max_rel_error || rel.is_nan() {
                report.max_rel_error = rel;
                report.worst = (i, j);
            }
        }
    }
    Ok(report)
}

fn scalar_of(y: Var<'_>) -> Result<f64> {
    let v = y.value();
    if v.numel() != 1 {
        return Err(Error::Usage(format!(
            "grad_check needs a scalar function, got shape {:?}",
            v.shape()
        )));
    }
    Ok(v.data()[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn exact_quadratic() {
        let x = Tensor::from_fn([5], |i| i as f64 - 2.3);
        let rep = grad_check(|_, v| v[0].mul(v[0])?.sum(), &[x], 1e-5).unwrap();
        assert!(rep.max_rel_error <= 1e-9, "{}", rep.max_rel_error);
        assert_eq!(rep.coordinates, 5);
    }

    #[test]
    fn silu_on_wide_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::uniform([16], -2.0, 2.0, &mut rng);
        let rep = grad_check(|_, v| v[0].silu()?.sum(), &[x], 1e-5).unwrap();
        assert!(rep.max_rel_error <= 1e-6, "{}", rep.max_rel_error);
    }

    #[test]
    fn non_scalar_output_is_usage_error() {
        let x = Tensor::zeros([3]);
        assert!(matches!(grad_check(|_, v| Ok(v[0]), &[x], 1e-5), Err(Error::Usage(_))));
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // At the ReLU kink the analytic slope is 0, central differences see 0.5.
        let x = Tensor::new([1], vec![0.0]).unwrap();
        let rep = grad_check(|_, v| v[0].relu()?.sum(), &[x], 1e-5).unwrap();
        assert!(rep.max_rel_error > 0.1);
    }
}
