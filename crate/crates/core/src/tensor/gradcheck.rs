//! Central finite-difference gradient checking.

use super::{Graph, Tensor, Var};
use crate::error::Result;
use crate::scalar::Scalar;

/// Below this magnitude gradients are compared absolutely rather than
/// relatively, so rounding noise in near-zero derivatives is not amplified.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input, flat index)` of the coordinate with the largest error.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    /// Coordinates skipped because a ReLU or max-pool switched branches
    /// within `h` of the evaluation point.
    pub excluded: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance && self.checked > 0
    }
}

/// Compares reverse-mode gradients of a scalar function of one tensor
/// against central differences `(f(x+h e_i) - f(x-h e_i)) / 2h`.
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, h: f64, tol: f64) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    grad_check_many(|g, vars| f(g, vars[0]), std::slice::from_ref(x), h, tol)
}

/// [`grad_check`] over several inputs at once; every coordinate of every
/// input is perturbed.
pub fn grad_check_many<T, F>(
    f: F,
    inputs: &[Tensor<T>],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<T>]| -> Result<(f64, Vec<usize>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.constant(x.clone())).collect();
        let y = f(&mut g, &vars)?;
        Ok((g.value(y).item().f64(), g.kink_signature()))
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.param(x.clone())).collect();
    let y = f(&mut g, &vars)?;
    g.backward(y)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| {
            g.grad(v)
                .expect("parameter gradient")
                .iter()
                .map(|d| d.f64())
                .collect()
        })
        .collect();
    let base_sig = g.kink_signature();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        excluded: 0,
        tolerance: tol,
    };
    let mut probe = inputs.to_vec();
    for (t, input) in inputs.iter().enumerate() {
        for i in 0..input.len() {
            let orig = input.data()[i];
            probe[t].data_mut()[i] = T::of(orig.f64() + h);
            let (fp, sp) = eval(&probe)?;
            probe[t].data_mut()[i] = T::of(orig.f64() - h);
            let (fm, sm) = eval(&probe)?;
            probe[t].data_mut()[i] = orig;
            if sp != base_sig || sm != base_sig {
                report.excluded += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[t][i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((t, i));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_is_exact_on_dyadic_points() {
        let x = Tensor::<f64>::from_f64([4], &[0.5, -1.0, 2.25, 3.0]).unwrap();
        let r = grad_check(|g, x| g.sum(x), &x, 2f64.powi(-10), 1e-4).unwrap();
        assert_eq!(r.max_rel_error, 0.0);
        assert_eq!(r.checked, 4);
    }

    #[test]
    fn relu_at_exact_zero_is_excluded() {
        let x = Tensor::<f64>::from_f64([3], &[0.0, 1.3, -0.7]).unwrap();
        let r = grad_check(
            |g, x| {
                let y = g.relu(x)?;
                g.sum(y)
            },
            &x,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert_eq!(r.excluded, 1);
        assert_eq!(r.checked, 2);
        assert!(r.passed());
    }

    #[test]
    fn square_gradient_matches() {
        let x = Tensor::<f64>::from_f64([2], &[1.0, 2.0]).unwrap();
        let ok = grad_check(
            |g, x| {
                let y = g.mul(x, x)?;
                g.sum(y)
            },
            &x,
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(ok.passed(), "{ok:?}");
    }
}
