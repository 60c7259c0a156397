//! Central finite-difference checks of tape gradients.

use crate::error::{Result, TensorError};
use crate::registry::ParamRegistry;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Caps the coordinates probed per tensor; `None` probes all of them.
    pub max_coords_per_tensor: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            max_coords_per_tensor: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max |analytic − numeric| / max(1, |analytic|, |numeric|)
    pub max_rel_error: f64,
    pub worst_path: String,
    pub worst_index: usize,
    pub coords_checked: usize,
}

/// Relative error used by every check in this module.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

fn probe_indices(n: usize, cap: Option<usize>) -> Vec<usize> {
    match cap {
        Some(c) if c < n => (0..c)
            .map(|i| (i * n) / c + (i * 7919) % (n / c).max(1))
            .collect(),
        _ => (0..n).collect(),
    }
}

fn eval_scalar(tape: &Tape, loss: Var) -> Result<f64> {
    let v = tape.value(loss);
    if v.shape() != [1] {
        return Err(TensorError::NonScalarLoss {
            shape: v.shape().to_vec(),
        });
    }
    Ok(v.item())
}

/// Checks every differentiable parameter a builder reads from `registry`.
pub fn grad_check_registry<F>(
    registry: &ParamRegistry,
    opts: GradCheckOptions,
    build: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamRegistry) -> Result<Var>,
{
    if !(opts.eps > 0.0) {
        return Err(TensorError::InvalidArgument(format!(
            "eps must be positive, got {}",
            opts.eps
        )));
    }
    let mut tape = Tape::new();
    let loss = build(&mut tape, registry)?;
    eval_scalar(&tape, loss)?;
    let grads = tape.backward(loss)?;
    drop(tape);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_path: String::new(),
        worst_index: 0,
        coords_checked: 0,
    };
    let mut work = registry.clone();
    let eval = |reg: &ParamRegistry| -> Result<f64> {
        let mut t = Tape::new();
        let l = build(&mut t, reg)?;
        eval_scalar(&t, l)
    };
    let paths: Vec<String> = registry.paths().map(str::to_string).collect();
    for path in paths {
        let n = registry.get(&path).expect("path from registry").len();
        let zeros = Tensor::zeros(registry.get(&path).expect("path").shape());
        let analytic = grads.param(&path).unwrap_or(&zeros);
        for i in probe_indices(n, opts.max_coords_per_tensor) {
            let orig = registry.get(&path).expect("path").data()[i];
            work.value_mut(&path).expect("path")[i] = orig + opts.eps;
            let plus = eval(&work)?;
            work.value_mut(&path).expect("path")[i] = orig - opts.eps;
            let minus = eval(&work)?;
            work.value_mut(&path).expect("path")[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let err = relative_error(analytic.data()[i], numeric);
            report.coords_checked += 1;
            if err > report.max_rel_error || report.worst_path.is_empty() {
                report.max_rel_error = report.max_rel_error.max(err);
                if err >= report.max_rel_error {
                    report.worst_path = path.clone();
                    report.worst_index = i;
                }
            }
        }
    }
    Ok(report)
}

/// Checks the gradient of a scalar graph with respect to each input tensor
/// and returns the maximum relative error over all coordinates.
pub fn grad_check<F>(inputs: &[Tensor], eps: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut reg = ParamRegistry::new();
    let names: Vec<String> = (0..inputs.len()).map(|i| format!("input.{i:04}")).collect();
    for (name, t) in names.iter().zip(inputs) {
        reg.insert(name.clone(), t.clone())?;
    }
    let opts = GradCheckOptions {
        eps,
        max_coords_per_tensor: None,
    };
    let report = grad_check_registry(&reg, opts, |tape, reg| {
        let vars = names
            .iter()
            .map(|n| tape.param(reg, n))
            .collect::<Result<Vec<_>>>()?;
        build(tape, &vars)
    })?;
    Ok(report.max_rel_error)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_graph_has_zero_error() {
        let x = Tensor::vector(vec![1.0, 2.0, 3.0]);
        let err = grad_check(&[x], 1e-5, |tape, _vars| {
            let c = tape.constant(Tensor::scalar(4.0));
            tape.square(c)
        })
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn rejects_bad_eps() {
        let x = Tensor::scalar(1.0);
        assert!(grad_check(&[x], 0.0, |t, v| t.square(v[0])).is_err());
    }

    #[test]
    fn detects_wrong_gradient() {
        // A detached factor makes the analytic gradient half the true one.
        let x = Tensor::scalar(2.0);
        let err = grad_check(&[x], 1e-5, |t, v| {
            let d = t.detach(v[0]);
            t.mul(v[0], d)
        })
        .unwrap();
        assert!(err > 0.1);
    }

    #[test]
    fn probe_indices_in_range() {
        for n in [1, 5, 64, 1000] {
            for cap in [1, 3, 64] {
                let idx = probe_indices(n, Some(cap));
                assert!(idx.iter().all(|&i| i < n));
                assert_eq!(idx.len(), cap.min(n));
            }
        }
    }
}
