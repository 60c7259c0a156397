//! Parameter initialization and shared per-point affine layers.

use rand::Rng as _;
use vrckit_tensor::{ParamRegistry, Tape, Tensor, Var};

use crate::error::Result;
use crate::rng::Rng;

/// Registers `{path}.weight` `[fan_in, fan_out]`, uniform in ±√(1/fan_in),
/// and, when `bias` is set, a zero `{path}.bias`.
pub fn init_linear(
    reg: &mut ParamRegistry,
    rng: &mut Rng,
    path: &str,
    fan_in: usize,
    fan_out: usize,
    bias: bool,
) -> Result<()> {
    let bound = (1.0 / fan_in as f64).sqrt();
    let w = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    reg.insert(
        format!("{path}.weight"),
        Tensor::new(vec![fan_in, fan_out], w)?,
    )?;
    if bias {
        reg.insert(format!("{path}.bias"), Tensor::zeros(&[fan_out]))?;
    }
    Ok(())
}

/// Registers a stack of biased affine layers `{prefix}.{i}` with the given widths.
pub fn init_mlp(
    reg: &mut ParamRegistry,
    rng: &mut Rng,
    prefix: &str,
    dims: &[usize],
) -> Result<()> {
    for (i, w) in dims.windows(2).enumerate() {
        init_linear(reg, rng, &format!("{prefix}.{i}"), w[0], w[1], true)?;
    }
    Ok(())
}

/// `x · W (+ b)` using the parameters registered under `path`.
pub fn linear(tape: &mut Tape, reg: &ParamRegistry, path: &str, x: Var) -> Result<Var> {
    let w = tape.param(reg, &format!("{path}.weight"))?;
    let bias_path = format!("{path}.bias");
    let b = if reg.contains(&bias_path) {
        Some(tape.param(reg, &bias_path)?)
    } else {
        None
    };
    Ok(tape.linear(x, w, b)?)
}

/// Runs `{prefix}.0 … {prefix}.{layers-1}` with ReLU after every layer, or
/// after every layer but the last when `relu_last` is false.
pub fn mlp(
    tape: &mut Tape,
    reg: &ParamRegistry,
    prefix: &str,
    x: Var,
    layers: usize,
    relu_last: bool,
) -> Result<Var> {
    let mut h = x;
    for i in 0..layers {
        h = linear(tape, reg, &format!("{prefix}.{i}"), h)?;
        if relu_last || i + 1 < layers {
            h = tape.relu(h)?;
        }
    }
    Ok(h)
}

/// Overwrites every value of a registered parameter with zeros.
pub fn zero_param(reg: &mut ParamRegistry, path: &str) -> Result<()> {
    let v = reg
        .value_mut(path)
        .ok_or_else(|| crate::Error::InvalidArgument(format!("no parameter {path}")))?;
    v.iter_mut().for_each(|x| *x = 0.0);
    Ok(())
}
