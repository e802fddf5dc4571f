//! Central finite-difference checks for tape gradients.

use crate::error::{DiffError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Evaluates `f` on a fresh tape with every tensor in `params` as a trainable
/// leaf and returns the scalar loss together with the analytic gradients.
pub fn value_and_grad<F>(f: &F, params: &[Tensor]) -> Result<(f64, Vec<Tensor>)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let value = tape.value(loss).item();
    tape.backward(loss)?;
    let grads = vars.iter().map(|&v| tape.grad_or_zeros(v)).collect();
    Ok((value, grads))
}

fn eval<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let value = tape.value(loss);
    if value.numel() != 1 {
        return Err(DiffError::Contract("grad_check needs a scalar function".into()));
    }
    Ok(value.item())
}

/// Largest `|analytic − central| / max(1, |central|)` over every parameter
/// entry, where `central = (f(θ+eps) − f(θ−eps)) / 2eps`.
pub fn compare_with_finite_differences<F>(
    f: &F,
    params: &[Tensor],
    analytic: &[Tensor],
    eps: f64,
) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if analytic.len() != params.len() {
        return Err(DiffError::Contract(format!(
            "{} gradients for {} parameters",
            analytic.len(),
            params.len()
        )));
    }
    let mut worst = 0.0f64;
    let mut probe = params.to_vec();
    for (p, grad) in analytic.iter().enumerate() {
        for i in 0..params[p].numel() {
            let orig = params[p].data()[i];
            probe[p].data_mut()[i] = orig + eps;
            let up = eval(f, &probe)?;
            probe[p].data_mut()[i] = orig - eps;
            let down = eval(f, &probe)?;
            probe[p].data_mut()[i] = orig;
            let central = (up - down) / (2.0 * eps);
            let err = (grad.data()[i] - central).abs() / central.abs().max(1.0);
            if err.is_nan() {
                return Err(DiffError::Numeric(format!(
                    "NaN gradient comparison at parameter {} entry {}",
                    p, i
                )));
            }
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Maximum relative error between reverse-mode gradients of `f` and central
/// finite differences with step `eps`.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (_, analytic) = value_and_grad(&f, params)?;
    compare_with_finite_differences(&f, params, &analytic, eps)
}
