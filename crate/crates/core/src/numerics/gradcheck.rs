use super::tape::{GradTape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Compares tape gradients against central finite differences.
///
/// `build` records a scalar loss on the given tape from leaf variables holding
/// `params`. Returns the largest entrywise relative error, using
/// `max(|analytic|, |numeric|, 1e-12)` as the denominator.
pub fn finite_diff_check<F>(build: F, params: &[Tensor], epsilon: f64) -> Result<f64>
where
    F: Fn(&mut GradTape, &[Var]) -> Result<Var>,
{
    if epsilon.is_nan() || epsilon <= 0.0 {
        return Err(Error::Config(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    let mut tape = GradTape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut tape = GradTape::new();
        let vars: Vec<Var> = perturbed.iter().map(|p| tape.constant(p.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        let v = tape.value(loss).as_slice()[0];
        if !v.is_finite() {
            return Err(Error::Numeric("objective is not finite".into()));
        }
        Ok(v)
    };

    let mut work: Vec<Tensor> = params.to_vec();
    let mut worst: f64 = 0.0;
    for (pi, param) in params.iter().enumerate() {
        for k in 0..param.len() {
            let orig = param.as_slice()[k];
            work[pi].as_mut_slice()[k] = orig + epsilon;
            let up = eval(&work)?;
            work[pi].as_mut_slice()[k] = orig - epsilon;
            let down = eval(&work)?;
            work[pi].as_mut_slice()[k] = orig;
            let numeric = (up - down) / (2.0 * epsilon);
            let a = analytic[pi].as_slice()[k];
            let denom = a.abs().max(numeric.abs()).max(1e-12);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
