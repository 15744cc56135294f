use std::rc::Rc;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Largest norm-wise relative error `‖g_ad − g_fd‖ / max(‖g_ad‖, ‖g_fd‖)`
/// over `inputs`, comparing reverse-mode gradients of the scalar built by `f`
/// with central differences of step `h`.
pub fn finite_difference_error<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.param(Rc::new(t.clone()))).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(Rc::new(t.clone()))).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut worst: f64 = 0.0;
    let mut values = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        let mut diff2 = 0.0;
        let mut numeric2 = 0.0;
        for j in 0..inputs[i].len() {
            let x = inputs[i].data()[j];
            values[i].data_mut()[j] = x + h;
            let up = eval(&values)?;
            values[i].data_mut()[j] = x - h;
            let down = eval(&values)?;
            values[i].data_mut()[j] = x;
            let fd = (up - down) / (2.0 * h);
            diff2 += (fd - analytic.data()[j]).powi(2);
            numeric2 += fd * fd;
        }
        let scale = analytic.norm().max(numeric2.sqrt());
        if !scale.is_finite() || !diff2.is_finite() {
            return Err(Error::Numeric("non-finite gradient in check".into()));
        }
        if scale > 0.0 {
            worst = worst.max(diff2.sqrt() / scale);
        }
    }
    Ok(worst)
}
