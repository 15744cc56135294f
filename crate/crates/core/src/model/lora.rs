use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

/// Effective weight `w + λ·(α/r)·a·b` for `w: [d_in, d_out]`,
/// `a: [d_in, r]`, `b: [r, d_out]`. At `λ = 0` the result is `w` itself.
pub fn apply_lora<T: Real>(
    w: &Tensor<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    lambda: f64,
    alpha: f64,
    rank: usize,
) -> Result<Tensor<T>> {
    let (&[d_in, d_out], &[a_rows, a_rank], &[b_rank, b_cols]) = (w.shape(), a.shape(), b.shape())
    else {
        return Err(Error::domain("adapter factors must be matrices"));
    };
    if a_rank != rank || b_rank != rank {
        return Err(Error::domain(format!(
            "adapter rank {a_rank}/{b_rank} does not match configured rank {rank}"
        )));
    }
    if a_rows != d_in || b_cols != d_out {
        return Err(Error::shape(format!(
            "adapter {:?}·{:?} for weight {:?}",
            a.shape(),
            b.shape(),
            w.shape()
        )));
    }
    if lambda == 0.0 {
        return Ok(w.clone());
    }
    let scale = T::of(lambda * alpha / rank as f64);
    let ab = a.matmul(b)?;
    let data = w
        .data()
        .iter()
        .zip(ab.data())
        .map(|(&x, &d)| x + scale * d)
        .collect();
    Tensor::new(w.shape(), data)
}
