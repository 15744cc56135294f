use crate::error::{Error, Result};

/// Diagonal Gaussian over the latent space.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGaussian {
    pub mean: Vec<f64>,
    pub log_variance: Vec<f64>,
}

impl LatentGaussian {
    pub fn standard(dim: usize) -> LatentGaussian {
        LatentGaussian {
            mean: vec![0.0; dim],
            log_variance: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `mean + exp(log_variance / 2) ⊙ noise`.
    pub fn reparameterize(&self, noise: &[f64]) -> Result<Vec<f64>> {
        if noise.len() != self.dim() {
            return Err(Error::shape(format!(
                "noise of length {} for latent dim {}",
                noise.len(),
                self.dim()
            )));
        }
        Ok(self
            .mean
            .iter()
            .zip(&self.log_variance)
            .zip(noise)
            .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
            .collect())
    }
}

/// Closed-form KL(q ‖ p) summed over dimensions.
pub fn kl_diag_gaussians(q: &LatentGaussian, p: &LatentGaussian) -> Result<f64> {
    if q.dim() != p.dim() || q.log_variance.len() != q.dim() || p.log_variance.len() != p.dim() {
        return Err(Error::domain(format!(
            "KL between latent dims {} and {}",
            q.dim(),
            p.dim()
        )));
    }
    let mut kl = 0.0;
    for i in 0..q.dim() {
        let (mq, lq, mp, lp) = (q.mean[i], q.log_variance[i], p.mean[i], p.log_variance[i]);
        kl += 0.5 * ((lq - lp).exp() + (mq - mp).powi(2) * (-lp).exp() - 1.0 + lp - lq);
    }
    Ok(kl)
}
