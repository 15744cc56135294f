use crate::error::{Error, Result};
use crate::model::{Condition, Forward, StarVae, TokenBatch};
use crate::numerics::{Real, Tensor, Var};
use crate::selfies::PAD;

/// Graph handles of one ELBO evaluation.
#[derive(Debug, Clone, Copy)]
pub struct Elbo {
    /// `recon + beta * kl`.
    pub loss: Var,
    /// Mean negative log-likelihood per non-pad target token.
    pub recon: Var,
    /// Batch KL divided by the number of non-pad target tokens.
    pub kl: Var,
    /// `[B, T-1, vocab]` teacher-forced logits.
    pub logits: Var,
}

/// Negative ELBO of framed rows (`<sos> … <eos> <pad>*`) under teacher
/// forcing. `noise` (`[B, latent]`) drives the reparameterized sample; the
/// prior is conditional when `cond` is given.
pub fn elbo<T: Real>(
    model: &StarVae<T>,
    fx: &mut Forward<'_, T>,
    batch: &TokenBatch,
    cond: Option<&Condition>,
    beta: f64,
    noise: &Tensor<T>,
) -> Result<Elbo> {
    if batch.len < 2 {
        return Err(Error::shape("framed rows need at least two tokens"));
    }
    let (mu, lv) = model.encode(fx, batch, cond)?;
    let g = &mut fx.graph;
    let eps = g.constant(noise.clone());
    if g.shape(eps) != g.shape(mu) {
        return Err(Error::shape(format!(
            "noise {:?} for latent {:?}",
            noise.shape(),
            g.shape(mu)
        )));
    }
    let half = g.scale(lv, T::of(0.5));
    let std = g.exp(half);
    let spread = g.mul(std, eps)?;
    let z = g.add(mu, spread)?;

    let inputs = batch.columns(0, batch.len - 1);
    let targets = batch.columns(1, batch.len);
    let logits = model.decode(fx, &inputs, z, cond)?;
    let vocab = model.config.vocab_size;
    let g = &mut fx.graph;
    let flat = g.reshape(logits, &[targets.ids.len(), vocab])?;
    let recon = g.cross_entropy(flat, &targets.ids, PAD)?;

    let (p_mu, p_lv) = match cond {
        Some(c) => model.prior(fx, &c.y)?,
        None => {
            let shape = fx.graph.shape(mu).to_vec();
            let zeros = Tensor::zeros(&shape);
            (fx.graph.constant(zeros.clone()), fx.graph.constant(zeros))
        }
    };
    let g = &mut fx.graph;
    // 0.5 * sum(exp(lq - lp) + (mq - mp)^2 exp(-lp) - 1 + lp - lq)
    let d_lv = g.sub(lv, p_lv)?;
    let ratio = g.exp(d_lv);
    let d_mu = g.sub(mu, p_mu)?;
    let sq = g.mul(d_mu, d_mu)?;
    let neg_lp = g.scale(p_lv, T::of(-1.0));
    let inv_var = g.exp(neg_lp);
    let maha = g.mul(sq, inv_var)?;
    let t = g.add(ratio, maha)?;
    let t = g.sub(t, d_lv)?;
    let per_dim = g.add_scalar(t, T::of(-1.0));
    let total = g.sum_all(per_dim);
    let n_tokens = targets.ids.iter().filter(|&&t| t != PAD).count().max(1);
    let kl = g.scale(total, T::of(0.5 / n_tokens as f64));
    let weighted = g.scale(kl, T::of(beta));
    let loss = g.add(recon, weighted)?;
    Ok(Elbo {
        loss,
        recon,
        kl,
        logits,
    })
}

/// Fraction of non-pad targets whose argmax logit is correct.
pub fn token_accuracy<T: Real>(logits: &Tensor<T>, batch: &TokenBatch) -> f64 {
    let v = logits.last_dim();
    let targets = batch.columns(1, batch.len);
    let (mut hit, mut total) = (0usize, 0usize);
    for (r, &t) in targets.ids.iter().enumerate() {
        if t == PAD {
            continue;
        }
        total += 1;
        let row = &logits.data()[r * v..(r + 1) * v];
        if argmax(row) == t as usize {
            hit += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    }
}

/// Index of the largest entry; the first one on ties.
pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}
