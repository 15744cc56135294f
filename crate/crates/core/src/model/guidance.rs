use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ParamStore;
use crate::error::{Error, Result};
use crate::numerics::{Adam, Graph, Real, Tensor};

pub const GUIDE_HIDDEN: usize = 32;
const MIN_EXAMPLES: usize = 100;
const FIT_STEPS: usize = 1500;
const FIT_LR: f64 = 1e-2;

/// A scalar function of the latent with a gradient.
pub trait LatentFunction {
    fn value_and_gradient(&self, z: &[f64]) -> Result<(f64, Vec<f64>)>;
}

/// `f(z) = w2 · tanh(z W1 + b1) + b2`, rescaled to label units.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidancePredictor {
    pub latent_dim: usize,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: f64,
    label_mean: f64,
    label_std: f64,
}

impl LatentFunction for GuidancePredictor {
    fn value_and_gradient(&self, z: &[f64]) -> Result<(f64, Vec<f64>)> {
        if z.len() != self.latent_dim {
            return Err(Error::shape(format!(
                "latent of length {} for predictor dim {}",
                z.len(),
                self.latent_dim
            )));
        }
        let h = GUIDE_HIDDEN;
        let mut act = self.b1.clone();
        for (i, zi) in z.iter().enumerate() {
            for j in 0..h {
                act[j] += zi * self.w1[i * h + j];
            }
        }
        let mut value = self.b2;
        let mut upstream = vec![0.0; h];
        for j in 0..h {
            let t = act[j].tanh();
            value += self.w2[j] * t;
            upstream[j] = self.w2[j] * (1.0 - t * t);
        }
        let grad = (0..self.latent_dim)
            .map(|i| {
                let row = &self.w1[i * h..(i + 1) * h];
                self.label_std * row.iter().zip(&upstream).map(|(w, u)| w * u).sum::<f64>()
            })
            .collect();
        Ok((self.label_mean + self.label_std * value, grad))
    }
}

impl GuidancePredictor {
    pub fn predict(&self, z: &[f64]) -> Result<f64> {
        Ok(self.value_and_gradient(z)?.0)
    }

    /// Squared-error regression of `labels` on `latents` with an 80/20
    /// shuffled split. Returns the predictor and its held-out R².
    pub fn fit(latents: &[Vec<f64>], labels: &[f64], seed: u64) -> Result<(GuidancePredictor, f64)> {
        if latents.len() != labels.len() {
            return Err(Error::shape(format!(
                "{} latents for {} labels",
                latents.len(),
                labels.len()
            )));
        }
        if labels.len() < MIN_EXAMPLES {
            return Err(Error::domain(format!(
                "{} labeled examples, at least {MIN_EXAMPLES} required",
                labels.len()
            )));
        }
        let dim = latents[0].len();
        if dim == 0 || latents.iter().any(|z| z.len() != dim) {
            return Err(Error::shape("latents of unequal length"));
        }
        if labels.iter().any(|y| !y.is_finite()) || latents.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("non-finite training example".into()));
        }
        let (mean, std) = mean_std(labels);
        if std == 0.0 {
            return Err(Error::domain("labels have zero variance"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..labels.len()).collect();
        order.shuffle(&mut rng);
        let n_test = labels.len() / 5;
        let (test, train) = order.split_at(n_test);
        let test_labels: Vec<f64> = test.iter().map(|&i| labels[i]).collect();
        if mean_std(&test_labels).1 == 0.0 {
            return Err(Error::domain("held-out labels have zero variance"));
        }

        let h = GUIDE_HIDDEN;
        let x: Vec<f64> = train.iter().flat_map(|&i| latents[i].iter().copied()).collect();
        let x = Tensor::<f64>::new(&[train.len(), dim], x)?;
        let targets: Vec<f64> = train.iter().map(|&i| (labels[i] - mean) / std).collect();
        let targets = Tensor::<f64>::new(&[train.len(), 1], targets)?;
        let mut w1 = Tensor::<f64>::randn(&[dim, h], 1.0 / (dim as f64).sqrt(), &mut rng);
        let mut b1 = Tensor::<f64>::zeros(&[h]);
        let mut w2 = Tensor::<f64>::randn(&[h, 1], 1.0 / (h as f64).sqrt(), &mut rng);
        let mut b2 = Tensor::<f64>::zeros(&[1]);
        let mut adam = Adam::<f64>::new(FIT_LR);
        let scale = 1.0 / train.len() as f64;
        for _ in 0..FIT_STEPS {
            let mut g = Graph::<f64>::new();
            let vs = [&w1, &b1, &w2, &b2].map(|t| g.param(Rc::new(t.clone())));
            let xv = g.constant(x.clone());
            let tv = g.constant(targets.clone());
            let a = g.matmul(xv, vs[0])?;
            let a = g.add_row(a, vs[1])?;
            let a = g.tanh(a);
            let p = g.matmul(a, vs[2])?;
            let p = g.add_row(p, vs[3])?;
            let r = g.sub(p, tv)?;
            let sq = g.mul(r, r)?;
            let s = g.sum_all(sq);
            let loss = g.scale(s, scale);
            if !g.value(loss).all_finite() {
                return Err(Error::Numeric("guidance predictor loss is not finite".into()));
            }
            let grads = g.backward(loss)?;
            adam.begin_step();
            for ((name, t), v) in ["w1", "b1", "w2", "b2"]
                .into_iter()
                .zip([&mut w1, &mut b1, &mut w2, &mut b2])
                .zip(vs)
            {
                if let Some(gr) = grads.get(v) {
                    adam.update(name, t, gr)?;
                }
            }
        }
        let predictor = GuidancePredictor {
            latent_dim: dim,
            w1: w1.into_data(),
            b1: b1.into_data(),
            w2: w2.into_data(),
            b2: b2.item(),
            label_mean: mean,
            label_std: std,
        };
        let preds = test
            .iter()
            .map(|&i| predictor.predict(&latents[i]))
            .collect::<Result<Vec<_>>>()?;
        Ok((predictor, r_squared(&test_labels, &preds)))
    }

    /// Stores the weights under `guide.*` names.
    pub fn write_params<T: Real>(&self, store: &mut ParamStore<T>) -> Result<()> {
        let (d, h) = (self.latent_dim, GUIDE_HIDDEN);
        store.insert("guide.w1", Tensor::from_f64(&[d, h], &self.w1)?);
        store.insert("guide.b1", Tensor::from_f64(&[h], &self.b1)?);
        store.insert("guide.w2", Tensor::from_f64(&[h], &self.w2)?);
        let tail = [self.b2, self.label_mean, self.label_std];
        store.insert("guide.out", Tensor::from_f64(&[3], &tail)?);
        Ok(())
    }

    /// Reads weights written by [`GuidancePredictor::write_params`]; `None`
    /// when the store has none.
    pub fn read_params<T: Real>(store: &ParamStore<T>) -> Result<Option<GuidancePredictor>> {
        if !store.contains("guide.w1") {
            return Ok(None);
        }
        let f = |name: &str| -> Result<Vec<f64>> {
            Ok(store.get(name)?.data().iter().map(|x| x.f64()).collect())
        };
        let w1 = store.get("guide.w1")?;
        if w1.rank() != 2 || w1.shape()[1] != GUIDE_HIDDEN {
            return Err(Error::Checkpoint(format!("guide.w1 has shape {:?}", w1.shape())));
        }
        let tail = f("guide.out")?;
        let (b1, w2) = (f("guide.b1")?, f("guide.w2")?);
        if tail.len() != 3 || b1.len() != GUIDE_HIDDEN || w2.len() != GUIDE_HIDDEN {
            return Err(Error::Checkpoint("malformed guidance predictor".into()));
        }
        Ok(Some(GuidancePredictor {
            latent_dim: w1.shape()[0],
            w1: f("guide.w1")?,
            b1,
            w2,
            b2: tail[0],
            label_mean: tail[1],
            label_std: tail[2],
        }))
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Coefficient of determination of `pred` against `truth`.
pub fn r_squared(truth: &[f64], pred: &[f64]) -> f64 {
    let (mean, _) = mean_std(truth);
    let ss_tot: f64 = truth.iter().map(|y| (y - mean).powi(2)).sum();
    let ss_res: f64 = truth.iter().zip(pred).map(|(y, p)| (y - p).powi(2)).sum();
    1.0 - ss_res / ss_tot
}

/// `steps` rounds of `z ← z + λ ∇f(z)`.
pub fn guided_shift(
    z: &[f64],
    f: &dyn LatentFunction,
    lambda: f64,
    steps: usize,
) -> Result<Vec<f64>> {
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(Error::domain(format!("guidance strength {lambda} must be finite and >= 0")));
    }
    let mut z = z.to_vec();
    if lambda == 0.0 {
        return Ok(z);
    }
    for _ in 0..steps {
        let (_, grad) = f.value_and_gradient(&z)?;
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric("non-finite guidance gradient".into()));
        }
        for (zi, gi) in z.iter_mut().zip(&grad) {
            *zi += lambda * gi;
        }
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct HalfNormSquared;

    impl LatentFunction for HalfNormSquared {
        fn value_and_gradient(&self, z: &[f64]) -> Result<(f64, Vec<f64>)> {
            let v = -0.5 * z.iter().map(|x| x * x).sum::<f64>();
            Ok((v, z.iter().map(|x| -x).collect()))
        }
    }

    #[test]
    fn analytic_one_step() {
        let z = [0.5, -1.5, 2.0];
        let out = guided_shift(&z, &HalfNormSquared, 0.3, 1).unwrap();
        for (a, b) in out.iter().zip(z) {
            assert!((a - 0.7 * b).abs() < 1e-12);
        }
        assert_eq!(guided_shift(&z, &HalfNormSquared, 0.0, 5).unwrap(), z);
        assert!(guided_shift(&z, &HalfNormSquared, -1.0, 1).is_err());
    }

    fn synthetic(n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Tensor::<f64>::randn(&[4], 1.0, &mut rng).into_data())
            .collect()
    }

    #[test]
    fn gradient_matches_finite_difference() {
        let z = synthetic(200, 1);
        let y: Vec<f64> = z.iter().map(|v| (v[0] * v[1]).sin() + v[2]).collect();
        let (p, _) = GuidancePredictor::fit(&z, &y, 2).unwrap();
        let x = [0.3, -0.2, 0.8, 0.1];
        let (_, g) = p.value_and_gradient(&x).unwrap();
        for i in 0..4 {
            let (mut a, mut b) = (x, x);
            a[i] += 1e-6;
            b[i] -= 1e-6;
            let fd = (p.predict(&a).unwrap() - p.predict(&b).unwrap()) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-6 * (1.0 + fd.abs()), "{fd} vs {}", g[i]);
        }
    }

    #[test]
    fn constant_labels_are_rejected() {
        let z = synthetic(120, 3);
        assert!(GuidancePredictor::fit(&z, &[4.0; 120], 0).is_err());
        assert!(GuidancePredictor::fit(&z[..50], &[1.0; 50], 0).is_err());
    }

    #[test]
    fn params_roundtrip() {
        let z = synthetic(120, 4);
        let y: Vec<f64> = z.iter().map(|v| v[0]).collect();
        let (p, _) = GuidancePredictor::fit(&z, &y, 0).unwrap();
        let mut store = ParamStore::<f64>::new();
        p.write_params(&mut store).unwrap();
        assert_eq!(GuidancePredictor::read_params(&store).unwrap().unwrap(), p);
    }
}
