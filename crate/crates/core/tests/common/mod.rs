//! Helpers shared by the integration and acceptance targets.
#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use starvae::corpus::molecule_symbols;
use starvae::model::{Condition, Forward, ModelConfig, ParamGroup, StarVae, TokenBatch};
use starvae::numerics::Tensor;
use starvae::selfies::{frame_and_pad, Vocabulary};
use starvae::train::elbo;
use starvae::Result;

pub const SMALL_SMILES: [&str; 6] = ["CCO", "c1ccccc1", "CC(=O)N", "C1CCNC1", "OC(C)C#N", "CS(=O)C"];

pub fn small_corpus() -> (Vocabulary, Vec<Vec<u32>>) {
    let symbols: Vec<Vec<String>> = SMALL_SMILES.iter().map(|s| molecule_symbols(s).unwrap()).collect();
    let vocab = Vocabulary::build(symbols.iter()).unwrap();
    let rows = symbols.iter().map(|s| frame_and_pad(&vocab.ids(s), 24)).collect();
    (vocab, rows)
}

/// One encoder and one decoder layer, narrow enough for exhaustive
/// finite differences.
pub fn tiny_config(vocab: usize) -> ModelConfig {
    ModelConfig {
        n_encoder_layers: 1,
        n_decoder_layers: 1,
        n_heads: 2,
        d_model: 8,
        d_ff: 12,
        latent_dim: 3,
        vocab_size: vocab,
        max_len: 24,
        lora_rank: 2,
        lora_alpha: 4.0,
        property_token: true,
        init_seed: 7,
    }
}

/// Conditional tiny model with nonzero adapter factors.
pub fn tiny_conditional(vocab: usize) -> StarVae<f64> {
    let mut m = StarVae::<f64>::new(tiny_config(vocab)).unwrap();
    m.add_conditional(3);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let names: Vec<String> = m.params.names().filter(|n| n.starts_with("lora.") || n.starts_with("cond.prior_")).map(String::from).collect();
    for n in names {
        let shape = m.params.get(&n).unwrap().shape().to_vec();
        m.params.insert(&n, Tensor::randn(&shape, 0.3, &mut rng));
    }
    m
}

/// Largest norm-wise relative error between reverse-mode and central
/// difference gradients of `loss` over every parameter of `model`.
pub fn model_gradient_error(
    model: &StarVae<f64>,
    h: f64,
    loss: impl Fn(&StarVae<f64>, &mut Forward<'_, f64>) -> Result<starvae::numerics::Var>,
) -> f64 {
    let groups = [ParamGroup::Base, ParamGroup::Lora, ParamGroup::Conditional];
    let mut fx = Forward::new(&model.params, &groups);
    let out = loss(model, &mut fx).unwrap();
    let leaves = fx.trainable_leaves();
    let grads = fx.graph.backward(out).unwrap();
    let analytic: Vec<(String, Tensor<f64>)> = leaves
        .into_iter()
        .map(|(n, v)| {
            let g = grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(model.params.get(&n).unwrap().shape()));
            (n, g)
        })
        .collect();
    let eval = |m: &StarVae<f64>| {
        let mut fx = Forward::inference(&m.params);
        let out = loss(m, &mut fx).unwrap();
        fx.graph.value(out).item()
    };
    let mut worst: f64 = 0.0;
    let mut work = model.clone();
    for (name, g) in &analytic {
        let (mut diff2, mut fd2) = (0.0, 0.0);
        for j in 0..g.len() {
            let x = work.params.get(name).unwrap().data()[j];
            work.params.get_mut(name).unwrap().data_mut()[j] = x + h;
            let up = eval(&work);
            work.params.get_mut(name).unwrap().data_mut()[j] = x - h;
            let down = eval(&work);
            work.params.get_mut(name).unwrap().data_mut()[j] = x;
            let fd = (up - down) / (2.0 * h);
            diff2 += (fd - g.data()[j]).powi(2);
            fd2 += fd * fd;
        }
        let scale = g.norm().max(fd2.sqrt());
        if scale > 0.0 {
            worst = worst.max(diff2.sqrt() / scale);
        }
    }
    worst
}

/// Gradient error of the full conditional ELBO of a one-layer model.
pub fn one_layer_elbo_error() -> f64 {
    let (vocab, rows) = small_corpus();
    let model = tiny_conditional(vocab.len());
    let refs: Vec<&[u32]> = rows.iter().take(3).map(|r| &r[..14]).collect();
    let batch = TokenBatch::from_rows(&refs).unwrap();
    let noise = Tensor::randn(&[3, 3], 1.0, &mut ChaCha8Rng::seed_from_u64(4));
    let cond = Condition { y: vec![0.5, -1.0, 1.5], lora_lambda: 0.7 };
    model_gradient_error(&model, 1e-5, |m, fx| Ok(elbo(m, fx, &batch, Some(&cond), 1.1, &noise)?.loss))
}

pub fn small_symbols() -> Vec<Vec<String>> {
    SMALL_SMILES.iter().map(|s| molecule_symbols(s).unwrap()).collect()
}

/// Tiny f32 checkpoint briefly pretrained on the small corpus.
pub fn tiny_checkpoint(steps: u64) -> starvae::train::Checkpoint {
    use starvae::train::{pretrain, Checkpoint, Dataset, RunOptions, TrainConfig};
    let (vocab, _) = small_corpus();
    let model = StarVae::<f32>::new(tiny_config(vocab.len())).unwrap();
    let data = Dataset::from_symbols(&small_symbols(), &vocab, 24).unwrap();
    let mut ckpt = Checkpoint::new(model, vocab, 1e-2).unwrap();
    let cfg = TrainConfig {
        max_steps: steps,
        batch_size: 4,
        beta_warmup: 3,
        lr: 1e-2,
        ..TrainConfig::default()
    };
    pretrain(&mut ckpt, &data, &cfg, RunOptions::default()).unwrap();
    ckpt
}

fn randn64(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Contracts any tensor to a scalar with fixed random weights, so every
/// output element carries its own gradient.
fn contract(g: &mut starvae::numerics::Graph<f64>, x: starvae::numerics::Var, seed: u64) -> Result<starvae::numerics::Var> {
    let w = g.constant(randn64(g.shape(x), seed ^ 0xABCD));
    let p = g.mul(x, w)?;
    Ok(g.sum_all(p))
}

/// Finite-difference relative error of every differentiable graph op.
pub fn op_gradient_errors() -> Vec<(&'static str, f64)> {
    use starvae::numerics::{finite_difference_error as fd, AttnMask};
    use std::rc::Rc;
    const H: f64 = 1e-5;
    let mask = Rc::new(AttnMask {
        batch: 2,
        heads: 2,
        queries: 3,
        keys: 3,
        key_valid: Some(vec![true, true, false, true, true, true]),
        causal: true,
    });
    let r = randn64;
    let mut out = Vec::new();
    let mut push = |name, e: Result<f64>| out.push((name, e.unwrap()));
    push("matmul", fd(&[r(&[2, 3, 4], 1), r(&[4, 5], 2)], H, |g, v| {
        let y = g.matmul(v[0], v[1])?;
        contract(g, y, 3)
    }));
    push("bmm", fd(&[r(&[2, 3, 4], 4), r(&[2, 4, 2], 5)], H, |g, v| {
        let y = g.bmm(v[0], v[1], false)?;
        contract(g, y, 6)
    }));
    push("bmm_transposed", fd(&[r(&[2, 2, 3, 4], 7), r(&[2, 2, 5, 4], 8)], H, |g, v| {
        let y = g.bmm(v[0], v[1], true)?;
        contract(g, y, 9)
    }));
    push("add_sub_mul", fd(&[r(&[3, 4], 10), r(&[3, 4], 11)], H, |g, v| {
        let a = g.add(v[0], v[1])?;
        let s = g.sub(a, v[1])?;
        let m = g.mul(s, v[1])?;
        contract(g, m, 12)
    }));
    push("exp", fd(&[r(&[3, 4], 13)], H, |g, v| {
        let y = g.exp(v[0]);
        contract(g, y, 14)
    }));
    push("tanh", fd(&[r(&[3, 4], 15)], H, |g, v| {
        let y = g.tanh(v[0]);
        contract(g, y, 16)
    }));
    push("gelu", fd(&[r(&[20], 17).map(|x| x * 3.0)], H, |g, v| {
        let y = g.gelu(v[0]);
        contract(g, y, 18)
    }));
    push("scale_add_scalar", fd(&[r(&[5], 19)], H, |g, v| {
        let y = g.scale(v[0], 1.7);
        let y = g.add_scalar(y, -0.3);
        contract(g, y, 20)
    }));
    push("add_row_mul_row", fd(&[r(&[2, 3, 4], 21), r(&[4], 22)], H, |g, v| {
        let a = g.add_row(v[0], v[1])?;
        let m = g.mul_row(a, v[1])?;
        contract(g, m, 23)
    }));
    push("softmax", fd(&[r(&[4, 6], 24)], H, |g, v| {
        let s = g.softmax(v[0], None)?;
        contract(g, s, 25)
    }));
    push("masked_softmax", fd(&[r(&[2, 2, 3, 3], 26)], H, |g, v| {
        let s = g.softmax(v[0], Some(Rc::clone(&mask)))?;
        contract(g, s, 27)
    }));
    push("cross_entropy", fd(&[r(&[5, 7], 28)], H, |g, v| g.cross_entropy(v[0], &[1, 0, 6, 3, 3], 3)));
    push("layer_norm", fd(&[r(&[3, 5], 29), r(&[5], 30), r(&[5], 31)], H, |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
        contract(g, y, 32)
    }));
    push("embedding", fd(&[r(&[6, 3], 33)], H, |g, v| {
        let y = g.embedding(v[0], &[1, 5, 1, 0], &[2, 2])?;
        contract(g, y, 34)
    }));
    push("swap_axes_reshape", fd(&[r(&[2, 3, 2, 4], 35)], H, |g, v| {
        let s = g.swap_axes12(v[0])?;
        let y = g.reshape(s, &[4, 3, 4])?;
        contract(g, y, 36)
    }));
    push("concat", fd(&[r(&[2, 1, 3], 37), r(&[2, 4, 3], 38)], H, |g, v| {
        let c = g.concat(v[0], v[1], 1)?;
        contract(g, c, 39)
    }));
    push("sum_all", fd(&[r(&[3, 3], 40)], H, |g, v| Ok(g.sum_all(v[0]))));
    out
}
