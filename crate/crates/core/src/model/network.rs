use std::collections::BTreeMap;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{LatentGaussian, ModelConfig, ParamGroup, ParamStore};
use crate::error::{Error, Result};
use crate::numerics::{AttnMask, Graph, Real, Tensor, Var};
use crate::selfies::PAD;

const LN_EPS: f64 = 1e-5;
const ATTN: [&str; 4] = ["q", "k", "v", "o"];

/// A batch of equal-length id rows, `[batch, len]` row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    pub ids: Vec<u32>,
    pub batch: usize,
    pub len: usize,
}

impl TokenBatch {
    pub fn new(ids: Vec<u32>, batch: usize, len: usize) -> Result<TokenBatch> {
        if ids.len() != batch * len || batch == 0 || len == 0 {
            return Err(Error::shape(format!(
                "{} ids for a {batch}x{len} batch",
                ids.len()
            )));
        }
        Ok(TokenBatch { ids, batch, len })
    }

    /// Stacks rows, right-padding with `<pad>` to the longest.
    pub fn from_rows(rows: &[&[u32]]) -> Result<TokenBatch> {
        let len = rows.iter().map(|r| r.len()).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(rows.len() * len);
        for r in rows {
            ids.extend_from_slice(r);
            ids.extend(std::iter::repeat_n(PAD, len - r.len()));
        }
        TokenBatch::new(ids, rows.len(), len)
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.ids[i * self.len..(i + 1) * self.len]
    }

    /// Columns `from..to` of every row.
    pub fn columns(&self, from: usize, to: usize) -> TokenBatch {
        let ids = (0..self.batch)
            .flat_map(|b| self.row(b)[from..to].iter().copied())
            .collect();
        TokenBatch {
            ids,
            batch: self.batch,
            len: to - from,
        }
    }
}

/// Property values (already normalized) and adapter strength for
/// conditional passes.
#[derive(Debug, Clone, PartialEq)]
pub struct Condition {
    pub y: Vec<f64>,
    pub lora_lambda: f64,
}

/// Records one forward pass, registering each parameter on first use.
/// Parameters outside `trainable` enter the graph as constants.
pub struct Forward<'m, T: Real> {
    pub graph: Graph<T>,
    store: &'m ParamStore<T>,
    trainable: Vec<ParamGroup>,
    leaves: BTreeMap<String, Var>,
}

impl<'m, T: Real> Forward<'m, T> {
    pub fn new(store: &'m ParamStore<T>, trainable: &[ParamGroup]) -> Forward<'m, T> {
        Forward {
            graph: Graph::new(),
            store,
            trainable: trainable.to_vec(),
            leaves: BTreeMap::new(),
        }
    }

    /// No parameter is differentiable.
    pub fn inference(store: &'m ParamStore<T>) -> Forward<'m, T> {
        Forward::new(store, &[])
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.leaves.get(name) {
            return Ok(v);
        }
        let t = Rc::clone(self.store.get(name)?);
        let v = if self.trainable.contains(&ParamGroup::of_name(name)) {
            self.graph.param(t)
        } else {
            self.graph.constant_rc(t)
        };
        self.leaves.insert(name.to_string(), v);
        Ok(v)
    }

    /// Trainable parameters used so far, sorted by name.
    pub fn trainable_leaves(&self) -> Vec<(String, Var)> {
        self.leaves
            .iter()
            .filter(|(n, _)| self.trainable.contains(&ParamGroup::of_name(n)))
            .map(|(n, &v)| (n.clone(), v))
            .collect()
    }

    fn linear(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.param(&format!("{prefix}.w"))?;
        let b = self.param(&format!("{prefix}.b"))?;
        let y = self.graph.matmul(x, w)?;
        self.graph.add_row(y, b)
    }

    fn layer_norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let g = self.param(&format!("{prefix}.g"))?;
        let b = self.param(&format!("{prefix}.b"))?;
        self.graph.layer_norm(x, g, b, LN_EPS)
    }

    fn feed_forward(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let h = self.linear(x, &format!("{prefix}.ff1"))?;
        let h = self.graph.gelu(h);
        self.linear(h, &format!("{prefix}.ff2"))
    }
}

/// Sinusoidal position table `[rows, d]`.
fn positions<T: Real>(rows: usize, d: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(rows * d);
    for t in 0..rows {
        for i in 0..d {
            let freq = 10000f64.powf(-((i / 2 * 2) as f64) / d as f64);
            let angle = t as f64 * freq;
            data.push(T::of(if i % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::new(&[rows, d], data).expect("consistent size")
}

/// The encoder/decoder network with its optional conditional parts.
#[derive(Debug, Clone)]
pub struct StarVae<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    positions: Rc<Tensor<T>>,
}

struct Init<'a, T> {
    rng: ChaCha8Rng,
    store: &'a mut ParamStore<T>,
}

impl<T: Real> Init<'_, T> {
    fn normal(&mut self, name: &str, shape: &[usize], std: f64) {
        let t = Tensor::randn(shape, std, &mut self.rng);
        self.store.insert(name, t);
    }

    fn fill(&mut self, name: &str, shape: &[usize], v: f64) {
        self.store.insert(name, Tensor::full(shape, T::of(v)));
    }

    fn linear(&mut self, prefix: &str, d_in: usize, d_out: usize, std: f64) {
        self.normal(&format!("{prefix}.w"), &[d_in, d_out], std);
        self.fill(&format!("{prefix}.b"), &[d_out], 0.0);
    }

    fn layer_norm(&mut self, prefix: &str, d: usize) {
        self.fill(&format!("{prefix}.g"), &[d], 1.0);
        self.fill(&format!("{prefix}.b"), &[d], 0.0);
    }

    fn attention(&mut self, prefix: &str, d: usize) {
        for p in ATTN {
            let std = 1.0 / (d as f64).sqrt();
            if p == "k" {
                // a key bias shifts every score of a query equally, so it
                // would never receive gradient
                self.normal(&format!("{prefix}.k.w"), &[d, d], std);
            } else {
                self.linear(&format!("{prefix}.{p}"), d, d, std);
            }
        }
    }

    fn block(&mut self, prefix: &str, c: &ModelConfig, cross: bool) {
        let d = c.d_model;
        self.layer_norm(&format!("{prefix}.ln1"), d);
        self.attention(&format!("{prefix}.self"), d);
        if cross {
            self.layer_norm(&format!("{prefix}.ln_cross"), d);
            self.attention(&format!("{prefix}.cross"), d);
        }
        self.layer_norm(&format!("{prefix}.ln2"), d);
        self.linear(&format!("{prefix}.ff1"), d, c.d_ff, 1.0 / (d as f64).sqrt());
        self.linear(&format!("{prefix}.ff2"), c.d_ff, d, 1.0 / (c.d_ff as f64).sqrt());
    }
}

fn attention_prefixes(c: &ModelConfig) -> Vec<String> {
    let mut out = Vec::new();
    for i in 0..c.n_encoder_layers {
        out.push(format!("enc.layer{i}.self"));
    }
    for i in 0..c.n_decoder_layers {
        out.push(format!("dec.layer{i}.self"));
        out.push(format!("dec.layer{i}.cross"));
    }
    out
}

impl<T: Real> StarVae<T> {
    /// Freshly initialized base network (no adapters or prior head).
    pub fn new(config: ModelConfig) -> Result<StarVae<T>> {
        config.validate()?;
        let mut params = ParamStore::new();
        let c = &config;
        let d = c.d_model;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(c.init_seed),
            store: &mut params,
        };
        init.normal("enc.tok_emb", &[c.vocab_size, d], 1.0);
        for i in 0..c.n_encoder_layers {
            init.block(&format!("enc.layer{i}"), c, false);
        }
        init.layer_norm("enc.ln_f", d);
        init.linear("enc.mu", d, c.latent_dim, 1.0 / (d as f64).sqrt());
        init.linear("enc.logvar", d, c.latent_dim, 0.01 / (d as f64).sqrt());
        init.normal("dec.tok_emb", &[c.vocab_size, d], 1.0);
        init.linear("dec.z_proj", c.latent_dim, d, 1.0 / (c.latent_dim as f64).sqrt());
        for i in 0..c.n_decoder_layers {
            init.block(&format!("dec.layer{i}"), c, true);
        }
        init.layer_norm("dec.ln_f", d);
        init.linear("dec.out", d, c.vocab_size, 1.0 / (d as f64).sqrt());
        let positions = Rc::new(positions(c.max_len + 2, d));
        Ok(StarVae {
            config,
            params,
            positions,
        })
    }

    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<StarVae<T>> {
        config.validate()?;
        let positions = Rc::new(positions(config.max_len + 2, config.d_model));
        let model = StarVae {
            config,
            params,
            positions,
        };
        let fresh = StarVae::<T>::new(model.config.clone())?;
        for (name, t) in fresh.params.iter() {
            let have = model.params.get(name)?;
            if have.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter '{name}' has shape {:?}, expected {:?}",
                    have.shape(),
                    t.shape()
                )));
            }
        }
        Ok(model)
    }

    /// Adds LoRA factors (B zero, so outputs are unchanged), the property
    /// embedding and the conditional prior head. Prior output layers start at
    /// zero, giving N(0, I) until trained.
    pub fn add_conditional(&mut self, seed: u64) {
        let c = self.config.clone();
        let (d, r) = (c.d_model, c.lora_rank);
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
            store: &mut self.params,
        };
        for prefix in attention_prefixes(&c) {
            for p in ATTN {
                init.normal(&format!("lora.{prefix}.{p}.a"), &[d, r], 1.0 / (d as f64).sqrt());
                init.fill(&format!("lora.{prefix}.{p}.b"), &[r, d], 0.0);
            }
        }
        init.normal("cond.prop1.w", &[1, d], 1.0);
        init.normal("cond.prop1.b", &[d], 1.0);
        init.linear("cond.prop2", d, d, 1.0 / (d as f64).sqrt());
        init.linear("cond.prior_h", d, d, 1.0 / (d as f64).sqrt());
        init.linear("cond.prior_mu", d, c.latent_dim, 0.0);
        init.linear("cond.prior_logvar", d, c.latent_dim, 0.0);
    }

    pub fn is_conditional(&self) -> bool {
        self.params.has_group(ParamGroup::Conditional) && self.params.has_group(ParamGroup::Lora)
    }

    fn position_rows(&self, fx: &mut Forward<'_, T>, batch: usize, len: usize) -> Result<Var> {
        if len > self.positions.shape()[0] {
            return Err(Error::domain(format!(
                "sequence of {len} positions exceeds the maximum of {}",
                self.positions.shape()[0]
            )));
        }
        let d = self.config.d_model;
        let rows = &self.positions.data()[..len * d];
        let mut data = Vec::with_capacity(batch * len * d);
        for _ in 0..batch {
            data.extend_from_slice(rows);
        }
        Ok(fx.graph.constant(Tensor::new(&[batch, len, d], data)?))
    }

    fn embed(&self, fx: &mut Forward<'_, T>, table: &str, tokens: &TokenBatch) -> Result<Var> {
        let t = fx.param(table)?;
        let e = fx.graph.embedding(t, &tokens.ids, &[tokens.batch, tokens.len])?;
        let p = self.position_rows(fx, tokens.batch, tokens.len)?;
        fx.graph.add(e, p)
    }

    fn projection(
        &self,
        fx: &mut Forward<'_, T>,
        x: Var,
        prefix: &str,
        which: &str,
        lora: f64,
    ) -> Result<Var> {
        let mut w = fx.param(&format!("{prefix}.{which}.w"))?;
        if lora != 0.0 {
            let a = fx.param(&format!("lora.{prefix}.{which}.a"))?;
            let b = fx.param(&format!("lora.{prefix}.{which}.b"))?;
            let ab = fx.graph.matmul(a, b)?;
            let scale = lora * self.config.lora_alpha / self.config.lora_rank as f64;
            let delta = fx.graph.scale(ab, T::of(scale));
            w = fx.graph.add(w, delta)?;
        }
        let y = fx.graph.matmul(x, w)?;
        if which == "k" {
            return Ok(y);
        }
        let bias = fx.param(&format!("{prefix}.{which}.b"))?;
        fx.graph.add_row(y, bias)
    }

    /// Multi-head attention of `x` (`[B, Tq, d]`) over `mem` (`[B, Tk, d]`).
    fn attention(
        &self,
        fx: &mut Forward<'_, T>,
        x: Var,
        mem: Var,
        prefix: &str,
        lora: f64,
        mask: Option<Rc<AttnMask>>,
    ) -> Result<Var> {
        let (h, dh, d) = (self.config.n_heads, self.config.head_dim(), self.config.d_model);
        let (b, tq) = (fx.graph.shape(x)[0], fx.graph.shape(x)[1]);
        let tk = fx.graph.shape(mem)[1];
        let heads = |fx: &mut Forward<'_, T>, src: Var, which: &str, t: usize| -> Result<Var> {
            let p = self.projection(fx, src, prefix, which, lora)?;
            let p = fx.graph.reshape(p, &[b, t, h, dh])?;
            fx.graph.swap_axes12(p)
        };
        let q = heads(fx, x, "q", tq)?;
        let k = heads(fx, mem, "k", tk)?;
        let v = heads(fx, mem, "v", tk)?;
        let scores = fx.graph.bmm(q, k, true)?;
        let scores = fx.graph.scale(scores, T::of(1.0 / (dh as f64).sqrt()));
        let probs = fx.graph.softmax(scores, mask)?;
        let ctx = fx.graph.bmm(probs, v, false)?;
        let ctx = fx.graph.swap_axes12(ctx)?;
        let ctx = fx.graph.reshape(ctx, &[b, tq, d])?;
        self.projection(fx, ctx, prefix, "o", lora)
    }

    /// Property embedding `[B, d]` of normalized values.
    pub fn property_embedding(&self, fx: &mut Forward<'_, T>, y: &[f64]) -> Result<Var> {
        if !self.is_conditional() {
            return Err(Error::domain("model has no conditional parameters"));
        }
        let yv = fx.graph.constant(Tensor::from_f64(&[y.len(), 1], y)?);
        let h = fx.linear(yv, "cond.prop1")?;
        let h = fx.graph.tanh(h);
        fx.linear(h, "cond.prop2")
    }

    fn lora_strength(&self, cond: Option<&Condition>) -> Result<f64> {
        match cond {
            Some(c) if c.lora_lambda != 0.0 => {
                if !self.is_conditional() {
                    return Err(Error::domain("model has no LoRA adapters"));
                }
                Ok(c.lora_lambda)
            }
            _ => Ok(0.0),
        }
    }

    /// Posterior mean and log-variance, each `[B, latent]`, for framed
    /// token rows.
    pub fn encode(
        &self,
        fx: &mut Forward<'_, T>,
        tokens: &TokenBatch,
        cond: Option<&Condition>,
    ) -> Result<(Var, Var)> {
        let (b, t) = (tokens.batch, tokens.len);
        let lora = self.lora_strength(cond)?;
        let mut valid: Vec<bool> = tokens.ids.iter().map(|&id| id != PAD).collect();
        for r in 0..b {
            if !valid[r * t..(r + 1) * t].iter().any(|&v| v) {
                return Err(Error::domain(format!("row {r} of the batch is all padding")));
            }
        }
        let mut x = self.embed(fx, "enc.tok_emb", tokens)?;
        let mut len = t;
        let mut prefixed = false;
        if let (Some(c), true) = (cond, self.config.property_token) {
            if c.y.len() != b {
                return Err(Error::shape(format!("{} property values for {b} rows", c.y.len())));
            }
            let p = self.property_embedding(fx, &c.y)?;
            let p = fx.graph.reshape(p, &[b, 1, self.config.d_model])?;
            x = fx.graph.concat(p, x, 1)?;
            len += 1;
            prefixed = true;
            valid = (0..b)
                .flat_map(|r| std::iter::once(true).chain(valid[r * t..(r + 1) * t].iter().copied()))
                .collect();
        }
        let mask = Rc::new(AttnMask {
            batch: b,
            heads: self.config.n_heads,
            queries: len,
            keys: len,
            key_valid: Some(valid.clone()),
            causal: false,
        });
        for i in 0..self.config.n_encoder_layers {
            let p = format!("enc.layer{i}");
            let h = fx.layer_norm(x, &format!("{p}.ln1"))?;
            let a = self.attention(fx, h, h, &format!("{p}.self"), lora, Some(Rc::clone(&mask)))?;
            x = fx.graph.add(x, a)?;
            let h = fx.layer_norm(x, &format!("{p}.ln2"))?;
            let f = fx.feed_forward(h, &p)?;
            x = fx.graph.add(x, f)?;
        }
        let hidden = fx.layer_norm(x, "enc.ln_f")?;
        // mean over token positions; the property token is excluded
        let mut weights = vec![T::zero(); b * len];
        for r in 0..b {
            let row = &valid[r * len..(r + 1) * len];
            let start = usize::from(prefixed);
            let count = row[start..].iter().filter(|&&v| v).count();
            for (j, &v) in row.iter().enumerate().skip(start) {
                if v {
                    weights[r * len + j] = T::of(1.0 / count as f64);
                }
            }
        }
        let w = fx.graph.constant(Tensor::new(&[b, 1, len], weights)?);
        let pooled = fx.graph.bmm(w, hidden, false)?;
        let pooled = fx.graph.reshape(pooled, &[b, self.config.d_model])?;
        let mu = fx.linear(pooled, "enc.mu")?;
        let logvar = fx.linear(pooled, "enc.logvar")?;
        Ok((mu, logvar))
    }

    /// Conditional prior mean and log-variance, each `[B, latent]`.
    pub fn prior(&self, fx: &mut Forward<'_, T>, y: &[f64]) -> Result<(Var, Var)> {
        let e = self.property_embedding(fx, y)?;
        let h = fx.linear(e, "cond.prior_h")?;
        let h = fx.graph.tanh(h);
        let mu = fx.linear(h, "cond.prior_mu")?;
        let logvar = fx.linear(h, "cond.prior_logvar")?;
        Ok((mu, logvar))
    }

    /// Next-token logits `[B, T, vocab]` for decoder inputs starting with
    /// `<sos>`, conditioned on `z` (`[B, latent]`).
    pub fn decode(
        &self,
        fx: &mut Forward<'_, T>,
        inputs: &TokenBatch,
        z: Var,
        cond: Option<&Condition>,
    ) -> Result<Var> {
        let (b, t) = (inputs.batch, inputs.len);
        let d = self.config.d_model;
        if fx.graph.shape(z) != [b, self.config.latent_dim] {
            return Err(Error::shape(format!(
                "latent {:?} for batch {b}",
                fx.graph.shape(z)
            )));
        }
        let lora = self.lora_strength(cond)?;
        let mut x = self.embed(fx, "dec.tok_emb", inputs)?;
        let zs = fx.linear(z, "dec.z_proj")?;
        let mut memory = fx.graph.reshape(zs, &[b, 1, d])?;
        if let Some(c) = cond {
            if c.y.len() != b {
                return Err(Error::shape(format!("{} property values for {b} rows", c.y.len())));
            }
            let ys = self.property_embedding(fx, &c.y)?;
            let ys = fx.graph.reshape(ys, &[b, 1, d])?;
            memory = fx.graph.concat(memory, ys, 1)?;
        }
        let causal = Rc::new(AttnMask {
            batch: b,
            heads: self.config.n_heads,
            queries: t,
            keys: t,
            key_valid: None,
            causal: true,
        });
        for i in 0..self.config.n_decoder_layers {
            let p = format!("dec.layer{i}");
            let h = fx.layer_norm(x, &format!("{p}.ln1"))?;
            let a = self.attention(fx, h, h, &format!("{p}.self"), lora, Some(Rc::clone(&causal)))?;
            x = fx.graph.add(x, a)?;
            let h = fx.layer_norm(x, &format!("{p}.ln_cross"))?;
            let a = self.attention(fx, h, memory, &format!("{p}.cross"), lora, None)?;
            x = fx.graph.add(x, a)?;
            let h = fx.layer_norm(x, &format!("{p}.ln2"))?;
            let f = fx.feed_forward(h, &p)?;
            x = fx.graph.add(x, f)?;
        }
        let h = fx.layer_norm(x, "dec.ln_f")?;
        fx.linear(h, "dec.out")
    }

    /// Posterior Gaussians for framed sequences (any padding).
    pub fn encode_posterior(
        &self,
        rows: &[&[u32]],
        cond: Option<&Condition>,
    ) -> Result<Vec<LatentGaussian>> {
        let tokens = TokenBatch::from_rows(rows)?;
        let mut fx = Forward::inference(&self.params);
        let (mu, lv) = self.encode(&mut fx, &tokens, cond)?;
        Ok(split_gaussians(fx.graph.value(mu), fx.graph.value(lv)))
    }

    /// The latent prior for one property value, or N(0, I) without one.
    pub fn prior_gaussian(&self, y: Option<f64>) -> Result<LatentGaussian> {
        match y {
            None => Ok(LatentGaussian::standard(self.config.latent_dim)),
            Some(y) => {
                let mut fx = Forward::inference(&self.params);
                let (mu, lv) = self.prior(&mut fx, &[y])?;
                Ok(split_gaussians(fx.graph.value(mu), fx.graph.value(lv)).remove(0))
            }
        }
    }

    /// Logits `[len, vocab]` for one prefix.
    pub fn decode_logits(
        &self,
        prefix: &[u32],
        z: &[f64],
        cond: Option<&Condition>,
    ) -> Result<Tensor<T>> {
        let mut fx = Forward::inference(&self.params);
        let inputs = TokenBatch::new(prefix.to_vec(), 1, prefix.len())?;
        let zv = fx.graph.constant(Tensor::from_f64(&[1, z.len()], z)?);
        let logits = self.decode(&mut fx, &inputs, zv, cond)?;
        let v = self.config.vocab_size;
        fx.graph.value(logits).clone().reshaped(&[prefix.len(), v])
    }
}

pub(crate) fn split_gaussians<T: Real>(mu: &Tensor<T>, lv: &Tensor<T>) -> Vec<LatentGaussian> {
    let rows = mu.len() / mu.last_dim();
    (0..rows)
        .map(|r| LatentGaussian {
            mean: mu.row(r).iter().map(|x| x.f64()).collect(),
            log_variance: lv.row(r).iter().map(|x| x.f64()).collect(),
        })
        .collect()
}
