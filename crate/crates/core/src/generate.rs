//! Ancestral sampling from the decoder in three modes: prior samples,
//! property-conditional samples and samples around seed molecules.

use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::{guided_shift, Condition, Forward, GuidancePredictor, LatentFunction, TokenBatch};
use crate::molgraph::{canonical_key, MolGraph};
use crate::numerics::Tensor;
use crate::selfies::{decode_symbols, detokenize, frame_and_pad, EOS, PAD, SOS, UNK};
use crate::train::{argmax, Checkpoint};

/// Rows decoded together in one forward pass.
const DECODE_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub enum Mode {
    /// `z ~ N(0, I)`.
    Unconditional,
    /// `z ~ p(z | y)` with `y` in raw property units.
    Conditional { y: f64 },
    /// `z = μ + noise_scale · σ ⊙ ε` around each seed's posterior; sample
    /// `i` uses seed `i mod seeds.len()`.
    Seeded { seeds: Vec<Vec<String>>, noise_scale: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRequest {
    pub mode: Mode,
    pub n_samples: usize,
    /// 0 decodes greedily.
    pub temperature: f64,
    /// 0 disables top-k filtering.
    pub top_k: usize,
    pub lora_lambda: f64,
    pub guidance_lambda: f64,
    pub guidance_steps: usize,
    pub seed: u64,
}

impl GenerationRequest {
    pub fn new(mode: Mode, n_samples: usize, seed: u64) -> GenerationRequest {
        GenerationRequest {
            mode,
            n_samples,
            temperature: 1.0,
            top_k: 0,
            lora_lambda: 1.0,
            guidance_lambda: 0.0,
            guidance_steps: 1,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(Error::Config(format!("temperature {} must be >= 0", self.temperature)));
        }
        if !(self.guidance_lambda.is_finite() && self.guidance_lambda >= 0.0) {
            return Err(Error::Config("guidance strength must be >= 0".into()));
        }
        if !self.lora_lambda.is_finite() {
            return Err(Error::Config("adapter strength must be finite".into()));
        }
        match &self.mode {
            Mode::Conditional { y } if !y.is_finite() => Err(Error::Config("property target must be finite".into())),
            Mode::Seeded { seeds, .. } if seeds.is_empty() => Err(Error::Empty("seed molecules".into())),
            Mode::Seeded { noise_scale, .. } if !(noise_scale.is_finite() && *noise_scale >= 0.0) => {
                Err(Error::Config("noise scale must be >= 0".into()))
            }
            _ => Ok(()),
        }
    }
}

/// One generated molecule.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub graph: MolGraph,
    /// Content token ids (no framing).
    pub ids: Vec<u32>,
    pub selfies: String,
    pub z_norm: f64,
    pub y: Option<f64>,
    /// Predictor value at the decoded latent, when a predictor is present.
    pub guidance: Option<f64>,
}

/// Per-sample stream: the result of sample `i` does not depend on the
/// other samples.
fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Draws `n_samples` molecules. Identical requests give identical results.
pub fn sample(ckpt: &Checkpoint, req: &GenerationRequest) -> Result<Vec<Sample>> {
    req.validate()?;
    let model = &ckpt.model;
    let dim = model.config.latent_dim;
    let predictor = GuidancePredictor::read_params(&model.params)?;
    if req.guidance_lambda > 0.0 && predictor.is_none() {
        return Err(Error::domain("guidance requested but the checkpoint has no predictor"));
    }
    if matches!(req.mode, Mode::Conditional { .. }) && !model.is_conditional() {
        return Err(Error::domain("conditional sampling needs a finetuned checkpoint"));
    }
    let mut rngs: Vec<ChaCha8Rng> = (0..req.n_samples).map(|i| sample_rng(req.seed, i)).collect();
    let mut latents = Vec::with_capacity(req.n_samples);
    let mut y_norm = None;
    match &req.mode {
        Mode::Unconditional => {
            for rng in &mut rngs {
                latents.push(normal_vec(rng, dim));
            }
        }
        Mode::Conditional { y } => {
            let yn = ckpt.norm.normalize(*y);
            y_norm = Some(yn);
            let prior = model.prior_gaussian(Some(yn))?;
            for rng in &mut rngs {
                latents.push(prior.reparameterize(&normal_vec(rng, dim))?);
            }
        }
        Mode::Seeded { seeds, noise_scale } => {
            let rows: Vec<Vec<u32>> = seeds
                .iter()
                .map(|s| frame_and_pad(&ckpt.vocab.ids(s), model.config.max_len))
                .collect();
            let refs: Vec<&[u32]> = rows.iter().map(Vec::as_slice).collect();
            let mut posteriors = Vec::with_capacity(refs.len());
            for chunk in refs.chunks(DECODE_CHUNK) {
                posteriors.extend(model.encode_posterior(chunk, None)?);
            }
            for (i, rng) in rngs.iter_mut().enumerate() {
                let eps: Vec<f64> = normal_vec(rng, dim).iter().map(|e| e * noise_scale).collect();
                latents.push(posteriors[i % posteriors.len()].reparameterize(&eps)?);
            }
        }
    }
    if req.guidance_lambda > 0.0 {
        let f = predictor.as_ref().expect("checked above");
        for z in &mut latents {
            *z = guided_shift(z, f, req.guidance_lambda, req.guidance_steps)?;
        }
    }
    let lambda = if y_norm.is_some() { req.lora_lambda } else { 0.0 };
    let mut out = Vec::with_capacity(req.n_samples);
    for start in (0..req.n_samples).step_by(DECODE_CHUNK) {
        let end = (start + DECODE_CHUNK).min(req.n_samples);
        let ids = decode_batch(ckpt, &latents[start..end], y_norm, lambda, req, &mut rngs[start..end])?;
        for (k, content) in ids.into_iter().enumerate() {
            let z = &latents[start + k];
            let surfaces: Vec<&str> = content
                .iter()
                .map(|&t| ckpt.vocab.surface(t).expect("sampled ids are in the vocabulary"))
                .collect();
            let graph = decode_symbols(&surfaces);
            let guidance = match &predictor {
                Some(p) => Some(p.value_and_gradient(z)?.0),
                None => None,
            };
            out.push(Sample {
                graph,
                selfies: detokenize(&surfaces),
                ids: content,
                z_norm: z.iter().map(|v| v * v).sum::<f64>().sqrt(),
                y: match req.mode {
                    Mode::Conditional { y } => Some(y),
                    _ => None,
                },
                guidance,
            });
        }
    }
    Ok(out)
}

/// Picks the next token from one row of logits. Specials other than
/// `<eos>` are never produced; `<eos>` is withheld while `allow_eos` is
/// false.
fn choose(logits: &[f32], allow_eos: bool, req: &GenerationRequest, rng: &mut ChaCha8Rng) -> u32 {
    let mut scores: Vec<f64> = logits.iter().map(|&x| x as f64).collect();
    for banned in [PAD, SOS, UNK] {
        scores[banned as usize] = f64::NEG_INFINITY;
    }
    if !allow_eos {
        scores[EOS as usize] = f64::NEG_INFINITY;
    }
    if req.temperature == 0.0 {
        return argmax(&scores) as u32;
    }
    if req.top_k > 0 && req.top_k < scores.len() {
        let mut sorted = scores.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        let cutoff = sorted[req.top_k - 1];
        let mut kept = 0;
        for s in &mut scores {
            // ties at the cutoff are broken by index
            if *s >= cutoff && kept < req.top_k {
                kept += 1;
            } else {
                *s = f64::NEG_INFINITY;
            }
        }
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scores.iter().map(|&s| ((s - max) / req.temperature).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if *w > 0.0 {
            if u < *w {
                return i as u32;
            }
            u -= w;
        }
    }
    argmax(&scores) as u32
}

/// Autoregressive decoding of a chunk of latents; returns content ids.
fn decode_batch(
    ckpt: &Checkpoint,
    latents: &[Vec<f64>],
    y_norm: Option<f64>,
    lambda: f64,
    req: &GenerationRequest,
    rngs: &mut [ChaCha8Rng],
) -> Result<Vec<Vec<u32>>> {
    let model = &ckpt.model;
    let (v, dim, max_len) = (model.config.vocab_size, model.config.latent_dim, model.config.max_len);
    let mut seqs: Vec<Vec<u32>> = vec![vec![SOS]; latents.len()];
    let mut active: Vec<usize> = (0..latents.len()).collect();
    let mut has_atoms = vec![false; latents.len()];
    while !active.is_empty() {
        let t = seqs[active[0]].len();
        let rows: Vec<&[u32]> = active.iter().map(|&i| seqs[i].as_slice()).collect();
        let batch = TokenBatch::from_rows(&rows)?;
        let mut fx = Forward::inference(&model.params);
        let zs: Vec<f64> = active.iter().flat_map(|&i| latents[i].iter().copied()).collect();
        let z = fx.graph.constant(Tensor::from_f64(&[active.len(), dim], &zs)?);
        let cond = y_norm.map(|y| Condition {
            y: vec![y; active.len()],
            lora_lambda: lambda,
        });
        let logits = model.decode(&mut fx, &batch, z, cond.as_ref())?;
        let values = fx.graph.value(logits).data();
        let mut still = Vec::with_capacity(active.len());
        for (r, &i) in active.iter().enumerate() {
            let last = &values[(r * t + t - 1) * v..(r * t + t) * v];
            let at_cap = t - 1 == max_len;
            if at_cap {
                if !has_atoms[i] {
                    return Err(Error::Numeric("sampler reached the length cap without an atom".into()));
                }
                continue;
            }
            let tok = choose(last, has_atoms[i], req, &mut rngs[i]);
            if tok == EOS {
                continue;
            }
            seqs[i].push(tok);
            if !has_atoms[i] {
                let surfaces: Vec<&str> = seqs[i][1..]
                    .iter()
                    .map(|&id| ckpt.vocab.surface(id).expect("in vocabulary"))
                    .collect();
                has_atoms[i] = !decode_symbols(&surfaces).is_empty();
            }
            still.push(i);
        }
        active = still;
    }
    Ok(seqs.into_iter().map(|mut s| s.split_off(1)).collect())
}

/// Writes one SELFIES per line.
pub fn write_selfies(path: &Path, samples: &[Sample]) -> Result<()> {
    let mut text = String::new();
    for s in samples {
        text.push_str(&s.selfies);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Companion table: `index,canonical_key,z_norm,y,guidance`.
pub fn write_metadata(path: &Path, samples: &[Sample]) -> Result<()> {
    let io = |e: std::io::Error| Error::io(path, e);
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    w.write_record(["index", "canonical_key", "z_norm", "y", "guidance"])
        .map_err(|e| io(e.into()))?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for (i, s) in samples.iter().enumerate() {
        w.write_record([
            i.to_string(),
            canonical_key(&s.graph),
            s.z_norm.to_string(),
            opt(s.y),
            opt(s.guidance),
        ])
        .map_err(|e| io(e.into()))?;
    }
    w.flush().map_err(io)
}

/// Posterior mean of one molecule.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentRow {
    pub key: String,
    pub mean: Vec<f64>,
}

/// Posterior means of every molecule under the base encoder.
pub fn export_latents(ckpt: &Checkpoint, corpus: &[Vec<String>]) -> Result<Vec<LatentRow>> {
    let max_len = ckpt.model.config.max_len;
    let mut out = Vec::with_capacity(corpus.len());
    for chunk in corpus.chunks(DECODE_CHUNK) {
        let rows: Vec<Vec<u32>> = chunk.iter().map(|s| frame_and_pad(&ckpt.vocab.ids(s), max_len)).collect();
        let refs: Vec<&[u32]> = rows.iter().map(Vec::as_slice).collect();
        let posteriors = ckpt.model.encode_posterior(&refs, None)?;
        for (symbols, g) in chunk.iter().zip(posteriors) {
            let surfaces: Vec<&str> = symbols.iter().map(String::as_str).collect();
            out.push(LatentRow {
                key: canonical_key(&decode_symbols(&surfaces)),
                mean: g.mean,
            });
        }
    }
    Ok(out)
}

/// Projections of the rows onto their leading `k` principal axes, in order
/// of decreasing variance. Axis signs are fixed so that the largest
/// loading is positive.
pub fn principal_components(rows: &[Vec<f64>], k: usize) -> Result<Vec<Vec<f64>>> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if n < 2 || d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(Error::domain("principal components need at least two equal-length rows"));
    }
    let mut x = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
    for j in 0..d {
        let mean = x.column(j).mean();
        x.column_mut(j).add_scalar_mut(-mean);
    }
    let cov = x.transpose() * &x / (n as f64 - 1.0);
    let eig = cov.symmetric_eigen();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let axes: Vec<_> = order
        .iter()
        .take(k.min(d))
        .map(|&c| {
            let v = eig.eigenvectors.column(c).into_owned();
            let big = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
            if big < 0.0 {
                -v
            } else {
                v
            }
        })
        .collect();
    Ok((0..n)
        .map(|i| axes.iter().map(|a| x.row(i).transpose().dot(a)).collect())
        .collect())
}

/// `key,z0..z{d-1}[,pc1,pc2]` rows.
pub fn write_latents(path: &Path, rows: &[LatentRow], with_pca: bool) -> Result<()> {
    let io = |e: std::io::Error| Error::io(path, e);
    let pcs = if with_pca && rows.len() >= 2 {
        let means: Vec<Vec<f64>> = rows.iter().map(|r| r.mean.clone()).collect();
        Some(principal_components(&means, 2)?)
    } else {
        None
    };
    let mut file = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    let dim = rows.first().map_or(0, |r| r.mean.len());
    let mut header = vec!["key".to_string()];
    header.extend((0..dim).map(|i| format!("z{i}")));
    if let Some(p) = &pcs {
        header.extend((0..p[0].len()).map(|i| format!("pc{}", i + 1)));
    }
    writeln!(file, "{}", header.join(",")).map_err(io)?;
    for (i, r) in rows.iter().enumerate() {
        let mut cells = vec![r.key.clone()];
        cells.extend(r.mean.iter().map(|v| v.to_string()));
        if let Some(p) = &pcs {
            cells.extend(p[i].iter().map(|v| v.to_string()));
        }
        writeln!(file, "{}", cells.join(",")).map_err(io)?;
    }
    file.flush().map_err(io)
}
