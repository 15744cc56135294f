use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{argmax, elbo, token_accuracy, Checkpoint, Phase, PropertyNorm, TrainConfig};
use crate::corpus::Labeled;
use crate::error::{Error, Result};
use crate::model::{Condition, Forward, GuidancePredictor, ParamGroup, TokenBatch};
use crate::numerics::Tensor;
use crate::selfies::Vocabulary;

/// Framed id rows (`<sos> … <eos>`, unpadded) with optional normalized
/// property values.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub rows: Vec<Vec<u32>>,
    pub y: Option<Vec<f64>>,
}

impl Dataset {
    pub fn from_symbols(corpus: &[Vec<String>], vocab: &Vocabulary, max_len: usize) -> Result<Dataset> {
        if corpus.is_empty() {
            return Err(Error::Empty("training corpus".into()));
        }
        let rows = corpus.iter().map(|s| frame(vocab, s, max_len)).collect();
        Ok(Dataset { rows, y: None })
    }

    /// Labeled rows; values are normalized with `norm`.
    pub fn from_labeled(
        labeled: &[Labeled],
        vocab: &Vocabulary,
        max_len: usize,
        norm: PropertyNorm,
    ) -> Result<Dataset> {
        if labeled.is_empty() {
            return Err(Error::Empty("labeled corpus".into()));
        }
        Ok(Dataset {
            rows: labeled.iter().map(|l| frame(vocab, &l.symbols, max_len)).collect(),
            y: Some(labeled.iter().map(|l| norm.normalize(l.value)).collect()),
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Example indices of the batch at a 0-based step. Each epoch is a
    /// fresh permutation derived from `seed`, so the order depends only on
    /// `(seed, step)`.
    fn batch_indices(&self, seed: u64, step: u64, batch: usize) -> Vec<usize> {
        let n = self.len() as u64;
        let mut out = Vec::with_capacity(batch);
        let mut cached: Option<(u64, Vec<usize>)> = None;
        for k in step * batch as u64..(step + 1) * batch as u64 {
            let epoch = k / n;
            if cached.as_ref().map(|c| c.0) != Some(epoch) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(epoch + 1);
                let mut perm: Vec<usize> = (0..self.len()).collect();
                perm.shuffle(&mut rng);
                cached = Some((epoch, perm));
            }
            out.push(cached.as_ref().expect("set above").1[(k % n) as usize]);
        }
        out
    }
}

fn frame(vocab: &Vocabulary, symbols: &[String], max_len: usize) -> Vec<u32> {
    let ids = vocab.ids(symbols);
    let mut framed = crate::selfies::frame_and_pad(&ids, max_len);
    while framed.last() == Some(&crate::selfies::PAD) {
        framed.pop();
    }
    framed
}

/// Standard-normal noise for the batch at a step.
fn step_noise(seed: u64, step: u64, batch: usize, dim: usize) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0fa0_7e57);
    rng.set_stream(step);
    Tensor::randn(&[batch, dim], 1.0, &mut rng)
}

/// Per-step training statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub step: u64,
    pub loss: f64,
    pub recon: f64,
    pub kl: f64,
    pub accuracy: f64,
}

/// Where a run writes its log and checkpoints.
#[derive(Default)]
pub struct RunOptions<'a> {
    /// Receives `step,loss,recon,kl` CSV rows (header written when the run
    /// starts at step 0).
    pub log: Option<&'a mut dyn Write>,
    /// Periodic checkpoints overwrite this path; a diverged run writes
    /// `<path>.diverged`.
    pub checkpoint_path: Option<&'a Path>,
}

/// Outcome of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub steps: u64,
    pub final_window_accuracy: f64,
    pub stopped_early: bool,
    pub history: Vec<StepStats>,
}

/// One optimizer step on the given groups.
fn train_step(
    ckpt: &mut Checkpoint,
    data: &Dataset,
    cfg: &TrainConfig,
    groups: &[ParamGroup],
    lambda: Option<f64>,
) -> Result<StepStats> {
    let step = ckpt.optimizer.step_count();
    let idx = data.batch_indices(cfg.seed, step, cfg.batch_size);
    let rows: Vec<&[u32]> = idx.iter().map(|&i| data.rows[i].as_slice()).collect();
    let batch = TokenBatch::from_rows(&rows)?;
    let cond = match (lambda, &data.y) {
        (Some(l), Some(y)) => Some(Condition {
            y: idx.iter().map(|&i| y[i]).collect(),
            lora_lambda: l,
        }),
        (Some(_), None) => return Err(Error::domain("conditional training needs labels")),
        _ => None,
    };
    let noise = step_noise(cfg.seed, step, batch.batch, ckpt.model.config.latent_dim);
    let beta = cfg.beta_at(step + 1);

    let mut fx = Forward::new(&ckpt.model.params, groups);
    let terms = elbo(&ckpt.model, &mut fx, &batch, cond.as_ref(), beta, &noise)?;
    let g = &fx.graph;
    let stats = StepStats {
        step: step + 1,
        loss: g.value(terms.loss).item() as f64,
        recon: g.value(terms.recon).item() as f64,
        kl: g.value(terms.kl).item() as f64,
        accuracy: token_accuracy(g.value(terms.logits), &batch),
    };
    if let Some(op) = g.nonfinite().filter(|_| !stats.loss.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite loss at step {} (first produced by {op})",
            step + 1
        )));
    }
    if !stats.loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss at step {}", step + 1)));
    }
    if stats.kl < -1e-4 {
        return Err(Error::Numeric(format!("negative KL {} at step {}", stats.kl, step + 1)));
    }
    let leaves = fx.trainable_leaves();
    let mut grads = fx.graph.backward(terms.loss)?;
    let updates: Vec<(String, Tensor<f32>)> = leaves
        .into_iter()
        .filter_map(|(name, v)| grads.take(v).map(|g| (name, g)))
        .collect();
    drop(fx);
    ckpt.optimizer.begin_step();
    for (name, grad) in updates {
        let p = ckpt.model.params.get_mut(&name)?;
        ckpt.optimizer.update(&name, p, &grad)?;
    }
    Ok(stats)
}

fn run(
    ckpt: &mut Checkpoint,
    data: &Dataset,
    cfg: &TrainConfig,
    groups: &[ParamGroup],
    lambda: Option<f64>,
    mut opts: RunOptions<'_>,
) -> Result<RunSummary> {
    cfg.validate()?;
    let log_err = |e: std::io::Error| Error::io("<training log>", e);
    if ckpt.step() == 0 {
        if let Some(log) = opts.log.as_mut() {
            writeln!(log, "step,loss,recon,kl").map_err(log_err)?;
        }
    }
    let mut history = Vec::new();
    let mut window = Vec::new();
    let mut last_window = 0.0;
    let mut stopped_early = false;
    while ckpt.step() < cfg.max_steps {
        let stats = match train_step(ckpt, data, cfg, groups, lambda) {
            Ok(s) => s,
            Err(e @ Error::Numeric(_)) => {
                if let Some(path) = opts.checkpoint_path {
                    let mut diverged = PathBuf::from(path).into_os_string();
                    diverged.push(".diverged");
                    ckpt.save(Path::new(&diverged))?;
                }
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        history.push(stats);
        window.push(stats.accuracy);
        if stats.step % cfg.log_every == 0 || stats.step == cfg.max_steps {
            if let Some(log) = opts.log.as_mut() {
                writeln!(log, "{},{},{},{}", stats.step, stats.loss, stats.recon, stats.kl)
                    .map_err(log_err)?;
            }
            last_window = window.iter().sum::<f64>() / window.len() as f64;
            window.clear();
            if cfg.stop_accuracy > 0.0 && last_window >= cfg.stop_accuracy {
                stopped_early = true;
            }
        }
        if let Some(path) = opts.checkpoint_path {
            if cfg.checkpoint_every > 0 && stats.step % cfg.checkpoint_every == 0 {
                ckpt.save(path)?;
            }
        }
        if stopped_early {
            break;
        }
    }
    Ok(RunSummary {
        steps: ckpt.step(),
        final_window_accuracy: last_window,
        stopped_early,
        history,
    })
}

/// Unconditional ELBO training of the base network. Resumes from the
/// checkpoint's step counter.
pub fn pretrain(
    ckpt: &mut Checkpoint,
    data: &Dataset,
    cfg: &TrainConfig,
    opts: RunOptions<'_>,
) -> Result<RunSummary> {
    if data.is_empty() {
        return Err(Error::Empty("training corpus".into()));
    }
    if ckpt.phase != Phase::Pretrain {
        return Err(Error::domain("checkpoint has already been finetuned"));
    }
    ckpt.optimizer.lr = cfg.lr;
    run(ckpt, data, cfg, &[ParamGroup::Base], None, opts)
}

/// Conditional finetuning: base weights frozen, adapters, property
/// embedding and prior head trained. `data.y` must be normalized with
/// `ckpt.norm`; see [`prepare_finetune`].
pub fn finetune_lora(
    ckpt: &mut Checkpoint,
    data: &Dataset,
    cfg: &TrainConfig,
    opts: RunOptions<'_>,
) -> Result<RunSummary> {
    if data.y.is_none() {
        return Err(Error::domain("finetuning needs property labels"));
    }
    if !ckpt.model.is_conditional() {
        return Err(Error::domain("checkpoint has no adapters; call prepare_finetune first"));
    }
    ckpt.optimizer.lr = cfg.lr;
    run(
        ckpt,
        data,
        cfg,
        &[ParamGroup::Lora, ParamGroup::Conditional],
        Some(cfg.lora_lambda),
        opts,
    )
}

/// Switches a pretrained checkpoint to finetuning: adds adapters, fits the
/// property normalization and resets the optimizer. Returns the labeled
/// dataset. A checkpoint already in the finetune phase is left as is, so
/// interrupted finetuning resumes.
pub fn prepare_finetune(ckpt: &mut Checkpoint, labeled: &[Labeled], cfg: &TrainConfig) -> Result<Dataset> {
    if labeled.is_empty() {
        return Err(Error::Empty("labeled corpus".into()));
    }
    if ckpt.phase == Phase::Pretrain {
        let values: Vec<f64> = labeled.iter().map(|l| l.value).collect();
        ckpt.norm = PropertyNorm::fit(&values)?;
        if !ckpt.model.is_conditional() {
            ckpt.model.add_conditional(cfg.seed);
        }
        ckpt.phase = Phase::Finetune;
        ckpt.optimizer = crate::numerics::Adam::new(cfg.lr);
    }
    Dataset::from_labeled(labeled, &ckpt.vocab, ckpt.model.config.max_len, ckpt.norm)
}

/// Posterior means of every row under the base (unadapted) encoder.
pub fn posterior_means(ckpt: &Checkpoint, rows: &[Vec<u32>]) -> Result<Vec<Vec<f64>>> {
    const CHUNK: usize = 64;
    let mut out = Vec::with_capacity(rows.len());
    for chunk in rows.chunks(CHUNK) {
        let refs: Vec<&[u32]> = chunk.iter().map(Vec::as_slice).collect();
        for g in ckpt.model.encode_posterior(&refs, None)? {
            out.push(g.mean);
        }
    }
    Ok(out)
}

/// Fits the latent property predictor on posterior means of the labeled
/// rows (raw label units) and stores it in the checkpoint. Returns the
/// held-out R².
pub fn train_guidance_predictor(ckpt: &mut Checkpoint, labeled: &[Labeled], seed: u64) -> Result<f64> {
    let data = Dataset::from_labeled(labeled, &ckpt.vocab, ckpt.model.config.max_len, PropertyNorm::IDENTITY)?;
    let latents = posterior_means(ckpt, &data.rows)?;
    let labels: Vec<f64> = labeled.iter().map(|l| l.value).collect();
    let (predictor, r2) = GuidancePredictor::fit(&latents, &labels, seed)?;
    predictor.write_params(&mut ckpt.model.params)?;
    Ok(r2)
}

/// Teacher-forced token accuracy with each row decoded from its own
/// posterior mean. Rows are framed and unpadded, as in [`Dataset`].
pub fn reconstruction_accuracy(ckpt: &Checkpoint, rows: &[Vec<u32>]) -> Result<f64> {
    let means = posterior_means(ckpt, rows)?;
    let (mut hit, mut total) = (0usize, 0usize);
    for (row, mean) in rows.iter().zip(&means) {
        if row.len() < 2 {
            continue;
        }
        let logits = ckpt.model.decode_logits(&row[..row.len() - 1], mean, None)?;
        let v = ckpt.model.config.vocab_size;
        for (t, want) in row[1..].iter().enumerate() {
            hit += usize::from(argmax(&logits.data()[t * v..(t + 1) * v]) as u32 == *want);
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::Empty("rows to reconstruct".into()));
    }
    Ok(hit as f64 / total as f64)
}
