//! Acceptance run: one PASS/FAIL line per criterion. Pass criterion numbers
//! as arguments to run a subset, e.g. `cargo test --test acceptance -- 1 5`.

mod common;

use std::collections::{BTreeSet, HashSet};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};
use starvae::corpus::{molecule_symbols, synthetic_smiles, Labeled};
use starvae::generate::{sample, write_metadata, write_selfies, GenerationRequest, Mode};
use starvae::metrics::{descriptor_kl_score, internal_diversity, novelty, shift_test};
use starvae::model::{guided_shift, kl_diag_gaussians, LatentFunction, LatentGaussian, ModelConfig, StarVae};
use starvae::molgraph::{canonical_key, ring_counts, MolGraph};
use starvae::selfies::{classify, decode_str, decode_symbols, encode, Symbol, Vocabulary, INDEX_ALPHABET, MAX_LEN};
use starvae::smiles::parse_smiles;
use starvae::train::{
    finetune_lora, prepare_finetune, pretrain, reconstruction_accuracy, train_guidance_predictor, Checkpoint,
    Dataset, RunOptions, TrainConfig,
};
use starvae::Result;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Result<Outcome> {
    Ok(Outcome { pass, detail })
}

fn within(budget: Duration, start: Instant) -> bool {
    start.elapsed() <= budget
}

fn symbols_graph(symbols: &[String]) -> MolGraph {
    let refs: Vec<&str> = symbols.iter().map(String::as_str).collect();
    decode_symbols(&refs)
}

/// Every atom, branch, ring and index symbol the decoder understands.
fn token_alphabet() -> Vec<String> {
    let mut out = BTreeSet::new();
    for el in ["C", "N", "O", "S", "P", "F", "Cl", "Br", "I", "B"] {
        for bond in ["", "=", "#"] {
            for suffix in ["", "+1", "-1", "H1", "H1+1"] {
                out.insert(format!("[{bond}{el}{suffix}]"));
            }
        }
    }
    for bond in ["", "=", "#"] {
        for n in 1..=3 {
            out.insert(format!("[{bond}Branch{n}]"));
            out.insert(format!("[{bond}Ring{n}]"));
        }
    }
    out.extend(INDEX_ALPHABET.iter().map(|s| s.to_string()));
    out.into_iter().filter(|s| classify(s) != Symbol::Nop).collect()
}

fn random_validity() -> Result<Outcome> {
    let start = Instant::now();
    let alphabet = token_alphabet();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut invalid = 0usize;
    let mut first = None;
    for _ in 0..100_000 {
        let len = rng.random_range(1..=MAX_LEN);
        let toks: Vec<&str> = (0..len).map(|_| alphabet.choose(&mut rng).unwrap().as_str()).collect();
        if let Err(e) = decode_symbols(&toks).validate() {
            invalid += 1;
            first.get_or_insert_with(|| format!("{} -> {e}", toks.concat()));
        }
    }
    let ok = invalid == 0 && within(Duration::from_secs(120), start);
    let mut detail = format!("{invalid}/100000 invalid over {} symbols", alphabet.len());
    if let Some(f) = first {
        detail.push_str(&format!(", first {f}"));
    }
    outcome(ok, detail)
}

/// Real drug-like molecules plus distinct graphs decoded from random strings.
fn roundtrip_corpus(n: usize) -> Vec<MolGraph> {
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    let mut keep = |g: MolGraph, out: &mut Vec<MolGraph>| {
        if !g.is_empty() && seen.insert(canonical_key(&g)) {
            out.push(g);
        }
    };
    for line in include_str!("data/rdkit_descriptors.csv").lines().skip(1) {
        keep(parse_smiles(line.split(',').next().unwrap()).unwrap(), &mut out);
    }
    let alphabet = token_alphabet();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    while out.len() < n {
        let len = rng.random_range(1..=40);
        let toks: Vec<&str> = (0..len).map(|_| alphabet.choose(&mut rng).unwrap().as_str()).collect();
        keep(decode_symbols(&toks), &mut out);
    }
    out.truncate(n);
    out
}

fn codec_roundtrip() -> Result<Outcome> {
    let start = Instant::now();
    let corpus = roundtrip_corpus(10_000);
    let mut failures = Vec::new();
    for g in &corpus {
        let back = encode(g).and_then(|s| decode_str(&s));
        if !matches!(&back, Ok(b) if canonical_key(b) == canonical_key(g)) {
            failures.push(canonical_key(g));
        }
    }
    let rate = 1.0 - failures.len() as f64 / corpus.len() as f64;
    let ok = rate >= 0.999 && within(Duration::from_secs(120), start);
    let mut detail = format!("{rate:.4} of {} roundtrip", corpus.len());
    if let Some(f) = failures.first() {
        detail.push_str(&format!(", first failure {f}"));
    }
    outcome(ok, detail)
}

fn gradient_fidelity() -> Result<Outcome> {
    let start = Instant::now();
    let mut errors = common::op_gradient_errors();
    errors.push(("one_layer_elbo", common::one_layer_elbo_error()));
    let (worst_op, worst) = errors.iter().copied().fold(("", 0.0), |a, b| if b.1 > a.1 { b } else { a });
    let ok = errors.iter().all(|(_, e)| *e < 1e-4) && within(Duration::from_secs(120), start);
    outcome(ok, format!("{} checks, worst {worst_op} {worst:.2e}", errors.len()))
}

fn overfit() -> Result<Outcome> {
    let start = Instant::now();
    let smiles = synthetic_smiles(64, 5)?;
    let corpus: Vec<Vec<String>> = smiles.iter().map(|s| molecule_symbols(s)).collect::<Result<_>>()?;
    let vocab = Vocabulary::build(corpus.iter())?;
    let config = ModelConfig::desk(vocab.len());
    let data = Dataset::from_symbols(&corpus, &vocab, MAX_LEN)?;
    let tc = TrainConfig {
        max_steps: 5000,
        batch_size: 32,
        beta: 0.1,
        beta_warmup: 0,
        stop_accuracy: 0.995,
        ..TrainConfig::default()
    };
    let mut ckpt = Checkpoint::new(StarVae::new(config)?, vocab, tc.lr)?;
    let run = pretrain(&mut ckpt, &data, &tc, RunOptions::default())?;
    let accuracy = reconstruction_accuracy(&ckpt, &data.rows)?;
    let mut req = GenerationRequest::new(Mode::Seeded { seeds: corpus.clone(), noise_scale: 0.0 }, corpus.len(), 0);
    req.temperature = 0.0;
    let exact = sample(&ckpt, &req)?
        .iter()
        .zip(&corpus)
        .filter(|(s, c)| canonical_key(&s.graph) == canonical_key(&symbols_graph(c)))
        .count();
    let ok = exact as f64 >= 0.9 * corpus.len() as f64
        && accuracy >= 0.99
        && within(Duration::from_secs(600), start);
    outcome(ok, format!("{} steps at lr {}, exact {exact}/64, token accuracy {accuracy:.4}", run.steps, tc.lr))
}

/// `n` standard normal draws stratified into equal-probability bins, in
/// random order.
fn stratified_normals(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let std = Normal::standard();
    let mut bins: Vec<usize> = (0..n).collect();
    bins.shuffle(rng);
    bins.into_iter()
        .map(|b| std.inverse_cdf((b as f64 + rng.random::<f64>()) / n as f64))
        .collect()
}

fn log_density(g: &LatentGaussian, z: &[f64]) -> f64 {
    z.iter()
        .zip(&g.mean)
        .zip(&g.log_variance)
        .map(|((z, m), lv)| -0.5 * (lv + (z - m).powi(2) / lv.exp()))
        .sum()
}

fn random_gaussian(dim: usize, rng: &mut ChaCha8Rng) -> LatentGaussian {
    LatentGaussian {
        mean: (0..dim).map(|_| rng.sample(rand_distr::StandardNormal)).collect(),
        log_variance: (0..dim).map(|_| 2.0 * rng.random_range(-1.0..1.0)).collect(),
    }
}

fn kl_correctness() -> Result<Outcome> {
    const DIM: usize = 32;
    const N: usize = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    let mut self_kl_zero = true;
    for _ in 0..100 {
        let q = random_gaussian(DIM, &mut rng);
        let p = random_gaussian(DIM, &mut rng);
        let closed = kl_diag_gaussians(&q, &p)?;
        self_kl_zero &= kl_diag_gaussians(&q, &q)? == 0.0;
        let eps: Vec<Vec<f64>> = (0..DIM).map(|_| stratified_normals(N, &mut rng)).collect();
        let mut total = 0.0;
        let mut noise = vec![0.0; DIM];
        for i in 0..N {
            for (d, e) in eps.iter().enumerate() {
                noise[d] = e[i];
            }
            let z = q.reparameterize(&noise)?;
            total += log_density(&q, &z) - log_density(&p, &z);
        }
        worst = worst.max((total / N as f64 - closed).abs());
    }
    outcome(worst < 1e-2 && self_kl_zero, format!("worst |closed - MC| {worst:.2e}, KL(q,q)=0: {self_kl_zero}"))
}

fn ring_total(g: &MolGraph) -> f64 {
    ring_counts(g).total() as f64
}

fn conditional_shift() -> Result<Outcome> {
    let start = Instant::now();
    let smiles = synthetic_smiles(5000, 21)?;
    let corpus: Vec<Vec<String>> = smiles.iter().map(|s| molecule_symbols(s)).collect::<Result<_>>()?;
    let vocab = Vocabulary::build(corpus.iter())?;
    let mut config = ModelConfig::desk(vocab.len());
    config.d_model = 64;
    config.d_ff = 128;
    config.latent_dim = 16;
    let pre = TrainConfig {
        max_steps: 3000,
        beta_warmup: 500,
        lr: 1e-3,
        ..TrainConfig::default()
    };
    let data = Dataset::from_symbols(&corpus, &vocab, MAX_LEN)?;
    let mut ckpt = Checkpoint::new(StarVae::new(config)?, vocab, pre.lr)?;
    pretrain(&mut ckpt, &data, &pre, RunOptions::default())?;

    let base: Vec<(String, Vec<u32>)> = ckpt
        .model
        .params
        .iter()
        .map(|(n, t)| (n.to_string(), t.data().iter().map(|x| x.to_bits()).collect()))
        .collect();
    let labeled: Vec<Labeled> = corpus
        .iter()
        .map(|s| Labeled { symbols: s.clone(), value: ring_total(&symbols_graph(s)) })
        .collect();
    let fine = TrainConfig {
        max_steps: 1500,
        beta_warmup: 0,
        lr: 1e-3,
        ..TrainConfig::default()
    };
    let set = prepare_finetune(&mut ckpt, &labeled, &fine)?;
    finetune_lora(&mut ckpt, &set, &fine, RunOptions::default())?;
    let frozen = base.iter().all(|(name, bits)| {
        ckpt.model.params.get(name).is_ok_and(|t| t.data().iter().map(|x| x.to_bits()).eq(bits.iter().copied()))
    });

    let (low, high) = (0.0, 3.0);
    let rings_at = |y: f64| -> Result<Vec<f64>> {
        let req = GenerationRequest::new(Mode::Conditional { y }, 500, 7);
        Ok(sample(&ckpt, &req)?.iter().map(|s| ring_total(&s.graph)).collect())
    };
    let test = shift_test(&rings_at(low)?, &rings_at(high)?)?;
    let ok = test.p_value < 0.01 && test.mean_a < test.mean_b && frozen && within(Duration::from_secs(1800), start);
    outcome(
        ok,
        format!(
            "mean rings {:.3} at y={low}, {:.3} at y={high}, p={:.2e}, base frozen: {frozen}",
            test.mean_a, test.mean_b, test.p_value
        ),
    )
}

fn metric_sanity() -> Result<Outcome> {
    let graphs: Vec<MolGraph> = synthetic_smiles(2000, 5)?
        .iter()
        .map(|s| parse_smiles(s))
        .collect::<Result<_>>()?;
    let (a, b) = graphs.split_at(1000);
    let halves = descriptor_kl_score(a, b)?.score;
    let identical = descriptor_kl_score(&graphs, &graphs)?.score;
    let same = vec![graphs[0].clone(); 50];
    let intdiv = internal_diversity(&same, 1)?;
    let keys: Vec<String> = graphs.iter().map(canonical_key).collect();
    let nov = novelty(&keys[..500], &keys)?;
    let ok = halves >= 0.95 && identical == 1.0 && intdiv == 0.0 && nov == 0.0;
    outcome(ok, format!("split halves {halves:.4}, identical {identical}, IntDiv {intdiv}, novelty {nov}"))
}

struct HalfNormSquared;

impl LatentFunction for HalfNormSquared {
    fn value_and_gradient(&self, z: &[f64]) -> Result<(f64, Vec<f64>)> {
        Ok((-0.5 * z.iter().map(|x| x * x).sum::<f64>(), z.iter().map(|x| -x).collect()))
    }
}

fn guidance() -> Result<Outcome> {
    let plain = common::tiny_checkpoint(20);
    let mut guided = plain.clone();
    let symbols = common::small_symbols();
    let labels: Vec<Labeled> = (0..150)
        .map(|i| Labeled { symbols: symbols[i % symbols.len()].clone(), value: (i % symbols.len()) as f64 })
        .collect();
    train_guidance_predictor(&mut guided, &labels, 0)?;
    let req = GenerationRequest::new(Mode::Unconditional, 64, 4);
    let (a, b) = (sample(&plain, &req)?, sample(&guided, &req)?);
    let identical = a.len() == b.len()
        && a.iter().zip(&b).all(|(x, y)| x.ids == y.ids && x.z_norm.to_bits() == y.z_norm.to_bits());

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let z: Vec<f64> = (0..32).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
        let lambda = rng.random_range(0.0..1.0);
        let shifted = guided_shift(&z, &HalfNormSquared, lambda, 1)?;
        for (s, z) in shifted.iter().zip(&z) {
            worst = worst.max((s - (1.0 - lambda) * z).abs());
        }
    }
    outcome(identical && worst <= 1e-6, format!("lambda 0 identical: {identical}, worst shift error {worst:.1e}"))
}

fn train_small(corpus: &[Vec<String>]) -> Result<Checkpoint> {
    let vocab = Vocabulary::build(corpus.iter())?;
    let mut config = ModelConfig::desk(vocab.len());
    config.d_model = 32;
    config.d_ff = 64;
    config.latent_dim = 8;
    let tc = TrainConfig { max_steps: 40, batch_size: 16, ..TrainConfig::default() };
    let data = Dataset::from_symbols(corpus, &vocab, MAX_LEN)?;
    let mut ckpt = Checkpoint::new(StarVae::new(config)?, vocab, tc.lr)?;
    pretrain(&mut ckpt, &data, &tc, RunOptions::default())?;
    Ok(ckpt)
}

fn determinism() -> Result<Outcome> {
    let dir = tempfile::tempdir().map_err(|e| starvae::Error::io(std::path::Path::new("tempdir"), e))?;
    let corpus: Vec<Vec<String>> = synthetic_smiles(64, 9)?
        .iter()
        .map(|s| molecule_symbols(s))
        .collect::<Result<_>>()?;
    let read = |name: &str| std::fs::read(dir.path().join(name)).unwrap_or_default();
    for run in ["a", "b"] {
        let ckpt = train_small(&corpus)?;
        ckpt.save(&dir.path().join(format!("{run}.ckpt")))?;
        let samples = sample(&ckpt, &GenerationRequest::new(Mode::Unconditional, 200, 3))?;
        write_selfies(&dir.path().join(format!("{run}.selfies")), &samples)?;
        write_metadata(&dir.path().join(format!("{run}.csv")), &samples)?;
    }
    let same_ckpt = read("a.ckpt") == read("b.ckpt");
    let same_samples = read("a.selfies") == read("b.selfies") && read("a.csv") == read("b.csv");
    Checkpoint::load(&dir.path().join("a.ckpt"))?.save(&dir.path().join("c.ckpt"))?;
    let resave = read("a.ckpt") == read("c.ckpt") && !read("a.ckpt").is_empty();
    outcome(
        same_ckpt && same_samples && resave,
        format!("checkpoints equal: {same_ckpt}, samples equal: {same_samples}, save-load-save equal: {resave}"),
    )
}

type Check = fn() -> Result<Outcome>;

const CRITERIA: [(u32, &str, Check); 9] = [
    (1, "random sequence validity", random_validity),
    (2, "codec roundtrip", codec_roundtrip),
    (3, "gradient fidelity", gradient_fidelity),
    (5, "KL correctness", kl_correctness),
    (7, "metric sanity", metric_sanity),
    (8, "guidance", guidance),
    (9, "determinism and persistence", determinism),
    (4, "overfit reconstruction", overfit),
    (6, "conditional shift", conditional_shift),
];

fn main() -> ExitCode {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (id, name, check) in CRITERIA {
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let (pass, detail) = match check() {
            Ok(o) => (o.pass, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        failed += usize::from(!pass);
        println!(
            "criterion {id} {}: {name} ({:.1}s) {detail}",
            if pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
