use std::fs::OpenOptions;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{CommandFactory, Parser, Subcommand, ValueEnum};

use starvae::config::KeyValues;
use starvae::corpus::{molecule_graph, read_corpus, read_labeled, read_lines, synthetic_smiles};
use starvae::generate::{export_latents, sample, write_latents, write_metadata, write_selfies, GenerationRequest, Mode};
use starvae::metrics::{descriptor_values, evaluate, DESCRIPTORS};
use starvae::model::{ModelConfig, StarVae};
use starvae::molgraph::canonical_key;
use starvae::selfies::{encode, Vocabulary};
use starvae::smiles::write_smiles;
use starvae::train::{
    finetune_lora, prepare_finetune, pretrain, train_guidance_predictor, Checkpoint, Dataset, RunOptions, TrainConfig,
};
use starvae::{Error, ErrorClass, Result};

/// Labeled sets smaller than this skip the latent property predictor.
const MIN_PREDICTOR_LABELS: usize = 100;

#[derive(Parser)]
#[command(name = "starvae", version, about = "SELFIES Transformer VAE for molecule generation")]
struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true)]
    rng_seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SampleMode {
    Unconditional,
    Conditional,
    Seeded,
}

#[derive(Clone, Copy, ValueEnum)]
enum Notation {
    Selfies,
    Smiles,
}

#[derive(Subcommand)]
enum Command {
    /// Build the token vocabulary of a corpus (one SMILES or SELFIES per line).
    BuildVocab {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the unconditional model, or resume training a checkpoint.
    Pretrain {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// key=value file with model and training settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint instead of a fresh model.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Training log CSV [default: <out>.log.csv].
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Add adapters and a property prior, train them on labeled molecules.
    Finetune {
        #[arg(long)]
        ckpt: PathBuf,
        /// CSV with `molecule` and `value` columns.
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Generate molecules, one SELFIES per line.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum)]
        mode: SampleMode,
        #[arg(long)]
        n: usize,
        /// Property target (conditional mode).
        #[arg(long, allow_negative_numbers = true)]
        y: Option<f64>,
        #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
        lambda_lora: f64,
        #[arg(long, default_value_t = 0.0)]
        lambda_guidance: f64,
        #[arg(long, default_value_t = 1)]
        guidance_steps: usize,
        /// Seed molecules (seeded mode).
        #[arg(long)]
        seed_file: Option<PathBuf>,
        /// Posterior noise scale (seeded mode) [default: 1].
        #[arg(long)]
        noise: Option<f64>,
        /// 0 decodes greedily.
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long, default_value_t = 0)]
        top_k: usize,
        #[arg(long)]
        out: PathBuf,
        /// Per-sample metadata CSV.
        #[arg(long)]
        metadata: Option<PathBuf>,
    },
    /// Distribution metrics of generated molecules, as `metric,value` CSV.
    Evaluate {
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        train_set: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Posterior means of a corpus, with two principal components.
    Encode {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        no_pca: bool,
    },
    /// Translate molecules between SMILES and SELFIES, line by line.
    Convert {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum)]
        to: Notation,
        #[arg(long)]
        out: PathBuf,
    },
    /// Canonical key and descriptor values of each molecule, as CSV.
    Descriptors {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic SMILES corpus.
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.class() {
                ErrorClass::Io => 1,
                ErrorClass::Usage => 2,
                ErrorClass::Numeric => 3,
            })
        }
    }
}

/// Prints a usage error and exits with status 2.
fn usage(msg: &str) -> ! {
    Cli::command().error(ErrorKind::ArgumentConflict, msg).exit()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn default_log(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".log.csv");
    PathBuf::from(s)
}

/// Reads a run config: model keys (pretrain only) and training keys.
fn load_config(path: Option<&Path>, model_keys: bool) -> Result<KeyValues> {
    let kv = match path {
        Some(p) => KeyValues::load(p)?,
        None => KeyValues::default(),
    };
    let mut known: Vec<&str> = TrainConfig::KEYS.to_vec();
    if model_keys {
        known.extend(ModelConfig::KEYS.iter().filter(|k| **k != "vocab_size"));
    }
    kv.reject_unknown(&known)?;
    Ok(kv)
}

fn train_config(kv: &KeyValues, seed: Option<u64>) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default().with_overrides(kv)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Opens the training log; appends when resuming so earlier rows survive.
fn open_log(path: &Path, append: bool) -> Result<std::fs::File> {
    let mut o = OpenOptions::new();
    if append {
        o.append(true).create(true);
    } else {
        o.write(true).create(true).truncate(true);
    }
    o.open(path).map_err(|e| Error::io(path, e))
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.rng_seed;
    match cli.command {
        Command::BuildVocab { corpus, out } => {
            let mols = read_corpus(&corpus)?;
            let vocab = Vocabulary::build(mols.iter())?;
            vocab.save(&out)?;
            eprintln!("{} tokens from {} molecules", vocab.len(), mols.len());
        }
        Command::Pretrain {
            corpus,
            vocab,
            config,
            out,
            resume,
            log,
        } => {
            let kv = load_config(config.as_deref(), true)?;
            let cfg = train_config(&kv, seed)?;
            let vocab = Vocabulary::load(&vocab)?;
            let mols = read_corpus(&corpus)?;
            let resuming = resume.is_some();
            let mut ckpt = match resume {
                Some(path) => {
                    let ckpt = Checkpoint::load(&path)?;
                    if ckpt.vocab != vocab {
                        return Err(Error::Config("vocabulary differs from the checkpoint's".into()));
                    }
                    ckpt
                }
                None => {
                    let mut model_cfg = ModelConfig::desk(vocab.len()).with_overrides(&kv)?;
                    if let Some(s) = seed {
                        model_cfg.init_seed = s;
                    }
                    Checkpoint::new(StarVae::new(model_cfg)?, vocab, cfg.lr)?
                }
            };
            let data = Dataset::from_symbols(&mols, &ckpt.vocab, ckpt.model.config.max_len)?;
            let log_path = log.unwrap_or_else(|| default_log(&out));
            let mut log_file = open_log(&log_path, resuming)?;
            let summary = pretrain(
                &mut ckpt,
                &data,
                &cfg,
                RunOptions {
                    log: Some(&mut log_file),
                    checkpoint_path: Some(&out),
                },
            )?;
            ckpt.save(&out)?;
            eprintln!(
                "step {}; token accuracy {:.4}",
                summary.steps, summary.final_window_accuracy
            );
        }
        Command::Finetune {
            ckpt,
            labels,
            config,
            out,
            log,
        } => {
            let kv = load_config(config.as_deref(), false)?;
            let cfg = train_config(&kv, seed)?;
            let mut ck = Checkpoint::load(&ckpt)?;
            let labeled = read_labeled(&labels)?;
            let data = prepare_finetune(&mut ck, &labeled, &cfg)?;
            let log_path = log.unwrap_or_else(|| default_log(&out));
            let mut log_file = open_log(&log_path, false)?;
            let summary = finetune_lora(
                &mut ck,
                &data,
                &cfg,
                RunOptions {
                    log: Some(&mut log_file),
                    checkpoint_path: Some(&out),
                },
            )?;
            eprintln!("finetuned to step {}", summary.steps);
            if labeled.len() >= MIN_PREDICTOR_LABELS {
                let r2 = train_guidance_predictor(&mut ck, &labeled, cfg.seed)?;
                eprintln!("latent property predictor held-out R^2 {r2:.4}");
            } else {
                eprintln!("fewer than {MIN_PREDICTOR_LABELS} labels; no latent property predictor");
            }
            ck.save(&out)?;
        }
        Command::Sample {
            ckpt,
            mode,
            n,
            y,
            lambda_lora,
            lambda_guidance,
            guidance_steps,
            seed_file,
            noise,
            temperature,
            top_k,
            out,
            metadata,
        } => {
            let mode = match mode {
                SampleMode::Unconditional => {
                    if y.is_some() || seed_file.is_some() || noise.is_some() {
                        usage("--y, --seed-file and --noise do not apply to unconditional sampling");
                    }
                    Mode::Unconditional
                }
                SampleMode::Conditional => {
                    let Some(y) = y else {
                        usage("--mode conditional requires --y");
                    };
                    if seed_file.is_some() || noise.is_some() {
                        usage("--seed-file and --noise apply only to seeded sampling");
                    }
                    Mode::Conditional { y }
                }
                SampleMode::Seeded => {
                    let Some(path) = seed_file else {
                        usage("--mode seeded requires --seed-file");
                    };
                    if y.is_some() {
                        usage("--y applies only to conditional sampling");
                    }
                    Mode::Seeded {
                        seeds: read_corpus(&path)?,
                        noise_scale: noise.unwrap_or(1.0),
                    }
                }
            };
            let ck = Checkpoint::load(&ckpt)?;
            let mut req = GenerationRequest::new(mode, n, seed.unwrap_or(0));
            req.lora_lambda = lambda_lora;
            req.guidance_lambda = lambda_guidance;
            req.guidance_steps = guidance_steps;
            req.temperature = temperature;
            req.top_k = top_k;
            let samples = sample(&ck, &req)?;
            write_selfies(&out, &samples)?;
            if let Some(m) = metadata {
                write_metadata(&m, &samples)?;
            }
        }
        Command::Evaluate {
            generated,
            reference,
            train_set,
            out,
        } => {
            let gen = read_lines(&generated)?;
            let graphs = |p: &Path| -> Result<Vec<_>> {
                read_lines(p)?
                    .iter()
                    .enumerate()
                    .map(|(i, l)| {
                        molecule_graph(l).map_err(|e| Error::Corpus {
                            line: i + 1,
                            message: format!("{}: {e}", p.display()),
                        })
                    })
                    .collect()
            };
            let report = evaluate(&gen, &graphs(&reference)?, &graphs(&train_set)?)?;
            report.write(&out)?;
            print!("{}", report.to_text());
        }
        Command::Encode {
            ckpt,
            corpus,
            out,
            no_pca,
        } => {
            let ck = Checkpoint::load(&ckpt)?;
            let mols = read_corpus(&corpus)?;
            let rows = export_latents(&ck, &mols)?;
            write_latents(&out, &rows, !no_pca)?;
        }
        Command::Convert { input, to, out } => {
            let mut text = String::new();
            for (i, line) in read_lines(&input)?.iter().enumerate() {
                let at = |e: Error| Error::Corpus {
                    line: i + 1,
                    message: e.to_string(),
                };
                let g = molecule_graph(line).map_err(at)?;
                // An empty graph (all tokens inert) is an empty line.
                let s = match to {
                    _ if g.is_empty() => Ok(String::new()),
                    Notation::Selfies => encode(&g),
                    Notation::Smiles => write_smiles(&g),
                };
                text.push_str(&s.map_err(at)?);
                text.push('\n');
            }
            write_text(&out, &text)?;
        }
        Command::Descriptors { input, out } => {
            let mut w = csv::Writer::from_path(&out).map_err(|e| Error::io(&out, e.into()))?;
            let mut header = vec!["molecule", "canonical_key"];
            header.extend(DESCRIPTORS.iter().map(|d| d.0));
            w.write_record(&header).map_err(|e| Error::io(&out, e.into()))?;
            for (i, line) in read_lines(&input)?.iter().enumerate() {
                let g = molecule_graph(line).map_err(|e| Error::Corpus {
                    line: i + 1,
                    message: e.to_string(),
                })?;
                let mut rec = vec![line.clone(), canonical_key(&g)];
                rec.extend(descriptor_values(&g)?.iter().map(|v| v.to_string()));
                w.write_record(&rec).map_err(|e| Error::io(&out, e.into()))?;
            }
            w.flush().map_err(|e| Error::io(&out, e))?;
        }
        Command::Synth { n, out } => {
            let mut text = synthetic_smiles(n, seed.unwrap_or(0))?.join("\n");
            text.push('\n');
            write_text(&out, &text)?;
        }
    }
    Ok(())
}
