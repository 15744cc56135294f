//! Corpus files and a seeded synthetic molecule generator.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::molgraph::{canonical_key, BondOrder, MolGraph};
use crate::selfies::{decode_symbols, encode_symbols, tokenize, MAX_LEN};
use crate::smiles::{parse_smiles, write_smiles};

/// SELFIES tokens of `text` when it consists only of bracketed symbols.
/// SMILES such as `[O-]C=O` also start with a bracket but fail here.
fn selfies_tokens(text: &str) -> Option<Vec<&str>> {
    if !text.starts_with('[') {
        return None;
    }
    tokenize(text).ok().filter(|t| !t.is_empty())
}

/// One molecule as SELFIES symbols, from either notation. Text made only
/// of bracketed symbols is SELFIES, anything else is read as SMILES and
/// encoded.
pub fn molecule_symbols(text: &str) -> Result<Vec<String>> {
    let text = text.trim();
    match selfies_tokens(text) {
        Some(toks) => Ok(toks.into_iter().map(str::to_string).collect()),
        None => encode_symbols(&parse_smiles(text)?),
    }
}

pub fn molecule_graph(text: &str) -> Result<MolGraph> {
    let text = text.trim();
    match selfies_tokens(text) {
        Some(toks) => Ok(decode_symbols(&toks)),
        None => parse_smiles(text),
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn at_line(line: usize, e: Error) -> Error {
    match e {
        Error::Corpus { .. } | Error::Io { .. } => e,
        other => Error::Corpus {
            line,
            message: other.to_string(),
        },
    }
}

/// Parses corpus text: one molecule per line, blank lines skipped.
pub fn parse_corpus(text: &str) -> Result<Vec<Vec<String>>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| molecule_symbols(l).map_err(|e| at_line(i + 1, e)))
        .collect()
}

pub fn read_corpus(path: &Path) -> Result<Vec<Vec<String>>> {
    parse_corpus(&read_text(path)?)
}

/// Raw non-blank lines, for callers that need graphs rather than symbols.
pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    Ok(read_text(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Labeled {
    pub symbols: Vec<String>,
    pub value: f64,
}

/// Reads a `molecule,value` CSV.
pub fn parse_labeled(text: &str) -> Result<Vec<Labeled>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| Error::Corpus {
        line: 1,
        message: e.to_string(),
    })?;
    let col = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| Error::Corpus {
            line: 1,
            message: format!("missing column '{name}'"),
        })
    };
    let (mol_col, value_col) = (col("molecule")?, col("value")?);
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::Corpus {
            line,
            message: e.to_string(),
        })?;
        let field = |c: usize| rec.get(c).unwrap_or("");
        let value: f64 = field(value_col).parse().map_err(|_| Error::Corpus {
            line,
            message: format!("value '{}' is not a number", field(value_col)),
        })?;
        if !value.is_finite() {
            return Err(Error::Corpus {
                line,
                message: "value is not finite".into(),
            });
        }
        let symbols = molecule_symbols(field(mol_col)).map_err(|e| at_line(line, e))?;
        out.push(Labeled { symbols, value });
    }
    Ok(out)
}

pub fn read_labeled(path: &Path) -> Result<Vec<Labeled>> {
    parse_labeled(&read_text(path)?)
}

const CORES: &[&str] = &[
    "C", "CC", "CCC", "CCCC", "CC(C)C", "C=CC", "CCO", "CCN", "c1ccccc1", "c1ccncc1",
    "c1ccsc1", "c1ccoc1", "c1cc[nH]c1", "C1CCCCC1", "C1CCCC1", "C1CCOCC1", "C1CCNCC1",
    "C1CC1", "c1ccc2ccccc2c1", "c1cnc2ccccc2c1", "O=C1CCCN1", "c1ncncn1",
];

const SUBSTITUENTS: &[&str] = &[
    "C", "C", "CC", "CCC", "C(C)C", "O", "N", "F", "Cl", "Br", "I", "C#N", "C(=O)O",
    "C(=O)N", "OC", "S", "SC", "C(F)(F)F", "S(=O)(=O)C", "C=C", "OCC", "NC(=O)C", "C(=O)C",
    "c1ccccc1", "c1ccncc1", "C1CCCCC1", "C1CC1", "N1CCCC1", "C1CCOC1", "c1ccsc1", "N1CCOCC1",
    "Cc1ccccc1", "Oc1ccccc1", "P(=O)(O)O", "B(O)O",
];

fn attach(g: &mut MolGraph, frag: &MolGraph, at: usize, order: BondOrder) -> Result<()> {
    let offset = g.atom_count();
    for a in frag.atoms() {
        g.add_atom(*a);
    }
    for b in frag.bonds() {
        g.add_bond_flagged(b.a + offset, b.b + offset, b.order, b.aromatic)?;
    }
    g.add_bond(at, offset, order)?;
    Ok(())
}

fn with_h(g: &MolGraph, min_h: u8) -> Vec<usize> {
    (0..g.atom_count())
        .filter(|&i| g.atoms()[i].explicit_h == 0 && g.implicit_h(i).unwrap_or(0) >= min_h)
        .collect()
}

fn random_molecule(rng: &mut ChaCha8Rng, cores: &[MolGraph], subs: &[MolGraph]) -> Result<MolGraph> {
    let mut g = cores.choose(rng).expect("non-empty core table").clone();
    let n_subs = rng.random_range(0..=5);
    for _ in 0..n_subs {
        let sites = with_h(&g, 1);
        let Some(&at) = sites.choose(rng) else { break };
        let frag = subs.choose(rng).expect("non-empty substituent table");
        if g.atom_count() + frag.atom_count() > 32 {
            break;
        }
        attach(&mut g, frag, at, BondOrder::Single)?;
    }
    if rng.random_bool(0.25) {
        let sites: Vec<usize> = with_h(&g, 2)
            .into_iter()
            .filter(|&i| g.atoms()[i].element == crate::molgraph::Element::C && g.degree(i) > 0)
            .collect();
        if let Some(&at) = sites.choose(rng) {
            let oxo = parse_smiles("O")?;
            attach(&mut g, &oxo, at, BondOrder::Double)?;
        }
    }
    Ok(g)
}

/// `n` distinct SMILES strings built from common ring systems and
/// substituents. Every molecule encodes to at most the maximum sequence
/// length and survives a codec roundtrip.
pub fn synthetic_smiles(n: usize, seed: u64) -> Result<Vec<String>> {
    let parse_all = |table: &[&str]| -> Result<Vec<MolGraph>> {
        table.iter().map(|s| parse_smiles(s)).collect()
    };
    let cores = parse_all(CORES)?;
    let subs = parse_all(SUBSTITUENTS)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0usize;
    while out.len() < n {
        attempts += 1;
        if attempts > n * 50 + 1000 {
            return Err(Error::domain(format!(
                "generator stalled after {} distinct molecules",
                out.len()
            )));
        }
        let g = random_molecule(&mut rng, &cores, &subs)?;
        let key = canonical_key(&g);
        if seen.contains(&key) {
            continue;
        }
        let syms = encode_symbols(&g)?;
        if syms.len() > MAX_LEN {
            continue;
        }
        let refs: Vec<&str> = syms.iter().map(String::as_str).collect();
        if canonical_key(&decode_symbols(&refs)) != key {
            continue;
        }
        seen.insert(key);
        out.push(write_smiles(&g)?);
    }
    Ok(out)
}
