//! Distribution-learning metrics over generated molecule sets.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::path::Path;

use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::molgraph::{
    canonical_key, circular_fingerprint, count_h_acceptors, count_h_donors, count_rotatable_bonds,
    molecular_weight, ring_counts, tanimoto, MolGraph,
};
use crate::selfies::decode_str;

pub const FINGERPRINT_RADIUS: usize = 2;
pub const FINGERPRINT_BITS: usize = 2048;
pub const HISTOGRAM_BINS: usize = 50;
pub const SMOOTHING: f64 = 1e-10;
const MIN_DESCRIPTOR_SET: usize = 100;
const MIN_SHIFT_GROUP: usize = 30;

/// Decodes a SELFIES string to a valence-valid, non-empty graph.
pub fn parse_valid(selfies: &str) -> Option<MolGraph> {
    decode_str(selfies).ok().filter(|g| !g.is_empty() && g.is_valid())
}

/// Fraction of strings that decode to valid molecules.
pub fn validity<S: AsRef<str>>(samples: &[S]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::domain("validity of an empty sample set"));
    }
    let ok = samples.iter().filter(|s| parse_valid(s.as_ref()).is_some()).count();
    Ok(ok as f64 / samples.len() as f64)
}

/// Distinct keys among the first `k`, divided by `k`.
pub fn unique_at_k<S: AsRef<str>>(keys: &[S], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::domain("unique@k with k = 0"));
    }
    if k > keys.len() {
        return Err(Error::domain(format!("unique@{k} of only {} samples", keys.len())));
    }
    let distinct: HashSet<&str> = keys[..k].iter().map(AsRef::as_ref).collect();
    Ok(distinct.len() as f64 / k as f64)
}

/// Fraction of distinct sample keys absent from the reference keys.
pub fn novelty<S: AsRef<str>, R: AsRef<str>>(keys: &[S], reference: &[R]) -> Result<f64> {
    let distinct: HashSet<&str> = keys.iter().map(AsRef::as_ref).collect();
    if distinct.is_empty() {
        return Err(Error::domain("novelty of an empty sample set"));
    }
    let known: HashSet<&str> = reference.iter().map(AsRef::as_ref).collect();
    let novel = distinct.iter().filter(|k| !known.contains(*k)).count();
    Ok(novel as f64 / distinct.len() as f64)
}

/// `1 − (mean over ordered pairs i ≠ j of tanimoto^p)^(1/p)`.
pub fn internal_diversity(graphs: &[MolGraph], p: u32) -> Result<f64> {
    if graphs.len() < 2 {
        return Err(Error::domain("internal diversity needs at least two molecules"));
    }
    if p == 0 {
        return Err(Error::domain("internal diversity power must be positive"));
    }
    let fps: Vec<_> = graphs
        .iter()
        .map(|g| circular_fingerprint(g, FINGERPRINT_RADIUS, FINGERPRINT_BITS))
        .collect();
    let mut total = 0.0;
    for i in 0..fps.len() {
        for j in i + 1..fps.len() {
            total += 2.0 * tanimoto(&fps[i], &fps[j])?.powi(p as i32);
        }
    }
    let pairs = (fps.len() * (fps.len() - 1)) as f64;
    Ok(1.0 - (total / pairs).powf(1.0 / p as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DescriptorKind {
    Continuous,
    Integer,
}

pub const DESCRIPTORS: [(&str, DescriptorKind); 6] = [
    ("MolWt", DescriptorKind::Continuous),
    ("NumHDonors", DescriptorKind::Integer),
    ("NumHAcceptors", DescriptorKind::Integer),
    ("NumRotatableBonds", DescriptorKind::Integer),
    ("NumAromaticRings", DescriptorKind::Integer),
    ("NumAliphaticRings", DescriptorKind::Integer),
];

/// The six descriptor values of one molecule, in [`DESCRIPTORS`] order.
pub fn descriptor_values(g: &MolGraph) -> Result<[f64; 6]> {
    let rings = ring_counts(g);
    Ok([
        molecular_weight(g)?,
        count_h_donors(g) as f64,
        count_h_acceptors(g) as f64,
        count_rotatable_bonds(g) as f64,
        rings.aromatic as f64,
        rings.aliphatic as f64,
    ])
}

/// KL(p ‖ q) of two count vectors after adding `SMOOTHING` to each bin.
fn smoothed_kl(p: &[f64], q: &[f64]) -> f64 {
    let sp: f64 = p.iter().map(|x| x + SMOOTHING).sum();
    let sq: f64 = q.iter().map(|x| x + SMOOTHING).sum();
    p.iter()
        .zip(q)
        .map(|(a, b)| {
            let pa = (a + SMOOTHING) / sp;
            let qb = (b + SMOOTHING) / sq;
            pa * (pa / qb).ln()
        })
        .sum::<f64>()
        .max(0.0)
}

/// KL(reference ‖ generated) over a shared histogram of the pooled range.
pub fn histogram_kl(generated: &[f64], reference: &[f64], bins: usize) -> f64 {
    let all = generated.iter().chain(reference);
    let lo = all.clone().copied().fold(f64::INFINITY, f64::min);
    let hi = all.copied().fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / bins as f64;
    let bin = |x: f64| {
        if width == 0.0 {
            0
        } else {
            (((x - lo) / width) as usize).min(bins - 1)
        }
    };
    let count = |xs: &[f64]| {
        let mut h = vec![0.0; bins];
        for &x in xs {
            h[bin(x)] += 1.0;
        }
        h
    };
    smoothed_kl(&count(reference), &count(generated))
}

/// KL(reference ‖ generated) over exact integer values.
pub fn discrete_kl(generated: &[f64], reference: &[f64]) -> f64 {
    let mut counts: BTreeMap<i64, (f64, f64)> = BTreeMap::new();
    for &x in reference {
        counts.entry(x.round() as i64).or_default().0 += 1.0;
    }
    for &x in generated {
        counts.entry(x.round() as i64).or_default().1 += 1.0;
    }
    let (r, g): (Vec<f64>, Vec<f64>) = counts.values().copied().unzip();
    smoothed_kl(&r, &g)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorScore {
    /// `(descriptor, KL)` in [`DESCRIPTORS`] order.
    pub kl: Vec<(&'static str, f64)>,
    /// Mean of `exp(−KL)` over the implemented descriptors.
    pub score: f64,
}

pub fn descriptor_kl_score(generated: &[MolGraph], reference: &[MolGraph]) -> Result<DescriptorScore> {
    if generated.len() < MIN_DESCRIPTOR_SET || reference.len() < MIN_DESCRIPTOR_SET {
        return Err(Error::domain(format!(
            "descriptor KL needs at least {MIN_DESCRIPTOR_SET} molecules per set, got {} and {}",
            generated.len(),
            reference.len()
        )));
    }
    let table = |gs: &[MolGraph]| gs.iter().map(descriptor_values).collect::<Result<Vec<_>>>();
    let (gv, rv) = (table(generated)?, table(reference)?);
    let mut kl = Vec::with_capacity(DESCRIPTORS.len());
    for (d, (name, kind)) in DESCRIPTORS.iter().enumerate() {
        let g: Vec<f64> = gv.iter().map(|r| r[d]).collect();
        let r: Vec<f64> = rv.iter().map(|r| r[d]).collect();
        let value = match kind {
            DescriptorKind::Continuous => histogram_kl(&g, &r, HISTOGRAM_BINS),
            DescriptorKind::Integer => discrete_kl(&g, &r),
        };
        kl.push((*name, value));
    }
    let score = kl.iter().map(|(_, k)| (-k).exp()).sum::<f64>() / kl.len() as f64;
    Ok(DescriptorScore { kl, score })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShiftTest {
    pub mean_a: f64,
    pub mean_b: f64,
    pub t: f64,
    pub dof: f64,
    /// Two-sided.
    pub p_value: f64,
}

/// Welch's unequal-variance two-sample t-test.
pub fn shift_test(a: &[f64], b: &[f64]) -> Result<ShiftTest> {
    if a.len() < MIN_SHIFT_GROUP || b.len() < MIN_SHIFT_GROUP {
        return Err(Error::domain(format!(
            "shift test needs at least {MIN_SHIFT_GROUP} values per group"
        )));
    }
    let stats = |xs: &[f64]| {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (n, mean, var)
    };
    let (na, ma, va) = stats(a);
    let (nb, mb, vb) = stats(b);
    let (sa, sb) = (va / na, vb / nb);
    let se2 = sa + sb;
    if se2 == 0.0 {
        return Err(Error::domain("both groups have zero variance"));
    }
    let t = (ma - mb) / se2.sqrt();
    let dof = se2 * se2 / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, dof).map_err(|e| Error::Numeric(e.to_string()))?;
    let p_value = (2.0 * dist.sf(t.abs())).min(1.0);
    Ok(ShiftTest {
        mean_a: ma,
        mean_b: mb,
        t,
        dof,
        p_value,
    })
}

/// Summary of one generated set against a reference and a training set.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub rows: Vec<(String, f64)>,
}

impl Report {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.rows.iter().find(|(n, _)| n == name).map(|r| r.1)
    }

    /// `metric,value` CSV.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        for (n, v) in &self.rows {
            out.push_str(&format!("{n},{v}\n"));
        }
        out
    }

    /// Aligned plain-text listing.
    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0);
        self.rows
            .iter()
            .map(|(n, v)| format!("{n:<width$}  {v:.6}\n"))
            .collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv().as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Validity, uniqueness, novelty, diversity and descriptor similarity of
/// `generated` (SELFIES strings). Metrics that need more molecules than
/// are available are omitted.
pub fn evaluate<S: AsRef<str>>(generated: &[S], reference: &[MolGraph], training: &[MolGraph]) -> Result<Report> {
    let mut rows = Vec::new();
    rows.push(("validity".to_string(), validity(generated)?));
    let graphs: Vec<MolGraph> = generated.iter().filter_map(|s| parse_valid(s.as_ref())).collect();
    let keys: Vec<String> = graphs.iter().map(canonical_key).collect();
    if !keys.is_empty() {
        rows.push((format!("unique@{}", keys.len()), unique_at_k(&keys, keys.len())?));
        if keys.len() >= 1000 {
            rows.push(("unique@1000".into(), unique_at_k(&keys, 1000)?));
        }
        if keys.len() >= 10000 {
            rows.push(("unique@10000".into(), unique_at_k(&keys, 10000)?));
        }
        let train_keys: Vec<String> = training.iter().map(canonical_key).collect();
        rows.push(("novelty".into(), novelty(&keys, &train_keys)?));
    }
    if graphs.len() >= 2 {
        rows.push(("intdiv1".into(), internal_diversity(&graphs, 1)?));
        rows.push(("intdiv2".into(), internal_diversity(&graphs, 2)?));
    }
    if graphs.len() >= MIN_DESCRIPTOR_SET && reference.len() >= MIN_DESCRIPTOR_SET {
        let d = descriptor_kl_score(&graphs, reference)?;
        for (name, kl) in &d.kl {
            rows.push((format!("kl_{name}"), *kl));
        }
        rows.push((format!("kl_score_{}_descriptors", d.kl.len()), d.score));
    }
    Ok(Report { rows })
}
