//! Graph-invariant molecule identity via Weisfeiler-Lehman refinement.

use sha2::{Digest, Sha256};

use super::fingerprint::{bond_labels, hash_seq};
use super::MolGraph;

fn refined_labels(g: &MolGraph, bonds: &[u64]) -> Vec<u64> {
    let n = g.atom_count();
    let mut labels: Vec<u64> = (0..n)
        .map(|i| {
            let a = g.atoms()[i];
            hash_seq(
                0x57_4c,
                [
                    u64::from(a.element.atomic_number()),
                    (i64::from(a.formal_charge) + 8) as u64,
                    u64::from(g.total_h(i)),
                    g.degree(i) as u64,
                ],
            )
        })
        .collect();
    let distinct = |l: &[u64]| {
        let mut v = l.to_vec();
        v.sort_unstable();
        v.dedup();
        v.len()
    };
    let mut classes = distinct(&labels);
    for round in 0..n {
        let next: Vec<u64> = (0..n)
            .map(|i| {
                let mut env: Vec<(u64, u64)> = g
                    .neighbors(i)
                    .iter()
                    .map(|&(nb, b)| (bonds[b], labels[nb]))
                    .collect();
                env.sort_unstable();
                hash_seq(
                    round as u64 + 1,
                    std::iter::once(labels[i]).chain(env.into_iter().flat_map(|(b, x)| [b, x])),
                )
            })
            .collect();
        let next_classes = distinct(&next);
        labels = next;
        if next_classes == classes {
            break;
        }
        classes = next_classes;
    }
    labels
}

/// Hex identity string; isomorphic graphs (up to Kekulé form of aromatic
/// rings) share a key. Distinct graphs may collide in rare WL-equivalent
/// cases.
pub fn canonical_key(g: &MolGraph) -> String {
    let bonds = bond_labels(g);
    let labels = refined_labels(g, &bonds);
    let mut atoms = labels.clone();
    atoms.sort_unstable();
    let mut edges: Vec<(u64, u64, u64)> = g
        .bonds()
        .iter()
        .zip(&bonds)
        .map(|(b, &label)| {
            let (x, y) = (labels[b.a], labels[b.b]);
            (x.min(y), x.max(y), label)
        })
        .collect();
    edges.sort_unstable();

    let mut hasher = Sha256::new();
    hasher.update((g.atom_count() as u64).to_le_bytes());
    hasher.update((g.bond_count() as u64).to_le_bytes());
    for a in atoms {
        hasher.update(a.to_le_bytes());
    }
    for (x, y, l) in edges {
        hasher.update(x.to_le_bytes());
        hasher.update(y.to_le_bytes());
        hasher.update(l.to_le_bytes());
    }
    hex::encode(&hasher.finalize()[..16])
}

/// Rank of each atom under the order (heavy degree, refined label, index).
/// Rank 0 is a terminal atom whenever the graph has one.
pub fn canonical_ranks(g: &MolGraph) -> Vec<usize> {
    let bonds = bond_labels(g);
    let labels = refined_labels(g, &bonds);
    let mut order: Vec<usize> = (0..g.atom_count()).collect();
    order.sort_by_key(|&i| (g.heavy_degree(i), labels[i], i));
    let mut ranks = vec![0; order.len()];
    for (r, &i) in order.iter().enumerate() {
        ranks[i] = r;
    }
    ranks
}
