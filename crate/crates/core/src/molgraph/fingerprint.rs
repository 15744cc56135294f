//! Morgan-style circular fingerprints and Tanimoto similarity.

use super::MolGraph;
use crate::error::{Error, Result};

/// Fixed-length bit vector.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Fingerprint {
    words: Vec<u64>,
    n_bits: usize,
}

impl Fingerprint {
    pub fn new(n_bits: usize) -> Fingerprint {
        Fingerprint {
            words: vec![0; n_bits.div_ceil(64)],
            n_bits,
        }
    }

    pub fn from_bits(n_bits: usize, bits: impl IntoIterator<Item = usize>) -> Fingerprint {
        let mut fp = Fingerprint::new(n_bits);
        for b in bits {
            fp.set(b);
        }
        fp
    }

    pub fn set(&mut self, bit: usize) {
        let bit = bit % self.n_bits;
        self.words[bit / 64] |= 1 << (bit % 64);
    }

    pub fn get(&self, bit: usize) -> bool {
        (self.words[bit / 64] >> (bit % 64)) & 1 == 1
    }

    pub fn count_ones(&self) -> u32 {
        self.words.iter().map(|w| w.count_ones()).sum()
    }

    pub fn len(&self) -> usize {
        self.n_bits
    }

    pub fn is_empty(&self) -> bool {
        self.n_bits == 0
    }
}

/// SplitMix64 finalizer; the mixing step of every structural hash here.
pub(crate) fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub(crate) fn hash_seq(seed: u64, items: impl IntoIterator<Item = u64>) -> u64 {
    items
        .into_iter()
        .fold(mix64(seed), |h, x| mix64(h ^ x.wrapping_mul(0x2545_F491_4F6C_DD1D)))
}

/// Bond label used by structural hashes: 1-3 for kekulé orders, 4 when the
/// bond sits in a perceived aromatic ring.
pub(crate) fn bond_labels(g: &MolGraph) -> Vec<u64> {
    let aromatic = g.ring_info().perceived_aromatic_bonds(g.bond_count());
    g.bonds()
        .iter()
        .zip(aromatic)
        .map(|(b, arom)| if arom { 4 } else { u64::from(b.order.value()) })
        .collect()
}

/// Morgan fingerprint: atom environment hashes at radii `0..=radius` folded
/// into `n_bits` bits.
///
/// # Panics
///
/// If `n_bits` is not a power of two of at least 256.
pub fn circular_fingerprint(g: &MolGraph, radius: usize, n_bits: usize) -> Fingerprint {
    assert!(
        n_bits >= 256 && n_bits.is_power_of_two(),
        "fingerprint width must be a power of two >= 256, got {n_bits}"
    );
    let mut fp = Fingerprint::new(n_bits);
    let n = g.atom_count();
    if n == 0 {
        return fp;
    }
    let info = g.ring_info();
    let labels = bond_labels(g);
    let mut ids: Vec<u64> = (0..n)
        .map(|i| {
            let a = g.atoms()[i];
            hash_seq(
                0x4d6f_7267,
                [
                    u64::from(a.element.atomic_number()),
                    g.heavy_degree(i) as u64,
                    u64::from(g.total_h(i)),
                    (i64::from(a.formal_charge) + 8) as u64,
                    u64::from(info.atom_in_ring[i]),
                ],
            )
        })
        .collect();
    for &id in &ids {
        fp.set((id % n_bits as u64) as usize);
    }
    for r in 1..=radius {
        let next: Vec<u64> = (0..n)
            .map(|i| {
                let mut env: Vec<(u64, u64)> = g
                    .neighbors(i)
                    .iter()
                    .map(|&(nb, b)| (labels[b], ids[nb]))
                    .collect();
                env.sort_unstable();
                hash_seq(
                    r as u64,
                    std::iter::once(ids[i]).chain(env.into_iter().flat_map(|(b, x)| [b, x])),
                )
            })
            .collect();
        ids = next;
        for &id in &ids {
            fp.set((id % n_bits as u64) as usize);
        }
    }
    fp
}

/// |a ∧ b| / |a ∨ b|, defined as 1 when both are empty.
pub fn tanimoto(a: &Fingerprint, b: &Fingerprint) -> Result<f64> {
    if a.n_bits != b.n_bits {
        return Err(Error::shape(format!(
            "fingerprint widths differ: {} vs {}",
            a.n_bits, b.n_bits
        )));
    }
    let (mut both, mut either) = (0u32, 0u32);
    for (x, y) in a.words.iter().zip(&b.words) {
        both += (x & y).count_ones();
        either += (x | y).count_ones();
    }
    if either == 0 {
        return Ok(1.0);
    }
    Ok(f64::from(both) / f64::from(either))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::molgraph::{Atom, BondOrder, Element};
    use proptest::prelude::*;

    fn single(e: Element) -> MolGraph {
        let mut g = MolGraph::new();
        g.add_atom(Atom::neutral(e));
        g
    }

    #[test]
    fn deterministic() {
        let mut g = single(Element::C);
        g.add_atom(Atom::neutral(Element::O));
        g.add_bond(0, 1, BondOrder::Single).unwrap();
        assert_eq!(
            circular_fingerprint(&g, 2, 2048),
            circular_fingerprint(&g, 2, 2048)
        );
    }

    #[test]
    fn element_changes_bits() {
        let c = circular_fingerprint(&single(Element::C), 0, 1024);
        let n = circular_fingerprint(&single(Element::N), 0, 1024);
        assert_ne!(c, n);
    }

    #[test]
    fn tanimoto_cases() {
        let a = Fingerprint::from_bits(256, [1, 2, 3, 4, 5]);
        assert_eq!(tanimoto(&a, &a).unwrap(), 1.0);
        let b = Fingerprint::from_bits(256, [10, 11]);
        assert_eq!(tanimoto(&a, &b).unwrap(), 0.0);
        let x = Fingerprint::from_bits(256, [0, 1, 2, 3, 4]);
        let y = Fingerprint::from_bits(256, [3, 4, 5, 6, 7]);
        assert_eq!(tanimoto(&x, &y).unwrap(), 0.25);
        let empty = Fingerprint::new(256);
        assert_eq!(tanimoto(&empty, &empty).unwrap(), 1.0);
        assert!(tanimoto(&a, &Fingerprint::new(512)).is_err());
    }

    proptest! {
        #[test]
        fn tanimoto_symmetric_bounded(
            xs in proptest::collection::vec(0usize..512, 0..40),
            ys in proptest::collection::vec(0usize..512, 0..40),
        ) {
            let a = Fingerprint::from_bits(512, xs);
            let b = Fingerprint::from_bits(512, ys);
            let ab = tanimoto(&a, &b).unwrap();
            let ba = tanimoto(&b, &a).unwrap();
            prop_assert_eq!(ab, ba);
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(tanimoto(&a, &a).unwrap(), 1.0);
        }
    }
}
