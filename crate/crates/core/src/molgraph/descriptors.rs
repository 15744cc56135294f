//! Physicochemical descriptors used by the distribution-learning metrics.

use super::{BondOrder, Element, MolGraph};
use crate::error::{Error, Result};

/// Average molecular weight including all hydrogens.
pub fn molecular_weight(g: &MolGraph) -> Result<f64> {
    if g.is_empty() {
        return Err(Error::domain("molecular weight of an empty graph"));
    }
    let h = Element::H.mass();
    Ok((0..g.atom_count())
        .map(|i| g.atoms()[i].element.mass() + f64::from(g.total_h(i)) * h)
        .sum())
}

fn is_n_or_o(e: Element) -> bool {
    matches!(e, Element::N | Element::O)
}

/// N and O atoms carrying at least one hydrogen.
pub fn count_h_donors(g: &MolGraph) -> usize {
    (0..g.atom_count())
        .filter(|&i| {
            is_n_or_o(g.atoms()[i].element)
                && (g.total_h(i) > 0
                    || g
                        .neighbors(i)
                        .iter()
                        .any(|&(n, _)| g.atoms()[n].element == Element::H))
        })
        .count()
}

/// All N and O atoms.
pub fn count_h_acceptors(g: &MolGraph) -> usize {
    g.atoms().iter().filter(|a| is_n_or_o(a.element)).count()
}

/// Single, acyclic bonds between two non-terminal heavy atoms.
pub fn count_rotatable_bonds(g: &MolGraph) -> usize {
    let info = g.ring_info();
    g.bonds()
        .iter()
        .enumerate()
        .filter(|(bi, b)| {
            b.order == BondOrder::Single
                && !b.aromatic
                && !info.bond_in_ring[*bi]
                && g.atoms()[b.a].element != Element::H
                && g.atoms()[b.b].element != Element::H
                && g.heavy_degree(b.a) > 1
                && g.heavy_degree(b.b) > 1
        })
        .count()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RingCounts {
    pub aromatic: usize,
    pub aliphatic: usize,
}

impl RingCounts {
    pub fn total(&self) -> usize {
        self.aromatic + self.aliphatic
    }
}

pub fn ring_counts(g: &MolGraph) -> RingCounts {
    let info = g.ring_info();
    let aromatic = info.aromatic.iter().filter(|&&a| a).count();
    RingCounts {
        aromatic,
        aliphatic: info.ring_count() - aromatic,
    }
}
