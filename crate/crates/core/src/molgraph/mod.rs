//! Attributed molecular graphs with valence accounting.
//!
//! Hydrogens are normally implicit: an atom's implicit hydrogen count is the
//! gap between its bonded valence (bond orders plus explicit hydrogens) and the
//! smallest allowed valence for its element and formal charge that can hold
//! it. A graph is valid when every atom fits under some allowed valence.

mod canon;
mod descriptors;
mod fingerprint;
mod rings;

use std::fmt;

use crate::error::{Error, Result};

pub use canon::{canonical_key, canonical_ranks};
pub use descriptors::{
    count_h_acceptors, count_h_donors, count_rotatable_bonds, molecular_weight, ring_counts,
    RingCounts,
};
pub use fingerprint::{circular_fingerprint, tanimoto, Fingerprint};
pub use rings::RingInfo;

/// Elements the graph model supports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Element {
    H,
    B,
    C,
    N,
    O,
    F,
    P,
    S,
    Cl,
    Br,
    I,
}

impl Element {
    pub const ALL: [Element; 11] = [
        Element::H,
        Element::B,
        Element::C,
        Element::N,
        Element::O,
        Element::F,
        Element::P,
        Element::S,
        Element::Cl,
        Element::Br,
        Element::I,
    ];

    pub fn from_symbol(s: &str) -> Option<Element> {
        Some(match s {
            "H" => Element::H,
            "B" => Element::B,
            "C" => Element::C,
            "N" => Element::N,
            "O" => Element::O,
            "F" => Element::F,
            "P" => Element::P,
            "S" => Element::S,
            "Cl" => Element::Cl,
            "Br" => Element::Br,
            "I" => Element::I,
            _ => return None,
        })
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Element::H => "H",
            Element::B => "B",
            Element::C => "C",
            Element::N => "N",
            Element::O => "O",
            Element::F => "F",
            Element::P => "P",
            Element::S => "S",
            Element::Cl => "Cl",
            Element::Br => "Br",
            Element::I => "I",
        }
    }

    pub fn atomic_number(self) -> u8 {
        match self {
            Element::H => 1,
            Element::B => 5,
            Element::C => 6,
            Element::N => 7,
            Element::O => 8,
            Element::F => 9,
            Element::P => 15,
            Element::S => 16,
            Element::Cl => 17,
            Element::Br => 35,
            Element::I => 53,
        }
    }

    /// Standard atomic weight in daltons.
    pub fn mass(self) -> f64 {
        match self {
            Element::H => 1.008,
            Element::B => 10.812,
            Element::C => 12.011,
            Element::N => 14.007,
            Element::O => 15.999,
            Element::F => 18.998,
            Element::P => 30.974,
            Element::S => 32.065,
            Element::Cl => 35.453,
            Element::Br => 79.904,
            Element::I => 126.904,
        }
    }

    fn valence_electrons(self) -> i32 {
        match self {
            Element::H => 1,
            Element::B => 3,
            Element::C => 4,
            Element::N | Element::P => 5,
            Element::O | Element::S => 6,
            Element::F | Element::Cl | Element::Br | Element::I => 7,
        }
    }

    fn hypervalent(self) -> bool {
        matches!(self, Element::P | Element::S)
    }

    /// Allowed total valences for this element at `charge`, ascending.
    ///
    /// Neutral values: C 4, N 3, O 2, S {2,4,6}, P {3,5}, halogens 1, B 3,
    /// H 1. Charges shift the count through the isoelectronic rule
    /// (N+ behaves like C, O- like F, and so on). Returns an empty list for
    /// impossible charge states.
    pub fn allowed_valences(self, charge: i8) -> Vec<u8> {
        let e = self.valence_electrons() - i32::from(charge);
        if self == Element::H {
            return match e {
                1 => vec![1],
                0 | 2 => vec![0],
                _ => Vec::new(),
            };
        }
        if !(0..=8).contains(&e) {
            return Vec::new();
        }
        if e <= 4 {
            return vec![e as u8];
        }
        let base = 8 - e;
        if self.hypervalent() {
            (base..=e.min(6)).step_by(2).map(|v| v as u8).collect()
        } else {
            vec![base as u8]
        }
    }

    pub fn max_valence(self, charge: i8) -> Option<u8> {
        self.allowed_valences(charge).last().copied()
    }
}

impl fmt::Display for Element {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Atom {
    pub element: Element,
    pub formal_charge: i8,
    pub explicit_h: u8,
}

impl Atom {
    pub fn new(element: Element, formal_charge: i8, explicit_h: u8) -> Result<Atom> {
        if !(-2..=2).contains(&formal_charge) {
            return Err(Error::domain(format!(
                "formal charge {formal_charge} outside [-2, 2]"
            )));
        }
        let max = element.max_valence(formal_charge).ok_or_else(|| {
            Error::domain(format!("{element} cannot carry charge {formal_charge}"))
        })?;
        if explicit_h > max {
            return Err(Error::domain(format!(
                "{element} with charge {formal_charge} cannot hold {explicit_h} hydrogens"
            )));
        }
        Ok(Atom {
            element,
            formal_charge,
            explicit_h,
        })
    }

    pub fn neutral(element: Element) -> Atom {
        Atom {
            element,
            formal_charge: 0,
            explicit_h: 0,
        }
    }

    /// Bond-order capacity left once explicit hydrogens are placed.
    pub fn bonding_capacity(&self) -> u8 {
        self.element
            .max_valence(self.formal_charge)
            .unwrap_or(0)
            .saturating_sub(self.explicit_h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BondOrder {
    Single = 1,
    Double = 2,
    Triple = 3,
}

impl BondOrder {
    pub fn from_u8(order: u8) -> Option<BondOrder> {
        match order {
            1 => Some(BondOrder::Single),
            2 => Some(BondOrder::Double),
            3 => Some(BondOrder::Triple),
            _ => None,
        }
    }

    pub fn value(self) -> u8 {
        self as u8
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Bond {
    pub a: usize,
    pub b: usize,
    pub order: BondOrder,
    pub aromatic: bool,
}

impl Bond {
    pub fn other(&self, atom: usize) -> usize {
        if self.a == atom {
            self.b
        } else {
            self.a
        }
    }
}

/// A molecular graph. Bonds are kept in insertion order and an adjacency list
/// of `(neighbor, bond index)` pairs is maintained alongside.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MolGraph {
    atoms: Vec<Atom>,
    bonds: Vec<Bond>,
    adjacency: Vec<Vec<(usize, usize)>>,
}

impl MolGraph {
    pub fn new() -> MolGraph {
        MolGraph::default()
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn bonds(&self) -> &[Bond] {
        &self.bonds
    }

    pub fn atom_count(&self) -> usize {
        self.atoms.len()
    }

    pub fn bond_count(&self) -> usize {
        self.bonds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn add_atom(&mut self, atom: Atom) -> usize {
        self.atoms.push(atom);
        self.adjacency.push(Vec::new());
        self.atoms.len() - 1
    }

    pub fn add_bond(&mut self, a: usize, b: usize, order: BondOrder) -> Result<usize> {
        self.add_bond_flagged(a, b, order, false)
    }

    pub fn add_bond_flagged(
        &mut self,
        a: usize,
        b: usize,
        order: BondOrder,
        aromatic: bool,
    ) -> Result<usize> {
        if a == b {
            return Err(Error::domain(format!("self bond on atom {a}")));
        }
        let n = self.atoms.len();
        if a >= n || b >= n {
            return Err(Error::domain(format!(
                "bond ({a}, {b}) out of bounds for {n} atoms"
            )));
        }
        if self.bond_between(a, b).is_some() {
            return Err(Error::domain(format!("duplicate bond between {a} and {b}")));
        }
        let idx = self.bonds.len();
        self.bonds.push(Bond {
            a,
            b,
            order,
            aromatic,
        });
        self.adjacency[a].push((b, idx));
        self.adjacency[b].push((a, idx));
        Ok(idx)
    }

    pub(crate) fn set_bond_order(&mut self, bond: usize, order: BondOrder) {
        self.bonds[bond].order = order;
    }

    pub(crate) fn set_bond_aromatic(&mut self, bond: usize, aromatic: bool) {
        self.bonds[bond].aromatic = aromatic;
    }

    /// `(neighbor, bond index)` pairs of `atom`.
    pub fn neighbors(&self, atom: usize) -> &[(usize, usize)] {
        &self.adjacency[atom]
    }

    pub fn bond_between(&self, a: usize, b: usize) -> Option<usize> {
        self.adjacency
            .get(a)?
            .iter()
            .find(|&&(n, _)| n == b)
            .map(|&(_, idx)| idx)
    }

    pub fn degree(&self, atom: usize) -> usize {
        self.adjacency[atom].len()
    }

    pub fn heavy_degree(&self, atom: usize) -> usize {
        self.adjacency[atom]
            .iter()
            .filter(|&&(n, _)| self.atoms[n].element != Element::H)
            .count()
    }

    /// Sum of bond orders at `atom`.
    pub fn bond_order_sum(&self, atom: usize) -> u32 {
        self.adjacency[atom]
            .iter()
            .map(|&(_, b)| u32::from(self.bonds[b].order.value()))
            .sum()
    }

    /// Implicit hydrogens on `atom`, or `None` when the atom is over-valent.
    pub fn implicit_h(&self, atom: usize) -> Option<u8> {
        let a = &self.atoms[atom];
        let used = self.bond_order_sum(atom) + u32::from(a.explicit_h);
        a.element
            .allowed_valences(a.formal_charge)
            .into_iter()
            .find(|&v| u32::from(v) >= used)
            .map(|v| (u32::from(v) - used) as u8)
    }

    /// Explicit plus implicit hydrogens (not counting hydrogen atoms present
    /// as graph nodes).
    pub fn total_h(&self, atom: usize) -> u8 {
        self.atoms[atom].explicit_h + self.implicit_h(atom).unwrap_or(0)
    }

    pub fn is_connected(&self) -> bool {
        if self.atoms.is_empty() {
            return true;
        }
        let mut seen = vec![false; self.atoms.len()];
        let mut stack = vec![0usize];
        seen[0] = true;
        let mut count = 1;
        while let Some(a) = stack.pop() {
            for &(n, _) in &self.adjacency[a] {
                if !seen[n] {
                    seen[n] = true;
                    count += 1;
                    stack.push(n);
                }
            }
        }
        count == self.atoms.len()
    }

    /// Checks the valence invariant on every atom.
    pub fn check_valence(&self) -> Result<()> {
        for i in 0..self.atoms.len() {
            if self.implicit_h(i).is_none() {
                let a = &self.atoms[i];
                return Err(Error::domain(format!(
                    "atom {i} ({}{:+}) exceeds its allowed valence with bond order sum {} and {} explicit H",
                    a.element,
                    a.formal_charge,
                    self.bond_order_sum(i),
                    a.explicit_h
                )));
            }
        }
        Ok(())
    }

    /// Valence invariant plus single-fragment connectivity.
    pub fn validate(&self) -> Result<()> {
        self.check_valence()?;
        if !self.is_connected() {
            return Err(Error::domain("graph has more than one fragment"));
        }
        Ok(())
    }

    pub fn is_valid(&self) -> bool {
        self.validate().is_ok()
    }

    /// Copy of the graph with atoms reordered so that old atom `i` becomes
    /// new atom `perm[i]`. Bonds keep their relative order.
    pub fn permuted(&self, perm: &[usize]) -> Result<MolGraph> {
        let n = self.atoms.len();
        if perm.len() != n {
            return Err(Error::domain("permutation length differs from atom count"));
        }
        let mut inverse = vec![usize::MAX; n];
        for (old, &new) in perm.iter().enumerate() {
            if new >= n || inverse[new] != usize::MAX {
                return Err(Error::domain("not a permutation"));
            }
            inverse[new] = old;
        }
        let mut g = MolGraph::new();
        for &old in &inverse {
            g.add_atom(self.atoms[old]);
        }
        for b in &self.bonds {
            g.add_bond_flagged(perm[b.a], perm[b.b], b.order, b.aromatic)?;
        }
        Ok(g)
    }

    pub fn ring_info(&self) -> RingInfo {
        RingInfo::new(self)
    }

    /// Molecular formula in Hill order, for diagnostics.
    pub fn formula(&self) -> String {
        let mut counts = std::collections::BTreeMap::<&str, usize>::new();
        let mut hydrogens = 0usize;
        for (i, a) in self.atoms.iter().enumerate() {
            if a.element == Element::H {
                hydrogens += 1;
            } else {
                *counts.entry(a.element.symbol()).or_default() += 1;
            }
            hydrogens += usize::from(self.total_h(i));
        }
        let mut out = String::new();
        let mut push = |sym: &str, n: usize| {
            if n > 0 {
                out.push_str(sym);
                if n > 1 {
                    out.push_str(&n.to_string());
                }
            }
        };
        push("C", counts.remove("C").unwrap_or(0));
        push("H", hydrogens);
        for (sym, n) in counts {
            push(sym, n);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn chain(elements: &[Element]) -> MolGraph {
        let mut g = MolGraph::new();
        for (i, &e) in elements.iter().enumerate() {
            g.add_atom(Atom::neutral(e));
            if i > 0 {
                g.add_bond(i - 1, i, BondOrder::Single).unwrap();
            }
        }
        g
    }

    #[test]
    fn valence_table() {
        assert_eq!(Element::C.allowed_valences(0), vec![4]);
        assert_eq!(Element::N.allowed_valences(0), vec![3]);
        assert_eq!(Element::O.allowed_valences(0), vec![2]);
        assert_eq!(Element::S.allowed_valences(0), vec![2, 4, 6]);
        assert_eq!(Element::P.allowed_valences(0), vec![3, 5]);
        assert_eq!(Element::Cl.allowed_valences(0), vec![1]);
        assert_eq!(Element::B.allowed_valences(0), vec![3]);
        assert_eq!(Element::H.allowed_valences(0), vec![1]);
        assert_eq!(Element::N.allowed_valences(1), vec![4]);
        assert_eq!(Element::O.allowed_valences(-1), vec![1]);
        assert_eq!(Element::Cl.allowed_valences(-1), vec![0]);
        assert!(Element::H.allowed_valences(2).is_empty());
    }

    #[test]
    fn atom_construction_rejects_bad_charge() {
        assert!(Atom::new(Element::C, 3, 0).is_err());
        assert!(Atom::new(Element::H, 2, 0).is_err());
        assert!(Atom::new(Element::C, 0, 5).is_err());
        assert!(Atom::new(Element::N, 1, 4).is_ok());
    }

    #[test]
    fn implicit_hydrogens() {
        let g = chain(&[Element::C, Element::C, Element::O]);
        assert_eq!(g.implicit_h(0), Some(3));
        assert_eq!(g.implicit_h(1), Some(2));
        assert_eq!(g.implicit_h(2), Some(1));
        assert_eq!(g.formula(), "C2H6O");
    }

    #[test]
    fn sulfur_picks_smallest_fitting_valence() {
        let mut g = chain(&[Element::C, Element::S, Element::C]);
        assert_eq!(g.implicit_h(1), Some(0));
        let o = g.add_atom(Atom::neutral(Element::O));
        g.add_bond(1, o, BondOrder::Double).unwrap();
        assert_eq!(g.implicit_h(1), Some(0));
        let c = g.add_atom(Atom::neutral(Element::C));
        g.add_bond(1, c, BondOrder::Single).unwrap();
        // 5 used -> valence 6, one hydrogen
        assert_eq!(g.implicit_h(1), Some(1));
    }

    #[test]
    fn bond_invariants() {
        let mut g = chain(&[Element::C, Element::C]);
        assert!(g.add_bond(0, 0, BondOrder::Single).is_err());
        assert!(g.add_bond(0, 1, BondOrder::Single).is_err());
        assert!(g.add_bond(0, 5, BondOrder::Single).is_err());
    }

    #[test]
    fn over_valent_detected() {
        let mut g = MolGraph::new();
        g.add_atom(Atom::neutral(Element::O));
        g.add_atom(Atom::neutral(Element::C));
        g.add_bond(0, 1, BondOrder::Triple).unwrap();
        assert!(g.check_valence().is_err());
    }

    #[test]
    fn connectivity() {
        let mut g = chain(&[Element::C, Element::C]);
        g.add_atom(Atom::neutral(Element::O));
        assert!(!g.is_connected());
        assert!(g.validate().is_err());
    }
}
