//! Smallest set of smallest rings and a small Hückel-style aromaticity check.

use std::collections::{HashSet, VecDeque};

use super::{Element, MolGraph};

/// Ring perception results for one graph.
#[derive(Debug, Clone)]
pub struct RingInfo {
    /// Atom cycles, each listed in traversal order.
    pub rings: Vec<Vec<usize>>,
    /// Bond indices of each ring.
    pub ring_bonds: Vec<Vec<usize>>,
    pub bond_in_ring: Vec<bool>,
    pub atom_in_ring: Vec<bool>,
    /// Per ring: aromatic by flags or by electron count.
    pub aromatic: Vec<bool>,
    /// Per ring: aromatic by electron count alone (ignores bond flags).
    pub perceived_aromatic: Vec<bool>,
}

type BitSet = Vec<u64>;

fn bit_set(bits: &mut BitSet, i: usize) {
    bits[i / 64] ^= 1 << (i % 64);
}

fn is_zero(bits: &BitSet) -> bool {
    bits.iter().all(|&w| w == 0)
}

fn leading_bit(bits: &BitSet) -> Option<usize> {
    bits.iter()
        .enumerate()
        .rev()
        .find(|(_, &w)| w != 0)
        .map(|(i, &w)| i * 64 + 63 - w.leading_zeros() as usize)
}

struct Candidate {
    atoms: Vec<usize>,
    bonds: Vec<usize>,
    bits: BitSet,
}

fn components(g: &MolGraph) -> usize {
    let n = g.atom_count();
    let mut seen = vec![false; n];
    let mut count = 0;
    for start in 0..n {
        if seen[start] {
            continue;
        }
        count += 1;
        seen[start] = true;
        let mut stack = vec![start];
        while let Some(a) = stack.pop() {
            for &(nb, _) in g.neighbors(a) {
                if !seen[nb] {
                    seen[nb] = true;
                    stack.push(nb);
                }
            }
        }
    }
    count
}

/// Horton candidate cycles: for every root and every non-tree edge (x, y),
/// the cycle root..x - y..root when both shortest paths only share the root.
fn horton_candidates(g: &MolGraph) -> Vec<Candidate> {
    let n = g.atom_count();
    let words = g.bond_count().div_ceil(64).max(1);
    let mut seen_sets: HashSet<BitSet> = HashSet::new();
    let mut out = Vec::new();
    for root in 0..n {
        let mut parent: Vec<Option<(usize, usize)>> = vec![None; n];
        let mut dist = vec![usize::MAX; n];
        dist[root] = 0;
        let mut queue = VecDeque::from([root]);
        while let Some(a) = queue.pop_front() {
            for &(nb, b) in g.neighbors(a) {
                if dist[nb] == usize::MAX {
                    dist[nb] = dist[a] + 1;
                    parent[nb] = Some((a, b));
                    queue.push_back(nb);
                }
            }
        }
        let path = |mut a: usize| {
            let mut atoms = vec![a];
            let mut bonds = Vec::new();
            while let Some((p, b)) = parent[a] {
                atoms.push(p);
                bonds.push(b);
                a = p;
            }
            (atoms, bonds)
        };
        for (bi, bond) in g.bonds().iter().enumerate() {
            let (x, y) = (bond.a, bond.b);
            if dist[x] == usize::MAX || dist[y] == usize::MAX {
                continue;
            }
            let tree_edge = parent[y].map(|(_, b)| b) == Some(bi)
                || parent[x].map(|(_, b)| b) == Some(bi);
            if tree_edge {
                continue;
            }
            let (px, bx) = path(x);
            let (py, by) = path(y);
            let sx: HashSet<usize> = px.iter().copied().collect();
            if py.iter().filter(|a| sx.contains(a)).count() != 1 {
                continue;
            }
            let mut bits = vec![0u64; words];
            for &b in bx.iter().chain(by.iter()) {
                bit_set(&mut bits, b);
            }
            bit_set(&mut bits, bi);
            if !seen_sets.insert(bits.clone()) {
                continue;
            }
            // px: x -> root, py: y -> root. Cycle: root .. x, y .. (before root)
            let mut atoms: Vec<usize> = px.iter().rev().copied().collect();
            atoms.extend(py.iter().take(py.len() - 1));
            let mut bonds: Vec<usize> = bx.iter().rev().copied().collect();
            bonds.push(bi);
            bonds.extend(by.iter().copied());
            out.push(Candidate { atoms, bonds, bits });
        }
    }
    out.sort_by(|a, b| a.bonds.len().cmp(&b.bonds.len()).then(a.bits.cmp(&b.bits)));
    out
}

fn pi_electrons(g: &MolGraph, atom: usize, bond_in_ring: &[bool]) -> Option<u32> {
    let a = g.atoms()[atom];
    let mut ring_multiple = 0;
    let mut exo_hetero = false;
    for &(nb, b) in g.neighbors(atom) {
        let order = g.bonds()[b].order.value();
        if order == 3 {
            return None;
        }
        if order == 2 {
            if bond_in_ring[b] {
                ring_multiple += 1;
            } else if matches!(g.atoms()[nb].element, Element::O | Element::N | Element::S) {
                exo_hetero = true;
            } else {
                return None;
            }
        }
    }
    match ring_multiple {
        0 => {}
        1 => return Some(1),
        _ => return None,
    }
    if exo_hetero {
        return Some(0);
    }
    let saturated_degree = g.degree(atom) + usize::from(g.total_h(atom));
    match (a.element, a.formal_charge) {
        (Element::N | Element::P, 0) if saturated_degree == 3 => Some(2),
        (Element::N, -1) => Some(2),
        (Element::O | Element::S, 0) => Some(2),
        (Element::C, -1) => Some(2),
        (Element::C, 1) | (Element::B, 0) => Some(0),
        _ => None,
    }
}

impl RingInfo {
    pub fn new(g: &MolGraph) -> RingInfo {
        let n_rings = (g.bond_count() + components(g)).saturating_sub(g.atom_count());
        let mut rings = Vec::new();
        let mut ring_bonds = Vec::new();
        if n_rings > 0 {
            // GF(2) elimination keyed on leading bit
            let mut basis: Vec<(usize, BitSet)> = Vec::new();
            for cand in horton_candidates(g) {
                let mut v = cand.bits.clone();
                while let Some((_, row)) = leading_bit(&v).and_then(|lead| basis.iter().find(|(p, _)| *p == lead)) {
                    for (w, r) in v.iter_mut().zip(row) {
                        *w ^= r;
                    }
                }
                if is_zero(&v) {
                    continue;
                }
                basis.push((leading_bit(&v).unwrap(), v));
                rings.push(cand.atoms);
                ring_bonds.push(cand.bonds);
                if rings.len() == n_rings {
                    break;
                }
            }
        }

        let mut bond_in_ring = vec![false; g.bond_count()];
        let mut atom_in_ring = vec![false; g.atom_count()];
        for (atoms, bonds) in rings.iter().zip(&ring_bonds) {
            for &b in bonds {
                bond_in_ring[b] = true;
            }
            for &a in atoms {
                atom_in_ring[a] = true;
            }
        }

        let perceived_aromatic: Vec<bool> = rings
            .iter()
            .map(|atoms| {
                let mut total = 0;
                for &a in atoms {
                    match pi_electrons(g, a, &bond_in_ring) {
                        Some(e) => total += e,
                        None => return false,
                    }
                }
                total % 4 == 2
            })
            .collect();
        let aromatic = ring_bonds
            .iter()
            .zip(&perceived_aromatic)
            .map(|(bonds, &perceived)| perceived || bonds.iter().all(|&b| g.bonds()[b].aromatic))
            .collect();

        RingInfo {
            rings,
            ring_bonds,
            bond_in_ring,
            atom_in_ring,
            aromatic,
            perceived_aromatic,
        }
    }

    pub fn ring_count(&self) -> usize {
        self.rings.len()
    }

    /// Bonds belonging to at least one ring that passes the electron-count
    /// check. Bond flags are ignored so the result depends only on the
    /// bond-order graph.
    pub fn perceived_aromatic_bonds(&self, n_bonds: usize) -> Vec<bool> {
        let mut out = vec![false; n_bonds];
        for (bonds, &arom) in self.ring_bonds.iter().zip(&self.perceived_aromatic) {
            if arom {
                for &b in bonds {
                    out[b] = true;
                }
            }
        }
        out
    }
}
