//! Depth-first graph traversal emitting SELFIES symbols.

use super::symbols::{atom_surface, bond_prefix, index_symbols};
use crate::error::{Error, Result};
use crate::molgraph::{canonical_ranks, MolGraph};

struct Encoder<'g> {
    g: &'g MolGraph,
    ranks: Vec<usize>,
    created: Vec<Option<usize>>,
    emitted: Vec<bool>,
    counter: usize,
}

fn index_tokens(q: usize) -> Result<Vec<&'static str>> {
    index_symbols(q).ok_or_else(|| Error::domain(format!("index {q} exceeds three digits")))
}

impl Encoder<'_> {
    fn sorted_neighbors(&self, atom: usize) -> Vec<(usize, usize)> {
        let mut nbrs = self.g.neighbors(atom).to_vec();
        nbrs.sort_by_key(|&(nb, _)| self.ranks[nb]);
        nbrs
    }

    fn fragment(&mut self, atom: usize, incoming: Option<usize>) -> Result<Vec<String>> {
        let order = incoming.map_or(1, |b| self.g.bonds()[b].order.value());
        let mut out = vec![atom_surface(&self.g.atoms()[atom], order)];
        let here = self.counter;
        self.created[atom] = Some(here);
        self.counter += 1;
        if let Some(b) = incoming {
            self.emitted[b] = true;
        }
        let nbrs = self.sorted_neighbors(atom);
        for &(nb, b) in &nbrs {
            if let (false, Some(then)) = (self.emitted[b], self.created[nb]) {
                self.emitted[b] = true;
                let digits = index_tokens(here - then - 1)?;
                let ring_order = self.g.bonds()[b].order.value();
                out.push(format!("[{}Ring{}]", bond_prefix(ring_order), digits.len()));
                out.extend(digits.into_iter().map(str::to_string));
            }
        }
        loop {
            let remaining: Vec<(usize, usize)> = nbrs
                .iter()
                .copied()
                .filter(|&(nb, b)| !self.emitted[b] && self.created[nb].is_none())
                .collect();
            let Some(&(nb, b)) = remaining.first() else {
                break;
            };
            let body = self.fragment(nb, Some(b))?;
            if remaining.len() == 1 {
                out.extend(body);
                break;
            }
            let digits = index_tokens(body.len() - 1)?;
            let order = self.g.bonds()[b].order.value();
            out.push(format!("[{}Branch{}]", bond_prefix(order), digits.len()));
            out.extend(digits.into_iter().map(str::to_string));
            out.extend(body);
        }
        Ok(out)
    }
}

/// Symbols for a connected, valence-valid graph. The traversal starts at the
/// atom of lowest canonical rank and visits neighbours in rank order, so
/// isomorphic inputs usually produce the same string.
pub fn encode_symbols(g: &MolGraph) -> Result<Vec<String>> {
    if g.is_empty() {
        return Err(Error::domain("cannot encode an empty graph"));
    }
    if !g.is_connected() {
        return Err(Error::domain("cannot encode a disconnected graph"));
    }
    g.check_valence()?;
    let ranks = canonical_ranks(g);
    let root = (0..g.atom_count())
        .min_by_key(|&i| ranks[i])
        .expect("non-empty graph");
    let mut enc = Encoder {
        g,
        ranks,
        created: vec![None; g.atom_count()],
        emitted: vec![false; g.bond_count()],
        counter: 0,
    };
    enc.fragment(root, None)
}

pub fn encode(g: &MolGraph) -> Result<String> {
    Ok(encode_symbols(g)?.concat())
}

#[cfg(test)]
mod tests {
    use super::super::decode_str;
    use super::*;
    use crate::molgraph::canonical_key;
    use crate::smiles::parse_smiles;

    fn roundtrip(smiles: &str) -> String {
        let g = parse_smiles(smiles).unwrap();
        let s = encode(&g).unwrap();
        let back = decode_str(&s).unwrap();
        assert_eq!(canonical_key(&back), canonical_key(&g), "{smiles} -> {s}");
        s
    }

    #[test]
    fn small_molecules() {
        assert_eq!(roundtrip("CO"), "[C][O]");
        assert_eq!(roundtrip("C=C"), "[C][=C]");
        roundtrip("CC(=O)O");
        roundtrip("CC(C)(C)C");
        roundtrip("C#N");
        roundtrip("[NH4+]");
        roundtrip("C[O-]");
    }

    #[test]
    fn benzene_has_one_ring_symbol() {
        let s = roundtrip("c1ccccc1");
        assert_eq!(s.matches("Ring").count(), 1);
    }

    #[test]
    fn ring_systems() {
        for smi in [
            "c1ccc2ccccc2c1",
            "C1CC2CCC1CC2",
            "Cn1cnc2c1c(=O)n(C)c(=O)n2C",
            "O=C1CCCN1",
            "c1ccc(cc1)-c1ccncc1",
            "C1CCC2(CC1)CCCC2",
            "FC(F)(F)c1ccc(Cl)cc1Br",
            "OC1C2CC3CC1CC(C2)C3",
            "N#Cc1ccc(cc1)S(=O)(=O)N",
            "CC1=CC(=O)C=CC1=O",
        ] {
            roundtrip(smi);
        }
    }

    #[test]
    fn rejects() {
        assert!(encode(&MolGraph::new()).is_err());
        assert!(encode(&parse_smiles("C").unwrap()).is_ok());
        let mut g = parse_smiles("CC").unwrap();
        g.add_atom(crate::molgraph::Atom::neutral(crate::molgraph::Element::O));
        assert!(encode(&g).is_err());
    }
}
