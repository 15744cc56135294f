//! Valence-constrained derivation from symbols to a molecular graph.

use super::symbols::{classify, read_index, Symbol};
use super::vocab::{Vocabulary, EOS, PAD, SOS, UNK};
use crate::error::{Error, Result};
use crate::molgraph::{BondOrder, MolGraph};

struct Derivation<'a> {
    surfaces: &'a [&'a str],
    symbols: Vec<Symbol>,
    graph: MolGraph,
    rings: Vec<(usize, usize, u8)>,
}

impl Derivation<'_> {
    fn capacity(&self, atom: usize) -> u8 {
        self.graph.atoms()[atom].bonding_capacity()
    }

    fn free_valence(&self, atom: usize) -> u8 {
        let used = self.graph.bond_order_sum(atom);
        u32::from(self.capacity(atom)).saturating_sub(used) as u8
    }

    /// Reads `digits` index symbols at `pos`; missing ones count as 0.
    fn index_at(&self, pos: usize, digits: usize) -> (usize, usize) {
        let take = digits.min(self.surfaces.len() - pos);
        (read_index(&self.surfaces[pos..pos + take], digits), pos + take)
    }

    /// Derives at most `budget` symbols from `pos` and returns the position
    /// after them. `prev` is the attachment atom and `state` its remaining
    /// valence (`None` before the first atom of the molecule). Index symbols
    /// count against the budget and may run past it, as nested branch
    /// lengths are not checked against their parent's.
    fn derive(&mut self, mut pos: usize, budget: usize, mut prev: Option<usize>, mut state: u8) -> usize {
        let stop = pos.saturating_add(budget);
        let len = self.surfaces.len();
        while pos < stop.min(len) {
            let sym = self.symbols[pos];
            pos += 1;
            match sym {
                Symbol::Nop => {}
                Symbol::Atom { bond, atom } => {
                    let cap = atom.bonding_capacity();
                    match prev {
                        None => {
                            prev = Some(self.graph.add_atom(atom));
                            state = cap;
                        }
                        Some(p) => {
                            let order = bond.min(state).min(cap);
                            if order == 0 {
                                continue;
                            }
                            let idx = self.graph.add_atom(atom);
                            let order = BondOrder::from_u8(order).expect("order in 1..=3");
                            self.graph
                                .add_bond(p, idx, order)
                                .expect("fresh atom cannot duplicate a bond");
                            prev = Some(idx);
                            state = cap - order.value();
                        }
                    }
                }
                Symbol::Branch { bond, digits } => {
                    if prev.is_none() || state <= 1 {
                        continue;
                    }
                    let (q, next) = self.index_at(pos, digits);
                    let init = (state - 1).min(bond);
                    pos = self.derive(next, q + 1, prev, init);
                    state -= init;
                }
                Symbol::Ring { bond, digits } => {
                    let Some(cur) = prev else { continue };
                    if state == 0 {
                        continue;
                    }
                    let (q, next) = self.index_at(pos, digits);
                    pos = next;
                    let order = state.min(bond);
                    let target = cur.saturating_sub(q + 1);
                    self.rings.push((target, cur, order));
                    state -= order;
                }
            }
        }
        pos.max(stop.min(len))
    }

    fn close_rings(&mut self) {
        for (a, b, order) in std::mem::take(&mut self.rings) {
            if a == b {
                continue;
            }
            let order = order.min(self.free_valence(a)).min(self.free_valence(b));
            if order == 0 {
                continue;
            }
            match self.graph.bond_between(a, b) {
                Some(bi) => {
                    let merged = (self.graph.bonds()[bi].order.value() + order).min(3);
                    let o = BondOrder::from_u8(merged).expect("order in 1..=3");
                    self.graph.set_bond_order(bi, o);
                }
                None => {
                    let o = BondOrder::from_u8(order).expect("order in 1..=3");
                    self.graph.add_bond(a, b, o).expect("distinct atoms");
                }
            }
        }
    }
}

/// Decodes bracketed symbol surfaces. Never fails: symbols that cannot act
/// are skipped, and a sequence without atoms yields an empty graph.
pub fn decode_symbols(surfaces: &[&str]) -> MolGraph {
    let mut d = Derivation {
        surfaces,
        symbols: surfaces.iter().map(|s| classify(s)).collect(),
        graph: MolGraph::new(),
        rings: Vec::new(),
    };
    d.derive(0, usize::MAX, None, 0);
    d.close_rings();
    d.graph
}

pub fn decode_str(selfies: &str) -> Result<MolGraph> {
    let toks = super::tokenize(selfies)?;
    if toks.is_empty() {
        return Err(Error::Empty("SELFIES string".into()));
    }
    Ok(decode_symbols(&toks))
}

/// Decodes token ids. `<pad>`, `<sos>` and `<unk>` are skipped and decoding
/// stops at the first `<eos>`.
pub fn decode(ids: &[u32], vocab: &Vocabulary) -> Result<MolGraph> {
    let mut surfaces = Vec::new();
    for &id in ids {
        match id {
            EOS => break,
            PAD | SOS | UNK => {}
            _ => {
                if let Some(s) = vocab.surface(id) {
                    surfaces.push(s);
                }
            }
        }
    }
    if surfaces.is_empty() {
        return Err(Error::Empty("token sequence has no content".into()));
    }
    Ok(decode_symbols(&surfaces))
}
