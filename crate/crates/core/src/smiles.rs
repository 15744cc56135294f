//! Minimal SMILES reader for corpus ingestion.
//!
//! Supports the organic subset (including aromatic lowercase atoms), bracket
//! atoms with hydrogen counts and charges, explicit bonds `- = # : / \`,
//! branches and ring closures (`1`-`9`, `%nn`). Stereo marks are read and
//! dropped, isotopes are ignored. Aromatic input is kekulized; bonds that were
//! written aromatic keep their `aromatic` flag.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::molgraph::{Atom, BondOrder, Element, MolGraph};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BondSym {
    Single,
    Double,
    Triple,
    Aromatic,
}

fn parse_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        offset,
        message: message.into(),
    }
}

struct Parsed {
    graph: MolGraph,
    aromatic_atom: Vec<bool>,
    bracket: Vec<bool>,
    aromatic_bond: Vec<bool>,
}

struct Parser<'a> {
    src: &'a str,
    bytes: &'a [u8],
    pos: usize,
    out: Parsed,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    fn add_atom(&mut self, atom: Atom, aromatic: bool, bracket: bool) -> usize {
        self.out.aromatic_atom.push(aromatic);
        self.out.bracket.push(bracket);
        self.out.graph.add_atom(atom)
    }

    fn connect(&mut self, a: usize, b: usize, sym: Option<BondSym>, offset: usize) -> Result<()> {
        let sym = sym.unwrap_or(
            if self.out.aromatic_atom[a] && self.out.aromatic_atom[b] {
                BondSym::Aromatic
            } else {
                BondSym::Single
            },
        );
        let order = match sym {
            BondSym::Double => BondOrder::Double,
            BondSym::Triple => BondOrder::Triple,
            BondSym::Single | BondSym::Aromatic => BondOrder::Single,
        };
        self.out
            .graph
            .add_bond(a, b, order)
            .map_err(|e| parse_err(offset, e.to_string()))?;
        self.out.aromatic_bond.push(sym == BondSym::Aromatic);
        Ok(())
    }

    fn organic(&mut self) -> Option<(Element, bool)> {
        let rest = &self.src[self.pos..];
        let two = [("Cl", Element::Cl), ("Br", Element::Br)];
        for (sym, e) in two {
            if rest.starts_with(sym) {
                self.pos += 2;
                return Some((e, false));
            }
        }
        let e = match self.peek()? {
            b'B' => (Element::B, false),
            b'C' => (Element::C, false),
            b'N' => (Element::N, false),
            b'O' => (Element::O, false),
            b'P' => (Element::P, false),
            b'S' => (Element::S, false),
            b'F' => (Element::F, false),
            b'I' => (Element::I, false),
            b'b' => (Element::B, true),
            b'c' => (Element::C, true),
            b'n' => (Element::N, true),
            b'o' => (Element::O, true),
            b'p' => (Element::P, true),
            b's' => (Element::S, true),
            _ => return None,
        };
        self.pos += 1;
        Some(e)
    }

    fn number(&mut self) -> Option<u32> {
        let start = self.pos;
        while self.peek().is_some_and(|c| c.is_ascii_digit()) {
            self.pos += 1;
        }
        (self.pos > start).then(|| self.src[start..self.pos].parse().unwrap_or(u32::MAX))
    }

    fn bracket_atom(&mut self) -> Result<(Atom, bool)> {
        let open = self.pos;
        self.pos += 1;
        self.number(); // isotope, ignored
        let rest = &self.src[self.pos..];
        let (element, aromatic, len) = if let Some(e) = ["Cl", "Br"]
            .iter()
            .find(|s| rest.starts_with(**s))
            .and_then(|s| Element::from_symbol(s))
        {
            (e, false, 2)
        } else {
            let c = self
                .peek()
                .ok_or_else(|| parse_err(open, "unterminated bracket atom"))?;
            let upper = (c as char).to_ascii_uppercase().to_string();
            let e = Element::from_symbol(&upper)
                .filter(|_| c.is_ascii_alphabetic())
                .ok_or_else(|| {
                    parse_err(self.pos, format!("unsupported element in bracket atom at '{}'", c as char))
                })?;
            (e, c.is_ascii_lowercase(), 1)
        };
        self.pos += len;
        while self.peek() == Some(b'@') {
            self.pos += 1;
        }
        // @TH1, @SP2 style chirality classes
        if self.src[self.pos..].starts_with("TH")
            || self.src[self.pos..].starts_with("AL")
            || self.src[self.pos..].starts_with("SP")
            || self.src[self.pos..].starts_with("TB")
            || self.src[self.pos..].starts_with("OH")
        {
            self.pos += 2;
            self.number();
        }
        let mut h = 0u32;
        if self.peek() == Some(b'H') {
            self.pos += 1;
            h = self.number().unwrap_or(1);
        }
        let mut charge = 0i32;
        if let Some(sign @ (b'+' | b'-')) = self.peek() {
            let unit = if sign == b'+' { 1 } else { -1 };
            self.pos += 1;
            if let Some(n) = self.number() {
                charge = unit * n.min(9) as i32;
            } else {
                charge = unit;
                while self.peek() == Some(sign) {
                    self.pos += 1;
                    charge += unit;
                }
            }
        }
        if self.peek() == Some(b':') {
            self.pos += 1;
            self.number();
        }
        if self.peek() != Some(b']') {
            return Err(parse_err(self.pos, "expected ']' to close bracket atom"));
        }
        self.pos += 1;
        let atom = Atom::new(
            element,
            charge.clamp(-100, 100) as i8,
            h.min(255) as u8,
        )
        .map_err(|e| parse_err(open, e.to_string()))?;
        Ok((atom, aromatic))
    }

    fn run(&mut self) -> Result<()> {
        let mut prev: Option<usize> = None;
        let mut pending: Option<(BondSym, usize)> = None;
        let mut branches: Vec<usize> = Vec::new();
        let mut rings: HashMap<u32, (usize, Option<BondSym>, usize)> = HashMap::new();

        while let Some(c) = self.peek() {
            let at = self.pos;
            match c {
                b'-' | b'/' | b'\\' | b'=' | b'#' | b':' => {
                    if pending.is_some() {
                        return Err(parse_err(at, "two consecutive bond symbols"));
                    }
                    let sym = match c {
                        b'=' => BondSym::Double,
                        b'#' => BondSym::Triple,
                        b':' => BondSym::Aromatic,
                        _ => BondSym::Single,
                    };
                    pending = Some((sym, at));
                    self.pos += 1;
                }
                b'(' => {
                    let p = prev.ok_or_else(|| parse_err(at, "branch before any atom"))?;
                    branches.push(p);
                    self.pos += 1;
                }
                b')' => {
                    if pending.is_some() {
                        return Err(parse_err(at, "bond symbol before ')'"));
                    }
                    prev = Some(branches.pop().ok_or_else(|| parse_err(at, "unmatched ')'"))?);
                    self.pos += 1;
                }
                b'0'..=b'9' | b'%' => {
                    let num = if c == b'%' {
                        let d = self.src.get(at + 1..at + 3).filter(|d| {
                            d.bytes().all(|b| b.is_ascii_digit())
                        });
                        let d = d.ok_or_else(|| parse_err(at, "'%' must be followed by two digits"))?;
                        self.pos += 3;
                        d.parse().unwrap()
                    } else {
                        self.pos += 1;
                        u32::from(c - b'0')
                    };
                    let cur = prev.ok_or_else(|| parse_err(at, "ring closure before any atom"))?;
                    let sym = pending.take().map(|(s, _)| s);
                    match rings.remove(&num) {
                        Some((other, other_sym, _)) => {
                            let sym = match (sym, other_sym) {
                                (Some(a), Some(b)) if a != b => {
                                    return Err(parse_err(at, "conflicting ring-closure bonds"))
                                }
                                (a, b) => a.or(b),
                            };
                            if other == cur {
                                return Err(parse_err(at, "ring closure to the same atom"));
                            }
                            self.connect(other, cur, sym, at)?;
                        }
                        None => {
                            rings.insert(num, (cur, sym, at));
                        }
                    }
                }
                b'.' => return Err(parse_err(at, "disconnected fragments are not supported")),
                b'[' => {
                    let (atom, aromatic) = self.bracket_atom()?;
                    let idx = self.add_atom(atom, aromatic, true);
                    if let Some(p) = prev {
                        let sym = pending.take().map(|(s, _)| s);
                        self.connect(p, idx, sym, at)?;
                    } else if let Some((_, off)) = pending {
                        return Err(parse_err(off, "bond symbol before any atom"));
                    }
                    prev = Some(idx);
                }
                _ => {
                    let (element, aromatic) = self
                        .organic()
                        .ok_or_else(|| parse_err(at, format!("unexpected character '{}'", c as char)))?;
                    let idx = self.add_atom(Atom::neutral(element), aromatic, false);
                    if let Some(p) = prev {
                        let sym = pending.take().map(|(s, _)| s);
                        self.connect(p, idx, sym, at)?;
                    } else if let Some((_, off)) = pending {
                        return Err(parse_err(off, "bond symbol before any atom"));
                    }
                    prev = Some(idx);
                }
            }
        }
        if let Some((_, off)) = pending {
            return Err(parse_err(off, "dangling bond symbol"));
        }
        if !branches.is_empty() {
            return Err(parse_err(self.src.len(), "unclosed branch"));
        }
        if let Some((_, _, off)) = rings.values().min_by_key(|r| r.2) {
            return Err(parse_err(*off, "unclosed ring"));
        }
        if self.out.graph.is_empty() {
            return Err(parse_err(0, "no atoms"));
        }
        Ok(())
    }
}

/// Assigns alternating double bonds over the aromatic subgraph.
fn kekulize(p: &mut Parsed) -> Result<()> {
    let g = &mut p.graph;
    if !p.aromatic_bond.iter().any(|&a| a) {
        return Ok(());
    }
    let info = g.ring_info();
    for (b, arom) in p.aromatic_bond.iter_mut().enumerate() {
        if *arom && !info.bond_in_ring[b] {
            *arom = false;
        }
    }
    let n = g.atom_count();
    let mut needs = vec![false; n];
    for i in 0..n {
        if !p.aromatic_atom[i] {
            continue;
        }
        let has_double = g
            .neighbors(i)
            .iter()
            .any(|&(_, b)| !p.aromatic_bond[b] && g.bonds()[b].order != BondOrder::Single);
        if has_double {
            continue;
        }
        let a = g.atoms()[i];
        let min_valence = a
            .element
            .allowed_valences(a.formal_charge)
            .first()
            .copied()
            .unwrap_or(0);
        let used = g.bond_order_sum(i) + u32::from(a.explicit_h);
        needs[i] = u32::from(min_valence) > used;
    }
    let edges: Vec<Vec<(usize, usize)>> = (0..n)
        .map(|i| {
            g.neighbors(i)
                .iter()
                .copied()
                .filter(|&(nb, b)| p.aromatic_bond[b] && needs[nb])
                .collect()
        })
        .collect();

    fn search(
        needs: &[bool],
        edges: &[Vec<(usize, usize)>],
        matched: &mut Vec<Option<usize>>,
        chosen: &mut Vec<usize>,
        budget: &mut usize,
    ) -> bool {
        if *budget == 0 {
            return false;
        }
        *budget -= 1;
        // most constrained unmatched atom first
        let pick = (0..needs.len())
            .filter(|&i| needs[i] && matched[i].is_none())
            .min_by_key(|&i| edges[i].iter().filter(|(nb, _)| matched[*nb].is_none()).count());
        let Some(i) = pick else { return true };
        for &(nb, b) in &edges[i] {
            if matched[nb].is_some() {
                continue;
            }
            matched[i] = Some(nb);
            matched[nb] = Some(i);
            chosen.push(b);
            if search(needs, edges, matched, chosen, budget) {
                return true;
            }
            chosen.pop();
            matched[i] = None;
            matched[nb] = None;
        }
        false
    }

    let mut matched = vec![None; n];
    let mut chosen = Vec::new();
    let mut budget = 200_000;
    if !search(&needs, &edges, &mut matched, &mut chosen, &mut budget) {
        return Err(parse_err(0, "cannot kekulize aromatic system"));
    }
    for b in chosen {
        g.set_bond_order(b, BondOrder::Double);
    }
    for (b, &arom) in p.aromatic_bond.iter().enumerate() {
        if arom {
            g.set_bond_aromatic(b, true);
        }
    }
    Ok(())
}

/// Parses one SMILES string into a connected, valence-checked graph.
pub fn parse_smiles(s: &str) -> Result<MolGraph> {
    let mut parser = Parser {
        src: s,
        bytes: s.as_bytes(),
        pos: 0,
        out: Parsed {
            graph: MolGraph::new(),
            aromatic_atom: Vec::new(),
            bracket: Vec::new(),
            aromatic_bond: Vec::new(),
        },
    };
    parser.run()?;
    let mut parsed = parser.out;
    kekulize(&mut parsed)?;
    let _ = &parsed.bracket;
    parsed
        .graph
        .check_valence()
        .map_err(|e| parse_err(0, e.to_string()))?;
    Ok(parsed.graph)
}

/// Writes a Kekulé SMILES string (uppercase atoms, explicit `=`/`#`).
pub fn write_smiles(g: &MolGraph) -> Result<String> {
    if g.is_empty() {
        return Err(Error::domain("cannot write an empty graph"));
    }
    if !g.is_connected() {
        return Err(Error::domain("cannot write a disconnected graph"));
    }
    let n = g.atom_count();
    // ring closure bonds: non-tree edges of a DFS from atom 0
    let mut visited = vec![false; n];
    let mut tree = vec![false; g.bond_count()];
    let mut stack = vec![0usize];
    let mut order = Vec::new();
    let mut parent_bond = vec![usize::MAX; n];
    while let Some(a) = stack.pop() {
        if visited[a] {
            continue;
        }
        visited[a] = true;
        order.push(a);
        if parent_bond[a] != usize::MAX {
            tree[parent_bond[a]] = true;
        }
        for &(nb, b) in g.neighbors(a).iter().rev() {
            if !visited[nb] {
                parent_bond[nb] = b;
                stack.push(nb);
            }
        }
    }
    let mut digits: HashMap<usize, u32> = HashMap::new();
    let mut free: Vec<u32> = (1..=99).rev().collect();
    let mut out = String::new();
    let mut done = vec![false; n];

    fn bond_str(order: BondOrder) -> &'static str {
        match order {
            BondOrder::Single => "",
            BondOrder::Double => "=",
            BondOrder::Triple => "#",
        }
    }

    fn atom_str(g: &MolGraph, i: usize) -> String {
        let a = g.atoms()[i];
        let organic = a.formal_charge == 0
            && a.explicit_h == 0
            && !matches!(a.element, Element::H);
        if organic {
            return a.element.symbol().to_string();
        }
        let mut s = format!("[{}", a.element.symbol());
        let h = g.total_h(i);
        if h == 1 {
            s.push('H');
        } else if h > 1 {
            s.push_str(&format!("H{h}"));
        }
        match a.formal_charge {
            0 => {}
            1 => s.push('+'),
            -1 => s.push('-'),
            c => s.push_str(&format!("{c:+}")),
        }
        s.push(']');
        s
    }

    #[allow(clippy::too_many_arguments)]
    fn emit(
        g: &MolGraph,
        a: usize,
        tree: &[bool],
        done: &mut [bool],
        digits: &mut HashMap<usize, u32>,
        free: &mut Vec<u32>,
        out: &mut String,
    ) -> Result<()> {
        done[a] = true;
        out.push_str(&atom_str(g, a));
        for &(nb, b) in g.neighbors(a) {
            if tree[b] {
                continue;
            }
            let bond = g.bonds()[b];
            if let Some(d) = digits.remove(&b) {
                out.push_str(bond_str(bond.order));
                out.push_str(&ring_digit(d));
                free.push(d);
            } else if !done[nb] {
                let d = free.pop().ok_or_else(|| Error::domain("too many open rings"))?;
                digits.insert(b, d);
                out.push_str(bond_str(bond.order));
                out.push_str(&ring_digit(d));
            }
        }
        let children: Vec<(usize, usize)> = g
            .neighbors(a)
            .iter()
            .copied()
            .filter(|&(nb, b)| tree[b] && !done[nb])
            .collect();
        for (k, &(nb, b)) in children.iter().enumerate() {
            let last = k + 1 == children.len();
            if !last {
                out.push('(');
            }
            out.push_str(bond_str(g.bonds()[b].order));
            emit(g, nb, tree, done, digits, free, out)?;
            if !last {
                out.push(')');
            }
        }
        Ok(())
    }

    fn ring_digit(d: u32) -> String {
        if d < 10 {
            d.to_string()
        } else {
            format!("%{d:02}")
        }
    }

    emit(g, order[0], &tree, &mut done, &mut digits, &mut free, &mut out)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::molgraph::{canonical_key, count_h_donors, ring_counts};

    #[test]
    fn simple_chains() {
        let g = parse_smiles("CCO").unwrap();
        assert_eq!(g.atom_count(), 3);
        assert_eq!(g.formula(), "C2H6O");
        let g = parse_smiles("C=C").unwrap();
        assert_eq!(g.bonds()[0].order, BondOrder::Double);
        let g = parse_smiles("C#N").unwrap();
        assert_eq!(g.bonds()[0].order, BondOrder::Triple);
    }

    #[test]
    fn branches_and_rings() {
        let g = parse_smiles("CC(C)(C)O").unwrap();
        assert_eq!(g.degree(1), 4);
        let g = parse_smiles("C1CCCCC1").unwrap();
        assert_eq!(g.bond_count(), 6);
        assert_eq!(ring_counts(&g).aliphatic, 1);
    }

    #[test]
    fn aromatic_inputs_kekulize() {
        for (smi, arom) in [
            ("c1ccccc1", 1),
            ("c1ccncc1", 1),
            ("c1ccoc1", 1),
            ("c1ccsc1", 1),
            ("c1cc[nH]c1", 1),
            ("c1ccc2ccccc2c1", 2),
            ("Cn1cnc2c1c(=O)n(C)c(=O)n2C", 2),
            ("O=c1cccc[nH]1", 1),
        ] {
            let g = parse_smiles(smi).unwrap_or_else(|e| panic!("{smi}: {e}"));
            assert!(g.is_valid(), "{smi}");
            assert_eq!(ring_counts(&g).aromatic, arom, "{smi}");
        }
    }

    #[test]
    fn aromatic_and_kekule_agree() {
        let a = parse_smiles("c1ccccc1O").unwrap();
        let b = parse_smiles("C1=CC=CC=C1O").unwrap();
        assert_eq!(canonical_key(&a), canonical_key(&b));
    }

    #[test]
    fn bracket_atoms() {
        let g = parse_smiles("C[N+](C)(C)C").unwrap();
        assert_eq!(g.atoms()[1].formal_charge, 1);
        let g = parse_smiles("[O-]C=O").unwrap();
        assert_eq!(g.atoms()[0].formal_charge, -1);
        assert_eq!(count_h_donors(&g), 0);
        let g = parse_smiles("[NH4+]").unwrap();
        assert_eq!(g.total_h(0), 4);
        let g = parse_smiles("C[C@@H](N)C(=O)O").unwrap();
        assert_eq!(g.atom_count(), 6);
    }

    #[test]
    fn errors() {
        assert!(parse_smiles("C(C").is_err());
        assert!(parse_smiles("C1CC").is_err());
        assert!(parse_smiles("CC.O").is_err());
        assert!(parse_smiles("C(C)(C)(C)(C)C").is_err());
        assert!(parse_smiles("c1cccc1").is_err());
        assert!(parse_smiles("[Xe]").is_err());
        assert!(parse_smiles("").is_err());
        match parse_smiles("CCX") {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn writer_roundtrip() {
        for smi in [
            "CCO",
            "c1ccccc1C(=O)O",
            "C1CC2CCC1CC2",
            "C[N+](C)(C)CC(=O)[O-]",
            "c1ccc2ccccc2c1",
            "CC(C)(C)c1ccc(O)cc1",
        ] {
            let g = parse_smiles(smi).unwrap();
            let out = write_smiles(&g).unwrap();
            let back = parse_smiles(&out).unwrap_or_else(|e| panic!("{smi} -> {out}: {e}"));
            assert_eq!(canonical_key(&g), canonical_key(&back), "{smi} -> {out}");
        }
    }
}
