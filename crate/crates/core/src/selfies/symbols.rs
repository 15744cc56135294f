//! Classification of SELFIES symbols and the index alphabet.

use crate::molgraph::{Atom, Element};

/// Symbols whose position in this table gives their value (0-15) when read
/// as a digit of a branch length or ring distance. Any other symbol reads as
/// 0.
pub const INDEX_ALPHABET: [&str; 16] = [
    "[C]",
    "[Ring1]",
    "[Ring2]",
    "[Branch1]",
    "[=Branch1]",
    "[#Branch1]",
    "[Branch2]",
    "[=Branch2]",
    "[#Branch2]",
    "[O]",
    "[N]",
    "[=N]",
    "[=C]",
    "[#C]",
    "[S]",
    "[P]",
];

pub fn index_code(surface: &str) -> usize {
    INDEX_ALPHABET
        .iter()
        .position(|&s| s == surface)
        .unwrap_or(0)
}

/// Reads `n` digits (most significant first); missing digits count as 0.
pub fn read_index<S: AsRef<str>>(digits: &[S], n: usize) -> usize {
    (0..n).fold(0, |acc, i| {
        acc * INDEX_ALPHABET.len() + digits.get(i).map_or(0, |s| index_code(s.as_ref()))
    })
}

/// Symbols encoding `q`, using the fewest digits (1 to 3).
pub fn index_symbols(q: usize) -> Option<Vec<&'static str>> {
    let base = INDEX_ALPHABET.len();
    let n = match q {
        _ if q < base => 1,
        _ if q < base * base => 2,
        _ if q < base * base * base => 3,
        _ => return None,
    };
    let mut digits = vec![0; n];
    let mut rest = q;
    for d in digits.iter_mut().rev() {
        *d = rest % base;
        rest /= base;
    }
    Some(digits.into_iter().map(|d| INDEX_ALPHABET[d]).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Symbol {
    Atom { bond: u8, atom: Atom },
    Branch { bond: u8, digits: usize },
    Ring { bond: u8, digits: usize },
    /// Anything the decoder cannot act on: `[nop]`, unsupported elements,
    /// malformed payloads.
    Nop,
}

fn prefix_order(prefix: &str) -> Option<u8> {
    match prefix {
        "" | "/" | "\\" => Some(1),
        "=" => Some(2),
        "#" => Some(3),
        _ => None,
    }
}

fn ring_prefix_order(prefix: &str) -> Option<u8> {
    // stereo ring bonds such as "-/", "\\/" read as single bonds
    if prefix.len() <= 2 && prefix.chars().all(|c| matches!(c, '-' | '/' | '\\')) {
        return Some(1);
    }
    prefix_order(prefix)
}

fn parse_atom(payload: &str) -> Option<Atom> {
    let bytes = payload.as_bytes();
    let mut pos = if bytes.len() >= 2 && bytes[1].is_ascii_lowercase() {
        2
    } else {
        1
    };
    if bytes.is_empty() || !bytes[0].is_ascii_uppercase() {
        return None;
    }
    let element = match Element::from_symbol(&payload[..pos.min(payload.len())]) {
        Some(e) => e,
        None if pos == 2 => {
            pos = 1;
            Element::from_symbol(&payload[..1])?
        }
        None => return None,
    };
    while bytes.get(pos) == Some(&b'@') {
        pos += 1;
    }
    let digits = |from: usize| {
        let end = (from..bytes.len())
            .find(|&i| !bytes[i].is_ascii_digit())
            .unwrap_or(bytes.len());
        (end, payload[from..end].parse::<u32>().ok())
    };
    let mut h = 0u32;
    if bytes.get(pos) == Some(&b'H') {
        let (end, n) = digits(pos + 1);
        h = n.unwrap_or(1);
        pos = end;
    }
    let mut charge = 0i32;
    if let Some(&sign) = bytes.get(pos).filter(|&&b| b == b'+' || b == b'-') {
        let unit = if sign == b'+' { 1 } else { -1 };
        let (end, n) = digits(pos + 1);
        charge = unit * n.unwrap_or(1).min(9) as i32;
        pos = end;
    }
    if pos != bytes.len() {
        return None;
    }
    Atom::new(element, charge as i8, h.min(255) as u8).ok()
}

pub fn classify(surface: &str) -> Symbol {
    let Some(inner) = surface.strip_prefix('[').and_then(|s| s.strip_suffix(']')) else {
        return Symbol::Nop;
    };
    for (name, ring) in [("Branch", false), ("Ring", true)] {
        for digits in 1..=3usize {
            let suffix = format!("{name}{digits}");
            if let Some(prefix) = inner.strip_suffix(suffix.as_str()) {
                return match (ring, if ring { ring_prefix_order(prefix) } else { prefix_order(prefix) }) {
                    (_, None) => Symbol::Nop,
                    (false, Some(bond)) => Symbol::Branch { bond, digits },
                    (true, Some(bond)) => Symbol::Ring { bond, digits },
                };
            }
        }
    }
    let (bond, payload) = match inner.as_bytes().first() {
        Some(b'=') => (2, &inner[1..]),
        Some(b'#') => (3, &inner[1..]),
        Some(b'/' | b'\\') => (1, &inner[1..]),
        _ => (1, inner),
    };
    match parse_atom(payload) {
        Some(atom) => Symbol::Atom { bond, atom },
        None => Symbol::Nop,
    }
}

/// Surface of an atom symbol with the given incoming bond order.
pub fn atom_surface(atom: &Atom, bond: u8) -> String {
    let prefix = bond_prefix(bond);
    let mut s = format!("[{prefix}{}", atom.element.symbol());
    if atom.explicit_h > 0 {
        s.push_str(&format!("H{}", atom.explicit_h));
    }
    if atom.formal_charge != 0 {
        s.push_str(&format!("{:+}", atom.formal_charge));
    }
    s.push(']');
    s
}

pub fn bond_prefix(bond: u8) -> &'static str {
    match bond {
        2 => "=",
        3 => "#",
        _ => "",
    }
}
