//! SMILES reader.

use std::collections::BTreeMap;

use super::element::Element;
use super::graph::{Atom, Bond, BondDirection, BondOrder, Chirality, MolGraph, StereoRef};
use super::SmilesError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BondSymbol {
    Order(BondOrder),
    Directional(BondDirection),
}

struct OpenRing {
    atom: usize,
    symbol: Option<BondSymbol>,
    /// slot in the opener's stereo list reserved for the partner
    slot: usize,
}

struct Parser<'a> {
    chars: Vec<char>,
    pos: usize,
    src: &'a str,
    graph: MolGraph,
    refs: Vec<Vec<StereoRef>>,
    prev: Option<usize>,
    pending: Option<BondSymbol>,
    branches: Vec<usize>,
    rings: BTreeMap<u32, OpenRing>,
}

/// Parses a SMILES string into a molecular graph. Implicit hydrogens are left
/// unset and resolved from the valence table on demand.
pub fn parse(smiles: &str) -> Result<MolGraph, SmilesError> {
    if smiles.is_empty() {
        return Err(SmilesError::Empty);
    }
    let mut p = Parser {
        chars: smiles.chars().collect(),
        pos: 0,
        src: smiles,
        graph: MolGraph::default(),
        refs: Vec::new(),
        prev: None,
        pending: None,
        branches: Vec::new(),
        rings: BTreeMap::new(),
    };
    p.run()?;
    Ok(p.graph)
}

impl Parser<'_> {
    fn peek(&self) -> Option<char> {
        self.chars.get(self.pos).copied()
    }

    fn unexpected(&self, pos: usize) -> SmilesError {
        SmilesError::UnexpectedCharacter {
            ch: self.chars.get(pos).copied().unwrap_or(' '),
            pos,
        }
    }

    fn run(&mut self) -> Result<(), SmilesError> {
        while let Some(c) = self.peek() {
            let start = self.pos;
            match c {
                '(' => {
                    let prev = self.prev.ok_or(SmilesError::UnbalancedParenthesis { pos: start })?;
                    if self.pending.is_some() {
                        return Err(self.unexpected(start));
                    }
                    self.branches.push(prev);
                    self.pos += 1;
                }
                ')' => {
                    let atom = self
                        .branches
                        .pop()
                        .ok_or(SmilesError::UnbalancedParenthesis { pos: start })?;
                    if self.pending.is_some() {
                        return Err(self.unexpected(start));
                    }
                    // "()" is not a branch
                    if start > 0 && self.chars[start - 1] == '(' {
                        return Err(self.unexpected(start));
                    }
                    self.prev = Some(atom);
                    self.pos += 1;
                }
                '-' | '=' | '#' | ':' | '/' | '\\' => {
                    if self.prev.is_none() || self.pending.is_some() {
                        return Err(self.unexpected(start));
                    }
                    self.pending = Some(match c {
                        '-' => BondSymbol::Order(BondOrder::Single),
                        '=' => BondSymbol::Order(BondOrder::Double),
                        '#' => BondSymbol::Order(BondOrder::Triple),
                        ':' => BondSymbol::Order(BondOrder::Aromatic),
                        '/' => BondSymbol::Directional(BondDirection::Up),
                        _ => BondSymbol::Directional(BondDirection::Down),
                    });
                    self.pos += 1;
                }
                '0'..='9' | '%' => {
                    let number = self.ring_number()?;
                    self.ring_bond(number, start)?;
                }
                '.' => {
                    if self.prev.is_none() || self.pending.is_some() || !self.branches.is_empty() {
                        return Err(self.unexpected(start));
                    }
                    self.prev = None;
                    self.pos += 1;
                }
                '[' => {
                    let atom = self.bracket_atom()?;
                    self.add_atom(atom, start)?;
                }
                _ => {
                    let atom = self.organic_atom()?;
                    self.add_atom(atom, start)?;
                }
            }
        }
        if let Some(&_atom) = self.branches.last() {
            return Err(SmilesError::UnbalancedParenthesis { pos: self.chars.len() });
        }
        if let Some((&number, _)) = self.rings.iter().next() {
            return Err(SmilesError::DanglingRingBond { ring: number });
        }
        if self.pending.is_some() {
            return Err(SmilesError::UnexpectedEnd);
        }
        if self.graph.atoms.is_empty() {
            return Err(SmilesError::Empty);
        }
        for (atom, refs) in self.graph.atoms.iter_mut().zip(std::mem::take(&mut self.refs)) {
            if atom.chirality != Chirality::None {
                atom.stereo_refs = refs;
            }
        }
        Ok(())
    }

    fn ring_number(&mut self) -> Result<u32, SmilesError> {
        let start = self.pos;
        if self.chars[self.pos] == '%' {
            let digits: String = self.chars.iter().skip(self.pos + 1).take(2).collect();
            if digits.len() != 2 || !digits.chars().all(|c| c.is_ascii_digit()) {
                return Err(self.unexpected(start));
            }
            self.pos += 3;
            Ok(digits.parse().unwrap())
        } else {
            self.pos += 1;
            Ok(self.chars[start].to_digit(10).unwrap())
        }
    }

    fn ring_bond(&mut self, number: u32, pos: usize) -> Result<(), SmilesError> {
        let atom = self.prev.ok_or_else(|| self.unexpected(pos))?;
        let symbol = self.pending.take();
        if let Some(open) = self.rings.remove(&number) {
            if open.atom == atom {
                return Err(SmilesError::InvalidGraph(format!("ring bond {number} closes on its own atom")));
            }
            if self.graph.bond_between(open.atom, atom).is_some() {
                return Err(SmilesError::InvalidGraph(format!(
                    "ring bond {number} duplicates an existing bond"
                )));
            }
            let symbol = match (open.symbol, symbol) {
                (Some(a), Some(b)) if a != b => {
                    return Err(SmilesError::InvalidGraph(format!(
                        "ring bond {number} has conflicting bond symbols"
                    )))
                }
                (Some(a), _) => Some(a),
                (None, b) => b,
            };
            // direction was written at the opener, so it reads opener -> closer
            let bond = self.make_bond(open.atom, atom, symbol);
            self.graph.bonds.push(bond);
            self.refs[open.atom][open.slot] = StereoRef::Atom(atom);
            self.refs[atom].push(StereoRef::Atom(open.atom));
        } else {
            let slot = self.refs[atom].len();
            // placeholder until the ring closes
            self.refs[atom].push(StereoRef::ImplicitH);
            self.rings.insert(number, OpenRing { atom, symbol, slot });
        }
        Ok(())
    }

    fn make_bond(&self, from: usize, to: usize, symbol: Option<BondSymbol>) -> Bond {
        let both_aromatic = self.graph.atoms[from].aromatic && self.graph.atoms[to].aromatic;
        let (order, direction) = match symbol {
            Some(BondSymbol::Order(o)) => (o, None),
            Some(BondSymbol::Directional(d)) => (BondOrder::Single, Some(d)),
            None if both_aromatic => (BondOrder::Aromatic, None),
            None => (BondOrder::Single, None),
        };
        Bond { a: from, b: to, order, direction }
    }

    fn add_atom(&mut self, atom: Atom, _pos: usize) -> Result<(), SmilesError> {
        let idx = self.graph.atoms.len();
        let has_h = atom.hydrogens.unwrap_or(0) > 0;
        self.graph.atoms.push(atom);
        self.refs.push(Vec::new());
        if let Some(prev) = self.prev {
            let symbol = self.pending.take();
            let bond = self.make_bond(prev, idx, symbol);
            self.graph.bonds.push(bond);
            self.refs[idx].push(StereoRef::Atom(prev));
            self.refs[prev].push(StereoRef::Atom(idx));
        }
        if has_h {
            self.refs[idx].push(StereoRef::ImplicitH);
        }
        self.prev = Some(idx);
        Ok(())
    }

    fn organic_atom(&mut self) -> Result<Atom, SmilesError> {
        let start = self.pos;
        let c = self.chars[self.pos];
        let next = self.chars.get(self.pos + 1).copied();
        let (symbol, aromatic, len) = match (c, next) {
            ('C', Some('l')) => ("Cl", false, 2),
            ('B', Some('r')) => ("Br", false, 2),
            ('B', _) => ("B", false, 1),
            ('C', _) => ("C", false, 1),
            ('N', _) => ("N", false, 1),
            ('O', _) => ("O", false, 1),
            ('P', _) => ("P", false, 1),
            ('S', _) => ("S", false, 1),
            ('F', _) => ("F", false, 1),
            ('I', _) => ("I", false, 1),
            ('b', _) => ("B", true, 1),
            ('c', _) => ("C", true, 1),
            ('n', _) => ("N", true, 1),
            ('o', _) => ("O", true, 1),
            ('p', _) => ("P", true, 1),
            ('s', _) => ("S", true, 1),
            _ if c.is_ascii_alphabetic() || c == '*' => {
                let end = (start + 2).min(self.chars.len());
                return Err(SmilesError::UnknownAtomSymbol {
                    symbol: self.chars[start..end].iter().collect(),
                    pos: start,
                });
            }
            _ => return Err(self.unexpected(start)),
        };
        self.pos += len;
        let mut atom = Atom::new(Element::from_symbol(symbol).expect("organic subset"));
        atom.aromatic = aromatic;
        Ok(atom)
    }

    fn bracket_atom(&mut self) -> Result<Atom, SmilesError> {
        let start = self.pos;
        let close = self.chars[start..]
            .iter()
            .position(|&c| c == ']')
            .map(|k| start + k)
            .ok_or_else(|| SmilesError::BadBracketAtom {
                text: self.src.chars().skip(start).collect(),
                pos: start,
            })?;
        let body: Vec<char> = self.chars[start + 1..close].to_vec();
        self.pos = close + 1;
        let bad = || SmilesError::BadBracketAtom {
            text: format!("[{}]", body.iter().collect::<String>()),
            pos: start,
        };
        let mut i = 0;
        let number = |i: &mut usize| -> Option<u32> {
            let s = *i;
            while *i < body.len() && body[*i].is_ascii_digit() {
                *i += 1;
            }
            (*i > s).then(|| body[s..*i].iter().collect::<String>().parse().ok())?
        };
        let isotope = number(&mut i).map(|v| u16::try_from(v).map_err(|_| bad())).transpose()?;

        // element symbol
        let first = *body.get(i).ok_or_else(bad)?;
        let (element, aromatic) = if first.is_ascii_uppercase() {
            let two: Option<String> = body.get(i + 1).filter(|c| c.is_ascii_lowercase()).map(|c| format!("{first}{c}"));
            match two.as_deref().and_then(Element::from_symbol) {
                Some(e) => {
                    i += 2;
                    (e, false)
                }
                None => {
                    let e = Element::from_symbol(&first.to_string()).ok_or_else(|| SmilesError::UnknownAtomSymbol {
                        symbol: first.to_string(),
                        pos: start + 1 + i,
                    })?;
                    i += 1;
                    (e, false)
                }
            }
        } else if first.is_ascii_lowercase() {
            let two: Option<String> = body.get(i + 1).map(|c| format!("{first}{c}"));
            match two.as_deref() {
                Some("se") | Some("as") => {
                    let s = two.unwrap();
                    let mut cs = s.chars();
                    let sym: String = cs.next().unwrap().to_ascii_uppercase().to_string() + cs.as_str();
                    i += 2;
                    (Element::from_symbol(&sym).unwrap(), true)
                }
                _ => {
                    let sym = first.to_ascii_uppercase().to_string();
                    let e = Element::from_symbol(&sym)
                        .filter(|e| e.can_be_aromatic())
                        .ok_or_else(|| SmilesError::UnknownAtomSymbol {
                            symbol: first.to_string(),
                            pos: start + 1 + i,
                        })?;
                    i += 1;
                    (e, true)
                }
            }
        } else if first == '*' {
            return Err(SmilesError::UnknownAtomSymbol { symbol: "*".into(), pos: start + 1 });
        } else {
            return Err(bad());
        };

        let mut chirality = Chirality::None;
        if body.get(i) == Some(&'@') {
            i += 1;
            chirality = Chirality::Anticlockwise;
            if body.get(i) == Some(&'@') {
                i += 1;
                chirality = Chirality::Clockwise;
            }
            if body.get(i).is_some_and(|c| c.is_ascii_uppercase() && *c != 'H') {
                // @TH1, @SP2 and friends
                return Err(bad());
            }
        }

        let mut hydrogens = 0u8;
        if body.get(i) == Some(&'H') {
            i += 1;
            hydrogens = match number(&mut i) {
                Some(v) => u8::try_from(v).map_err(|_| bad())?,
                None => 1,
            };
        }

        let mut charge: i32 = 0;
        if let Some(&sign) = body.get(i).filter(|c| **c == '+' || **c == '-') {
            i += 1;
            let unit = if sign == '+' { 1 } else { -1 };
            if let Some(v) = number(&mut i) {
                charge = unit * v as i32;
            } else {
                charge = unit;
                while body.get(i) == Some(&sign) {
                    charge += unit;
                    i += 1;
                }
            }
        }
        if body.get(i) == Some(&':') {
            i += 1;
            number(&mut i).ok_or_else(bad)?;
        }
        if i != body.len() || !(-15..=15).contains(&charge) {
            return Err(bad());
        }
        Ok(Atom {
            element,
            aromatic,
            charge: charge as i8,
            hydrogens: Some(hydrogens),
            isotope,
            chirality,
            stereo_refs: Vec::new(),
        })
    }
}
