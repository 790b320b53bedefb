//! Element table: symbols, atomic numbers, allowed valences.

use std::fmt;

/// A chemical element, identified by atomic number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Element(u8);

struct ElementInfo {
    symbol: &'static str,
    number: u8,
    valences: &'static [u8],
}

const TABLE: &[ElementInfo] = &[
    ElementInfo { symbol: "H", number: 1, valences: &[1] },
    ElementInfo { symbol: "He", number: 2, valences: &[0] },
    ElementInfo { symbol: "Li", number: 3, valences: &[1] },
    ElementInfo { symbol: "Be", number: 4, valences: &[2] },
    ElementInfo { symbol: "B", number: 5, valences: &[3] },
    ElementInfo { symbol: "C", number: 6, valences: &[4] },
    ElementInfo { symbol: "N", number: 7, valences: &[3] },
    ElementInfo { symbol: "O", number: 8, valences: &[2] },
    ElementInfo { symbol: "F", number: 9, valences: &[1] },
    ElementInfo { symbol: "Ne", number: 10, valences: &[0] },
    ElementInfo { symbol: "Na", number: 11, valences: &[1] },
    ElementInfo { symbol: "Mg", number: 12, valences: &[2] },
    ElementInfo { symbol: "Al", number: 13, valences: &[3] },
    ElementInfo { symbol: "Si", number: 14, valences: &[4] },
    ElementInfo { symbol: "P", number: 15, valences: &[3, 5] },
    ElementInfo { symbol: "S", number: 16, valences: &[2, 4, 6] },
    ElementInfo { symbol: "Cl", number: 17, valences: &[1] },
    ElementInfo { symbol: "Ar", number: 18, valences: &[0] },
    ElementInfo { symbol: "K", number: 19, valences: &[1] },
    ElementInfo { symbol: "Ca", number: 20, valences: &[2] },
    ElementInfo { symbol: "Fe", number: 26, valences: &[] },
    ElementInfo { symbol: "Co", number: 27, valences: &[] },
    ElementInfo { symbol: "Ni", number: 28, valences: &[] },
    ElementInfo { symbol: "Cu", number: 29, valences: &[] },
    ElementInfo { symbol: "Zn", number: 30, valences: &[] },
    ElementInfo { symbol: "Ge", number: 32, valences: &[4] },
    ElementInfo { symbol: "As", number: 33, valences: &[3, 5] },
    ElementInfo { symbol: "Se", number: 34, valences: &[2, 4, 6] },
    ElementInfo { symbol: "Br", number: 35, valences: &[1] },
    ElementInfo { symbol: "Kr", number: 36, valences: &[0] },
    ElementInfo { symbol: "Sn", number: 50, valences: &[2, 4] },
    ElementInfo { symbol: "Te", number: 52, valences: &[2, 4, 6] },
    ElementInfo { symbol: "I", number: 53, valences: &[1, 3, 5] },
    ElementInfo { symbol: "Xe", number: 54, valences: &[0] },
    ElementInfo { symbol: "Pt", number: 78, valences: &[] },
    ElementInfo { symbol: "Au", number: 79, valences: &[] },
    ElementInfo { symbol: "Hg", number: 80, valences: &[] },
];

pub const CARBON: Element = Element(6);
pub const NITROGEN: Element = Element(7);
pub const OXYGEN: Element = Element(8);
pub const FLUORINE: Element = Element(9);
pub const SULFUR: Element = Element(16);

impl Element {
    fn info(self) -> &'static ElementInfo {
        TABLE
            .iter()
            .find(|e| e.number == self.0)
            .expect("element constructed from table")
    }

    pub fn from_symbol(symbol: &str) -> Option<Element> {
        TABLE
            .iter()
            .find(|e| e.symbol == symbol)
            .map(|e| Element(e.number))
    }

    pub fn atomic_number(self) -> u8 {
        self.0
    }

    pub fn symbol(self) -> &'static str {
        self.info().symbol
    }

    /// Allowed neutral valences, ascending. Empty means unconstrained.
    pub fn valences(self) -> &'static [u8] {
        self.info().valences
    }

    /// Members of the organic subset may be written without brackets.
    pub fn is_organic_subset(self) -> bool {
        matches!(self.0, 5 | 6 | 7 | 8 | 9 | 15 | 16 | 17 | 35 | 53)
    }

    /// Elements with a lowercase aromatic spelling.
    pub fn can_be_aromatic(self) -> bool {
        matches!(self.0, 5 | 6 | 7 | 8 | 15 | 16 | 33 | 34)
    }

    /// Allowed valences after the isoelectronic shift caused by a formal charge.
    pub fn charged_valences(self, charge: i8) -> Vec<u8> {
        let base = self.valences();
        if charge == 0 {
            return base.to_vec();
        }
        let shift: i16 = match self.0 {
            // group 13: B- behaves like C
            5 | 13 => -(charge as i16),
            // group 14: either sign removes one bond
            6 | 14 | 32 | 50 => -(charge.abs() as i16),
            // groups 15-17: N+ behaves like C, O- like F
            7 | 8 | 9 | 15 | 16 | 17 | 33 | 34 | 35 | 52 | 53 => charge as i16,
            _ => return Vec::new(),
        };
        base.iter()
            .filter_map(|&v| {
                let s = v as i16 + shift;
                (s >= 0).then_some(s as u8)
            })
            .collect()
    }
}

impl fmt::Display for Element {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symbols_round_trip() {
        for info in TABLE {
            let e = Element::from_symbol(info.symbol).unwrap();
            assert_eq!(e.symbol(), info.symbol);
        }
        assert!(Element::from_symbol("Xx").is_none());
    }

    #[test]
    fn charge_shifts() {
        let n = Element::from_symbol("N").unwrap();
        assert_eq!(n.charged_valences(1), vec![4]);
        assert_eq!(OXYGEN.charged_valences(-1), vec![1]);
        assert_eq!(CARBON.charged_valences(-1), vec![3]);
        let b = Element::from_symbol("B").unwrap();
        assert_eq!(b.charged_valences(-1), vec![4]);
    }
}
