//! SMILES parsing, validation, canonical and randomized writing, and
//! stereoisomer enumeration.
//!
//! Supported syntax: organic-subset atoms, aromatic lowercase atoms, bracket
//! atoms with isotope, chirality (`@`/`@@`), hydrogen count and charge, bond
//! symbols `- = # : / \`, branches, ring closures (including `%nn`) and `.`.
//! Aromaticity is taken as written; there is no perception or kekulization.

mod element;
mod graph;
mod parser;
mod writer;

use thiserror::Error;

pub use element::{Element, CARBON, FLUORINE, NITROGEN, OXYGEN, SULFUR};
pub use graph::{
    is_isomorphic, Atom, Bond, BondDirection, BondOrder, Chirality, MolGraph, StereoRef,
};
pub use parser::parse;
pub use writer::{canonical_ranks, canonicalize, randomize, randomize_with, write_with_ranks};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SmilesError {
    #[error("empty SMILES")]
    Empty,
    #[error("unbalanced parenthesis at position {pos}")]
    UnbalancedParenthesis { pos: usize },
    #[error("ring bond {ring} is never closed")]
    DanglingRingBond { ring: u32 },
    #[error("unknown atom symbol '{symbol}' at position {pos}")]
    UnknownAtomSymbol { symbol: String, pos: usize },
    #[error("malformed bracket atom {text} at position {pos}")]
    BadBracketAtom { text: String, pos: usize },
    #[error("unexpected character '{ch}' at position {pos}")]
    UnexpectedCharacter { ch: char, pos: usize },
    #[error("SMILES ends in the middle of a bond")]
    UnexpectedEnd,
    #[error("valence violation at atom {atom}: {reason}")]
    Valence { atom: usize, reason: String },
    #[error("invalid graph: {0}")]
    InvalidGraph(String),
}

/// `true` iff `s` parses and the resulting graph satisfies every valence and
/// aromaticity invariant.
pub fn is_valid(s: &str) -> bool {
    parse(s).map(|g| g.validate().is_ok()).unwrap_or(false)
}

/// Parse and validate in one step.
pub fn parse_valid(s: &str) -> Result<MolGraph, SmilesError> {
    let g = parse(s)?;
    g.validate()?;
    Ok(g)
}

/// Canonical form of a SMILES string.
pub fn canonical_smiles(s: &str) -> Result<String, SmilesError> {
    canonicalize(&parse_valid(s)?)
}

/// One variant per stereocenter, with that center's `@`/`@@` swapped.
pub fn flip_stereocenters(g: &MolGraph) -> Vec<MolGraph> {
    g.atoms
        .iter()
        .enumerate()
        .filter(|(_, a)| a.chirality != Chirality::None)
        .map(|(i, _)| {
            let mut variant = g.clone();
            variant.atoms[i].chirality = variant.atoms[i].chirality.flipped();
            variant
        })
        .collect()
}

#[cfg(test)]
mod tests;
