//! Synthetic molecules with templated captions built from structural facts.

use std::collections::HashSet;
use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::PairRecord;
use crate::smiles::{
    self, Atom, Bond, BondOrder, Chirality, Element, MolGraph, StereoRef, CARBON, FLUORINE, NITROGEN, OXYGEN, SULFUR,
};

pub const CLAUSE_SEPARATOR: &str = "; ";

/// A checkable statement about a molecule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Fact {
    /// Exactly this many atoms of a heteroatom element.
    ElementCount(Element, usize),
    Rings(usize),
    Hydroxyl,
    Carbonyl,
    Amine,
}

const COUNTED: [(Element, &str, &str); 4] =
    [(NITROGEN, "a", "nitrogen"), (OXYGEN, "an", "oxygen"), (FLUORINE, "a", "fluorine"), (SULFUR, "a", "sulfur")];

impl fmt::Display for Fact {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Fact::ElementCount(e, n) => {
                let (_, article, name) = COUNTED.iter().find(|c| c.0 == e).copied().unwrap_or((e, "a", e.symbol()));
                if n == 1 {
                    write!(f, "contains {article} {name} atom")
                } else {
                    write!(f, "contains {n} {name} atoms")
                }
            }
            Fact::Rings(0) => f.write_str("has no rings"),
            Fact::Rings(1) => f.write_str("has 1 ring"),
            Fact::Rings(n) => write!(f, "has {n} rings"),
            Fact::Hydroxyl => f.write_str("has a hydroxyl group"),
            Fact::Carbonyl => f.write_str("has a carbonyl group"),
            Fact::Amine => f.write_str("has an amine group"),
        }
    }
}

impl Fact {
    pub fn parse(text: &str) -> Option<Fact> {
        let words: Vec<&str> = text.split_whitespace().collect();
        match words.as_slice() {
            ["has", "no", "rings"] => Some(Fact::Rings(0)),
            ["has", n, "ring" | "rings"] => n.parse().ok().map(Fact::Rings),
            ["has", "a", "hydroxyl", "group"] => Some(Fact::Hydroxyl),
            ["has", "a", "carbonyl", "group"] => Some(Fact::Carbonyl),
            ["has", "an", "amine", "group"] => Some(Fact::Amine),
            ["contains", count, name, "atom" | "atoms"] => {
                let e = COUNTED.iter().find(|c| c.2 == *name)?.0;
                let n = match *count {
                    "a" | "an" => 1,
                    n => n.parse().ok()?,
                };
                Some(Fact::ElementCount(e, n))
            }
            _ => None,
        }
    }

    pub fn holds(&self, g: &MolGraph) -> bool {
        match *self {
            Fact::ElementCount(e, n) => g.count_element(e) == n,
            Fact::Rings(n) => g.ring_count() == n,
            Fact::Hydroxyl => has_hydroxyl(g),
            Fact::Carbonyl => has_carbonyl(g),
            Fact::Amine => has_amine(g),
        }
    }
}

fn has_hydroxyl(g: &MolGraph) -> bool {
    let adj = g.adjacency();
    (0..g.atom_count()).any(|i| {
        g.atoms[i].element == OXYGEN
            && g.atoms[i].charge == 0
            && g.total_hydrogens(i) == 1
            && adj[i].len() == 1
            && g.bonds[adj[i][0].1].order == BondOrder::Single
            && g.atoms[adj[i][0].0].element == CARBON
    })
}

fn has_carbonyl(g: &MolGraph) -> bool {
    g.bonds.iter().any(|b| {
        let (x, y) = (g.atoms[b.a].element, g.atoms[b.b].element);
        b.order == BondOrder::Double && ((x == CARBON && y == OXYGEN) || (x == OXYGEN && y == CARBON))
    })
}

fn has_amine(g: &MolGraph) -> bool {
    let adj = g.adjacency();
    (0..g.atom_count()).any(|i| {
        g.atoms[i].element == NITROGEN
            && !g.atoms[i].aromatic
            && g.atoms[i].charge == 0
            && g.total_hydrogens(i) >= 1
            && adj[i].iter().all(|&(_, b)| g.bonds[b].order == BondOrder::Single)
    })
}

/// Every fact the generator states about `g`, in a fixed order.
pub fn facts_of(g: &MolGraph) -> Vec<Fact> {
    let mut facts: Vec<Fact> = COUNTED
        .iter()
        .filter_map(|&(e, _, _)| {
            let n = g.count_element(e);
            (n > 0).then_some(Fact::ElementCount(e, n))
        })
        .collect();
    facts.push(Fact::Rings(g.ring_count()));
    for f in [Fact::Hydroxyl, Fact::Carbonyl, Fact::Amine] {
        if f.holds(g) {
            facts.push(f);
        }
    }
    facts
}

pub fn caption_of(facts: &[Fact]) -> String {
    facts.iter().map(Fact::to_string).collect::<Vec<_>>().join(CLAUSE_SEPARATOR)
}

/// Parses every clause; `None` if any clause isn't a known template.
pub fn parse_caption(caption: &str) -> Option<Vec<Fact>> {
    caption.split(';').map(str::trim).filter(|c| !c.is_empty()).map(Fact::parse).collect()
}

/// `true` iff the caption parses and every clause holds for `g`.
pub fn caption_satisfied(caption: &str, g: &MolGraph) -> bool {
    parse_caption(caption).is_some_and(|facts| !facts.is_empty() && facts.iter().all(|f| f.holds(g)))
}

/// Keeps each clause with probability `keep` (at least one) and shuffles them.
pub fn subsample_caption(caption: &str, keep: f64, rng: &mut impl Rng) -> String {
    let clauses: Vec<&str> = caption.split(CLAUSE_SEPARATOR).collect();
    let mut kept: Vec<&str> = clauses.iter().copied().filter(|_| rng.gen::<f64>() < keep).collect();
    if kept.is_empty() {
        kept.push(clauses[rng.gen_range(0..clauses.len())]);
    }
    kept.shuffle(rng);
    kept.join(CLAUSE_SEPARATOR)
}

const MAX_HEAVY: usize = 12;

fn max_valence(e: Element) -> u8 {
    e.valences()[0]
}

fn free_valence(g: &MolGraph, i: usize) -> u8 {
    let used: u8 = g.bonds.iter().filter(|b| b.a == i || b.b == i).map(|b| b.order.valence()).sum();
    max_valence(g.atoms[i].element).saturating_sub(used)
}

fn pick_element(rng: &mut impl Rng) -> Element {
    let r: f64 = rng.gen();
    match r {
        r if r < 0.62 => CARBON,
        r if r < 0.77 => OXYGEN,
        r if r < 0.90 => NITROGEN,
        r if r < 0.95 => FLUORINE,
        _ => SULFUR,
    }
}

fn path_length(g: &MolGraph, from: usize, to: usize) -> Option<usize> {
    let adj = g.adjacency();
    let mut dist = vec![usize::MAX; g.atom_count()];
    let mut queue = std::collections::VecDeque::from([from]);
    dist[from] = 0;
    while let Some(v) = queue.pop_front() {
        for &(w, _) in &adj[v] {
            if dist[w] == usize::MAX {
                dist[w] = dist[v] + 1;
                queue.push_back(w);
            }
        }
    }
    (dist[to] != usize::MAX).then_some(dist[to])
}

fn random_molecule(rng: &mut impl Rng) -> MolGraph {
    let n = rng.gen_range(3..=MAX_HEAVY);
    let mut g = MolGraph { atoms: vec![Atom::new(CARBON)], bonds: vec![] };
    while g.atom_count() < n {
        let e = pick_element(rng);
        // heteroatoms bond only to carbon
        let hosts: Vec<usize> = (0..g.atom_count())
            .filter(|&i| free_valence(&g, i) >= 1 && (e == CARBON || g.atoms[i].element == CARBON))
            .collect();
        let Some(&host) = hosts.choose(rng) else { break };
        let room = free_valence(&g, host).min(max_valence(e));
        let order = match rng.gen::<f64>() {
            r if r < 0.03 && room >= 3 => BondOrder::Triple,
            r if r < 0.18 && room >= 2 => BondOrder::Double,
            _ => BondOrder::Single,
        };
        g.atoms.push(Atom::new(e));
        let new = g.atom_count() - 1;
        g.bonds.push(Bond { a: host, b: new, order, direction: None });
    }
    let closures = match rng.gen::<f64>() {
        r if r < 0.45 => 0,
        r if r < 0.85 => 1,
        _ => 2,
    };
    for _ in 0..closures {
        let mut candidates = vec![];
        for i in 0..g.atom_count() {
            for j in i + 1..g.atom_count() {
                let carbon_end = g.atoms[i].element == CARBON || g.atoms[j].element == CARBON;
                let ok_size = path_length(&g, i, j).is_some_and(|d| (2..=6).contains(&d));
                if carbon_end && ok_size && free_valence(&g, i) >= 1 && free_valence(&g, j) >= 1 {
                    candidates.push((i, j));
                }
            }
        }
        if let Some(&(i, j)) = candidates.choose(rng) {
            g.bonds.push(Bond { a: i, b: j, order: BondOrder::Single, direction: None });
        }
    }
    g
}

/// Tags some true tetrahedral centers with a random `@`/`@@`.
fn add_stereo(g: &mut MolGraph, rng: &mut impl Rng) {
    let adj = g.adjacency();
    for i in 0..g.atom_count() {
        let h = g.total_hydrogens(i);
        if g.atoms[i].element != CARBON || adj[i].len() + h as usize != 4 || h > 1 || rng.gen::<f64>() > 0.35 {
            continue;
        }
        if adj[i].iter().any(|&(_, b)| g.bonds[b].order != BondOrder::Single) {
            continue;
        }
        let mut tagged = g.clone();
        let atom = &mut tagged.atoms[i];
        atom.chirality = if rng.gen() { Chirality::Anticlockwise } else { Chirality::Clockwise };
        atom.hydrogens = Some(h);
        atom.stereo_refs = adj[i].iter().map(|&(w, _)| StereoRef::Atom(w)).collect();
        if h == 1 {
            atom.stereo_refs.insert(0, StereoRef::ImplicitH);
        }
        // keep the tag only when the mirror image is a different molecule
        let flipped = smiles::flip_stereocenters(&tagged);
        let this = smiles::canonicalize(&tagged);
        let differs = flipped.iter().all(|f| smiles::canonicalize(f) != this);
        if differs && this.is_ok() {
            *g = tagged;
        }
    }
}

/// `n` distinct valid molecules with full captions, deterministic in `seed`.
pub fn make_toy_corpus(n: usize, seed: u64) -> Vec<PairRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let mut g = random_molecule(&mut rng);
        if g.validate().is_err() {
            continue;
        }
        add_stereo(&mut g, &mut rng);
        let Ok(canonical) = smiles::canonicalize(&g) else { continue };
        if !seen.insert(canonical.clone()) {
            continue;
        }
        let caption = caption_of(&facts_of(&g));
        out.push(PairRecord { smiles: canonical, caption: Some(caption) });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fact_phrases_round_trip() {
        let facts = [
            Fact::ElementCount(NITROGEN, 1),
            Fact::ElementCount(OXYGEN, 1),
            Fact::ElementCount(OXYGEN, 2),
            Fact::Rings(0),
            Fact::Rings(1),
            Fact::Rings(2),
            Fact::Hydroxyl,
            Fact::Carbonyl,
            Fact::Amine,
        ];
        for f in facts {
            assert_eq!(Fact::parse(&f.to_string()), Some(f), "{f}");
        }
        assert_eq!(Fact::ElementCount(OXYGEN, 1).to_string(), "contains an oxygen atom");
        assert_eq!(Fact::ElementCount(OXYGEN, 2).to_string(), "contains 2 oxygen atoms");
        assert!(Fact::parse("is blue").is_none());
    }

    #[test]
    fn facts_of_known_molecules() {
        let g = smiles::parse("OCC(=O)NC1CC1").unwrap();
        let caption = caption_of(&facts_of(&g));
        assert_eq!(
            caption,
            "contains a nitrogen atom; contains 2 oxygen atoms; has 1 ring; has a hydroxyl group; has a carbonyl group; has an amine group"
        );
        assert!(caption_satisfied(&caption, &g));
        assert!(!caption_satisfied("contains 3 oxygen atoms", &g));
        assert!(!caption_satisfied("glows", &g));
        let acid = smiles::parse("CC(=O)O").unwrap();
        assert!(has_hydroxyl(&acid) && has_carbonyl(&acid) && !has_amine(&acid));
    }

    #[test]
    fn corpus_contract() {
        let a = make_toy_corpus(150, 3);
        assert_eq!(a, make_toy_corpus(150, 3));
        let mut canon = HashSet::new();
        for r in &a {
            let g = smiles::parse_valid(&r.smiles).unwrap();
            assert!(g.atom_count() <= MAX_HEAVY);
            let caption = r.caption.as_deref().unwrap();
            assert!(caption_satisfied(caption, &g), "{} / {caption}", r.smiles);
            for e in [NITROGEN, OXYGEN, FLUORINE, SULFUR] {
                let n = g.count_element(e);
                if n >= 2 {
                    assert!(caption.contains(&Fact::ElementCount(e, n).to_string()));
                }
            }
            assert!(canon.insert(smiles::canonicalize(&g).unwrap()));
        }
        assert!(a.iter().any(|r| r.smiles.contains('@')));
        assert!(a.iter().any(|r| r.smiles.contains('1')));
    }

    #[test]
    fn subsampling_keeps_known_clauses() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let full = "contains a nitrogen atom; has 1 ring; has an amine group";
        for _ in 0..50 {
            let s = subsample_caption(full, 0.5, &mut rng);
            assert!(!s.is_empty());
            assert!(s.split(CLAUSE_SEPARATOR).all(|c| full.contains(c)));
        }
    }
}
