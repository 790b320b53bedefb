//! SMILES emission driven by an atom ranking: canonical and randomized spellings.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{permutation_parity, BondDirection, BondOrder, Chirality, MolGraph, StereoRef};
use super::SmilesError;

/// Upper bound on tie-breaking leaves explored during canonicalization.
const MAX_CANON_LEAVES: usize = 128;

/// Writes `g` by depth-first traversal. Each component starts at its
/// lowest-ranked atom; neighbors are visited in ascending rank.
pub fn write_with_ranks(g: &MolGraph, ranks: &[usize]) -> String {
    let n = g.atoms.len();
    let adj = g.adjacency();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| ranks[i]);
    let mut sorted_adj = adj.clone();
    for list in &mut sorted_adj {
        list.sort_by_key(|&(w, _)| ranks[w]);
    }

    // spanning forest and ring-closure bonds
    let mut visited = vec![false; n];
    let mut parent_bond = vec![usize::MAX; n];
    let mut children: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
    let mut ring_bonds: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
    let mut is_tree = vec![false; g.bonds.len()];
    let mut roots = Vec::new();
    for &root in &order {
        if visited[root] {
            continue;
        }
        roots.push(root);
        dfs_tree(root, &sorted_adj, &mut visited, &mut parent_bond, &mut children, &mut is_tree);
    }
    for (k, b) in g.bonds.iter().enumerate() {
        if !is_tree[k] {
            ring_bonds[b.a].push((b.b, k));
            ring_bonds[b.b].push((b.a, k));
        }
    }
    for list in &mut ring_bonds {
        list.sort_by_key(|&(w, _)| ranks[w]);
    }

    let mut out = String::new();
    let mut state = EmitState {
        g,
        children: &children,
        ring_bonds: &ring_bonds,
        emitted: vec![false; n],
        open_digits: std::collections::HashMap::new(),
        used_digits: Vec::new(),
    };
    for (ci, &root) in roots.iter().enumerate() {
        if ci > 0 {
            out.push('.');
        }
        state.emit(root, None, &mut out);
    }
    out
}

fn dfs_tree(
    root: usize,
    adj: &[Vec<(usize, usize)>],
    visited: &mut [bool],
    parent_bond: &mut [usize],
    children: &mut [Vec<(usize, usize)>],
    is_tree: &mut [bool],
) {
    visited[root] = true;
    let mut stack = vec![(root, 0usize)];
    while let Some(top) = stack.len().checked_sub(1) {
        let (v, next) = stack[top];
        if next < adj[v].len() {
            stack[top].1 += 1;
            let (w, k) = adj[v][next];
            if !visited[w] {
                visited[w] = true;
                parent_bond[w] = k;
                is_tree[k] = true;
                children[v].push((w, k));
                stack.push((w, 0));
            }
        } else {
            stack.pop();
        }
    }
}

struct EmitState<'a> {
    g: &'a MolGraph,
    children: &'a [Vec<(usize, usize)>],
    ring_bonds: &'a [Vec<(usize, usize)>],
    emitted: Vec<bool>,
    /// bond index -> ring digit
    open_digits: std::collections::HashMap<usize, u32>,
    used_digits: Vec<bool>,
}

impl EmitState<'_> {
    fn alloc_digit(&mut self) -> u32 {
        let d = match self.used_digits.iter().position(|u| !u) {
            Some(d) => d,
            None => {
                self.used_digits.push(false);
                self.used_digits.len() - 1
            }
        };
        self.used_digits[d] = true;
        d as u32 + 1
    }

    fn emit(&mut self, v: usize, from: Option<(usize, usize)>, out: &mut String) {
        let g = self.g;
        if let Some((u, k)) = from {
            out.push_str(&bond_symbol(g, k, u, v));
        }
        self.emitted[v] = true;

        // ring-closure digits at this atom: closings first, then openings
        let mut closings = Vec::new();
        let mut openings = Vec::new();
        for &(w, k) in &self.ring_bonds[v] {
            if self.emitted[w] && self.open_digits.contains_key(&k) {
                closings.push((w, k));
            } else {
                openings.push((w, k));
            }
        }
        let mut ring_text = String::new();
        let mut written_order: Vec<StereoRef> = Vec::new();
        if let Some((u, _)) = from {
            written_order.push(StereoRef::Atom(u));
        }
        let hydrogens = g.total_hydrogens(v);
        let bracket = needs_bracket(g, v);
        if bracket && hydrogens > 0 {
            written_order.push(StereoRef::ImplicitH);
        }
        let mut freed = Vec::new();
        for &(w, k) in &closings {
            let d = self.open_digits.remove(&k).unwrap();
            freed.push(d);
            push_digit(&mut ring_text, d);
            written_order.push(StereoRef::Atom(w));
        }
        for &(w, k) in &openings {
            let d = self.alloc_digit();
            self.open_digits.insert(k, d);
            ring_text.push_str(&bond_symbol(g, k, v, w));
            push_digit(&mut ring_text, d);
            written_order.push(StereoRef::Atom(w));
        }
        for d in freed {
            self.used_digits[d as usize - 1] = false;
        }
        for &(w, _) in &self.children[v] {
            written_order.push(StereoRef::Atom(w));
        }

        let atom = &g.atoms[v];
        let chirality = if atom.chirality == Chirality::None {
            Chirality::None
        } else {
            match permutation_parity(&atom.stereo_refs, &written_order) {
                Some(true) => atom.chirality.flipped(),
                Some(false) => atom.chirality,
                // inconsistent stereo bookkeeping: keep the tag as written
                None => atom.chirality,
            }
        };
        out.push_str(&atom_text(g, v, bracket, hydrogens, chirality));
        out.push_str(&ring_text);

        let kids = self.children[v].clone();
        let last = kids.len().saturating_sub(1);
        for (i, &(w, k)) in kids.iter().enumerate() {
            if i < last {
                out.push('(');
                self.emit(w, Some((v, k)), out);
                out.push(')');
            } else {
                self.emit(w, Some((v, k)), out);
            }
        }
    }
}

fn push_digit(out: &mut String, d: u32) {
    if d < 10 {
        out.push(char::from_digit(d, 10).unwrap());
    } else {
        out.push_str(&format!("%{d:02}"));
    }
}

fn bond_symbol(g: &MolGraph, k: usize, from: usize, to: usize) -> String {
    let bond = &g.bonds[k];
    let both_aromatic = g.atoms[from].aromatic && g.atoms[to].aromatic;
    match bond.order {
        BondOrder::Single => match bond.direction {
            Some(dir) => {
                let dir = if bond.a == from { dir } else { dir.reversed() };
                match dir {
                    BondDirection::Up => "/".into(),
                    BondDirection::Down => "\\".into(),
                }
            }
            None if both_aromatic => "-".into(),
            None => String::new(),
        },
        BondOrder::Double => "=".into(),
        BondOrder::Triple => "#".into(),
        BondOrder::Aromatic if both_aromatic => String::new(),
        BondOrder::Aromatic => ":".into(),
    }
}

fn needs_bracket(g: &MolGraph, v: usize) -> bool {
    let a = &g.atoms[v];
    if !a.element.is_organic_subset()
        || a.charge != 0
        || a.isotope.is_some()
        || a.chirality != Chirality::None
        || (a.aromatic && !a.element.can_be_aromatic())
    {
        return true;
    }
    match a.hydrogens {
        None => false,
        Some(h) => g.default_hydrogens(v) != Some(h),
    }
}

fn atom_text(g: &MolGraph, v: usize, bracket: bool, hydrogens: u8, chirality: Chirality) -> String {
    let a = &g.atoms[v];
    let symbol = if a.aromatic {
        a.element.symbol().to_ascii_lowercase()
    } else {
        a.element.symbol().to_string()
    };
    if !bracket {
        return symbol;
    }
    let mut s = String::from("[");
    if let Some(iso) = a.isotope {
        s.push_str(&iso.to_string());
    }
    s.push_str(&symbol);
    match chirality {
        Chirality::None => {}
        Chirality::Anticlockwise => s.push('@'),
        Chirality::Clockwise => s.push_str("@@"),
    }
    if hydrogens > 0 {
        s.push('H');
        if hydrogens > 1 {
            s.push_str(&hydrogens.to_string());
        }
    }
    match a.charge {
        0 => {}
        1 => s.push('+'),
        -1 => s.push('-'),
        c if c > 0 => s.push_str(&format!("+{c}")),
        c => s.push_str(&format!("-{}", -c)),
    }
    s.push(']');
    s
}

/// Label-independent atom invariant used to seed the canonical ranking.
fn seed_invariant(g: &MolGraph, in_ring: &[bool], i: usize) -> (u8, bool, usize, u8, i8, u16, bool, bool) {
    let a = &g.atoms[i];
    (
        a.element.atomic_number(),
        a.aromatic,
        g.degree(i),
        g.total_hydrogens(i),
        a.charge,
        a.isotope.unwrap_or(0),
        a.chirality != Chirality::None,
        in_ring[i],
    )
}

fn dense_ranks<K: Ord + Clone>(keys: &[K]) -> Vec<usize> {
    let mut sorted: Vec<K> = keys.to_vec();
    sorted.sort();
    sorted.dedup();
    keys.iter()
        .map(|k| sorted.binary_search(k).unwrap())
        .collect()
}

fn class_count(ranks: &[usize]) -> usize {
    let mut r = ranks.to_vec();
    r.sort_unstable();
    r.dedup();
    r.len()
}

/// Refine ranks by neighborhood until the partition stops splitting.
fn refine(ranks: &[usize], adj: &[Vec<(usize, usize)>], g: &MolGraph) -> Vec<usize> {
    let mut ranks = ranks.to_vec();
    let mut classes = class_count(&ranks);
    loop {
        let keys: Vec<(usize, Vec<(usize, u8)>)> = (0..ranks.len())
            .map(|i| {
                let mut nb: Vec<(usize, u8)> = adj[i]
                    .iter()
                    .map(|&(w, k)| (ranks[w], g.bonds[k].order.code()))
                    .collect();
                nb.sort_unstable();
                (ranks[i], nb)
            })
            .collect();
        let next = dense_ranks(&keys);
        let next_classes = class_count(&next);
        ranks = next;
        if next_classes == classes {
            return ranks;
        }
        classes = next_classes;
    }
}

/// Canonical atom ranks: iterative neighborhood refinement, then
/// individualization of tied atoms. Among tie-breaking branches the one
/// producing the lexicographically smallest string wins.
pub fn canonical_ranks(g: &MolGraph) -> Vec<usize> {
    let n = g.atoms.len();
    if n == 0 {
        return Vec::new();
    }
    let adj = g.adjacency();
    let in_ring = g.ring_atoms();
    let seeds: Vec<_> = (0..n).map(|i| seed_invariant(g, &in_ring, i)).collect();
    let ranks = refine(&dense_ranks(&seeds), &adj, g);
    let mut best: Option<(String, Vec<usize>)> = None;
    let mut leaves = 0usize;
    individualize(g, &adj, ranks, &mut best, &mut leaves);
    best.expect("at least one leaf").1
}

fn individualize(
    g: &MolGraph,
    adj: &[Vec<(usize, usize)>],
    ranks: Vec<usize>,
    best: &mut Option<(String, Vec<usize>)>,
    leaves: &mut usize,
) {
    let n = ranks.len();
    if class_count(&ranks) == n {
        *leaves += 1;
        let s = write_with_ranks(g, &ranks);
        if best.as_ref().is_none_or(|(b, _)| s < *b) {
            *best = Some((s, ranks));
        }
        return;
    }
    // smallest rank shared by more than one atom
    let mut counts = vec![0usize; n];
    for &r in &ranks {
        counts[r] += 1;
    }
    let target = (0..n).find(|&r| counts[r] > 1).unwrap();
    let members: Vec<usize> = (0..n).filter(|&i| ranks[i] == target).collect();
    for (k, &m) in members.iter().enumerate() {
        if k > 0 && *leaves >= MAX_CANON_LEAVES {
            break;
        }
        // split the class: the chosen atom keeps the lower rank
        let keys: Vec<(usize, u8)> = (0..n)
            .map(|i| (ranks[i], if i == m || ranks[i] != target { 0 } else { 1 }))
            .collect();
        let split = refine(&dense_ranks(&keys), adj, g);
        individualize(g, adj, split, best, leaves);
    }
}

/// Deterministic canonical SMILES, identical across atom orderings of
/// isomorphic graphs.
pub fn canonicalize(g: &MolGraph) -> Result<String, SmilesError> {
    g.validate()?;
    Ok(write_with_ranks(g, &canonical_ranks(g)))
}

/// A randomly rooted, randomly ordered spelling of `g`.
pub fn randomize(g: &MolGraph, seed: u64) -> Result<String, SmilesError> {
    g.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(randomize_with(g, &mut rng))
}

/// Same as [`randomize`] but draws from a caller-owned generator.
pub fn randomize_with<R: Rng + ?Sized>(g: &MolGraph, rng: &mut R) -> String {
    let n = g.atoms.len();
    let mut ranks: Vec<usize> = (0..n).collect();
    ranks.shuffle(rng);
    write_with_ranks(g, &ranks)
}
