//! Molecular graph: atoms, bonds, hydrogens, tetrahedral stereo.

use super::element::Element;
use super::SmilesError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Chirality {
    None,
    /// `@`: anticlockwise looking from the first neighbor.
    Anticlockwise,
    /// `@@`
    Clockwise,
}

impl Chirality {
    pub fn flipped(self) -> Chirality {
        match self {
            Chirality::None => Chirality::None,
            Chirality::Anticlockwise => Chirality::Clockwise,
            Chirality::Clockwise => Chirality::Anticlockwise,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BondOrder {
    Single,
    Double,
    Triple,
    Aromatic,
}

impl BondOrder {
    /// Contribution to an atom's bond-order sum. Aromatic bonds count as one;
    /// the extra pi electron is accounted for per atom.
    pub fn valence(self) -> u8 {
        match self {
            BondOrder::Single | BondOrder::Aromatic => 1,
            BondOrder::Double => 2,
            BondOrder::Triple => 3,
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            BondOrder::Single => 1,
            BondOrder::Double => 2,
            BondOrder::Triple => 3,
            BondOrder::Aromatic => 4,
        }
    }
}

/// `/` or `\`, kept as an annotation relative to the bond's `a -> b` direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BondDirection {
    Up,
    Down,
}

impl BondDirection {
    pub fn reversed(self) -> BondDirection {
        match self {
            BondDirection::Up => BondDirection::Down,
            BondDirection::Down => BondDirection::Up,
        }
    }
}

/// An entry of a stereocenter's neighbor ordering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StereoRef {
    Atom(usize),
    ImplicitH,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Atom {
    pub element: Element,
    pub aromatic: bool,
    pub charge: i8,
    /// Explicit hydrogen count from a bracket atom; `None` means implicit.
    pub hydrogens: Option<u8>,
    pub isotope: Option<u16>,
    pub chirality: Chirality,
    /// Neighbor order the chirality tag refers to; empty unless chiral.
    pub stereo_refs: Vec<StereoRef>,
}

impl Atom {
    pub fn new(element: Element) -> Atom {
        Atom {
            element,
            aromatic: false,
            charge: 0,
            hydrogens: None,
            isotope: None,
            chirality: Chirality::None,
            stereo_refs: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bond {
    pub a: usize,
    pub b: usize,
    pub order: BondOrder,
    pub direction: Option<BondDirection>,
}

impl Bond {
    pub fn other(&self, atom: usize) -> usize {
        if self.a == atom {
            self.b
        } else {
            self.a
        }
    }
}

/// The structure behind a SMILES string.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MolGraph {
    pub atoms: Vec<Atom>,
    pub bonds: Vec<Bond>,
}

impl MolGraph {
    pub fn atom_count(&self) -> usize {
        self.atoms.len()
    }

    pub fn bond_count(&self) -> usize {
        self.bonds.len()
    }

    /// Adjacency as `(neighbor, bond index)` lists.
    pub fn adjacency(&self) -> Vec<Vec<(usize, usize)>> {
        let mut adj = vec![Vec::new(); self.atoms.len()];
        for (k, bond) in self.bonds.iter().enumerate() {
            adj[bond.a].push((bond.b, k));
            adj[bond.b].push((bond.a, k));
        }
        adj
    }

    pub fn bond_between(&self, i: usize, j: usize) -> Option<&Bond> {
        self.bonds
            .iter()
            .find(|b| (b.a == i && b.b == j) || (b.a == j && b.b == i))
    }

    pub fn degree(&self, atom: usize) -> usize {
        self.bonds
            .iter()
            .filter(|b| b.a == atom || b.b == atom)
            .count()
    }

    fn bond_sum(&self, atom: usize) -> (u8, usize) {
        let mut sum = 0u8;
        let mut aromatic = 0;
        for b in self.bonds.iter().filter(|b| b.a == atom || b.b == atom) {
            sum += b.order.valence();
            if b.order == BondOrder::Aromatic {
                aromatic += 1;
            }
        }
        (sum, aromatic)
    }

    /// Hydrogens an unbracketed atom of this kind would carry here: fill up to
    /// the lowest allowed valence. `None` if the bonds exceed every valence.
    pub fn default_hydrogens(&self, atom: usize) -> Option<u8> {
        let a = &self.atoms[atom];
        let valences = a.element.charged_valences(a.charge);
        let (sum, _) = self.bond_sum(atom);
        if valences.is_empty() {
            return Some(0);
        }
        if a.aromatic {
            // one valence unit is spent on the pi system, unless the atom is
            // a lone-pair donor (furan o, thiophene s)
            if let Some(v) = valences.iter().find(|&&v| v > sum) {
                return Some(v - sum - 1);
            }
            return valences.iter().find(|&&v| v >= sum).map(|_| 0);
        }
        valences.iter().find(|&&v| v >= sum).map(|v| v - sum)
    }

    /// Total hydrogen count (explicit if bracketed, else resolved by valence).
    pub fn total_hydrogens(&self, atom: usize) -> u8 {
        match self.atoms[atom].hydrogens {
            Some(h) => h,
            None => self.default_hydrogens(atom).unwrap_or(0),
        }
    }

    /// Per-atom ring membership (atom incident to a non-bridge bond).
    pub fn ring_atoms(&self) -> Vec<bool> {
        let bridges = self.bridges();
        let mut in_ring = vec![false; self.atoms.len()];
        for (k, b) in self.bonds.iter().enumerate() {
            if !bridges[k] {
                in_ring[b.a] = true;
                in_ring[b.b] = true;
            }
        }
        in_ring
    }

    /// `true` for each bond whose removal disconnects the graph.
    pub fn bridges(&self) -> Vec<bool> {
        let n = self.atoms.len();
        let adj = self.adjacency();
        let mut disc = vec![usize::MAX; n];
        let mut low = vec![0usize; n];
        let mut is_bridge = vec![false; self.bonds.len()];
        let mut timer = 0;
        for start in 0..n {
            if disc[start] != usize::MAX {
                continue;
            }
            // iterative DFS: (node, parent bond, next neighbor index)
            let mut stack: Vec<(usize, usize, usize)> = vec![(start, usize::MAX, 0)];
            disc[start] = timer;
            low[start] = timer;
            timer += 1;
            while let Some(top) = stack.len().checked_sub(1) {
                let (v, pbond, next) = stack[top];
                if next < adj[v].len() {
                    let (w, bk) = adj[v][next];
                    stack[top].2 += 1;
                    if bk == pbond {
                        continue;
                    }
                    if disc[w] == usize::MAX {
                        disc[w] = timer;
                        low[w] = timer;
                        timer += 1;
                        stack.push((w, bk, 0));
                    } else {
                        low[v] = low[v].min(disc[w]);
                    }
                } else {
                    stack.pop();
                    if let Some(&(u, _, _)) = stack.last() {
                        low[u] = low[u].min(low[v]);
                        if low[v] > disc[u] {
                            is_bridge[pbond] = true;
                        }
                    }
                }
            }
        }
        is_bridge
    }

    /// Number of connected components.
    pub fn components(&self) -> usize {
        let n = self.atoms.len();
        let adj = self.adjacency();
        let mut seen = vec![false; n];
        let mut count = 0;
        for s in 0..n {
            if seen[s] {
                continue;
            }
            count += 1;
            let mut stack = vec![s];
            seen[s] = true;
            while let Some(v) = stack.pop() {
                for &(w, _) in &adj[v] {
                    if !seen[w] {
                        seen[w] = true;
                        stack.push(w);
                    }
                }
            }
        }
        count
    }

    /// Cyclomatic number: independent ring count.
    pub fn ring_count(&self) -> usize {
        (self.bonds.len() + self.components()).saturating_sub(self.atoms.len())
    }

    /// Checks every structural and valence invariant.
    pub fn validate(&self) -> Result<(), SmilesError> {
        let n = self.atoms.len();
        if n == 0 {
            return Err(SmilesError::Empty);
        }
        let mut seen = std::collections::HashSet::new();
        for b in &self.bonds {
            if b.a >= n || b.b >= n || b.a == b.b {
                return Err(SmilesError::InvalidGraph(format!(
                    "bond {}-{} out of range or self-loop",
                    b.a, b.b
                )));
            }
            if !seen.insert((b.a.min(b.b), b.a.max(b.b))) {
                return Err(SmilesError::InvalidGraph(format!(
                    "duplicate bond {}-{}",
                    b.a, b.b
                )));
            }
        }
        let in_ring = self.ring_atoms();
        for (i, atom) in self.atoms.iter().enumerate() {
            if atom.aromatic && !in_ring[i] {
                return Err(SmilesError::Valence {
                    atom: i,
                    reason: "aromatic atom outside a ring".into(),
                });
            }
            let valences = atom.element.charged_valences(atom.charge);
            let (sum, _) = self.bond_sum(i);
            match atom.hydrogens {
                None => {
                    if self.default_hydrogens(i).is_none() {
                        return Err(SmilesError::Valence {
                            atom: i,
                            reason: format!("{} bonds exceed the valence of {}", sum, atom.element),
                        });
                    }
                }
                Some(h) => {
                    let total = sum + h;
                    if !valences.is_empty() && total > *valences.last().unwrap() {
                        return Err(SmilesError::Valence {
                            atom: i,
                            reason: format!("valence {} exceeds the maximum for {}", total, atom.element),
                        });
                    }
                    if element_has_no_valence_left(atom.element, atom.charge) && total > 0 {
                        return Err(SmilesError::Valence {
                            atom: i,
                            reason: format!("{} cannot form bonds with charge {}", atom.element, atom.charge),
                        });
                    }
                }
            }
        }
        Ok(())
    }

    /// Relabel atoms: new index of old atom `i` is `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> MolGraph {
        assert_eq!(perm.len(), self.atoms.len());
        let mut atoms = vec![None; self.atoms.len()];
        for (i, atom) in self.atoms.iter().enumerate() {
            let mut a = atom.clone();
            for r in &mut a.stereo_refs {
                if let StereoRef::Atom(j) = r {
                    *j = perm[*j];
                }
            }
            atoms[perm[i]] = Some(a);
        }
        let bonds = self
            .bonds
            .iter()
            .map(|b| Bond {
                a: perm[b.a],
                b: perm[b.b],
                order: b.order,
                direction: b.direction,
            })
            .collect();
        MolGraph {
            atoms: atoms.into_iter().map(Option::unwrap).collect(),
            bonds,
        }
    }

    /// Count of atoms of the given element.
    pub fn count_element(&self, element: Element) -> usize {
        self.atoms.iter().filter(|a| a.element == element).count()
    }
}

fn element_has_no_valence_left(element: Element, charge: i8) -> bool {
    !element.valences().is_empty() && element.charged_valences(charge).is_empty()
}

/// Parity of the permutation taking `from` to `to` (both over the same items).
/// `None` when the two lists are not permutations of each other.
pub(crate) fn permutation_parity(from: &[StereoRef], to: &[StereoRef]) -> Option<bool> {
    if from.len() != to.len() {
        return None;
    }
    let mut idx = Vec::with_capacity(from.len());
    for r in from {
        idx.push(to.iter().position(|x| x == r)?);
    }
    let mut seen = vec![false; idx.len()];
    let mut odd = false;
    for s in 0..idx.len() {
        if seen[s] {
            continue;
        }
        let mut len = 0;
        let mut j = s;
        while !seen[j] {
            seen[j] = true;
            j = idx[j];
            len += 1;
        }
        if len % 2 == 0 {
            odd = !odd;
        }
    }
    Some(odd)
}

/// Element, aromatic, charge, hydrogens, isotope, degree, chiral.
type AtomLabel = (u8, bool, i8, u8, Option<u16>, usize, bool);

/// Label compared during isomorphism search.
fn atom_label(g: &MolGraph, i: usize) -> AtomLabel {
    let a = &g.atoms[i];
    (
        a.element.atomic_number(),
        a.aromatic,
        a.charge,
        g.total_hydrogens(i),
        a.isotope,
        g.degree(i),
        a.chirality != Chirality::None,
    )
}

/// Graph isomorphism including tetrahedral stereo; directional-bond
/// annotations are ignored. Backtracking search, suited to small molecules.
pub fn is_isomorphic(a: &MolGraph, b: &MolGraph) -> bool {
    let n = a.atoms.len();
    if n != b.atoms.len() || a.bonds.len() != b.bonds.len() {
        return false;
    }
    if n == 0 {
        return true;
    }
    let la: Vec<_> = (0..n).map(|i| atom_label(a, i)).collect();
    let lb: Vec<_> = (0..n).map(|i| atom_label(b, i)).collect();
    let mut sa = la.clone();
    let mut sb = lb.clone();
    sa.sort();
    sb.sort();
    if sa != sb {
        return false;
    }
    let adj_a = a.adjacency();
    let order_b: Vec<Vec<Option<BondOrder>>> = {
        let mut m = vec![vec![None; n]; n];
        for bd in &b.bonds {
            m[bd.a][bd.b] = Some(bd.order);
            m[bd.b][bd.a] = Some(bd.order);
        }
        m
    };
    // visit order: BFS over each component of `a`
    let mut visit = Vec::with_capacity(n);
    let mut seen = vec![false; n];
    for s in 0..n {
        if seen[s] {
            continue;
        }
        seen[s] = true;
        let mut queue = std::collections::VecDeque::from([s]);
        while let Some(v) = queue.pop_front() {
            visit.push(v);
            for &(w, _) in &adj_a[v] {
                if !seen[w] {
                    seen[w] = true;
                    queue.push_back(w);
                }
            }
        }
    }
    let mut map = vec![usize::MAX; n];
    let mut used = vec![false; n];

    fn stereo_ok(a: &MolGraph, b: &MolGraph, map: &[usize]) -> bool {
        for (i, atom) in a.atoms.iter().enumerate() {
            if atom.chirality == Chirality::None {
                continue;
            }
            let other = &b.atoms[map[i]];
            let mapped: Vec<StereoRef> = atom
                .stereo_refs
                .iter()
                .map(|r| match r {
                    StereoRef::Atom(j) => StereoRef::Atom(map[*j]),
                    StereoRef::ImplicitH => StereoRef::ImplicitH,
                })
                .collect();
            match permutation_parity(&mapped, &other.stereo_refs) {
                Some(odd) => {
                    let expected = if odd { atom.chirality.flipped() } else { atom.chirality };
                    if expected != other.chirality {
                        return false;
                    }
                }
                None => return false,
            }
        }
        true
    }

    #[allow(clippy::too_many_arguments)]
    fn search(
        depth: usize,
        visit: &[usize],
        a: &MolGraph,
        b: &MolGraph,
        adj_a: &[Vec<(usize, usize)>],
        order_b: &[Vec<Option<BondOrder>>],
        la: &[AtomLabel],
        lb: &[AtomLabel],
        map: &mut [usize],
        used: &mut [bool],
    ) -> bool {
        if depth == visit.len() {
            return stereo_ok(a, b, map);
        }
        let v = visit[depth];
        for cand in 0..lb.len() {
            if used[cand] || la[v] != lb[cand] {
                continue;
            }
            let consistent = adj_a[v].iter().all(|&(w, bk)| {
                map[w] == usize::MAX || order_b[cand][map[w]] == Some(a.bonds[bk].order)
            });
            if !consistent {
                continue;
            }
            map[v] = cand;
            used[cand] = true;
            if search(depth + 1, visit, a, b, adj_a, order_b, la, lb, map, used) {
                return true;
            }
            map[v] = usize::MAX;
            used[cand] = false;
        }
        false
    }

    search(0, &visit, a, b, &adj_a, &order_b, &la, &lb, &mut map, &mut used)
}
