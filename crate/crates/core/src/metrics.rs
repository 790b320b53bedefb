//! Text-to-molecule evaluation: validity, BLEU, Levenshtein distance, Morgan
//! fingerprint Tanimoto similarity, and exact match.

use std::collections::HashMap;
use std::hash::Hash;

use thiserror::Error;

use crate::smiles::{self, MolGraph, SmilesError};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error(transparent)]
    InvalidGraph(#[from] SmilesError),
    #[error("fingerprint widths differ ({0} vs {1})")]
    WidthMismatch(usize, usize),
    #[error("fingerprint width {0} is not a power of two")]
    BadWidth(usize),
    #[error("nothing to evaluate")]
    EmptyInput,
}

/// Fixed-width bitset of hashed circular atom environments.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fingerprint {
    words: Vec<u64>,
    width: usize,
    radius: usize,
}

impl Fingerprint {
    pub fn empty(width: usize, radius: usize) -> Result<Fingerprint, MetricsError> {
        if !width.is_power_of_two() {
            return Err(MetricsError::BadWidth(width));
        }
        Ok(Fingerprint { words: vec![0; width.div_ceil(64)], width, radius })
    }

    pub fn from_bits(bits: impl IntoIterator<Item = usize>, width: usize) -> Result<Fingerprint, MetricsError> {
        let mut fp = Fingerprint::empty(width, 0)?;
        for b in bits {
            fp.set(b);
        }
        Ok(fp)
    }

    pub fn set(&mut self, bit: usize) {
        let bit = bit % self.width;
        self.words[bit / 64] |= 1 << (bit % 64);
    }

    pub fn get(&self, bit: usize) -> bool {
        bit < self.width && self.words[bit / 64] >> (bit % 64) & 1 == 1
    }

    pub fn count_ones(&self) -> u32 {
        self.words.iter().map(|w| w.count_ones()).sum()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn ones(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.width).filter(|&b| self.get(b))
    }
}

fn mix(h: u64, x: u64) -> u64 {
    // splitmix64 finalizer over the running state
    let mut z = h ^ x.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(h << 6).wrapping_add(h >> 2);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Morgan (ECFP-style) fingerprint: each atom starts from a hash of its
/// local invariants and is re-hashed with its sorted neighbor identifiers
/// `radius` times; every identifier seen sets bit `id mod width`.
pub fn morgan_fingerprint(g: &MolGraph, radius: usize, width: usize) -> Result<Fingerprint, MetricsError> {
    g.validate()?;
    let mut fp = Fingerprint::empty(width, radius)?;
    let adj = g.adjacency();
    let in_ring = g.ring_atoms();
    let mut ids: Vec<u64> = (0..g.atom_count())
        .map(|i| {
            let a = &g.atoms[i];
            [
                a.element.atomic_number() as u64,
                g.degree(i) as u64,
                g.total_hydrogens(i) as u64,
                (a.charge as i64 + 128) as u64,
                a.isotope.unwrap_or(0) as u64,
                in_ring[i] as u64,
                a.aromatic as u64,
            ]
            .iter()
            .fold(0x5151_5151, |h, &x| mix(h, x))
        })
        .collect();
    for &id in &ids {
        fp.set((id % width as u64) as usize);
    }
    for round in 1..=radius {
        let next: Vec<u64> = (0..ids.len())
            .map(|i| {
                let mut nb: Vec<(u64, u64)> = adj[i]
                    .iter()
                    .map(|&(w, k)| (g.bonds[k].order.code() as u64, ids[w]))
                    .collect();
                nb.sort_unstable();
                nb.iter()
                    .fold(mix(round as u64, ids[i]), |h, &(b, id)| mix(mix(h, b), id))
            })
            .collect();
        for &id in &next {
            fp.set((id % width as u64) as usize);
        }
        ids = next;
    }
    Ok(fp)
}

/// |a AND b| / |a OR b|; 1.0 when both are empty.
pub fn tanimoto(a: &Fingerprint, b: &Fingerprint) -> Result<f64, MetricsError> {
    if a.width != b.width {
        return Err(MetricsError::WidthMismatch(a.width, b.width));
    }
    let (mut inter, mut union) = (0u32, 0u32);
    for (x, y) in a.words.iter().zip(&b.words) {
        inter += (x & y).count_ones();
        union += (x | y).count_ones();
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Character-level edit distance with unit costs.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for i in 1..=a.len() {
        cur[0] = i;
        for j in 1..=b.len() {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn ngram_counts<T: Eq + Hash + Clone>(seq: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if seq.len() >= n {
        for w in seq.windows(n) {
            *counts.entry(w).or_default() += 1;
        }
    }
    counts
}

/// Sentence BLEU with uniform 1-4-gram weights. An order with no clipped
/// matches uses (matches + 1) / (candidates + 1), so a candidate shorter than
/// n contributes 1 for that order.
pub fn bleu<T: Eq + Hash + Clone>(candidate: &[T], reference: &[T]) -> f64 {
    if candidate.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let cand = ngram_counts(candidate, n);
        let refc = ngram_counts(reference, n);
        let total: usize = cand.values().sum();
        let matched: usize = cand
            .iter()
            .map(|(g, &c)| c.min(refc.get(g).copied().unwrap_or(0)))
            .sum();
        let p = if matched == 0 {
            1.0 / (total as f64 + 1.0)
        } else {
            matched as f64 / total as f64
        };
        log_sum += p.ln() / 4.0;
    }
    let (c, r) = (candidate.len() as f64, reference.len() as f64);
    let bp = if c >= r { 1.0 } else { (1.0 - r / c).exp() };
    bp * log_sum.exp()
}

/// Averages over one evaluation set. FCD is not computed.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub samples: usize,
    pub valid: usize,
    pub validity: f64,
    pub bleu: f64,
    pub levenshtein: f64,
    pub morgan_fts: f64,
    pub exact_match: f64,
}

impl MetricReport {
    pub fn to_key_values(&self) -> String {
        format!(
            "samples={}\nvalid={}\nvalidity={:.6}\nbleu={:.6}\nlevenshtein={:.6}\nmorgan_fts={:.6}\nexact_match={:.6}\nfcd=n/a\n",
            self.samples, self.valid, self.validity, self.bleu, self.levenshtein, self.morgan_fts, self.exact_match
        )
    }

    pub fn csv_header() -> &'static str {
        "samples,valid,validity,bleu,levenshtein,morgan_fts,exact_match,fcd"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},n/a",
            self.samples, self.valid, self.validity, self.bleu, self.levenshtein, self.morgan_fts, self.exact_match
        )
    }
}

/// Sum after sorting so the mean does not depend on input order.
fn stable_mean(mut xs: Vec<f64>) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.sort_by(f64::total_cmp);
    xs.iter().sum::<f64>() / xs.len() as f64
}

struct PairScore {
    valid: bool,
    bleu: f64,
    levenshtein: f64,
    fts: Option<f64>,
    exact: bool,
}

fn score_pair(generated: &str, reference: &str, tokenize: &dyn Fn(&str) -> Vec<String>) -> PairScore {
    let bleu_v = bleu(&tokenize(generated), &tokenize(reference));
    let lev = levenshtein(generated, reference) as f64;
    let gen_graph = smiles::parse_valid(generated).ok();
    let ref_graph = smiles::parse_valid(reference).ok();
    let (fts, exact) = match (&gen_graph, &ref_graph) {
        (Some(g), Some(r)) => {
            let fts = morgan_fingerprint(g, 2, 2048)
                .and_then(|a| tanimoto(&a, &morgan_fingerprint(r, 2, 2048)?))
                .ok();
            let exact = smiles::canonicalize(g).ok() == smiles::canonicalize(r).ok();
            (fts, exact)
        }
        _ => (None, false),
    };
    PairScore { valid: gen_graph.is_some(), bleu: bleu_v, levenshtein: lev, fts, exact }
}

/// Scores (generated, reference) pairs. Validity is over all generated
/// strings; the remaining metrics are over pairs whose generated string is
/// valid. When nothing is valid, BLEU and Levenshtein fall back to all pairs
/// and the structural metrics are zero. Exact match compares canonical forms.
pub fn evaluate<S: AsRef<str>>(
    pairs: &[(S, S)],
    tokenize: &dyn Fn(&str) -> Vec<String>,
) -> Result<MetricReport, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let scores: Vec<PairScore> = pairs
        .iter()
        .map(|(g, r)| score_pair(g.as_ref(), r.as_ref(), tokenize))
        .collect();
    let valid: Vec<&PairScore> = scores.iter().filter(|s| s.valid).collect();
    let pool: Vec<&PairScore> = if valid.is_empty() { scores.iter().collect() } else { valid.clone() };
    Ok(MetricReport {
        samples: pairs.len(),
        valid: valid.len(),
        validity: valid.len() as f64 / pairs.len() as f64,
        bleu: stable_mean(pool.iter().map(|s| s.bleu).collect()),
        levenshtein: stable_mean(pool.iter().map(|s| s.levenshtein).collect()),
        morgan_fts: stable_mean(valid.iter().map(|s| s.fts.unwrap_or(0.0)).collect()),
        exact_match: if valid.is_empty() {
            0.0
        } else {
            valid.iter().filter(|s| s.exact).count() as f64 / valid.len() as f64
        },
    })
}

/// Character tokenizer, for callers without a trained vocabulary.
pub fn char_tokens(s: &str) -> Vec<String> {
    s.chars().map(String::from).collect()
}
