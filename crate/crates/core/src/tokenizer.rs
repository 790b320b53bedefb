//! Byte-pair-encoding vocabulary over SMILES strings or caption text, and
//! fixed-length token sequences with `[SOS]`/`[EOS]`/`[PAD]` framing.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

pub const PAD: u32 = 0;
pub const SOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const NULL: u32 = 4;

const SPECIALS: [&str; 5] = ["[PAD]", "[SOS]", "[EOS]", "[UNK]", "[NULL]"];

/// Marks a word start in caption mode, so merges never need real spaces.
const WORD_MARK: char = '\u{2581}';

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("empty training corpus")]
    EmptyCorpus,
    #[error("target size {target} is below the base alphabet plus specials ({base})")]
    TargetTooSmall { target: usize, base: usize },
    #[error("sequence needs {needed} tokens but the maximum length is {max}")]
    TooLong { needed: usize, max: usize },
    #[error("maximum length {0} leaves no room for [SOS] and [EOS]")]
    LengthTooSmall(usize),
    #[error("token id {0} is outside the vocabulary")]
    BadId(u32),
    #[error("malformed vocabulary file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// How raw text is split into base symbols.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TextMode {
    /// Every character is a base symbol.
    Smiles,
    /// Whitespace-separated words; each word is prefixed with a word marker.
    Words,
}

impl TextMode {
    fn name(self) -> &'static str {
        match self {
            TextMode::Smiles => "smiles",
            TextMode::Words => "words",
        }
    }

    fn symbols(self, text: &str) -> Vec<String> {
        match self {
            TextMode::Smiles => text.chars().map(String::from).collect(),
            TextMode::Words => text
                .split_whitespace()
                .flat_map(|w| std::iter::once(WORD_MARK).chain(w.chars()))
                .map(String::from)
                .collect(),
        }
    }

    fn render(self, pieces: &str) -> String {
        match self {
            TextMode::Smiles => pieces.to_string(),
            TextMode::Words => pieces.replace(WORD_MARK, " ").trim_start().to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    mode: TextMode,
    tokens: Vec<String>,
    merges: Vec<(String, String)>,
    index: HashMap<String, u32>,
    /// (left id, right id) -> (merge rank, merged id)
    merge_rank: HashMap<(u32, u32), (usize, u32)>,
}

/// A framed token sequence: `[SOS] tokens.. [EOS] [PAD]..`, exactly `L` long.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of positions before padding, including `[SOS]` and `[EOS]`.
    pub fn content_len(&self) -> usize {
        self.ids.iter().position(|&t| t == PAD).unwrap_or(self.ids.len())
    }
}

impl Vocab {
    fn from_parts(mode: TextMode, tokens: Vec<String>, merges: Vec<(String, String)>) -> Result<Vocab, TokenizerError> {
        let index: HashMap<String, u32> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        if index.len() != tokens.len() {
            return Err(TokenizerError::Format("duplicate token".into()));
        }
        let mut merge_rank = HashMap::new();
        for (rank, (a, b)) in merges.iter().enumerate() {
            let lookup = |t: &str| {
                index
                    .get(t)
                    .copied()
                    .ok_or_else(|| TokenizerError::Format(format!("merge refers to unknown token {t}")))
            };
            let merged = lookup(&format!("{a}{b}"))?;
            merge_rank.entry((lookup(a)?, lookup(b)?)).or_insert((rank, merged));
        }
        Ok(Vocab { mode, tokens, merges, index, merge_rank })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn mode(&self) -> TextMode {
        self.mode
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    /// Merged token ids for `text`, without framing.
    pub fn tokenize_ids(&self, text: &str) -> Vec<u32> {
        let mut ids: Vec<u32> = self
            .mode
            .symbols(text)
            .iter()
            .map(|s| self.id(s).unwrap_or(UNK))
            .collect();
        loop {
            let best = ids
                .windows(2)
                .filter_map(|w| self.merge_rank.get(&(w[0], w[1])))
                .min_by_key(|(rank, _)| *rank)
                .copied();
            let Some((rank, merged)) = best else { break };
            let pair = self.merges[rank].clone();
            let (a, b) = (self.index[&pair.0], self.index[&pair.1]);
            let mut out = Vec::with_capacity(ids.len());
            let mut i = 0;
            while i < ids.len() {
                if i + 1 < ids.len() && ids[i] == a && ids[i + 1] == b {
                    out.push(merged);
                    i += 2;
                } else {
                    out.push(ids[i]);
                    i += 1;
                }
            }
            ids = out;
        }
        ids
    }

    /// Merged token strings for `text`.
    pub fn tokenize(&self, text: &str) -> Vec<String> {
        self.tokenize_ids(text)
            .into_iter()
            .map(|id| self.tokens[id as usize].clone())
            .collect()
    }

    /// Frames `text` as `[SOS] .. [EOS]` padded to `max_len`.
    pub fn encode(&self, text: &str, max_len: usize) -> Result<TokenSequence, TokenizerError> {
        if max_len < 3 {
            return Err(TokenizerError::LengthTooSmall(max_len));
        }
        let body = self.tokenize_ids(text);
        let needed = body.len() + 2;
        if needed > max_len {
            return Err(TokenizerError::TooLong { needed, max: max_len });
        }
        let mut ids = Vec::with_capacity(max_len);
        ids.push(SOS);
        ids.extend(body);
        ids.push(EOS);
        ids.resize(max_len, PAD);
        Ok(TokenSequence { ids })
    }

    /// Text between the leading `[SOS]` and the first `[EOS]`.
    pub fn decode(&self, seq: &TokenSequence) -> Result<String, TokenizerError> {
        self.decode_ids(&seq.ids)
    }

    pub fn decode_ids(&self, ids: &[u32]) -> Result<String, TokenizerError> {
        let mut pieces = String::new();
        let start = usize::from(ids.first() == Some(&SOS));
        for &id in &ids[start..] {
            let token = self.token(id).ok_or(TokenizerError::BadId(id))?;
            match id {
                EOS => break,
                PAD | SOS | NULL => {}
                _ => pieces.push_str(token),
            }
        }
        Ok(self.mode.render(&pieces))
    }

    /// Serializes as a text file: a header line, then a `[tokens]` section
    /// with one token per line, then a `[merges]` section with one
    /// space-separated pair per line.
    pub fn to_text(&self) -> String {
        let mut out = format!("#bpe-vocab v1 mode={}\n[tokens]\n", self.mode.name());
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        out.push_str("[merges]\n");
        for (a, b) in &self.merges {
            let _ = writeln!(out, "{a} {b}");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Vocab, TokenizerError> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| TokenizerError::Format("empty file".into()))?;
        let mode = match header.trim() {
            "#bpe-vocab v1 mode=smiles" => TextMode::Smiles,
            "#bpe-vocab v1 mode=words" => TextMode::Words,
            other => return Err(TokenizerError::Format(format!("bad header {other:?}"))),
        };
        if lines.next() != Some("[tokens]") {
            return Err(TokenizerError::Format("missing [tokens] section".into()));
        }
        let mut tokens = Vec::new();
        let mut merges = Vec::new();
        let mut in_merges = false;
        for line in lines {
            if !in_merges && line == "[merges]" {
                in_merges = true;
                continue;
            }
            if in_merges {
                let (a, b) = line
                    .split_once(' ')
                    .ok_or_else(|| TokenizerError::Format(format!("bad merge line {line:?}")))?;
                merges.push((a.to_string(), b.to_string()));
            } else {
                tokens.push(line.to_string());
            }
        }
        if !in_merges {
            return Err(TokenizerError::Format("missing [merges] section".into()));
        }
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS {
            return Err(TokenizerError::Format("special tokens missing or reordered".into()));
        }
        Vocab::from_parts(mode, tokens, merges)
    }

    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vocab, TokenizerError> {
        Vocab::from_text(&std::fs::read_to_string(path)?)
    }
}

/// Greedy BPE: repeatedly merge the most frequent adjacent pair (ties go to
/// the lexicographically smallest pair) until the vocabulary reaches
/// `target_size` or no pair occurs more than once.
pub fn train_bpe<S: AsRef<str>>(corpus: &[S], target_size: usize, mode: TextMode) -> Result<Vocab, TokenizerError> {
    if corpus.is_empty() {
        return Err(TokenizerError::EmptyCorpus);
    }
    let mut word_counts: HashMap<Vec<String>, usize> = HashMap::new();
    for text in corpus {
        *word_counts.entry(mode.symbols(text.as_ref())).or_default() += 1;
    }
    let mut alphabet: Vec<String> = word_counts.keys().flatten().cloned().collect();
    alphabet.sort();
    alphabet.dedup();
    alphabet.retain(|s| !SPECIALS.contains(&s.as_str()));

    let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    tokens.extend(alphabet);
    if target_size < tokens.len() {
        return Err(TokenizerError::TargetTooSmall { target: target_size, base: tokens.len() });
    }

    // sorted for deterministic iteration
    let mut words: Vec<(Vec<String>, usize)> = word_counts.into_iter().collect();
    words.sort();
    let mut merges = Vec::new();
    while tokens.len() < target_size {
        let mut pairs: HashMap<(&str, &str), usize> = HashMap::new();
        for (w, c) in &words {
            for p in w.windows(2) {
                *pairs.entry((p[0].as_str(), p[1].as_str())).or_default() += c;
            }
        }
        let best = pairs
            .into_iter()
            .filter(|&(_, c)| c >= 2)
            .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)));
        let Some(((a, b), _)) = best else { break };
        let (a, b) = (a.to_string(), b.to_string());
        let merged = format!("{a}{b}");
        for (w, _) in &mut words {
            let mut out = Vec::with_capacity(w.len());
            let mut i = 0;
            while i < w.len() {
                if i + 1 < w.len() && w[i] == a && w[i + 1] == b {
                    out.push(merged.clone());
                    i += 2;
                } else {
                    out.push(std::mem::take(&mut w[i]));
                    i += 1;
                }
            }
            *w = out;
        }
        if !tokens.contains(&merged) {
            tokens.push(merged);
        }
        merges.push((a, b));
    }
    Vocab::from_parts(mode, tokens, merges)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn corpus() -> Vec<&'static str> {
        vec!["CCO", "CCN", "CC(=O)O", "c1ccccc1", "CCCl", "OCC(Br)C"]
    }

    #[test]
    fn first_merge_is_most_frequent_pair() {
        // "CC" occurs twice; every other pair once
        let base = train_bpe(&["CCO", "CCN"], 8, TextMode::Smiles).unwrap();
        assert!(base.merges().is_empty());
        let v = train_bpe(&["CCO", "CCN"], 9, TextMode::Smiles).unwrap();
        assert_eq!(v.merges(), &[("C".to_string(), "C".to_string())]);
        assert_eq!(v.token(8), Some("CC"));
    }

    #[test]
    fn no_repeating_pair_stops_early() {
        let v = train_bpe(&["CO"], 50, TextMode::Smiles).unwrap();
        assert!(v.merges().is_empty());
        assert_eq!(v.len(), 7);
    }

    #[test]
    fn training_is_deterministic() {
        let a = train_bpe(&corpus(), 20, TextMode::Smiles).unwrap();
        let b = train_bpe(&corpus(), 20, TextMode::Smiles).unwrap();
        assert_eq!(a, b);
        assert!(a.len() <= 20);
    }

    #[test]
    fn errors() {
        let empty: Vec<&str> = vec![];
        assert!(matches!(train_bpe(&empty, 10, TextMode::Smiles), Err(TokenizerError::EmptyCorpus)));
        assert!(matches!(
            train_bpe(&["CCO"], 4, TextMode::Smiles),
            Err(TokenizerError::TargetTooSmall { .. })
        ));
        let v = train_bpe(&corpus(), 20, TextMode::Smiles).unwrap();
        assert!(matches!(v.encode("CCCCCCCCCCCCCCCCCCCCCCO", 4), Err(TokenizerError::TooLong { .. })));
        assert!(matches!(v.encode("C", 2), Err(TokenizerError::LengthTooSmall(2))));
        let bad = TokenSequence { ids: vec![SOS, 999, EOS] };
        assert!(matches!(v.decode(&bad), Err(TokenizerError::BadId(999))));
    }

    #[test]
    fn framing_and_unknowns() {
        let v = train_bpe(&corpus(), 20, TextMode::Smiles).unwrap();
        let seq = v.encode("C§", 8).unwrap();
        assert_eq!(seq.len(), 8);
        assert_eq!(seq.ids[0], SOS);
        assert!(seq.ids.contains(&UNK));
        assert_eq!(v.decode(&TokenSequence { ids: vec![SOS, EOS] }).unwrap(), "");
        let cc = v.id("CC").unwrap();
        let o = v.id("O").unwrap();
        assert_eq!(v.decode(&TokenSequence { ids: vec![SOS, cc, o, EOS] }).unwrap(), "CCO");
    }

    #[test]
    fn caption_mode_round_trip() {
        let caps = ["contains 2 oxygen atoms", "contains a hydroxyl group", "contains 1 ring"];
        let v = train_bpe(&caps, 60, TextMode::Words).unwrap();
        for c in caps {
            let seq = v.encode(c, 40).unwrap();
            assert_eq!(v.decode(&seq).unwrap(), c);
        }
        assert!(v.tokens().iter().all(|t| !t.contains(' ')));
    }

    #[test]
    fn file_round_trip() {
        let v = train_bpe(&corpus(), 24, TextMode::Smiles).unwrap();
        let back = Vocab::from_text(&v.to_text()).unwrap();
        assert_eq!(v, back);
        assert!(Vocab::from_text("garbage").is_err());
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(s in "[CNO()=1c]{1,20}") {
            let v = train_bpe(&corpus(), 30, TextMode::Smiles).unwrap();
            let seq = v.encode(&s, 32).unwrap();
            prop_assert_eq!(v.decode(&seq).unwrap(), s.clone());
            // re-encoding the decoded text reproduces the sequence
            prop_assert_eq!(v.encode(&v.decode(&seq).unwrap(), 32).unwrap(), seq.clone());
            // padding never changes the decoded text
            let mut longer = seq.clone();
            longer.ids.extend([PAD, PAD]);
            prop_assert_eq!(v.decode(&longer).unwrap(), s);
        }
    }
}
