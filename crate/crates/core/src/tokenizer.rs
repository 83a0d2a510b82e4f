//! SMILES / p-SMILES tokenization and vocabulary management.
//!
//! Two splitting rules are supported:
//!
//! * `regex` — atom-level splitting: two-letter halogens (`Cl`, `Br`),
//!   bracket atoms (`[nH]`, `[Si]`, `[*]`), `%NN` ring closures, single
//!   organic-subset atoms, bonds, ring digits, branch parens, `.` and `*`.
//!   Characters outside the grammar fall back to single-character tokens, so
//!   concatenating the tokens always reproduces the (trimmed) input.
//! * `punct` — a punctuation-based WordPiece scheme: every ASCII punctuation
//!   character is its own token and the remaining runs are greedily
//!   decomposed against the vocabulary with `##` continuation pieces.
//!
//! The vocabulary reserves five special tokens at fixed ids 0..=4 and always
//! contains the digits `1`..`9` and the polymerization point `*`.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io;
use std::path::Path;

use regex::Regex;
use std::sync::OnceLock;
use thiserror::Error;

/// Reserved tokens, in id order 0..=4.
pub const SPECIAL_TOKENS: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const CLS_ID: usize = 2;
pub const SEP_ID: usize = 3;
pub const MASK_ID: usize = 4;

/// Number of reserved special tokens (also the first non-special id).
pub const NUM_SPECIALS: usize = 5;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("empty input: SMILES string is empty after trimming")]
    EmptyInput,
    #[error("empty corpus: no usable lines")]
    EmptyCorpus,
    #[error("bad max_len {0}: must be >= 3 ([CLS] + payload + [SEP])")]
    BadMaxLen(usize),
    #[error("bad vocabulary file {path}: {reason}")]
    BadVocabFile { path: String, reason: String },
    #[error("io error: {0}")]
    Io(#[from] io::Error),
}

/// Which splitting rule a vocabulary was built for / a tokenize call uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rule {
    Regex,
    Punct,
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Rule::Regex => write!(f, "regex"),
            Rule::Punct => write!(f, "punct"),
        }
    }
}

impl std::str::FromStr for Rule {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "regex" => Ok(Rule::Regex),
            "punct" => Ok(Rule::Punct),
            other => Err(format!("unknown rule '{other}' (expected regex|punct)")),
        }
    }
}

/// Ordered token list with dense ids and the reserved specials at 0..=4.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    id_of: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from an explicit token list. The list must start
    /// with the five specials in reserved order and contain no duplicates.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, TokenizerError> {
        if tokens.len() < NUM_SPECIALS {
            return Err(TokenizerError::BadVocabFile {
                path: "<memory>".into(),
                reason: format!("only {} tokens, need at least the 5 specials", tokens.len()),
            });
        }
        for (i, special) in SPECIAL_TOKENS.iter().enumerate() {
            if tokens[i] != *special {
                return Err(TokenizerError::BadVocabFile {
                    path: "<memory>".into(),
                    reason: format!("token {} must be {special}, found {}", i, tokens[i]),
                });
            }
        }
        let mut id_of = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if id_of.insert(tok.clone(), id).is_some() {
                return Err(TokenizerError::BadVocabFile {
                    path: "<memory>".into(),
                    reason: format!("duplicate token {tok:?}"),
                });
            }
        }
        if !id_of.contains_key("*") {
            return Err(TokenizerError::BadVocabFile {
                path: "<memory>".into(),
                reason: "polymerization point '*' missing".into(),
            });
        }
        Ok(Vocabulary { tokens, id_of })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // specials are always present
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.id_of.get(token).copied()
    }

    /// Id for a token, falling back to `[UNK]`.
    pub fn id_or_unk(&self, token: &str) -> usize {
        self.id(token).unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn contains(&self, token: &str) -> bool {
        self.id_of.contains_key(token)
    }

    pub fn is_special_id(id: usize) -> bool {
        id < NUM_SPECIALS
    }

    /// One token per line, line number = id.
    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        let mut out = String::new();
        for tok in &self.tokens {
            out.push_str(tok);
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        let text = fs::read_to_string(path)?;
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        Self::from_tokens(tokens).map_err(|e| match e {
            TokenizerError::BadVocabFile { reason, .. } => TokenizerError::BadVocabFile {
                path: path.display().to_string(),
                reason,
            },
            other => other,
        })
    }
}

/// Encoded id sequence with `[CLS]`/`[SEP]` framing and `[PAD]` fill.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub attention_mask: Vec<u8>,
    /// Count of non-[PAD] positions (framing included).
    pub length: usize,
}

fn atom_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        // Ordered alternation; two-letter halogens must precede single atoms.
        Regex::new(
            r"\[[^\]]*\]|Br|Cl|%\d\d|[BCNOPSFIbcnops]|\d|[=#\-/\\:~$]|[().*]",
        )
        .expect("atom regex compiles")
    })
}

/// Atom-level regex tokenization. Concatenating the returned tokens
/// reproduces the trimmed input exactly; characters the grammar does not
/// recognize become single-character tokens.
pub fn tokenize_regex(smiles: &str) -> Result<Vec<String>, TokenizerError> {
    let s = smiles.trim();
    if s.is_empty() {
        return Err(TokenizerError::EmptyInput);
    }
    let mut tokens = Vec::new();
    let mut pos = 0;
    for m in atom_regex().find_iter(s) {
        if m.start() > pos {
            for ch in s[pos..m.start()].chars() {
                tokens.push(ch.to_string());
            }
        }
        tokens.push(m.as_str().to_string());
        pos = m.end();
    }
    if pos < s.len() {
        for ch in s[pos..].chars() {
            tokens.push(ch.to_string());
        }
    }
    Ok(tokens)
}

fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation()
}

/// Splits a line into punctuation characters and non-punctuation runs.
fn punct_units(s: &str) -> Vec<&str> {
    let mut units = Vec::new();
    let mut run_start = None;
    for (i, c) in s.char_indices() {
        if is_punct(c) {
            if let Some(start) = run_start.take() {
                units.push(&s[start..i]);
            }
            units.push(&s[i..i + c.len_utf8()]);
        } else if run_start.is_none() {
            run_start = Some(i);
        }
    }
    if let Some(start) = run_start {
        units.push(&s[start..]);
    }
    units
}

/// Greedy longest-match WordPiece decomposition of one non-punctuation run.
/// Returns `None` when some part of the run cannot be matched, in which case
/// the whole run maps to `[UNK]`.
fn wordpiece(run: &str, vocab: &Vocabulary) -> Option<Vec<String>> {
    let chars: Vec<char> = run.chars().collect();
    let mut pieces = Vec::new();
    let mut start = 0;
    while start < chars.len() {
        let mut end = chars.len();
        let mut matched = None;
        while end > start {
            let sub: String = chars[start..end].iter().collect();
            let candidate = if start == 0 { sub } else { format!("##{sub}") };
            if vocab.contains(&candidate) {
                matched = Some((candidate, end));
                break;
            }
            end -= 1;
        }
        match matched {
            Some((piece, e)) => {
                pieces.push(piece);
                start = e;
            }
            None => return None,
        }
    }
    Some(pieces)
}

/// Punctuation-based WordPiece tokenization against a vocabulary built for
/// the `punct` rule. Unknown punctuation and undecomposable runs map to
/// `[UNK]`.
pub fn tokenize_punct(smiles: &str, vocab: &Vocabulary) -> Result<Vec<String>, TokenizerError> {
    let s = smiles.trim();
    if s.is_empty() {
        return Err(TokenizerError::EmptyInput);
    }
    let mut tokens = Vec::new();
    for unit in punct_units(s) {
        let first = unit.chars().next().expect("non-empty unit");
        if unit.chars().count() == 1 && is_punct(first) {
            if vocab.contains(unit) {
                tokens.push(unit.to_string());
            } else {
                tokens.push(SPECIAL_TOKENS[UNK_ID].to_string());
            }
        } else {
            match wordpiece(unit, vocab) {
                Some(pieces) => tokens.extend(pieces),
                None => tokens.push(SPECIAL_TOKENS[UNK_ID].to_string()),
            }
        }
    }
    Ok(tokens)
}

/// Tokens a single line contributes to a `punct`-rule vocabulary:
/// punctuation characters, whole runs, and single-character pieces (bare and
/// `##`-continued) so greedy decomposition of unseen runs stays total.
fn observe_punct(line: &str, into: &mut BTreeSet<String>) {
    for unit in punct_units(line) {
        let first = unit.chars().next().expect("non-empty unit");
        if unit.chars().count() == 1 && is_punct(first) {
            into.insert(unit.to_string());
        } else {
            into.insert(unit.to_string());
            for c in unit.chars() {
                into.insert(c.to_string());
                into.insert(format!("##{c}"));
            }
        }
    }
}

/// Builds a vocabulary over a corpus under the given rule: the five specials
/// at ids 0..=4, then digits 1..9, `*`, and every distinct observed token,
/// sorted lexicographically by code point. The resulting size is logged so
/// corpus-dependent vocabularies can be compared across datasets.
pub fn build_vocab<I, S>(corpus: I, rule: Rule) -> Result<Vocabulary, TokenizerError>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut observed: BTreeSet<String> = BTreeSet::new();
    for d in 1..=9u32 {
        observed.insert(d.to_string());
    }
    observed.insert("*".to_string());

    let mut saw_any = false;
    for line in corpus {
        let line = line.as_ref().trim();
        if line.is_empty() {
            continue;
        }
        saw_any = true;
        match rule {
            Rule::Regex => {
                for tok in tokenize_regex(line)? {
                    observed.insert(tok);
                }
            }
            Rule::Punct => observe_punct(line, &mut observed),
        }
    }
    if !saw_any {
        return Err(TokenizerError::EmptyCorpus);
    }

    let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
    tokens.extend(observed);
    let vocab = Vocabulary::from_tokens(tokens)?;
    log::info!("built {rule} vocabulary with {} tokens", vocab.len());
    Ok(vocab)
}

/// Frames, truncates, and pads token strings into a fixed-length sequence:
/// `[CLS] payload [SEP] [PAD]...` with the payload truncated to
/// `max_len - 2` and out-of-vocabulary tokens mapped to `[UNK]`.
pub fn encode(
    vocab: &Vocabulary,
    tokens: &[String],
    max_len: usize,
) -> Result<TokenSequence, TokenizerError> {
    if max_len < 3 {
        return Err(TokenizerError::BadMaxLen(max_len));
    }
    let payload = tokens.len().min(max_len - 2);
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS_ID);
    for tok in &tokens[..payload] {
        ids.push(vocab.id_or_unk(tok));
    }
    ids.push(SEP_ID);
    let length = ids.len();
    ids.resize(max_len, PAD_ID);
    let mut attention_mask = vec![0u8; max_len];
    for m in attention_mask.iter_mut().take(length) {
        *m = 1;
    }
    Ok(TokenSequence {
        ids,
        attention_mask,
        length,
    })
}

/// Maps ids back to token strings, dropping `[CLS]`, `[SEP]` and `[PAD]`.
pub fn decode(vocab: &Vocabulary, seq: &TokenSequence) -> Vec<String> {
    seq.ids
        .iter()
        .filter(|&&id| id != CLS_ID && id != SEP_ID && id != PAD_ID)
        .filter_map(|&id| vocab.token(id).map(str::to_string))
        .collect()
}

/// Normalizes a p-SMILES line: both `*` and `[*]` occur in the wild for
/// polymerization points; keep a single spelling.
pub fn normalize_psmiles(line: &str) -> String {
    line.trim().replace("[*]", "*")
}

/// Reads a corpus file: UTF-8, one SMILES per line, `#`-prefixed comment
/// lines and blank lines skipped, `[*]` normalized to `*`.
pub fn read_corpus(path: &Path) -> Result<Vec<String>, TokenizerError> {
    let text = fs::read_to_string(path)?;
    let lines: Vec<String> = text
        .lines()
        .map(normalize_psmiles)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .collect();
    if lines.is_empty() {
        return Err(TokenizerError::EmptyCorpus);
    }
    Ok(lines)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn regex_splits_polymer_amide() {
        assert_eq!(
            tokenize_regex("*CC(=O)N*").unwrap(),
            toks(&["*", "C", "C", "(", "=", "O", ")", "N", "*"])
        );
    }

    #[test]
    fn regex_keeps_chlorine_whole() {
        assert_eq!(
            tokenize_regex("Clc1ccccc1").unwrap(),
            toks(&["Cl", "c", "1", "c", "c", "c", "c", "c", "1"])
        );
    }

    #[test]
    fn regex_single_atom() {
        assert_eq!(tokenize_regex("C").unwrap(), toks(&["C"]));
    }

    #[test]
    fn regex_bracket_atoms_and_ring_percent() {
        assert_eq!(
            tokenize_regex("[nH]c%12").unwrap(),
            toks(&["[nH]", "c", "%12"])
        );
        assert_eq!(tokenize_regex("[Si]").unwrap(), toks(&["[Si]"]));
        assert_eq!(tokenize_regex("[*]").unwrap(), toks(&["[*]"]));
    }

    #[test]
    fn regex_rejects_empty() {
        assert!(matches!(
            tokenize_regex("   "),
            Err(TokenizerError::EmptyInput)
        ));
    }

    #[test]
    fn regex_unknown_glyphs_become_char_tokens() {
        assert_eq!(tokenize_regex("CxC").unwrap(), toks(&["C", "x", "C"]));
    }

    #[test]
    fn punct_splits_branch() {
        let vocab = build_vocab(["C(F)F"], Rule::Punct).unwrap();
        assert_eq!(
            tokenize_punct("C(F)F", &vocab).unwrap(),
            toks(&["C", "(", "F", ")", "F"])
        );
    }

    #[test]
    fn punct_star_alone() {
        let vocab = build_vocab(["*CC*"], Rule::Punct).unwrap();
        assert_eq!(tokenize_punct("*", &vocab).unwrap(), toks(&["*"]));
    }

    #[test]
    fn punct_unknown_glyph_maps_to_unk() {
        let vocab = build_vocab(["CC"], Rule::Punct).unwrap();
        let out = tokenize_punct("CxC", &vocab).unwrap();
        assert!(out.contains(&"[UNK]".to_string()), "{out:?}");
    }

    #[test]
    fn punct_greedy_prefers_whole_runs() {
        let vocab = build_vocab(["CC"], Rule::Punct).unwrap();
        assert_eq!(tokenize_punct("CC", &vocab).unwrap(), toks(&["CC"]));
        // Unseen longer run decomposes with continuation marking.
        assert_eq!(
            tokenize_punct("CCC", &vocab).unwrap(),
            toks(&["CC", "##C"])
        );
    }

    #[test]
    fn vocab_fixed_classes_and_size() {
        // corpus ["CC"]: specials + 1..9 + "*" + "C" = 16 tokens.
        let vocab = build_vocab(["CC"], Rule::Regex).unwrap();
        assert_eq!(vocab.len(), 16);
        for (i, s) in SPECIAL_TOKENS.iter().enumerate() {
            assert_eq!(vocab.id(s), Some(i));
        }
        assert_eq!(vocab.id("[PAD]"), Some(0));
        assert!(vocab.contains("*"));
        for d in 1..=9u32 {
            assert!(vocab.contains(&d.to_string()));
        }
        assert!(vocab.contains("C"));
    }

    #[test]
    fn vocab_rejects_empty_corpus() {
        let empty: [&str; 0] = [];
        assert!(matches!(
            build_vocab(empty, Rule::Regex),
            Err(TokenizerError::EmptyCorpus)
        ));
    }

    #[test]
    fn encode_frames_and_pads() {
        let vocab = build_vocab(["CCO"], Rule::Regex).unwrap();
        let seq = encode(&vocab, &toks(&["C", "C", "O"]), 8).unwrap();
        let c = vocab.id("C").unwrap();
        let o = vocab.id("O").unwrap();
        assert_eq!(seq.ids, vec![CLS_ID, c, c, o, SEP_ID, PAD_ID, PAD_ID, PAD_ID]);
        assert_eq!(seq.attention_mask, vec![1, 1, 1, 1, 1, 0, 0, 0]);
        assert_eq!(seq.length, 5);
    }

    #[test]
    fn encode_empty_payload() {
        let vocab = build_vocab(["C"], Rule::Regex).unwrap();
        let seq = encode(&vocab, &[], 3).unwrap();
        assert_eq!(seq.ids, vec![CLS_ID, SEP_ID, PAD_ID]);
        assert_eq!(seq.attention_mask, vec![1, 1, 0]);
    }

    #[test]
    fn encode_truncates() {
        let vocab = build_vocab(["C"], Rule::Regex).unwrap();
        let tokens = vec!["C".to_string(); 100];
        let seq = encode(&vocab, &tokens, 10).unwrap();
        assert_eq!(seq.length, 10);
        let payload: Vec<_> = decode(&vocab, &seq);
        assert_eq!(payload.len(), 8);
    }

    #[test]
    fn encode_rejects_tiny_max_len() {
        let vocab = build_vocab(["C"], Rule::Regex).unwrap();
        assert!(matches!(
            encode(&vocab, &[], 2),
            Err(TokenizerError::BadMaxLen(2))
        ));
    }

    #[test]
    fn vocab_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let vocab = build_vocab(["*CC(=O)N*", "Clc1ccccc1"], Rule::Regex).unwrap();
        vocab.save(&path).unwrap();
        let loaded = Vocabulary::load(&path).unwrap();
        assert_eq!(vocab, loaded);
    }

    #[test]
    fn vocab_file_rejects_bad_specials() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        fs::write(&path, "[PAD]\n[UNK]\n[SEP]\n[CLS]\n[MASK]\n*\n").unwrap();
        assert!(matches!(
            Vocabulary::load(&path),
            Err(TokenizerError::BadVocabFile { .. })
        ));
    }

    #[test]
    fn normalize_bracket_star() {
        assert_eq!(normalize_psmiles(" [*]CC[*] "), "*CC*");
    }

    #[test]
    fn corpus_skips_comments_and_blanks() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.txt");
        fs::write(&path, "# header\nCC\n\n[*]N[*]\n").unwrap();
        let lines = read_corpus(&path).unwrap();
        assert_eq!(lines, vec!["CC".to_string(), "*N*".to_string()]);
    }

    proptest! {
        // Round-trip holds for arbitrary strings because unmatched characters
        // fall back to single-character tokens.
        #[test]
        fn regex_round_trips(s in "\\PC{1,60}") {
            let trimmed = s.trim().to_string();
            prop_assume!(!trimmed.is_empty());
            let tokens = tokenize_regex(&s).unwrap();
            prop_assert_eq!(tokens.concat(), trimmed);
        }

        #[test]
        fn vocab_is_order_independent(mut lines in proptest::collection::vec("[A-Za-z0-9()=#*\\[\\]]{1,12}", 1..8)) {
            let forward = build_vocab(lines.iter(), Rule::Regex).unwrap();
            lines.reverse();
            let backward = build_vocab(lines.iter(), Rule::Regex).unwrap();
            prop_assert_eq!(forward, backward);
        }

        #[test]
        fn encode_ids_in_range_and_decode_recovers(s in "[BCNOFPSbcnops0-9()=#*]{1,40}", max_len in 3usize..32) {
            let vocab = build_vocab([s.as_str()], Rule::Regex).unwrap();
            let tokens = tokenize_regex(&s).unwrap();
            let seq = encode(&vocab, &tokens, max_len).unwrap();
            for &id in &seq.ids {
                prop_assert!(id < vocab.len());
            }
            let truncated: Vec<String> = tokens.into_iter().take(max_len - 2).collect();
            prop_assert_eq!(decode(&vocab, &seq), truncated);
        }
    }
}
