//! Shared tokenizer: character-level or byte-pair, with a content-hash id.
//!
//! All probability sources in a pipeline must agree on the tokenizer; the
//! id makes the check cheap. The vocabulary file is text-based, one token
//! per line, with a small header carrying the specials and the id.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Result, SentraError};

pub const BOS: u32 = 0;
pub const PAD: u32 = 1;
pub const UNK: u32 = 2;
pub const NUM_SPECIALS: u32 = 3;

/// End-of-word marker used internally by the byte-pair mode.
const WORD_END: &str = "\u{2581}";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenizerMode {
    Char,
    Bpe,
}

impl TokenizerMode {
    fn as_str(&self) -> &'static str {
        match self {
            TokenizerMode::Char => "char",
            TokenizerMode::Bpe => "bpe",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Tokenizer {
    mode: TokenizerMode,
    vocab: Vec<String>,
    lookup: HashMap<String, u32>,
    merges: Vec<(String, String)>,
    merge_rank: HashMap<(String, String), usize>,
    id: String,
}

impl Tokenizer {
    /// Deterministic training: char mode collects the alphabet; bpe mode
    /// greedily merges the most frequent adjacent pair (ties broken
    /// lexicographically) until the vocabulary target is reached.
    pub fn train(corpus: &[String], mode: TokenizerMode, target_vocab: usize) -> Result<Self> {
        if corpus.iter().all(|d| d.trim().is_empty()) {
            return Err(SentraError::Data("tokenizer training corpus is empty".into()));
        }
        for doc in corpus {
            if doc.contains(WORD_END) {
                return Err(SentraError::Data(format!(
                    "corpus contains the reserved word-end marker {WORD_END:?}"
                )));
            }
        }
        match mode {
            TokenizerMode::Char => Self::train_char(corpus),
            TokenizerMode::Bpe => Self::train_bpe(corpus, target_vocab),
        }
    }

    fn train_char(corpus: &[String]) -> Result<Self> {
        let mut chars: Vec<String> = corpus
            .iter()
            .flat_map(|d| d.chars())
            .map(|c| c.to_string())
            .collect();
        chars.sort();
        chars.dedup();
        let vocab = Self::with_specials(chars);
        Ok(Self::assemble(TokenizerMode::Char, vocab, Vec::new()))
    }

    fn train_bpe(corpus: &[String], target_vocab: usize) -> Result<Self> {
        // word type -> count, in first-seen order for determinism
        let mut word_order: Vec<Vec<String>> = Vec::new();
        let mut word_counts: Vec<u64> = Vec::new();
        let mut seen: HashMap<String, usize> = HashMap::new();
        for doc in corpus {
            for word in doc.split_whitespace() {
                if let Some(&i) = seen.get(word) {
                    word_counts[i] += 1;
                } else {
                    let mut symbols: Vec<String> =
                        word.chars().map(|c| c.to_string()).collect();
                    symbols.push(WORD_END.to_string());
                    seen.insert(word.to_string(), word_order.len());
                    word_order.push(symbols);
                    word_counts.push(1);
                }
            }
        }
        let mut alphabet: Vec<String> = word_order.iter().flatten().cloned().collect();
        alphabet.sort();
        alphabet.dedup();
        let base = alphabet.len() + NUM_SPECIALS as usize;
        if target_vocab < base {
            return Err(SentraError::contract(format!(
                "target vocab {target_vocab} below alphabet + specials ({base})"
            )));
        }

        let mut merges: Vec<(String, String)> = Vec::new();
        let mut extra: Vec<String> = Vec::new();
        while base + merges.len() < target_vocab {
            let mut pair_counts: HashMap<(String, String), u64> = HashMap::new();
            for (symbols, &count) in word_order.iter().zip(word_counts.iter()) {
                for w in symbols.windows(2) {
                    *pair_counts
                        .entry((w[0].clone(), w[1].clone()))
                        .or_insert(0) += count;
                }
            }
            // best = highest count, then lexicographically smallest pair
            let best = pair_counts
                .into_iter()
                .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(&a.0)));
            let Some(((left, right), count)) = best else { break };
            if count < 2 {
                break; // nothing worth merging
            }
            let merged = format!("{left}{right}");
            for symbols in word_order.iter_mut() {
                let mut j = 0;
                while j + 1 < symbols.len() {
                    if symbols[j] == left && symbols[j + 1] == right {
                        symbols[j] = merged.clone();
                        symbols.remove(j + 1);
                    } else {
                        j += 1;
                    }
                }
            }
            extra.push(merged);
            merges.push((left, right));
        }
        let mut vocab_tail = alphabet;
        vocab_tail.extend(extra);
        let vocab = Self::with_specials(vocab_tail);
        Ok(Self::assemble(TokenizerMode::Bpe, vocab, merges))
    }

    fn with_specials(tail: Vec<String>) -> Vec<String> {
        let mut vocab = vec!["<bos>".to_string(), "<pad>".to_string(), "<unk>".to_string()];
        vocab.extend(tail);
        vocab
    }

    fn assemble(mode: TokenizerMode, vocab: Vec<String>, merges: Vec<(String, String)>) -> Self {
        let lookup: HashMap<String, u32> = vocab
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        let merge_rank: HashMap<(String, String), usize> = merges
            .iter()
            .enumerate()
            .map(|(i, p)| (p.clone(), i))
            .collect();
        let id = Self::content_id(mode, &vocab, &merges);
        Tokenizer {
            mode,
            vocab,
            lookup,
            merges,
            merge_rank,
            id,
        }
    }

    fn content_id(mode: TokenizerMode, vocab: &[String], merges: &[(String, String)]) -> String {
        let mut hasher = Sha256::new();
        hasher.update(mode.as_str().as_bytes());
        for t in vocab {
            hasher.update([0u8]);
            hasher.update(t.as_bytes());
        }
        for (l, r) in merges {
            hasher.update([1u8]);
            hasher.update(l.as_bytes());
            hasher.update([2u8]);
            hasher.update(r.as_bytes());
        }
        hex::encode(&hasher.finalize()[..8])
    }

    pub fn tokenizer_id(&self) -> &str {
        &self.id
    }

    pub fn mode(&self) -> TokenizerMode {
        self.mode
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.vocab.get(id as usize).map(|s| s.as_str())
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        match self.mode {
            TokenizerMode::Char => text
                .chars()
                .map(|c| {
                    self.lookup
                        .get(c.to_string().as_str())
                        .copied()
                        .unwrap_or(UNK)
                })
                .collect(),
            TokenizerMode::Bpe => {
                let mut out = Vec::new();
                for word in text.split_whitespace() {
                    self.encode_word(word, &mut out);
                }
                out
            }
        }
    }

    fn encode_word(&self, word: &str, out: &mut Vec<u32>) {
        let mut symbols: Vec<String> = word.chars().map(|c| c.to_string()).collect();
        symbols.push(WORD_END.to_string());
        loop {
            let mut best: Option<(usize, usize)> = None; // (rank, position)
            for j in 0..symbols.len().saturating_sub(1) {
                let key = (symbols[j].clone(), symbols[j + 1].clone());
                if let Some(&rank) = self.merge_rank.get(&key) {
                    if best.map_or(true, |(r, _)| rank < r) {
                        best = Some((rank, j));
                    }
                }
            }
            let Some((_, j)) = best else { break };
            let merged = format!("{}{}", symbols[j], symbols[j + 1]);
            symbols[j] = merged;
            symbols.remove(j + 1);
        }
        for s in symbols {
            out.push(self.lookup.get(s.as_str()).copied().unwrap_or(UNK));
        }
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut text = String::new();
        for &id in ids {
            let tok = self.vocab.get(id as usize).ok_or_else(|| {
                SentraError::Index(format!("token id {id} out of vocab {}", self.vocab.len()))
            })?;
            match id {
                BOS | PAD => {}
                UNK => text.push('\u{FFFD}'),
                _ => match self.mode {
                    TokenizerMode::Char => text.push_str(tok),
                    TokenizerMode::Bpe => text.push_str(&tok.replace(WORD_END, " ")),
                },
            }
        }
        if self.mode == TokenizerMode::Bpe {
            while text.ends_with(' ') {
                text.pop();
            }
        }
        Ok(text)
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    // ---- persistence --------------------------------------------------------

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push_str("#sentra-tokenizer v1\n");
        out.push_str(&format!("#mode {}\n", self.mode.as_str()));
        out.push_str(&format!("#id {}\n", self.id));
        out.push_str(&format!("#specials BOS={BOS} PAD={PAD} UNK={UNK}\n"));
        out.push_str(&format!("#vocab {}\n", self.vocab.len()));
        for t in &self.vocab {
            out.push_str(&escape(t));
            out.push('\n');
        }
        out.push_str(&format!("#merges {}\n", self.merges.len()));
        for (l, r) in &self.merges {
            out.push_str(&format!("{}\t{}\n", escape(l), escape(r)));
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let data = fs::read_to_string(path)?;
        let mut lines = data.lines();
        let bad = |why: &str| SentraError::Corrupt(format!("{}: {why}", path.display()));
        if lines.next() != Some("#sentra-tokenizer v1") {
            return Err(bad("bad header"));
        }
        let mode = match lines.next() {
            Some("#mode char") => TokenizerMode::Char,
            Some("#mode bpe") => TokenizerMode::Bpe,
            _ => return Err(bad("bad mode line")),
        };
        let id_line = lines.next().ok_or_else(|| bad("missing id"))?;
        let stored_id = id_line
            .strip_prefix("#id ")
            .ok_or_else(|| bad("bad id line"))?
            .to_string();
        let specials = lines.next().ok_or_else(|| bad("missing specials"))?;
        if specials != format!("#specials BOS={BOS} PAD={PAD} UNK={UNK}") {
            return Err(bad("unexpected specials"));
        }
        let vocab_n: usize = lines
            .next()
            .and_then(|l| l.strip_prefix("#vocab "))
            .and_then(|n| n.parse().ok())
            .ok_or_else(|| bad("bad vocab count"))?;
        let mut vocab = Vec::with_capacity(vocab_n);
        for _ in 0..vocab_n {
            let line = lines.next().ok_or_else(|| bad("truncated vocab"))?;
            vocab.push(unescape(line).map_err(|w| bad(&w))?);
        }
        let merges_n: usize = lines
            .next()
            .and_then(|l| l.strip_prefix("#merges "))
            .and_then(|n| n.parse().ok())
            .ok_or_else(|| bad("bad merges count"))?;
        let mut merges = Vec::with_capacity(merges_n);
        for _ in 0..merges_n {
            let line = lines.next().ok_or_else(|| bad("truncated merges"))?;
            let (l, r) = line.split_once('\t').ok_or_else(|| bad("bad merge line"))?;
            merges.push((unescape(l).map_err(|w| bad(&w))?, unescape(r).map_err(|w| bad(&w))?));
        }
        let tok = Self::assemble(mode, vocab, merges);
        if tok.id != stored_id {
            return Err(bad("tokenizer id does not match contents"));
        }
        Ok(tok)
    }
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            ' ' => out.push_str("\\s"),
            _ => out.push(c),
        }
    }
    out
}

fn unescape(s: &str) -> std::result::Result<String, String> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('n') => out.push('\n'),
            Some('t') => out.push('\t'),
            Some('s') => out.push(' '),
            other => return Err(format!("bad escape \\{other:?}")),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(docs: &[&str]) -> Vec<String> {
        docs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn char_mode_on_abab_has_five_tokens() {
        let tok = Tokenizer::train(&corpus(&["abab"]), TokenizerMode::Char, 0).unwrap();
        assert_eq!(tok.vocab_size(), 5); // BOS, PAD, UNK, a, b
        assert_eq!(tok.token(3), Some("a"));
        assert_eq!(tok.token(4), Some("b"));
    }

    #[test]
    fn char_mode_round_trips_ids() {
        let tok = Tokenizer::train(&corpus(&["abab"]), TokenizerMode::Char, 0).unwrap();
        let ids = vec![3u32, 4];
        assert_eq!(tok.encode(&tok.decode(&ids).unwrap()), ids);
    }

    #[test]
    fn char_mode_round_trips_text_with_spaces() {
        let tok = Tokenizer::train(&corpus(&["hello world"]), TokenizerMode::Char, 0).unwrap();
        let text = "world hello";
        assert_eq!(tok.decode(&tok.encode(text)).unwrap(), text);
    }

    #[test]
    fn bpe_first_merge_on_runs_of_a_is_aa() {
        let tok =
            Tokenizer::train(&corpus(&["aaaa aaaa aaaa aaaa"]), TokenizerMode::Bpe, 16).unwrap();
        assert_eq!(tok.merges()[0], ("a".to_string(), "a".to_string()));
        assert!(tok.vocab.iter().any(|t| t == "aa"));
    }

    #[test]
    fn bpe_round_trips_in_vocab_text() {
        let docs = corpus(&[
            "the cat sat on the mat",
            "the dog sat on the log",
            "a cat and a dog",
        ]);
        let tok = Tokenizer::train(&docs, TokenizerMode::Bpe, 40).unwrap();
        for text in ["the cat sat", "a dog on the mat"] {
            assert_eq!(tok.decode(&tok.encode(text)).unwrap(), text);
            let ids = tok.encode(text);
            assert_eq!(tok.encode(&tok.decode(&ids).unwrap()), ids);
        }
    }

    #[test]
    fn ids_are_dense() {
        let tok = Tokenizer::train(&corpus(&["abc abd"]), TokenizerMode::Bpe, 12).unwrap();
        for id in 0..tok.vocab_size() as u32 {
            assert!(tok.token(id).is_some());
        }
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(matches!(
            Tokenizer::train(&corpus(&["", "  "]), TokenizerMode::Char, 0),
            Err(SentraError::Data(_))
        ));
    }

    #[test]
    fn save_load_round_trip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tok.txt");
        let docs = corpus(&["some words with spaces", "and some more words"]);
        let tok = Tokenizer::train(&docs, TokenizerMode::Bpe, 48).unwrap();
        tok.save(&path).unwrap();
        let loaded = Tokenizer::load(&path).unwrap();
        assert_eq!(loaded.tokenizer_id(), tok.tokenizer_id());
        assert_eq!(loaded.vocab, tok.vocab);
        assert_eq!(loaded.merges, tok.merges);
        assert_eq!(loaded.encode("some more words"), tok.encode("some more words"));
    }

    #[test]
    fn ids_change_when_corpus_changes() {
        let a = Tokenizer::train(&corpus(&["aaa bbb"]), TokenizerMode::Char, 0).unwrap();
        let b = Tokenizer::train(&corpus(&["aaa bbc"]), TokenizerMode::Char, 0).unwrap();
        assert_ne!(a.tokenizer_id(), b.tokenizer_id());
    }
}
