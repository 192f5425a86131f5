//! Sentence segmentation and a closed-vocabulary word tokenizer.
//!
//! Words are lower-cased and trailing `. , ! ?` become their own token.
//! Every segment is laid out as `<sot> w1 … wn <eot> <pad> …` with a fixed
//! length `L_seg`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const SOT: &str = "<sot>";
pub const EOT: &str = "<eot>";
pub const PAD: &str = "<pad>";

const TERMINAL: [char; 3] = ['.', '!', '?'];
const PUNCT: [char; 4] = ['.', ',', '!', '?'];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    sot: usize,
    eot: usize,
    pad: usize,
}

impl Vocabulary {
    /// Builds a vocabulary from `tokens`; the special markers must be present.
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::VocabFormat(format!("duplicate token '{t}'")));
            }
        }
        let find = |s: &str| index.get(s).copied().ok_or_else(|| Error::VocabFormat(format!("missing special token {s}")));
        let (sot, eot, pad) = (find(SOT)?, find(EOT)?, find(PAD)?);
        Ok(Self { tokens, index, sot, eot, pad })
    }

    /// Special tokens first, then `words` (deduplicated, order kept).
    pub fn from_words<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let mut tokens: Vec<String> = vec![SOT.into(), EOT.into(), PAD.into()];
        for w in words {
            if !tokens.iter().any(|t| t == w) {
                tokens.push(w.to_string());
            }
        }
        Self::new(tokens).expect("special tokens are inserted above")
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn sot(&self) -> usize {
        self.sot
    }

    pub fn eot(&self) -> usize {
        self.eot
    }

    pub fn pad(&self) -> usize {
        self.pad
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn is_special(&self, id: usize) -> bool {
        id == self.sot || id == self.eot || id == self.pad
    }

    /// Joins content tokens with spaces, attaching punctuation to the
    /// preceding word. Special tokens are skipped.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        for &id in ids.iter().filter(|&&id| !self.is_special(id)) {
            let tok = self.token(id);
            let is_punct = tok.len() == 1 && tok.chars().all(|c| PUNCT.contains(&c));
            if !out.is_empty() && !is_punct {
                out.push(' ');
            }
            out.push_str(tok);
        }
        out
    }

    /// Header of three `name index` lines followed by one token per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "sot {}", self.sot);
        let _ = writeln!(s, "eot {}", self.eot);
        let _ = writeln!(s, "pad {}", self.pad);
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let mut header = [0usize; 3];
        for (slot, name) in header.iter_mut().zip(["sot", "eot", "pad"]) {
            let line = lines.next().ok_or_else(|| Error::VocabFormat("truncated header".into()))?;
            let (key, val) = line.split_once(' ').ok_or_else(|| Error::VocabFormat(format!("bad header line '{line}'")))?;
            if key != name {
                return Err(Error::VocabFormat(format!("expected '{name}' header, found '{key}'")));
            }
            *slot = val.trim().parse().map_err(|_| Error::VocabFormat(format!("bad index in '{line}'")))?;
        }
        let tokens: Vec<String> = lines.filter(|l| !l.is_empty()).map(str::to_string).collect();
        let vocab = Self::new(tokens)?;
        if [vocab.sot, vocab.eot, vocab.pad] != header {
            return Err(Error::VocabFormat("header indices disagree with token list".into()));
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

/// A long prompt and, optionally, its short counterpart.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct RawPrompt {
    pub text: String,
    pub short_text: Option<String>,
}

impl RawPrompt {
    pub fn new(text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(Error::InvalidPrompt("prompt is empty".into()));
        }
        Ok(Self { text, short_text: None })
    }

    pub fn with_short(text: impl Into<String>, short: impl Into<String>) -> Result<Self> {
        let mut p = Self::new(text)?;
        p.short_text = Some(short.into());
        Ok(p)
    }
}

/// Collapses whitespace runs and trims.
pub fn normalize_text(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Tokens produced by one whitespace-delimited word.
pub fn word_tokens(word: &str) -> Vec<String> {
    let lower = word.to_lowercase();
    let body = lower.trim_end_matches(PUNCT);
    let mut out = Vec::with_capacity(2);
    if !body.is_empty() {
        out.push(body.to_string());
    }
    out.extend(lower[body.len()..].chars().map(|c| c.to_string()));
    out
}

pub fn token_count(text: &str) -> usize {
    text.split_whitespace().map(|w| word_tokens(w).len()).sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SegmentationPolicy {
    /// Content-token cap per segment, `L_seg − 2`.
    pub max_content: usize,
}

impl SegmentationPolicy {
    pub fn for_segment_len(l_seg: usize) -> Self {
        Self { max_content: l_seg.saturating_sub(2) }
    }
}

/// Splits at terminal punctuation, then hard-splits any sentence longer
/// than the token cap on word boundaries.
pub fn split_into_segments(prompt: &RawPrompt, policy: SegmentationPolicy) -> Result<Vec<String>> {
    let text = normalize_text(&prompt.text);
    if text.is_empty() {
        return Err(Error::InvalidPrompt("prompt is empty after normalization".into()));
    }
    if policy.max_content < 2 {
        return Err(Error::InvalidArgument("segment cap must allow at least 2 content tokens".into()));
    }
    let mut sentences: Vec<Vec<&str>> = vec![Vec::new()];
    for word in text.split(' ') {
        sentences.last_mut().expect("non-empty").push(word);
        if word.ends_with(TERMINAL) {
            sentences.push(Vec::new());
        }
    }
    sentences.retain(|s| !s.is_empty());

    let mut out = Vec::new();
    for sentence in sentences {
        let mut current: Vec<&str> = Vec::new();
        let mut count = 0;
        for word in sentence {
            let n = word_tokens(word).len();
            if count + n > policy.max_content && !current.is_empty() {
                out.push(current.join(" "));
                current.clear();
                count = 0;
            }
            current.push(word);
            count += n;
        }
        if !current.is_empty() {
            out.push(current.join(" "));
        }
    }
    Ok(out)
}

/// A fixed-length token layout for one segment.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenizedSegment {
    pub token_ids: Vec<usize>,
    pub content_len: usize,
}

impl TokenizedSegment {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.content_len == 0
    }

    pub fn eot_position(&self) -> usize {
        self.content_len + 1
    }

    pub fn content_ids(&self) -> &[usize] {
        &self.token_ids[1..=self.content_len]
    }
}

pub fn tokenize_segment(text: &str, vocab: &Vocabulary, l_seg: usize) -> Result<TokenizedSegment> {
    let mut ids = Vec::new();
    for word in text.split_whitespace() {
        for tok in word_tokens(word) {
            ids.push(vocab.id(&tok).ok_or(Error::UnknownToken(tok))?);
        }
    }
    layout(ids, vocab, l_seg)
}

fn layout(content: Vec<usize>, vocab: &Vocabulary, l_seg: usize) -> Result<TokenizedSegment> {
    let cap = l_seg.saturating_sub(2);
    if content.len() > cap {
        return Err(Error::SegmentOverflow { len: content.len(), cap });
    }
    let content_len = content.len();
    let mut token_ids = Vec::with_capacity(l_seg);
    token_ids.push(vocab.sot());
    token_ids.extend(content);
    token_ids.push(vocab.eot());
    token_ids.resize(l_seg, vocab.pad());
    Ok(TokenizedSegment { token_ids, content_len })
}

/// Single-pass encoding of the whole prompt, truncated token-exactly to
/// the first `L_seg − 2` content tokens.
pub fn tokenize_truncated(text: &str, vocab: &Vocabulary, l_seg: usize) -> Result<TokenizedSegment> {
    let mut ids = Vec::new();
    for word in text.split_whitespace() {
        for tok in word_tokens(word) {
            ids.push(vocab.id(&tok).ok_or(Error::UnknownToken(tok))?);
        }
    }
    ids.truncate(l_seg.saturating_sub(2));
    layout(ids, vocab, l_seg)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentedPrompt {
    pub texts: Vec<String>,
    pub segments: Vec<TokenizedSegment>,
}

impl SegmentedPrompt {
    pub fn k(&self) -> usize {
        self.segments.len()
    }
}

pub fn segment_prompt(prompt: &RawPrompt, vocab: &Vocabulary, l_seg: usize) -> Result<SegmentedPrompt> {
    let texts = split_into_segments(prompt, SegmentationPolicy::for_segment_len(l_seg))?;
    let segments = texts.iter().map(|t| tokenize_segment(t, vocab, l_seg)).collect::<Result<Vec<_>>>()?;
    Ok(SegmentedPrompt { texts, segments })
}

/// First `n` sentences of `text`; a sentence cut by the cap is dropped whole.
pub fn first_sentences(text: &str, n: usize) -> String {
    let text = normalize_text(text);
    let mut out: Vec<&str> = Vec::new();
    let mut done = 0;
    let mut pending: Vec<&str> = Vec::new();
    for word in text.split(' ').filter(|w| !w.is_empty()) {
        if done == n {
            break;
        }
        pending.push(word);
        if word.ends_with(TERMINAL) {
            out.append(&mut pending);
            done += 1;
        }
    }
    if done < n {
        out.append(&mut pending);
    }
    out.join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vocab() -> Vocabulary {
        Vocabulary::from_words(["a", "b", "c", "d", "e", "f", "g", "h", "cat", "dog", "big", ".", "!", "?"])
    }

    fn split(text: &str, cap: usize) -> Vec<String> {
        split_into_segments(&RawPrompt::new(text).unwrap(), SegmentationPolicy { max_content: cap }).unwrap()
    }

    #[test]
    fn splits_on_terminal_punctuation() {
        assert_eq!(split("A cat. A dog.", 10), vec!["A cat.", "A dog."]);
        assert_eq!(split("hello", 10), vec!["hello"]);
        assert_eq!(split("  Is it?  Yes!  ok  ", 10), vec!["Is it?", "Yes!", "ok"]);
    }

    #[test]
    fn overlong_sentence_is_hard_split_at_cap() {
        // L_seg = 6: cap 4; the sentence below has 8 tokens ("g." counts 2).
        let s = split("a b c d e f g.", 4);
        assert_eq!(s, vec!["a b c d", "e f g."]);
        assert!(s.iter().all(|t| token_count(t) == 4));
    }

    #[test]
    fn empty_prompt_rejected() {
        assert!(matches!(RawPrompt::new("   "), Err(Error::InvalidPrompt(_))));
        let p = RawPrompt { text: " \n ".into(), short_text: None };
        assert!(matches!(split_into_segments(&p, SegmentationPolicy { max_content: 4 }), Err(Error::InvalidPrompt(_))));
    }

    #[test]
    fn tokenize_layout() {
        let v = vocab();
        let seg = tokenize_segment("a cat", &v, 6).unwrap();
        let want = vec![v.sot(), v.id("a").unwrap(), v.id("cat").unwrap(), v.eot(), v.pad(), v.pad()];
        assert_eq!(seg.token_ids, want);
        assert_eq!(seg.content_len, 2);

        let empty = tokenize_segment("", &v, 4).unwrap();
        assert_eq!(empty.token_ids, vec![v.sot(), v.eot(), v.pad(), v.pad()]);
        assert_eq!(empty.content_len, 0);
    }

    #[test]
    fn tokenize_errors() {
        let v = vocab();
        assert!(matches!(tokenize_segment("a zebra", &v, 6), Err(Error::UnknownToken(w)) if w == "zebra"));
        assert!(matches!(tokenize_segment("a b c d e", &v, 6), Err(Error::SegmentOverflow { len: 5, cap: 4 })));
    }

    #[test]
    fn punctuation_is_its_own_token() {
        assert_eq!(word_tokens("Cat."), vec!["cat", "."]);
        assert_eq!(word_tokens("?"), vec!["?"]);
        let v = vocab();
        let seg = tokenize_segment("A big cat.", &v, 8).unwrap();
        assert_eq!(seg.content_len, 4);
        assert_eq!(v.detokenize(&seg.token_ids), "a big cat.");
    }

    #[test]
    fn truncated_single_pass() {
        let v = vocab();
        let seg = tokenize_truncated("a cat. a dog.", &v, 6).unwrap();
        assert_eq!(v.detokenize(&seg.token_ids), "a cat. a");
    }

    #[test]
    fn vocab_text_round_trip() {
        let v = vocab();
        let back = Vocabulary::from_text(&v.to_text()).unwrap();
        assert_eq!(back, v);
        assert!(Vocabulary::from_text("sot 0\neot 1\n").is_err());
        assert!(Vocabulary::from_text("sot 1\neot 0\npad 2\n<sot>\n<eot>\n<pad>\n").is_err());
    }

    #[test]
    fn first_sentences_drops_cut_sentence() {
        assert_eq!(first_sentences("A cat. A dog. A b", 1), "A cat.");
        assert_eq!(first_sentences("A cat. A dog.", 5), "A cat. A dog.");
    }

    fn word() -> impl Strategy<Value = String> {
        prop::sample::select(vec!["a", "b", "c", "cat", "dog.", "big", "e!", "f?", "g"]).prop_map(str::to_string)
    }

    proptest! {
        #[test]
        fn segmentation_idempotent_and_lossless(words in prop::collection::vec(word(), 1..30), cap in 2usize..7) {
            let text = words.join(" ");
            let segs = split(&text, cap);
            prop_assert_eq!(segs.join(" "), normalize_text(&text));
            prop_assert!(segs.iter().all(|s| !s.is_empty() && token_count(s) <= cap));
            let again = split(&segs.join(" "), cap);
            prop_assert_eq!(again, segs.clone());

            let v = vocab();
            let l_seg = cap + 2;
            let mut rebuilt = Vec::new();
            for s in &segs {
                let t = tokenize_segment(s, &v, l_seg).unwrap();
                prop_assert_eq!(t.token_ids.len(), l_seg);
                prop_assert_eq!(t.token_ids.iter().filter(|&&i| i == v.sot()).count(), 1);
                prop_assert_eq!(t.token_ids.iter().filter(|&&i| i == v.eot()).count(), 1);
                prop_assert_eq!(t.token_ids[0], v.sot());
                prop_assert_eq!(t.token_ids[t.content_len + 1], v.eot());
                prop_assert!(t.token_ids[t.content_len + 2..].iter().all(|&i| i == v.pad()));
                rebuilt.extend_from_slice(t.content_ids());
            }
            let mut whole = Vec::new();
            for w in text.split_whitespace() {
                for tok in word_tokens(w) {
                    whole.push(v.id(&tok).unwrap());
                }
            }
            prop_assert_eq!(rebuilt, whole);
        }
    }
}
