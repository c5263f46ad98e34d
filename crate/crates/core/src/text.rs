//! Word-level tokenizer, vocabulary, and item-ID token pieces.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::data::ItemRecord;
use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const BOS_ID: u32 = 2;
pub const EOS_ID: u32 = 3;
pub const NUM_RESERVED: usize = 4;
pub const RESERVED_TOKENS: [&str; NUM_RESERVED] = ["[pad]", "[unk]", "[bos]", "[eos]"];
/// Joins the title and genre fields. Brackets are split off by the
/// tokenizer, so text can never produce this token.
pub const SEP_TOKEN: &str = "[sep]";

const PUNCT: &[char] = &['(', ')', '[', ']', ':', ',', '.', '!', '?', '\'', '"', '&', '-'];

/// Lowercase, split on whitespace, and break the punctuation set
/// `()[]:,.!?'"&-` into standalone tokens.
pub fn tokenize_text(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let mut cur = String::new();
        for ch in word.chars() {
            if PUNCT.contains(&ch) {
                if !cur.is_empty() {
                    out.push(core::mem::take(&mut cur));
                }
                out.push(ch.to_string());
            } else {
                cur.extend(ch.to_lowercase());
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

/// Token/id bijection with ids 0..4 reserved for PAD, UNK, BOS, EOS.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: BTreeMap<String, u32>,
    frozen: bool,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    /// Unfrozen vocabulary holding only the reserved tokens.
    pub fn new() -> Self {
        let mut v = Self {
            tokens: Vec::new(),
            index: BTreeMap::new(),
            frozen: false,
        };
        for t in RESERVED_TOKENS {
            v.push_unchecked(t.to_string());
        }
        v
    }

    fn push_unchecked(&mut self, token: String) -> u32 {
        let id = self.tokens.len() as u32;
        self.index.insert(token.clone(), id);
        self.tokens.push(token);
        id
    }

    /// Rebuild from the non-reserved tokens in id order (as stored on disk).
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Self::new();
        for t in tokens {
            let t = t.into();
            if v.index.contains_key(&t) {
                return Err(Error::Config(alloc::format!("duplicate vocabulary token `{t}`")));
            }
            v.push_unchecked(t);
        }
        v.frozen = true;
        Ok(v)
    }

    pub fn insert(&mut self, token: &str) -> Result<u32> {
        if let Some(&id) = self.index.get(token) {
            return Ok(id);
        }
        if self.frozen {
            return Err(Error::VocabFrozen);
        }
        Ok(self.push_unchecked(token.to_string()))
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> u32 {
        self.id(token).unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<u32> {
        tokens.iter().map(|t| self.id_or_unk(t)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Vec<&str> {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(RESERVED_TOKENS[1]))
            .collect()
    }

    /// Tokens after the reserved block, in id order.
    pub fn user_tokens(&self) -> &[String] {
        &self.tokens[NUM_RESERVED..]
    }

    /// Id of the field separator, falling back to EOS when absent.
    pub fn sep_id(&self) -> u32 {
        self.id(SEP_TOKEN).unwrap_or(EOS_ID)
    }
}

/// Frozen vocabulary of every token occurring at least `min_freq` times,
/// ordered by descending frequency then lexicographically.
pub fn build_vocab<'a, I>(corpus: I, min_freq: usize) -> Result<Vocab>
where
    I: IntoIterator<Item = &'a str>,
{
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut docs = 0usize;
    for text in corpus {
        docs += 1;
        for tok in tokenize_text(text) {
            *counts.entry(tok).or_default() += 1;
        }
    }
    if docs == 0 {
        return Err(Error::Empty("vocabulary corpus"));
    }
    let mut ranked: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(t, c)| *c >= min_freq.max(1) && !RESERVED_TOKENS.contains(&t.as_str()))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut v = Vocab::new();
    for (t, _) in ranked {
        v.push_unchecked(t);
    }
    v.freeze();
    Ok(v)
}

/// Vocabulary over a catalog's titles and genres plus the field separator.
pub fn build_catalog_vocab(items: &[ItemRecord], min_freq: usize) -> Result<Vocab> {
    let texts: Vec<String> = items
        .iter()
        .map(|it| alloc::format!("{} {}", it.title, it.genre))
        .collect();
    let built = build_vocab(texts.iter().map(String::as_str), min_freq)?;
    let mut v = Vocab::new();
    for t in built.user_tokens() {
        v.push_unchecked(t.clone());
    }
    v.push_unchecked(SEP_TOKEN.to_string());
    v.freeze();
    Ok(v)
}

/// Unpadded token ids of one item's context text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenizedText {
    pub ids: Vec<u32>,
}

impl TokenizedText {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Title tokens, the separator, then genre tokens, truncated to `max_len`.
///
/// Unknown tokens map to UNK. Text with no known token at all collapses to a
/// single UNK, so the result is never empty.
pub fn encode_item_context(item: &ItemRecord, vocab: &Vocab, max_len: usize) -> TokenizedText {
    let title = tokenize_text(&item.title);
    let genre = tokenize_text(&item.genre);
    let mut ids = vocab.encode(&title);
    if !title.is_empty() && !genre.is_empty() {
        ids.push(vocab.sep_id());
    }
    ids.extend(vocab.encode(&genre));
    ids.truncate(max_len.max(1));
    let known = ids.iter().any(|&i| i != UNK_ID && i != vocab.sep_id());
    if !known {
        ids = vec![UNK_ID];
    }
    TokenizedText { ids }
}

/// `"item"`, `"_"`, then the decimal digits of `number` in two-digit pieces
/// from the left, with a leading single digit when the digit count is odd.
pub fn encode_item_id_tokens(number: u64) -> Vec<String> {
    let digits = number.to_string();
    let mut out = vec![String::from("item"), String::from("_")];
    let head = digits.len() % 2;
    if head == 1 {
        out.push(digits[..1].to_string());
    }
    let rest = &digits[head..];
    for i in (0..rest.len()).step_by(2) {
        out.push(rest[i..i + 2].to_string());
    }
    out
}

/// Inverse of [`encode_item_id_tokens`]; `None` for anything it cannot emit.
pub fn decode_item_id_tokens<S: AsRef<str>>(tokens: &[S]) -> Option<u64> {
    if tokens.len() < 3 || tokens[0].as_ref() != "item" || tokens[1].as_ref() != "_" {
        return None;
    }
    let pieces = &tokens[2..];
    let mut digits = String::new();
    for (i, p) in pieces.iter().enumerate() {
        let p = p.as_ref();
        if p.is_empty() || !p.bytes().all(|b| b.is_ascii_digit()) {
            return None;
        }
        match (i, p.len()) {
            (0, 1) | (_, 2) => {}
            _ => return None,
        }
        digits.push_str(p);
    }
    if digits.len() > 1 && digits.starts_with('0') {
        return None;
    }
    // The leading piece is a single digit exactly when the digit count is odd.
    if (pieces[0].as_ref().len() == 1) != (digits.len() % 2 == 1) {
        return None;
    }
    digits.parse().ok()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    fn item(title: &str, genre: &str) -> ItemRecord {
        ItemRecord {
            raw_id: "x".into(),
            index: 0,
            title: title.into(),
            genre: genre.into(),
        }
    }

    #[test]
    fn tokenizer_examples() {
        assert_eq!(
            tokenize_text("Star Wars (1977)"),
            s(&["star", "wars", "(", "1977", ")"])
        );
        assert_eq!(tokenize_text("Toy Story"), s(&["toy", "story"]));
        assert!(tokenize_text("").is_empty());
        assert_eq!(
            tokenize_text("Children's  Sci-Fi!"),
            s(&["children", "'", "s", "sci", "-", "fi", "!"])
        );
    }

    #[test]
    fn build_vocab_examples() {
        let v = build_vocab(["a b", "a"], 1).unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!(v.id("a"), Some(4));
        assert_eq!(v.id("b"), Some(5));
        assert!(v.is_frozen());

        let v = build_vocab(["a b", "a"], 2).unwrap();
        assert_eq!(v.len(), 5);
        assert_eq!(v.id_or_unk("b"), UNK_ID);

        let a = build_vocab(["x y z", "y z", "z", "q"], 1).unwrap();
        let b = build_vocab(["q", "z", "y z", "x y z"], 1).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.user_tokens(), &s(&["z", "y", "q", "x"])[..]);

        assert_eq!(
            build_vocab(core::iter::empty(), 1),
            Err(Error::Empty("vocabulary corpus"))
        );
    }

    #[test]
    fn frozen_vocab_rejects_insertion() {
        let mut v = build_vocab(["a"], 1).unwrap();
        assert_eq!(v.insert("a"), Ok(4));
        assert_eq!(v.insert("new"), Err(Error::VocabFrozen));
    }

    #[test]
    fn item_context_examples() {
        let vocab = build_catalog_vocab(&[item("toy story", "animation")], 1).unwrap();
        let t = encode_item_context(&item("toy story", "animation"), &vocab, 10);
        let expect: Vec<u32> = ["toy", "story", SEP_TOKEN, "animation"]
            .iter()
            .map(|t| vocab.id(t).unwrap())
            .collect();
        assert_eq!(t.ids, expect);

        let t = encode_item_context(&item("qqq zzz", "www"), &vocab, 10);
        assert_eq!(t.ids, vec![UNK_ID]);

        let long: Vec<String> = (0..40).map(|_| String::from("toy")).collect();
        let t = encode_item_context(&item(&long.join(" "), "animation"), &vocab, 16);
        assert_eq!(t.len(), 16);
    }

    #[test]
    fn item_id_token_examples() {
        assert_eq!(encode_item_id_tokens(1234), s(&["item", "_", "12", "34"]));
        assert_eq!(encode_item_id_tokens(7), s(&["item", "_", "7"]));
        assert_eq!(encode_item_id_tokens(123), s(&["item", "_", "1", "23"]));
        assert_eq!(encode_item_id_tokens(1207), s(&["item", "_", "12", "07"]));
        assert_eq!(decode_item_id_tokens(&encode_item_id_tokens(1207)), Some(1207));
        assert_eq!(decode_item_id_tokens(&["item", "_", "12", "3"]), None);
        assert_eq!(decode_item_id_tokens(&["item", "_", "07"]), None);
        assert_eq!(decode_item_id_tokens(&["item", "_"]), None);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn id_tokens_round_trip(n in 0u64..10_000_000) {
                let toks = encode_item_id_tokens(n);
                prop_assert_eq!(decode_item_id_tokens(&toks), Some(n));
            }

            #[test]
            fn id_tokens_injective(a in 0u64..100_000, b in 0u64..100_000) {
                prop_assume!(a != b);
                prop_assert_ne!(encode_item_id_tokens(a), encode_item_id_tokens(b));
            }

            #[test]
            fn encode_decode_round_trip(words in proptest::collection::vec("[a-z]{1,6}", 1..12)) {
                let text = words.join(" ");
                let vocab = build_vocab([text.as_str()], 1).unwrap();
                let toks = tokenize_text(&text);
                let ids = vocab.encode(&toks);
                let back: Vec<String> = vocab.decode(&ids).into_iter().map(String::from).collect();
                prop_assert_eq!(back, toks);
            }
        }
    }
}
