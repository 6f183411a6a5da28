use std::collections::HashMap;

use super::generate::vocabulary_words;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;

const SPECIALS: [&str; 3] = ["[PAD]", "[UNK]", "[CLS]"];

/// Closed word-level vocabulary with the three special tokens first.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new(words: impl IntoIterator<Item = String>) -> Self {
        let mut all: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        for w in words {
            let w = w.to_lowercase();
            if !all.contains(&w) {
                all.push(w);
            }
        }
        let index = all.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Vocab { words: all, index }
    }

    /// Everything the synthetic generator can say.
    pub fn synthetic() -> Self {
        Vocab::new(vocabulary_words())
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }
}

/// `[CLS]` followed by the lowercase words, truncated and padded to `max_len`.
pub fn tokenize(text: &str, vocab: &Vocab, max_len: usize) -> Vec<usize> {
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS);
    ids.extend(
        text.split_whitespace()
            .map(|w| vocab.id(&w.to_lowercase()))
            .take(max_len.saturating_sub(1)),
    );
    ids.truncate(max_len);
    ids.resize(max_len, PAD);
    ids
}

/// Inverse of [`tokenize`] for in-vocabulary text.
pub fn detokenize(ids: &[usize], vocab: &Vocab) -> String {
    ids.iter()
        .filter(|&&i| i != PAD && i != CLS)
        .map(|&i| vocab.word(i).unwrap_or("[UNK]"))
        .collect::<Vec<_>>()
        .join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_text_is_cls_and_padding() {
        let v = Vocab::synthetic();
        let ids = tokenize("", &v, 8);
        assert_eq!(ids, [CLS, PAD, PAD, PAD, PAD, PAD, PAD, PAD]);
    }

    #[test]
    fn length_arithmetic() {
        let v = Vocab::new(["red", "circle", "moves", "left"].map(String::from));
        let ids = tokenize("red circle moves left", &v, 8);
        assert_eq!(ids[0], CLS);
        assert!(ids[1..5].iter().all(|&i| i > CLS));
        assert!(ids[5..].iter().all(|&i| i == PAD));
    }

    #[test]
    fn unknown_and_truncation() {
        let v = Vocab::synthetic();
        assert_eq!(tokenize("zebra", &v, 4)[1], UNK);
        assert_eq!(tokenize("it turns red it turns blue", &v, 4).len(), 4);
    }

    proptest! {
        #[test]
        fn round_trip_in_vocab(picks in proptest::collection::vec(0usize..1000, 0..12)) {
            let v = Vocab::synthetic();
            let words = vocabulary_words();
            let text: Vec<String> = picks.iter().map(|&p| {
                let w = &words[p % words.len()];
                if p % 2 == 0 { w.to_uppercase() } else { w.clone() }
            }).collect();
            let text = text.join(" ");
            let ids = tokenize(&text, &v, 16);
            prop_assert_eq!(detokenize(&ids, &v), text.to_lowercase());
        }
    }
}
