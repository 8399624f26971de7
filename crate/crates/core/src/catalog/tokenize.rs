use std::collections::HashMap;

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
pub const MASK_ID: u32 = 3;
pub const SPECIAL_TOKENS: u32 = 4;

/// Word-level vocabulary; ids below [`SPECIAL_TOKENS`] are reserved.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Vocabulary {
    ids: HashMap<String, u32>,
}

fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

impl Vocabulary {
    /// Assigns ids by descending corpus frequency, ties broken alphabetically.
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for title in corpus {
            for w in words(title) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let ids = ranked
            .into_iter()
            .enumerate()
            .map(|(i, (w, _))| (w, SPECIAL_TOKENS + i as u32))
            .collect();
        Vocabulary { ids }
    }

    /// Vocabulary size including the reserved ids.
    pub fn len(&self) -> usize {
        self.ids.len() + SPECIAL_TOKENS as usize
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn id(&self, word: &str) -> u32 {
        self.ids.get(&word.to_lowercase()).copied().unwrap_or(UNK_ID)
    }

    pub fn tokenize(&self, title: &str, max_len: usize) -> Vec<u32> {
        tokenize(self, title, max_len)
    }
}

/// Lowercased word ids truncated to `max_len`, with CLS prepended.
pub fn tokenize(vocab: &Vocabulary, title: &str, max_len: usize) -> Vec<u32> {
    std::iter::once(CLS_ID)
        .chain(words(title).take(max_len).map(|w| vocab.ids.get(&w).copied().unwrap_or(UNK_ID)))
        .collect()
}
