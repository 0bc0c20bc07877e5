//! Word-level tokenizer.
//!
//! The vocabulary is every whitespace-delimited token seen in the fitting
//! corpora, ordered by frequency (descending) then lexicographically, after
//! four reserved specials. Newlines map to `<sep>` so multi-line prompts
//! survive encoding; all other whitespace is normalized to single spaces.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::corpus::Dataset;

pub const BOS: u32 = 0;
pub const EOS: u32 = 1;
pub const SEP: u32 = 2;
pub const UNK: u32 = 3;

const SPECIALS: [&str; 4] = ["<bos>", "<eos>", "<sep>", "<unk>"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokenizer {
    /// Token strings indexed by id; the first four entries are the specials.
    tokens: Vec<String>,
    #[serde(skip)]
    lookup: HashMap<String, u32>,
}

impl Tokenizer {
    /// Fit a vocabulary over the given corpora.
    pub fn fit(corpora: &[&Dataset]) -> Tokenizer {
        let mut counts: HashMap<&str, u64> = HashMap::new();
        for dataset in corpora {
            for sample in &dataset.samples {
                for line in sample.text.lines() {
                    for word in line.split_whitespace() {
                        if SPECIALS.contains(&word) {
                            continue;
                        }
                        *counts.entry(word).or_insert(0) += 1;
                    }
                }
            }
        }
        let mut ordered: Vec<(&str, u64)> = counts.into_iter().collect();
        ordered.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(ordered.into_iter().map(|(w, _)| w.to_string()));
        Tokenizer::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Tokenizer {
        let lookup = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Tokenizer { tokens, lookup }
    }

    /// Rebuild the lookup table after deserialization.
    pub fn rebuild_lookup(&mut self) {
        self.lookup = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id_of(&self, token: &str) -> u32 {
        self.lookup.get(token).copied().unwrap_or(UNK)
    }

    /// Encode text: words become ids (unknown words map to `<unk>`),
    /// newlines become `<sep>`. No `<bos>`/`<eos>` are added.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut ids = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if i > 0 {
                ids.push(SEP);
            }
            for word in line.split_whitespace() {
                ids.push(self.id_of(word));
            }
        }
        ids
    }

    /// Decode ids back to text. `<sep>` becomes a newline; `<bos>`/`<eos>`
    /// render as nothing.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        let mut line_start = true;
        for &id in ids {
            match id {
                BOS | EOS => {}
                SEP => {
                    out.push('\n');
                    line_start = true;
                }
                _ => {
                    if !line_start {
                        out.push(' ');
                    }
                    out.push_str(self.tokens.get(id as usize).map_or("<unk>", |s| s.as_str()));
                    line_start = false;
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{CorpusSample, Dataset, DatasetKind};

    fn dataset_of(texts: &[&str]) -> Dataset {
        Dataset {
            kind: DatasetKind::Pretrain,
            k: None,
            seed: 0,
            samples: texts
                .iter()
                .map(|t| CorpusSample {
                    text: t.to_string(),
                    token_count: None,
                    target_subject: None,
                    encoded_incorrect: vec![],
                    encoded_unrelated: vec![],
                    encoded_correct: vec![],
                    seed: 0,
                })
                .collect(),
        }
    }

    #[test]
    fn roundtrip_for_in_vocab_text() {
        let data = dataset_of(&["the cat sat on the mat .", "what is a cat ?\nan animal ."]);
        let tok = Tokenizer::fit(&[&data]);
        for text in ["the cat sat on the mat .", "what is a cat ?\nan animal ."] {
            assert_eq!(tok.decode(&tok.encode(text)), text);
        }
    }

    #[test]
    fn unseen_token_maps_to_unk() {
        let data = dataset_of(&["alpha beta"]);
        let tok = Tokenizer::fit(&[&data]);
        assert_eq!(tok.encode("gamma"), vec![UNK]);
    }

    #[test]
    fn vocab_counts_distinct_tokens_plus_specials() {
        let data = dataset_of(&["a b c a", "b d\ne"]);
        let tok = Tokenizer::fit(&[&data]);
        // Independent count: distinct whitespace-delimited tokens.
        let mut distinct: std::collections::BTreeSet<&str> = std::collections::BTreeSet::new();
        for t in ["a b c a", "b d\ne"] {
            distinct.extend(t.split_whitespace());
        }
        assert_eq!(tok.vocab_size(), distinct.len() + 4);
    }

    #[test]
    fn ordering_is_frequency_then_lexicographic() {
        let data = dataset_of(&["b b a c c"]);
        let tok = Tokenizer::fit(&[&data]);
        // b and c tie at 2 (b < c), then a.
        assert_eq!(tok.tokens()[4..], ["b", "c", "a"].map(String::from));
    }

    #[test]
    fn specials_have_reserved_ids() {
        let data = dataset_of(&["x"]);
        let tok = Tokenizer::fit(&[&data]);
        assert_eq!(tok.id_of("<bos>"), BOS);
        assert_eq!(tok.id_of("<eos>"), EOS);
        assert_eq!(tok.id_of("<sep>"), SEP);
        assert_eq!(tok.id_of("<unk>"), UNK);
    }
}
