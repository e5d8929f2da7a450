use std::collections::HashMap;

use crate::actions::{verbalize_history, ActionHistory};
use crate::{Error, Result};

const BUILTIN_VOCAB: &str = include_str!("../../assets/vocab.txt");

pub const UNK: &str = "[unk]";
pub const SEP: &str = "[sep]";

/// Lowercasing word-piece tokenizer over a fixed vocabulary file
/// (one token per line, continuation pieces prefixed with `##`).
#[derive(Clone, Debug)]
pub struct TextTokenizer {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    unk: usize,
    sep: usize,
}

impl Default for TextTokenizer {
    fn default() -> Self {
        Self::from_vocab(BUILTIN_VOCAB).expect("built-in vocabulary is valid")
    }
}

impl TextTokenizer {
    pub fn from_vocab(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect();
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        let need = |t: &str| {
            index
                .get(t)
                .copied()
                .ok_or_else(|| Error::Config(format!("vocabulary lacks {t}")))
        };
        let (unk, sep) = (need(UNK)?, need(SEP)?);
        Ok(Self {
            tokens,
            index,
            unk,
            sep,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn sep(&self) -> usize {
        self.sep
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Splits lowercase text into words (`[a-z0-9_]+`) and single punctuation marks.
    pub fn words(text: &str) -> Vec<String> {
        let mut out = Vec::new();
        let mut cur = String::new();
        for c in text.chars().flat_map(char::to_lowercase) {
            if c.is_alphanumeric() || c == '_' {
                cur.push(c);
                continue;
            }
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            if !c.is_whitespace() {
                out.push(c.to_string());
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
        out
    }

    fn word_pieces(&self, word: &str, out: &mut Vec<usize>) {
        if let Some(&id) = self.index.get(word) {
            out.push(id);
            return;
        }
        let chars: Vec<char> = word.chars().collect();
        let mut pieces = Vec::new();
        let mut start = 0;
        while start < chars.len() {
            let mut found = None;
            for end in (start + 1..=chars.len()).rev() {
                let s: String = chars[start..end].iter().collect();
                let key = if start == 0 { s } else { format!("##{s}") };
                if let Some(&id) = self.index.get(&key) {
                    found = Some((id, end));
                    break;
                }
            }
            match found {
                Some((id, end)) => {
                    pieces.push(id);
                    start = end;
                }
                None => {
                    out.push(self.unk);
                    return;
                }
            }
        }
        out.extend(pieces);
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        let mut ids = Vec::new();
        for w in Self::words(text) {
            self.word_pieces(&w, &mut ids);
        }
        ids
    }

    /// `goal [sep] history`, dropping the oldest history entries until the
    /// result fits in `max_tokens`; a goal that alone is too long is cut.
    pub fn encode_prompt(&self, task: &str, history: &ActionHistory, max_tokens: usize) -> Result<Vec<usize>> {
        if task.trim().is_empty() {
            return Err(Error::Contract("a goal instruction is required".into()));
        }
        let goal = self.tokenize(task);
        let mut h = history.clone();
        loop {
            let mut ids = goal.clone();
            ids.push(self.sep);
            ids.extend(self.tokenize(&verbalize_history(&h)));
            if ids.len() <= max_tokens {
                return Ok(ids);
            }
            if h.drop_oldest().is_none() {
                ids.truncate(max_tokens);
                return Ok(ids);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::actions::Action;

    #[test]
    fn known_words_are_single_tokens() {
        let t = TextTokenizer::default();
        let ids = t.tokenize("Press the red button");
        assert_eq!(ids.len(), 4);
        assert_eq!(t.token(ids[2]), Some("red"));
    }

    #[test]
    fn punctuation_and_word_pieces() {
        let t = TextTokenizer::default();
        assert_eq!(
            TextTokenizer::words("step 1: click b50 b50; x"),
            vec!["step", "1", ":", "click", "b50", "b50", ";", "x"]
        );
        let ids = t.tokenize("zebra");
        let pieces: Vec<_> = ids.iter().map(|&i| t.token(i).unwrap()).collect();
        assert_eq!(pieces, vec!["z", "##e", "##b", "##r", "##a"]);
        assert_eq!(t.tokenize("€"), vec![t.unk]);
    }

    #[test]
    fn prompt_layout_and_truncation() {
        let t = TextTokenizer::default();
        let empty = ActionHistory::default();
        let ids = t.encode_prompt("press the red button", &empty, 64).unwrap();
        // 4 goal words, [sep], "no previous actions"
        assert_eq!(ids.len(), 4 + 1 + 3);
        assert!(t.encode_prompt("  ", &empty, 64).is_err());

        let acts: Vec<Action> = (0..8).map(|i| Action::click(0.1 * i as f64, 0.5).unwrap()).collect();
        let h = ActionHistory::from_actions(&acts, 8);
        let full = t.encode_prompt("click the red button", &h, 1000).unwrap();
        let cut = t.encode_prompt("click the red button", &h, 40).unwrap();
        assert!(full.len() > 40 && cut.len() <= 40);
        // the newest step survives truncation
        assert_eq!(&cut[cut.len() - 3..], &full[full.len() - 3..]);
        assert_eq!(t.encode_prompt("click the red button", &h, 3).unwrap().len(), 3);
    }
}
