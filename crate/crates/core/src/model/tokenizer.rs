use std::collections::HashMap;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const SEP: usize = 3;
pub const INSTRUCTION_BASE: usize = 4;
pub const PAYLOAD_BASE: usize = 16;

/// Instruction words occupying ids `INSTRUCTION_BASE..PAYLOAD_BASE`.
pub const INSTRUCTION_WORDS: [&str; 12] = [
    "copy",
    "reorder",
    "shift",
    "seq",
    "plain",
    "repeat_last",
    "backward",
    "ascending",
    "plus_k",
    "w13",
    "w14",
    "w15",
];

pub fn instruction_id(word: &str) -> Option<usize> {
    INSTRUCTION_WORDS
        .iter()
        .position(|w| *w == word)
        .map(|i| i + INSTRUCTION_BASE)
}

/// Whitespace-separated symbol vocabulary.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    symbols: Vec<String>,
    index: HashMap<String, usize>,
}

impl Tokenizer {
    pub fn new(vocab: usize) -> Result<Self> {
        if vocab <= PAYLOAD_BASE {
            return Err(Error::Config(format!("vocab {vocab} leaves no payload symbols")));
        }
        let mut symbols: Vec<String> = ["<pad>", "<bos>", "<eos>", "<sep>"]
            .iter()
            .chain(INSTRUCTION_WORDS.iter())
            .map(|s| s.to_string())
            .collect();
        symbols.extend((0..vocab - PAYLOAD_BASE).map(|i| format!("p{i}")));
        let index = symbols.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        Ok(Tokenizer { symbols, index })
    }

    pub fn vocab(&self) -> usize {
        self.symbols.len()
    }

    pub fn symbol(&self, id: usize) -> Option<&str> {
        self.symbols.get(id).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace()
            .map(|s| {
                self.index
                    .get(s)
                    .copied()
                    .ok_or_else(|| Error::Contract(format!("unknown symbol {s:?}")))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let parts: Result<Vec<&str>> = ids
            .iter()
            .map(|&i| {
                self.symbol(i)
                    .ok_or_else(|| Error::Contract(format!("token id {i} outside the vocabulary")))
            })
            .collect();
        Ok(parts?.join(" "))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_symbol_round_trips() {
        let t = Tokenizer::new(64).unwrap();
        assert_eq!(t.vocab(), 64);
        for id in 0..64 {
            let s = t.decode(&[id]).unwrap();
            assert_eq!(t.encode(&s).unwrap(), vec![id]);
            assert_eq!(t.decode(&t.encode(&s).unwrap()).unwrap(), s);
        }
        let seq = "copy seq plain <sep> p3 p9 <sep>";
        assert_eq!(t.decode(&t.encode(seq).unwrap()).unwrap(), seq);
    }

    #[test]
    fn unknown_symbols_fail() {
        let t = Tokenizer::new(64).unwrap();
        assert!(t.encode("p99").is_err());
        assert!(t.decode(&[64]).is_err());
        assert!(Tokenizer::new(16).is_err());
    }
}
