use std::collections::HashMap;

use crate::datagen::CorpusSpec;
use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const MEM: &str = "<mem>";
pub const SEP: &str = "<sep>";
/// Instruction asking the generator to restate the document.
pub const PARAPHRASE: &str = "paraphrase";

const RESERVED: [&str; 3] = [PAD, MEM, SEP];

/// Closed symbol table. Ids are dense in `[0, V)`; reserved symbols come first.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new<I, S>(symbols: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.push(PARAPHRASE.to_string());
        tokens.extend(symbols.into_iter().map(Into::into));
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary symbol `{t}`")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn for_corpus(spec: &CorpusSpec) -> Result<Self> {
        Self::new(spec.symbols())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Result<usize> {
        self.index
            .get(token)
            .copied()
            .ok_or_else(|| Error::UnknownToken(token.to_string()))
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<usize>> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(PAD).to_string())
            .collect()
    }

    pub fn sep(&self) -> usize {
        2
    }

    pub fn is_reserved(&self, id: usize) -> bool {
        id < RESERVED.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids_are_distinct_and_first() {
        let v = Vocabulary::new(["a", "b"]).unwrap();
        assert_eq!(v.id(PAD).unwrap(), 0);
        assert_eq!(v.id(MEM).unwrap(), 1);
        assert_eq!(v.id(SEP).unwrap(), v.sep());
        assert_eq!(v.len(), 6);
        assert_eq!(v.decode(&v.encode(&["b", "a"]).unwrap()), vec!["b", "a"]);
        assert!(matches!(v.id("zzz"), Err(Error::UnknownToken(_))));
        assert!(Vocabulary::new(["a", "a"]).is_err());
    }

    #[test]
    fn corpus_vocabulary_fits_desk_scale() {
        let v = Vocabulary::for_corpus(&CorpusSpec::default()).unwrap();
        assert!(v.len() <= 512, "{}", v.len());
    }
}
