use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::scene::{Category, Color, Location, SizeClass};
use crate::error::{Error, Result};

pub const BEGIN: usize = 0;
pub const END: usize = 1;
pub const UNK: usize = 2;

/// Default cap on expression length, sentinels excluded.
pub const DEFAULT_MAX_LEN: usize = 10;

/// What a content word asserts about an object.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Predicate {
    Category(Category),
    Color(Color),
    Size(SizeClass),
    Location(Location),
}

/// Ordered word list. Indices 0, 1 and 2 are the begin, end and unknown
/// sentinels; the order is persisted with checkpoints.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn standard() -> Self {
        let mut words: Vec<String> = ["<begin>", "<end>", "<unk>", "the", "one", "on"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        words.extend(Color::ALL.iter().map(|c| c.word().to_string()));
        words.extend(Category::ALL.iter().map(|c| c.word().to_string()));
        words.extend(["small", "big", "little", "large"].map(String::from));
        words.extend(Location::ALL.iter().map(|l| l.word().to_string()));
        Self::from_words(words).expect("standard vocabulary is well formed")
    }

    pub fn from_words(words: Vec<String>) -> Result<Self> {
        if words.len() < 3
            || words[BEGIN] != "<begin>"
            || words[END] != "<end>"
            || words[UNK] != "<unk>"
        {
            return Err(Error::Config(
                "vocabulary must start with <begin>, <end>, <unk>".into(),
            ));
        }
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary word `{w}`")));
            }
        }
        Ok(Self { words, index })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Index of `word`, or [`UNK`].
    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: usize) -> &str {
        self.words.get(id).map_or("<unk>", String::as_str)
    }

    pub fn predicate(&self, id: usize) -> Option<Predicate> {
        let w = self.words.get(id)?;
        if let Some(c) = Category::ALL.iter().find(|c| c.word() == w) {
            return Some(Predicate::Category(*c));
        }
        if let Some(c) = Color::ALL.iter().find(|c| c.word() == w) {
            return Some(Predicate::Color(*c));
        }
        if let Some(l) = Location::ALL.iter().find(|l| l.word() == w) {
            return Some(Predicate::Location(*l));
        }
        match w.as_str() {
            "small" | "little" => Some(Predicate::Size(SizeClass::Small)),
            "big" | "large" => Some(Predicate::Size(SizeClass::Big)),
            _ => None,
        }
    }

    /// Tokenises a space-separated surface form. Unknown words map to [`UNK`].
    pub fn encode(&self, surface: &str) -> Expression {
        let mut tokens: Vec<usize> = surface.split_whitespace().map(|w| self.id(w)).collect();
        tokens.push(END);
        Expression {
            surface: self.surface(&tokens),
            tokens,
        }
    }

    /// Surface form of a token sequence, sentinels dropped.
    pub fn surface(&self, tokens: &[usize]) -> String {
        tokens
            .iter()
            .filter(|&&t| t != END && t != BEGIN)
            .map(|&t| self.word(t))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn expression(&self, tokens: Vec<usize>) -> Result<Expression> {
        Expression::new(tokens, self)
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = Error;
    fn try_from(words: Vec<String>) -> Result<Self> {
        Self::from_words(words)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.words
    }
}

/// Token indices terminated by a single [`END`].
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Expression {
    tokens: Vec<usize>,
    surface: String,
}

impl Expression {
    /// Validates indices and appends [`END`] when missing.
    pub fn new(mut tokens: Vec<usize>, vocab: &Vocabulary) -> Result<Self> {
        if tokens.last() != Some(&END) {
            tokens.push(END);
        }
        for (i, &t) in tokens.iter().enumerate() {
            if t >= vocab.len() {
                return Err(Error::Index {
                    op: "expression",
                    index: t,
                    size: vocab.len(),
                });
            }
            if t == END && i + 1 != tokens.len() {
                return Err(Error::Dataset(
                    "END token before the end of an expression".into(),
                ));
            }
        }
        Ok(Self {
            surface: vocab.surface(&tokens),
            tokens,
        })
    }

    /// Tokens including the trailing [`END`].
    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    /// Tokens without the trailing [`END`].
    pub fn words(&self) -> &[usize] {
        &self.tokens[..self.tokens.len() - 1]
    }

    pub fn len(&self) -> usize {
        self.tokens.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn surface(&self) -> &str {
        &self.surface
    }
}
