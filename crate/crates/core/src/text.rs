//! Prompt templates, tokenization and the fixed vocabulary.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

const TEMPLATES_FULL: &str = include_str!("../data/templates80.txt");
const TEMPLATES_FAST: &str = include_str!("../data/templates_fast.txt");

pub const SHAPES: [&str; 5] = ["circle", "square", "triangle", "cross", "diamond"];
pub const COLORS: [&str; 5] = ["red", "green", "blue", "yellow", "purple"];

/// Prompt templates; each contains exactly one `{}` slot.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Templates(Vec<String>);

impl Templates {
    pub fn parse(text: &str) -> Result<Self> {
        let list: Vec<String> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect();
        Self::new(list)
    }

    pub fn new(list: Vec<String>) -> Result<Self> {
        if list.is_empty() {
            return Err(Error::Empty("template list"));
        }
        if let Some(bad) = list.iter().find(|t| t.matches("{}").count() != 1) {
            return Err(Error::invalid(format!("template `{bad}` must contain one `{{}}` slot")));
        }
        Ok(Self(list))
    }

    /// The 80 zero-shot templates.
    pub fn full() -> Self {
        Self::parse(TEMPLATES_FULL).expect("bundled templates are valid")
    }

    /// Five templates for quick runs.
    pub fn fast() -> Self {
        Self::parse(TEMPLATES_FAST).expect("bundled templates are valid")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// `full`, `fast`, or a path to a template file.
    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "full" | "80" => Ok(Self::full()),
            "fast" | "5" => Ok(Self::fast()),
            path => Self::load(path),
        }
    }

    pub fn as_slice(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn expand(template: &str, class: &str) -> String {
        template.replacen("{}", class, 1)
    }
}

/// Lowercases, splits on whitespace and detaches trailing periods, so
/// `"a photo of a ."` and `"a photo of a red circle."` share the `.` token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let word = word.to_lowercase();
        let stem = word.trim_end_matches('.');
        if !stem.is_empty() {
            out.push(stem.to_string());
        }
        for _ in 0..word.len() - stem.len() {
            out.push(".".to_string());
        }
    }
    out
}

/// Closed vocabulary covering every template, color and shape word.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_tokens<I: IntoIterator<Item = String>>(tokens: I) -> Self {
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for t in tokens {
            if !v.index.contains_key(&t) {
                v.index.insert(t.clone(), v.tokens.len());
                v.tokens.push(t);
            }
        }
        v
    }

    /// Vocabulary used by the glyph world.
    pub fn standard() -> Self {
        let mut words = Vec::new();
        for t in Templates::full().as_slice().iter().chain(Templates::fast().as_slice()) {
            words.extend(tokenize(&Templates::expand(t, "")));
        }
        words.extend(COLORS.iter().map(|s| s.to_string()));
        words.extend(SHAPES.iter().map(|s| s.to_string()));
        Self::from_tokens(words)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Token ids of `text`; errors on an empty sequence or unknown word.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        let toks = tokenize(text);
        if toks.is_empty() {
            return Err(Error::Empty("token sequence"));
        }
        toks.into_iter()
            .map(|t| self.index.get(&t).copied().ok_or(Error::UnknownToken(t)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_lists() {
        assert_eq!(Templates::full().len(), 80);
        assert_eq!(Templates::fast().len(), 5);
        assert!(Templates::full().as_slice().contains(&"a photo of a {}.".to_string()));
    }

    #[test]
    fn blank_template_tokens() {
        let blank = Templates::expand("a photo of a {}.", "");
        assert_eq!(tokenize(&blank), ["a", "photo", "of", "a", "."]);
        assert_eq!(
            tokenize("A photo of a red circle."),
            ["a", "photo", "of", "a", "red", "circle", "."]
        );
    }

    #[test]
    fn vocab_is_small_and_closed() {
        let v = Vocab::standard();
        assert!(v.len() < 120, "{}", v.len());
        for t in Templates::full().as_slice() {
            v.encode(&Templates::expand(t, "purple diamond")).unwrap();
        }
        assert!(matches!(v.encode("a photo of a dog"), Err(Error::UnknownToken(_))));
        assert!(matches!(v.encode("  "), Err(Error::Empty(_))));
    }

    #[test]
    fn template_validation() {
        assert!(Templates::parse("no slot here").is_err());
        assert!(Templates::parse("").is_err());
        assert_eq!(Templates::parse("x {}\n\n y {}").unwrap().len(), 2);
    }
}
