use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Dense language index `0..L` within a [`LanguageRegistry`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LangId(pub u16);

impl LangId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for LangId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Bijection between language codes and dense ids.
///
/// Codes are kept sorted, so ordering by id is the same as ordering by code.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct LanguageRegistry {
    codes: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, LangId>,
}

impl LanguageRegistry {
    pub fn new<I, S>(codes: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut codes: Vec<String> = codes.into_iter().map(|c| c.as_ref().trim().to_lowercase()).collect();
        if let Some(bad) = codes.iter().find(|c| c.is_empty() || c.chars().any(char::is_whitespace)) {
            return Err(Error::config("languages", format!("invalid code {bad:?}")));
        }
        codes.sort();
        codes.dedup();
        if codes.len() > u16::MAX as usize {
            return Err(Error::config("languages", "too many languages"));
        }
        let index = codes.iter().enumerate().map(|(i, c)| (c.clone(), LangId(i as u16))).collect();
        Ok(Self { codes, index })
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn id(&self, code: &str) -> Option<LangId> {
        self.index.get(code).copied().or_else(|| {
            let lower = code.trim().to_lowercase();
            self.index.get(&lower).copied()
        })
    }

    pub fn require(&self, code: &str) -> Result<LangId> {
        self.id(code).ok_or_else(|| Error::UnknownLanguage(code.to_string()))
    }

    /// Panics if `id` was not issued by this registry.
    pub fn code(&self, id: LangId) -> &str {
        &self.codes[id.index()]
    }

    pub fn codes(&self) -> &[String] {
        &self.codes
    }

    pub fn ids(&self) -> impl Iterator<Item = LangId> + '_ {
        (0..self.codes.len()).map(|i| LangId(i as u16))
    }
}

impl TryFrom<Vec<String>> for LanguageRegistry {
    type Error = Error;

    fn try_from(codes: Vec<String>) -> Result<Self> {
        Self::new(codes)
    }
}

impl From<LanguageRegistry> for Vec<String> {
    fn from(reg: LanguageRegistry) -> Self {
        reg.codes
    }
}
