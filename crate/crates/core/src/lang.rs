//! Target-language codes and their control tokens.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

/// The twenty-one Europarl languages, in ISO 639-1 form.
pub const EUROPARL_LANGUAGES: [&str; 21] = [
    "bg", "cs", "da", "de", "el", "en", "es", "et", "fi", "fr", "hu", "it", "lt", "lv", "nl", "pl", "pt", "ro",
    "sk", "sl", "sv",
];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("unknown language code `{0}`")]
pub struct UnknownLanguage(pub String);

/// A registered target language.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Language(&'static str);

impl Language {
    pub fn new(code: &str) -> Result<Self, UnknownLanguage> {
        EUROPARL_LANGUAGES
            .iter()
            .find(|c| **c == code)
            .map(|c| Language(c))
            .ok_or_else(|| UnknownLanguage(code.to_string()))
    }

    pub fn code(&self) -> &'static str {
        self.0
    }

    /// The leading control token, `<lang:xx>`.
    pub fn token(&self) -> String {
        format!("<lang:{}>", self.0)
    }

    /// Inverse of [`Language::token`].
    pub fn from_token(token: &str) -> Option<Self> {
        token
            .strip_prefix("<lang:")
            .and_then(|rest| rest.strip_suffix('>'))
            .and_then(|code| Language::new(code).ok())
    }

    pub fn all() -> impl Iterator<Item = Language> {
        EUROPARL_LANGUAGES.iter().map(|c| Language(c))
    }
}

pub fn is_language_token(token: &str) -> bool {
    Language::from_token(token).is_some()
}

impl fmt::Display for Language {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.0)
    }
}

impl FromStr for Language {
    type Err = UnknownLanguage;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Language::new(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_round_trip() {
        let de = Language::new("de").unwrap();
        assert_eq!(de.token(), "<lang:de>");
        assert_eq!(Language::from_token("<lang:de>"), Some(de));
        assert_eq!(Language::from_token("<lang:xx>"), None);
        assert!(Language::new("zh").is_err());
        assert_eq!(Language::all().count(), 21);
    }
}
