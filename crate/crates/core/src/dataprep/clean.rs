use std::path::Path;

use regex::Regex;
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};

/// Non-whitespace control characters.
const CONTROL_PATTERN: &str = r"[\p{Cc}&&[^\s]]";
const WHITESPACE_PATTERN: &str = r"\s+";

#[derive(Debug, Clone)]
pub enum CleaningRule {
    Replace { pattern: Regex, replacement: String },
    Nfc,
    Lowercase,
    Trim,
}

impl CleaningRule {
    pub fn replace(pattern: &str, replacement: &str) -> Result<Self> {
        let regex = Regex::new(pattern).map_err(|source| Error::Rule {
            pattern: pattern.to_string(),
            source,
        })?;
        Ok(CleaningRule::Replace {
            pattern: regex,
            replacement: replacement.to_string(),
        })
    }

    fn apply(&self, text: &str) -> String {
        match self {
            CleaningRule::Replace {
                pattern,
                replacement,
            } => pattern.replace_all(text, replacement.as_str()).into_owned(),
            CleaningRule::Nfc => text.nfc().collect(),
            CleaningRule::Lowercase => text.to_lowercase(),
            CleaningRule::Trim => text.trim().to_string(),
        }
    }
}

/// Ordered list of rules applied one after another.
#[derive(Debug, Clone)]
pub struct Ruleset(Vec<CleaningRule>);

impl Default for Ruleset {
    /// Strip control characters, collapse whitespace, NFC, trim.
    fn default() -> Self {
        Ruleset(vec![
            CleaningRule::replace(CONTROL_PATTERN, "").expect("valid pattern"),
            CleaningRule::replace(WHITESPACE_PATTERN, " ").expect("valid pattern"),
            CleaningRule::Nfc,
            CleaningRule::Trim,
        ])
    }
}

impl Ruleset {
    pub fn empty() -> Self {
        Ruleset(Vec::new())
    }

    pub fn new(rules: Vec<CleaningRule>) -> Self {
        Ruleset(rules)
    }

    pub fn rules(&self) -> &[CleaningRule] {
        &self.0
    }

    /// One rule per line: `@nfc`, `@lowercase`, `@trim`, `@default` (the
    /// default ruleset), or `<regex>\t<replacement>`. A regex without a tab
    /// deletes its matches. Blank lines and lines starting with `#` are
    /// skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut rules = Vec::new();
        for line in text.lines() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            match line.trim_end_matches('\r') {
                "@nfc" => rules.push(CleaningRule::Nfc),
                "@lowercase" => rules.push(CleaningRule::Lowercase),
                "@trim" => rules.push(CleaningRule::Trim),
                "@default" => rules.extend(Ruleset::default().0),
                directive if directive.starts_with('@') => {
                    return Err(Error::Parse(format!("unknown cleaning directive `{directive}`")))
                }
                rule => {
                    let (pattern, replacement) = rule.split_once('\t').unwrap_or((rule, ""));
                    rules.push(CleaningRule::replace(pattern, replacement)?);
                }
            }
        }
        Ok(Ruleset(rules))
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

pub fn clean_transcript(text: &str, rules: &Ruleset) -> String {
    rules
        .0
        .iter()
        .fold(text.to_string(), |acc, rule| rule.apply(&acc))
}
