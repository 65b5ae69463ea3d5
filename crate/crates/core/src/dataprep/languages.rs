use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const LANGUAGES_TSV: &str = include_str!("../../data/languages.tsv");
const SUPPORT_TSV: &str = include_str!("../../data/support_languages.tsv");

/// Target language with its support languages, decoding proxy and script.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LanguageMapping {
    pub target: String,
    pub name: String,
    pub family: String,
    pub supports: Vec<String>,
    pub proxy: String,
    pub script: String,
    /// No training data; evaluated only.
    pub test_only: bool,
}

fn tsv_rows(text: &'static str) -> impl Iterator<Item = Vec<&'static str>> {
    text.lines().skip(1).filter(|l| !l.is_empty()).map(|l| l.split('\t').collect())
}

pub fn language_table() -> &'static [LanguageMapping] {
    static TABLE: OnceLock<Vec<LanguageMapping>> = OnceLock::new();
    TABLE.get_or_init(|| {
        tsv_rows(LANGUAGES_TSV)
            .map(|f| LanguageMapping {
                target: f[0].to_string(),
                name: f[1].to_string(),
                family: f[2].to_string(),
                supports: f[3]
                    .split(',')
                    .filter(|s| !s.is_empty())
                    .map(String::from)
                    .collect(),
                proxy: f[4].to_string(),
                script: f[5].to_string(),
                test_only: f[6] == "true",
            })
            .collect()
    })
}

pub fn lookup_language(code: &str) -> Result<&'static LanguageMapping> {
    language_table()
        .iter()
        .find(|m| m.target == code)
        .ok_or_else(|| Error::UnknownLanguage(code.to_string()))
}

pub fn support_language_name(code: &str) -> Option<&'static str> {
    tsv_rows(SUPPORT_TSV).find(|f| f[0] == code).map(|f| f[1])
}
