//! Dataset manifests: ingestion, filtering, vote-based upsampling, capping
//! and truncation flagging.

mod clean;
mod languages;

pub use clean::{clean_transcript, CleaningRule, Ruleset};
pub use languages::{language_table, lookup_language, support_language_name, LanguageMapping};

use std::collections::HashSet;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::normalize_and_tokenize;

/// Longest input, in seconds, the downstream recognizer accepts.
pub const MAX_AUDIO_SECONDS: f64 = 30.0;
/// Per-language sample cap applied after upsampling.
pub const DEFAULT_CAP: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Votes {
    /// Separate up and down counts (scripted-speech releases).
    Scripted { up_votes: u32, down_votes: u32 },
    /// A single vote count (spontaneous-speech releases).
    Spontaneous { single_votes: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ManifestKind {
    Scripted,
    Spontaneous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub audio_path: String,
    pub duration_s: f64,
    pub transcript: String,
    #[serde(flatten, default, skip_serializing_if = "Option::is_none")]
    pub votes: Option<Votes>,
    #[serde(default)]
    pub flagged: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub effective_duration_s: Option<f64>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub truncated: bool,
}

impl SampleRecord {
    pub fn new(id: impl Into<String>, duration_s: f64, transcript: impl Into<String>) -> Self {
        let id = id.into();
        SampleRecord {
            audio_path: format!("{id}.wav"),
            id,
            duration_s,
            transcript: transcript.into(),
            votes: None,
            flagged: false,
            effective_duration_s: None,
            truncated: false,
        }
    }

    pub fn with_votes(mut self, votes: Votes) -> Self {
        self.votes = Some(votes);
        self
    }

    pub fn with_flag(mut self, flagged: bool) -> Self {
        self.flagged = flagged;
        self
    }
}

/// `up − down` for scripted records, the single count for spontaneous ones.
pub fn vote_score(record: &SampleRecord) -> Result<i64> {
    match record.votes {
        Some(Votes::Scripted {
            up_votes,
            down_votes,
        }) => Ok(i64::from(up_votes) - i64::from(down_votes)),
        Some(Votes::Spontaneous { single_votes }) => Ok(i64::from(single_votes)),
        None => Err(Error::InvalidArgument(format!(
            "record `{}` has no votes",
            record.id
        ))),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub language: String,
    pub kind: ManifestKind,
    pub records: Vec<SampleRecord>,
}

impl Manifest {
    /// Validates that ids are unique and votes agree with `kind`.
    pub fn new(language: impl Into<String>, kind: ManifestKind, records: Vec<SampleRecord>) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::Parse(format!("duplicate record id `{}`", r.id)));
            }
            if !r.duration_s.is_finite() || r.duration_s < 0.0 {
                return Err(Error::Parse(format!(
                    "record `{}` has invalid duration {}",
                    r.id, r.duration_s
                )));
            }
            let agrees = matches!(
                (kind, r.votes),
                (_, None)
                    | (ManifestKind::Scripted, Some(Votes::Scripted { .. }))
                    | (ManifestKind::Spontaneous, Some(Votes::Spontaneous { .. }))
            );
            if !agrees {
                return Err(Error::Parse(format!(
                    "record `{}` votes do not match a {kind:?} manifest",
                    r.id
                )));
            }
        }
        Ok(Manifest {
            language: language.into(),
            kind,
            records,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn with_records(&self, records: Vec<SampleRecord>) -> Manifest {
        Manifest {
            language: self.language.clone(),
            kind: self.kind,
            records,
        }
    }

    /// Header-driven TSV reader. Recognized columns (first alias wins):
    /// id, path, duration (seconds), sentence, up_votes + down_votes or
    /// votes, flags. Missing ids fall back to the audio path.
    pub fn read_tsv(path: impl AsRef<Path>, language: &str) -> Result<Manifest> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_tsv_reader(file, language)
    }

    pub fn from_tsv_reader(reader: impl std::io::Read, language: &str) -> Result<Manifest> {
        let mut rdr = csv::ReaderBuilder::new()
            .delimiter(b'\t')
            .quoting(false)
            .flexible(false)
            .from_reader(reader);
        let headers = rdr
            .headers()
            .map_err(|e| Error::Parse(format!("manifest header: {e}")))?
            .clone();
        let column = |aliases: &[&str]| {
            aliases
                .iter()
                .find_map(|a| headers.iter().position(|h| h.trim().eq_ignore_ascii_case(a)))
        };
        let id_col = column(&["id", "sentence_id", "utterance_id"]);
        let path_col = column(&["path", "audio_path", "audio", "audio_file"]);
        let duration_col = column(&["duration", "duration_s", "duration_secs"])
            .ok_or_else(|| Error::Parse("manifest lacks a duration column".into()))?;
        let text_col = column(&["sentence", "transcript", "transcription", "text"])
            .ok_or_else(|| Error::Parse("manifest lacks a sentence column".into()))?;
        let up_col = column(&["up_votes"]);
        let down_col = column(&["down_votes"]);
        let votes_col = column(&["votes", "single_votes"]);
        let flags_col = column(&["flags", "flagged", "reported"]);
        if id_col.is_none() && path_col.is_none() {
            return Err(Error::Parse("manifest needs an id or path column".into()));
        }
        let kind = match (up_col, down_col, votes_col) {
            (Some(_), Some(_), _) => ManifestKind::Scripted,
            (Some(_), None, _) | (None, Some(_), _) => {
                return Err(Error::Parse(
                    "up_votes and down_votes must appear together".into(),
                ))
            }
            _ => ManifestKind::Spontaneous,
        };

        let mut records = Vec::new();
        for (line, row) in rdr.records().enumerate() {
            let row = row.map_err(|e| Error::Parse(format!("manifest row {}: {e}", line + 2)))?;
            let field = |col: usize| row.get(col).unwrap_or("").trim();
            let count = |col: usize| -> Result<u32> {
                let raw = field(col);
                if raw.is_empty() {
                    return Ok(0);
                }
                raw.parse().map_err(|_| {
                    Error::Parse(format!("manifest row {}: bad vote count `{raw}`", line + 2))
                })
            };
            let audio_path = path_col.map(field).unwrap_or_default().to_string();
            let id = match id_col {
                Some(c) => field(c).to_string(),
                None => audio_path.clone(),
            };
            let raw_duration = field(duration_col);
            let duration_s: f64 = raw_duration.parse().map_err(|_| {
                Error::Parse(format!("manifest row {}: bad duration `{raw_duration}`", line + 2))
            })?;
            let votes = match (kind, up_col, down_col, votes_col) {
                (ManifestKind::Scripted, Some(u), Some(d), _) => Some(Votes::Scripted {
                    up_votes: count(u)?,
                    down_votes: count(d)?,
                }),
                (ManifestKind::Spontaneous, _, _, Some(v)) => Some(Votes::Spontaneous {
                    single_votes: count(v)?,
                }),
                _ => None,
            };
            records.push(SampleRecord {
                id,
                audio_path,
                duration_s,
                transcript: row.get(text_col).unwrap_or("").to_string(),
                votes,
                flagged: flags_col.is_some_and(|c| parse_flag(field(c))),
                effective_duration_s: None,
                truncated: false,
            });
        }
        Manifest::new(language, kind, records)
    }

    pub fn write_jsonl(&self, out: impl Write) -> Result<()> {
        let mut out = std::io::BufWriter::new(out);
        for r in &self.records {
            serde_json::to_writer(&mut out, r)
                .map_err(|e| Error::Parse(format!("cannot encode record `{}`: {e}", r.id)))?;
            out.write_all(b"\n").map_err(|e| Error::io("<manifest output>", e))?;
        }
        out.flush().map_err(|e| Error::io("<manifest output>", e))
    }

    /// Reads records written by [`Manifest::write_jsonl`]. Upsampled output
    /// repeats ids, so uniqueness is not enforced here.
    pub fn read_jsonl(reader: impl BufRead, language: &str, kind: ManifestKind) -> Result<Manifest> {
        let mut records = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::io("<manifest input>", e))?;
            if line.trim().is_empty() {
                continue;
            }
            let record: SampleRecord = serde_json::from_str(&line)
                .map_err(|e| Error::Parse(format!("manifest line {}: {e}", i + 1)))?;
            records.push(record);
        }
        Ok(Manifest {
            language: language.to_string(),
            kind,
            records,
        })
    }
}

fn parse_flag(raw: &str) -> bool {
    !matches!(
        raw.to_ascii_lowercase().as_str(),
        "" | "0" | "false" | "no" | "none"
    )
}

/// Drops flagged records, zero-length audio and empty transcripts.
pub fn filter_samples(m: &Manifest) -> Manifest {
    m.with_records(
        m.records
            .iter()
            .filter(|r| {
                !r.flagged && r.duration_s > 0.0 && !normalize_and_tokenize(&r.transcript).is_empty()
            })
            .cloned()
            .collect(),
    )
}

/// Repeats every record `max(v, 0) + 1` times, copies adjacent.
pub fn upsample(m: &Manifest) -> Result<Manifest> {
    let mut records = Vec::with_capacity(m.len());
    for r in &m.records {
        let copies = vote_score(r)?.max(0) as usize + 1;
        records.extend(std::iter::repeat_n(r, copies).cloned());
    }
    Ok(m.with_records(records))
}

/// Keeps a seeded uniform subset of `cap` records, in original order.
pub fn cap_manifest(m: &Manifest, cap: usize, seed: u64) -> Result<Manifest> {
    if cap == 0 {
        return Err(Error::InvalidArgument("cap must be at least 1".into()));
    }
    if m.len() <= cap {
        return Ok(m.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = rand::seq::index::sample(&mut rng, m.len(), cap).into_vec();
    keep.sort_unstable();
    Ok(m.with_records(keep.into_iter().map(|i| m.records[i].clone()).collect()))
}

/// Marks records longer than `limit_s`; audio and transcripts are untouched.
pub fn flag_truncation(m: &Manifest, limit_s: f64) -> Manifest {
    m.with_records(
        m.records
            .iter()
            .map(|r| {
                let mut r = r.clone();
                if r.duration_s > limit_s {
                    r.effective_duration_s = Some(limit_s);
                    r.truncated = true;
                }
                r
            })
            .collect(),
    )
}

/// Applies `rules` to every transcript.
pub fn clean_manifest(m: &Manifest, rules: &Ruleset) -> Manifest {
    m.with_records(
        m.records
            .iter()
            .map(|r| SampleRecord {
                transcript: clean_transcript(&r.transcript, rules),
                ..r.clone()
            })
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scripted(id: &str, up: u32, down: u32) -> SampleRecord {
        SampleRecord::new(id, 2.0, "hello").with_votes(Votes::Scripted {
            up_votes: up,
            down_votes: down,
        })
    }

    fn spontaneous(id: &str, votes: u32) -> SampleRecord {
        SampleRecord::new(id, 2.0, "hello").with_votes(Votes::Spontaneous {
            single_votes: votes,
        })
    }

    #[test]
    fn vote_scores() {
        assert_eq!(vote_score(&scripted("a", 3, 1)).unwrap(), 2);
        assert_eq!(vote_score(&scripted("a", 0, 2)).unwrap(), -2);
        assert_eq!(vote_score(&spontaneous("a", 0)).unwrap(), 0);
        assert!(vote_score(&SampleRecord::new("a", 1.0, "x")).is_err());
    }

    #[test]
    fn filters_bad_records() {
        let m = Manifest::new(
            "cgg",
            ManifestKind::Spontaneous,
            vec![
                spontaneous("ok", 0),
                SampleRecord::new("blank", 1.0, "   "),
                spontaneous("flagged", 1).with_flag(true),
                SampleRecord::new("silent", 0.0, "words"),
            ],
        )
        .unwrap();
        let out = filter_samples(&m);
        assert_eq!(out.records.iter().map(|r| r.id.as_str()).collect::<Vec<_>>(), ["ok"]);
        assert_eq!(filter_samples(&out), out);
    }

    #[test]
    fn upsample_copies() {
        let m = Manifest::new(
            "bas",
            ManifestKind::Scripted,
            vec![scripted("two", 2, 0), scripted("zero", 0, 0), scripted("neg", 0, 2)],
        )
        .unwrap();
        let ids: Vec<_> = upsample(&m).unwrap().records.into_iter().map(|r| r.id).collect();
        assert_eq!(ids, ["two", "two", "two", "zero", "neg"]);
    }

    #[test]
    fn cap_is_seeded_and_order_preserving() {
        let records = (0..12).map(|i| spontaneous(&format!("r{i:02}"), 0)).collect();
        let m = Manifest::new("lg", ManifestKind::Spontaneous, records).unwrap();
        let a = cap_manifest(&m, 5, 42).unwrap();
        let b = cap_manifest(&m, 5, 42).unwrap();
        assert_eq!(a.len(), 5);
        assert_eq!(a, b);
        assert!(a.records.windows(2).all(|w| w[0].id < w[1].id));
        assert_eq!(cap_manifest(&m, 1, 0).unwrap().len(), 1);
        assert_eq!(cap_manifest(&m, DEFAULT_CAP, 0).unwrap(), m);
        assert!(cap_manifest(&m, 0, 0).is_err());
    }

    #[test]
    fn truncation_flags() {
        let m = Manifest::new(
            "sco",
            ManifestKind::Spontaneous,
            vec![
                SampleRecord::new("long", 45.2, "a"),
                SampleRecord::new("edge", 30.0, "b"),
                SampleRecord::new("short", 3.1, "c"),
            ],
        )
        .unwrap();
        let out = flag_truncation(&m, MAX_AUDIO_SECONDS);
        assert_eq!(out.records[0].effective_duration_s, Some(30.0));
        assert!(out.records[0].truncated);
        assert_eq!(out.records[0].transcript, "a");
        assert_eq!(out.records[1], m.records[1]);
        assert_eq!(out.records[2], m.records[2]);
        assert_eq!(flag_truncation(&out, MAX_AUDIO_SECONDS), out);
    }

    #[test]
    fn reads_scripted_tsv() {
        let tsv = "client_id\tpath\tsentence\tup_votes\tdown_votes\tduration\tflags\n\
                   c1\ta.mp3\tHello there\t2\t0\t3.5\t\n\
                   c2\tb.mp3\tBye\t0\t1\t40\t1\n";
        let m = Manifest::from_tsv_reader(tsv.as_bytes(), "ady").unwrap();
        assert_eq!(m.kind, ManifestKind::Scripted);
        assert_eq!(m.records[0].id, "a.mp3");
        assert_eq!(m.records[0].transcript, "Hello there");
        assert_eq!(
            m.records[1].votes,
            Some(Votes::Scripted { up_votes: 0, down_votes: 1 })
        );
        assert!(m.records[1].flagged && !m.records[0].flagged);
    }

    #[test]
    fn reads_spontaneous_tsv_and_rejects_bad_rows() {
        let tsv = "id\tpath\tduration\tsentence\tvotes\nx\tx.wav\t1.0\thi\t2\n";
        let m = Manifest::from_tsv_reader(tsv.as_bytes(), "cgg").unwrap();
        assert_eq!(m.kind, ManifestKind::Spontaneous);
        assert_eq!(vote_score(&m.records[0]).unwrap(), 2);

        let dup = "id\tduration\tsentence\nx\t1\ta\nx\t1\tb\n";
        assert!(Manifest::from_tsv_reader(dup.as_bytes(), "cgg").is_err());
        let bad = "id\tduration\tsentence\nx\tlong\ta\n";
        assert!(Manifest::from_tsv_reader(bad.as_bytes(), "cgg").is_err());
        let no_duration = "id\tsentence\nx\ta\n";
        assert!(Manifest::from_tsv_reader(no_duration.as_bytes(), "cgg").is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let m = Manifest::new(
            "bas",
            ManifestKind::Scripted,
            vec![scripted("a", 1, 0), scripted("b", 0, 0).with_flag(true)],
        )
        .unwrap();
        let m = flag_truncation(&upsample(&m).unwrap(), 1.0);
        let mut buf = Vec::new();
        m.write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.lines().next().unwrap().contains("\"up_votes\":1"));
        let back = Manifest::read_jsonl(buf.as_slice(), "bas", ManifestKind::Scripted).unwrap();
        assert_eq!(back, m);
    }
}
