//! Canonical record model shared by every pipeline stage.
//!
//! A [`RawRecord`] is one user-authored text from one of the four supported
//! platforms, carrying a source-specific metadata block that is validated
//! strictly (no missing keys, no extras). A [`CleanRecord`] is the same
//! record after LLM rewriting, optionally annotated with quality and
//! harmfulness labels. A [`UserLog`] is the chronological record sequence of
//! one author on one platform.
//!
//! Raw platform dumps are dirty, so [`parse_records`] never aborts on a bad
//! line: malformed lines go to a reject stream with their line number and a
//! reason, and only stream-level I/O failures are fatal.

use std::collections::BTreeSet;
use std::fmt;
use std::io::BufRead;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// The four supported platforms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceKind {
    Reddit,
    Twitter,
    Blogger,
    Amazon,
}

impl SourceKind {
    pub const ALL: [SourceKind; 4] = [
        SourceKind::Reddit,
        SourceKind::Twitter,
        SourceKind::Blogger,
        SourceKind::Amazon,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SourceKind::Reddit => "reddit",
            SourceKind::Twitter => "twitter",
            SourceKind::Blogger => "blogger",
            SourceKind::Amazon => "amazon",
        }
    }
}

impl fmt::Display for SourceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SourceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reddit" => Ok(SourceKind::Reddit),
            "twitter" => Ok(SourceKind::Twitter),
            "blogger" => Ok(SourceKind::Blogger),
            "amazon" => Ok(SourceKind::Amazon),
            other => Err(Error::data(format!("unknown source kind: {other:?}"))),
        }
    }
}

/// Upstream author annotations that disqualify a Reddit post.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AuthorFlag {
    Bot,
    Moderator,
    Deleted,
    System,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AccountKind {
    Personal,
    Corporate,
    Brand,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RedditMeta {
    pub score: i64,
    pub num_comments: i64,
    pub author_flags: BTreeSet<AuthorFlag>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TwitterMeta {
    pub is_retweet: bool,
    pub is_quote: bool,
    pub account_kind: AccountKind,
    pub is_ad_like: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BloggerMeta {}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AmazonMeta {
    pub item_id: String,
    pub item_name: String,
    pub rating: u8,
}

/// Source-specific metadata. The variant always matches the record's
/// [`SourceKind`]; the pairing is enforced at parse time.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(untagged)]
pub enum RecordMeta {
    Reddit(RedditMeta),
    Twitter(TwitterMeta),
    Blogger(BloggerMeta),
    Amazon(AmazonMeta),
}

impl RecordMeta {
    pub fn source_kind(&self) -> SourceKind {
        match self {
            RecordMeta::Reddit(_) => SourceKind::Reddit,
            RecordMeta::Twitter(_) => SourceKind::Twitter,
            RecordMeta::Blogger(_) => SourceKind::Blogger,
            RecordMeta::Amazon(_) => SourceKind::Amazon,
        }
    }

    pub fn as_reddit(&self) -> Option<&RedditMeta> {
        match self {
            RecordMeta::Reddit(m) => Some(m),
            _ => None,
        }
    }

    pub fn as_twitter(&self) -> Option<&TwitterMeta> {
        match self {
            RecordMeta::Twitter(m) => Some(m),
            _ => None,
        }
    }

    pub fn as_amazon(&self) -> Option<&AmazonMeta> {
        match self {
            RecordMeta::Amazon(m) => Some(m),
            _ => None,
        }
    }

    /// Parses and validates a metadata block against the declared source's
    /// schema. The error string is a human-readable reject reason.
    fn parse(source: SourceKind, value: serde_json::Value) -> std::result::Result<Self, String> {
        let wrap = |e: serde_json::Error| format!("invalid {source} meta: {e}");
        match source {
            SourceKind::Reddit => serde_json::from_value(value)
                .map(RecordMeta::Reddit)
                .map_err(wrap),
            SourceKind::Twitter => serde_json::from_value(value)
                .map(RecordMeta::Twitter)
                .map_err(wrap),
            SourceKind::Blogger => serde_json::from_value(value)
                .map(RecordMeta::Blogger)
                .map_err(wrap),
            SourceKind::Amazon => {
                let meta: AmazonMeta = serde_json::from_value(value).map_err(wrap)?;
                if !(1..=5).contains(&meta.rating) {
                    return Err(format!("rating out of range 1..=5: {}", meta.rating));
                }
                Ok(RecordMeta::Amazon(meta))
            }
        }
    }
}

/// One user-authored text as it appears in a platform dump.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RawRecord {
    pub record_id: String,
    pub source: SourceKind,
    pub author_id: String,
    /// UTC seconds. Stored opaquely; only the ordering is ever used.
    pub timestamp: i64,
    pub text: String,
    pub meta: RecordMeta,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecordWire {
    record_id: String,
    source: SourceKind,
    author_id: String,
    timestamp: i64,
    text: String,
    meta: serde_json::Value,
}

impl RawRecordWire {
    fn validate(self) -> std::result::Result<RawRecord, String> {
        if self.timestamp < 0 {
            return Err(format!("negative timestamp: {}", self.timestamp));
        }
        let meta = RecordMeta::parse(self.source, self.meta)?;
        Ok(RawRecord {
            record_id: self.record_id,
            source: self.source,
            author_id: self.author_id,
            timestamp: self.timestamp,
            text: self.text,
            meta,
        })
    }
}

impl<'de> Deserialize<'de> for RawRecord {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        RawRecordWire::deserialize(deserializer)?
            .validate()
            .map_err(D::Error::custom)
    }
}

/// Three-level quality label assigned by the scoring stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Quality {
    High,
    Medium,
    Low,
}

/// A record after rewriting. Quality and harmfulness stay unset until the
/// scoring stage fills them in.
#[derive(Clone, Debug, PartialEq)]
pub struct CleanRecord {
    pub record_id: String,
    pub source: SourceKind,
    pub author_id: String,
    pub timestamp: i64,
    /// Original text, retained for audit.
    pub text: String,
    pub meta: RecordMeta,
    pub rewritten_text: String,
    pub quality: Option<Quality>,
    pub harmful: Option<bool>,
}

impl CleanRecord {
    pub fn from_raw(raw: RawRecord, rewritten_text: String) -> Self {
        CleanRecord {
            record_id: raw.record_id,
            source: raw.source,
            author_id: raw.author_id,
            timestamp: raw.timestamp,
            text: raw.text,
            meta: raw.meta,
            rewritten_text,
            quality: None,
            harmful: None,
        }
    }

    /// A record may flow into synthesis only when scored high-quality and
    /// non-harmful.
    pub fn is_admissible(&self) -> bool {
        self.quality == Some(Quality::High) && self.harmful == Some(false)
    }
}

#[derive(Serialize)]
struct CleanRecordSer<'a> {
    record_id: &'a str,
    source: SourceKind,
    author_id: &'a str,
    timestamp: i64,
    text: &'a str,
    meta: &'a RecordMeta,
    rewritten_text: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    quality: Option<Quality>,
    #[serde(skip_serializing_if = "Option::is_none")]
    harmful: Option<bool>,
}

impl Serialize for CleanRecord {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        CleanRecordSer {
            record_id: &self.record_id,
            source: self.source,
            author_id: &self.author_id,
            timestamp: self.timestamp,
            text: &self.text,
            meta: &self.meta,
            rewritten_text: &self.rewritten_text,
            quality: self.quality,
            harmful: self.harmful,
        }
        .serialize(serializer)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CleanRecordWire {
    record_id: String,
    source: SourceKind,
    author_id: String,
    timestamp: i64,
    text: String,
    meta: serde_json::Value,
    rewritten_text: String,
    #[serde(default)]
    quality: Option<Quality>,
    #[serde(default)]
    harmful: Option<bool>,
}

impl<'de> Deserialize<'de> for CleanRecord {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let wire = CleanRecordWire::deserialize(deserializer)?;
        if wire.timestamp < 0 {
            return Err(D::Error::custom(format!(
                "negative timestamp: {}",
                wire.timestamp
            )));
        }
        let meta = RecordMeta::parse(wire.source, wire.meta).map_err(D::Error::custom)?;
        Ok(CleanRecord {
            record_id: wire.record_id,
            source: wire.source,
            author_id: wire.author_id,
            timestamp: wire.timestamp,
            text: wire.text,
            meta,
            rewritten_text: wire.rewritten_text,
            quality: wire.quality,
            harmful: wire.harmful,
        })
    }
}

/// Chronological record sequence of one author on one platform.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserLog {
    pub user_id: String,
    pub source: SourceKind,
    pub records: Vec<CleanRecord>,
}

/// One rejected input line: its 1-based line number and why it was dropped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RejectEntry {
    pub line_no: usize,
    pub reason: String,
}

/// Result of parsing one dump file: accepted records in input order plus the
/// reject stream.
#[derive(Clone, Debug, Default)]
pub struct ParseOutcome {
    pub records: Vec<RawRecord>,
    pub rejects: Vec<RejectEntry>,
}

/// Parses a line-delimited dump for one declared source.
///
/// Accepted records come back in input order. A line is rejected — never
/// fatal — when it is malformed JSON, violates the source's meta schema,
/// declares a different source than `source`, or reuses a record_id already
/// seen in this stream. Only I/O failures abort.
pub fn parse_records(reader: impl BufRead, source: SourceKind) -> Result<ParseOutcome> {
    let mut lines = Vec::new();
    for line in reader.lines() {
        lines.push(line.map_err(|e| Error::io("<input stream>", e))?);
    }
    Ok(parse_lines(&lines, source))
}

/// [`parse_records`] over a file on disk.
pub fn parse_records_file(path: &Path, source: SourceKind) -> Result<ParseOutcome> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_records(std::io::BufReader::new(file), source)
}

fn parse_lines(lines: &[String], source: SourceKind) -> ParseOutcome {
    // Per-line parsing is independent; the dedup pass below restores the
    // sequential invariant.
    let parsed: Vec<std::result::Result<Option<RawRecord>, String>> = lines
        .par_iter()
        .map(|line| {
            if line.trim().is_empty() {
                return Ok(None);
            }
            let wire: RawRecordWire =
                serde_json::from_str(line).map_err(|e| format!("malformed line: {e}"))?;
            if wire.source != source {
                return Err(format!(
                    "source mismatch: expected {source}, got {}",
                    wire.source
                ));
            }
            wire.validate().map(Some)
        })
        .collect();

    let mut outcome = ParseOutcome::default();
    let mut seen_ids: BTreeSet<String> = BTreeSet::new();
    for (idx, item) in parsed.into_iter().enumerate() {
        match item {
            Ok(None) => {}
            Ok(Some(record)) => {
                if seen_ids.contains(&record.record_id) {
                    outcome.rejects.push(RejectEntry {
                        line_no: idx + 1,
                        reason: format!("duplicate record_id: {}", record.record_id),
                    });
                } else {
                    seen_ids.insert(record.record_id.clone());
                    outcome.records.push(record);
                }
            }
            Err(reason) => outcome.rejects.push(RejectEntry {
                line_no: idx + 1,
                reason,
            }),
        }
    }
    outcome
}

/// Groups records into one [`UserLog`] per distinct (author, source) pair,
/// each sorted ascending by (timestamp, record_id). Output order is
/// deterministic: ascending by (author_id, source).
pub fn group_by_user(records: Vec<CleanRecord>) -> Vec<UserLog> {
    let mut by_user: std::collections::BTreeMap<(String, SourceKind), Vec<CleanRecord>> =
        std::collections::BTreeMap::new();
    for record in records {
        by_user
            .entry((record.author_id.clone(), record.source))
            .or_default()
            .push(record);
    }
    by_user
        .into_iter()
        .map(|((user_id, source), mut records)| {
            records.sort_by(|a, b| {
                (a.timestamp, a.record_id.as_str()).cmp(&(b.timestamp, b.record_id.as_str()))
            });
            UserLog {
                user_id,
                source,
                records,
            }
        })
        .collect()
}

/// Length as used by every filter rule: Unicode scalar characters of the
/// original text, not bytes.
pub fn char_len(text: &str) -> usize {
    text.chars().count()
}
