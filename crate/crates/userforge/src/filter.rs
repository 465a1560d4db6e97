//! Rule-based per-record filters for the four sources.
//!
//! Every filter is a pure function from record to verdict. A rejection names
//! the first failing rule in a fixed, documented order so audit logs are
//! reproducible run to run. Length rules always count Unicode scalar
//! characters of the original text (see [`crate::record::char_len`]).
//!
//! The interaction-graph k-core filter for Amazon lives in [`crate::kcore`].

use std::collections::BTreeMap;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::record::{char_len, AccountKind, RawRecord, SourceKind};

pub const REDDIT_MIN_SCORE: i64 = 2;
pub const REDDIT_MIN_COMMENTS: i64 = 2;
pub const POST_MIN_CHARS: usize = 300;
pub const REVIEW_MIN_CHARS: usize = 100;

/// Default first-person pronoun list for the Blogger rule. Matching is
/// case-insensitive on word boundaries.
pub const DEFAULT_PRONOUNS: [&str; 10] = [
    "i", "me", "my", "mine", "myself", "we", "us", "our", "ours", "ourselves",
];

/// Outcome of one rule filter: kept, or rejected by the named rule.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterVerdict {
    pub keep: bool,
    /// Identifier of the first failing rule; empty when kept.
    pub reason: String,
}

impl FilterVerdict {
    pub fn kept() -> Self {
        FilterVerdict {
            keep: true,
            reason: String::new(),
        }
    }

    pub fn rejected(reason: &str) -> Self {
        FilterVerdict {
            keep: false,
            reason: reason.to_string(),
        }
    }
}

/// Per-source rule filters with a configurable pronoun list.
#[derive(Debug)]
pub struct FilterEngine {
    pronoun_re: Regex,
}

impl Default for FilterEngine {
    fn default() -> Self {
        let defaults: Vec<String> = DEFAULT_PRONOUNS.iter().map(|p| p.to_string()).collect();
        // The default list is statically valid.
        FilterEngine::new(&defaults).expect("default pronoun list compiles")
    }
}

impl FilterEngine {
    pub fn new(pronouns: &[String]) -> Result<Self> {
        if pronouns.is_empty() {
            return Err(Error::config("pronoun list must not be empty"));
        }
        let alternation = pronouns
            .iter()
            .map(|p| regex::escape(p.trim()))
            .collect::<Vec<_>>()
            .join("|");
        let pattern = format!(r"(?i)\b(?:{alternation})\b");
        let pronoun_re = Regex::new(&pattern)
            .map_err(|e| Error::config(format!("invalid pronoun list: {e}")))?;
        Ok(FilterEngine { pronoun_re })
    }

    /// Dispatches to the rule set for the record's source.
    pub fn filter_record(&self, r: &RawRecord) -> Result<FilterVerdict> {
        match r.source {
            SourceKind::Reddit => self.filter_reddit(r),
            SourceKind::Twitter => self.filter_twitter(r),
            SourceKind::Blogger => self.filter_blogger(r),
            SourceKind::Amazon => self.filter_amazon(r),
        }
    }

    /// Keep iff score ≥ 2, num_comments ≥ 2, length ≥ 300, and no author
    /// flags. Rule order: score, num_comments, length, author_flags.
    pub fn filter_reddit(&self, r: &RawRecord) -> Result<FilterVerdict> {
        let meta = require_source(r, SourceKind::Reddit)?.as_reddit().unwrap();
        if meta.score < REDDIT_MIN_SCORE {
            return Ok(FilterVerdict::rejected("score"));
        }
        if meta.num_comments < REDDIT_MIN_COMMENTS {
            return Ok(FilterVerdict::rejected("num_comments"));
        }
        if char_len(&r.text) < POST_MIN_CHARS {
            return Ok(FilterVerdict::rejected("length"));
        }
        if !meta.author_flags.is_empty() {
            return Ok(FilterVerdict::rejected("author_flags"));
        }
        Ok(FilterVerdict::kept())
    }

    /// Keep iff length ≥ 300, not a retweet or quote, a personal account,
    /// and not ad-like. Rule order: length, retweet, quote, account_kind,
    /// ad_like.
    pub fn filter_twitter(&self, r: &RawRecord) -> Result<FilterVerdict> {
        let meta = require_source(r, SourceKind::Twitter)?.as_twitter().unwrap();
        if char_len(&r.text) < POST_MIN_CHARS {
            return Ok(FilterVerdict::rejected("length"));
        }
        if meta.is_retweet {
            return Ok(FilterVerdict::rejected("retweet"));
        }
        if meta.is_quote {
            return Ok(FilterVerdict::rejected("quote"));
        }
        if meta.account_kind != AccountKind::Personal {
            return Ok(FilterVerdict::rejected("account_kind"));
        }
        if meta.is_ad_like {
            return Ok(FilterVerdict::rejected("ad_like"));
        }
        Ok(FilterVerdict::kept())
    }

    /// Keep iff length ≥ 300 and the text contains at least one first-person
    /// pronoun. Rule order: length, no_first_person.
    pub fn filter_blogger(&self, r: &RawRecord) -> Result<FilterVerdict> {
        require_source(r, SourceKind::Blogger)?;
        if char_len(&r.text) < POST_MIN_CHARS {
            return Ok(FilterVerdict::rejected("length"));
        }
        if !self.pronoun_re.is_match(&r.text) {
            return Ok(FilterVerdict::rejected("no_first_person"));
        }
        Ok(FilterVerdict::kept())
    }

    /// Keep iff length ≥ 100.
    pub fn filter_amazon(&self, r: &RawRecord) -> Result<FilterVerdict> {
        require_source(r, SourceKind::Amazon)?;
        if char_len(&r.text) < REVIEW_MIN_CHARS {
            return Ok(FilterVerdict::rejected("length"));
        }
        Ok(FilterVerdict::kept())
    }
}

fn require_source(r: &RawRecord, expected: SourceKind) -> Result<&crate::record::RecordMeta> {
    if r.source != expected {
        return Err(Error::SourceMismatch {
            expected: expected.to_string(),
            got: r.source.to_string(),
        });
    }
    Ok(&r.meta)
}

/// Per-rule rejection counts for the stage's audit output.
pub fn rejection_histogram(verdicts: &[FilterVerdict]) -> BTreeMap<String, usize> {
    let mut histogram = BTreeMap::new();
    for verdict in verdicts {
        if !verdict.keep {
            *histogram.entry(verdict.reason.clone()).or_insert(0) += 1;
        }
    }
    histogram
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::record::{
        AmazonMeta, AuthorFlag, BloggerMeta, RecordMeta, RedditMeta, TwitterMeta,
    };
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn reddit(score: i64, num_comments: i64, len: usize, flags: &[AuthorFlag]) -> RawRecord {
        RawRecord {
            record_id: "r".into(),
            source: SourceKind::Reddit,
            author_id: "u".into(),
            timestamp: 0,
            text: "x".repeat(len),
            meta: RecordMeta::Reddit(RedditMeta {
                score,
                num_comments,
                author_flags: flags.iter().copied().collect::<BTreeSet<_>>(),
            }),
        }
    }

    fn twitter(len: usize, retweet: bool, quote: bool, kind: AccountKind, ad: bool) -> RawRecord {
        RawRecord {
            record_id: "t".into(),
            source: SourceKind::Twitter,
            author_id: "u".into(),
            timestamp: 0,
            text: "x".repeat(len),
            meta: RecordMeta::Twitter(TwitterMeta {
                is_retweet: retweet,
                is_quote: quote,
                account_kind: kind,
                is_ad_like: ad,
            }),
        }
    }

    fn blogger(text: String) -> RawRecord {
        RawRecord {
            record_id: "b".into(),
            source: SourceKind::Blogger,
            author_id: "u".into(),
            timestamp: 0,
            text,
            meta: RecordMeta::Blogger(BloggerMeta {}),
        }
    }

    fn amazon(len: usize) -> RawRecord {
        RawRecord {
            record_id: "a".into(),
            source: SourceKind::Amazon,
            author_id: "u".into(),
            timestamp: 0,
            text: "x".repeat(len),
            meta: RecordMeta::Amazon(AmazonMeta {
                item_id: "i".into(),
                item_name: "n".into(),
                rating: 5,
            }),
        }
    }

    #[test]
    fn reddit_boundary_values_keep() {
        let engine = FilterEngine::default();
        let v = engine.filter_reddit(&reddit(2, 2, 300, &[])).unwrap();
        assert!(v.keep);
        assert!(v.reason.is_empty());
    }

    #[test]
    fn reddit_low_score_rejects_with_score_reason() {
        let engine = FilterEngine::default();
        let v = engine.filter_reddit(&reddit(1, 10, 500, &[])).unwrap();
        assert_eq!(v, FilterVerdict::rejected("score"));
    }

    #[test]
    fn reddit_bot_flag_rejects_even_when_all_else_passes() {
        let engine = FilterEngine::default();
        let v = engine
            .filter_reddit(&reddit(10, 10, 500, &[AuthorFlag::Bot]))
            .unwrap();
        assert_eq!(v, FilterVerdict::rejected("author_flags"));
    }

    #[test]
    fn reddit_reason_is_first_failing_rule_in_order() {
        let engine = FilterEngine::default();
        // score and length both fail; score is checked first.
        let v = engine.filter_reddit(&reddit(0, 0, 10, &[AuthorFlag::Bot])).unwrap();
        assert_eq!(v.reason, "score");
        let v = engine.filter_reddit(&reddit(5, 0, 10, &[])).unwrap();
        assert_eq!(v.reason, "num_comments");
        let v = engine.filter_reddit(&reddit(5, 5, 10, &[AuthorFlag::Deleted])).unwrap();
        assert_eq!(v.reason, "length");
    }

    #[test]
    fn twitter_boundary_keeps() {
        let engine = FilterEngine::default();
        let v = engine
            .filter_twitter(&twitter(300, false, false, AccountKind::Personal, false))
            .unwrap();
        assert!(v.keep);
    }

    #[test]
    fn twitter_retweet_rejects() {
        let engine = FilterEngine::default();
        let v = engine
            .filter_twitter(&twitter(400, true, false, AccountKind::Personal, false))
            .unwrap();
        assert_eq!(v, FilterVerdict::rejected("retweet"));
    }

    #[test]
    fn twitter_brand_account_rejects() {
        let engine = FilterEngine::default();
        let v = engine
            .filter_twitter(&twitter(400, false, false, AccountKind::Brand, false))
            .unwrap();
        assert_eq!(v, FilterVerdict::rejected("account_kind"));
    }

    #[test]
    fn twitter_ad_like_rejects() {
        let engine = FilterEngine::default();
        let v = engine
            .filter_twitter(&twitter(400, false, false, AccountKind::Personal, true))
            .unwrap();
        assert_eq!(v, FilterVerdict::rejected("ad_like"));
    }

    #[test]
    fn blogger_with_pronoun_keeps() {
        let engine = FilterEngine::default();
        let mut text = "x".repeat(395);
        text.push_str(" my x");
        let v = engine.filter_blogger(&blogger(text)).unwrap();
        assert!(v.keep);
    }

    #[test]
    fn blogger_without_pronoun_rejects() {
        let engine = FilterEngine::default();
        let text = "the quick brown fox ".repeat(20);
        assert!(char_len(&text) >= 400);
        let v = engine.filter_blogger(&blogger(text)).unwrap();
        assert_eq!(v, FilterVerdict::rejected("no_first_person"));
    }

    #[test]
    fn blogger_short_text_rejects_on_length_even_with_pronoun() {
        let engine = FilterEngine::default();
        let mut text = "I think ".to_string();
        text.push_str(&"x".repeat(150));
        assert!(char_len(&text) < 300);
        let v = engine.filter_blogger(&blogger(text)).unwrap();
        assert_eq!(v, FilterVerdict::rejected("length"));
    }

    #[test]
    fn pronoun_match_respects_word_boundaries_and_case() {
        let engine = FilterEngine::default();
        let pad = "z".repeat(300);
        // "in", "him", "mine-sweeper" must not count; bare "I" must.
        let no_match = format!("{pad} in him sin is not personal");
        assert!(!engine.filter_blogger(&blogger(no_match)).unwrap().keep);
        let with_upper = format!("{pad} and then I left.");
        assert!(engine.filter_blogger(&blogger(with_upper)).unwrap().keep);
        let punctuated = format!("{pad} that was mine.");
        assert!(engine.filter_blogger(&blogger(punctuated)).unwrap().keep);
    }

    #[test]
    fn custom_pronoun_list_replaces_default() {
        let engine = FilterEngine::new(&["ich".to_string()]).unwrap();
        let pad = "z".repeat(300);
        assert!(engine
            .filter_blogger(&blogger(format!("{pad} ich denke")))
            .unwrap()
            .keep);
        assert!(!engine
            .filter_blogger(&blogger(format!("{pad} I think")))
            .unwrap()
            .keep);
    }

    #[test]
    fn amazon_boundary_keep_and_reject() {
        let engine = FilterEngine::default();
        assert!(engine.filter_amazon(&amazon(100)).unwrap().keep);
        assert_eq!(
            engine.filter_amazon(&amazon(99)).unwrap(),
            FilterVerdict::rejected("length")
        );
        assert_eq!(
            engine.filter_amazon(&amazon(0)).unwrap(),
            FilterVerdict::rejected("length")
        );
    }

    #[test]
    fn length_counts_characters_not_bytes() {
        let engine = FilterEngine::default();
        // 100 three-byte characters: 300 bytes but only 100 chars.
        let r = blogger("日".repeat(100));
        assert_eq!(
            engine.filter_blogger(&r).unwrap(),
            FilterVerdict::rejected("length")
        );
        let ok = format!("I {}", "日".repeat(298));
        assert!(engine.filter_blogger(&blogger(ok)).unwrap().keep);
    }

    #[test]
    fn wrong_source_is_an_error() {
        let engine = FilterEngine::default();
        let err = engine.filter_reddit(&amazon(200)).unwrap_err();
        assert!(matches!(err, Error::SourceMismatch { .. }));
        assert!(engine.filter_twitter(&reddit(5, 5, 400, &[])).is_err());
        assert!(engine.filter_blogger(&amazon(200)).is_err());
        assert!(engine.filter_amazon(&blogger("x".into())).is_err());
    }

    #[test]
    fn histogram_counts_rejections_only() {
        let verdicts = vec![
            FilterVerdict::kept(),
            FilterVerdict::rejected("length"),
            FilterVerdict::rejected("length"),
            FilterVerdict::rejected("score"),
        ];
        let histogram = rejection_histogram(&verdicts);
        assert_eq!(histogram.get("length"), Some(&2));
        assert_eq!(histogram.get("score"), Some(&1));
        assert_eq!(histogram.len(), 2);
    }

    proptest! {
        #[test]
        fn filters_are_pure(
            score in -5i64..10,
            comments in -5i64..10,
            len in 0usize..400,
        ) {
            let engine = FilterEngine::default();
            let r = reddit(score, comments, len, &[]);
            let a = engine.filter_reddit(&r).unwrap();
            let b = engine.filter_reddit(&r).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert_eq!(a.reason.is_empty(), a.keep);
            prop_assert_eq!(
                a.keep,
                score >= 2 && comments >= 2 && len >= 300
            );
        }
    }
}
