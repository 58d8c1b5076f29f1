//! Pre-treatment matching covariates and tenure buckets.

use std::collections::HashMap;
use std::fmt;
use std::io::{Read, Write};

use chrono::{DateTime, Datelike, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{Corpus, PostId, Timestamp, DAY};
use crate::windows::ObservationWindow;

/// Right-closed tenure strata in days: `[0,7]`, `(7,30]`, ..., `(2190,inf)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TenureBucket {
    UnderWeek,
    WeekToMonth,
    OneToSixMonths,
    SixToTwelveMonths,
    OneToThreeYears,
    ThreeToSixYears,
    OverSixYears,
}

impl TenureBucket {
    pub const ALL: [TenureBucket; 7] = [
        TenureBucket::UnderWeek,
        TenureBucket::WeekToMonth,
        TenureBucket::OneToSixMonths,
        TenureBucket::SixToTwelveMonths,
        TenureBucket::OneToThreeYears,
        TenureBucket::ThreeToSixYears,
        TenureBucket::OverSixYears,
    ];

    const UPPER: [f64; 7] = [7.0, 30.0, 180.0, 365.0, 1095.0, 2190.0, f64::INFINITY];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn label(self) -> &'static str {
        match self {
            TenureBucket::UnderWeek => "<1W",
            TenureBucket::WeekToMonth => "1W-1M",
            TenureBucket::OneToSixMonths => "1-6M",
            TenureBucket::SixToTwelveMonths => "6-12M",
            TenureBucket::OneToThreeYears => "1-3Y",
            TenureBucket::ThreeToSixYears => "3-6Y",
            TenureBucket::OverSixYears => ">6Y",
        }
    }

    pub fn from_label(label: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|b| b.label() == label)
    }

    /// Lower bound in days; exclusive except for the first bucket.
    pub fn lower_days(self) -> f64 {
        match self.index() {
            0 => 0.0,
            i => Self::UPPER[i - 1],
        }
    }

    /// Upper bound in days, inclusive (infinite for the last bucket).
    pub fn upper_days(self) -> f64 {
        Self::UPPER[self.index()]
    }

    pub fn contains(self, days: f64) -> bool {
        let above = if self.index() == 0 {
            days >= 0.0
        } else {
            days > self.lower_days()
        };
        above && days <= self.upper_days()
    }
}

impl fmt::Display for TenureBucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

pub fn bucket_of(tenure_days: f64) -> Result<TenureBucket> {
    if !(tenure_days >= 0.0) {
        return Err(Error::InvalidInput(format!(
            "tenure must be non-negative, got {tenure_days}"
        )));
    }
    Ok(TenureBucket::ALL
        .into_iter()
        .find(|b| tenure_days <= b.upper_days())
        .unwrap_or(TenureBucket::OverSixYears))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchingCovariates {
    pub user_tenure_days: f64,
    pub num_questions_asked_at: u32,
    pub num_help_provided_at: u32,
    pub num_questions_asked_30d: u32,
    pub num_help_provided_30d: u32,
    pub num_questions_asked_7d: u32,
    pub num_help_provided_7d: u32,
    pub tag_answer_rate_avg: f64,
    pub calendar_year: i32,
    pub top_level_tag: String,
}

pub const PROPENSITY_FEATURES: [&str; 8] = [
    "user_tenure",
    "asked_at",
    "help_at",
    "asked_30d",
    "help_30d",
    "asked_7d",
    "help_7d",
    "tag_answer_rate",
];

/// Which propensity features are counts (log1p-transformed before fitting).
pub const FEATURE_IS_COUNT: [bool; 8] = [false, true, true, true, true, true, true, false];

impl MatchingCovariates {
    /// Raw values of the propensity covariates, in `PROPENSITY_FEATURES` order.
    pub fn features(&self) -> [f64; 8] {
        [
            self.user_tenure_days,
            self.num_questions_asked_at as f64,
            self.num_help_provided_at as f64,
            self.num_questions_asked_30d as f64,
            self.num_help_provided_30d as f64,
            self.num_questions_asked_7d as f64,
            self.num_help_provided_7d as f64,
            self.tag_answer_rate_avg,
        ]
    }

    pub fn tenure_bucket(&self) -> TenureBucket {
        bucket_of(self.user_tenure_days).unwrap_or(TenureBucket::UnderWeek)
    }
}

#[derive(Debug, Default, Clone)]
struct AnswerHistory {
    question_times: Vec<Timestamp>,
    answer_times: Vec<Timestamp>,
}

impl AnswerHistory {
    fn counts_before(&self, t: Timestamp) -> (usize, usize) {
        (
            self.question_times.partition_point(|&q| q < t),
            self.answer_times.partition_point(|&a| a < t),
        )
    }
}

/// Time-indexed per-tag answer history, built once per corpus.
#[derive(Debug, Clone)]
pub struct CovariateContext<'a> {
    corpus: &'a Corpus,
    tags: HashMap<String, AnswerHistory>,
    global: AnswerHistory,
}

impl<'a> CovariateContext<'a> {
    pub fn new(corpus: &'a Corpus) -> Self {
        let mut tags: HashMap<String, AnswerHistory> = HashMap::new();
        let mut global = AnswerHistory::default();
        for e in corpus.events().iter().filter(|e| e.is_question()) {
            let answered = corpus.first_qualifying_answer(e);
            global.question_times.push(e.timestamp);
            global.answer_times.extend(answered);
            for tag in &e.tags {
                let h = tags.entry(tag.clone()).or_default();
                h.question_times.push(e.timestamp);
                h.answer_times.extend(answered);
            }
        }
        global.answer_times.sort_unstable();
        for h in tags.values_mut() {
            h.answer_times.sort_unstable();
        }
        CovariateContext {
            corpus,
            tags,
            global,
        }
    }

    /// Share of earlier questions in `tag` answered before `t`; tags without
    /// history fall back to the global share (0 when nothing was asked yet).
    pub fn tag_answer_rate(&self, tag: &str, t: Timestamp) -> f64 {
        let (n, a) = self
            .tags
            .get(tag)
            .map(|h| h.counts_before(t))
            .unwrap_or((0, 0));
        if n > 0 {
            return a as f64 / n as f64;
        }
        let (n, a) = self.global.counts_before(t);
        if n > 0 {
            a as f64 / n as f64
        } else {
            0.0
        }
    }

    pub fn compute(&self, window: &ObservationWindow) -> Result<MatchingCovariates> {
        let corpus = self.corpus;
        let q = corpus
            .question(window.question_id)
            .ok_or(Error::QuestionNotFound(window.question_id))?;
        let ws = window.t_window_start;

        let mut user_events = corpus.user_events(window.user_id).peekable();
        let first = user_events.peek().map(|e| e.timestamp);
        let tenure = match first {
            Some(f) if f < ws => (ws - f) as f64 / DAY as f64,
            _ => 0.0,
        };

        let (mut asked, mut helped) = ([0u32; 3], [0u32; 3]);
        for e in user_events.take_while(|e| e.timestamp < ws) {
            let age = ws - e.timestamp;
            let slots = [true, age <= 30 * DAY, age <= 7 * DAY];
            let counter = if e.is_question() {
                &mut asked
            } else if corpus.is_help(e) {
                &mut helped
            } else {
                continue;
            };
            for (c, hit) in counter.iter_mut().zip(slots) {
                *c += hit as u32;
            }
        }

        let rate = q
            .tags
            .iter()
            .map(|t| self.tag_answer_rate(t, ws))
            .sum::<f64>()
            / q.tags.len() as f64;
        let calendar_year = DateTime::<Utc>::from_timestamp(q.timestamp, 0)
            .map(|d| d.year())
            .ok_or_else(|| Error::TimestampRange(q.timestamp.to_string()))?;

        Ok(MatchingCovariates {
            user_tenure_days: tenure,
            num_questions_asked_at: asked[0],
            num_help_provided_at: helped[0],
            num_questions_asked_30d: asked[1],
            num_help_provided_30d: helped[1],
            num_questions_asked_7d: asked[2],
            num_help_provided_7d: helped[2],
            tag_answer_rate_avg: rate,
            calendar_year,
            top_level_tag: q.tags[0].clone(),
        })
    }
}

pub fn compute_covariates(
    corpus: &Corpus,
    window: &ObservationWindow,
) -> Result<MatchingCovariates> {
    CovariateContext::new(corpus).compute(window)
}

const COVARIATES_HEADER: [&str; 12] = [
    "window_id",
    "user_tenure",
    "asked_at",
    "help_at",
    "asked_30d",
    "help_30d",
    "asked_7d",
    "help_7d",
    "tag_answer_rate",
    "calendar_year",
    "top_tag",
    "treated",
];

pub fn write_covariates<W: Write>(
    rows: &[(PostId, MatchingCovariates, bool)],
    out: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(COVARIATES_HEADER)?;
    for (id, c, treated) in rows {
        w.write_record([
            id.to_string(),
            format!("{:.6}", c.user_tenure_days),
            c.num_questions_asked_at.to_string(),
            c.num_help_provided_at.to_string(),
            c.num_questions_asked_30d.to_string(),
            c.num_help_provided_30d.to_string(),
            c.num_questions_asked_7d.to_string(),
            c.num_help_provided_7d.to_string(),
            format!("{:.12}", c.tag_answer_rate_avg),
            c.calendar_year.to_string(),
            c.top_level_tag.clone(),
            (*treated as u8).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_covariates<R: Read>(input: R) -> Result<Vec<(PostId, MatchingCovariates, bool)>> {
    let mut reader = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let rec = rec?;
        let get = |idx: usize| rec.get(idx).unwrap_or("");
        let field = |idx: usize| COVARIATES_HEADER[idx];
        macro_rules! num {
            ($idx:expr, $t:ty) => {
                get($idx).parse::<$t>().map_err(|e| Error::Parse {
                    line,
                    field: field($idx),
                    message: e.to_string(),
                })?
            };
        }
        out.push((
            num!(0, u64),
            MatchingCovariates {
                user_tenure_days: num!(1, f64),
                num_questions_asked_at: num!(2, u32),
                num_help_provided_at: num!(3, u32),
                num_questions_asked_30d: num!(4, u32),
                num_help_provided_30d: num!(5, u32),
                num_questions_asked_7d: num!(6, u32),
                num_help_provided_7d: num!(7, u32),
                tag_answer_rate_avg: num!(8, f64),
                calendar_year: num!(9, i32),
                top_level_tag: get(10).to_string(),
            },
            get(11) == "1",
        ));
    }
    Ok(out)
}
