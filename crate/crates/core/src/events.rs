//! Raw question/answer event log: data model, CSV parsing and sample filtering.
//!
//! Timestamps are integer seconds since the Unix epoch. The events file is a
//! UTF-8 CSV with the header
//! `user_id,kind,post_id,parent_post_id,timestamp,score,tags`.

use std::collections::HashMap;
use std::io::{Read, Write};

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type UserId = u64;
pub type PostId = u64;
/// Seconds since the Unix epoch.
pub type Timestamp = i64;

pub const HOUR: i64 = 3_600;
pub const DAY: i64 = 86_400;

pub const EVENTS_HEADER: [&str; 7] = [
    "user_id",
    "kind",
    "post_id",
    "parent_post_id",
    "timestamp",
    "score",
    "tags",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EventKind {
    Question,
    Answer,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Question => "question",
            EventKind::Answer => "answer",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub user_id: UserId,
    pub kind: EventKind,
    pub post_id: PostId,
    /// Present exactly when `kind` is `Answer`.
    pub parent_post_id: Option<PostId>,
    pub timestamp: Timestamp,
    pub score: i32,
    /// Non-empty for questions; the first tag is the top-level tag.
    pub tags: Vec<String>,
}

impl Event {
    pub fn question(user_id: UserId, post_id: PostId, timestamp: Timestamp, tags: &[&str]) -> Self {
        Event {
            user_id,
            kind: EventKind::Question,
            post_id,
            parent_post_id: None,
            timestamp,
            score: 0,
            tags: tags.iter().map(|t| t.to_string()).collect(),
        }
    }

    pub fn answer(
        user_id: UserId,
        post_id: PostId,
        parent: PostId,
        timestamp: Timestamp,
        score: i32,
    ) -> Self {
        Event {
            user_id,
            kind: EventKind::Answer,
            post_id,
            parent_post_id: Some(parent),
            timestamp,
            score,
            tags: Vec::new(),
        }
    }

    pub fn is_question(&self) -> bool {
        self.kind == EventKind::Question
    }
}

pub fn format_timestamp(ts: Timestamp) -> String {
    DateTime::<Utc>::from_timestamp(ts, 0)
        .map(|dt| dt.to_rfc3339_opts(SecondsFormat::Secs, true))
        .unwrap_or_else(|| ts.to_string())
}

pub fn parse_timestamp(raw: &str) -> std::result::Result<Timestamp, String> {
    DateTime::parse_from_rfc3339(raw.trim())
        .map(|dt| dt.with_timezone(&Utc).timestamp())
        .map_err(|e| format!("`{raw}` is not an ISO-8601 timestamp: {e}"))
}

/// An immutable, time-sorted event log with lookup indices.
#[derive(Debug, Clone)]
pub struct Corpus {
    events: Vec<Event>,
    start: Timestamp,
    end: Timestamp,
    orphaned: Vec<bool>,
    questions: HashMap<PostId, usize>,
    answers_to: HashMap<PostId, Vec<usize>>,
    by_user: HashMap<UserId, Vec<usize>>,
}

impl Corpus {
    /// Builds a corpus. When `bounds` is `None` the bounds are the earliest and
    /// latest event timestamps.
    pub fn new(mut events: Vec<Event>, bounds: Option<(Timestamp, Timestamp)>) -> Result<Self> {
        for (i, e) in events.iter().enumerate() {
            match e.kind {
                EventKind::Question if e.parent_post_id.is_some() => {
                    return Err(Error::InvalidInput(format!(
                        "event {i}: question {} has a parent_post_id",
                        e.post_id
                    )))
                }
                EventKind::Question if e.tags.is_empty() => {
                    return Err(Error::InvalidInput(format!(
                        "event {i}: question {} has no tags",
                        e.post_id
                    )))
                }
                EventKind::Answer if e.parent_post_id.is_none() => {
                    return Err(Error::InvalidInput(format!(
                        "event {i}: answer {} has no parent_post_id",
                        e.post_id
                    )))
                }
                _ => {}
            }
        }
        events.sort_by_key(|e| (e.timestamp, e.post_id));

        let (start, end) = match bounds {
            Some((s, e)) => {
                if s > e {
                    return Err(Error::InvalidInput(format!(
                        "corpus start {s} is after corpus end {e}"
                    )));
                }
                if let Some(bad) = events
                    .iter()
                    .find(|ev| ev.timestamp < s || ev.timestamp > e)
                {
                    return Err(Error::InvalidInput(format!(
                        "post {} at {} lies outside the corpus bounds",
                        bad.post_id,
                        format_timestamp(bad.timestamp)
                    )));
                }
                (s, e)
            }
            None => (
                events.first().map_or(0, |e| e.timestamp),
                events.last().map_or(0, |e| e.timestamp),
            ),
        };

        let mut questions = HashMap::new();
        let mut answers_to: HashMap<PostId, Vec<usize>> = HashMap::new();
        let mut by_user: HashMap<UserId, Vec<usize>> = HashMap::new();
        for (i, e) in events.iter().enumerate() {
            by_user.entry(e.user_id).or_default().push(i);
            match e.kind {
                EventKind::Question => {
                    if questions.insert(e.post_id, i).is_some() {
                        return Err(Error::InvalidInput(format!(
                            "duplicate question post_id {}",
                            e.post_id
                        )));
                    }
                }
                EventKind::Answer => {
                    answers_to
                        .entry(e.parent_post_id.unwrap())
                        .or_default()
                        .push(i);
                }
            }
        }
        let orphaned = events
            .iter()
            .map(|e| match e.parent_post_id {
                Some(p) => !questions.contains_key(&p),
                None => false,
            })
            .collect();

        Ok(Corpus {
            events,
            start,
            end,
            orphaned,
            questions,
            answers_to,
            by_user,
        })
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn start(&self) -> Timestamp {
        self.start
    }

    pub fn end(&self) -> Timestamp {
        self.end
    }

    pub fn is_orphaned(&self, index: usize) -> bool {
        self.orphaned[index]
    }

    pub fn orphan_count(&self) -> usize {
        self.orphaned.iter().filter(|&&o| o).count()
    }

    pub fn question(&self, id: PostId) -> Option<&Event> {
        self.questions.get(&id).map(|&i| &self.events[i])
    }

    /// Question post ids in ascending order.
    pub fn question_ids(&self) -> Vec<PostId> {
        let mut ids: Vec<PostId> = self.questions.keys().copied().collect();
        ids.sort_unstable();
        ids
    }

    /// Answers to a question, in time order.
    pub fn answers_to(&self, question: PostId) -> impl Iterator<Item = &Event> {
        self.answers_to
            .get(&question)
            .into_iter()
            .flatten()
            .map(move |&i| &self.events[i])
    }

    /// All events by one user, in time order.
    pub fn user_events(&self, user: UserId) -> impl Iterator<Item = &Event> {
        self.by_user
            .get(&user)
            .into_iter()
            .flatten()
            .map(move |&i| &self.events[i])
    }

    pub(crate) fn user_event_indices(&self, user: UserId) -> &[usize] {
        self.by_user.get(&user).map_or(&[], |v| v.as_slice())
    }

    /// Whether an answer event helps somebody other than its author. Orphaned
    /// answers count as help.
    pub fn is_help(&self, answer: &Event) -> bool {
        match (answer.kind, answer.parent_post_id) {
            (EventKind::Answer, Some(parent)) => match self.question(parent) {
                Some(q) => q.user_id != answer.user_id,
                None => true,
            },
            _ => false,
        }
    }

    /// First answer to `question` with non-negative score from someone other
    /// than the asker, strictly after the question.
    pub fn first_qualifying_answer(&self, question: &Event) -> Option<Timestamp> {
        self.answers_to(question.post_id)
            .find(|a| {
                a.score >= 0 && a.user_id != question.user_id && a.timestamp > question.timestamp
            })
            .map(|a| a.timestamp)
    }

    pub fn is_self_answered(&self, question: &Event) -> bool {
        self.answers_to(question.post_id)
            .any(|a| a.user_id == question.user_id)
    }
}

pub fn parse_events<R: Read>(input: R, bounds: Option<(Timestamp, Timestamp)>) -> Result<Corpus> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(input);
    let header = reader.headers()?.clone();
    let got: Vec<&str> = header.iter().map(str::trim).collect();
    if got != EVENTS_HEADER {
        return Err(Error::Parse {
            line: 1,
            field: "header",
            message: format!(
                "expected `{}`, found `{}`",
                EVENTS_HEADER.join(","),
                got.join(",")
            ),
        });
    }

    let mut events = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| Error::Parse {
            line,
            field: "row",
            message: e.to_string(),
        })?;
        events.push(parse_row(&record, line)?);
    }
    Corpus::new(events, bounds)
}

fn parse_row(record: &csv::StringRecord, line: usize) -> Result<Event> {
    let field = |idx: usize| record.get(idx).unwrap_or("").trim();
    let err = |field: &'static str, message: String| Error::Parse {
        line,
        field,
        message,
    };

    let user_id = field(0)
        .parse::<u64>()
        .map_err(|e| err("user_id", e.to_string()))?;
    let kind = match field(1) {
        "question" => EventKind::Question,
        "answer" => EventKind::Answer,
        other => {
            return Err(err(
                "kind",
                format!("expected question|answer, got `{other}`"),
            ))
        }
    };
    let post_id = field(2)
        .parse::<u64>()
        .map_err(|e| err("post_id", e.to_string()))?;
    let parent_post_id = match (kind, field(3)) {
        (EventKind::Question, "") => None,
        (EventKind::Question, _) => {
            return Err(err("parent_post_id", "must be empty for questions".into()))
        }
        (EventKind::Answer, "") => {
            return Err(err("parent_post_id", "required for answers".into()))
        }
        (EventKind::Answer, raw) => Some(
            raw.parse::<u64>()
                .map_err(|e| err("parent_post_id", e.to_string()))?,
        ),
    };
    let timestamp = parse_timestamp(field(4)).map_err(|m| err("timestamp", m))?;
    let score = field(5)
        .parse::<i32>()
        .map_err(|e| err("score", e.to_string()))?;
    let tags: Vec<String> = match field(6) {
        "" => Vec::new(),
        raw => raw.split('|').map(|t| t.trim().to_string()).collect(),
    };
    if kind == EventKind::Question && tags.is_empty() {
        return Err(err("tags", "questions need at least one tag".into()));
    }
    if tags.iter().any(String::is_empty) {
        return Err(err("tags", "empty tag".into()));
    }
    Ok(Event {
        user_id,
        kind,
        post_id,
        parent_post_id,
        timestamp,
        score,
        tags,
    })
}

pub fn write_events<W: Write>(corpus: &Corpus, out: W) -> Result<()> {
    write_event_rows(corpus.events(), out)
}

pub fn write_event_rows<W: Write>(events: &[Event], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(EVENTS_HEADER)?;
    for e in events {
        w.write_record([
            e.user_id.to_string(),
            e.kind.as_str().to_string(),
            e.post_id.to_string(),
            e.parent_post_id.map(|p| p.to_string()).unwrap_or_default(),
            format_timestamp(e.timestamp),
            e.score.to_string(),
            e.tags.join("|"),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Question ids eligible for analysis: the full window `[t - H, t + H]` lies
/// inside the corpus bounds and the asker never answered their own question.
pub fn filter_questions(corpus: &Corpus, half_length: i64) -> Vec<PostId> {
    assert!(half_length > 0, "half_length must be positive");
    corpus
        .question_ids()
        .into_iter()
        .filter(|&id| is_eligible(corpus, id, half_length))
        .collect()
}

pub fn is_eligible(corpus: &Corpus, question: PostId, half_length: i64) -> bool {
    let Some(q) = corpus.question(question) else {
        return false;
    };
    q.timestamp - half_length >= corpus.start()
        && q.timestamp + half_length <= corpus.end()
        && !corpus.is_self_answered(q)
}
