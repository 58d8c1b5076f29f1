//! Question-centred observation windows and their counting-process expansion.
//!
//! A window spans `[t_question - H, t_question + H]` and is split into three
//! phases: pre-question, waiting, and post-answer. Controls have no answer, so
//! they get a synthetic transition at their matched partner's response time.
//! Interval rows are `(start, stop]` in hours since the window start.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::design::{DesignSpec, ModelKind, RtBin};
use crate::error::{Error, Result};
use crate::events::{
    format_timestamp, is_eligible, parse_timestamp, Corpus, PostId, Timestamp, UserId, HOUR,
};

pub const TREATMENT: &str = "treatment";
pub const PHASE_POST_QUESTION: &str = "phase_post_question";
pub const TREATED_POST_QUESTION: &str = "treated_post_question";
pub const PHASE_POST_ANSWER: &str = "phase_post_answer";
pub const IS_TREATED_ACTIVE: &str = "is_treated_active";
pub const RT_INTERACTION_ACTIVE: &str = "rt_interaction_active";
pub const RT_INTERACTION_POSTQ: &str = "rt_interaction_postq";

pub const MAIN_COVARIATES: [&str; 5] = [
    TREATMENT,
    PHASE_POST_QUESTION,
    TREATED_POST_QUESTION,
    PHASE_POST_ANSWER,
    IS_TREATED_ACTIVE,
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObservationWindow {
    pub question_id: PostId,
    pub user_id: UserId,
    pub t_window_start: Timestamp,
    pub t_question: Timestamp,
    /// First qualifying answer, for treated windows only.
    pub t_answer: Option<Timestamp>,
    pub t_window_end: Timestamp,
    pub treated: bool,
    /// Synthetic phase transition of a control window.
    pub synthetic_transition: Option<Timestamp>,
    /// Sorted times at which this user answered other users' questions.
    pub help_times: Vec<Timestamp>,
}

impl ObservationWindow {
    pub fn half_length(&self) -> i64 {
        self.t_question - self.t_window_start
    }

    /// The post-answer phase boundary: the actual answer or the synthetic one.
    pub fn transition(&self) -> Option<Timestamp> {
        self.t_answer.or(self.synthetic_transition)
    }

    /// Seconds from question to the (possibly synthetic) transition.
    pub fn response_time_secs(&self) -> Option<i64> {
        self.transition().map(|t| t - self.t_question)
    }

    pub fn response_time_hours(&self) -> Option<f64> {
        self.response_time_secs().map(|s| s as f64 / HOUR as f64)
    }

    /// Hours from the window start to the transition, the origin used by the
    /// response-time interaction terms.
    pub fn transition_hours_from_start(&self) -> Option<f64> {
        self.transition()
            .map(|t| (t - self.t_window_start) as f64 / HOUR as f64)
    }
}

pub fn build_window(
    corpus: &Corpus,
    question_id: PostId,
    half_length: i64,
) -> Result<ObservationWindow> {
    let q = corpus
        .question(question_id)
        .ok_or(Error::QuestionNotFound(question_id))?;
    if !is_eligible(corpus, question_id, half_length) {
        return Err(Error::Ineligible(question_id));
    }
    let t_window_start = q.timestamp - half_length;
    let t_window_end = q.timestamp + half_length;
    let t_answer = corpus
        .first_qualifying_answer(q)
        .filter(|&t| t <= t_window_end);

    let indices = corpus.user_event_indices(q.user_id);
    let events = corpus.events();
    let lo = indices.partition_point(|&i| events[i].timestamp < t_window_start);
    let help_times = indices[lo..]
        .iter()
        .map(|&i| &events[i])
        .take_while(|e| e.timestamp <= t_window_end)
        .filter(|e| corpus.is_help(e))
        .map(|e| e.timestamp)
        .collect();

    Ok(ObservationWindow {
        question_id,
        user_id: q.user_id,
        t_window_start,
        t_question: q.timestamp,
        t_answer,
        t_window_end,
        treated: t_answer.is_some(),
        synthetic_transition: None,
        help_times,
    })
}

/// Gives an untreated window the transition of its treated partner, at the
/// same elapsed time after the question.
pub fn assign_synthetic_transition(
    control: &ObservationWindow,
    treated_partner: &ObservationWindow,
) -> Result<ObservationWindow> {
    if control.treated {
        return Err(Error::InvalidInput(format!(
            "window {} is treated and cannot take a synthetic transition",
            control.question_id
        )));
    }
    let rt = match (treated_partner.treated, treated_partner.t_answer) {
        (true, Some(t)) => t - treated_partner.t_question,
        _ => {
            return Err(Error::InvalidInput(format!(
                "partner window {} is untreated",
                treated_partner.question_id
            )))
        }
    };
    with_response_time(control, rt)
}

pub(crate) fn with_response_time(
    control: &ObservationWindow,
    rt_secs: i64,
) -> Result<ObservationWindow> {
    let t = control.t_question + rt_secs;
    if rt_secs <= 0 || t > control.t_window_end {
        return Err(Error::InvalidInput(format!(
            "synthetic transition {rt_secs}s after question {} falls outside its window",
            control.question_id
        )));
    }
    let mut out = control.clone();
    out.synthetic_transition = Some(t);
    Ok(out)
}

/// One `(start, stop]` row of the counting-process data.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalRow {
    pub window_id: PostId,
    /// Matched-pair index; rows of one pair share it.
    pub group: u32,
    pub start: f64,
    pub stop: f64,
    pub event: bool,
    pub covariates: Vec<f64>,
}

/// Help-event offsets (seconds since window start) after tie handling: events
/// at the window start move to 1s, simultaneous events are spread 1s apart.
pub(crate) fn event_offsets(window: &ObservationWindow) -> Vec<i64> {
    let span = window.t_window_end - window.t_window_start;
    let mut offsets: Vec<i64> = window
        .help_times
        .iter()
        .map(|&t| t - window.t_window_start)
        .filter(|&o| (0..=span).contains(&o))
        .collect();
    offsets.sort_unstable();
    let mut prev = 0;
    for o in offsets.iter_mut() {
        *o = (*o).max(prev + 1);
        prev = *o;
    }
    // pushed past the end: pull back from the right
    let mut next = span + 1;
    for o in offsets.iter_mut().rev() {
        *o = (*o).min(next - 1);
        next = *o;
    }
    offsets
}

pub fn covariate_names(design: &DesignSpec) -> Vec<String> {
    match &design.model {
        ModelKind::Main => MAIN_COVARIATES.iter().map(|s| s.to_string()).collect(),
        ModelKind::MainPlusResponseTime => MAIN_COVARIATES
            .iter()
            .chain([RT_INTERACTION_ACTIVE, RT_INTERACTION_POSTQ].iter())
            .map(|s| s.to_string())
            .collect(),
        ModelKind::DiscreteBins => {
            let mut names: Vec<String> =
                MAIN_COVARIATES[..4].iter().map(|s| s.to_string()).collect();
            names.extend(design.bins().iter().map(RtBin::covariate_name));
            names
        }
    }
}

/// Expands a window whose transition is set into interval rows. Interaction
/// columns of `MainPlusResponseTime` are raw products; scaling happens at
/// assembly.
pub fn expand_to_intervals(
    window: &ObservationWindow,
    design: &DesignSpec,
) -> Result<Vec<IntervalRow>> {
    let transition = window.transition().ok_or_else(|| {
        Error::InvalidInput(format!(
            "window {} has no transition assigned",
            window.question_id
        ))
    })?;
    let span = window.t_window_end - window.t_window_start;
    let q_off = window.t_question - window.t_window_start;
    let a_off = transition - window.t_window_start;
    if !(q_off < a_off && a_off <= span) {
        return Err(Error::InvalidInput(format!(
            "window {} has a transition outside its post-question phase",
            window.question_id
        )));
    }

    let treated = if window.treated { 1.0 } else { 0.0 };
    let log_rt = (1.0 + a_off as f64 / HOUR as f64).ln();
    let rt_minutes = (a_off - q_off) as f64 / 60.0;
    let bins = design.bins();
    let bin_index = match design.model {
        ModelKind::DiscreteBins => bins.iter().position(|b| b.contains(rt_minutes)),
        _ => None,
    };

    let events = event_offsets(window);
    let mut cuts: Vec<i64> = Vec::with_capacity(events.len() + 4);
    cuts.extend([0, q_off, a_off, span]);
    cuts.extend(events.iter().copied());
    cuts.sort_unstable();
    cuts.dedup();

    let mut rows = Vec::with_capacity(cuts.len());
    let mut ev = events.iter().peekable();
    for pair in cuts.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        let event = ev.peek().is_some_and(|&&e| e == b);
        if event {
            ev.next();
        }
        let post_q = if a >= q_off { 1.0 } else { 0.0 };
        let post_a = if a >= a_off { 1.0 } else { 0.0 };
        let mut cov = vec![treated, post_q, treated * post_q, post_a];
        match design.model {
            ModelKind::Main => cov.push(treated * post_a),
            ModelKind::MainPlusResponseTime => {
                cov.push(treated * post_a);
                cov.push(treated * post_a * log_rt);
                cov.push(treated * post_q * log_rt);
            }
            ModelKind::DiscreteBins => {
                cov.extend((0..bins.len()).map(|k| {
                    if Some(k) == bin_index {
                        treated * post_a
                    } else {
                        0.0
                    }
                }));
            }
        }
        rows.push(IntervalRow {
            window_id: window.question_id,
            group: 0,
            start: a as f64 / HOUR as f64,
            stop: b as f64 / HOUR as f64,
            event,
            covariates: cov,
        });
    }
    Ok(rows)
}

pub fn write_intervals<W: Write>(rows: &[IntervalRow], names: &[String], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec![
        "window_id".to_string(),
        "start".into(),
        "stop".into(),
        "event".into(),
    ];
    header.extend(names.iter().cloned());
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.window_id.to_string(),
            format!("{:.6}", r.start),
            format!("{:.6}", r.stop),
            (r.event as u8).to_string(),
        ];
        rec.extend(r.covariates.iter().map(|v| format!("{v}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

const WINDOWS_HEADER: [&str; 8] = [
    "question_id",
    "user_id",
    "t_window_start",
    "t_question",
    "t_answer",
    "t_window_end",
    "treated",
    "help_times",
];

pub fn write_windows<W: Write>(windows: &[ObservationWindow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(WINDOWS_HEADER)?;
    for win in windows {
        let help: Vec<String> = win
            .help_times
            .iter()
            .map(|&t| format_timestamp(t))
            .collect();
        w.write_record([
            win.question_id.to_string(),
            win.user_id.to_string(),
            format_timestamp(win.t_window_start),
            format_timestamp(win.t_question),
            win.t_answer.map(format_timestamp).unwrap_or_default(),
            format_timestamp(win.t_window_end),
            (win.treated as u8).to_string(),
            help.join("|"),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_windows<R: Read>(input: R) -> Result<Vec<ObservationWindow>> {
    let mut reader = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let rec = rec?;
        let get = |idx: usize| rec.get(idx).unwrap_or("");
        let perr = |field: &'static str, message: String| Error::Parse {
            line,
            field,
            message,
        };
        let ts =
            |idx: usize, field: &'static str| parse_timestamp(get(idx)).map_err(|m| perr(field, m));
        let t_answer = match get(4) {
            "" => None,
            _ => Some(ts(4, "t_answer")?),
        };
        let help_times = match get(7) {
            "" => Vec::new(),
            raw => raw
                .split('|')
                .map(|t| parse_timestamp(t).map_err(|m| perr("help_times", m)))
                .collect::<Result<_>>()?,
        };
        out.push(ObservationWindow {
            question_id: get(0)
                .parse()
                .map_err(|e: std::num::ParseIntError| perr("question_id", e.to_string()))?,
            user_id: get(1)
                .parse()
                .map_err(|e: std::num::ParseIntError| perr("user_id", e.to_string()))?,
            t_window_start: ts(2, "t_window_start")?,
            t_question: ts(3, "t_question")?,
            t_answer,
            t_window_end: ts(5, "t_window_end")?,
            treated: get(6) == "1",
            synthetic_transition: None,
            help_times,
        });
    }
    Ok(out)
}
