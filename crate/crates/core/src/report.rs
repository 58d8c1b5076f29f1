//! Descriptive curves over the observation window: help rates normalized to
//! each group's pre-question baseline, and rates by answer status after the
//! question.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::HOUR;
use crate::windows::{event_offsets, ObservationWindow};

const Z_95: f64 = 1.96;

pub const SERIES_TREATED: &str = "treated";
pub const SERIES_CONTROL: &str = "control";
pub const SERIES_ANSWERED: &str = "answer_received";
pub const SERIES_WAITING: &str = "no_answer_yet";
pub const SERIES_SHARE: &str = "cumulative_answered_share";

/// Binned rate series. Bins are right-closed `(start, end]` in hours.
/// `ci_half_width` is on the scale of `normalized_rate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HelpRateCurve {
    pub series: String,
    pub bin_start_h: Vec<f64>,
    pub bin_end_h: Vec<f64>,
    pub counts: Vec<u64>,
    pub exposure_hours: Vec<f64>,
    /// Events per user-hour.
    pub rate: Vec<f64>,
    pub normalized_rate: Vec<f64>,
    pub ci_half_width: Vec<f64>,
    /// False when the baseline was zero and the series is left unnormalized.
    pub normalized: bool,
}

/// Divides by the mean of the baseline entries; `None` when that mean is 0.
pub fn normalize(rates: &[f64], baseline: &[f64]) -> Option<Vec<f64>> {
    let mean = baseline.iter().sum::<f64>() / baseline.len() as f64;
    if !(mean > 0.0) {
        return None;
    }
    Some(rates.iter().map(|r| r / mean).collect())
}

fn bin_count(span_secs: i64, bin_hours: f64) -> Result<usize> {
    let bin_secs = bin_hours * HOUR as f64;
    let n = span_secs as f64 / bin_secs;
    if !(bin_hours > 0.0) || (n - n.round()).abs() > 1e-9 || n.round() < 1.0 {
        return Err(Error::InvalidInput(format!(
            "bin width {bin_hours}h does not divide the {}h span evenly",
            span_secs as f64 / HOUR as f64
        )));
    }
    Ok(n.round() as usize)
}

/// Index of the right-closed bin holding offset `o > 0`.
fn bin_of(o: i64, bin_secs: f64, n: usize) -> usize {
    ((o as f64 / bin_secs).ceil() as usize).clamp(1, n) - 1
}

fn build_curve(
    series: &str,
    bin_hours: f64,
    counts: Vec<u64>,
    exposure_secs: Vec<i64>,
    baseline: Option<f64>,
) -> HelpRateCurve {
    let n = counts.len();
    let bin_start_h: Vec<f64> = (0..n).map(|k| k as f64 * bin_hours).collect();
    let bin_end_h: Vec<f64> = (0..n).map(|k| (k + 1) as f64 * bin_hours).collect();
    let exposure_hours: Vec<f64> = exposure_secs
        .iter()
        .map(|&s| s as f64 / HOUR as f64)
        .collect();
    let rate: Vec<f64> = counts
        .iter()
        .zip(&exposure_hours)
        .map(|(&c, &e)| if e > 0.0 { c as f64 / e } else { 0.0 })
        .collect();
    let half: Vec<f64> = counts
        .iter()
        .zip(&exposure_hours)
        .map(|(&c, &e)| {
            if e > 0.0 {
                Z_95 * (c as f64).sqrt() / e
            } else {
                0.0
            }
        })
        .collect();
    let (normalized_rate, ci_half_width, normalized) = match baseline.filter(|b| *b > 0.0) {
        Some(b) => (
            rate.iter().map(|r| r / b).collect(),
            half.iter().map(|h| h / b).collect(),
            true,
        ),
        None => {
            log::warn!("series `{series}` has no pre-question events; left unnormalized");
            (rate.clone(), half, false)
        }
    };
    HelpRateCurve {
        series: series.to_string(),
        bin_start_h,
        bin_end_h,
        counts,
        exposure_hours,
        rate,
        normalized_rate,
        ci_half_width,
        normalized,
    }
}

fn window_counts(w: &ObservationWindow, bin_secs: f64, n: usize) -> Vec<u64> {
    let mut c = vec![0u64; n];
    for o in event_offsets(w) {
        c[bin_of(o, bin_secs, n)] += 1;
    }
    c
}

fn add(mut a: Vec<u64>, b: Vec<u64>) -> Vec<u64> {
    a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
    a
}

/// Help-rate curves over the full window, one per group label.
pub fn help_rate_curves_by<F>(
    windows: &[ObservationWindow],
    bin_hours: f64,
    label: F,
) -> Result<Vec<HelpRateCurve>>
where
    F: Fn(&ObservationWindow) -> String + Sync,
{
    let Some(first) = windows.first() else {
        return Ok(Vec::new());
    };
    let h = first.half_length();
    if windows
        .iter()
        .any(|w| w.half_length() != h || w.t_window_end - w.t_window_start != 2 * h)
    {
        return Err(Error::InvalidInput(
            "windows have differing half-lengths".into(),
        ));
    }
    let n = bin_count(2 * h, bin_hours)?;
    let bin_secs = bin_hours * HOUR as f64;
    let pre_bins = n / 2;

    let mut groups: BTreeMap<String, Vec<&ObservationWindow>> = BTreeMap::new();
    for w in windows {
        groups.entry(label(w)).or_default().push(w);
    }
    Ok(groups
        .into_iter()
        .map(|(series, ws)| {
            let counts = ws
                .par_iter()
                .map(|w| window_counts(w, bin_secs, n))
                .reduce(|| vec![0; n], add);
            let exposure = vec![(bin_secs.round() as i64) * ws.len() as i64; n];
            let rates: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
            let baseline = rates[..pre_bins].iter().sum::<f64>() / pre_bins as f64;
            let baseline = baseline / (bin_secs / HOUR as f64 * ws.len() as f64);
            build_curve(&series, bin_hours, counts, exposure, Some(baseline))
        })
        .collect())
}

/// Treated and control help-rate curves.
pub fn help_rate_curves(
    windows: &[ObservationWindow],
    bin_hours: f64,
) -> Result<Vec<HelpRateCurve>> {
    help_rate_curves_by(windows, bin_hours, |w| {
        if w.treated {
            SERIES_TREATED
        } else {
            SERIES_CONTROL
        }
        .to_string()
    })
}

/// Pre-question help rate per user-hour.
fn pre_question_rate(ws: &[&ObservationWindow]) -> f64 {
    let events: usize = ws
        .iter()
        .map(|w| {
            event_offsets(w)
                .iter()
                .filter(|&&o| o <= w.half_length())
                .count()
        })
        .sum();
    let hours: i64 = ws.iter().map(|w| w.half_length()).sum();
    events as f64 / (hours as f64 / HOUR as f64)
}

/// Post-question rates of treated windows split at their answer time, the
/// control rate, and the cumulative share of treated windows answered by
/// each bin end. Each series is normalized by its group's pre-question rate.
pub fn adoption_curves(
    treated: &[ObservationWindow],
    control: &[ObservationWindow],
    bin_hours: f64,
) -> Result<Vec<HelpRateCurve>> {
    let Some(first) = treated.first().or(control.first()) else {
        return Ok(Vec::new());
    };
    let h = first.half_length();
    let n = bin_count(h, bin_hours)?;
    let bin_secs = bin_hours * HOUR as f64;
    let bounds: Vec<(i64, i64)> = (0..n)
        .map(|k| {
            (
                (k as f64 * bin_secs).round() as i64,
                ((k + 1) as f64 * bin_secs).round() as i64,
            )
        })
        .collect();

    // per window: (answered counts, waiting counts, answered exposure, waiting exposure)
    type Acc = (Vec<u64>, Vec<u64>, Vec<i64>, Vec<i64>);
    let zero = || -> Acc { (vec![0; n], vec![0; n], vec![0; n], vec![0; n]) };
    let merge = |mut a: Acc, b: Acc| -> Acc {
        for k in 0..n {
            a.0[k] += b.0[k];
            a.1[k] += b.1[k];
            a.2[k] += b.2[k];
            a.3[k] += b.3[k];
        }
        a
    };
    for w in treated {
        if w.t_answer.is_none() || w.half_length() != h {
            return Err(Error::InvalidInput(format!(
                "window {} is not a treated window of half-length {h}s",
                w.question_id
            )));
        }
    }
    let (ans_c, wait_c, ans_e, wait_e) = treated
        .par_iter()
        .map(|w| {
            let mut acc = zero();
            let rt = w.t_answer.unwrap() - w.t_question;
            for (k, &(s, e)) in bounds.iter().enumerate() {
                let waiting = (rt.min(e) - s).max(0);
                acc.3[k] = waiting;
                acc.2[k] = (e - s) - waiting;
            }
            for o in event_offsets(w) {
                let post = o - h;
                if post <= 0 {
                    continue;
                }
                let k = bin_of(post, bin_secs, n);
                if post <= rt {
                    acc.1[k] += 1;
                } else {
                    acc.0[k] += 1;
                }
            }
            acc
        })
        .reduce(zero, merge);
    let ctrl_c = control
        .par_iter()
        .map(|w| {
            let mut c = vec![0u64; n];
            for o in event_offsets(w) {
                let post = o - w.half_length();
                if post > 0 {
                    c[bin_of(post, bin_secs, n)] += 1;
                }
            }
            c
        })
        .reduce(|| vec![0; n], add);
    let ctrl_e: Vec<i64> = bounds
        .iter()
        .map(|(s, e)| (e - s) * control.len() as i64)
        .collect();

    let treated_refs: Vec<&ObservationWindow> = treated.iter().collect();
    let control_refs: Vec<&ObservationWindow> = control.iter().collect();
    let tb = (!treated.is_empty()).then(|| pre_question_rate(&treated_refs));
    let cb = (!control.is_empty()).then(|| pre_question_rate(&control_refs));

    let mut rts: Vec<i64> = treated
        .iter()
        .map(|w| w.t_answer.unwrap() - w.t_question)
        .collect();
    rts.sort_unstable();
    let share: Vec<f64> = bounds
        .iter()
        .map(|&(_, e)| {
            if rts.is_empty() {
                0.0
            } else {
                rts.partition_point(|&r| r <= e) as f64 / rts.len() as f64
            }
        })
        .collect();

    let mut out = vec![
        build_curve(SERIES_ANSWERED, bin_hours, ans_c, ans_e, tb),
        build_curve(SERIES_WAITING, bin_hours, wait_c, wait_e, tb),
        build_curve(SERIES_CONTROL, bin_hours, ctrl_c, ctrl_e, cb),
    ];
    out.push(HelpRateCurve {
        series: SERIES_SHARE.to_string(),
        bin_start_h: out[0].bin_start_h.clone(),
        bin_end_h: out[0].bin_end_h.clone(),
        counts: vec![0; n],
        exposure_hours: vec![0.0; n],
        rate: share.clone(),
        normalized_rate: share,
        ci_half_width: vec![0.0; n],
        normalized: false,
    });
    Ok(out)
}

pub const CURVES_HEADER: [&str; 6] = [
    "series",
    "bin_start_h",
    "bin_end_h",
    "rate",
    "normalized_rate",
    "ci_half_width",
];

pub fn write_curves<W: Write>(curves: &[HelpRateCurve], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CURVES_HEADER)?;
    for c in curves {
        for k in 0..c.rate.len() {
            w.write_record([
                c.series.clone(),
                format!("{}", c.bin_start_h[k]),
                format!("{}", c.bin_end_h[k]),
                format!("{:.9}", c.rate[k]),
                format!("{:.9}", c.normalized_rate[k]),
                format!("{:.9}", c.ci_half_width[k]),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
