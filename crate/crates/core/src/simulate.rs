//! Synthetic Q&A platforms with a planted help-hazard model.
//!
//! Focal users ask questions during an active episode and answer other
//! users' questions ("help") as a Poisson process whose log-intensity is
//! piecewise constant over each question window:
//!
//! ```text
//! log lambda = log(base * a) + b0*T + b1*PQ + b2*T*PQ + b3*PA + b4*T*PA
//! ```
//!
//! where `a` is a mean-one activity frailty that also raises the question
//! rate and the chance of getting answered, so treatment is confounded with
//! engagement. A separate pool of answerers supplies the answers.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariates::{bucket_of, TenureBucket};
use crate::design::{validate_bins, RtBin};
use crate::error::{Error, Result};
use crate::events::{Corpus, Event, PostId, Timestamp, UserId, DAY, HOUR};
use crate::windows::MAIN_COVARIATES;

/// 2008-01-01T00:00:00Z.
pub const EPOCH: Timestamp = 1_199_145_600;
/// Active episodes start this long after `EPOCH`, leaving room for tenure.
const TENURE_SPAN_DAYS: f64 = 3500.0;
const MAX_TENURE_OFFSET_DAYS: f64 = 3400.0;
const HELP_TARGET_WINDOW: usize = 1000;
const MAX_ANSWER_LATENCY: i64 = 30 * DAY;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub seed: u64,
    pub n_users: usize,
    pub n_answerers: usize,
    pub n_tags: usize,
    /// Span over which active episodes begin.
    pub horizon_days: f64,
    pub episode_days: f64,
    pub half_length_hours: f64,
    /// Help events per hour for a user with frailty 1 outside windows.
    pub baseline_help_rate: f64,
    /// Extra question rate per hour on top of the minimal window spacing.
    pub question_rate: f64,
    /// Help events per day before the active episode, scaled by frailty.
    pub history_help_rate: f64,
    /// Days before the active episode already helped at the baseline rate.
    pub warmup_days: f64,
    pub frailty_sd: f64,
    pub newcomer_share: f64,
    pub answer_intercept: f64,
    pub answer_activity: f64,
    pub answer_easiness: f64,
    pub latency_median_hours: f64,
    pub latency_sigma: f64,
    pub negative_answer_share: f64,
    pub self_answer_share: f64,
    /// Planted `b0..b4`.
    pub true_beta: [f64; 5],
    /// Multipliers on `b4` per tenure bucket; missing buckets use 1.
    pub tenure_effect_profile: BTreeMap<TenureBucket, f64>,
    pub rt_effect: RtEffect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RtEffect {
    None,
    /// Change in `b4` per standard deviation of the clipped
    /// `ln(1 + hours from window start to answer)`.
    Continuous {
        gamma: f64,
    },
    /// Hazard ratio of the post-answer phase per response-time bin; treated
    /// windows outside every bin keep the base `b4`.
    Bins(Vec<(RtBin, f64)>),
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            seed: 1,
            n_users: 2000,
            n_answerers: 500,
            n_tags: 20,
            horizon_days: 1000.0,
            episode_days: 30.0,
            half_length_hours: 48.0,
            baseline_help_rate: 0.25,
            question_rate: 0.02,
            history_help_rate: 0.02,
            warmup_days: 30.0,
            frailty_sd: 0.3,
            newcomer_share: 0.3,
            answer_intercept: 0.3,
            answer_activity: 0.8,
            answer_easiness: 0.5,
            latency_median_hours: 0.34,
            latency_sigma: 2.326,
            negative_answer_share: 0.05,
            self_answer_share: 0.02,
            true_beta: [0.0, 0.1, 0.0, 0.0, 0.0562],
            tenure_effect_profile: BTreeMap::new(),
            rt_effect: RtEffect::None,
        }
    }
}

/// Look-back of the activity signal that answerers respond to.
const VISIBLE_DAYS: f64 = 30.0;

const BETA_KEYS: [&str; 5] = ["beta0", "beta1", "beta2", "beta3", "beta4"];

impl SimConfig {
    /// Reads flat `key = value` pairs. Tenure multipliers use
    /// `tenure_multiplier.<label>`, bin hazard ratios `bin_hr.<lo>-<hi>`.
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut c = SimConfig::default();
        let mut bins: Vec<(RtBin, f64)> = Vec::new();
        let mut gamma = None;
        for (key, value) in pairs {
            let f = || {
                value
                    .parse::<f64>()
                    .map_err(|e| Error::InvalidInput(format!("simulation key `{key}`: {e}")))
            };
            let u = || {
                value
                    .parse::<u64>()
                    .map_err(|e| Error::InvalidInput(format!("simulation key `{key}`: {e}")))
            };
            match key {
                "seed" => c.seed = u()?,
                "n_users" => c.n_users = u()? as usize,
                "n_answerers" => c.n_answerers = u()? as usize,
                "n_tags" => c.n_tags = u()? as usize,
                "horizon_days" => c.horizon_days = f()?,
                "episode_days" => c.episode_days = f()?,
                "half_length_hours" => c.half_length_hours = f()?,
                "baseline_help_rate" => c.baseline_help_rate = f()?,
                "question_rate" => c.question_rate = f()?,
                "history_help_rate" => c.history_help_rate = f()?,
                "warmup_days" => c.warmup_days = f()?,
                "frailty_sd" => c.frailty_sd = f()?,
                "newcomer_share" => c.newcomer_share = f()?,
                "answer_intercept" => c.answer_intercept = f()?,
                "answer_activity" => c.answer_activity = f()?,
                "answer_easiness" => c.answer_easiness = f()?,
                "latency_median_hours" => c.latency_median_hours = f()?,
                "latency_sigma" => c.latency_sigma = f()?,
                "negative_answer_share" => c.negative_answer_share = f()?,
                "self_answer_share" => c.self_answer_share = f()?,
                "rt_gamma" => gamma = Some(f()?),
                k if BETA_KEYS.contains(&k) => {
                    let j = BETA_KEYS.iter().position(|b| *b == k).unwrap();
                    c.true_beta[j] = f()?;
                }
                k if k.starts_with("tenure_multiplier.") => {
                    let label = &k["tenure_multiplier.".len()..];
                    let b = TenureBucket::from_label(label).ok_or_else(|| {
                        Error::InvalidInput(format!("unknown tenure bucket `{label}`"))
                    })?;
                    c.tenure_effect_profile.insert(b, f()?);
                }
                k if k.starts_with("bin_hr.") => {
                    let bin = crate::design::parse_bins(&k["bin_hr.".len()..])?;
                    bins.push((bin[0], f()?));
                }
                _ => {
                    return Err(Error::InvalidInput(format!(
                        "unknown simulation key `{key}`"
                    )))
                }
            }
        }
        c.rt_effect = match (gamma, bins.is_empty()) {
            (Some(_), false) => {
                return Err(Error::InvalidInput(
                    "rt_gamma and bin_hr.* are mutually exclusive".into(),
                ))
            }
            (Some(gamma), true) => RtEffect::Continuous { gamma },
            (None, false) => {
                bins.sort_by(|a, b| a.0.lower_minutes.total_cmp(&b.0.lower_minutes));
                RtEffect::Bins(bins)
            }
            (None, true) => RtEffect::None,
        };
        c.validate()?;
        Ok(c)
    }

    /// Flat `key = value` form, readable by [`SimConfig::from_pairs`].
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut out = vec![
            ("seed".to_string(), self.seed.to_string()),
            ("n_users".into(), self.n_users.to_string()),
            ("n_answerers".into(), self.n_answerers.to_string()),
            ("n_tags".into(), self.n_tags.to_string()),
            ("horizon_days".into(), self.horizon_days.to_string()),
            ("episode_days".into(), self.episode_days.to_string()),
            (
                "half_length_hours".into(),
                self.half_length_hours.to_string(),
            ),
            (
                "baseline_help_rate".into(),
                self.baseline_help_rate.to_string(),
            ),
            ("question_rate".into(), self.question_rate.to_string()),
            (
                "history_help_rate".into(),
                self.history_help_rate.to_string(),
            ),
            ("warmup_days".into(), self.warmup_days.to_string()),
            ("frailty_sd".into(), self.frailty_sd.to_string()),
            ("newcomer_share".into(), self.newcomer_share.to_string()),
            ("answer_intercept".into(), self.answer_intercept.to_string()),
            ("answer_activity".into(), self.answer_activity.to_string()),
            ("answer_easiness".into(), self.answer_easiness.to_string()),
            (
                "latency_median_hours".into(),
                self.latency_median_hours.to_string(),
            ),
            ("latency_sigma".into(), self.latency_sigma.to_string()),
            (
                "negative_answer_share".into(),
                self.negative_answer_share.to_string(),
            ),
            (
                "self_answer_share".into(),
                self.self_answer_share.to_string(),
            ),
        ];
        for (k, b) in BETA_KEYS.iter().zip(self.true_beta) {
            out.push((k.to_string(), b.to_string()));
        }
        for (b, m) in &self.tenure_effect_profile {
            out.push((format!("tenure_multiplier.{}", b.label()), m.to_string()));
        }
        match &self.rt_effect {
            RtEffect::None => {}
            RtEffect::Continuous { gamma } => out.push(("rt_gamma".into(), gamma.to_string())),
            RtEffect::Bins(bins) => {
                for (bin, hr) in bins {
                    out.push((format!("bin_hr.{bin}"), hr.to_string()));
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        if self.n_users == 0 || self.n_answerers == 0 || self.n_tags == 0 {
            return bad("n_users, n_answerers and n_tags must be positive".into());
        }
        for (name, v) in [
            ("horizon_days", self.horizon_days),
            ("episode_days", self.episode_days),
            ("half_length_hours", self.half_length_hours),
            ("baseline_help_rate", self.baseline_help_rate),
            ("question_rate", self.question_rate),
            ("latency_median_hours", self.latency_median_hours),
            ("latency_sigma", self.latency_sigma),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.history_help_rate >= 0.0) {
            return bad(format!(
                "history_help_rate must be >= 0, got {}",
                self.history_help_rate
            ));
        }
        if !(self.warmup_days >= 0.0 && self.warmup_days.is_finite()) {
            return bad(format!(
                "warmup_days must be >= 0, got {}",
                self.warmup_days
            ));
        }
        if !(self.frailty_sd >= 0.0) {
            return bad(format!("frailty_sd must be >= 0, got {}", self.frailty_sd));
        }
        for (name, v) in [
            ("newcomer_share", self.newcomer_share),
            ("negative_answer_share", self.negative_answer_share),
            ("self_answer_share", self.self_answer_share),
        ] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1), got {v}"));
            }
        }
        if self.true_beta.iter().any(|b| !b.is_finite()) {
            return bad("true_beta must be finite".into());
        }
        if self.true_beta[3] != 0.0 {
            // controls have no transition of their own to hang the effect on
            return bad("beta3 must be 0: simulated controls have no phase transition".into());
        }
        if self.episode_days * 24.0 < 2.0 * self.half_length_hours + 2.0 {
            return bad("episode_days is too short to hold a single window".into());
        }
        if let RtEffect::Bins(bins) = &self.rt_effect {
            let only: Vec<RtBin> = bins.iter().map(|b| b.0).collect();
            validate_bins(&only)?;
            if bins.iter().any(|b| !(b.1 > 0.0)) {
                return bad("bin hazard ratios must be positive".into());
            }
        }
        Ok(())
    }

    fn half_length(&self) -> i64 {
        (self.half_length_hours * HOUR as f64).round() as i64
    }

    fn tenure_multiplier(&self, b: TenureBucket) -> f64 {
        self.tenure_effect_profile.get(&b).copied().unwrap_or(1.0)
    }
}

/// Clipping and standardization constants of the planted continuous
/// response-time effect, from a quantile grid of the latency distribution
/// conditional on an answer inside the window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RtStandardization {
    pub clip_low: f64,
    pub clip_high: f64,
    pub mean: f64,
    pub sd: f64,
}

impl RtStandardization {
    fn for_config(c: &SimConfig) -> Self {
        let h = c.half_length_hours;
        let n = 20_000;
        let lat =
            statrs::distribution::LogNormal::new(c.latency_median_hours.ln(), c.latency_sigma)
                .unwrap();
        use statrs::distribution::ContinuousCDF;
        let p_max = lat.cdf(h);
        let mut values: Vec<f64> = (0..n)
            .map(|i| {
                let q = p_max * (i as f64 + 0.5) / n as f64;
                (1.0 + h + lat.inverse_cdf(q)).ln()
            })
            .collect();
        values.sort_by(f64::total_cmp);
        let clip_low = crate::design::percentile_sorted(&values, 5.0);
        let clip_high = crate::design::percentile_sorted(&values, 95.0);
        let clipped: Vec<f64> = values
            .iter()
            .map(|v| v.clamp(clip_low, clip_high))
            .collect();
        let mean = clipped.iter().sum::<f64>() / n as f64;
        let sd = (clipped.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        RtStandardization {
            clip_low,
            clip_high,
            mean,
            sd,
        }
    }

    fn z(&self, log_rt: f64) -> f64 {
        (log_rt.clamp(self.clip_low, self.clip_high) - self.mean) / self.sd
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedBin {
    pub bin: RtBin,
    pub hazard_ratio: f64,
    pub beta: f64,
}

/// Ground truth a recovery test compares estimates against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedTruth {
    pub beta: BTreeMap<String, f64>,
    /// Post-answer effect per tenure bucket label.
    pub tenure: BTreeMap<String, f64>,
    pub rt_gamma: Option<f64>,
    pub rt_standardization: Option<RtStandardization>,
    pub bins: Vec<PlantedBin>,
}

impl PlantedTruth {
    pub fn tenure_beta(&self, b: TenureBucket) -> f64 {
        self.tenure[b.label()]
    }
}

pub fn planted_truth(config: &SimConfig) -> PlantedTruth {
    let beta = MAIN_COVARIATES
        .iter()
        .zip(config.true_beta)
        .map(|(n, b)| (n.to_string(), b))
        .collect();
    let tenure = TenureBucket::ALL
        .iter()
        .map(|&b| {
            (
                b.label().to_string(),
                config.true_beta[4] * config.tenure_multiplier(b),
            )
        })
        .collect();
    let (rt_gamma, rt_standardization, bins) = match &config.rt_effect {
        RtEffect::None => (None, None, vec![]),
        RtEffect::Continuous { gamma } => (
            Some(*gamma),
            Some(RtStandardization::for_config(config)),
            vec![],
        ),
        RtEffect::Bins(bins) => (
            None,
            None,
            bins.iter()
                .map(|&(bin, hr)| PlantedBin {
                    bin,
                    hazard_ratio: hr,
                    beta: hr.ln(),
                })
                .collect(),
        ),
    };
    PlantedTruth {
        beta,
        tenure,
        rt_gamma,
        rt_standardization,
        bins,
    }
}

const STREAM_PLAN: u64 = 0;
const STREAM_HELP: u64 = 1;
const STREAM_GLOBAL: u64 = 2;

fn stream(seed: u64, stage: u64, user: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(user.wrapping_mul(4).wrapping_add(stage));
    rng
}

struct PlannedQuestion {
    time: Timestamp,
    tags: Vec<usize>,
    /// Pool answer: (answerer, latency seconds, score).
    answer: Option<(UserId, i64, i32)>,
    negative: Option<(UserId, i64)>,
    self_answer: Option<i64>,
}

struct UserPlan {
    user: UserId,
    frailty: f64,
    join: Timestamp,
    active_start: Timestamp,
    active_end: Timestamp,
    questions: Vec<PlannedQuestion>,
    /// Orphaned help answers between joining and the active episode.
    history: Vec<Timestamp>,
}

/// One window as the help process sees it, in seconds.
struct PhaseWindow {
    start: f64,
    question: f64,
    answer: Option<f64>,
    end: f64,
    log_lift_post_answer: f64,
}

fn plan_user(c: &SimConfig, user: UserId, easiness: &[f64]) -> UserPlan {
    let mut rng = stream(c.seed, STREAM_PLAN, user);
    let z: f64 = rng.sample(StandardNormal);
    let frailty = (c.frailty_sd * z - 0.5 * c.frailty_sd * c.frailty_sd).exp();

    let offset_days = if rng.random::<f64>() < c.newcomer_share {
        0.0
    } else {
        let b = TenureBucket::ALL[rng.random_range(0..7)];
        let hi = b.upper_days().min(MAX_TENURE_OFFSET_DAYS);
        rng.random_range(b.lower_days()..hi)
    };
    let start_days = TENURE_SPAN_DAYS + rng.random::<f64>() * c.horizon_days;
    let active_start = EPOCH + (start_days * DAY as f64).round() as i64;
    let join = active_start - (offset_days * DAY as f64).round() as i64;
    let active_end = active_start + (c.episode_days * DAY as f64).round() as i64;

    let h = c.half_length();
    let gap = Exp::new(c.question_rate * frailty / HOUR as f64).unwrap();
    let latency = LogNormal::new(c.latency_median_hours.ln(), c.latency_sigma).unwrap();
    let mut questions = Vec::new();
    let mut t = active_start + h + HOUR + gap.sample(&mut rng).round() as i64;
    while t + h <= active_end {
        let mut tags = vec![rng.random_range(0..c.n_tags)];
        if c.n_tags > 1 && rng.random::<f64>() < 0.5 {
            let second = (tags[0] + 1 + rng.random_range(0..c.n_tags - 1)) % c.n_tags;
            tags.push(second);
        }
        let ease = tags.iter().map(|&k| easiness[k]).sum::<f64>() / tags.len() as f64;
        // Answerers see recent activity, which a short tenure caps.
        let seen_days = ((t - join) as f64 / DAY as f64).clamp(1.0, VISIBLE_DAYS);
        let visible = frailty * seen_days / VISIBLE_DAYS;
        let logit =
            c.answer_intercept + c.answer_activity * visible.ln() + c.answer_easiness * ease;
        let p = 1.0 / (1.0 + (-logit).exp());
        let answered = rng.random::<f64>() < p;
        let lat_secs = ((latency.sample(&mut rng) * HOUR as f64).round() as i64).max(1);
        let answerer = c.n_users as u64 + 1 + rng.random_range(0..c.n_answerers as u64);
        let score = rng.random_range(0..=5);
        let answer =
            (answered && lat_secs <= MAX_ANSWER_LATENCY).then_some((answerer, lat_secs, score));
        let negative = (rng.random::<f64>() < c.negative_answer_share).then(|| {
            let who = c.n_users as u64 + 1 + rng.random_range(0..c.n_answerers as u64);
            (who, rng.random_range(60..h))
        });
        let self_answer =
            (rng.random::<f64>() < c.self_answer_share).then(|| rng.random_range(HOUR..40 * HOUR));
        questions.push(PlannedQuestion {
            time: t,
            tags,
            answer,
            negative,
            self_answer,
        });
        t += 2 * h + HOUR + gap.sample(&mut rng).round() as i64;
    }

    // A first answer at joining, sparse help until the warm-up, then the
    // baseline rate.
    let warm_start = (active_start - (c.warmup_days * DAY as f64).round() as i64).max(join);
    let mut history = vec![join];
    for (from, to, per_sec) in [
        (join, warm_start, c.history_help_rate / DAY as f64),
        (warm_start, active_start, c.baseline_help_rate / HOUR as f64),
    ] {
        if per_sec <= 0.0 || to <= from {
            continue;
        }
        let step = Exp::new(per_sec * frailty).unwrap();
        let mut t = from as f64;
        loop {
            t += step.sample(&mut rng);
            if t >= to as f64 {
                break;
            }
            history.push(t.ceil() as Timestamp);
        }
    }

    UserPlan {
        user,
        frailty,
        join,
        active_start,
        active_end,
        questions,
        history,
    }
}

fn post_answer_lift(
    c: &SimConfig,
    rt: &Option<RtStandardization>,
    tenure: TenureBucket,
    rt_secs: i64,
) -> f64 {
    let b4 = c.true_beta[4];
    match &c.rt_effect {
        RtEffect::Bins(bins) => {
            let minutes = rt_secs as f64 / 60.0;
            bins.iter()
                .find(|(bin, _)| bin.contains(minutes))
                .map_or(b4 * c.tenure_multiplier(tenure), |(_, hr)| hr.ln())
        }
        RtEffect::Continuous { gamma } => {
            let hours_from_start = (c.half_length() + rt_secs) as f64 / HOUR as f64;
            b4 * c.tenure_multiplier(tenure)
                + gamma * rt.as_ref().unwrap().z((1.0 + hours_from_start).ln())
        }
        RtEffect::None => b4 * c.tenure_multiplier(tenure),
    }
}

fn phase_windows(
    c: &SimConfig,
    plan: &UserPlan,
    rt: &Option<RtStandardization>,
) -> Vec<PhaseWindow> {
    let h = c.half_length();
    plan.questions
        .iter()
        .map(|q| {
            let ws = q.time - h;
            let treated = q.answer.filter(|a| a.1 <= h);
            let tenure = bucket_of((ws - plan.join).max(0) as f64 / DAY as f64).unwrap();
            PhaseWindow {
                start: ws as f64,
                question: q.time as f64,
                answer: treated.map(|a| (q.time + a.1) as f64),
                end: (q.time + h) as f64,
                log_lift_post_answer: treated.map_or(0.0, |a| post_answer_lift(c, rt, tenure, a.1)),
            }
        })
        .collect()
}

/// Log multiplier of the help intensity at time `t`.
fn log_multiplier(beta: &[f64; 5], windows: &[PhaseWindow], t: f64) -> f64 {
    let k = windows.partition_point(|w| w.start < t);
    if k == 0 || t > windows[k - 1].end {
        return 0.0;
    }
    let w = &windows[k - 1];
    match w.answer {
        None => {
            if t <= w.question {
                0.0
            } else {
                beta[1]
            }
        }
        Some(a) => {
            if t <= w.question {
                beta[0]
            } else if t <= a {
                beta[0] + beta[1] + beta[2]
            } else {
                beta[0] + beta[1] + beta[2] + beta[3] + w.log_lift_post_answer
            }
        }
    }
}

/// Help-event times by thinning a dominating homogeneous process.
fn help_times(c: &SimConfig, plan: &UserPlan, windows: &[PhaseWindow]) -> Vec<Timestamp> {
    let mut rng = stream(c.seed, STREAM_HELP, plan.user);
    let b = &c.true_beta;
    let mut max_log = [0.0, b[1], b[0], b[0] + b[1] + b[2]]
        .into_iter()
        .fold(f64::NEG_INFINITY, f64::max);
    for w in windows {
        max_log = max_log.max(b[0] + b[1] + b[2] + b[3] + w.log_lift_post_answer);
    }
    let base = c.baseline_help_rate * plan.frailty / HOUR as f64;
    let dominating = Exp::new(base * max_log.exp()).unwrap();
    let mut out = Vec::new();
    let mut t = plan.active_start as f64;
    let end = plan.active_end as f64;
    loop {
        t += dominating.sample(&mut rng);
        if t > end {
            break;
        }
        let accept = (log_multiplier(b, windows, t) - max_log).exp();
        if rng.random::<f64>() < accept {
            out.push(t.ceil() as Timestamp);
        }
    }
    out
}

/// Generates a corpus from the configured hazard model. Output is identical
/// for a fixed seed regardless of thread count.
pub fn generate(config: &SimConfig) -> Result<Corpus> {
    Ok(Corpus::new(generate_events(config)?, None)?)
}

pub fn generate_events(config: &SimConfig) -> Result<Vec<Event>> {
    config.validate()?;
    let c = config;
    let mut global = stream(c.seed, STREAM_GLOBAL, 0);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let easiness: Vec<f64> = (0..c.n_tags).map(|_| normal.sample(&mut global)).collect();
    let tag_names: Vec<String> = (0..c.n_tags).map(|k| format!("tag{k:02}")).collect();
    let rt = match c.rt_effect {
        RtEffect::Continuous { .. } => Some(RtStandardization::for_config(c)),
        _ => None,
    };

    let plans: Vec<UserPlan> = (1..=c.n_users as u64)
        .into_par_iter()
        .map(|u| plan_user(c, u, &easiness))
        .collect();

    // question ids in (time, user, sequence) order
    let mut keys: Vec<(Timestamp, UserId, usize)> = plans
        .iter()
        .flat_map(|p| {
            p.questions
                .iter()
                .enumerate()
                .map(move |(i, q)| (q.time, p.user, i))
        })
        .collect();
    keys.sort_unstable();
    let mut qid: BTreeMap<(UserId, usize), PostId> = BTreeMap::new();
    for (n, &(_, u, i)) in keys.iter().enumerate() {
        qid.insert((u, i), n as PostId + 1);
    }

    // answered questions by first answer time, as help targets
    let mut answered: Vec<(Timestamp, PostId, UserId)> = plans
        .iter()
        .flat_map(|p| {
            let qid = &qid;
            p.questions.iter().enumerate().filter_map(move |(i, q)| {
                q.answer.map(|a| (q.time + a.1, qid[&(p.user, i)], p.user))
            })
        })
        .collect();
    answered.sort_unstable();

    let help: Vec<Vec<(Timestamp, UserId, PostId)>> = plans
        .par_iter()
        .map(|p| {
            let windows = phase_windows(c, p, &rt);
            let mut rng = stream(c.seed, STREAM_HELP + 3, p.user);
            help_times(c, p, &windows)
                .into_iter()
                .map(|t| {
                    let n = answered.partition_point(|a| a.0 < t);
                    let lo = n.saturating_sub(HELP_TARGET_WINDOW);
                    let mut parent = 0;
                    if n > lo {
                        for _ in 0..8 {
                            let cand = answered[rng.random_range(lo..n)];
                            if cand.2 != p.user {
                                parent = cand.1;
                                break;
                            }
                        }
                    }
                    (t, p.user, parent)
                })
                .collect()
        })
        .collect();

    let mut events = Vec::new();
    // answers: (time, user, parent, score)
    let mut answers: Vec<(Timestamp, UserId, PostId, i32)> = Vec::new();
    for p in &plans {
        answers.push((p.join, p.user, 0, 1));
        answers.extend(p.history.iter().map(|&t| (t, p.user, 0, 1)));
        for (i, q) in p.questions.iter().enumerate() {
            let id = qid[&(p.user, i)];
            let tags: Vec<&str> = q.tags.iter().map(|&k| tag_names[k].as_str()).collect();
            events.push(Event::question(p.user, id, q.time, &tags));
            if let Some((who, lat, score)) = q.answer {
                answers.push((q.time + lat, who, id, score));
            }
            if let Some((who, lat)) = q.negative {
                answers.push((q.time + lat, who, id, -1));
            }
            if let Some(lat) = q.self_answer {
                answers.push((q.time + lat, p.user, id, 1));
            }
        }
    }
    for h in help.iter().flatten() {
        answers.push((h.0, h.1, h.2, 1));
    }
    answers.sort_unstable();
    let first_answer_id = keys.len() as PostId + 1;
    for (k, (t, who, parent, score)) in answers.into_iter().enumerate() {
        events.push(Event::answer(
            who,
            first_answer_id + k as PostId,
            parent,
            t,
            score,
        ));
    }
    events.sort_by_key(|e| (e.timestamp, e.post_id));
    Ok(events)
}
