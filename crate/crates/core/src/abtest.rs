//! Online analytics: holdout assignment, weekly selection-time summaries,
//! Mann-Kendall trend test, Welch's t-test, per-template accuracy against
//! time saved, and a seeded event simulator for fixtures.

use std::collections::{BTreeMap, HashMap};

use chrono::{DateTime, Datelike, Duration, NaiveDate, TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use statrs::function::erf::erfc;
use thiserror::Error;

use crate::hashing::unit_hash;

#[derive(Debug, Error)]
pub enum AbError {
    #[error("{0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, AbError>;

fn contract<T>(msg: impl Into<String>) -> Result<T> {
    Err(AbError::Contract(msg.into()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Treatment,
    Holdout,
}

/// Holdout iff the keyed hash of `(salt, case_id)` falls below the fraction.
pub fn assign_group(case_id: &str, holdout_fraction: f64, salt: &str) -> Group {
    if unit_hash(salt.as_bytes(), case_id) < holdout_fraction {
        Group::Holdout
    } else {
        Group::Treatment
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionEvent {
    pub case_id: String,
    pub timestamp: DateTime<Utc>,
    pub group: Group,
    pub shown_template_ids: Vec<u32>,
    pub chosen_template_id: u32,
    pub selection_time_sec: f64,
    pub model_version: String,
}

impl SelectionEvent {
    pub fn validate(&self) -> Result<()> {
        if self.group == Group::Holdout && !self.shown_template_ids.is_empty() {
            return contract(format!("holdout event for {} lists shown templates", self.case_id));
        }
        if !(self.selection_time_sec > 0.0 && self.selection_time_sec.is_finite()) {
            return contract(format!(
                "selection time {} for {} must be positive",
                self.selection_time_sec, self.case_id
            ));
        }
        Ok(())
    }
}

/// A prediction the service computed for a case, whether or not it was shown.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub case_id: String,
    pub timestamp: DateTime<Utc>,
    pub group: Group,
    pub template_ids: Vec<u32>,
    pub probabilities: Vec<f64>,
    pub model_version: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeekSummary {
    pub week_start: NaiveDate,
    pub n_treatment: usize,
    pub n_holdout: usize,
    pub treatment_mean_sec: Option<f64>,
    pub holdout_mean_sec: Option<f64>,
    /// Holdout minus treatment; positive means time saved.
    pub difference_sec: Option<f64>,
}

fn week_start(t: &DateTime<Utc>) -> NaiveDate {
    let d = t.date_naive();
    d - Duration::days(d.weekday().num_days_from_monday() as i64)
}

/// Per ISO week (Monday start, UTC), mean selection time of each group.
pub fn selection_time_summary(events: &[SelectionEvent]) -> Vec<WeekSummary> {
    let mut acc: BTreeMap<NaiveDate, [(f64, usize); 2]> = BTreeMap::new();
    for e in events {
        let slot = &mut acc.entry(week_start(&e.timestamp)).or_default()[e.group as usize];
        slot.0 += e.selection_time_sec;
        slot.1 += 1;
    }
    acc.into_iter()
        .map(|(week, [t, h])| {
            let mean = |(s, n): (f64, usize)| (n > 0).then(|| s / n as f64);
            let (tm, hm) = (mean(t), mean(h));
            WeekSummary {
                week_start: week,
                n_treatment: t.1,
                n_holdout: h.1,
                treatment_mean_sec: tm,
                holdout_mean_sec: hm,
                difference_sec: tm.zip(hm).map(|(t, h)| h - t),
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Increasing,
    Decreasing,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendResult {
    pub s: i64,
    pub var_s: f64,
    pub z: f64,
    pub p_value: f64,
    pub direction: Direction,
}

pub const TREND_ALPHA: f64 = 0.05;

/// Two-sided standard normal tail probability.
fn normal_two_sided(z: f64) -> f64 {
    erfc(z.abs() / std::f64::consts::SQRT_2).clamp(0.0, 1.0)
}

/// `S = Σ_{i<j} sgn(x_j - x_i)` in `O(n log n)`: a Fenwick tree over value
/// ranks counts earlier elements below and above each element.
fn kendall_s(x: &[f64]) -> i64 {
    let mut sorted = x.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let rank = |v: f64| sorted.partition_point(|&s| s < v);
    let mut tree = vec![0i64; sorted.len() + 1];
    let prefix = |tree: &[i64], mut i: usize| {
        let mut s = 0;
        while i > 0 {
            s += tree[i];
            i &= i - 1;
        }
        s
    };
    let mut s = 0i64;
    for (seen, &v) in x.iter().enumerate() {
        let r = rank(v);
        let below = prefix(&tree, r);
        let at_or_below = prefix(&tree, r + 1);
        let above = seen as i64 - at_or_below;
        s += below - above;
        let mut i = r + 1;
        while i < tree.len() {
            tree[i] += 1;
            i += i & i.wrapping_neg();
        }
    }
    s
}

/// Mann-Kendall monotone trend test with tie-corrected variance and
/// continuity correction.
pub fn mann_kendall(x: &[f64]) -> Result<TrendResult> {
    let n = x.len();
    if n < 3 {
        return contract(format!("trend test needs at least 3 values, got {n}"));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return contract("non-finite value in series");
    }
    let s = kendall_s(x);
    let mut sorted = x.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut ties = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j < n && sorted[j] == sorted[i] {
            j += 1;
        }
        let t = (j - i) as f64;
        ties += t * (t - 1.0) * (2.0 * t + 5.0);
        i = j;
    }
    let nf = n as f64;
    let var_s = (nf * (nf - 1.0) * (2.0 * nf + 5.0) - ties) / 18.0;
    let z = if s == 0 || var_s <= 0.0 {
        0.0
    } else {
        (s as f64 - s.signum() as f64) / var_s.sqrt()
    };
    let p_value = normal_two_sided(z);
    let direction = match (s.signum(), p_value < TREND_ALPHA) {
        (1, true) => Direction::Increasing,
        (-1, true) => Direction::Decreasing,
        _ => Direction::None,
    };
    Ok(TrendResult {
        s,
        var_s,
        z,
        p_value,
        direction,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AbResult {
    pub mean_a: f64,
    pub mean_b: f64,
    pub t_stat: f64,
    pub dof: f64,
    pub p_value: f64,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (m, x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0))
}

/// Welch's unequal-variance t-test, two-sided.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<AbResult> {
    if a.len() < 2 || b.len() < 2 {
        return contract("each sample needs at least 2 values");
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return contract("non-finite value in sample");
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (qa, qb) = (va / a.len() as f64, vb / b.len() as f64);
    let se2 = qa + qb;
    if se2 <= 0.0 {
        return contract("both samples have zero variance");
    }
    let t = (ma - mb) / se2.sqrt();
    let dof = se2 * se2 / (qa * qa / (a.len() - 1) as f64 + qb * qb / (b.len() - 1) as f64);
    let dist = StudentsT::new(0.0, 1.0, dof).map_err(|e| AbError::Contract(e.to_string()))?;
    let p_value = if t == 0.0 { 1.0 } else { (2.0 * dist.sf(t.abs())).clamp(0.0, 1.0) };
    Ok(AbResult {
        mean_a: ma,
        mean_b: mb,
        t_stat: t,
        dof,
        p_value,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemplateSavings {
    pub template_id: u32,
    pub volume: usize,
    pub holdout_n: usize,
    /// Share of holdout selections the logged prediction had in its top k.
    pub accuracy: f64,
    pub treatment_mean_sec: f64,
    pub holdout_mean_sec: f64,
    /// Holdout minus treatment mean selection time.
    pub savings_sec: f64,
}

/// Per-template holdout accuracy paired with the mean selection time saved
/// in treatment, for the `top_n` templates by event volume. Templates with
/// no holdout selections, no treatment selections, or no logged holdout
/// predictions are skipped.
pub fn accuracy_vs_savings(
    events: &[SelectionEvent],
    predictions: &[PredictionRecord],
    top_n: usize,
    k: usize,
) -> Vec<TemplateSavings> {
    let mut latest: HashMap<&str, &PredictionRecord> = HashMap::new();
    for p in predictions {
        let e = latest.entry(p.case_id.as_str()).or_insert(p);
        if p.timestamp >= e.timestamp {
            *e = p;
        }
    }
    #[derive(Default)]
    struct Acc {
        volume: usize,
        t_sum: f64,
        t_n: usize,
        h_sum: f64,
        h_n: usize,
        scored: usize,
        hits: usize,
    }
    let mut acc: BTreeMap<u32, Acc> = BTreeMap::new();
    for e in events {
        let a = acc.entry(e.chosen_template_id).or_default();
        a.volume += 1;
        match e.group {
            Group::Treatment => {
                a.t_sum += e.selection_time_sec;
                a.t_n += 1;
            }
            Group::Holdout => {
                a.h_sum += e.selection_time_sec;
                a.h_n += 1;
                if let Some(p) = latest.get(e.case_id.as_str()) {
                    a.scored += 1;
                    if p.template_ids.iter().take(k).any(|&t| t == e.chosen_template_id) {
                        a.hits += 1;
                    }
                }
            }
        }
    }
    let mut by_volume: Vec<(u32, Acc)> = acc.into_iter().collect();
    by_volume.sort_by(|a, b| b.1.volume.cmp(&a.1.volume).then(a.0.cmp(&b.0)));
    by_volume
        .into_iter()
        .take(top_n)
        .filter(|(_, a)| a.t_n > 0 && a.h_n > 0 && a.scored > 0)
        .map(|(id, a)| {
            let (tm, hm) = (a.t_sum / a.t_n as f64, a.h_sum / a.h_n as f64);
            TemplateSavings {
                template_id: id,
                volume: a.volume,
                holdout_n: a.h_n,
                accuracy: a.hits as f64 / a.scored as f64,
                treatment_mean_sec: tm,
                holdout_mean_sec: hm,
                savings_sec: hm - tm,
            }
        })
        .collect()
}

/// Trend of savings when templates are ordered by accuracy.
pub fn savings_trend(rows: &[TemplateSavings]) -> Result<TrendResult> {
    let mut sorted: Vec<&TemplateSavings> = rows.iter().collect();
    sorted.sort_by(|a, b| a.accuracy.total_cmp(&b.accuracy).then(a.template_id.cmp(&b.template_id)));
    mann_kendall(&sorted.iter().map(|r| r.savings_sec).collect::<Vec<_>>())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_sessions: usize,
    pub holdout_fraction: f64,
    pub n_templates: usize,
    pub weeks: u32,
    pub seed: u64,
    pub salt: String,
    /// Mean selection time without a usable suggestion.
    pub unassisted_mean_sec: f64,
    /// Mean selection time when the chosen template was suggested.
    pub assisted_mean_sec: f64,
    /// Per-template accuracy is drawn uniformly from this range.
    pub accuracy_range: (f64, f64),
    pub k: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_sessions: 10_000,
            holdout_fraction: 0.02,
            n_templates: 40,
            weeks: 8,
            seed: 0,
            salt: "holdout-v1".into(),
            unassisted_mean_sec: 19.0,
            assisted_mean_sec: 8.0,
            accuracy_range: (0.2, 0.95),
            k: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimOutput {
    pub events: Vec<SelectionEvent>,
    pub predictions: Vec<PredictionRecord>,
    pub template_accuracy: Vec<f64>,
}

/// Synthetic sessions in which a suggestion containing the chosen template
/// shortens selection time, so savings grow with template accuracy.
pub fn simulate(cfg: &SimConfig) -> Result<SimOutput> {
    if cfg.n_templates <= cfg.k || cfg.k == 0 {
        return contract("need more templates than suggestions, and k >= 1");
    }
    let (lo, hi) = cfg.accuracy_range;
    if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
        return contract(format!("accuracy range {:?}", cfg.accuracy_range));
    }
    if !(cfg.unassisted_mean_sec > 0.0 && cfg.assisted_mean_sec > 0.0) || cfg.weeks == 0 {
        return contract("mean times and weeks must be positive");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let accuracy: Vec<f64> = (0..cfg.n_templates).map(|_| rng.random_range(lo..=hi)).collect();
    let weights: Vec<f64> = (0..cfg.n_templates).map(|t| 1.0 / (t as f64 + 1.0).powf(0.8)).collect();
    let total: f64 = weights.iter().sum();
    let sigma = 0.5;
    let time_dist = |mean: f64| LogNormal::new(mean.ln() - sigma * sigma / 2.0, sigma).expect("valid lognormal");
    let (slow, fast) = (time_dist(cfg.unassisted_mean_sec), time_dist(cfg.assisted_mean_sec));
    // a Monday
    let start = Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).single().expect("valid date");
    let span_sec = cfg.weeks as i64 * 7 * 86_400;
    let mut events = Vec::with_capacity(cfg.n_sessions);
    let mut predictions = Vec::with_capacity(cfg.n_sessions);
    for i in 0..cfg.n_sessions {
        let case_id = format!("sim-{:x}-{i:06}", cfg.seed);
        let group = assign_group(&case_id, cfg.holdout_fraction, &cfg.salt);
        let ts = start + Duration::seconds(rng.random_range(0..span_sec));
        let mut u = rng.random::<f64>() * total;
        let mut chosen = cfg.n_templates - 1;
        for (t, w) in weights.iter().enumerate() {
            if u < *w {
                chosen = t;
                break;
            }
            u -= w;
        }
        let hit = rng.random::<f64>() < accuracy[chosen];
        let mut suggested: Vec<u32> = Vec::with_capacity(cfg.k);
        if hit {
            suggested.push(chosen as u32);
        }
        while suggested.len() < cfg.k {
            let t = rng.random_range(0..cfg.n_templates) as u32;
            if t as usize != chosen && !suggested.contains(&t) {
                suggested.push(t);
            }
        }
        if hit {
            let at = rng.random_range(0..cfg.k);
            suggested.swap(0, at);
        }
        let assisted = hit && group == Group::Treatment;
        let secs = if assisted { fast.sample(&mut rng) } else { slow.sample(&mut rng) };
        let probs: Vec<f64> = (0..cfg.k).map(|r| 0.5f64.powi(r as i32 + 1)).collect();
        predictions.push(PredictionRecord {
            case_id: case_id.clone(),
            timestamp: ts,
            group,
            template_ids: suggested.clone(),
            probabilities: probs,
            model_version: "sim".into(),
        });
        events.push(SelectionEvent {
            case_id,
            timestamp: ts + Duration::milliseconds((secs * 1000.0) as i64),
            group,
            shown_template_ids: if group == Group::Treatment { suggested } else { Vec::new() },
            chosen_template_id: chosen as u32,
            selection_time_sec: secs.max(1e-3),
            model_version: "sim".into(),
        });
    }
    Ok(SimOutput {
        events,
        predictions,
        template_accuracy: accuracy,
    })
}
