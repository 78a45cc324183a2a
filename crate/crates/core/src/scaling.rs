//! Per-checkpoint scaling measurements, least-squares fits and the report
//! (points CSV, fits CSV, SVG charts).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::plot::{Axis, Chart, Series};

#[derive(Debug, Error)]
pub enum ScalingError {
    #[error("{0}")]
    Contract(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ScalingError>;

/// One checkpoint of one model: pre-training progress and the result of
/// fine-tuning from it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub model_name: String,
    pub n_params: u64,
    pub tokens_seen: u64,
    pub flops: f64,
    pub lm_loss: f64,
    pub cls_loss: f64,
    pub top1: f64,
    pub top3: f64,
    pub top5: f64,
}

impl ScalingPoint {
    pub fn top(&self, k: usize) -> Option<f64> {
        match k {
            1 => Some(self.top1),
            3 => Some(self.top3),
            5 => Some(self.top5),
            _ => None,
        }
    }
}

/// Pre-training side of a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub model_name: String,
    pub n_params: u64,
    pub step: u64,
    pub tokens_seen: u64,
    pub flops: f64,
    pub lm_loss: f64,
}

/// Fine-tuning side of a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FineTuneRecord {
    pub model_name: String,
    pub step: u64,
    pub cls_loss: f64,
    pub top1: f64,
    pub top3: f64,
    pub top5: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedCheckpoint {
    pub model_name: String,
    pub step: u64,
    pub reason: String,
}

/// Joins checkpoints with their fine-tune results, ordered by
/// `(n_params, tokens_seen)`. Checkpoints without a fine-tune are reported
/// as skipped.
pub fn collect(
    checkpoints: &[CheckpointRecord],
    finetunes: &[FineTuneRecord],
) -> (Vec<ScalingPoint>, Vec<SkippedCheckpoint>) {
    let by_key: BTreeMap<(&str, u64), &FineTuneRecord> =
        finetunes.iter().map(|f| ((f.model_name.as_str(), f.step), f)).collect();
    let mut points = Vec::new();
    let mut skipped = Vec::new();
    for c in checkpoints {
        match by_key.get(&(c.model_name.as_str(), c.step)) {
            Some(f) => points.push(ScalingPoint {
                model_name: c.model_name.clone(),
                n_params: c.n_params,
                tokens_seen: c.tokens_seen,
                flops: c.flops,
                lm_loss: c.lm_loss,
                cls_loss: f.cls_loss,
                top1: f.top1,
                top3: f.top3,
                top5: f.top5,
            }),
            None => skipped.push(SkippedCheckpoint {
                model_name: c.model_name.clone(),
                step: c.step,
                reason: "no fine-tune result".into(),
            }),
        }
    }
    points.sort_by_key(|p| (p.n_params, p.tokens_seen));
    (points, skipped)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitKind {
    Linear,
    LogLinear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub kind: FitKind,
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub n_points: usize,
}

/// Ordinary least squares `y = slope * x + intercept`.
pub fn fit_linear(x: &[f64], y: &[f64]) -> Result<FitResult> {
    if x.len() != y.len() {
        return Err(ScalingError::Contract(format!("{} x values vs {} y values", x.len(), y.len())));
    }
    let n = x.len();
    if n < 3 {
        return Err(ScalingError::Contract(format!("need at least 3 points, got {n}")));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(ScalingError::Contract("non-finite input".into()));
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    if sxx <= f64::EPSILON * n as f64 * mx.abs().max(1.0).powi(2) {
        return Err(ScalingError::Contract("x values are all equal".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r_squared = if syy == 0.0 {
        0.0
    } else {
        let ss_res: f64 = x.iter().zip(y).map(|(a, b)| (b - (slope * a + intercept)).powi(2)).sum();
        (1.0 - ss_res / syy).clamp(0.0, 1.0)
    };
    Ok(FitResult {
        kind: FitKind::Linear,
        slope,
        intercept,
        r_squared,
        n_points: n,
    })
}

/// `cls_loss` against `ln(tokens_seen)` for one model's checkpoints.
pub fn fit_loss_vs_tokens(points: &[ScalingPoint]) -> Result<FitResult> {
    if points.iter().any(|p| p.tokens_seen == 0) {
        return Err(ScalingError::Contract("log fit needs positive token counts".into()));
    }
    let x: Vec<f64> = points.iter().map(|p| (p.tokens_seen as f64).ln()).collect();
    let y: Vec<f64> = points.iter().map(|p| p.cls_loss).collect();
    Ok(FitResult {
        kind: FitKind::LogLinear,
        ..fit_linear(&x, &y)?
    })
}

/// `cls_loss` against raw `tokens_seen`.
pub fn fit_loss_vs_tokens_linear(points: &[ScalingPoint]) -> Result<FitResult> {
    let x: Vec<f64> = points.iter().map(|p| p.tokens_seen as f64).collect();
    let y: Vec<f64> = points.iter().map(|p| p.cls_loss).collect();
    fit_linear(&x, &y)
}

/// Pooled `cls_loss` against `lm_loss` across every point.
pub fn fit_cls_vs_lm(points: &[ScalingPoint]) -> Result<FitResult> {
    let x: Vec<f64> = points.iter().map(|p| p.lm_loss).collect();
    let y: Vec<f64> = points.iter().map(|p| p.cls_loss).collect();
    fit_linear(&x, &y)
}

/// Points grouped by model, models ordered by parameter count.
pub fn by_model(points: &[ScalingPoint]) -> Vec<(String, Vec<ScalingPoint>)> {
    let mut groups: BTreeMap<(u64, String), Vec<ScalingPoint>> = BTreeMap::new();
    for p in points {
        groups
            .entry((p.n_params, p.model_name.clone()))
            .or_default()
            .push(p.clone());
    }
    groups
        .into_iter()
        .map(|((_, name), mut v)| {
            v.sort_by_key(|p| p.tokens_seen);
            (name, v)
        })
        .collect()
}

/// At every token count shared by a smaller and a larger model, counts the
/// cases where the larger model has the higher classification loss.
pub fn size_inversions(points: &[ScalingPoint]) -> usize {
    let groups = by_model(points);
    let mut n = 0;
    for (i, (_, small)) in groups.iter().enumerate() {
        let small: BTreeMap<u64, f64> = small.iter().map(|p| (p.tokens_seen, p.cls_loss)).collect();
        for (_, large) in &groups[i + 1..] {
            n += large
                .iter()
                .filter(|p| small.get(&p.tokens_seen).is_some_and(|&s| p.cls_loss > s))
                .count();
        }
    }
    n
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitRow {
    pub scope: String,
    pub x: String,
    pub y: String,
    pub kind: FitKind,
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub n_points: usize,
}

/// The pooled LM-loss fit plus log-linear and linear token fits for every
/// model with at least three checkpoints.
pub fn standard_fits(points: &[ScalingPoint]) -> Vec<FitRow> {
    let row = |scope: &str, x: &str, f: FitResult| FitRow {
        scope: scope.into(),
        x: x.into(),
        y: "cls_loss".into(),
        kind: f.kind,
        slope: f.slope,
        intercept: f.intercept,
        r_squared: f.r_squared,
        n_points: f.n_points,
    };
    let mut rows = Vec::new();
    if let Ok(f) = fit_cls_vs_lm(points) {
        rows.push(row("all", "lm_loss", f));
    }
    for (name, pts) in by_model(points) {
        if let Ok(f) = fit_loss_vs_tokens(&pts) {
            rows.push(row(&name, "ln_tokens", f));
        }
        if let Ok(f) = fit_loss_vs_tokens_linear(&pts) {
            rows.push(row(&name, "tokens", f));
        }
    }
    rows
}

pub const POINTS_FILE: &str = "scaling_points.csv";
pub const FITS_FILE: &str = "scaling_fits.csv";

pub fn write_points(path: &Path, points: &[ScalingPoint]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record([
        "model_name",
        "n_params",
        "tokens_seen",
        "flops",
        "lm_loss",
        "cls_loss",
        "top1",
        "top3",
        "top5",
    ])?;
    for p in points {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_points(path: &Path) -> Result<Vec<ScalingPoint>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

fn write_fits(path: &Path, fits: &[FitRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(["scope", "x", "y", "kind", "slope", "intercept", "r_squared", "n_points"])?;
    for f in fits {
        w.serialize(f)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the points CSV, the fits CSV and, when there are points, the
/// loss and top-5 charts against FLOPs, tokens and LM loss. Returns every
/// file written.
pub fn emit_report(points: &[ScalingPoint], fits: &[FitRow], dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = vec![dir.join(POINTS_FILE), dir.join(FITS_FILE)];
    write_points(&written[0], points)?;
    write_fits(&written[1], fits)?;
    if points.is_empty() {
        return Ok(written);
    }
    let groups = by_model(points);
    type Pick = fn(&ScalingPoint) -> f64;
    let xs: [(&str, &str, Axis, Pick); 3] = [
        ("flops", "Adaptation FLOPs", Axis::Log10, |p| p.flops),
        ("tokens", "Adaptation tokens", Axis::Log10, |p| p.tokens_seen as f64),
        ("lmloss", "Heldout LM loss", Axis::Linear, |p| p.lm_loss),
    ];
    let ys: [(&str, &str, Pick); 2] = [
        ("loss", "Classification loss", |p| p.cls_loss),
        ("top5", "Top-5 accuracy", |p| p.top5),
    ];
    for (yname, ylabel, fy) in ys {
        for (xname, xlabel, axis, fx) in xs {
            let series: Vec<Series> = groups
                .iter()
                .map(|(name, pts)| Series {
                    name: name.clone(),
                    points: pts.iter().map(|p| (fx(p), fy(p))).collect(),
                })
                .collect();
            let title = format!("{ylabel} vs {}", xlabel.to_lowercase());
            let chart = Chart {
                title: &title,
                x_label: xlabel,
                y_label: ylabel,
                x_axis: axis,
                lines: xname != "lmloss",
            };
            let path = dir.join(format!("scaling_{yname}_vs_{xname}.svg"));
            std::fs::write(&path, chart.render(&series))?;
            written.push(path);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(name: &str, n: u64, tokens: u64, lm: f64, cls: f64) -> ScalingPoint {
        ScalingPoint {
            model_name: name.into(),
            n_params: n,
            tokens_seen: tokens,
            flops: 6.0 * n as f64 * tokens as f64,
            lm_loss: lm,
            cls_loss: cls,
            top1: 0.5,
            top3: 0.7,
            top5: 0.8,
        }
    }

    #[test]
    fn exact_line() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        let f = fit_linear(&x, &y).unwrap();
        assert!((f.slope - 2.0).abs() < 1e-12 && (f.intercept - 1.0).abs() < 1e-12);
        assert_eq!(f.r_squared, 1.0);
    }

    #[test]
    fn constant_y_and_degenerate_x() {
        let f = fit_linear(&[1.0, 2.0, 3.0], &[4.0, 4.0, 4.0]).unwrap();
        assert_eq!((f.slope, f.r_squared), (0.0, 0.0));
        assert!(fit_linear(&[2.0, 2.0, 2.0], &[1.0, 2.0, 3.0]).is_err());
        assert!(fit_linear(&[1.0, 2.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn log_token_fit() {
        let pts: Vec<ScalingPoint> = [1e3, 1e4, 1e5, 1e6]
            .iter()
            .map(|&t: &f64| pt("m", 10, t as u64, 1.0, 5.0 - 0.3 * t.ln()))
            .collect();
        let f = fit_loss_vs_tokens(&pts).unwrap();
        assert!((f.slope + 0.3).abs() < 1e-12);
        assert_eq!(f.kind, FitKind::LogLinear);
        assert!(fit_loss_vs_tokens(&pts[..1]).is_err());
    }

    #[test]
    fn collect_joins_and_sorts() {
        let mut cks = Vec::new();
        let mut fts = Vec::new();
        for (name, n) in [("mini", 900), ("nano", 60), ("micro", 230)] {
            for step in (1..=10).rev() {
                cks.push(CheckpointRecord {
                    model_name: name.into(),
                    n_params: n,
                    step,
                    tokens_seen: step * 100,
                    flops: 6.0 * n as f64 * (step * 100) as f64,
                    lm_loss: 2.0,
                });
                fts.push(FineTuneRecord {
                    model_name: name.into(),
                    step,
                    cls_loss: 1.0,
                    top1: 0.1,
                    top3: 0.2,
                    top5: 0.3,
                });
            }
        }
        fts.retain(|f| !(f.model_name == "nano" && f.step == 4));
        let (points, skipped) = collect(&cks, &fts);
        assert_eq!(points.len(), 29);
        assert_eq!(skipped.len(), 1);
        assert!(points
            .windows(2)
            .all(|w| (w[0].n_params, w[0].tokens_seen) <= (w[1].n_params, w[1].tokens_seen)));
        for p in &points {
            assert_eq!(p.flops, 6.0 * p.n_params as f64 * p.tokens_seen as f64);
        }
    }

    #[test]
    fn inversions_counted_over_every_size_pair() {
        let pts = vec![
            pt("a", 1, 100, 2.0, 3.0),
            pt("a", 1, 200, 1.8, 2.5),
            pt("b", 4, 100, 1.9, 2.8),
            pt("b", 4, 200, 1.7, 2.6),
            pt("c", 9, 100, 1.8, 2.9),
            pt("c", 9, 300, 1.6, 2.0),
        ];
        // b@200 > a@200, c@100 > b@100; c@100 < a@100 and 300 is unshared
        assert_eq!(size_inversions(&pts), 2);
    }

    #[test]
    fn report_round_trip_and_files() {
        let dir = tempfile::tempdir().unwrap();
        let pts = vec![
            pt("a", 1, 100, 2.0, 3.0),
            pt("a", 1, 200, 1.8, 2.5),
            pt("a", 1, 400, 1.6, 2.25),
        ];
        let fits = standard_fits(&pts);
        assert_eq!(fits.len(), 3);
        let files = emit_report(&pts, &fits, dir.path()).unwrap();
        assert_eq!(read_points(&files[0]).unwrap(), pts);
        for stem in ["loss", "top5"] {
            for x in ["flops", "tokens", "lmloss"] {
                assert!(dir.path().join(format!("scaling_{stem}_vs_{x}.svg")).exists());
            }
        }
        let header = std::fs::read_to_string(&files[0]).unwrap();
        assert!(header.starts_with("model_name,n_params,tokens_seen,flops,lm_loss,cls_loss,top1,top3,top5\n"));
    }

    #[test]
    fn empty_report_has_headers_only() {
        let dir = tempfile::tempdir().unwrap();
        let files = emit_report(&[], &[], dir.path()).unwrap();
        assert_eq!(files.len(), 2);
        assert_eq!(
            std::fs::read_to_string(&files[0]).unwrap(),
            "model_name,n_params,tokens_seen,flops,lm_loss,cls_loss,top1,top3,top5\n"
        );
        assert!(read_points(&files[0]).unwrap().is_empty());
    }
}
