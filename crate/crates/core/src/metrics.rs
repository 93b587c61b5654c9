//! Equal error rates under the three trial-typing rules, DET curves and
//! overlayable class histograms.
//!
//! Conventions used throughout: a trial is accepted when `score >= threshold`,
//! so `FAR(t) = |neg >= t| / |neg|` and `FRR(t) = |pos < t| / |pos|`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::{LabelCounts, TrialLabel};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("no {0} scores available")]
    EmptyClass(String),
    #[error("score {0} is not finite")]
    NonFiniteScore(usize),
    #[error("no scores to bin")]
    EmptyInput,
    #[error("number of bins must be at least 1")]
    ZeroBins,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredTrial {
    pub label: TrialLabel,
    pub score: f64,
}

/// An equal error rate and the threshold at which it occurs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Eer {
    pub rate: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct RocPoint {
    threshold: f64,
    far: f64,
    frr: f64,
}

impl RocPoint {
    fn gap(&self) -> f64 {
        self.far - self.frr
    }
}

fn check_finite(scores: &[f64]) -> Result<(), MetricsError> {
    match scores.iter().position(|s| !s.is_finite()) {
        Some(i) => Err(MetricsError::NonFiniteScore(i)),
        None => Ok(()),
    }
}

fn sorted(scores: &[f64]) -> Vec<f64> {
    let mut v = scores.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Walks the distinct thresholds in increasing order, yielding the
/// (FAR, FRR) operating point at each.
fn sweep(pos: &[f64], neg: &[f64]) -> Vec<RocPoint> {
    let pos = sorted(pos);
    let neg = sorted(neg);
    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    let mut thresholds: Vec<f64> = pos.iter().chain(&neg).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();

    let (mut pi, mut ni) = (0usize, 0usize);
    thresholds
        .into_iter()
        .map(|t| {
            while pi < pos.len() && pos[pi] < t {
                pi += 1;
            }
            while ni < neg.len() && neg[ni] < t {
                ni += 1;
            }
            RocPoint {
                threshold: t,
                far: (neg.len() - ni) as f64 / nn,
                frr: pi as f64 / np,
            }
        })
        .collect()
}

fn crossing(prev: RocPoint, cur: RocPoint) -> Eer {
    let (d0, d1) = (prev.gap(), cur.gap());
    let alpha = d0 / (d0 - d1);
    Eer {
        rate: prev.far + alpha * (cur.far - prev.far),
        threshold: prev.threshold + alpha * (cur.threshold - prev.threshold),
    }
}

/// Equal error rate of positive vs negative scores.
///
/// Locates the first threshold where `FAR - FRR <= 0` and linearly
/// interpolates between it and the preceding operating point. If the gap
/// never closes (every score tied at the top), a terminal point
/// `(FAR = 0, FRR = 1)` at the largest score closes it.
pub fn compute_eer(pos: &[f64], neg: &[f64]) -> Result<Eer, MetricsError> {
    if pos.is_empty() {
        return Err(MetricsError::EmptyClass("positive".into()));
    }
    if neg.is_empty() {
        return Err(MetricsError::EmptyClass("negative".into()));
    }
    check_finite(pos)?;
    check_finite(neg)?;

    let points = sweep(pos, neg);
    let mut prev = points[0];
    if prev.gap() <= 0.0 {
        // unreachable in practice: the lowest threshold accepts every negative
        return Ok(Eer { rate: prev.far, threshold: prev.threshold });
    }
    for &p in &points[1..] {
        if p.gap() == 0.0 {
            return Ok(Eer { rate: p.far, threshold: p.threshold });
        }
        if p.gap() < 0.0 {
            return Ok(crossing(prev, p));
        }
        prev = p;
    }
    let end = RocPoint { threshold: prev.threshold, far: 0.0, frr: 1.0 };
    Ok(crossing(prev, end))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub sv: Eer,
    pub spf: Eer,
    pub sasv: Eer,
    pub counts: LabelCounts,
}

/// SV-EER (target vs nontarget), SPF-EER (target vs spoof) and SASV-EER
/// (target vs nontarget and spoof). Trials outside a metric's two classes
/// are ignored by it.
pub fn compute_report(scored: &[ScoredTrial]) -> Result<MetricReport, MetricsError> {
    if let Some(i) = scored.iter().position(|t| !t.score.is_finite()) {
        return Err(MetricsError::NonFiniteScore(i));
    }
    let by = |label: TrialLabel| -> Vec<f64> {
        scored.iter().filter(|t| t.label == label).map(|t| t.score).collect()
    };
    let target = by(TrialLabel::Target);
    let nontarget = by(TrialLabel::NonTarget);
    let spoof = by(TrialLabel::Spoof);
    for (label, v) in TrialLabel::ALL.iter().zip([&target, &nontarget, &spoof]) {
        if v.is_empty() {
            return Err(MetricsError::EmptyClass(label.to_string()));
        }
    }
    let both: Vec<f64> = scored
        .iter()
        .filter(|t| t.label != TrialLabel::Target)
        .map(|t| t.score)
        .collect();
    Ok(MetricReport {
        sv: compute_eer(&target, &nontarget)?,
        spf: compute_eer(&target, &spoof)?,
        sasv: compute_eer(&target, &both)?,
        counts: LabelCounts::from_labels(scored.iter().map(|t| t.label)),
    })
}

/// `rate * 100` rounded half-to-even to two decimals.
pub fn format_percent(rate: f64) -> String {
    let hundredths = (rate * 10_000.0).round_ties_even() as i64;
    let sign = if hundredths < 0 { "-" } else { "" };
    let h = hundredths.abs();
    format!("{sign}{}.{:02}", h / 100, h % 100)
}

impl MetricReport {
    /// Flat `key=value` line form.
    pub fn to_text(&self) -> String {
        format!(
            "sv_eer={} spf_eer={} sasv_eer={} sv_threshold={} spf_threshold={} sasv_threshold={} target={} nontarget={} spoof={}\n",
            format_percent(self.sv.rate),
            format_percent(self.spf.rate),
            format_percent(self.sasv.rate),
            self.sv.threshold,
            self.spf.threshold,
            self.sasv.threshold,
            self.counts.target,
            self.counts.nontarget,
            self.counts.spoof,
        )
    }

    /// Structured form with keys `sv_eer`, `spf_eer`, `sasv_eer` (percent,
    /// two decimals), `thresholds` and `counts`.
    pub fn to_json(&self) -> serde_json::Value {
        let pct = |r: f64| -> serde_json::Value {
            serde_json::Value::Number(
                serde_json::Number::from_f64(format_percent(r).parse().expect("formatted number"))
                    .expect("finite"),
            )
        };
        serde_json::json!({
            "sv_eer": pct(self.sv.rate),
            "spf_eer": pct(self.spf.rate),
            "sasv_eer": pct(self.sasv.rate),
            "thresholds": {
                "sv": self.sv.threshold,
                "spf": self.spf.threshold,
                "sasv": self.sasv.threshold,
            },
            "counts": crate::protocol::counts_by_name(&self.counts),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetPoint {
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

/// DET staircase in increasing threshold order, bracketed by the
/// `(-inf, FAR 1, FRR 0)` and `(+inf, FAR 0, FRR 1)` endpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetCurve {
    pub points: Vec<DetPoint>,
}

impl DetCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("threshold,far,frr\n");
        for p in &self.points {
            let _ = writeln!(out, "{},{},{}", p.threshold, p.far, p.frr);
        }
        out
    }
}

/// `num_points == 0` keeps every distinct threshold; otherwise at most
/// `num_points` evenly spaced thresholds are kept between the endpoints.
pub fn det_curve(pos: &[f64], neg: &[f64], num_points: usize) -> Result<DetCurve, MetricsError> {
    if pos.is_empty() {
        return Err(MetricsError::EmptyClass("positive".into()));
    }
    if neg.is_empty() {
        return Err(MetricsError::EmptyClass("negative".into()));
    }
    check_finite(pos)?;
    check_finite(neg)?;
    let sweep = sweep(pos, neg);
    let chosen: Vec<RocPoint> = if num_points == 0 || num_points >= sweep.len() {
        sweep
    } else if num_points == 1 {
        vec![sweep[0]]
    } else {
        let last = sweep.len() - 1;
        let mut idx: Vec<usize> = (0..num_points).map(|k| k * last / (num_points - 1)).collect();
        idx.dedup();
        idx.into_iter().map(|i| sweep[i]).collect()
    };
    let mut points = Vec::with_capacity(chosen.len() + 2);
    points.push(DetPoint { threshold: f64::NEG_INFINITY, far: 1.0, frr: 0.0 });
    points.extend(chosen.into_iter().map(|p| DetPoint { threshold: p.threshold, far: p.far, frr: p.frr }));
    points.push(DetPoint { threshold: f64::INFINITY, far: 0.0, frr: 1.0 });
    Ok(DetCurve { points })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelHistogram {
    pub label: TrialLabel,
    pub counts: Vec<usize>,
}

/// Per-label counts over one shared set of uniform bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramExport {
    pub edges: Vec<f64>,
    pub classes: Vec<LabelHistogram>,
}

impl HistogramExport {
    pub fn num_bins(&self) -> usize {
        self.edges.len() - 1
    }

    pub fn counts(&self, label: TrialLabel) -> &[usize] {
        &self.classes.iter().find(|c| c.label == label).expect("all labels present").counts
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("label,bin_lo,bin_hi,count\n");
        for class in &self.classes {
            for (b, count) in class.counts.iter().enumerate() {
                let _ = writeln!(out, "{},{},{},{}", class.label, self.edges[b], self.edges[b + 1], count);
            }
        }
        out
    }
}

/// Bins every score into `num_bins` equal-width bins over `[min, max]`; the
/// last bin is closed on both ends. When all scores are equal a single bin
/// is used.
pub fn histogram(scored: &[ScoredTrial], num_bins: usize) -> Result<HistogramExport, MetricsError> {
    if num_bins == 0 {
        return Err(MetricsError::ZeroBins);
    }
    if scored.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    if let Some(i) = scored.iter().position(|t| !t.score.is_finite()) {
        return Err(MetricsError::NonFiniteScore(i));
    }
    let lo = scored.iter().map(|t| t.score).fold(f64::INFINITY, f64::min);
    let hi = scored.iter().map(|t| t.score).fold(f64::NEG_INFINITY, f64::max);
    let bins = if hi > lo { num_bins } else { 1 };
    let width = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins)
        .map(|b| if b == bins { hi } else { lo + b as f64 * width })
        .collect();

    let mut classes: Vec<LabelHistogram> = TrialLabel::ALL
        .iter()
        .map(|&label| LabelHistogram { label, counts: vec![0; bins] })
        .collect();
    for t in scored {
        let bin = if width > 0.0 {
            (((t.score - lo) / width).floor() as usize).min(bins - 1)
        } else {
            0
        };
        let slot = TrialLabel::ALL.iter().position(|&l| l == t.label).expect("known label");
        classes[slot].counts[bin] += 1;
    }
    Ok(HistogramExport { edges, classes })
}
