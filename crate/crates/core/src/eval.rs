//! Error-retention curves and the prediction-vs-ground-truth report.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::ensemble::ScenePrediction;
use crate::metrics::{ade, fde, gaussian_nll, min_agg};
use crate::scene::{SceneSample, SplitTag};

#[derive(Clone, Debug, PartialEq)]
pub struct RetentionCurve {
    /// `(k / N, f(k))` for `k = 0..=N`.
    pub points: Vec<(f64, f64)>,
    pub r_auc: f64,
}

/// Sorts by ascending uncertainty (stable), retains the `k` most confident
/// errors and hands the rest to an oracle with zero error:
/// `f(k) = (1/N) Σ_{i<k} e_(i)`, `r_auc = (1/N) Σ_{k=1..N} f(k)`, accumulated
/// as one division by `N²`.
pub fn retention_curve(errors: &[f64], uncertainties: &[f64]) -> Result<RetentionCurve> {
    if errors.len() != uncertainties.len() || errors.is_empty() {
        return Err(Error::shape("retention_curve", &[errors.len()], &[uncertainties.len()]));
    }
    if errors.iter().chain(uncertainties).any(|v| !v.is_finite()) {
        return Err(Error::NumericFault { op: "retention_curve" });
    }
    let n = errors.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| uncertainties[a].total_cmp(&uncertainties[b]));
    let mut points = Vec::with_capacity(n + 1);
    points.push((0.0, 0.0));
    let mut cum = 0.0;
    let mut area = 0.0;
    for (k, &i) in order.iter().enumerate() {
        cum += errors[i];
        let f = cum / n as f64;
        area += cum;
        points.push(((k + 1) as f64 / n as f64, f));
    }
    Ok(RetentionCurve {
        points,
        r_auc: area / (n * n) as f64,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Ade,
    Fde,
    Cnll,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Ade, Metric::Fde, Metric::Cnll];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Ade => "ade",
            Metric::Fde => "fde",
            Metric::Cnll => "cnll",
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ade" => Ok(Metric::Ade),
            "fde" => Ok(Metric::Fde),
            "cnll" | "nll" => Ok(Metric::Cnll),
            _ => Err(Error::Config(format!("unknown metric `{s}` (ade|fde|cnll)"))),
        }
    }
}

/// Per-scene metric values of one metric.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneScores {
    /// Most confident candidate.
    pub top: f64,
    /// Confidence-weighted over candidates; the retained error.
    pub weighted: f64,
    /// Best candidate.
    pub min: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportRow {
    pub split: String,
    pub metric: Metric,
    pub mean: f64,
    pub wmean: f64,
    pub minmean: f64,
    pub r_auc: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    pub curves: BTreeMap<String, RetentionCurve>,
}

impl Report {
    pub fn row(&self, split: &str, metric: Metric) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.split == split && r.metric == metric)
    }

    /// CSV with columns `split,metric,mean,wmean,minmean,r_auc`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "split,metric,mean,wmean,minmean,r_auc")?;
        for r in &self.rows {
            writeln!(w, "{},{},{},{},{},{}", r.split, r.metric.name(), r.mean, r.wmean, r.minmean, r.r_auc)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Scores one scene's candidates against its ground truth.
pub fn score_scene(pred: &ScenePrediction, gt: &[[f64; 2]], metric: Metric) -> Result<SceneScores> {
    let set = pred.candidate_set();
    set.validate()?;
    let per: Vec<f64> = pred
        .candidates
        .iter()
        .map(|c| match metric {
            Metric::Ade => ade(&c.points, gt),
            Metric::Fde => fde(&c.points, gt),
            Metric::Cnll => gaussian_nll(&c.points, &c.scales, gt),
        })
        .collect::<Result<_>>()?;
    let weighted = per.iter().zip(&set.confidences).map(|(v, c)| v * c).sum();
    let min = match metric {
        Metric::Ade => min_agg(&set, gt)?.ade,
        Metric::Fde => min_agg(&set, gt)?.fde,
        Metric::Cnll => per.iter().copied().fold(f64::INFINITY, f64::min),
    };
    Ok(SceneScores {
        top: per[set.top()],
        weighted,
        min,
    })
}

/// Joins predictions with ground truth by `scene_id` and reports each split
/// present plus the pooled `all` row for every requested metric.
pub fn evaluate(preds: &[ScenePrediction], data: &[SceneSample], metrics: &[Metric]) -> Result<Report> {
    let mut by_id: HashMap<u64, &SceneSample> = HashMap::with_capacity(data.len());
    for s in data {
        if by_id.insert(s.scene_id, s).is_some() {
            return Err(Error::Format(format!("duplicate scene_id {} in dataset", s.scene_id)));
        }
    }
    let mut seen = HashMap::with_capacity(preds.len());
    let mut missing = Vec::new();
    for p in preds {
        if seen.insert(p.scene_id, ()).is_some() {
            return Err(Error::Format(format!("duplicate scene_id {} in predictions", p.scene_id)));
        }
        if !by_id.contains_key(&p.scene_id) {
            missing.push(p.scene_id);
        }
    }
    if !missing.is_empty() {
        return Err(Error::Format(format!("predictions reference unknown scene ids {missing:?}")));
    }
    if preds.is_empty() {
        return Err(Error::Format("no predictions to evaluate".into()));
    }

    let mut sorted: Vec<&ScenePrediction> = preds.iter().collect();
    sorted.sort_by_key(|p| p.scene_id);
    let mut rows = Vec::new();
    let mut curves = BTreeMap::new();
    for &metric in metrics {
        let mut groups: BTreeMap<String, Vec<(SceneScores, f64)>> = BTreeMap::new();
        for &p in &sorted {
            let sample = by_id[&p.scene_id];
            let s = score_scene(p, &sample.future_f64(), metric)?;
            for split in [sample.split.name(), "all"] {
                groups.entry(split.to_string()).or_default().push((s, p.scene_uncertainty));
            }
        }
        let order = [SplitTag::InDomain.name(), SplitTag::Shifted.name(), "all"];
        for split in order {
            let Some(g) = groups.get(split) else { continue };
            let n = g.len() as f64;
            let errors: Vec<f64> = g.iter().map(|(s, _)| s.weighted).collect();
            let unc: Vec<f64> = g.iter().map(|(_, u)| *u).collect();
            let curve = retention_curve(&errors, &unc)?;
            rows.push(ReportRow {
                split: split.to_string(),
                metric,
                mean: g.iter().map(|(s, _)| s.top).sum::<f64>() / n,
                wmean: errors.iter().sum::<f64>() / n,
                minmean: g.iter().map(|(s, _)| s.min).sum::<f64>() / n,
                r_auc: curve.r_auc,
            });
            curves.insert(format!("{split}/{}", metric.name()), curve);
        }
    }
    Ok(Report { rows, curves })
}
