//! Robust Imitative Planning over several trained models.
//!
//! Every model proposes its mean trajectory plus `G` samples. Each candidate
//! is scored under every model as the mean per-step log-likelihood; the
//! worst case over models is the candidate's aggregated score.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::CandidateSet;
use crate::model::{batch_tensors, DecodeMode, Model};
use crate::scene::SceneSample;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Which aggregated score picks the plan.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionRule {
    /// Highest worst-case score.
    #[default]
    MaxWorstCase,
    /// Lowest worst-case score.
    MinWorstCase,
}

impl std::str::FromStr for SelectionRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" | "max-worst-case" => Ok(Self::MaxWorstCase),
            "min" | "min-worst-case" => Ok(Self::MinWorstCase),
            _ => Err(Error::Config(format!("unknown selection rule `{s}` (max|min)"))),
        }
    }
}

/// Row-wise minimum of a `G × K` score matrix.
pub fn worst_case_aggregate(scores: &[Vec<f64>]) -> Vec<f64> {
    scores
        .iter()
        .map(|row| row.iter().copied().fold(f64::INFINITY, f64::min))
        .collect()
}

/// Chosen candidate index; ties resolve to the lowest index.
pub fn select(aggregated: &[f64], rule: SelectionRule) -> usize {
    let mut best = 0;
    for (i, &v) in aggregated.iter().enumerate() {
        let better = match rule {
            SelectionRule::MaxWorstCase => v > aggregated[best],
            SelectionRule::MinWorstCase => v < aggregated[best],
        };
        if better {
            best = i;
        }
    }
    best
}

/// Numerically stable softmax.
pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub points: Vec<[f64; 2]>,
    /// Per-step scale parameters from the proposing model, see
    /// [`crate::metrics::gaussian_nll`].
    pub scales: Vec<Vec<f64>>,
    pub source_model: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnsemblePrediction {
    pub candidates: Vec<Candidate>,
    /// `scores[g][k]`: mean per-step log-likelihood of candidate g under model k.
    pub scores: Vec<Vec<f64>>,
    pub aggregated: Vec<f64>,
    pub chosen: usize,
    pub confidences: Vec<f64>,
    pub scene_uncertainty: f64,
}

impl EnsemblePrediction {
    /// Aggregates a score matrix into plan choice, confidences and uncertainty.
    pub fn from_scores(candidates: Vec<Candidate>, scores: Vec<Vec<f64>>, rule: SelectionRule) -> Result<Self> {
        if candidates.is_empty() || scores.len() != candidates.len() || scores.iter().any(|r| r.is_empty()) {
            return Err(Error::shape("ensemble", &[candidates.len()], &[scores.len()]));
        }
        if scores.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NumericFault { op: "ensemble_scores" });
        }
        let aggregated = worst_case_aggregate(&scores);
        let chosen = select(&aggregated, rule);
        let best = aggregated.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(Self {
            confidences: softmax(&aggregated),
            scene_uncertainty: -best,
            candidates,
            scores,
            aggregated,
            chosen,
        })
    }

    pub fn candidate_set(&self) -> CandidateSet {
        CandidateSet {
            trajectories: self.candidates.iter().map(|c| c.points.clone()).collect(),
            confidences: self.confidences.clone(),
            scene_uncertainty: self.scene_uncertainty,
        }
    }
}

/// Fields that must agree across ensemble members.
pub fn check_compatible<T: Scalar>(models: &[Model<T>]) -> Result<()> {
    let first = models
        .first()
        .ok_or_else(|| Error::Config("ensemble needs at least one model".into()))?;
    let mut mismatched = Vec::new();
    for (i, m) in models.iter().enumerate().skip(1) {
        if m.cfg.channels != first.cfg.channels {
            mismatched.push(format!("model {i}: channels {} vs {}", m.cfg.channels, first.cfg.channels));
        }
        if m.cfg.raster_size != first.cfg.raster_size {
            mismatched.push(format!("model {i}: raster_size {} vs {}", m.cfg.raster_size, first.cfg.raster_size));
        }
    }
    if mismatched.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(format!("incompatible models: {}", mismatched.join("; "))))
    }
}

/// Seed of model `k`'s sample batch for one scene.
fn member_seed(seed: u64, k: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k as u64 + 1)
}

/// RIP prediction for one `(1, C, S, S)` raster.
pub fn rip_predict<T: Scalar>(
    models: &[Model<T>],
    x: &Tensor<T>,
    samples_per_model: usize,
    seed: u64,
    rule: SelectionRule,
) -> Result<EnsemblePrediction> {
    check_compatible(models)?;
    if x.shape().first() != Some(&1) {
        return Err(Error::shape("rip_predict", x.shape(), &[1]));
    }
    let mut states = Vec::with_capacity(models.len());
    let mut candidates = Vec::new();
    for (k, m) in models.iter().enumerate() {
        let z0 = m.encode_values(x)?;
        let (dist, _) = m.decode_values(&z0, DecodeMode::Mean)?;
        candidates.push(Candidate {
            points: dist.mean_path(0),
            scales: dist.scales(0),
            source_model: k,
        });
        if samples_per_model > 0 {
            let tiled = Tensor::new(&[samples_per_model, m.cfg.hidden], z0.data().repeat(samples_per_model))?;
            let (dist, realized) = m.decode_values(&tiled, DecodeMode::Sample(member_seed(seed, k)))?;
            let t = dist.horizon();
            for j in 0..samples_per_model {
                candidates.push(Candidate {
                    points: realized.data()[j * t * 2..(j + 1) * t * 2]
                        .chunks(2)
                        .map(|p| [p[0].as_f64(), p[1].as_f64()])
                        .collect(),
                    scales: dist.scales(j),
                    source_model: k,
                });
            }
        }
        states.push(z0);
    }
    let paths: Vec<Vec<[f64; 2]>> = candidates.iter().map(|c| c.points.clone()).collect();
    let columns = models
        .iter()
        .zip(&states)
        .map(|(m, z0)| m.score_candidates(z0, &paths))
        .collect::<Result<Vec<_>>>()?;
    let scores = (0..paths.len())
        .map(|g| columns.iter().map(|col| col[g]).collect())
        .collect();
    EnsemblePrediction::from_scores(candidates, scores, rule)
}

/// One line of a prediction file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenePrediction {
    pub scene_id: u64,
    #[serde(rename = "g")]
    pub count: usize,
    pub candidates: Vec<CandidateRecord>,
    pub scene_uncertainty: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub confidence: f64,
    pub points: Vec<[f64; 2]>,
    pub scales: Vec<Vec<f64>>,
}

impl ScenePrediction {
    pub fn from_ensemble(scene_id: u64, p: &EnsemblePrediction) -> Self {
        Self {
            scene_id,
            count: p.candidates.len(),
            candidates: p
                .candidates
                .iter()
                .zip(&p.confidences)
                .map(|(c, &confidence)| CandidateRecord {
                    confidence,
                    points: c.points.clone(),
                    scales: c.scales.clone(),
                })
                .collect(),
            scene_uncertainty: p.scene_uncertainty,
        }
    }

    pub fn candidate_set(&self) -> CandidateSet {
        CandidateSet {
            trajectories: self.candidates.iter().map(|c| c.points.clone()).collect(),
            confidences: self.candidates.iter().map(|c| c.confidence).collect(),
            scene_uncertainty: self.scene_uncertainty,
        }
    }
}

/// Sampling seed of one scene.
pub fn scene_seed(seed: u64, scene_id: u64) -> u64 {
    seed ^ scene_id.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// One model gives its mean trajectory alone; several run
/// [`rip_predict`] with `samples_per_model` draws each.
pub fn predict_scene<T: Scalar>(
    models: &[Model<T>],
    sample: &SceneSample,
    samples_per_model: usize,
    seed: u64,
    rule: SelectionRule,
) -> Result<ScenePrediction> {
    let (x, _) = batch_tensors::<T>(&[sample])?;
    let g = if models.len() == 1 { 0 } else { samples_per_model };
    let p = rip_predict(models, &x, g, scene_seed(seed, sample.scene_id), rule)?;
    Ok(ScenePrediction::from_ensemble(sample.scene_id, &p))
}

/// Writes one JSON object per line.
pub fn write_predictions<W: Write>(preds: &[ScenePrediction], mut w: W) -> Result<()> {
    for p in preds {
        serde_json::to_writer(&mut w, p).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_predictions<R: BufRead>(r: R) -> Result<Vec<ScenePrediction>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let p: ScenePrediction =
            serde_json::from_str(&line).map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))?;
        if p.count != p.candidates.len() {
            return Err(Error::Format(format!("line {}: g = {} but {} candidates", i + 1, p.count, p.candidates.len())));
        }
        p.candidate_set()
            .validate()
            .map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))?;
        out.push(p);
    }
    Ok(out)
}
