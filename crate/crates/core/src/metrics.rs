//! Displacement and likelihood metrics over trajectories and candidate sets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::LOG_2PI;

pub type Path2 = [[f64; 2]];

fn check_pair(op: &'static str, pred: &Path2, gt: &Path2) -> Result<()> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::shape(op, &[pred.len(), 2], &[gt.len(), 2]));
    }
    Ok(())
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Mean Euclidean distance over steps.
pub fn ade(pred: &Path2, gt: &Path2) -> Result<f64> {
    check_pair("ade", pred, gt)?;
    Ok(pred.iter().zip(gt).map(|(&p, &g)| dist(p, g)).sum::<f64>() / pred.len() as f64)
}

/// Euclidean distance at the final step.
pub fn fde(pred: &Path2, gt: &Path2) -> Result<f64> {
    check_pair("fde", pred, gt)?;
    Ok(dist(pred[pred.len() - 1], gt[gt.len() - 1]))
}

/// Trajectory NLL of `gt` under per-step Gaussians centred on `mu`.
///
/// Each entry of `scales` is `[σx, σy]` (independent coordinates) or
/// `[l11, l21, l22]` (lower-triangular factor of the covariance).
pub fn gaussian_nll(mu: &Path2, scales: &[Vec<f64>], gt: &Path2) -> Result<f64> {
    check_pair("gaussian_nll", mu, gt)?;
    if scales.len() != mu.len() {
        return Err(Error::shape("gaussian_nll", &[scales.len()], &[mu.len()]));
    }
    let mut total = 0.0;
    for ((m, g), s) in mu.iter().zip(gt).zip(scales) {
        let (r1, r2) = (g[0] - m[0], g[1] - m[1]);
        let (d1, d2, quad) = match s.as_slice() {
            &[sx, sy] => (sx, sy, (r1 / sx).powi(2) + (r2 / sy).powi(2)),
            &[l11, l21, l22] => {
                let s1 = r1 / l11;
                let s2 = (r2 - l21 * s1) / l22;
                (l11, l22, s1 * s1 + s2 * s2)
            }
            _ => return Err(Error::shape("gaussian_nll", &[s.len()], &[2])),
        };
        if !(d1 > 0.0 && d2 > 0.0) {
            return Err(Error::NumericFault { op: "gaussian_nll" });
        }
        total += LOG_2PI + d1.ln() + d2.ln() + 0.5 * quad;
    }
    if !total.is_finite() {
        return Err(Error::NumericFault { op: "gaussian_nll" });
    }
    Ok(total)
}

/// Candidate trajectories of one scene with normalized confidences.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub trajectories: Vec<Vec<[f64; 2]>>,
    pub confidences: Vec<f64>,
    /// Higher means less confident.
    pub scene_uncertainty: f64,
}

impl CandidateSet {
    pub fn validate(&self) -> Result<()> {
        let g = self.trajectories.len();
        if g == 0 {
            return Err(Error::Format("candidate set is empty".into()));
        }
        if self.confidences.len() != g {
            return Err(Error::shape("candidate_set", &[g], &[self.confidences.len()]));
        }
        let finite = self.scene_uncertainty.is_finite()
            && self.confidences.iter().all(|c| c.is_finite() && *c >= 0.0)
            && self.trajectories.iter().flatten().flatten().all(|v| v.is_finite());
        if !finite {
            return Err(Error::Format("candidate set holds non-finite or negative values".into()));
        }
        let total: f64 = self.confidences.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::Format(format!("confidences sum to {total}, not 1")));
        }
        Ok(())
    }

    /// Index of the most confident candidate (lowest index on ties).
    pub fn top(&self) -> usize {
        let mut best = 0;
        for (i, &c) in self.confidences.iter().enumerate() {
            if c > self.confidences[best] {
                best = i;
            }
        }
        best
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MinAggregate {
    pub ade: f64,
    pub fde: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WeightedAggregate {
    pub ade: f64,
    pub fde: f64,
    pub nll: f64,
}

pub fn min_agg(set: &CandidateSet, gt: &Path2) -> Result<MinAggregate> {
    set.validate()?;
    let mut out = MinAggregate {
        ade: f64::INFINITY,
        fde: f64::INFINITY,
    };
    for t in &set.trajectories {
        out.ade = out.ade.min(ade(t, gt)?);
        out.fde = out.fde.min(fde(t, gt)?);
    }
    Ok(out)
}

/// Confidence-weighted ADE, FDE and NLL; `nlls[g]` is candidate g's NLL of
/// the ground truth under its source model.
pub fn weighted_agg(set: &CandidateSet, gt: &Path2, nlls: &[f64]) -> Result<WeightedAggregate> {
    set.validate()?;
    if nlls.len() != set.trajectories.len() {
        return Err(Error::shape("weighted_agg", &[nlls.len()], &[set.trajectories.len()]));
    }
    let mut out = WeightedAggregate {
        ade: 0.0,
        fde: 0.0,
        nll: 0.0,
    };
    for ((t, &c), &n) in set.trajectories.iter().zip(&set.confidences).zip(nlls) {
        out.ade += c * ade(t, gt)?;
        out.fde += c * fde(t, gt)?;
        out.nll += c * n;
    }
    Ok(out)
}
