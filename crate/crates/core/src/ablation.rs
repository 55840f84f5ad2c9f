//! Grid driver: train each configuration on shared data, score it on the
//! in-domain and shifted held-out splits.

use std::io::Write;

use serde::Serialize;

use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::scalar::Scalar;
use crate::scene::{SceneSample, SplitTag};
use crate::train::{evaluate_model, train, HeldOut, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct GridEntry {
    pub method: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// One configuration per line as whitespace-separated `key=value` tokens
/// over the given bases. `method=<name>` overrides the derived label.
///
/// ```text
/// backbone=nf18 attention=false
/// backbone=nf18 attention=true lambda_ade=0 lambda_fde=0 method=no-ade
/// ```
pub fn parse_grid(text: &str, model: &ModelConfig, train: &TrainConfig) -> Result<Vec<GridEntry>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let at = |e: Error| Error::Config(format!("grid line {}: {e}", n + 1));
        let mut kv_text = String::new();
        for tok in line.split_whitespace() {
            if !tok.contains('=') {
                return Err(Error::Config(format!("grid line {}: expected key=value, got `{tok}`", n + 1)));
            }
            kv_text.push_str(tok);
            kv_text.push('\n');
        }
        let mut kv = KvConfig::parse(&kv_text).map_err(at)?;
        let name = kv.take_str("method");
        let m = ModelConfig::from_kv(&mut kv, model.clone()).map_err(at)?;
        let t = TrainConfig::from_kv(&mut kv, train.clone()).map_err(at)?;
        kv.finish().map_err(at)?;
        out.push(GridEntry {
            method: name.unwrap_or_else(|| m.label()),
            model: m,
            train: t,
        });
    }
    if out.is_empty() {
        return Err(Error::Config("grid has no configurations".into()));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub method: String,
    pub split: String,
    pub ade: f64,
    pub fde: f64,
    pub nll: f64,
}

pub fn write_ablation_csv<W: Write>(rows: &[AblationRow], mut w: W) -> Result<()> {
    writeln!(w, "method,split,ade,fde,nll")?;
    for r in rows {
        writeln!(w, "{},{},{},{},{}", r.method, r.split, r.ade, r.fde, r.nll)?;
    }
    w.flush()?;
    Ok(())
}

/// Training scenes and the two held-out splits.
#[derive(Clone, Debug)]
pub struct Partition {
    pub train: Vec<SceneSample>,
    pub in_domain: Vec<SceneSample>,
    pub shifted: Vec<SceneSample>,
}

impl Partition {
    /// The last `holdout` in-domain samples (file order) are held out; all
    /// shifted samples are evaluation-only.
    pub fn split(data: Vec<SceneSample>, holdout: usize) -> Result<Self> {
        let (mut ind, shifted): (Vec<_>, Vec<_>) = data.into_iter().partition(|s| s.split == SplitTag::InDomain);
        if holdout == 0 || ind.len() <= holdout || shifted.is_empty() {
            return Err(Error::Config(format!(
                "need more than {holdout} in-domain and at least one shifted sample, got {} and {}",
                ind.len(),
                shifted.len()
            )));
        }
        let in_domain = ind.split_off(ind.len() - holdout);
        Ok(Self {
            train: ind,
            in_domain,
            shifted,
        })
    }
}

/// Held-out metrics of a trained model on both splits.
#[derive(Clone, Copy, Debug)]
pub struct SplitScores {
    pub in_domain: HeldOut,
    pub shifted: HeldOut,
}

impl SplitScores {
    pub fn rows(&self, method: &str) -> [AblationRow; 2] {
        let row = |split: SplitTag, h: &HeldOut| AblationRow {
            method: method.to_string(),
            split: split.name().to_string(),
            ade: h.ade,
            fde: h.fde,
            nll: h.nll,
        };
        [row(SplitTag::InDomain, &self.in_domain), row(SplitTag::Shifted, &self.shifted)]
    }
}

pub fn score_splits<T: Scalar>(model: &Model<T>, data: &Partition) -> Result<SplitScores> {
    Ok(SplitScores {
        in_domain: evaluate_model(model, &data.in_domain, 64)?,
        shifted: evaluate_model(model, &data.shifted, 64)?,
    })
}

/// Trains and scores one entry in single precision.
pub fn run_entry(entry: &GridEntry, data: &Partition) -> Result<(Model<f32>, SplitScores)> {
    let model = Model::<f32>::new(entry.model.clone(), entry.train.seed)?;
    let out = train(model, &entry.train, &data.train, &[], |_| {})?;
    let scores = score_splits(&out.model, data)?;
    Ok((out.model, scores))
}

/// Failed entries produce NaN rows and are reported alongside. `on_done`
/// sees every outcome, including the trained model.
pub fn run_grid(
    entries: &[GridEntry],
    data: &Partition,
    mut on_done: impl FnMut(usize, &GridEntry, &Result<(Model<f32>, SplitScores)>),
) -> (Vec<AblationRow>, Vec<(String, Error)>) {
    let mut rows = Vec::with_capacity(2 * entries.len());
    let mut failures = Vec::new();
    for (i, e) in entries.iter().enumerate() {
        let res = run_entry(e, data);
        on_done(i, e, &res);
        match res {
            Ok((_, s)) => rows.extend(s.rows(&e.method)),
            Err(err) => {
                let nan = HeldOut {
                    step: 0,
                    ade: f64::NAN,
                    fde: f64::NAN,
                    nll: f64::NAN,
                };
                rows.extend(SplitScores { in_domain: nan, shifted: nan }.rows(&e.method));
                failures.push((e.method.clone(), err));
            }
        }
    }
    (rows, failures)
}
