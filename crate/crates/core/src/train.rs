//! AdamW training loop with global-norm clipping.

use std::io::Write;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::metrics::{ade, fde, gaussian_nll};
use crate::model::{batch_tensors, save_checkpoint, DecodeMode, Feed, Model};
use crate::nn::{ParamKind, ParamStore};
use crate::scalar::Scalar;
use crate::scene::SceneSample;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub steps: usize,
    pub clip: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub feed: Feed,
    /// Held-out evaluation and checkpoint period in steps; 0 disables.
    pub eval_every: usize,
    pub checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch: 32,
            steps: 2000,
            clip: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            seed: 0,
            feed: Feed::FreeRunning,
            eval_every: 0,
            checkpoint: None,
        }
    }
}

impl TrainConfig {
    /// Batch size of the full-scale setup.
    pub const FULL_BATCH: usize = 512;

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr.is_finite()
            && self.lr >= 0.0
            && self.clip > 0.0
            && self.batch >= 1
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid training config {self:?}")))
        }
    }

    /// Reads `lr`, `batch`, `steps`, `clip`, `beta1`, `beta2`, `eps`,
    /// `weight_decay`, `seed`, `feed`, `eval_every` on top of `base`.
    pub fn from_kv(kv: &mut KvConfig, base: TrainConfig) -> Result<Self> {
        let cfg = Self {
            lr: kv.take_or("lr", base.lr)?,
            batch: kv.take_or("batch", base.batch)?,
            steps: kv.take_or("steps", base.steps)?,
            clip: kv.take_or("clip", base.clip)?,
            beta1: kv.take_or("beta1", base.beta1)?,
            beta2: kv.take_or("beta2", base.beta2)?,
            eps: kv.take_or("eps", base.eps)?,
            weight_decay: kv.take_or("weight_decay", base.weight_decay)?,
            seed: kv.take_or("seed", base.seed)?,
            feed: kv.take_or("feed", base.feed)?,
            eval_every: kv.take_or("eval_every", base.eval_every)?,
            checkpoint: base.checkpoint,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// First and second moments of every parameter.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
    /// Steps skipped because of non-finite gradients.
    pub faults: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros: Vec<_> = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            faults: 0,
        }
    }
}

/// `sqrt(Σ g²)` over all tensors.
pub fn global_norm<T: Scalar>(grads: &[Tensor<T>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let n = global_norm(grads);
    if n > max_norm {
        let s = T::lit(max_norm / n);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    n
}

/// One decoupled-weight-decay Adam update. Decay applies to weights only.
/// Non-finite gradients skip the step and count a fault.
pub fn adamw_step<T: Scalar>(params: &mut ParamStore<T>, grads: &[Tensor<T>], state: &mut AdamState<T>, cfg: &TrainConfig) -> bool {
    if grads.iter().any(|g| !g.all_finite()) {
        state.faults += 1;
        return false;
    }
    state.step += 1;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for (i, p) in params.iter_mut().enumerate() {
        let decay = if p.kind == ParamKind::Weight { cfg.weight_decay } else { 0.0 };
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (((w, &g), m), v) in p.value.data_mut().iter_mut().zip(grads[i].data()).zip(m).zip(v) {
            let g = g.as_f64();
            let mf = b1 * m.as_f64() + (1.0 - b1) * g;
            let vf = b2 * v.as_f64() + (1.0 - b2) * g * g;
            *m = T::lit(mf);
            *v = T::lit(vf);
            let (mh, vh) = (mf / c1, vf / c2);
            let wf = w.as_f64();
            *w = T::lit(wf - cfg.lr * (mh / (vh.sqrt() + cfg.eps) + decay * wf));
        }
    }
    true
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub nll: f64,
    pub ade_term: f64,
    pub fde_term: f64,
}

pub fn write_log_csv<W: Write>(rows: &[LogRow], mut w: W) -> Result<()> {
    writeln!(w, "step,loss,nll,ade_term,fde_term")?;
    for r in rows {
        writeln!(w, "{},{},{},{},{}", r.step, r.loss, r.nll, r.ade_term, r.fde_term)?;
    }
    w.flush()?;
    Ok(())
}

/// Autoregressive (mean-mode) held-out metrics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct HeldOut {
    pub step: usize,
    pub ade: f64,
    pub fde: f64,
    pub nll: f64,
}

/// Mean ADE, FDE and NLL of mean-mode predictions over `samples`.
pub fn evaluate_model<T: Scalar>(model: &Model<T>, samples: &[SceneSample], batch: usize) -> Result<HeldOut> {
    if samples.is_empty() {
        return Err(Error::Config("no held-out samples".into()));
    }
    let (mut a, mut f, mut n) = (0.0, 0.0, 0.0);
    for chunk in samples.chunks(batch.max(1)) {
        let refs: Vec<&SceneSample> = chunk.iter().collect();
        let (x, _) = batch_tensors::<T>(&refs)?;
        let (dist, _) = model.predict(&x, DecodeMode::Mean)?;
        for (b, s) in chunk.iter().enumerate() {
            let gt = s.future_f64();
            let mu = dist.mean_path(b);
            a += ade(&mu, &gt)?;
            f += fde(&mu, &gt)?;
            n += gaussian_nll(&mu, &dist.scales(b), &gt)?;
        }
    }
    let c = samples.len() as f64;
    Ok(HeldOut {
        step: 0,
        ade: a / c,
        fde: f / c,
        nll: n / c,
    })
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub model: Model<T>,
    pub log: Vec<LogRow>,
    pub held_out: Vec<HeldOut>,
    pub faults: u64,
}

/// Deterministic epoch-shuffled minibatch order.
struct Batcher {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Batcher {
    fn new(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xD1B5_4A32_D192_ED03);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Self { order, pos: 0, rng }
    }

    fn next(&mut self, batch: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(batch);
        while out.len() < batch {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Trains `model` in place of a fresh copy. A non-finite loss aborts with
/// [`Error::NumericFault`]; any checkpoint already written is left intact.
pub fn train<T: Scalar>(
    model: Model<T>,
    cfg: &TrainConfig,
    data: &[SceneSample],
    held_out: &[SceneSample],
    mut on_step: impl FnMut(&LogRow),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut model = model;
    let mut state = AdamState::new(&model.params);
    let mut batcher = Batcher::new(data.len(), cfg.seed);
    let mut log = Vec::with_capacity(cfg.steps);
    let mut evals = Vec::new();
    let batch = cfg.batch.min(data.len());

    for step in 1..=cfg.steps {
        let idx = batcher.next(batch);
        let refs: Vec<&SceneSample> = idx.iter().map(|&i| &data[i]).collect();
        let (x, y) = batch_tensors::<T>(&refs)?;

        let mut tape = Tape::new();
        let p = model.bind(&mut tape, true);
        let xv = tape.constant(x);
        let terms = model.loss(&mut tape, &p, xv, &y, cfg.feed)?;
        let row = LogRow {
            step,
            loss: tape.value(terms.total).item().as_f64(),
            nll: tape.value(terms.nll).item().as_f64(),
            ade_term: tape.value(terms.ade).item().as_f64(),
            fde_term: tape.value(terms.fde).item().as_f64(),
        };
        if !row.loss.is_finite() {
            log::error!("step {step}: non-finite loss, aborting");
            return Err(Error::NumericFault { op: "train" });
        }
        tape.backward(terms.total)?;
        let mut grads = model.params.grads(&tape, &p);
        drop(tape);
        clip_global_norm(&mut grads, cfg.clip);
        if !adamw_step(&mut model.params, &grads, &mut state, cfg) {
            log::warn!("step {step}: non-finite gradient, update skipped");
        }
        on_step(&row);
        log.push(row);

        if cfg.eval_every > 0 && (step % cfg.eval_every == 0 || step == cfg.steps) {
            if !held_out.is_empty() {
                let mut h = evaluate_model(&model, held_out, 64)?;
                h.step = step;
                log::info!("step {step}: held-out ade {:.3} fde {:.3} nll {:.2}", h.ade, h.fde, h.nll);
                evals.push(h);
            }
            if let Some(path) = &cfg.checkpoint {
                save_checkpoint(&model, path)?;
            }
        }
    }
    if let Some(path) = &cfg.checkpoint {
        save_checkpoint(&model, path)?;
    }
    Ok(TrainOutcome {
        model,
        log,
        held_out: evals,
        faults: state.faults,
    })
}
