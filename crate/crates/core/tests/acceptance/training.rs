//! End-to-end training runs: loss reduction and determinism, directional
//! ablations over seeds, and the in-domain vs shifted gap.

use std::time::Instant;

use trajkit::ablation::{run_entry, score_splits, GridEntry, Partition};
use trajkit::ensemble::{predict_scene, rip_predict, scene_seed, ScenePrediction, SelectionRule};
use trajkit::eval::{evaluate, Metric};
use trajkit::model::{batch_tensors, encode_checkpoint, LossWeights, Model, ModelConfig};
use trajkit::scene::{generate_dataset, RasterConfig, SceneSample, ShiftConfig, SplitTag};
use trajkit::train::{train, TrainConfig};

use crate::{Ctx, Outcome};

const SMOKE_SCENES: usize = 256;
const SMOKE_SIZE: usize = 64;

const ABLATION_SEEDS: u64 = 5;
const ABLATION_SCENES: usize = 2048;
const ABLATION_SIZE: usize = 32;
const ABLATION_STEPS: usize = 1500;
const ABLATION_LR: f64 = 1e-3;
const HELD_OUT: usize = 256;
const RIP_SAMPLES: usize = 4;
/// Directional wins required out of `ABLATION_SEEDS`.
const BAR: usize = 4;

fn partition(size: usize, train: usize, held: usize) -> Partition {
    let r = RasterConfig::with_size(size);
    Partition {
        train: generate_dataset(&ShiftConfig::in_domain(), &r, SplitTag::InDomain, 0, train).unwrap(),
        in_domain: generate_dataset(&ShiftConfig::in_domain(), &r, SplitTag::InDomain, 1_000_000, held).unwrap(),
        shifted: generate_dataset(&ShiftConfig::shifted(), &r, SplitTag::Shifted, 2_000_000, held).unwrap(),
    }
}

pub fn smoke(ctx: &mut Ctx) -> Outcome {
    let t0 = Instant::now();
    let data = partition(SMOKE_SIZE, SMOKE_SCENES, 64);
    let cfg = ModelConfig::micro();
    let tc = TrainConfig::default();
    let run = || train(Model::<f32>::new(cfg.clone(), tc.seed).unwrap(), &tc, &data.train, &[], |_| {}).unwrap();
    let a = run();
    let b = run();
    let secs = t0.elapsed().as_secs_f64();

    let initial = a.log[0].loss;
    let tail = &a.log[a.log.len() - 50..];
    let fin = tail.iter().map(|r| r.loss).sum::<f64>() / tail.len() as f64;
    let identical = encode_checkpoint(&a.model).unwrap() == encode_checkpoint(&b.model).unwrap();
    let scores = score_splits(&a.model, &data).unwrap();
    ctx.trained.push(("smoke".into(), scores.in_domain.ade, scores.shifted.ade));

    Outcome::new(
        fin <= 0.5 * initial && identical && secs < 1200.0,
        format!(
            "loss {initial:.2} -> {fin:.2} (ratio {:.3} <= 0.5), checkpoints identical: {identical}, {secs:.0} s < 1200 s for two runs",
            fin / initial
        ),
    )
    .detail(vec![
        format!("{SMOKE_SCENES} scenes, S={SMOKE_SIZE}, {}, {} steps, batch {}, lr {}", cfg.label(), tc.steps, tc.batch, tc.lr),
        format!("final = mean of the last 50 logged losses; skipped non-finite steps: {}", a.faults),
        format!("held-out ADE in-domain {:.3} m, shifted {:.3} m", scores.in_domain.ade, scores.shifted.ade),
    ])
}

fn entry(method: &str, seed: u64, attention: bool, loss: LossWeights) -> GridEntry {
    GridEntry {
        method: method.into(),
        model: ModelConfig {
            raster_size: ABLATION_SIZE,
            window: 2,
            attention,
            loss,
            ..ModelConfig::micro()
        },
        train: TrainConfig {
            lr: ABLATION_LR,
            steps: ABLATION_STEPS,
            seed,
            ..TrainConfig::default()
        },
    }
}

/// R-AUC of the ADE retention curve over both held-out splits.
fn r_auc(preds: Vec<ScenePrediction>, data: &[SceneSample]) -> f64 {
    evaluate(&preds, data, &[Metric::Ade]).unwrap().row("all", Metric::Ade).unwrap().r_auc
}

/// Each model proposes its mean plus `samples` draws per scene.
fn sampled(models: &[Model<f32>], data: &[SceneSample], samples: usize) -> f64 {
    let preds = data
        .iter()
        .map(|s| {
            let (x, _) = batch_tensors::<f32>(&[s]).unwrap();
            let p = rip_predict(models, &x, samples, scene_seed(0, s.scene_id), SelectionRule::MaxWorstCase).unwrap();
            ScenePrediction::from_ensemble(s.scene_id, &p)
        })
        .collect();
    r_auc(preds, data)
}

fn mean_only(model: &Model<f32>, data: &[SceneSample]) -> f64 {
    let preds = data
        .iter()
        .map(|s| predict_scene(std::slice::from_ref(model), s, 0, 0, SelectionRule::MaxWorstCase).unwrap())
        .collect();
    r_auc(preds, data)
}

pub fn ablations(ctx: &mut Ctx) -> Outcome {
    let t0 = Instant::now();
    let data = partition(ABLATION_SIZE, ABLATION_SCENES, HELD_OUT);
    let eval: Vec<SceneSample> = data.in_domain.iter().chain(&data.shifted).cloned().collect();
    let (mut wins_att, mut wins_loss, mut wins_rip) = (0, 0, 0);
    let mut details = Vec::new();
    for s in 0..ABLATION_SEEDS {
        let mut fit = |e: GridEntry| {
            let (m, sc) = run_entry(&e, &data).unwrap();
            ctx.trained.push((format!("{} seed {}", e.method, e.train.seed), sc.in_domain.ade, sc.shifted.ade));
            (m, sc)
        };
        let (_, a) = fit(entry("no-attention", s, false, LossWeights::default()));
        let (mb, b) = fit(entry("attention", s, true, LossWeights::default()));
        let (_, c) = fit(entry("attention-nll-only", s, true, LossWeights::nll_only()));
        let members = vec![
            mb,
            fit(entry("attention", s + 1000, true, LossWeights::default())).0,
            fit(entry("attention", s + 2000, true, LossWeights::default())).0,
        ];

        let ens = sampled(&members, &eval, RIP_SAMPLES);
        let singles: Vec<f64> = members.iter().map(|m| sampled(std::slice::from_ref(m), &eval, RIP_SAMPLES)).collect();
        let single = singles.iter().sum::<f64>() / singles.len() as f64;
        let plain = members.iter().map(|m| mean_only(m, &eval)).sum::<f64>() / members.len() as f64;

        wins_att += (b.in_domain.ade < a.in_domain.ade) as usize;
        wins_loss += (b.in_domain.ade < c.in_domain.ade) as usize;
        wins_rip += (ens < single) as usize;
        details.push(format!(
            "seed {s}: in-domain ADE no-attention {:.3} / attention {:.3} / nll-only {:.3}; R-AUC(ADE) ensemble {ens:.3} vs single {single:.3} (mean-only single {plain:.3})",
            a.in_domain.ade, b.in_domain.ade, c.in_domain.ade
        ));
    }
    let secs = t0.elapsed().as_secs_f64();
    details.insert(
        0,
        format!(
            "{ABLATION_SCENES} training scenes, S={ABLATION_SIZE}, window 2, {ABLATION_STEPS} steps, lr {ABLATION_LR}; held out {HELD_OUT} in-domain + {HELD_OUT} shifted; {RIP_SAMPLES} samples per model; {secs:.0} s"
        ),
    );
    Outcome::new(
        wins_att >= BAR && wins_loss >= BAR && wins_rip >= BAR,
        format!(
            "(a) attention wins {wins_att}/{ABLATION_SEEDS}, (b) ADE+FDE terms win {wins_loss}/{ABLATION_SEEDS}, (c) ensemble R-AUC wins {wins_rip}/{ABLATION_SEEDS}; bar {BAR}/{ABLATION_SEEDS}"
        ),
    )
    .detail(details)
}

pub fn shift_sanity(ctx: &mut Ctx) -> Outcome {
    if ctx.trained.is_empty() {
        return Outcome::new(false, "no trained models; run training-smoke or directional-ablations first");
    }
    let bad: Vec<String> = ctx
        .trained
        .iter()
        .filter(|(_, i, s)| s.partial_cmp(i) != Some(std::cmp::Ordering::Greater))
        .map(|(n, i, s)| format!("{n}: in-domain {i:.3} shifted {s:.3}"))
        .collect();
    let min_gap = ctx.trained.iter().map(|(_, i, s)| s - i).fold(f64::INFINITY, f64::min);
    Outcome::new(
        bad.is_empty(),
        format!(
            "shifted ADE > in-domain ADE for {}/{} models, smallest gap {min_gap:.3} m",
            ctx.trained.len() - bad.len(),
            ctx.trained.len()
        ),
    )
    .detail(bad)
}
