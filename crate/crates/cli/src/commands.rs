use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use rayon::prelude::*;
use serde::Serialize;

use trajkit::ablation::{parse_grid, run_grid, write_ablation_csv, Partition};
use trajkit::config::KvConfig;
use trajkit::ensemble::{check_compatible, predict_scene, read_predictions, write_predictions, ScenePrediction, SelectionRule};
use trajkit::eval::{evaluate as eval_report, Metric, Report};
use trajkit::model::{load_checkpoint, save_checkpoint, Model, ModelConfig};
use trajkit::scene::{generate_dataset, read_dataset, write_dataset, RasterConfig, SceneSample, ShiftConfig, SplitTag};
use trajkit::train::{train as run_training, write_log_csv, HeldOut, TrainConfig};

use crate::manifest::{beside, Recorder};
use crate::UsageError;

fn load_kv(path: Option<&Path>) -> anyhow::Result<KvConfig> {
    match path {
        Some(p) => Ok(KvConfig::load(p).with_context(|| format!("reading config {}", p.display()))?),
        None => Ok(KvConfig::default()),
    }
}

fn load_data(path: &Path) -> anyhow::Result<Vec<SceneSample>> {
    read_dataset(path).with_context(|| format!("reading dataset {}", path.display()))
}

fn ensure_parent(path: &Path) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Rejects datasets whose rasters do not fit the model.
fn check_raster(cfg: &ModelConfig, data: &[SceneSample]) -> anyhow::Result<()> {
    if let Some(s) = data.first() {
        let want = [cfg.channels, cfg.raster_size, cfg.raster_size];
        if s.raster.shape() != want {
            return Err(trajkit::Error::Format(format!("dataset rasters are {:?}, model expects {want:?}", s.raster.shape())).into());
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct GenerateConfig {
    split: &'static str,
    count: usize,
    scene: ShiftConfig,
    raster: RasterConfig,
}

pub fn generate(a: &crate::GenerateArgs, argv: &[String]) -> anyhow::Result<()> {
    let mut rec = Recorder::start("generate-data", argv);
    let (split, base) = match a.split.as_str() {
        "in" | "in_domain" => (SplitTag::InDomain, ShiftConfig::in_domain()),
        "shifted" => (SplitTag::Shifted, ShiftConfig::shifted()),
        other => return Err(UsageError(format!("--split must be in|shifted, got `{other}`")).into()),
    };
    let mut kv = load_kv(a.config.as_deref())?;
    let scene = ShiftConfig::from_kv(&mut kv, base)?;
    let raster = RasterConfig::from_kv(&mut kv, RasterConfig::default())?;
    kv.finish()?;
    let data = generate_dataset(&scene, &raster, split, a.seed, a.count)?;
    ensure_parent(&a.out)?;
    write_dataset(&data, &a.out)?;
    log::info!("wrote {} {} scenes to {}", data.len(), split.name(), a.out.display());

    if let Some(c) = &a.config {
        rec.input(c);
    }
    rec.config(GenerateConfig {
        split: split.name(),
        count: a.count,
        scene,
        raster,
    })
    .seed(a.seed)
    .output(&a.out);
    rec.finish(&beside(&a.out))
}

#[derive(Serialize)]
struct TrainRun<'a> {
    model: &'a ModelConfig,
    train: &'a TrainConfig,
}

pub fn train(a: &crate::TrainArgs, argv: &[String]) -> anyhow::Result<()> {
    let mut rec = Recorder::start("train", argv);
    let (model_base, train_base) = if a.full_scale {
        (
            ModelConfig {
                raster_size: RasterConfig::full_scale().size,
                ..ModelConfig::default()
            },
            TrainConfig {
                batch: TrainConfig::FULL_BATCH,
                ..TrainConfig::default()
            },
        )
    } else {
        (ModelConfig::micro(), TrainConfig::default())
    };
    let mut kv = load_kv(a.config.as_deref())?;
    let mcfg = ModelConfig::from_kv(&mut kv, model_base)?;
    let mut tcfg = TrainConfig::from_kv(&mut kv, train_base)?;
    kv.finish()?;
    tcfg.checkpoint = Some(a.out.clone());

    let data = load_data(&a.data)?;
    check_raster(&mcfg, &data)?;
    let held: Vec<SceneSample> = match &a.eval {
        Some(p) => load_data(p)?,
        None => Vec::new(),
    };
    check_raster(&mcfg, &held)?;
    ensure_parent(&a.out)?;

    log::info!("training {} for {} steps on {} scenes", mcfg.label(), tcfg.steps, data.len());
    let model = Model::<f32>::new(mcfg.clone(), tcfg.seed)?;
    let every = (tcfg.steps / 20).max(1);
    let out = run_training(model, &tcfg, &data, &held, |r| {
        if r.step % every == 0 || r.step == 1 {
            log::info!("step {} loss {:.4} nll {:.4} ade {:.4} fde {:.4}", r.step, r.loss, r.nll, r.ade_term, r.fde_term);
        }
    })?;
    let log_path = with_suffix(&a.out, ".log.csv");
    write_log_csv(&out.log, BufWriter::new(File::create(&log_path)?))?;
    if out.faults > 0 {
        log::warn!("{} steps skipped on non-finite gradients", out.faults);
    }
    rec.input(&a.data);
    if let Some(p) = &a.eval {
        rec.input(p);
        let path = with_suffix(&a.out, ".heldout.csv");
        write_held_out(&out.held_out, &path)?;
        rec.output(&path);
    }
    if let Some(c) = &a.config {
        rec.input(c);
    }
    rec.config(TrainRun { model: &mcfg, train: &tcfg }).seed(tcfg.seed).output(&a.out).output(&log_path);
    rec.finish(&beside(&a.out))
}

fn write_held_out(rows: &[HeldOut], path: &Path) -> anyhow::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "step,ade,fde,nll")?;
    for h in rows {
        writeln!(w, "{},{},{},{}", h.step, h.ade, h.fde, h.nll)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct PredictConfig {
    models: usize,
    samples_per_model: usize,
    rule: SelectionRule,
}

pub fn predict(a: &crate::PredictArgs, argv: &[String]) -> anyhow::Result<()> {
    let mut rec = Recorder::start("predict", argv);
    let rule: SelectionRule = a.rule.parse().map_err(|e: trajkit::Error| UsageError(e.to_string()))?;
    let models = a
        .models
        .iter()
        .map(|p| load_checkpoint::<f32>(p).with_context(|| format!("loading checkpoint {}", p.display())))
        .collect::<anyhow::Result<Vec<_>>>()?;
    check_compatible(&models)?;
    let data = load_data(&a.data)?;
    check_raster(&models[0].cfg, &data)?;

    let preds = data
        .par_iter()
        .map(|s| predict_scene(&models, s, a.samples, a.seed, rule))
        .collect::<trajkit::Result<Vec<ScenePrediction>>>()?;
    ensure_parent(&a.out)?;
    write_predictions(&preds, BufWriter::new(File::create(&a.out)?))?;
    log::info!("wrote {} scene predictions to {}", preds.len(), a.out.display());

    for p in &a.models {
        rec.input(p);
    }
    rec.input(&a.data)
        .config(PredictConfig {
            models: models.len(),
            samples_per_model: if models.len() == 1 { 0 } else { a.samples },
            rule,
        })
        .seed(a.seed)
        .output(&a.out);
    rec.finish(&beside(&a.out))
}

fn metrics(names: &[String]) -> anyhow::Result<Vec<Metric>> {
    if names.is_empty() {
        return Ok(Metric::ALL.to_vec());
    }
    names
        .iter()
        .map(|n| n.parse::<Metric>().map_err(|e| UsageError(e.to_string()).into()))
        .collect()
}

fn report(a: &crate::EvaluateArgs) -> anyhow::Result<(Vec<Metric>, Report)> {
    let ms = metrics(&a.metric)?;
    let file = File::open(&a.pred).with_context(|| format!("opening predictions {}", a.pred.display()))?;
    let preds = read_predictions(BufReader::new(file))?;
    let data = load_data(&a.data)?;
    Ok((ms.clone(), eval_report(&preds, &data, &ms)?))
}

pub fn evaluate(a: &crate::EvaluateArgs, argv: &[String]) -> anyhow::Result<()> {
    let mut rec = Recorder::start("evaluate", argv);
    let (ms, rep) = report(a)?;
    ensure_parent(&a.out)?;
    rep.write_csv(BufWriter::new(File::create(&a.out)?))?;
    for r in &rep.rows {
        log::info!("{:>9} {:>4}: mean {:.4} wmean {:.4} minmean {:.4} r_auc {:.4}", r.split, r.metric.name(), r.mean, r.wmean, r.minmean, r.r_auc);
    }
    let names: Vec<&str> = ms.iter().map(|m| m.name()).collect();
    rec.input(&a.pred).input(&a.data).config(names).output(&a.out);
    rec.finish(&beside(&a.out))
}

/// CSV `split,metric,retention,error` with `N + 1` points per curve.
pub fn retention(a: &crate::EvaluateArgs, argv: &[String]) -> anyhow::Result<()> {
    let mut rec = Recorder::start("retention", argv);
    let (ms, rep) = report(a)?;
    ensure_parent(&a.out)?;
    let mut w = BufWriter::new(File::create(&a.out)?);
    writeln!(w, "split,metric,retention,error")?;
    for (key, curve) in &rep.curves {
        let (split, metric) = key.split_once('/').unwrap_or((key.as_str(), ""));
        for (frac, err) in &curve.points {
            writeln!(w, "{split},{metric},{frac},{err}")?;
        }
        log::info!("{key}: r_auc {:.4}", curve.r_auc);
    }
    w.flush()?;
    let names: Vec<&str> = ms.iter().map(|m| m.name()).collect();
    rec.input(&a.pred).input(&a.data).config(names).output(&a.out);
    rec.finish(&beside(&a.out))
}

#[derive(Serialize)]
struct AblateConfig<'a> {
    holdout: usize,
    entries: Vec<TrainRun<'a>>,
    methods: Vec<&'a str>,
}

pub fn ablate(a: &crate::AblateArgs, argv: &[String]) -> anyhow::Result<()> {
    let mut rec = Recorder::start("ablate", argv);
    let mut kv = load_kv(a.config.as_deref())?;
    let model_base = ModelConfig::from_kv(&mut kv, ModelConfig::micro())?;
    let mut train_base = TrainConfig::from_kv(&mut kv, TrainConfig::default())?;
    kv.finish()?;
    if let Some(s) = a.seed {
        train_base.seed = s;
    }
    let text = std::fs::read_to_string(&a.grid).with_context(|| format!("reading grid {}", a.grid.display()))?;
    let grid = parse_grid(&text, &model_base, &train_base)?;
    let mut all = Vec::new();
    for path in &a.data {
        let part = load_data(path)?;
        if let (Some(x), Some(y)) = (all.first(), part.first()) {
            let (x, y): (&SceneSample, &SceneSample) = (x, y);
            if x.raster.shape() != y.raster.shape() {
                return Err(trajkit::Error::Format(format!(
                    "{}: raster shape {:?} differs from {:?}",
                    path.display(),
                    y.raster.shape(),
                    x.raster.shape()
                ))
                .into());
            }
        }
        all.extend(part);
    }
    let data = Partition::split(all, a.holdout)?;
    std::fs::create_dir_all(&a.out_dir)?;

    let mut save_err: Option<anyhow::Error> = None;
    let mut ckpts = Vec::new();
    let (rows, failures) = run_grid(&grid, &data, |i, e, res| match res {
        Ok((model, s)) => {
            log::info!(
                "[{}/{}] {}: ade {:.3} (in) {:.3} (shifted)",
                i + 1,
                grid.len(),
                e.method,
                s.in_domain.ade,
                s.shifted.ade
            );
            let ckpt = a.out_dir.join(format!("{i:02}-{}.ckpt", e.method.replace(['/', '+'], "_")));
            match save_checkpoint(model, &ckpt) {
                Ok(()) => ckpts.push(ckpt),
                Err(err) => {
                    save_err.get_or_insert(err.into());
                }
            }
        }
        Err(err) => log::error!("[{}/{}] {} failed: {err}", i + 1, grid.len(), e.method),
    });
    let csv = a.out_dir.join("ablation.csv");
    write_ablation_csv(&rows, BufWriter::new(File::create(&csv)?))?;
    if let Some(c) = &a.config {
        rec.input(c);
    }
    for c in &ckpts {
        rec.output(c);
    }
    for d in &a.data {
        rec.input(d);
    }
    rec.input(&a.grid)
        .config(AblateConfig {
            holdout: a.holdout,
            entries: grid.iter().map(|e| TrainRun { model: &e.model, train: &e.train }).collect(),
            methods: grid.iter().map(|e| e.method.as_str()).collect(),
        })
        .seed(train_base.seed)
        .output(&csv);
    rec.finish(&a.out_dir.join("manifest.json"))?;
    if let Some(e) = save_err {
        return Err(e);
    }
    match failures.into_iter().next() {
        Some((method, e)) => Err(anyhow::Error::new(e).context(format!("grid configuration `{method}` failed"))),
        None => Ok(()),
    }
}
