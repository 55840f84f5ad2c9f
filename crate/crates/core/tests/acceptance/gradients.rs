//! Central finite differences against the tape for every block and the
//! end-to-end micro model.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use trajkit::autodiff::{grad_check, grad_check_at};
use trajkit::model::{BackbonePreset, Feed, HeadKind, Model, ModelConfig};
use trajkit::nn::{Bound, Conv, DwsBlock, GruCell, Linear, NfBlock, ParamKind, ParamStore, PixelGroupAttention, WsConv, NF_ALPHA};
use trajkit::scene::HORIZON;
use trajkit::{Result, Tape, Tensor, Var};

use crate::{Ctx, Outcome};

const H: f64 = 1e-5;
const BLOCK_TOL: f64 = 1e-4;
const MODEL_TOL: f64 = 1e-3;
const SEEDS: u64 = 20;

type Forward<'a> = dyn Fn(&mut Tape<f64>, &Bound, &[Var]) -> Result<Var> + 'a;

fn probe(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let r = Tensor::randn(tape.shape(out), 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
    let r = tape.constant(r);
    let m = tape.mul(out, r)?;
    tape.sum_all(m)
}

/// Non-zero biases and non-unit gains so every parameter is exercised.
fn perturb(store: &mut ParamStore<f64>, r: &mut ChaCha8Rng) {
    for p in store.iter_mut() {
        let n = p.value.numel();
        match p.kind {
            ParamKind::Bias => p.value = Tensor::randn(p.value.shape(), 0.3, r),
            ParamKind::Gain => p.value = Tensor::new(p.value.shape(), (0..n).map(|_| r.gen_range(0.5..1.5)).collect()).unwrap(),
            ParamKind::Weight => {}
        }
    }
}

/// Worst relative error over the input and every parameter tensor.
fn check_block(store: &ParamStore<f64>, inputs: &[Tensor<f64>], forward: &Forward) -> (f64, bool) {
    let mut worst: f64 = 0.0;
    let mut ok = true;
    for (i, x) in inputs.iter().enumerate() {
        let rep = grad_check(
            |tape, xv| {
                let p = store.bind(tape, false);
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| if j == i { xv } else { tape.constant(t.clone()) })
                    .collect();
                let y = forward(tape, &p, &vars)?;
                probe(tape, y, 7)
            },
            x,
            H,
            BLOCK_TOL,
        )
        .expect("grad check");
        worst = worst.max(rep.max_rel_error);
        ok &= rep.passed;
    }
    for param in store.iter() {
        let id = store.find(&param.name).unwrap();
        let rep = grad_check(
            |tape, pv| {
                let p = store.bind(tape, false).with(id, pv);
                let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
                let y = forward(tape, &p, &vars)?;
                probe(tape, y, 7)
            },
            &param.value,
            H,
            BLOCK_TOL,
        )
        .expect("grad check");
        worst = worst.max(rep.max_rel_error);
        ok &= rep.passed;
    }
    (worst, ok)
}

fn blocks(seed: u64) -> Vec<(&'static str, f64, bool)> {
    let mut r = ChaCha8Rng::seed_from_u64(1000 + seed);
    let mut out = Vec::new();
    let mut run = |name: &'static str, mut store: ParamStore<f64>, inputs: Vec<Tensor<f64>>, f: &Forward, r: &mut ChaCha8Rng| {
        perturb(&mut store, r);
        let (e, ok) = check_block(&store, &inputs, f);
        out.push((name, e, ok));
    };

    let (cin, cout) = (r.gen_range(1..=4), r.gen_range(1..=4));
    let stride = r.gen_range(1..=2);
    let hw = r.gen_range(3..=5);
    let x = Tensor::randn(&[1, cin, hw, hw], 1.0, &mut r);

    let mut s = ParamStore::new();
    let l = Linear::new(&mut s, "lin", cin, cout, &mut r);
    let xl = Tensor::randn(&[2, cin], 1.0, &mut r);
    run("linear", s, vec![xl], &|t, p, v| l.forward(t, p, v[0]), &mut r);

    let mut s = ParamStore::new();
    let k = [1, 3][r.gen_range(0..2)];
    let c = WsConv::new(&mut s, "ws", cin, cout, k, stride, &mut r);
    run("ws-conv", s, vec![x.clone()], &|t, p, v| c.forward(t, p, v[0]), &mut r);

    let mut s = ParamStore::new();
    let c = Conv::new(&mut s, "conv", cin, cout, 3, stride, &mut r);
    run("conv", s, vec![x.clone()], &|t, p, v| c.forward(t, p, v[0]), &mut r);

    let mut s = ParamStore::new();
    let c = Conv::depthwise(&mut s, "dw", cin, 3, stride, &mut r);
    run("depthwise-conv", s, vec![x.clone()], &|t, p, v| c.forward(t, p, v[0]), &mut r);

    let mut s = ParamStore::new();
    let b = NfBlock::new(&mut s, "nf", cin, cout, stride, NF_ALPHA, r.gen_range(0.5..1.5), &mut r).unwrap();
    run("nf-block", s, vec![x.clone()], &|t, p, v| b.forward(t, p, v[0]), &mut r);

    let mut s = ParamStore::new();
    let b = DwsBlock::new(&mut s, "dws", cin, cout, stride, &mut r).unwrap();
    run("dws-block", s, vec![x.clone()], &|t, p, v| b.forward(t, p, v[0]), &mut r);

    let (ch, heads, win) = [(4, 2, 2), (6, 3, 1), (4, 1, 2), (8, 4, 2)][seed as usize % 4];
    let mut s = ParamStore::new();
    let a = PixelGroupAttention::new(&mut s, "att", ch, heads, win, &mut r).unwrap();
    let xa = Tensor::randn(&[1, ch, 2 * win, 2 * win], 1.0, &mut r);
    run("attention", s, vec![xa], &|t, p, v| a.forward(t, p, v[0]), &mut r);

    let hidden = r.gen_range(2..=5);
    let mut s = ParamStore::new();
    let g = GruCell::new(&mut s, "gru", 2, hidden, &mut r);
    let y = Tensor::randn(&[2, 2], 1.0, &mut r);
    let z = Tensor::randn(&[2, hidden], 0.8, &mut r);
    run("gru-cell", s, vec![y, z], &|t, p, v| g.forward(t, p, v[0], v[1]), &mut r);
    out
}

fn model_config(seed: u64) -> (ModelConfig, Feed) {
    let head = [HeadKind::Bc, HeadKind::Dim][seed as usize % 2];
    let backbone = [BackbonePreset::Nf18, BackbonePreset::Nf50, BackbonePreset::DwsBaseline][seed as usize % 3];
    let feed = [Feed::FreeRunning, Feed::TeacherForced][(seed as usize / 2) % 2];
    let cfg = ModelConfig {
        backbone,
        head,
        attention: seed % 4 != 3,
        raster_size: 8,
        window: 1,
        ..ModelConfig::micro()
    };
    (cfg, feed)
}

/// Worst relative error over two entries of every parameter tensor of the
/// micro model, differentiated through encode, decode and the combined loss.
fn model(seed: u64) -> (f64, bool) {
    let (cfg, feed) = model_config(seed);
    let mut m = Model::<f64>::new(cfg.clone(), seed).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(2000 + seed);
    perturb(&mut m.params, &mut r);
    let x = Tensor::randn(&[2, cfg.channels, cfg.raster_size, cfg.raster_size], 1.0, &mut r);
    let y = Tensor::randn(&[2, HORIZON, 2], 2.0, &mut r);
    let (mut worst, mut ok) = (0.0f64, true);
    for param in m.params.iter() {
        let id = m.params.find(&param.name).unwrap();
        let n = param.value.numel();
        let idx: Vec<usize> = (0..2.min(n)).map(|_| r.gen_range(0..n)).collect();
        let rep = grad_check_at(
            |tape, pv| {
                let b = m.bind(tape, false).with(id, pv);
                let xv = tape.constant(x.clone());
                Ok(m.loss(tape, &b, xv, &y, feed)?.total)
            },
            &param.value,
            &idx,
            H,
            MODEL_TOL,
        )
        .expect("grad check");
        worst = worst.max(rep.max_rel_error);
        ok &= rep.passed;
    }
    (worst, ok)
}

pub fn run(_: &mut Ctx) -> Outcome {
    let t0 = Instant::now();
    let mut block_worst: Vec<(&'static str, f64, usize)> = Vec::new();
    let mut failures = Vec::new();
    for seed in 0..SEEDS {
        for (name, e, ok) in blocks(seed) {
            match block_worst.iter_mut().find(|b| b.0 == name) {
                Some(b) => {
                    b.1 = b.1.max(e);
                    b.2 += 1;
                }
                None => block_worst.push((name, e, 1)),
            }
            if !ok {
                failures.push(format!("{name} seed {seed}: {e:.2e}"));
            }
        }
    }
    let mut model_worst: f64 = 0.0;
    for seed in 0..SEEDS {
        let (e, ok) = model(seed);
        model_worst = model_worst.max(e);
        if !ok {
            let (cfg, feed) = model_config(seed);
            failures.push(format!("model seed {seed} ({}, {}): {e:.2e}", cfg.label(), feed.name()));
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    let mut details: Vec<String> = block_worst
        .iter()
        .map(|(n, e, c)| format!("{n:<15} max rel error {e:.2e} over {c} seeds"))
        .collect();
    details.push(format!("micro model     max rel error {model_worst:.2e} over {SEEDS} seeds (BC/DIM, nf18/nf50/dws, both feeds)"));
    details.extend(failures.iter().cloned());
    let blocks_max = block_worst.iter().map(|b| b.1).fold(0.0, f64::max);
    Outcome::new(
        failures.is_empty() && secs < 120.0,
        format!("blocks {blocks_max:.2e} < {BLOCK_TOL:.0e}, model {model_worst:.2e} < {MODEL_TOL:.0e}, {SEEDS} seeds, {secs:.1} s < 120 s"),
    )
    .detail(details)
}
