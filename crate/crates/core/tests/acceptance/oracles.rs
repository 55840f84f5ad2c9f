//! Naive re-implementations checked against the library, plus the
//! closed-form loss and retention cases.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use trajkit::eval::retention_curve;
use trajkit::metrics::{ade, fde, gaussian_nll};
use trajkit::model::{combined_loss, nll, HeadKind, LossWeights, LOG_2PI};
use trajkit::nn::{GruCell, ParamStore, PixelGroupAttention};
use trajkit::scene::HORIZON;
use trajkit::{Tape, Tensor};

use crate::{Ctx, Outcome};

const TOL: f64 = 1e-10;
const INSTANCES: usize = 100;

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

fn worst(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| rel(x, y)).fold(0.0, f64::max)
}

fn randn(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, r)
}

/// Direct six-loop cross-correlation with zero padding.
fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize, depthwise: bool) -> Vec<f64> {
    let [b, ci, h, wd] = x.shape().try_into().unwrap();
    let [co, wci, kh, kw] = w.shape().try_into().unwrap();
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let xi = |n: usize, c: usize, i: usize, j: usize| x.data()[((n * ci + c) * h + i) * wd + j];
    let wi = |o: usize, c: usize, i: usize, j: usize| w.data()[((o * wci + c) * kh + i) * kw + j];
    let mut out = Vec::new();
    for n in 0..b {
        for o in 0..co {
            for oi in 0..ho {
                for oj in 0..wo {
                    let mut s = 0.0;
                    let chans: Vec<usize> = if depthwise { vec![o] } else { (0..ci).collect() };
                    for (cw, &c) in chans.iter().enumerate() {
                        for a in 0..kh {
                            for bb in 0..kw {
                                let (i, j) = ((oi * stride + a) as isize - pad as isize, (oj * stride + bb) as isize - pad as isize);
                                if i >= 0 && j >= 0 && (i as usize) < h && (j as usize) < wd {
                                    s += xi(n, c, i as usize, j as usize) * wi(o, if depthwise { 0 } else { cw }, a, bb);
                                }
                            }
                        }
                    }
                    out.push(s);
                }
            }
        }
    }
    out
}

fn conv_case(r: &mut ChaCha8Rng, depthwise: bool) -> f64 {
    let (b, ci) = (r.gen_range(1..=2), r.gen_range(1..=4));
    let co = if depthwise { ci } else { r.gen_range(1..=4) };
    let k = r.gen_range(1..=3);
    let (h, w) = (r.gen_range(k..=7), r.gen_range(k..=7));
    let (stride, pad) = (r.gen_range(1..=2), r.gen_range(0..=k / 2 + 1));
    let x = randn(&[b, ci, h, w], r);
    let wt = randn(&[co, if depthwise { 1 } else { ci }, k, k], r);
    let mut tape = Tape::new();
    let (xv, wv) = (tape.constant(x.clone()), tape.constant(wt.clone()));
    let y = if depthwise {
        tape.depthwise_conv2d(xv, wv, stride, pad).unwrap()
    } else {
        tape.conv2d(xv, wv, stride, pad).unwrap()
    };
    worst(tape.value(y).data(), &naive_conv(&x, &wt, stride, pad, depthwise))
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// `x (n×a) · W (a×b) + bias`, row-major.
fn affine(x: &[f64], n: usize, a: usize, w: &[f64], b: usize, bias: Option<&[f64]>) -> Vec<f64> {
    let mut out = vec![0.0; n * b];
    for i in 0..n {
        for j in 0..b {
            let mut s = bias.map_or(0.0, |v| v[j]);
            for k in 0..a {
                s += x[i * a + k] * w[k * b + j];
            }
            out[i * b + j] = s;
        }
    }
    out
}

fn gru_case(r: &mut ChaCha8Rng) -> f64 {
    let (n, input, hidden) = (r.gen_range(1..=3), r.gen_range(1..=3), r.gen_range(1..=5));
    let mut store = ParamStore::<f64>::new();
    let cell = GruCell::new(&mut store, "g", input, hidden, r);
    for p in store.iter_mut() {
        p.value = randn(p.value.shape(), r);
    }
    let y = randn(&[n, input], r);
    let z = randn(&[n, hidden], r);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false);
    let (yv, zv) = (tape.constant(y.clone()), tape.constant(z.clone()));
    let out = cell.forward(&mut tape, &p, yv, zv).unwrap();

    let get = |name: &str| store.iter().find(|p| p.name == format!("g.{name}")).unwrap().value.data().to_vec();
    let e = affine(y.data(), n, input, &get("embed.weight"), hidden, Some(&get("embed.bias")));
    let zd = z.data();
    let gate = |g: &str, h: &[f64]| {
        let a = affine(&e, n, hidden, &get(&format!("w_{g}")), hidden, Some(&get(&format!("b_{g}"))));
        let b = affine(h, n, hidden, &get(&format!("u_{g}")), hidden, None);
        a.iter().zip(&b).map(|(x, y)| x + y).collect::<Vec<_>>()
    };
    let rg: Vec<f64> = gate("reset", zd).into_iter().map(sigmoid).collect();
    let ug: Vec<f64> = gate("update", zd).into_iter().map(sigmoid).collect();
    let rz: Vec<f64> = rg.iter().zip(zd).map(|(a, b)| a * b).collect();
    let c: Vec<f64> = gate("cand", &rz).into_iter().map(f64::tanh).collect();
    let expect: Vec<f64> = (0..n * hidden).map(|i| (1.0 - ug[i]) * zd[i] + ug[i] * c[i]).collect();
    worst(tape.value(out).data(), &expect)
}

/// Per-group, per-head scaled dot-product attention by explicit loops.
fn attention_case(r: &mut ChaCha8Rng) -> f64 {
    let heads = r.gen_range(1..=3);
    let c = heads * r.gen_range(1..=3);
    let win = r.gen_range(1..=3);
    let (b, nh, nw) = (r.gen_range(1..=2), r.gen_range(1..=2), r.gen_range(1..=2));
    let (h, w) = (nh * win, nw * win);
    let mut store = ParamStore::<f64>::new();
    let att = PixelGroupAttention::new(&mut store, "a", c, heads, win, r).unwrap();
    for p in store.iter_mut() {
        p.value = randn(p.value.shape(), r);
    }
    let x = randn(&[b, c, h, w], r);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let out = att.forward(&mut tape, &p, xv).unwrap();

    let get = |name: &str| store.iter().find(|p| p.name == format!("a.{name}")).unwrap().value.data().to_vec();
    let lin = |v: &[f64], which: &str| affine(v, 1, c, &get(&format!("{which}.weight")), c, Some(&get(&format!("{which}.bias"))));
    let d = c / heads;
    let at = |n: usize, ch: usize, i: usize, j: usize| ((n * c + ch) * h + i) * w + j;
    let mut expect = x.data().to_vec();
    for n in 0..b {
        for gi in 0..nh {
            for gj in 0..nw {
                let pix: Vec<(usize, usize)> = (0..win * win).map(|t| (gi * win + t / win, gj * win + t % win)).collect();
                let feats: Vec<Vec<f64>> = pix.iter().map(|&(i, j)| (0..c).map(|ch| x.data()[at(n, ch, i, j)]).collect()).collect();
                let q: Vec<Vec<f64>> = feats.iter().map(|f| lin(f, "q")).collect();
                let k: Vec<Vec<f64>> = feats.iter().map(|f| lin(f, "k")).collect();
                let v: Vec<Vec<f64>> = feats.iter().map(|f| lin(f, "v")).collect();
                let mut ctx = vec![vec![0.0; c]; pix.len()];
                for hd in 0..heads {
                    let sl = hd * d..(hd + 1) * d;
                    for a in 0..pix.len() {
                        let s: Vec<f64> = (0..pix.len())
                            .map(|bb| sl.clone().map(|e| q[a][e] * k[bb][e]).sum::<f64>() / (d as f64).sqrt())
                            .collect();
                        let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let z: f64 = s.iter().map(|v| (v - m).exp()).sum();
                        for (bb, sv) in s.iter().enumerate() {
                            let wgt = (sv - m).exp() / z;
                            for e in sl.clone() {
                                ctx[a][e] += wgt * v[bb][e];
                            }
                        }
                    }
                }
                for (a, &(i, j)) in pix.iter().enumerate() {
                    let o = lin(&ctx[a], "o");
                    for ch in 0..c {
                        expect[at(n, ch, i, j)] += o[ch];
                    }
                }
            }
        }
    }
    worst(tape.value(out).data(), &expect)
}

fn random_path(r: &mut ChaCha8Rng, t: usize) -> Vec<[f64; 2]> {
    (0..t).map(|_| [r.gen_range(-30.0..30.0), r.gen_range(-30.0..30.0)]).collect()
}

/// ADE, FDE, and both NLL parameterizations through an explicit 2×2
/// covariance; the tape NLL is checked on log-scale inputs.
fn metric_case(r: &mut ChaCha8Rng) -> f64 {
    let t = r.gen_range(1..=HORIZON);
    let (p, g) = (random_path(r, t), random_path(r, t));
    let d: Vec<f64> = p.iter().zip(&g).map(|(a, b)| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()).collect();
    let mut errs = vec![
        rel(ade(&p, &g).unwrap(), d.iter().sum::<f64>() / t as f64),
        rel(fde(&p, &g).unwrap(), d[t - 1]),
    ];
    for head in [HeadKind::Bc, HeadKind::Dim] {
        // log-scale parameters as the head emits them
        let raw: Vec<Vec<f64>> = (0..t)
            .map(|_| match head {
                HeadKind::Bc => vec![r.gen_range(-1.0..2.5), r.gen_range(-1.0..2.5)],
                HeadKind::Dim => vec![r.gen_range(-1.0..2.5), r.gen_range(-2.0..2.0), r.gen_range(-1.0..2.5)],
            })
            .collect();
        let scales: Vec<Vec<f64>> = raw
            .iter()
            .map(|s| match head {
                HeadKind::Bc => vec![s[0].exp(), s[1].exp()],
                HeadKind::Dim => vec![s[0].exp(), s[1], s[2].exp()],
            })
            .collect();
        let mut oracle = 0.0;
        for ((m, y), s) in p.iter().zip(&g).zip(&scales) {
            let (l11, l21, l22) = match head {
                HeadKind::Bc => (s[0], 0.0, s[1]),
                HeadKind::Dim => (s[0], s[1], s[2]),
            };
            // Σ = L Lᵀ
            let (a, bc, dd) = (l11 * l11, l11 * l21, l21 * l21 + l22 * l22);
            let det = a * dd - bc * bc;
            let (r1, r2) = (y[0] - m[0], y[1] - m[1]);
            let quad = (dd * r1 * r1 - 2.0 * bc * r1 * r2 + a * r2 * r2) / det;
            oracle += LOG_2PI + 0.5 * det.ln() + 0.5 * quad;
        }
        errs.push(rel(gaussian_nll(&p, &scales, &g).unwrap(), oracle));

        let mut tape = Tape::<f64>::new();
        let mu = tape.constant(Tensor::new(&[1, t, 2], p.iter().flatten().copied().collect()).unwrap());
        let y = tape.constant(Tensor::new(&[1, t, 2], g.iter().flatten().copied().collect()).unwrap());
        let sc = tape.constant(Tensor::new(&[1, t, head.scale_width()], raw.iter().flatten().copied().collect()).unwrap());
        let v = nll(&mut tape, head, mu, sc, y).unwrap();
        errs.push(rel(tape.value(v).data()[0], oracle));
    }
    errs.into_iter().fold(0.0, f64::max)
}

/// `r_auc = (1/N²) Σ_i e_i (N − rank_i)` with stable ranks by uncertainty.
fn naive_r_auc(e: &[f64], u: &[f64]) -> f64 {
    let n = e.len();
    let mut s = 0.0;
    for i in 0..n {
        let rank = (0..n).filter(|&j| u[j] < u[i] || (u[j] == u[i] && j < i)).count();
        s += e[i] * (n - rank) as f64;
    }
    s / (n * n) as f64
}

fn retention_case(r: &mut ChaCha8Rng) -> f64 {
    let n = r.gen_range(1..=40);
    let e: Vec<f64> = (0..n).map(|_| r.gen_range(0.0..10.0)).collect();
    // coarse uncertainties so ties occur
    let u: Vec<f64> = (0..n).map(|_| r.gen_range(0..8) as f64 * 0.5).collect();
    let c = retention_curve(&e, &u).unwrap();
    let mut err = rel(c.r_auc, naive_r_auc(&e, &u));
    for (k, &(x, f)) in c.points.iter().enumerate() {
        let kept: f64 = (0..n)
            .filter(|&i| (0..n).filter(|&j| u[j] < u[i] || (u[j] == u[i] && j < i)).count() < k)
            .map(|i| e[i])
            .sum();
        err = err.max(rel(f, kept / n as f64)).max(rel(x, k as f64 / n as f64));
    }
    err
}

type Case = fn(&mut ChaCha8Rng) -> f64;

pub fn run(_: &mut Ctx) -> Outcome {
    let t0 = Instant::now();
    let cases: [(&str, Case); 6] = [
        ("conv2d", |r| conv_case(r, false)),
        ("depthwise conv2d", |r| conv_case(r, true)),
        ("gru cell", gru_case),
        ("windowed attention", attention_case),
        ("ade/fde/nll", metric_case),
        ("retention curve", retention_case),
    ];
    let mut details = Vec::new();
    let mut pass = true;
    let mut overall: f64 = 0.0;
    for (i, (name, f)) in cases.iter().enumerate() {
        let mut r = ChaCha8Rng::seed_from_u64(31 + i as u64);
        let e = (0..INSTANCES).map(|_| f(&mut r)).fold(0.0, f64::max);
        pass &= e <= TOL;
        overall = overall.max(e);
        details.push(format!("{name:<19} max rel diff {e:.2e} over {INSTANCES} instances"));
    }
    let secs = t0.elapsed().as_secs_f64();
    Outcome::new(
        pass && secs < 60.0,
        format!("{} oracles, max rel diff {overall:.2e} <= {TOL:.0e}, {secs:.1} s < 60 s", cases.len()),
    )
    .detail(details)
}

pub fn closed_forms(_: &mut Ctx) -> Outcome {
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let y = Tensor::<f64>::randn(&[1, HORIZON, 2], 5.0, &mut r);
    let expect_nll = HORIZON as f64 * LOG_2PI;
    let mut nll_err: f64 = 0.0;
    for head in [HeadKind::Bc, HeadKind::Dim] {
        let mut tape = Tape::new();
        let mu = tape.constant(y.clone());
        let yv = tape.constant(y.clone());
        let sc = tape.constant(Tensor::zeros(&[1, HORIZON, head.scale_width()]));
        let v = nll(&mut tape, head, mu, sc, yv).unwrap();
        nll_err = nll_err.max((tape.value(v).data()[0] - expect_nll).abs());
    }

    let mut shifted = y.clone();
    for p in shifted.data_mut().chunks_mut(2) {
        p[0] += 1.0;
    }
    let mut tape = Tape::new();
    let mu = tape.constant(shifted.clone());
    let realized = tape.constant(shifted);
    let yv = tape.constant(y);
    let sc = tape.constant(Tensor::zeros(&[1, HORIZON, 2]));
    let w = LossWeights { nll: 0.0, ade: 1.0, fde: 1.0 };
    let terms = combined_loss(&mut tape, HeadKind::Bc, mu, sc, realized, yv, &w).unwrap();
    let offset = tape.value(terms.total).data()[0];

    // Integer-valued targets keep the offset arithmetic exact.
    let yi = Tensor::<f64>::new(&[1, HORIZON, 2], (0..2 * HORIZON).map(|i| (i as f64) - 7.0).collect()).unwrap();
    let mut si = yi.clone();
    for p in si.data_mut().chunks_mut(2) {
        p[0] += 1.0;
    }
    let mut tape = Tape::new();
    let mu = tape.constant(si.clone());
    let realized = tape.constant(si);
    let yv = tape.constant(yi);
    let sc = tape.constant(Tensor::zeros(&[1, HORIZON, 2]));
    let terms = combined_loss(&mut tape, HeadKind::Bc, mu, sc, realized, yv, &w).unwrap();
    let exact = tape.value(terms.total).data()[0];

    Outcome::new(
        nll_err <= 1e-6 && exact == 26.0 && (offset - 26.0).abs() <= 1e-9,
        format!("perfect NLL |diff| {nll_err:.1e} <= 1e-6 (BC and DIM), offset loss {exact} == 26"),
    )
    .detail(vec![format!("offset loss on random real-valued targets: {offset:.15}")])
}

fn r_auc(e: &[f64], u: &[f64]) -> f64 {
    retention_curve(e, u).unwrap().r_auc
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

pub fn retention(_: &mut Ctx) -> Outcome {
    let e = [1.0, 2.0, 3.0];
    let best = r_auc(&e, &[0.0, 1.0, 2.0]);
    let worst = r_auc(&e, &[2.0, 1.0, 0.0]);
    let hand = best == 10.0 / 9.0 && worst == 14.0 / 9.0 && best < worst;

    let mut r = ChaCha8Rng::seed_from_u64(11);
    let mut oracle_ok = true;
    let mut checked = 0usize;
    for n in 1..=8 {
        let perms = permutations(n);
        for _ in 0..3 {
            let e: Vec<f64> = (0..n).map(|_| r.gen_range(0.0..5.0)).collect();
            let oracle = r_auc(&e, &e);
            for p in &perms {
                let u: Vec<f64> = p.iter().map(|&i| i as f64).collect();
                oracle_ok &= oracle <= r_auc(&e, &u);
                checked += 1;
            }
        }
    }

    let mut invariant = true;
    for _ in 0..200 {
        let n = r.gen_range(1..=30);
        let e: Vec<f64> = (0..n).map(|_| r.gen_range(0.0..5.0)).collect();
        let mut u: Vec<f64> = (0..n).map(|_| r.gen_range(-3.0..3.0)).collect();
        if n > 2 {
            u[1] = u[0];
        }
        let base = r_auc(&e, &u);
        for f in [|v: f64| v.exp(), |v: f64| 3.0 * v - 10.0, |v: f64| v.powi(3), |v: f64| v.atan()] {
            let t: Vec<f64> = u.iter().map(|&v| f(v)).collect();
            invariant &= r_auc(&e, &t) == base;
        }
    }

    Outcome::new(
        hand && oracle_ok && invariant,
        format!("hand cases {best:.6} / {worst:.6} (10/9, 14/9), oracle <= {checked} permutations, monotone transforms invariant"),
    )
    .detail(vec![
        format!("hand cases exact: {hand}"),
        format!("oracle ordering best for N <= 8: {oracle_ok}"),
        format!("rank-transform invariance over 200 random cases: {invariant}"),
    ])
}
