//! Aggregation, selection and uncertainty properties of the ensemble.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use trajkit::ensemble::{rip_predict, Candidate, EnsemblePrediction, SelectionRule};
use trajkit::model::{Model, ModelConfig};
use trajkit::Tensor;

use crate::{Ctx, Outcome};

fn candidates(g: usize) -> Vec<Candidate> {
    (0..g)
        .map(|i| Candidate {
            points: vec![[i as f64, 0.0]],
            scales: vec![vec![1.0, 1.0]],
            source_model: 0,
        })
        .collect()
}

fn random_scores(r: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let (g, k) = (r.gen_range(1..=12), r.gen_range(1..=6));
    // small integer grid so ties are common
    (0..g).map(|_| (0..k).map(|_| r.gen_range(-20..=5) as f64 * 0.25).collect()).collect()
}

fn predict(scores: Vec<Vec<f64>>, rule: SelectionRule) -> EnsemblePrediction {
    EnsemblePrediction::from_scores(candidates(scores.len()), scores, rule).unwrap()
}

fn synthetic(trials: usize) -> (bool, bool, bool) {
    let mut r = ChaCha8Rng::seed_from_u64(17);
    let (mut dominance, mut perm, mut monotone) = (true, true, true);
    for _ in 0..trials {
        let s = random_scores(&mut r);
        for rule in [SelectionRule::MaxWorstCase, SelectionRule::MinWorstCase] {
            let p = predict(s.clone(), rule);
            for (row, &a) in s.iter().zip(&p.aggregated) {
                dominance &= row.iter().all(|&v| a <= v) && row.contains(&a);
            }

            let k = s[0].len();
            let mut cols: Vec<usize> = (0..k).collect();
            cols.shuffle(&mut r);
            let permuted: Vec<Vec<f64>> = s.iter().map(|row| cols.iter().map(|&c| row[c]).collect()).collect();
            let q = predict(permuted, rule);
            perm &= q.aggregated == p.aggregated
                && q.chosen == p.chosen
                && q.confidences == p.confidences
                && q.scene_uncertainty == p.scene_uncertainty;

            for f in [|v: f64| v.exp(), |v: f64| 2.0 * v + 3.0, |v: f64| v.powi(3), |v: f64| (v / 10.0).tanh()] {
                let t: Vec<Vec<f64>> = s.iter().map(|row| row.iter().map(|&v| f(v)).collect()).collect();
                monotone &= predict(t, rule).chosen == p.chosen;
            }
        }
    }
    (dominance, perm, monotone)
}

/// Three untrained tiny models in every order: each candidate keeps its
/// worst-case score and the chosen plan is the same trajectory.
fn real_models() -> bool {
    let cfg = ModelConfig {
        raster_size: 16,
        base_width: 2,
        hidden: 8,
        window: 1,
        ..ModelConfig::micro()
    };
    let models: Vec<Model<f64>> = (0..3).map(|s| Model::new(cfg.clone(), 40 + s).unwrap()).collect();
    let x = Tensor::randn(&[1, cfg.channels, 16, 16], 1.0, &mut ChaCha8Rng::seed_from_u64(3));
    let base = rip_predict(&models, &x, 0, 9, SelectionRule::MaxWorstCase).unwrap();
    let key = |p: &EnsemblePrediction| {
        let mut v: Vec<(String, u64)> = p
            .candidates
            .iter()
            .zip(&p.aggregated)
            .map(|(c, a)| (format!("{:?}", c.points), a.to_bits()))
            .collect();
        v.sort();
        v
    };
    let mut ok = true;
    for order in [[0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]] {
        let ms: Vec<Model<f64>> = order.iter().map(|&i| models[i].clone()).collect();
        let p = rip_predict(&ms, &x, 0, 9, SelectionRule::MaxWorstCase).unwrap();
        ok &= key(&p) == key(&base)
            && p.candidates[p.chosen].points == base.candidates[base.chosen].points
            && p.scene_uncertainty == base.scene_uncertainty;
    }
    ok
}

pub fn run(_: &mut Ctx) -> Outcome {
    let hand = predict(vec![vec![-1.0, -2.0], vec![-3.0, -2.0]], SelectionRule::MaxWorstCase);
    let hand_ok = hand.aggregated == [-2.0, -3.0] && hand.chosen == 0 && hand.scene_uncertainty == 2.0;
    let trials = 2000;
    let (dominance, perm, monotone) = synthetic(trials);
    let real = real_models();
    Outcome::new(
        hand_ok && dominance && perm && monotone && real,
        format!(
            "2x2 case chosen {} uncertainty {}; dominance, model permutation and monotone invariance over {trials} score matrices",
            hand.chosen, hand.scene_uncertainty
        ),
    )
    .detail(vec![
        format!("2x2 hand case exact: {hand_ok}"),
        format!("worst-case dominance: {dominance}"),
        format!("model-permutation invariance: {perm}"),
        format!("monotone-transform argmax invariance: {monotone}"),
        format!("model-permutation invariance with three tiny models: {real}"),
    ])
}
