//! Brute-force reference implementations of the scoring metrics.
#![allow(dead_code)]

use nes2net_core::metrics::*;
use nes2net_core::rng::rng_for;
use rand::Rng;
use rand_distr::StandardNormal;

pub fn make_set(bona: &[f64], spoof: &[(String, f64)]) -> ScoreSet {
    let mut t: Vec<Trial> = bona
        .iter()
        .enumerate()
        .map(|(i, &s)| Trial::new(format!("b{i:04}"), "-", Key::Bonafide, s))
        .collect();
    t.extend(
        spoof
            .iter()
            .enumerate()
            .map(|(i, (a, s))| Trial::new(format!("s{i:04}"), a.clone(), Key::Spoof, *s)),
    );
    ScoreSet::new(t).unwrap()
}

/// `n` trials, half bona fide around +shift, optionally quantised to force ties.
pub fn random_set(n: usize, seed: u64, shift: f64, quantum: Option<f64>) -> ScoreSet {
    let mut rng = rng_for(seed, "trials");
    let q = |v: f64| quantum.map_or(v, |s| (v / s).round() * s);
    let mut bona = Vec::new();
    let mut spoof = Vec::new();
    for i in 0..n {
        let z: f64 = rng.sample(StandardNormal);
        if i % 2 == 0 {
            bona.push(q(z + shift));
        } else {
            spoof.push((format!("A{:02}", 1 + (i / 2) % 3), q(z - shift)));
        }
    }
    make_set(&bona, &spoof)
}

pub fn split_keys(set: &ScoreSet) -> (Vec<f64>, Vec<f64>) {
    let b = set.trials().iter().filter(|t| t.key == Key::Bonafide).map(|t| t.score).collect();
    let s = set.trials().iter().filter(|t| t.key == Key::Spoof).map(|t| t.score).collect();
    (b, s)
}

/// Every candidate threshold: one below the smallest score, each midpoint
/// between consecutive distinct scores, one above the largest. A trial is
/// rejected when its score lies below the threshold. Rates are counted
/// directly for every threshold.
pub fn brute_points(set: &ScoreSet) -> Vec<(f64, f64, f64)> {
    let (bona, spoof) = split_keys(set);
    let mut all: Vec<f64> = bona.iter().chain(&spoof).copied().collect();
    all.sort_by(f64::total_cmp);
    all.dedup();
    let mut thresholds = vec![all[0] - 1.0];
    for w in all.windows(2) {
        thresholds.push((w[0] + w[1]) / 2.0);
    }
    thresholds.push(all[all.len() - 1] + 1.0);
    thresholds
        .into_iter()
        .map(|th| {
            let frr = bona.iter().filter(|&&s| s < th).count() as f64 / bona.len() as f64;
            let far = spoof.iter().filter(|&&s| s >= th).count() as f64 / spoof.len() as f64;
            (th, frr, far)
        })
        .collect()
}

pub fn brute_eer(set: &ScoreSet) -> (f64, f64) {
    let pts = brute_points(set);
    let k = pts.iter().position(|p| p.1 >= p.2).unwrap();
    let (t1, frr1, far1) = pts[k];
    if k == 0 || frr1 == far1 {
        return (frr1, t1);
    }
    let (t0, frr0, far0) = pts[k - 1];
    let a = (far0 - frr0) / ((far0 - frr0) + (frr1 - far1));
    (frr0 + a * (frr1 - frr0), t0 + a * (t1 - t0))
}

pub fn brute_min_dcf(set: &ScoreSet, p: DcfParams) -> f64 {
    let norm = (p.p_target * p.c_miss).min((1.0 - p.p_target) * p.c_fa);
    brute_points(set)
        .iter()
        .map(|&(_, frr, far)| (p.p_target * p.c_miss * frr + (1.0 - p.p_target) * p.c_fa * far) / norm)
        .fold(f64::INFINITY, f64::min)
}

pub fn direct_cllr(set: &ScoreSet) -> f64 {
    let (bona, spoof) = split_keys(set);
    let cb: f64 = bona.iter().map(|s| (1.0 + (-s).exp()).log2()).sum::<f64>() / bona.len() as f64;
    let cs: f64 = spoof.iter().map(|s| (1.0 + s.exp()).log2()).sum::<f64>() / spoof.len() as f64;
    0.5 * (cb + cs)
}
