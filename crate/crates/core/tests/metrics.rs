mod common;
#[path = "oracles/metrics.rs"]
mod oracles;

use std::path::Path;

use common::random_vec;
use nes2net_core::metrics::*;
use proptest::prelude::*;

use oracles::*;

#[test]
fn eer_min_dcf_cllr_match_brute_force_on_1000_trials() {
    for (seed, quantum) in [(1, None), (2, None), (3, Some(0.25))] {
        let set = random_set(1000, seed, 0.8, quantum);
        let eer = compute_eer(&set).unwrap();
        let (be, bt) = brute_eer(&set);
        assert!((eer.eer - be).abs() < 1e-12, "{} vs {be}", eer.eer);
        assert!((eer.threshold - bt).abs() < 1e-12);
        let p = DcfParams::default();
        assert!((compute_min_dcf(&set, p).unwrap() - brute_min_dcf(&set, p)).abs() < 1e-12);
        assert!((compute_cllr(&set).unwrap() - direct_cllr(&set)).abs() < 1e-12);
    }
}

#[test]
fn min_dcf_on_500_trials_is_exact() {
    let set = random_set(500, 9, 0.5, None);
    for p in [DcfParams::default(), DcfParams { p_target: 0.5, c_miss: 1.0, c_fa: 1.0 }] {
        assert_eq!(compute_min_dcf(&set, p).unwrap(), brute_min_dcf(&set, p));
    }
}

#[test]
fn trivial_cases() {
    let perfect = make_set(&[0.9, 0.8], &[("A01".into(), 0.2), ("A01".into(), 0.1)]);
    assert_eq!(compute_eer(&perfect).unwrap().eer, 0.0);
    assert_eq!(compute_min_dcf(&perfect, DcfParams::default()).unwrap(), 0.0);
    let same = make_set(&[0.3; 4], &[("A01".into(), 0.3), ("A02".into(), 0.3)]);
    assert_eq!(compute_eer(&same).unwrap().eer, 0.5);
    assert!(compute_min_dcf(&same, DcfParams::default()).unwrap() <= 1.0);
    let zeros = make_set(&[0.0; 7], &vec![("A01".to_string(), 0.0); 3]);
    assert_eq!(compute_cllr(&zeros).unwrap(), 1.0);
    let sharp = make_set(&[800.0, 900.0], &[("A01".into(), -800.0)]);
    assert!(compute_cllr(&sharp).unwrap() < 1e-300);
    assert!(compute_eer(&make_set(&[1.0], &[])).is_err());
}

#[test]
fn per_attack_matches_subset_recomputation() {
    let set = random_set(600, 4, 0.7, None);
    let pa = per_attack_eer(&set).unwrap();
    assert_eq!(pa.per_attack.len(), 3);
    assert_eq!(pa.pooled, compute_eer(&set).unwrap());
    for (attack, e) in &pa.per_attack {
        let subset: Vec<Trial> = set
            .trials()
            .iter()
            .filter(|t| t.key == Key::Bonafide || &t.attack == attack)
            .cloned()
            .collect();
        assert_eq!(*e, compute_eer(&ScoreSet::new(subset).unwrap()).unwrap());
    }
    let single = make_set(&[0.1, 0.5, 0.9], &[("A07".into(), 0.4), ("A07".into(), 0.0)]);
    let pa = per_attack_eer(&single).unwrap();
    assert_eq!(pa.per_attack["A07"], pa.pooled);
}

#[test]
fn one_perfectly_detected_attack() {
    let set = make_set(
        &[1.0, 2.0, 3.0, 4.0],
        &[("A01".into(), -5.0), ("A01".into(), -6.0), ("A02".into(), 2.5), ("A02".into(), 3.5)],
    );
    let pa = per_attack_eer(&set).unwrap();
    assert_eq!(pa.per_attack["A01"].eer, 0.0);
    assert!(pa.pooled.eer > 0.0);
}

#[test]
fn score_file_round_trip_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.txt");
    let raw = random_set(50, 5, 1.0, None);
    // Canonicalise to the printed precision, then the file round-trips exactly.
    let printed: Vec<Trial> = raw
        .trials()
        .iter()
        .map(|t| Trial { score: format_score(t.score).parse().unwrap(), ..t.clone() })
        .collect();
    let set = ScoreSet::new(printed).unwrap();
    write_scores(&set, &path).unwrap();
    let back = read_scores(&path).unwrap();
    assert_eq!(back, set);
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(format_scores(&back), text);

    let crlf = text.replace('\n', "\r\n");
    assert_eq!(parse_scores(&crlf, Path::new("x")).unwrap(), set);

    let broken = "u1 - bonafide 0.5\nu2 A01 spoof\n";
    let err = parse_scores(broken, Path::new("bad.txt")).unwrap_err().to_string();
    assert!(err.contains(":2") || err.contains("line 2"), "{err}");
    assert!(parse_scores("u1 - bonafide 1\nu1 - bonafide 2\n", Path::new("d")).is_err());
    assert!(parse_scores("u1 - maybe 1\n", Path::new("d")).is_err());
    assert!(parse_scores("u1 - bonafide nan\n", Path::new("d")).is_err());
}

#[test]
fn nine_significant_digits() {
    assert_eq!(format_score(1.0 / 3.0), "0.333333333");
    assert_eq!(format_score(-123456.789012), "-123456.789");
    assert_eq!(format_score(2.5e-9), "2.5e-9");
    assert_eq!(format_score(9.9999999999), "10");
    assert_eq!(format_score(0.0), "0");
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, .. ProptestConfig::default() })]

    #[test]
    fn eer_is_invariant_under_monotone_maps(seed in any::<u64>(), a in 0.01f64..20.0, b in -10.0f64..10.0) {
        let set = random_set(200, seed, 0.6, None);
        let base = compute_eer(&set).unwrap().eer;
        let mapped = |f: &dyn Fn(f64) -> f64| {
            let t: Vec<Trial> = set.trials().iter().map(|t| Trial { score: f(t.score), ..t.clone() }).collect();
            compute_eer(&ScoreSet::new(t).unwrap()).unwrap().eer
        };
        prop_assert!((mapped(&|s| a * s + b) - base).abs() < 1e-12);
        prop_assert!((mapped(&f64::exp) - base).abs() < 1e-12);
        prop_assert!((mapped(&|s: f64| s.powi(3) + s) - base).abs() < 1e-12);
    }

    #[test]
    fn eer_bounds_and_cllr_sign(seed in any::<u64>(), n in 2usize..120) {
        let set = random_set(n.max(2), seed, 1.0, None);
        let e = compute_eer(&set).unwrap().eer;
        prop_assert!((0.0..=1.0).contains(&e));
        prop_assert!(compute_cllr(&set).unwrap() >= 0.0);
        let d = compute_min_dcf(&set, DcfParams::default()).unwrap();
        prop_assert!((0.0..=1.0).contains(&d));
    }

    #[test]
    fn correctly_polarised_scores_stay_below_half(seed in any::<u64>()) {
        // Bona fide strictly above spoof on average by construction.
        let bona: Vec<f64> = random_vec(40, seed, 0.0, 2.0);
        let spoof: Vec<(String, f64)> = random_vec(40, seed ^ 9, -2.0, 0.5).into_iter().map(|s| ("A01".to_string(), s)).collect();
        let e = compute_eer(&make_set(&bona, &spoof)).unwrap().eer;
        prop_assert!(e <= 0.5 + 1e-12);
    }
}
