mod common;

use common::*;
use nes2net_core::nn::{
    AttStatsPool, BatchNorm1d, Init, LayerAggregator, Linear, Mode, ParamStore, SEBlock, Session, POOL_EPS,
};
use nes2net_core::{grad_check, Tape, Tensor, Var};
use proptest::prelude::*;

fn store_with<L>(seed: u64, build: impl FnOnce(&mut Init<'_, f64>) -> L) -> (ParamStore<f64>, L) {
    let mut store = ParamStore::new();
    let layer = build(&mut Init { store: &mut store, seed });
    (store, layer)
}

fn run(store: &ParamStore<f64>, x: &M, mode: Mode, f: impl FnOnce(&mut Session<'_, f64>, Var) -> Var) -> Tensor<f64> {
    let mut tape = Tape::new();
    let mut s = Session::new(&mut tape, store, mode);
    let xv = s.tape.constant(to_tensor(x));
    let y = f(&mut s, xv);
    s.tape.value(y).clone()
}

/// Random biases so that the oracles see non-zero offsets.
fn jitter_biases(store: &mut ParamStore<f64>, seed: u64) {
    let ids: Vec<_> = store
        .iter()
        .filter(|(_, p)| p.name.ends_with(".bias"))
        .map(|(id, p)| (id, p.value.numel()))
        .collect();
    for (k, (id, n)) in ids.into_iter().enumerate() {
        store.set(id, Tensor::from_f64([n], &random_vec(n, seed + k as u64, -0.5, 0.5)).unwrap()).unwrap();
    }
}

#[test]
fn linear_equals_matmul_oracle_exactly() {
    let (mut store, l) = store_with(1, |i| Linear::new(i, "fc", 6, 4).unwrap());
    jitter_biases(&mut store, 3);
    let x = random_m(6, 7, 2);
    let y = run(&store, &x, Mode::Eval, |s, v| l.forward(s, v).unwrap());
    assert_eq!(from_tensor(&y), linear(&store, "fc", &x));
}

#[test]
fn batchnorm_matches_oracle_in_both_modes() {
    let (mut store, bn) = store_with(0, |i| BatchNorm1d::new(i, "bn", 5).unwrap());
    for (id, lo, hi) in [(bn.gamma, 0.5, 1.5), (bn.beta, -1.0, 1.0), (bn.running_mean, -1.0, 1.0), (bn.running_var, 0.2, 2.0)] {
        store.set(id, Tensor::from_f64([5], &random_vec(5, id.index() as u64, lo, hi)).unwrap()).unwrap();
    }
    let x = random_m(5, 9, 4);
    for (mode, train) in [(Mode::Eval, false), (Mode::Train, true)] {
        let y = run(&store, &x, mode, |s, v| bn.forward(s, v).unwrap());
        assert!(max_diff(&from_tensor(&y), &common::bn(&store, "bn", &x, train)) < 1e-12);
    }
}

#[test]
fn se_matches_straight_line_oracle() {
    let (mut store, se) = store_with(5, |i| SEBlock::new(i, "se", 8, 2).unwrap());
    jitter_biases(&mut store, 8);
    let x = random_m(8, 11, 6);
    let y = run(&store, &x, Mode::Eval, |s, v| se.forward(s, v).unwrap());
    assert!(max_diff(&from_tensor(&y), &common::se(&store, "se", &x)) < 1e-12);
}

#[test]
fn se_squeeze_of_constant_rows_is_the_constant() {
    let (store, se) = store_with(5, |i| SEBlock::new(i, "se", 4, 2).unwrap());
    let x: M = [0.5, -1.25, 2.0, 3.0].iter().map(|&c| vec![c; 7]).collect();
    let mut tape = Tape::new();
    let mut s = Session::new(&mut tape, &store, Mode::Eval);
    let xv = s.tape.constant(to_tensor(&x));
    let squeeze = s.tape.reduce(nes2net_core::tape::ReduceOp::Mean, xv, 1).unwrap();
    assert_eq!(s.tape.value(squeeze).data(), &[0.5, -1.25, 2.0, 3.0]);
    let _ = se.forward(&mut s, xv).unwrap();
}

#[test]
fn pool_matches_explicit_loop() {
    for (c, b, t) in [(6, 3, 13), (16, 8, 1), (4, 16, 40)] {
        let (mut store, p) = store_with(c as u64, |i| AttStatsPool::new(i, "pool", c, b).unwrap());
        jitter_biases(&mut store, 9);
        let x = random_m(c, t, 10 + t as u64);
        let y = run(&store, &x, Mode::Eval, |s, v| p.forward(s, v).unwrap());
        assert_eq!(y.shape(), &[2 * c]);
        let expect = common::pool(&store, "pool", &x);
        let d = y.data().iter().zip(&expect).map(|(a, e)| (a - e).abs()).fold(0.0, f64::max);
        assert!(d < 1e-10, "{c}x{t}: {d}");
    }
}

#[test]
fn pool_rejects_empty_time_axis() {
    let (store, p) = store_with(0, |i| AttStatsPool::new(i, "pool", 2, 2).unwrap());
    let mut tape = Tape::new();
    let mut s = Session::new(&mut tape, &store, Mode::Eval);
    let x = s.tape.constant(Tensor::zeros([2, 0]));
    assert!(p.forward(&mut s, x).is_err());
}

#[test]
fn aggregator_matches_direct_recomputation() {
    let (mut store, agg) = store_with(0, |i| LayerAggregator::new(i, "ws", 3).unwrap());
    let logits = [0.3, -1.2, 2.0];
    store.set(agg.logits, Tensor::from_f64([3], &logits).unwrap()).unwrap();
    let data = random_vec(3 * 4 * 5, 12, -2.0, 2.0);
    let mut tape = Tape::new();
    let mut s = Session::new(&mut tape, &store, Mode::Eval);
    let stack = s.tape.constant(Tensor::from_f64([3, 4, 5], &data).unwrap());
    let y = agg.forward(&mut s, stack).unwrap();
    let mx = 2.0f64;
    let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
    let w: Vec<f64> = logits.iter().map(|l| (l - mx).exp() / z).collect();
    for i in 0..20 {
        let expect = w[0] * data[i] + w[1] * data[20 + i] + w[2] * data[40 + i];
        assert_eq!(s.tape.value(y).data()[i], expect);
    }
}

fn layer_inputs(store: &ParamStore<f64>) -> Vec<Tensor<f64>> {
    store.trainable().map(|(_, p)| p.value.clone()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 40, .. ProptestConfig::default() })]

    #[test]
    fn se_scales_each_channel_by_one_gate(seed in any::<u64>(), c in 1usize..5, t in 1usize..9) {
        let channels = 2 * c;
        let (store, se) = store_with(seed, |i| SEBlock::new(i, "se", channels, 2).unwrap());
        let x = random_m(channels, t, seed);
        let y = from_tensor(&run(&store, &x, Mode::Eval, |s, v| se.forward(s, v).unwrap()));
        for (xr, yr) in x.iter().zip(&y) {
            let gates: Vec<f64> = xr.iter().zip(yr).filter(|(a, _)| **a != 0.0).map(|(a, b)| b / a).collect();
            for g in &gates {
                prop_assert!(*g > 0.0 && *g < 1.0);
                prop_assert!((g - gates[0]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pool_std_never_drops_below_floor(seed in any::<u64>(), t in 1usize..12, constant in any::<bool>()) {
        let (store, p) = store_with(seed, |i| AttStatsPool::new(i, "pool", 3, 4).unwrap());
        let x: M = if constant { (0..3).map(|c| vec![c as f64 - 1.0; t]).collect() } else { random_m(3, t, seed) };
        let y = run(&store, &x, Mode::Eval, |s, v| p.forward(s, v).unwrap());
        for sd in &y.data()[3..] {
            prop_assert!(*sd >= POOL_EPS.sqrt() - 1e-12);
        }
    }

    #[test]
    fn aggregate_stays_in_convex_hull(seed in any::<u64>(), l in 1usize..5) {
        let (mut store, agg) = store_with(seed, |i| LayerAggregator::new(i, "ws", l).unwrap());
        store.set(agg.logits, Tensor::from_f64([l], &random_vec(l, seed ^ 7, -3.0, 3.0)).unwrap()).unwrap();
        let data = random_vec(l * 6, seed, -5.0, 5.0);
        let mut tape = Tape::new();
        let mut s = Session::new(&mut tape, &store, Mode::Eval);
        let stack = s.tape.constant(Tensor::from_f64([l, 2, 3], &data).unwrap());
        let w = agg.weights(&mut s).unwrap();
        let ws = s.tape.value(w).data().to_vec();
        prop_assert!((ws.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(ws.iter().all(|&v| v > 0.0 && v < 1.0 || l == 1));
        let y = agg.forward(&mut s, stack).unwrap();
        for i in 0..6 {
            let col: Vec<f64> = (0..l).map(|k| data[k * 6 + i]).collect();
            let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let v = s.tape.value(y).data()[i];
            prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }
    }

    #[test]
    fn layer_backwards_pass_finite_differences(seed in any::<u64>()) {
        let mut store = ParamStore::<f64>::new();
        let mut init = Init { store: &mut store, seed };
        let bn = BatchNorm1d::new(&mut init, "bn", 4).unwrap();
        let se = SEBlock::new(&mut init, "se", 4, 2).unwrap();
        let pool = AttStatsPool::new(&mut init, "pool", 4, 3).unwrap();
        let agg = LayerAggregator::new(&mut init, "ws", 2).unwrap();
        let fc = Linear::new(&mut init, "fc", 8, 2).unwrap();
        let mut inputs = layer_inputs(&store);
        let n = inputs.len();
        inputs.push(Tensor::from_f64([2, 4, 6], &random_vec(48, seed, -1.0, 1.0)).unwrap());
        let f = |tape: &mut Tape<f64>, v: &[Var]| {
            let mut s = Session::with_trainable(tape, &store, &v[..n], Mode::Train)?;
            let h = agg.forward(&mut s, v[n])?;
            let h = bn.forward(&mut s, h)?;
            let h = se.forward(&mut s, h)?;
            let e = pool.forward(&mut s, h)?;
            let y = fc.forward_vec(&mut s, e)?;
            let y = s.tape.mul(y, y)?;
            s.tape.sum_all(y)
        };
        let r = grad_check(f, &inputs, 1e-5).unwrap();
        prop_assert!(r.max_rel_error < 1e-5, "{}", r.max_rel_error);
    }
}
