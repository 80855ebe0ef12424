use igroupss::igsm::{
    flatten_for_scan, group_channels, interval_concat, interval_split, random_feature, unflatten,
    Direction, Domain, Grouping, Igsm, ScanOrder,
};
use igroupss::network::{count_flops, ModelConfig};
use igroupss::{ParamStore, Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn grid(p: usize, k: usize, seed: u64) -> Tensor<f64> {
    random_feature(&[p, p, k], &mut ChaCha8Rng::seed_from_u64(seed))
}

fn direction() -> impl Strategy<Value = Direction> {
    prop::sample::select(Direction::ALL.to_vec())
}

fn domain() -> impl Strategy<Value = Domain> {
    prop::sample::select(vec![Domain::Spatial, Domain::Spectral])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn split_concat_round_trip(p in 1usize..10, q in 1usize..9, seed in any::<u64>()) {
        let f = grid(p, 4 * q, seed);
        for mode in [Grouping::Interval, Grouping::Adjacent, Grouping::All] {
            let split = interval_split(&f, mode).unwrap();
            prop_assert_eq!(interval_concat(&split, None).unwrap(), f.clone());
        }
    }

    #[test]
    fn unflatten_inverts_flatten(p in 1usize..10, c in 1usize..8, dir in direction(), dom in domain(), seed in any::<u64>()) {
        let g = grid(p, c, seed);
        let order = ScanOrder::new(dir, dom);
        let seq = flatten_for_scan(&g, order).unwrap();
        prop_assert_eq!(seq.shape(), &[order.seq_shape(p, c).0, order.seq_shape(p, c).1][..]);
        prop_assert_eq!(unflatten(&seq, order, p, c).unwrap(), g);
    }

    #[test]
    fn reverse_orders_are_exact_reversals(rows in 1usize..12, cols in 1usize..12) {
        let mut lr = ScanOrder::positions(rows, cols, Direction::LeftRight);
        let mut tb = ScanOrder::positions(rows, cols, Direction::TopBottom);
        lr.reverse();
        tb.reverse();
        prop_assert_eq!(ScanOrder::positions(rows, cols, Direction::RightLeft), lr);
        prop_assert_eq!(ScanOrder::positions(rows, cols, Direction::BottomTop), tb);
    }

    #[test]
    fn every_channel_in_exactly_one_group(q in 1usize..32) {
        let k = 4 * q;
        for mode in [Grouping::Interval, Grouping::Adjacent] {
            let mut seen: Vec<usize> = group_channels(k, mode).unwrap().concat();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..k).collect::<Vec<_>>());
        }
        let interval = group_channels(k, Grouping::Interval).unwrap();
        for (g, chs) in interval.iter().enumerate() {
            prop_assert!(chs.iter().all(|&c| c % 4 == g));
        }
    }
}

#[test]
fn channel_count_must_divide_by_four() {
    for k in [1, 2, 3, 5, 6, 10] {
        assert!(matches!(
            group_channels(k, Grouping::Interval),
            Err(igroupss::Error::Config(_))
        ));
    }
}

fn module(
    domain: Domain,
    mode: Grouping,
    p: usize,
    k: usize,
    seed: u64,
) -> (ParamStore<f64>, Igsm) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = Igsm::new(&mut store, &mut rng, "m", domain, mode, p, k, 4).unwrap();
    (store, m)
}

fn run(m: &Igsm, store: &ParamStore<f64>, f: &Tensor<f64>) -> Tensor<f64> {
    let mut t = Tape::inference();
    let v = t.constant(f.clone());
    let y = m.forward(&mut t, store, v).unwrap();
    t.value(y).clone()
}

fn set(store: &mut ParamStore<f64>, name: &str, v: f64) {
    let p = store.by_name_mut(name).unwrap();
    p.value = p.value.map(|_| v);
}

#[test]
fn shape_is_preserved() {
    for domain in [Domain::Spatial, Domain::Spectral] {
        for (p, k) in [(1, 4), (3, 8), (5, 12), (6, 16)] {
            let (store, m) = module(domain, Grouping::Interval, p, k, 1);
            let f = random_feature(&[2, p, p, k], &mut ChaCha8Rng::seed_from_u64(2));
            assert_eq!(run(&m, &store, &f).shape(), &[2, p, p, k]);
        }
    }
}

#[test]
fn identity_scans_with_unit_attention_return_input() {
    for domain in [Domain::Spatial, Domain::Spectral] {
        for mode in [Grouping::Interval, Grouping::Adjacent, Grouping::All] {
            let (mut store, m) = module(domain, mode, 4, 8, 3);
            for g in 0..4 {
                set(&mut store, &format!("m.g{g}.C_proj.w"), 0.0);
                set(&mut store, &format!("m.g{g}.D"), 1.0);
            }
            set(&mut store, "m.atten.fc2.w", 0.0);
            set(&mut store, "m.atten.fc2.b", 50.0);
            let f = random_feature(&[2, 4, 4, 8], &mut ChaCha8Rng::seed_from_u64(4));
            let y = run(&m, &store, &f);
            assert!(y.max_abs_diff(&f) <= 1e-12, "{domain:?} {mode}");
        }
    }
}

#[test]
fn zero_attention_logits_halve_the_concatenation() {
    let (mut store, m) = module(Domain::Spatial, Grouping::Interval, 3, 8, 5);
    set(&mut store, "m.atten.fc2.w", 0.0);
    set(&mut store, "m.atten.fc2.b", 0.0);
    let f = random_feature(&[1, 3, 3, 8], &mut ChaCha8Rng::seed_from_u64(6));
    let y = run(&m, &store, &f);

    let mut t = Tape::inference();
    let v = t.constant(f.clone());
    let outs = m.group_outputs(&mut t, &store, v).unwrap();
    let split = igroupss::igsm::GroupSplit {
        groups: outs
            .iter()
            .map(|&o| t.value(o).clone().reshape(&[3, 3, 2]).unwrap())
            .collect(),
        mode: Grouping::Interval,
        source_channels: group_channels(8, Grouping::Interval).unwrap(),
    };
    let cat = interval_concat(&split, None).unwrap();
    let want = cat.map(|v| 0.5 * v).reshape(&[1, 3, 3, 8]).unwrap();
    assert!(y.max_abs_diff(&want) <= 1e-14);
}

#[test]
fn output_channel_depends_only_on_its_group() {
    for domain in [Domain::Spatial, Domain::Spectral] {
        let (store, m) = module(domain, Grouping::Interval, 4, 8, 7);
        let f = random_feature(&[1, 4, 4, 8], &mut ChaCha8Rng::seed_from_u64(8));
        let base = run(&m, &store, &f);
        let channel = |t: &Tensor<f64>, ch: usize| -> Vec<f64> {
            t.data().iter().skip(ch).step_by(8).copied().collect()
        };
        // Channel index 4 (the fifth) sits in the first interval group.
        for g in 0..4 {
            for field in ["B_proj.w", "C_proj.w", "dt_proj.b", "D"] {
                let mut s = store.clone();
                let p = s.by_name_mut(&format!("m.g{g}.{field}")).unwrap();
                p.value = p.value.map(|v| v + 0.3);
                let y = run(&m, &s, &f);
                if g == 0 {
                    assert_ne!(channel(&y, 4), channel(&base, 4), "{domain:?} g{g} {field}");
                } else {
                    assert_eq!(channel(&y, 4), channel(&base, 4), "{domain:?} g{g} {field}");
                }
            }
        }
    }
}

#[test]
fn four_directions_produce_distinct_outputs() {
    for domain in [Domain::Spatial, Domain::Spectral] {
        let (mut store, m) = module(domain, Grouping::Interval, 4, 8, 9);
        // Same parameters in every group and the same content in every
        // group's channels: only the scan direction differs.
        let shared: Vec<(String, Tensor<f64>)> = store
            .iter()
            .filter(|(_, p)| p.name.starts_with("m.g0."))
            .map(|(_, p)| (p.name["m.g0.".len()..].to_string(), p.value.clone()))
            .collect();
        for g in 1..4 {
            for (field, v) in &shared {
                store.by_name_mut(&format!("m.g{g}.{field}")).unwrap().value = v.clone();
            }
        }
        let base = random_feature::<f64>(&[1, 4, 4, 2], &mut ChaCha8Rng::seed_from_u64(10));
        let f = Tensor::from_fn(&[1, 4, 4, 8], |i| base.data()[(i / 8) * 2 + (i % 8) / 4]);
        let mut t = Tape::inference();
        let v = t.constant(f);
        let outs = m.group_outputs(&mut t, &store, v).unwrap();
        for a in 0..4 {
            for b in a + 1..4 {
                let d = t.value(outs[a]).max_abs_diff(t.value(outs[b]));
                assert!(d > 1e-6, "{domain:?} groups {a} and {b} coincide");
            }
        }
    }
}

#[test]
fn attention_weights_in_open_unit_interval() {
    let (store, m) = module(Domain::Spatial, Grouping::Interval, 3, 8, 11);
    let mut t = Tape::inference();
    let f = t.constant(
        random_feature(&[3, 3, 3, 8], &mut ChaCha8Rng::seed_from_u64(12)).map(|v| 20.0 * v),
    );
    let w = m.attention.forward(&mut t, &store, f).unwrap();
    assert_eq!(t.shape(w), &[3, 8]);
    assert!(t.value(w).data().iter().all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn two_by_two_left_right_order() {
    assert_eq!(
        ScanOrder::positions(2, 2, Direction::LeftRight),
        vec![(0, 0), (0, 1), (1, 0), (1, 1)]
    );
}

#[test]
fn grouped_scans_cost_a_quarter_of_full_width_projections() {
    let grouped = ModelConfig::default();
    let all = ModelConfig {
        grouping: Grouping::All,
        ..ModelConfig::default()
    };
    let (g, a) = (count_flops(&grouped).unwrap(), count_flops(&all).unwrap());
    assert!(g.scan() <= a.scan());
    assert!(g.scan_projection as f64 <= 0.3 * a.scan_projection as f64);
    assert!(g.total() < a.total());
}
