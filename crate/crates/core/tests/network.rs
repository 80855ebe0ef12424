use igroupss::igsm::{random_feature, Grouping};
use igroupss::network::block::{BlockSpec, Igssb, Operator};
use igroupss::network::layers::Linear;
use igroupss::network::{checkpoint, count_flops, Model, ModelConfig, OperatorMode};
use igroupss::{ParamStore, Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn batch(shape: &[usize], seed: u64) -> Tensor<f64> {
    random_feature::<f64>(shape, &mut ChaCha8Rng::seed_from_u64(seed)).map(|v| 0.5 + 0.5 * v)
}

fn small() -> ModelConfig {
    ModelConfig {
        patch_size: 7,
        pca_dim: 6,
        embed_dim: 8,
        num_stages: 3,
        ssm_state: 4,
        num_classes: 5,
        ..ModelConfig::default()
    }
}

#[test]
fn default_trace_and_logits() {
    let cfg = ModelConfig::default();
    assert_eq!(cfg.validate().unwrap(), vec![13, 12, 11]);
    let model = Model::<f32>::new(&cfg, 0).unwrap();
    let mut t = Tape::inference();
    let x = t.constant(batch(&[2, 13, 13, 30], 1).cast());
    let embedded = model.embed.forward(&mut t, &model.store, x).unwrap();
    assert_eq!(t.shape(embedded), &[2, 13, 13, 32]);
    let (f, trace) = model.features(&mut t, x).unwrap();
    assert_eq!(trace, vec![13, 12, 11]);
    let logits = model.classify(&mut t, f).unwrap();
    assert_eq!(t.shape(logits), &[2, 16]);
    assert!(t.value(logits).is_finite());
}

#[test]
fn default_parameter_count_in_band() {
    let n = Model::<f32>::new(&ModelConfig::default(), 0)
        .unwrap()
        .count_params();
    assert!((40_000..=80_000).contains(&n), "{n}");
}

#[test]
fn linear_layer_count() {
    let mut store = ParamStore::<f32>::new();
    Linear::new(
        &mut store,
        &mut ChaCha8Rng::seed_from_u64(0),
        "l",
        7,
        5,
        true,
    )
    .unwrap();
    assert_eq!(store.count_trainable(), 7 * 5 + 5);
}

#[test]
fn doubling_width_more_than_doubles_count() {
    let a = Model::<f32>::new(&ModelConfig::default(), 0)
        .unwrap()
        .count_params();
    let wide = ModelConfig {
        embed_dim: 64,
        ..ModelConfig::default()
    };
    let b = Model::<f32>::new(&wide, 0).unwrap().count_params();
    assert!(b > 2 * a, "{a} -> {b}");
}

#[test]
fn grouped_flops_below_ungrouped() {
    let g = count_flops(&ModelConfig::default()).unwrap();
    let a = count_flops(&ModelConfig {
        grouping: Grouping::All,
        ..ModelConfig::default()
    })
    .unwrap();
    assert!(g.total() < a.total());
}

fn zero(store: &mut ParamStore<f64>, prefix: &str) {
    for p in store.iter_mut() {
        if p.name.starts_with(prefix) {
            p.value = p.value.map(|_| 0.0);
        }
    }
}

fn block(operators: OperatorMode, seed: u64) -> (ParamStore<f64>, Igssb) {
    let mut store = ParamStore::new();
    let spec = BlockSpec {
        side: 4,
        dim: 8,
        inner: 8,
        state: 4,
        ffn_hidden: 16,
        grouping: Grouping::Interval,
        operators,
    };
    let b = Igssb::new(&mut store, &mut ChaCha8Rng::seed_from_u64(seed), "b", &spec).unwrap();
    (store, b)
}

#[test]
fn zeroed_output_projections_make_block_identity() {
    let (mut store, b) = block(OperatorMode::Cascade, 2);
    for name in ["b.spa.out.", "b.spe.out.", "b.ffn.fc2."] {
        zero(&mut store, name);
    }
    let mut t = Tape::new();
    let f = t.constant(batch(&[2, 4, 4, 8], 3));
    let y = b.forward(&mut t, &store, f).unwrap();
    assert_eq!(t.value(y), t.value(f));
}

#[test]
fn spatial_only_block_is_residual_spatial_operator() {
    let (mut store, b) = block(OperatorMode::SpatialOnly, 4);
    assert!(b.spectral.is_none());
    zero(&mut store, "b.ffn.fc2.");
    let mut t = Tape::new();
    let f = t.constant(batch(&[1, 4, 4, 8], 5));
    let y = b.forward(&mut t, &store, f).unwrap();
    let spa: &Operator = b.spatial.as_ref().unwrap();
    let direct = spa.forward(&mut t, &store, f).unwrap();
    assert_eq!(t.value(y), t.value(direct));
    // The operator itself carries the residual: zeroing its projection leaves f.
    zero(&mut store, "b.spa.out.");
    let z = spa.forward(&mut t, &store, f).unwrap();
    assert_eq!(t.value(z), t.value(f));
}

#[test]
fn zeroed_stack_reduces_to_pooled_embedding() {
    let cfg = small();
    let mut model = Model::<f64>::new(&cfg, 6).unwrap();
    for s in 1..=cfg.num_stages {
        for name in ["spa.out.", "spe.out.", "ffn.fc2."] {
            zero(&mut model.store, &format!("stage{s}.igssb0.{name}"));
        }
        if s > 1 {
            let d = cfg.embed_dim;
            let p = model
                .store
                .by_name_mut(&format!("stage{s}.down.w"))
                .unwrap();
            p.value = Tensor::eye(d);
            zero(&mut model.store, &format!("stage{s}.down.b"));
        }
    }
    let x = batch(&[2, 7, 7, 6], 7);
    let mut t = Tape::inference();
    let xv = t.constant(x);
    let logits = model.forward(&mut t, xv).unwrap();
    let mut f = model.embed.forward(&mut t, &model.store, xv).unwrap();
    for _ in 1..cfg.num_stages {
        f = t.avg_pool(f, 2, 1).unwrap();
    }
    let expected = model.classify(&mut t, f).unwrap();
    assert!(t.value(logits).max_abs_diff(t.value(expected)) <= 1e-12);
}

#[test]
fn pixel_order_matters_but_head_is_permutation_invariant() {
    let cfg = small();
    let model = Model::<f64>::new(&cfg, 8).unwrap();
    let x = batch(&[1, 7, 7, 6], 9);
    let (p, l) = (7, 6);
    // Swap two off-center pixels.
    let swap = |i: usize| -> usize {
        let (pix, band) = (i / l, i % l);
        let pix = match pix {
            0 => 30,
            30 => 0,
            q => q,
        };
        pix * l + band
    };
    let xp = Tensor::from_fn(&[1, p, p, l], |i| x.data()[swap(i)]);
    let a = model.predict_logits(x).unwrap();
    let b = model.predict_logits(xp).unwrap();
    assert!(a.max_abs_diff(&b) > 1e-9);

    let f = batch(&[1, 5, 5, 8], 10);
    let perm: Vec<usize> = (0..25).rev().collect();
    let fp = Tensor::from_fn(&[1, 5, 5, 8], |i| f.data()[perm[i / 8] * 8 + i % 8]);
    let mut t = Tape::inference();
    let (fa, fb) = (t.constant(f), t.constant(fp));
    let (ya, yb) = (
        model.classify(&mut t, fa).unwrap(),
        model.classify(&mut t, fb).unwrap(),
    );
    assert!(t.value(ya).max_abs_diff(t.value(yb)) <= 1e-12);
}

#[test]
fn invalid_input_shape_is_a_config_error() {
    let model = Model::<f64>::new(&small(), 0).unwrap();
    let err = model.predict_logits(batch(&[1, 9, 9, 6], 0)).unwrap_err();
    assert!(matches!(err, igroupss::Error::Config(_)));
}

#[test]
fn checkpoint_file_round_trip_is_bit_exact() {
    let mut model = Model::<f32>::new(&small(), 11).unwrap();
    let rm = model.store.by_name_mut("embed.bn.running_mean").unwrap();
    rm.value = rm.value.map(|_| 0.25);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.igsm");
    checkpoint::save(&model, &path).unwrap();
    let back = checkpoint::load(&path).unwrap();
    assert_eq!(back.config, model.config);
    for ((_, a), (_, b)) in model.store.iter().zip(back.store.iter()) {
        assert_eq!(a.name, b.name);
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.value), bits(&b.value), "{}", a.name);
    }
    let x = batch(&[2, 7, 7, 6], 12).cast::<f32>();
    assert_eq!(
        model.predict_logits(x.clone()).unwrap(),
        back.predict_logits(x).unwrap()
    );
}

fn valid_config() -> impl Strategy<Value = ModelConfig> {
    (
        (1usize..=4).prop_map(|h| 2 * h + 3),
        1usize..=3,
        prop::sample::select(vec![(1usize, 1usize), (2, 1), (3, 1), (2, 2)]),
        prop::sample::select(vec![Grouping::Interval, Grouping::Adjacent, Grouping::All]),
        prop::sample::select(vec![
            OperatorMode::Cascade,
            OperatorMode::SpatialOnly,
            OperatorMode::SpectralOnly,
        ]),
    )
        .prop_map(
            |(patch, stages, downsample, grouping, operators)| ModelConfig {
                patch_size: patch,
                pca_dim: 4,
                embed_dim: 4,
                num_stages: stages,
                downsample,
                ssm_state: 2,
                num_classes: 3,
                classifier_hidden: 4,
                conv_features: 2,
                grouping,
                operators,
                ..ModelConfig::default()
            },
        )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn static_trace_matches_runtime(cfg in valid_config()) {
        match cfg.validate() {
            Ok(sides) => {
                let model = Model::<f64>::new(&cfg, 0).unwrap();
                let mut t = Tape::inference();
                let x = t.constant(batch(&[1, cfg.patch_size, cfg.patch_size, 4], 1));
                let (f, trace) = model.features(&mut t, x).unwrap();
                prop_assert_eq!(&trace, &sides);
                prop_assert_eq!(t.shape(f), &[1, sides[sides.len() - 1], sides[sides.len() - 1], 4][..]);
            }
            Err(e) => prop_assert!(matches!(e, igroupss::Error::Config(_))),
        }
    }
}
