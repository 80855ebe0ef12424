//! Central finite-difference checks for every differentiable op, the scan
//! parameters, one IGSSB and a miniature end-to-end model (all 64-bit).

use igroupss::gradcheck::{check_inputs, check_params, weighted_sum, Report, DEFAULT_STEP};
use igroupss::igsm::{random_feature, Domain, Grouping, Igsm};
use igroupss::network::block::{BlockSpec, Igssb, Operator};
use igroupss::network::{Model, ModelConfig, OperatorMode};
use igroupss::ssm::SsmParams;
use igroupss::{ParamStore, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const OP_TOL: f64 = 1e-4;
const BLOCK_TOL: f64 = 1e-3;

fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
    random_feature(shape, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn positive(shape: &[usize], seed: u64) -> Tensor<f64> {
    rand_t(shape, seed).map(|v| 0.5 + 0.5 * v.abs())
}

fn assert_report(name: &str, r: &Report, tol: f64) {
    assert!(r.checked > 0, "{name}: nothing checked");
    assert!(
        r.passes(tol),
        "{name}: max rel err {:e} at {}",
        r.max_rel_err,
        r.worst
    );
}

fn check_unary(name: &str, f: fn(&mut Tape<f64>, Var) -> igroupss::Result<Var>) {
    let r = check_inputs(&[rand_t(&[3, 4], 1)], DEFAULT_STEP, |t, v| {
        let y = f(t, v[0])?;
        weighted_sum(t, y, 7)
    })
    .unwrap();
    assert_report(name, &r, OP_TOL);
}

#[test]
fn elementwise_unary_ops() {
    check_unary("silu", |t, x| t.silu(x));
    check_unary("softplus", |t, x| t.softplus(x));
    check_unary("sigmoid", |t, x| t.sigmoid(x));
    check_unary("exp", |t, x| t.exp(x));
    check_unary("relu", |t, x| t.relu(x));
    check_unary("neg", |t, x| t.neg(x));
    check_unary("scale", |t, x| t.scale(x, -1.7));
}

#[test]
fn elementwise_binary_ops() {
    let ins = [rand_t(&[2, 5], 2), rand_t(&[2, 5], 3), rand_t(&[1], 4)];
    let r = check_inputs(&ins, DEFAULT_STEP, |t, v| {
        let s = t.add(v[0], v[1])?;
        let d = t.sub(s, v[1])?;
        let m = t.mul(d, v[1])?;
        let b = t.mul(m, v[2])?;
        let b2 = t.add(v[2], b)?;
        weighted_sum(t, b2, 1)
    })
    .unwrap();
    assert_report("add/sub/mul", &r, OP_TOL);
}

#[test]
fn matmul_and_linear() {
    let ins = [rand_t(&[3, 4], 5), rand_t(&[4, 2], 6)];
    let r = check_inputs(&ins, DEFAULT_STEP, |t, v| {
        let y = t.matmul(v[0], v[1])?;
        weighted_sum(t, y, 2)
    })
    .unwrap();
    assert_report("matmul", &r, OP_TOL);

    let ins = [rand_t(&[2, 3, 4], 7), rand_t(&[4, 5], 8), rand_t(&[5], 9)];
    let r = check_inputs(&ins, DEFAULT_STEP, |t, v| {
        let y = t.linear(v[0], v[1], Some(v[2]))?;
        weighted_sum(t, y, 3)
    })
    .unwrap();
    assert_report("linear", &r, OP_TOL);
}

#[test]
fn reductions() {
    for axis in 0..3 {
        let ins = [rand_t(&[2, 3, 4], 10 + axis as u64)];
        for (name, which) in [("sum", 0), ("mean", 1), ("max", 2)] {
            let r = check_inputs(&ins, DEFAULT_STEP, |t, v| {
                let y = match which {
                    0 => t.sum(v[0], axis)?,
                    1 => t.mean(v[0], axis)?,
                    _ => t.max(v[0], axis)?,
                };
                weighted_sum(t, y, 4)
            })
            .unwrap();
            assert_report(&format!("{name} axis {axis}"), &r, OP_TOL);
        }
    }
}

#[test]
fn layout_ops() {
    let ins = [rand_t(&[2, 6], 11), rand_t(&[3], 12)];
    let r = check_inputs(&ins, DEFAULT_STEP, |t, v| {
        let r = t.reshape(v[0], &[3, 4])?;
        let c = t.concat(&[r, v[1]])?;
        // Duplicated and dropped entries exercise accumulation in gather.
        let g = t.gather(c, vec![14, 0, 0, 3, 7, 9, 11, 2], &[2, 4])?;
        let s = t.sum_all(g)?;
        let w = weighted_sum(t, g, 5)?;
        t.add(s, w)
    })
    .unwrap();
    assert_report("reshape/concat/gather/sum_all", &r, OP_TOL);
}

#[test]
fn normalization() {
    let ins = [rand_t(&[3, 2, 5], 13), rand_t(&[5], 14), rand_t(&[5], 15)];
    let r = check_inputs(&ins, DEFAULT_STEP, |t, v| {
        let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
        weighted_sum(t, y, 6)
    })
    .unwrap();
    assert_report("layer_norm", &r, OP_TOL);

    let r = check_inputs(&ins, DEFAULT_STEP, |t, v| {
        let (y, _, _) = t.batch_norm_train(v[0], v[1], v[2], 1e-5)?;
        weighted_sum(t, y, 7)
    })
    .unwrap();
    assert_report("batch_norm_train", &r, OP_TOL);

    let mean = [0.1, -0.2, 0.0, 0.3, 0.05];
    let var = [1.0, 0.5, 2.0, 0.7, 1.3];
    let r = check_inputs(&ins, DEFAULT_STEP, |t, v| {
        let y = t.batch_norm_frozen(v[0], v[1], v[2], &mean, &var, 1e-5)?;
        weighted_sum(t, y, 8)
    })
    .unwrap();
    assert_report("batch_norm_frozen", &r, OP_TOL);
}

#[test]
fn convolutions_and_pooling() {
    let ins = [
        rand_t(&[2, 3, 4, 3], 16),
        rand_t(&[27, 2], 17),
        rand_t(&[2], 18),
    ];
    let r = check_inputs(&ins, DEFAULT_STEP, |t, v| {
        let y = t.conv3d(v[0], v[1], v[2])?;
        weighted_sum(t, y, 9)
    })
    .unwrap();
    assert_report("conv3d", &r, OP_TOL);

    let ins = [
        rand_t(&[2, 4, 4, 3], 19),
        rand_t(&[9, 3], 20),
        rand_t(&[3], 21),
    ];
    let r = check_inputs(&ins, DEFAULT_STEP, |t, v| {
        let y = t.dwconv(v[0], v[1], v[2])?;
        weighted_sum(t, y, 10)
    })
    .unwrap();
    assert_report("dwconv", &r, OP_TOL);

    for (m, s) in [(2, 1), (2, 2), (3, 1)] {
        let ins = [rand_t(&[2, 5, 5, 3], 22)];
        let side = if s == 2 { 4 } else { 5 };
        let ins = if side == 4 {
            [rand_t(&[2, 4, 4, 3], 23)]
        } else {
            ins
        };
        let r = check_inputs(&ins, DEFAULT_STEP, |t, v| {
            let y = t.avg_pool(v[0], m, s)?;
            weighted_sum(t, y, 11)
        })
        .unwrap();
        assert_report(&format!("avg_pool {m},{s}"), &r, OP_TOL);
    }

    let ins = [rand_t(&[2, 3, 3, 4], 24), rand_t(&[2, 4], 25)];
    let r = check_inputs(&ins, DEFAULT_STEP, |t, v| {
        let y = t.channel_scale(v[0], v[1])?;
        weighted_sum(t, y, 12)
    })
    .unwrap();
    assert_report("channel_scale", &r, OP_TOL);
}

#[test]
fn selective_scan_op() {
    let (s, l, d, n) = (2, 6, 3, 4);
    let ins = [
        rand_t(&[s, l, d], 26),
        positive(&[s, l, d], 27),
        rand_t(&[d, n], 28).map(|v| -0.2 - v.abs()),
        rand_t(&[s, l, n], 29),
        rand_t(&[s, l, n], 30),
        rand_t(&[d], 31),
    ];
    let r = check_inputs(&ins, DEFAULT_STEP, |t, v| {
        let y = t.selective_scan(v[0], v[1], v[2], v[3], v[4], v[5])?;
        weighted_sum(t, y, 13)
    })
    .unwrap();
    assert_report("selective_scan", &r, OP_TOL);
}

#[test]
fn cross_entropy_gradient() {
    let ins = [rand_t(&[4, 5], 32).map(|v| 3.0 * v)];
    let r = check_inputs(&ins, DEFAULT_STEP, |t, v| {
        t.cross_entropy(v[0], &[0, 4, 2, 2])
    })
    .unwrap();
    assert_report("cross_entropy", &r, 1e-6);
}

#[test]
fn scan_parameters_through_projection() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut store = ParamStore::<f64>::new();
    let layer = SsmParams::<f64>::init(2, 4, &mut rng)
        .register(&mut store, "s")
        .unwrap();
    let x = rand_t(&[1, 8, 2], 34);
    let r = check_params(&mut store, DEFAULT_STEP, None, |t, s| {
        let xv = t.constant(x.clone());
        let y = layer.forward(t, s, xv)?;
        weighted_sum(t, y, 14)
    })
    .unwrap();
    assert_report("ssm params (L=8, D=2, N=4)", &r, BLOCK_TOL);
}

#[test]
fn igsm_both_domains_all_groupings() {
    for domain in [Domain::Spatial, Domain::Spectral] {
        for mode in [Grouping::Interval, Grouping::Adjacent, Grouping::All] {
            let mut rng = ChaCha8Rng::seed_from_u64(35);
            let mut store = ParamStore::<f64>::new();
            let igsm = Igsm::new(&mut store, &mut rng, "m", domain, mode, 3, 8, 4).unwrap();
            let f = rand_t(&[2, 3, 3, 8], 36);
            let r = check_params(&mut store, DEFAULT_STEP, Some(6), |t, s| {
                let fv = t.constant(f.clone());
                let y = igsm.forward(t, s, fv)?;
                weighted_sum(t, y, 15)
            })
            .unwrap();
            assert_report(&format!("igsm {domain:?} {mode}"), &r, BLOCK_TOL);
            let r = check_inputs(std::slice::from_ref(&f), DEFAULT_STEP, |t, v| {
                let y = igsm.forward(t, &store, v[0])?;
                weighted_sum(t, y, 16)
            })
            .unwrap();
            assert_report(&format!("igsm input {domain:?} {mode}"), &r, BLOCK_TOL);
        }
    }
}

#[test]
fn operator_every_parameter() {
    let mut rng = ChaCha8Rng::seed_from_u64(37);
    let mut store = ParamStore::<f64>::new();
    let op = Operator::new(
        &mut store,
        &mut rng,
        "op",
        Domain::Spectral,
        Grouping::Interval,
        4,
        8,
        8,
        4,
    )
    .unwrap();
    let f = rand_t(&[2, 4, 4, 8], 38);
    let r = check_params(&mut store, DEFAULT_STEP, None, |t, s| {
        let fv = t.constant(f.clone());
        let y = op.forward(t, s, fv)?;
        weighted_sum(t, y, 17)
    })
    .unwrap();
    assert_report("spectral operator", &r, BLOCK_TOL);
}

#[test]
fn igssb_every_parameter_4x4x8() {
    let mut rng = ChaCha8Rng::seed_from_u64(39);
    let mut store = ParamStore::<f64>::new();
    let spec = BlockSpec {
        side: 4,
        dim: 8,
        inner: 8,
        state: 4,
        ffn_hidden: 16,
        grouping: Grouping::Interval,
        operators: OperatorMode::Cascade,
    };
    let block = Igssb::new(&mut store, &mut rng, "b", &spec).unwrap();
    let f = rand_t(&[1, 4, 4, 8], 40);
    let r = check_params(&mut store, DEFAULT_STEP, None, |t, s| {
        let fv = t.constant(f.clone());
        let y = block.forward(t, s, fv)?;
        weighted_sum(t, y, 18)
    })
    .unwrap();
    assert_report("igssb", &r, BLOCK_TOL);
    assert_eq!(r.checked, store.count_trainable());
}

fn miniature() -> ModelConfig {
    ModelConfig {
        patch_size: 5,
        pca_dim: 8,
        embed_dim: 8,
        num_stages: 2,
        ssm_state: 4,
        num_classes: 3,
        classifier_hidden: 8,
        ..ModelConfig::default()
    }
}

/// Smallest |pre-activation| entering the embedding ReLU. Central
/// differences are only meaningful when no entry crosses the kink.
fn relu_margin(model: &Model<f64>, x: &Tensor<f64>) -> f64 {
    let mut t = Tape::new();
    let xv = t.constant(x.clone());
    let c = model.embed.conv.forward(&mut t, &model.store, xv).unwrap();
    let y = model.embed.bn.forward(&mut t, &model.store, c).unwrap();
    t.value(y)
        .data()
        .iter()
        .fold(f64::INFINITY, |m, v| m.min(v.abs()))
}

#[test]
fn miniature_model_end_to_end() {
    let cfg = miniature();
    let (model, x) = (41..)
        .map(|seed| {
            let m = Model::<f64>::new(&cfg, seed).unwrap();
            let x = rand_t(&[2, 5, 5, 8], seed + 1).map(|v| 0.5 + 0.5 * v);
            (m, x)
        })
        .find(|(m, x)| relu_margin(m, x) > 100.0 * DEFAULT_STEP)
        .unwrap();
    let targets = [0, 2];
    let mut store = model.store.clone();
    let r = check_params(&mut store, DEFAULT_STEP, None, |t, s| {
        let m = Model {
            store: s.clone(),
            ..model.clone()
        };
        let xv = t.constant(x.clone());
        let logits = m.forward(t, xv)?;
        t.cross_entropy(logits, &targets)
    })
    .unwrap();
    assert_report("miniature model", &r, BLOCK_TOL);
    assert_eq!(r.checked, store.count_trainable());
}

#[test]
fn repeated_backward_is_deterministic() {
    let cfg = miniature();
    let mut model = Model::<f64>::new(&cfg, 43).unwrap();
    let x = rand_t(&[2, 5, 5, 8], 44);
    let mut grads = Vec::new();
    for _ in 0..2 {
        model.store.zero_grad();
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let logits = model.forward(&mut t, xv).unwrap();
        let loss = t.cross_entropy(logits, &[1, 0]).unwrap();
        t.backward_into(loss, &mut model.store).unwrap();
        grads.push(
            model
                .store
                .iter()
                .map(|(_, p)| p.grad.clone())
                .collect::<Vec<_>>(),
        );
    }
    assert_eq!(grads[0], grads[1]);
}
