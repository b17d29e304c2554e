use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{check_params, GradCheckOptions};
use super::layers::LstmCell;
use super::*;

const TOL: f64 = 1e-4;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

/// Fixed random projection so every check reduces a tensor to a scalar with
/// a non-trivial upstream gradient.
fn probe(g: &mut Graph<'_>, x: NodeId, seed: u64) -> NodeId {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let shape = g.value(x).shape().to_vec();
    let w = g.input(Tensor::uniform(&shape, -1.0, 1.0, &mut rng)).unwrap();
    let w = if g.value(w).rows() != g.value(x).rows() {
        g.input(Tensor::uniform(&[g.value(x).rows(), g.value(x).cols()], -1.0, 1.0, &mut rng))
            .unwrap()
    } else {
        w
    };
    let m = g.mul(x, w).unwrap();
    g.sum(m).unwrap()
}

/// Runs `build` at five random points and asserts the worst relative error.
fn check_op(
    shapes: &[&[usize]],
    build: impl for<'g> Fn(&mut Graph<'g>, &[NodeId]) -> Result<NodeId, crate::Error>,
) {
    for point in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + point);
        let mut store = ParamStore::new();
        let ids: Vec<ParamId> = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| store.add(format!("x{i}"), rand_tensor(&mut rng, s)).unwrap())
            .collect();
        let report = check_params(
            &store,
            |g| {
                let nodes: Vec<NodeId> = ids.iter().map(|&id| g.param(id)).collect();
                let y = build(g, &nodes)?;
                Ok(probe(g, y, point))
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(
            report.max_rel_error <= TOL,
            "point {point}: {} rel err {}",
            report.worst,
            report.max_rel_error
        );
    }
}

#[test]
fn matmul_gradients() {
    check_op(&[&[3, 4], &[4, 2]], |g, x| g.matmul(x[0], x[1]));
}

#[test]
fn add_bias_and_elementwise_gradients() {
    check_op(&[&[3, 4], &[4]], |g, x| g.add_bias(x[0], x[1]));
    check_op(&[&[2, 3], &[2, 3]], |g, x| g.add(x[0], x[1]));
    check_op(&[&[2, 3], &[2, 3]], |g, x| g.sub(x[0], x[1]));
    check_op(&[&[2, 3], &[2, 3]], |g, x| g.mul(x[0], x[1]));
    check_op(&[&[2, 3]], |g, x| g.scale(x[0], -1.7));
}

#[test]
fn nonlinearity_gradients() {
    check_op(&[&[2, 5]], |g, x| g.sigmoid(x[0]));
    check_op(&[&[2, 5]], |g, x| g.tanh(x[0]));
    check_op(&[&[2, 5]], |g, x| g.exp(x[0]));
    check_op(&[&[2, 5]], |g, x| {
        let e = g.exp(x[0])?;
        g.log(e)
    });
    check_op(&[&[3, 4]], |g, x| g.log_softmax(x[0]));
}

#[test]
fn relu_gradient_away_from_kink() {
    // entries drawn from [-1, 1] sit far from 0 relative to the FD step
    check_op(&[&[2, 5]], |g, x| {
        let y = g.scale(x[0], 3.0)?;
        g.relu(y)
    });
}

#[test]
fn structural_op_gradients() {
    check_op(&[&[5, 3]], |g, x| g.embed(x[0], &[4, 0, 4, 2]));
    check_op(&[&[3, 6]], |g, x| g.slice_cols(x[0], 2, 3));
    check_op(&[&[6, 2]], |g, x| g.slice_rows(x[0], 1, 4));
    check_op(&[&[2, 3], &[2, 1]], |g, x| g.concat_cols(&[x[0], x[1], x[0]]));
    check_op(&[&[2, 3], &[1, 3]], |g, x| g.concat_rows(&[x[1], x[0]]));
}

#[test]
fn lstm_cell_gradient() {
    check_op(&[&[2, 12], &[2, 3]], |g, x| g.lstm_cell(x[0], x[1]));
}

#[test]
fn attention_gradient() {
    // 3 queries over batch 3, 4 steps, key dim 2, value dim 3
    check_op(&[&[3, 2], &[12, 2], &[12, 3]], |g, x| g.attention(x[0], x[1], x[2], 3));
    // queries reused across time: 6 query rows, batch 2
    check_op(&[&[6, 2], &[4, 2]], |g, x| g.attention(x[0], x[1], x[1], 2));
}

#[test]
fn smoothed_nll_gradient() {
    for eps in [0.0, 0.1] {
        check_op(&[&[3, 4]], move |g, x| {
            let lp = g.log_softmax(x[0])?;
            g.smoothed_nll(lp, &[1, 3, 0], &[1.0, 0.0, 2.0], eps)
        });
    }
}

#[test]
fn lstm_layer_weight_gradients() {
    for point in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(point);
        let mut store = ParamStore::new();
        let cell = LstmCell::new(&mut store, "lstm", 3, 4, &mut rng).unwrap();
        // perturb everything so the forget bias is not special
        for id in store.ids().collect::<Vec<_>>() {
            let t = store.get_mut(id);
            t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.5..0.5));
        }
        let xs = rand_tensor(&mut rng, &[6, 3]);
        let h0 = rand_tensor(&mut rng, &[2, 4]);
        let c0 = rand_tensor(&mut rng, &[2, 4]);
        let report = check_params(
            &store,
            |g| {
                let x = g.input(xs.clone())?;
                let h = g.input(h0.clone())?;
                let c = g.input(c0.clone())?;
                let run = cell.run(g, x, 2, h, c, point % 2 == 1)?;
                let all = g.concat_rows(&run.outputs)?;
                let both = g.concat_rows(&[all, run.c])?;
                Ok(probe(g, both, point))
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_error <= TOL, "{report:?}");
    }
}

#[test]
fn lstm_zero_parameters_give_zero_state() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cell = LstmCell::new(&mut store, "z", 3, 2, &mut rng).unwrap();
    for id in store.ids().collect::<Vec<_>>() {
        store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let (h, c) = cell.step_values(&store, &[0.0; 2], &[0.0; 2], &[0.5, -1.0, 2.0]).unwrap();
    assert_eq!(h, vec![0.0; 2]);
    assert_eq!(c, vec![0.0; 2]);
}

#[test]
fn lstm_repeated_steps_keep_shape_and_reject_mismatch() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cell = LstmCell::new(&mut store, "l", 3, 5, &mut rng).unwrap();
    let (mut h, mut c) = (vec![0.0; 5], vec![0.0; 5]);
    for _ in 0..10 {
        let (h2, c2) = cell.step_values(&store, &h, &c, &[0.1, 0.2, 0.3]).unwrap();
        assert_eq!((h2.len(), c2.len()), (5, 5));
        assert!(h2.iter().chain(&c2).all(|v| v.is_finite()));
        h = h2;
        c = c2;
    }
    assert!(cell.step_values(&store, &h, &c, &[0.1]).is_err());
}

#[test]
fn forward_pass_is_bitwise_deterministic() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cell = LstmCell::new(&mut store, "l", 4, 8, &mut rng).unwrap();
    let xs = rand_tensor(&mut rng, &[12, 4]);
    let run = || {
        let mut g = Graph::new(&store, false);
        let x = g.input(xs.clone()).unwrap();
        let h = layers::zeros(&mut g, 3, 8).unwrap();
        let c = layers::zeros(&mut g, 3, 8).unwrap();
        let r = cell.run(&mut g, x, 3, h, c, false).unwrap();
        g.value(r.h).data().to_vec()
    };
    let a = run();
    let b = run();
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn dot_attention_function_gradient_matches_graph_op() {
    // the plain-slice version and the graph op agree in value
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let q = rand_tensor(&mut rng, &[1, 3]);
    let k = rand_tensor(&mut rng, &[4, 3]);
    let v = rand_tensor(&mut rng, &[4, 2]);
    let keys: Vec<&[f64]> = (0..4).map(|i| k.row(i)).collect();
    let vals: Vec<&[f64]> = (0..4).map(|i| v.row(i)).collect();
    let (ctx, w) = dot_attention(q.data(), &keys, &vals).unwrap();
    let mut g = Graph::detached();
    let (qn, kn, vn) = (
        g.input(q.clone()).unwrap(),
        g.input(k.clone()).unwrap(),
        g.input(v.clone()).unwrap(),
    );
    let out = g.attention(qn, kn, vn, 1).unwrap();
    for (a, b) in ctx.iter().zip(g.value(out).data()) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

proptest! {
    #[test]
    fn softmax_sums_to_one_and_is_shift_invariant(
        v in prop::collection::vec(-30.0f64..30.0, 1..20),
        c in -100.0f64..100.0,
    ) {
        let p = softmax(&v).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        prop_assert!(p.iter().all(|&x| x >= 0.0));
        let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
        let q = softmax(&shifted).unwrap();
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
    }
}
