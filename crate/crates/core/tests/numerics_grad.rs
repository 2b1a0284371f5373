mod common;

use common::{max_grad_error, randn, weighted_sum};
use fusion_core::numerics::{multi_head_attention, AttentionParams, RngState, Tape, Tensor};

const INSTANCES: u64 = 20;

fn worst_over_instances(mut one: impl FnMut(&mut RngState) -> f64) -> f64 {
    (0..INSTANCES)
        .map(|i| one(&mut RngState::new(1000 + i)))
        .fold(0.0, f64::max)
}

#[test]
fn linear_gradient_matches_finite_differences() {
    let worst = worst_over_instances(|rng| {
        let rows = rng.int_inclusive(1, 4);
        let din = rng.int_inclusive(1, 5);
        let dout = rng.int_inclusive(1, 5);
        let inputs = [
            randn(rng, &[rows, din]),
            randn(rng, &[din, dout]),
            randn(rng, &[dout]),
        ];
        max_grad_error(&inputs, &|tape, v| {
            let y = tape.linear(v[0], v[1], Some(v[2])).unwrap();
            tape.sum(y)
        })
    });
    assert!(worst < 1e-5, "linear rel err {worst:e}");
}

#[test]
fn softmax_gradient_matches_finite_differences() {
    let worst = worst_over_instances(|rng| {
        let n = rng.int_inclusive(2, 6);
        let inputs = [randn(rng, &[3, n])];
        max_grad_error(&inputs, &|tape, v| {
            let y = tape.softmax(v[0]);
            weighted_sum(tape, y, 7)
        })
    });
    assert!(worst < 1e-3, "softmax rel err {worst:e}");
}

#[test]
fn layer_norm_and_gelu_gradients_match_finite_differences() {
    let worst = worst_over_instances(|rng| {
        let n = rng.int_inclusive(2, 6);
        let inputs = [randn(rng, &[2, n]), randn(rng, &[n]), randn(rng, &[n])];
        max_grad_error(&inputs, &|tape, v| {
            let y = tape.layer_norm(v[0], v[1], v[2]).unwrap();
            let z = tape.gelu(y);
            weighted_sum(tape, z, 3)
        })
    });
    assert!(worst < 1e-3, "layer_norm/gelu rel err {worst:e}");
}

#[test]
fn gelu_gradient_alone() {
    let worst = worst_over_instances(|rng| {
        let inputs = [randn(rng, &[7]).map(|v| 2.0 * v)];
        max_grad_error(&inputs, &|tape, v| {
            let y = tape.gelu(v[0]);
            weighted_sum(tape, y, 5)
        })
    });
    assert!(worst < 1e-3, "gelu rel err {worst:e}");
}

#[test]
fn attention_gradient_matches_finite_differences() {
    let worst = worst_over_instances(|rng| {
        let heads = rng.int_inclusive(1, 2);
        let d = heads * rng.int_inclusive(1, 3);
        let lq = rng.int_inclusive(1, 4);
        let lk = rng.int_inclusive(1, 4);
        let b = rng.int_inclusive(1, 2);
        let inputs = [
            randn(rng, &[b, lq, d]),
            randn(rng, &[b, lk, d]),
            randn(rng, &[b, lk, d]),
        ];
        max_grad_error(&inputs, &|tape, v| {
            let y = tape.attention(v[0], v[1], v[2], heads).unwrap();
            weighted_sum(tape, y, 11)
        })
    });
    assert!(worst < 1e-4, "attention rel err {worst:e}");
}

#[test]
fn multi_head_attention_gradient_matches_finite_differences() {
    let worst = worst_over_instances(|rng| {
        let heads = 2;
        let d = 4;
        let lq = rng.int_inclusive(1, 3);
        let lk = rng.int_inclusive(1, 3);
        let mut inputs = vec![randn(rng, &[1, lq, d]), randn(rng, &[1, lk, d])];
        for _ in 0..4 {
            inputs.push(randn(rng, &[d, d]).map(|v| 0.5 * v));
            inputs.push(randn(rng, &[d]).map(|v| 0.1 * v));
        }
        max_grad_error(&inputs, &|tape, v| {
            let params = AttentionParams {
                wq: v[2],
                bq: v[3],
                wk: v[4],
                bk: v[5],
                wv: v[6],
                bv: v[7],
                wo: v[8],
                bo: v[9],
            };
            let (out, _) = multi_head_attention(tape, v[0], v[1], &params, heads).unwrap();
            weighted_sum(tape, out, 13)
        })
    });
    assert!(worst < 1e-4, "mha rel err {worst:e}");
}

#[test]
fn structural_ops_gradients_match_finite_differences() {
    let worst = worst_over_instances(|rng| {
        let inputs = [
            randn(rng, &[2, 3, 4]),
            randn(rng, &[2, 2, 4]),
            randn(rng, &[5, 4]),
            randn(rng, &[4]),
        ];
        max_grad_error(&inputs, &|tape, v| {
            let cat = tape.concat(&[v[0], v[1]], 1).unwrap();
            let mid = tape.narrow(cat, 1, 1, 3).unwrap();
            let looked = tape.gather(v[2], &[4, 0, 0, 2, 1, 4], &[2, 3, 4]).unwrap();
            let masked = tape.mask_rows(looked, vec![1.0, 0.0, 1.0, 1.0, 0.5, 1.0]).unwrap();
            let summed = tape.add(mid, masked).unwrap();
            let shifted = tape.add_broadcast(summed, v[3]).unwrap();
            let n = tape.value(shifted).numel();
            let index: Vec<usize> = (0..n).map(|i| (i * 7) % n).collect();
            let perm = tape.permute(shifted, index, &[n]).unwrap();
            let scaled = tape.scale(perm, 0.3);
            let chan = tape.reshape(scaled, &[2, 3, 4]).unwrap();
            let wide = tape.concat(&[chan, chan], 2).unwrap();
            weighted_sum(tape, wide, 17)
        })
    });
    assert!(worst < 1e-3, "structural rel err {worst:e}");
}

#[test]
fn mse_gradient_matches_finite_differences() {
    let worst = worst_over_instances(|rng| {
        let target = randn(rng, &[3, 3]);
        let inputs = [randn(rng, &[3, 3])];
        max_grad_error(&inputs, &|tape, v| tape.mse(v[0], &target).unwrap())
    });
    assert!(worst < 1e-5, "mse rel err {worst:e}");
}

#[test]
fn zero_parameters_give_zero_attention_output() {
    let mut tape = Tape::<f64>::new();
    let mut rng = RngState::new(3);
    let x = tape.constant(randn(&mut rng, &[1, 3, 4]));
    let zw = || Tensor::<f64>::zeros(&[4, 4]);
    let zb = || Tensor::<f64>::zeros(&[4]);
    let params = AttentionParams {
        wq: tape.constant(zw()),
        bq: tape.constant(zb()),
        wk: tape.constant(zw()),
        bk: tape.constant(zb()),
        wv: tape.constant(zw()),
        bv: tape.constant(zb()),
        wo: tape.constant(zw()),
        bo: tape.constant(zb()),
    };
    let (out, probs) = multi_head_attention(&mut tape, x, x, &params, 2).unwrap();
    assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
    for row in probs.data().chunks(3) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn attention_rows_are_stochastic() {
    let mut rng = RngState::new(9);
    let mut tape = Tape::<f64>::new();
    let q = tape.constant(randn(&mut rng, &[2, 5, 8]).map(|v| 4.0 * v));
    let k = tape.constant(randn(&mut rng, &[2, 7, 8]).map(|v| 4.0 * v));
    let out = tape.attention(q, k, k, 4).unwrap();
    let probs = tape.attention_probs(out).unwrap();
    assert_eq!(probs.shape(), &[2, 4, 5, 7]);
    for row in probs.data().chunks(7) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(row.iter().all(|&p| p >= 0.0));
    }
}
