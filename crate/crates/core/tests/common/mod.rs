#![allow(dead_code)]

use fusion_core::numerics::{normal_draw, RngState, Tape, Tensor, Var};

/// Builds a scalar from the given leaves on a fresh tape.
pub type Build<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Var + 'a;

/// Central finite-difference check of every leaf element.
///
/// Returns the largest relative error between analytic and numeric
/// derivatives, with magnitudes floored at `1e-6`.
pub fn max_grad_error(inputs: &[Tensor<f64>], build: &Build) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars);
    let grads = tape.backward(out).expect("backward");

    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (slot, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[slot])
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; input.numel()]);
        for i in 0..input.numel() {
            let eval = |delta: f64| {
                let mut tape = Tape::new();
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(s, t)| {
                        let mut t = t.clone();
                        if s == slot {
                            t.data_mut()[i] += delta;
                        }
                        tape.param(t)
                    })
                    .collect();
                let out = build(&mut tape, &vars);
                tape.value(out).data()[0]
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(err);
        }
    }
    worst
}

/// Contracts an arbitrary tensor to a scalar with fixed pseudo-random
/// weights, so symmetric reductions (e.g. softmax rows) still carry signal.
pub fn weighted_sum(tape: &mut Tape<f64>, x: Var, seed: u64) -> Var {
    let n = tape.value(x).numel();
    let weights: Tensor<f64> = normal_draw(&mut RngState::new(seed), &[n, 1]);
    let w = tape.constant(weights);
    let flat = tape.reshape(x, &[1, n]).unwrap();
    let y = tape.linear(flat, w, None).unwrap();
    tape.sum(y)
}

pub fn randn(rng: &mut RngState, shape: &[usize]) -> Tensor<f64> {
    normal_draw(rng, shape)
}
