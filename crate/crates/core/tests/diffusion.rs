use fusion_core::backbone::{Conditioning, Denoiser, Fusion, ModelConfig};
use fusion_core::diffusion::{
    chain_rng, make_schedule, sample, sample_raw, DiffusionSchedule, Guidance, SampleSpec,
};
use fusion_core::numerics::{normal_draw, RngState, Tensor};

/// Iterates `x_t = sqrt(1 - b_t) x_{t-1} + sqrt(b_t) e_t` step by step.
fn stepwise(schedule: &DiffusionSchedule, x0: f64, t: usize, rng: &mut RngState) -> f64 {
    let mut x = x0;
    for s in 1..=t {
        let b = schedule.beta(s).unwrap();
        x = (1.0 - b).sqrt() * x + b.sqrt() * rng.standard_normal();
    }
    x
}

#[test]
fn stepwise_noising_matches_closed_form() {
    let s = make_schedule(1000, 1e-4, 0.02).unwrap();
    let trials = 10_000;
    let pixels = [-1.0, -0.3, 0.4, 1.0];
    let mut rng = RngState::new(77);
    for t in [1usize, 10, 50] {
        let ab = s.alpha_bar(t).unwrap();
        for &x0 in &pixels {
            let xs: Vec<f64> = (0..trials).map(|_| stepwise(&s, x0, t, &mut rng)).collect();
            let n = trials as f64;
            let mean = xs.iter().sum::<f64>() / n;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let want_mean = ab.sqrt() * x0;
            let want_var = 1.0 - ab;
            let se_mean = (want_var / n).sqrt();
            let se_var = want_var * (2.0 / (n - 1.0)).sqrt();
            assert!(
                (mean - want_mean).abs() < 3.0 * se_mean,
                "t={t} x0={x0}: mean {mean} vs {want_mean}"
            );
            assert!(
                (var - want_var).abs() < 3.0 * se_var,
                "t={t} x0={x0}: var {var} vs {want_var}"
            );

            // the closed form evaluated on the same kind of draws
            let eps = Tensor::<f64>::full(&[1], 1.0);
            let x = Tensor::<f64>::full(&[1], x0);
            let one = s.q_sample(&x, t, &eps).unwrap().data()[0];
            assert!((one - (want_mean + want_var.sqrt())).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_model_matches_scalar_recursion() {
    let s = make_schedule(1000, 1e-4, 0.02).unwrap();
    let captions = vec![vec![2, 7, 11], vec![4, 9, 14]];
    let shape = [1, 2, 2];
    let spec = SampleSpec {
        captions: &captions,
        image_shape: shape,
        n_steps: 1000,
        guidance: Guidance::Cfg(3.0),
        seed: 1234,
        first_chain: 0,
    };
    let mut zero = |x: &Tensor<f64>, _: &[usize], _: &[Vec<u32>]| Ok(Tensor::zeros(x.shape()));
    let got = sample_raw(&mut zero, &s, &spec).unwrap();

    for b in 0..captions.len() {
        let mut rng = chain_rng(1234, b);
        let mut x: Vec<f64> = (0..4).map(|_| rng.standard_normal()).collect();
        for t in (1..=1000).rev() {
            let beta = s.beta(t).unwrap();
            for v in x.iter_mut() {
                *v /= (1.0 - beta).sqrt();
            }
            if t > 1 {
                for v in x.iter_mut() {
                    *v += beta.sqrt() * rng.standard_normal();
                }
            }
        }
        for (i, want) in x.iter().enumerate() {
            let have = got.data()[b * 4 + i];
            assert!((have - want).abs() < 1e-5 * want.abs().max(1.0), "{have} vs {want}");
        }
    }
}

fn tiny() -> ModelConfig {
    ModelConfig {
        fusion: Fusion::Intermediate,
        conditioning: Conditioning::CrossAttn,
        depth: 3,
        n_image: 1,
        n_text: 1,
        embed_dim: 8,
        heads: 2,
        mlp_ratio: 2,
        patch_size: 2,
        img_channels: 3,
        img_size: 4,
        text_len: 3,
        text_in_dim: 4,
        vocab_size: 17,
    }
}

fn model() -> Denoiser<f32> {
    let mut d = Denoiser::<f32>::new(&tiny(), &mut RngState::new(3)).unwrap();
    let mut rng = RngState::new(4);
    for t in d.tensors_mut() {
        let noise: Tensor<f32> = normal_draw(&mut rng, t.shape());
        for (v, n) in t.data_mut().iter_mut().zip(noise.data()) {
            *v += 0.05 * n;
        }
    }
    d
}

#[test]
fn unguided_cfg_equals_conditional_sampler_bitwise() {
    let d = model();
    let s = make_schedule(200, 1e-4, 0.02).unwrap();
    let captions = vec![vec![3, 8, 14], vec![2, 10, 11]];
    let mut predict =
        |x: &Tensor<f32>, t: &[usize], c: &[Vec<u32>]| d.predict(x, t, c, false).map(|p| p.0);
    let spec = |guidance| SampleSpec {
        captions: &captions,
        image_shape: [3, 4, 4],
        n_steps: 20,
        guidance,
        seed: 11,
        first_chain: 0,
    };
    let cfg0 = sample(&mut predict, &s, &spec(Guidance::Cfg(0.0))).unwrap();
    let cond = sample(&mut predict, &s, &spec(Guidance::Conditional)).unwrap();
    assert!(cfg0.bit_eq(&cond));
    let guided = sample(&mut predict, &s, &spec(Guidance::Cfg(3.0))).unwrap();
    assert!(!guided.bit_eq(&cond));
}

#[test]
fn fixed_seed_sampling_is_reproducible() {
    let d = model();
    let s = make_schedule(200, 1e-4, 0.02).unwrap();
    let captions = vec![vec![5, 9, 16]; 3];
    let run = |seed| {
        let mut predict =
            |x: &Tensor<f32>, t: &[usize], c: &[Vec<u32>]| d.predict(x, t, c, false).map(|p| p.0);
        let spec = SampleSpec {
            captions: &captions,
            image_shape: [3, 4, 4],
            n_steps: 25,
            guidance: Guidance::Cfg(3.0),
            seed,
            first_chain: 0,
        };
        sample(&mut predict, &s, &spec).unwrap()
    };
    let a = run(5);
    assert!(a.bit_eq(&run(5)));
    assert!(!a.bit_eq(&run(6)));
    assert_eq!(a.shape(), &[3, 3, 4, 4]);
}
