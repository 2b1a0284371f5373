use fusion_core::data::{generate_dataset, parse_caption, SceneSpec};
use fusion_core::eval::{count_shapes, frechet_from_features, pixel_frechet, CountResult, CountSample};
use fusion_core::numerics::{RngState, Tensor};

#[test]
fn counter_is_exact_on_rendered_scenes() {
    for (canvas, seed) in [(16, 1), (32, 2)] {
        let spec = SceneSpec::for_canvas(canvas, 8);
        let data = generate_dataset(&spec, 500, seed).unwrap();
        let mut samples = Vec::new();
        for (i, item) in data.iter().enumerate() {
            let (count, color, shape) = parse_caption(&item.caption().unwrap()).unwrap();
            let got = count_shapes(&item.pixels, (shape, color)).unwrap();
            assert_eq!(got, count, "canvas {canvas} record {i}: {:?}", item.truth);
            samples.push(CountSample {
                shape,
                color,
                prompted: count,
                detected: got,
            });
        }
        let r = CountResult::from_samples(&samples).unwrap();
        assert_eq!(r.match_ratio, 1.0);
        assert_eq!(r.avg_error, 0.0);
    }
}

fn noisy_images(n: usize, seed: u64, offset: f32) -> Vec<Tensor<f32>> {
    let mut rng = RngState::new(seed);
    (0..n)
        .map(|_| Tensor::from_fn(&[3, 16, 16], |_| offset + 0.5 * rng.standard_normal() as f32))
        .collect()
}

#[test]
fn identical_sets_have_zero_distance() {
    let a = noisy_images(300, 3, 0.0);
    let r = pixel_frechet(&a, &a).unwrap();
    assert!(r.distance.abs() < 1e-6, "{}", r.distance);
}

#[test]
fn distance_is_symmetric() {
    let a = noisy_images(300, 4, 0.0);
    let b = noisy_images(250, 5, 0.2);
    let ab = pixel_frechet(&a, &b).unwrap().distance;
    let ba = pixel_frechet(&b, &a).unwrap().distance;
    assert!((ab - ba).abs() < 1e-9 * ab.max(1.0), "{ab} vs {ba}");
    assert!(ab > 0.0);
}

#[test]
fn rank_deficient_sets_are_regularized() {
    // fewer images than pooled features
    let a = noisy_images(10, 6, 0.0);
    let b = noisy_images(10, 7, 0.0);
    let r = pixel_frechet(&a, &b).unwrap();
    assert!(r.regularized);
    assert!(r.distance.is_finite());
    assert!(pixel_frechet(&a[..1], &b).is_err());
}

#[test]
fn gaussian_samples_match_closed_form() {
    // N(mu_a, diag(va)) vs N(mu_b, diag(vb)): |dmu|^2 + sum (sqrt va - sqrt vb)^2
    let mu_a = [0.0, 1.0, -0.5, 2.0];
    let mu_b = [1.0, 0.0, 0.5, 1.0];
    let sd_a = [1.0, 0.5, 2.0, 1.5];
    let sd_b = [2.0, 1.5, 1.0, 0.5];
    let mut rng = RngState::new(8);
    let mut draw = |mu: &[f64; 4], sd: &[f64; 4]| -> Vec<Vec<f64>> {
        (0..10_000)
            .map(|_| (0..4).map(|j| mu[j] + sd[j] * rng.standard_normal()).collect())
            .collect()
    };
    let a = draw(&mu_a, &sd_a);
    let b = draw(&mu_b, &sd_b);
    let want: f64 = (0..4)
        .map(|j| (mu_a[j] - mu_b[j]).powi(2) + (sd_a[j] - sd_b[j]).powi(2))
        .sum();
    let got = frechet_from_features(&a, &b).unwrap();
    assert!(!got.regularized);
    assert!((got.distance - want).abs() < 0.05 * want, "{} vs {want}", got.distance);
}
