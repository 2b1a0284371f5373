//! Batched generation, count evaluation and guidance-scale sweeps.

use std::fmt::Write as _;

use serde::Serialize;

use crate::backbone::Denoiser;
use crate::data::{caption, tokenize, Color, ShapeKind};
use crate::diffusion::{sample, DiffusionSchedule, Guidance, SampleSpec};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

use super::counter::count_shapes;
use super::frechet::pixel_frechet;
use super::metrics::{avg_error, match_ratio, CountResult, CountSample};

/// `(shape, color, count)` plus the caption tokens.
pub type Prompt = ((ShapeKind, Color, usize), Vec<u32>);

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenerateSpec {
    pub n_steps: usize,
    pub guidance: Guidance,
    pub seed: u64,
    /// Chains per sampler call.
    pub batch: usize,
}

/// Samples one image per caption, `spec.batch` chains at a time. Chain
/// `i` always uses the same noise whatever the batch size.
pub fn generate(
    denoiser: &Denoiser<f32>,
    schedule: &DiffusionSchedule,
    captions: &[Vec<u32>],
    spec: &GenerateSpec,
) -> Result<Vec<Tensor<f32>>> {
    if spec.batch == 0 {
        return Err(Error::Argument("batch must be positive".into()));
    }
    let cfg = denoiser.config();
    let shape = [cfg.img_channels, cfg.img_size, cfg.img_size];
    let per: usize = shape.iter().product();
    let mut predict = |x: &Tensor<f32>, t: &[usize], c: &[Vec<u32>]| denoiser.predict(x, t, c, false).map(|p| p.0);
    let mut out = Vec::with_capacity(captions.len());
    for (k, chunk) in captions.chunks(spec.batch).enumerate() {
        let s = SampleSpec {
            captions: chunk,
            image_shape: shape,
            n_steps: spec.n_steps,
            guidance: spec.guidance,
            seed: spec.seed,
            first_chain: k * spec.batch,
        };
        let x = sample(&mut predict, schedule, &s)?;
        for img in x.data().chunks(per) {
            out.push(Tensor::new(shape.to_vec(), img.to_vec())?);
        }
    }
    Ok(out)
}

/// Every `(shape, color, count)` combination with `count` in `counts`,
/// each repeated `repeats` times.
pub fn prompt_grid(counts: &[usize], repeats: usize, text_len: usize) -> Result<Vec<Prompt>> {
    let mut out = Vec::new();
    for shape in ShapeKind::ALL {
        for color in Color::ALL {
            for &n in counts {
                let tokens = tokenize(&caption(n, color, shape)?, text_len)?;
                for _ in 0..repeats {
                    out.push(((shape, color, n), tokens.clone()));
                }
            }
        }
    }
    Ok(out)
}

pub fn evaluate_counts(images: &[Tensor<f32>], prompts: &[Prompt]) -> Result<Vec<CountSample>> {
    if images.len() != prompts.len() {
        return Err(Error::dim("evaluate_counts", &[images.len()], &[prompts.len()]));
    }
    images
        .iter()
        .zip(prompts)
        .map(|(img, &((shape, color, prompted), _))| {
            Ok(CountSample {
                shape,
                color,
                prompted,
                detected: count_shapes(img, (shape, color))?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub omega: f64,
    /// `None` when either set has fewer than two images.
    pub frechet: Option<f64>,
    pub regularized: bool,
    pub match_ratio: f64,
    pub avg_error: f64,
}

/// Samples the prompt set once per guidance scale with the same seed and
/// scores counts and, against `reference`, the pixel Fréchet distance.
pub fn cfg_sweep(
    denoiser: &Denoiser<f32>,
    schedule: &DiffusionSchedule,
    omegas: &[f64],
    prompts: &[Prompt],
    reference: &[Tensor<f32>],
    spec: &GenerateSpec,
) -> Result<(Vec<SweepRow>, Vec<CountResult>)> {
    let captions: Vec<Vec<u32>> = prompts.iter().map(|p| p.1.clone()).collect();
    let mut rows = Vec::with_capacity(omegas.len());
    let mut results = Vec::with_capacity(omegas.len());
    for &omega in omegas {
        let s = GenerateSpec {
            guidance: Guidance::Cfg(omega),
            ..*spec
        };
        let images = generate(denoiser, schedule, &captions, &s)?;
        let samples = evaluate_counts(&images, prompts)?;
        let (frechet, regularized) = if images.len() >= 2 && reference.len() >= 2 {
            let f = pixel_frechet(&images, reference)?;
            (Some(f.distance), f.regularized)
        } else {
            log::warn!("skipping Fréchet distance at omega {omega}: fewer than 2 images");
            (None, false)
        };
        rows.push(SweepRow {
            omega,
            frechet,
            regularized,
            match_ratio: match_ratio(&samples)?,
            avg_error: avg_error(&samples)?,
        });
        results.push(CountResult::from_samples(&samples)?);
    }
    Ok((rows, results))
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("omega,frechet,match_ratio,avg_error\n");
    for r in rows {
        let f = r.frechet.map(|v| format!("{v:.9e}")).unwrap_or_default();
        let _ = writeln!(s, "{},{},{:.6},{:.6}", r.omega, f, r.match_ratio, r.avg_error);
    }
    s
}

/// Long form: one line per `(shape, color, count)` group.
pub fn count_groups_csv(result: &CountResult) -> String {
    let mut s = String::from("shape,color,count,n,mean_detected,avg_error,match_ratio\n");
    for g in &result.groups {
        let _ = writeln!(
            s,
            "{},{},{},{},{:.6},{:.6},{:.6}",
            g.shape.singular(),
            g.color.name(),
            g.prompted,
            g.n,
            g.mean_detected,
            g.avg_error,
            g.match_ratio
        );
    }
    s
}

/// Object by prompted count, each cell the mean detected count.
pub fn count_table_csv(result: &CountResult) -> String {
    let mut counts: Vec<usize> = result.groups.iter().map(|g| g.prompted).collect();
    counts.sort_unstable();
    counts.dedup();
    let mut s = String::from("object");
    for c in &counts {
        let _ = write!(s, ",{c}");
    }
    s.push('\n');
    for shape in ShapeKind::ALL {
        for color in Color::ALL {
            let row: Vec<_> = result
                .groups
                .iter()
                .filter(|g| g.shape == shape && g.color == color)
                .collect();
            if row.is_empty() {
                continue;
            }
            let _ = write!(s, "{} {}", color.name(), shape.plural());
            for c in &counts {
                match row.iter().find(|g| g.prompted == *c) {
                    Some(g) => {
                        let _ = write!(s, ",{:.3}", g.mean_detected);
                    }
                    None => s.push(','),
                }
            }
            s.push('\n');
        }
    }
    s
}
