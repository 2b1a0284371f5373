//! Strided ancestral sampling with classifier-free guidance.

use crate::backbone::NULL_TOKEN;
use crate::error::{Error, Result};
use crate::numerics::{normal_draw, Real, RngState, Tensor};

use super::schedule::DiffusionSchedule;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Guidance {
    /// Conditional prediction only; no unconditional pass.
    Conditional,
    /// Conditional and null-caption passes mixed with scale `omega`.
    Cfg(f64),
}

/// `(1 + omega) * cond - omega * uncond`.
pub fn cfg_combine<F: Real>(cond: &Tensor<F>, uncond: &Tensor<F>, omega: f64) -> Result<Tensor<F>> {
    if cond.shape() != uncond.shape() {
        return Err(Error::dim("cfg_combine", cond.shape(), uncond.shape()));
    }
    if !(omega >= 0.0) {
        return Err(Error::Argument(format!("guidance scale {omega} must be >= 0")));
    }
    let a = F::from_f64_lossy(1.0 + omega);
    let b = F::from_f64_lossy(omega);
    let data = cond.data().iter().zip(uncond.data()).map(|(&c, &u)| a * c - b * u).collect();
    Tensor::new(cond.shape().to_vec(), data)
}

/// Per-chain random source: chain `i` of a run seeded with `seed`.
pub fn chain_rng(seed: u64, chain: usize) -> RngState {
    RngState::new(seed).derive(chain as u64)
}

/// Noise predictor: `(x_t, t, captions) -> eps_hat`.
pub trait EpsPredictor<F: Real> {
    fn predict_eps(&mut self, x_t: &Tensor<F>, t: &[usize], captions: &[Vec<u32>]) -> Result<Tensor<F>>;
}

impl<F: Real, P> EpsPredictor<F> for P
where
    P: FnMut(&Tensor<F>, &[usize], &[Vec<u32>]) -> Result<Tensor<F>>,
{
    fn predict_eps(&mut self, x_t: &Tensor<F>, t: &[usize], captions: &[Vec<u32>]) -> Result<Tensor<F>> {
        self(x_t, t, captions)
    }
}

#[derive(Clone, Debug)]
pub struct SampleSpec<'a> {
    pub captions: &'a [Vec<u32>],
    /// `[C, S, S]` of one image.
    pub image_shape: [usize; 3],
    pub n_steps: usize,
    pub guidance: Guidance,
    pub seed: u64,
    /// Chain index of the first caption, so a long run can be split into
    /// batches without changing any chain's noise.
    pub first_chain: usize,
}

/// Runs the sampler without the final clamp. Each chain starts from
/// standard normal noise drawn from [`chain_rng`] and follows
///
/// ```text
/// b      = 1 - a_bar(t) / a_bar(t_prev)
/// x_prev = (x_t - b / sqrt(1 - a_bar(t)) * eps_hat) / sqrt(1 - b) + sqrt(b) * z
/// ```
///
/// over the strided timesteps, with `z = 0` on the last step.
pub fn sample_raw<F: Real>(
    model: &mut dyn EpsPredictor<F>,
    schedule: &DiffusionSchedule,
    spec: &SampleSpec,
) -> Result<Tensor<F>> {
    let batch = spec.captions.len();
    if batch == 0 {
        return Err(Error::Argument("no captions to sample".into()));
    }
    if let Guidance::Cfg(omega) = spec.guidance {
        if !(omega >= 0.0) {
            return Err(Error::Argument(format!("guidance scale {omega} must be >= 0")));
        }
    }
    let timesteps = schedule.strided_timesteps(spec.n_steps)?;
    let per: usize = spec.image_shape.iter().product();
    let shape = [batch, spec.image_shape[0], spec.image_shape[1], spec.image_shape[2]];
    let text_len = spec.captions[0].len();
    let null: Vec<Vec<u32>> = vec![vec![NULL_TOKEN; text_len]; batch];

    let mut rngs: Vec<RngState> = (0..batch)
        .map(|b| chain_rng(spec.seed, spec.first_chain + b))
        .collect();
    let mut x: Vec<F> = Vec::with_capacity(batch * per);
    for rng in rngs.iter_mut() {
        x.extend(normal_draw::<F>(rng, &spec.image_shape).into_data());
    }
    let mut x = Tensor::new(shape.to_vec(), x)?;

    for (k, &t) in timesteps.iter().enumerate() {
        let t_prev = timesteps.get(k + 1).copied().unwrap_or(0);
        let ts = vec![t; batch];
        let cond = model.predict_eps(&x, &ts, spec.captions)?;
        let eps = match spec.guidance {
            Guidance::Conditional => cond,
            Guidance::Cfg(omega) => {
                let uncond = model.predict_eps(&x, &ts, &null)?;
                cfg_combine(&cond, &uncond, omega)?
            }
        };
        if eps.shape() != x.shape() {
            return Err(Error::dim("sampler prediction", eps.shape(), x.shape()));
        }
        let ab = schedule.alpha_bar(t)?;
        let ab_prev = schedule.alpha_bar(t_prev)?;
        let beta = 1.0 - ab / ab_prev;
        let coef = F::from_f64_lossy(beta / (1.0 - ab).sqrt());
        let inv = F::from_f64_lossy(1.0 / (1.0 - beta).sqrt());
        let sigma = F::from_f64_lossy(beta.sqrt());
        let xd = x.data_mut();
        for (i, e) in eps.data().iter().enumerate() {
            xd[i] = (xd[i] - coef * *e) * inv;
        }
        if t_prev > 0 {
            for (b, rng) in rngs.iter_mut().enumerate() {
                let z = normal_draw::<F>(rng, &spec.image_shape);
                for (v, zi) in xd[b * per..(b + 1) * per].iter_mut().zip(z.data()) {
                    *v = *v + sigma * *zi;
                }
            }
        }
    }
    Ok(x)
}

/// [`sample_raw`] clamped to the pixel range `[-1, 1]`.
pub fn sample<F: Real>(
    model: &mut dyn EpsPredictor<F>,
    schedule: &DiffusionSchedule,
    spec: &SampleSpec,
) -> Result<Tensor<F>> {
    let x = sample_raw(model, schedule, spec)?;
    Ok(x.map(|v| v.max(-F::one()).min(F::one())))
}
