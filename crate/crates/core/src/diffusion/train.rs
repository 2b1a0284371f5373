//! Noise-prediction training with caption dropout and AdamW.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backbone::{checkpoint, Denoiser, NULL_TOKEN};
use crate::data::CaptionedImage;
use crate::error::{Error, Result};
use crate::numerics::{normal_draw, Real, RngState, Tape, Tensor};

use super::schedule::DiffusionSchedule;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub warmup: usize,
    pub weight_decay: f64,
    pub betas: [f64; 2],
    pub adam_eps: f64,
    pub batch_size: usize,
    /// Probability of replacing a caption by the null caption.
    pub cfg_drop: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 2e-4,
            warmup: 5000,
            weight_decay: 0.03,
            betas: [0.9, 0.9],
            adam_eps: 1e-8,
            batch_size: 256,
            cfg_drop: 0.1,
        }
    }
}

impl TrainConfig {
    /// Learning rate for the `step`-th update (1-based): linear warmup, then
    /// constant.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup == 0 {
            return self.lr;
        }
        self.lr * (step as f64 / self.warmup as f64).min(1.0)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.cfg_drop) {
            return bad("cfg_drop must lie in [0, 1]");
        }
        if !self.betas.iter().all(|b| (0.0..1.0).contains(b)) {
            return bad("adam betas must lie in [0, 1)");
        }
        if self.weight_decay < 0.0 || !(self.adam_eps > 0.0) {
            return bad("weight_decay must be >= 0 and adam_eps > 0");
        }
        Ok(())
    }
}

/// Decoupled-weight-decay Adam. Decay applies to matrices only; biases,
/// norm gains and 1-d tensors are left alone.
#[derive(Clone, Debug)]
pub struct AdamW {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: u64,
}

impl AdamW {
    pub fn new(shapes: &[&[usize]]) -> Self {
        let zeros = |s: &&[usize]| vec![0.0f32; s.iter().product()];
        AdamW {
            m: shapes.iter().map(zeros).collect(),
            v: shapes.iter().map(zeros).collect(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn moments(&self) -> (&[Vec<f32>], &[Vec<f32>]) {
        (&self.m, &self.v)
    }

    pub fn step(
        &mut self,
        params: &mut [&mut Tensor<f32>],
        grads: &[Vec<f32>],
        lr: f64,
        cfg: &TrainConfig,
    ) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::dim("adamw", &[params.len(), grads.len()], &[self.m.len()]));
        }
        self.t += 1;
        let [b1, b2] = cfg.betas;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let step = (lr / bc1) as f32;
        let inv_bc2 = (1.0 / bc2) as f32;
        let (b1, b2, eps) = (b1 as f32, b2 as f32, cfg.adam_eps as f32);
        let decay = (1.0 - lr * cfg.weight_decay) as f32;
        for (i, p) in params.iter_mut().enumerate() {
            let g = &grads[i];
            if g.len() != p.numel() {
                return Err(Error::dim("adamw grad", &[g.len()], p.shape()));
            }
            let decays = p.ndim() >= 2;
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                if decays {
                    *w *= decay;
                }
                *w -= step * m[j] / ((v[j] * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Noised inputs and regression targets for one batch.
#[derive(Clone, Debug)]
pub struct NoisedBatch<F: Real> {
    pub x_t: Tensor<F>,
    pub t: Vec<usize>,
    pub eps: Tensor<F>,
    pub tokens: Vec<Vec<u32>>,
    pub dropped: Vec<bool>,
}

/// Draws per-item timesteps, caption dropout and noise, in that order per
/// item.
pub fn noise_batch<F: Real>(
    x0: &Tensor<F>,
    tokens: &[Vec<u32>],
    schedule: &DiffusionSchedule,
    cfg_drop: f64,
    rng: &mut RngState,
) -> Result<NoisedBatch<F>> {
    let batch = tokens.len();
    if batch == 0 || x0.shape().first() != Some(&batch) {
        return Err(Error::dim("noise batch", x0.shape(), &[batch]));
    }
    let item_shape = &x0.shape()[1..];
    let mut t = Vec::with_capacity(batch);
    let mut dropped = Vec::with_capacity(batch);
    let mut eps = Vec::with_capacity(x0.numel());
    let mut toks = Vec::with_capacity(batch);
    for row in tokens {
        t.push(rng.int_inclusive(1, schedule.steps()));
        let drop = rng.bernoulli(cfg_drop);
        dropped.push(drop);
        toks.push(if drop { vec![NULL_TOKEN; row.len()] } else { row.clone() });
        eps.extend(normal_draw::<F>(rng, item_shape).into_data());
    }
    let eps = Tensor::new(x0.shape().to_vec(), eps)?;
    let x_t = schedule.q_sample_batch(x0, &t, &eps)?;
    Ok(NoisedBatch {
        x_t,
        t,
        eps,
        tokens: toks,
        dropped,
    })
}

/// Mean squared error between a prediction and the batch noise.
pub fn prediction_loss<F: Real>(pred: &Tensor<F>, batch: &NoisedBatch<F>) -> Result<f64> {
    if pred.shape() != batch.eps.shape() {
        return Err(Error::dim("prediction loss", pred.shape(), batch.eps.shape()));
    }
    let n = pred.numel().max(1) as f64;
    Ok(pred
        .data()
        .iter()
        .zip(batch.eps.data())
        .map(|(p, e)| (p.as_f64() - e.as_f64()).powi(2))
        .sum::<f64>()
        / n)
}

/// Loss and gradients aligned with [`Denoiser::tensors`].
pub fn training_loss<F: Real>(
    denoiser: &Denoiser<F>,
    batch: &NoisedBatch<F>,
) -> Result<(F, Vec<Vec<F>>)> {
    let mut tape = Tape::new();
    let (out, vars, _) =
        denoiser.predict_on_tape(&mut tape, &batch.x_t, &batch.t, &batch.tokens, true, false)?;
    let loss = tape.mse(out, &batch.eps)?;
    let value = tape.value(loss).data()[0];
    let mut grads = tape.backward(loss)?;
    let tensors = denoiser.tensors();
    let g = vars
        .iter()
        .zip(tensors)
        .map(|(v, t)| grads.take(*v).unwrap_or_else(|| vec![F::zero(); t.numel()]))
        .collect();
    Ok((value, g))
}

/// Stacks the chosen records into `[B, C, S, S]` plus token rows.
pub fn collate(data: &[CaptionedImage], indices: &[usize]) -> Result<(Tensor<f32>, Vec<Vec<u32>>)> {
    let first = data
        .get(*indices.first().ok_or_else(|| Error::Argument("empty batch".into()))?)
        .ok_or_else(|| Error::Argument("batch index out of range".into()))?;
    let item = first.pixels.shape().to_vec();
    let mut px = Vec::with_capacity(indices.len() * first.pixels.numel());
    let mut tokens = Vec::with_capacity(indices.len());
    for &i in indices {
        let rec = data
            .get(i)
            .ok_or_else(|| Error::Argument(format!("batch index {i} out of range")))?;
        if rec.pixels.shape() != item.as_slice() {
            return Err(Error::dim("collate", rec.pixels.shape(), &item));
        }
        px.extend_from_slice(rec.pixels.data());
        tokens.push(rec.tokens.clone());
    }
    let mut shape = vec![indices.len()];
    shape.extend(item);
    Ok((Tensor::new(shape, px)?, tokens))
}

pub struct TrainState {
    pub denoiser: Denoiser<f32>,
    pub opt: AdamW,
    pub step: u64,
    pub rng: RngState,
}

impl TrainState {
    pub fn new(denoiser: Denoiser<f32>, seed: u64) -> Self {
        let shapes: Vec<&[usize]> = denoiser.tensors().iter().map(|t| t.shape()).collect();
        let opt = AdamW::new(&shapes);
        TrainState {
            denoiser,
            opt,
            step: 0,
            rng: RngState::with_stream(seed, 0x7472_6169_6e),
        }
    }

    pub fn param_norm(&self) -> f64 {
        self.denoiser.tensors().iter().map(|t| t.sq_norm()).sum::<f64>().sqrt()
    }
}

/// Observer invoked after every optimizer step.
pub trait TrainCallback {
    fn on_step(&mut self, state: &TrainState, loss: f64, lr: f64) -> Result<()>;
}

impl<C: FnMut(&TrainState, f64, f64) -> Result<()>> TrainCallback for C {
    fn on_step(&mut self, state: &TrainState, loss: f64, lr: f64) -> Result<()> {
        self(state, loss, lr)
    }
}

/// One update on a uniformly drawn batch. Returns the pre-update loss.
pub fn train_step(
    state: &mut TrainState,
    data: &[CaptionedImage],
    schedule: &DiffusionSchedule,
    cfg: &TrainConfig,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Argument("training set is empty".into()));
    }
    let indices: Vec<usize> = (0..cfg.batch_size)
        .map(|_| state.rng.int_inclusive(0, data.len() - 1))
        .collect();
    let (x0, tokens) = collate(data, &indices)?;
    let batch = noise_batch(&x0, &tokens, schedule, cfg.cfg_drop, &mut state.rng)?;
    let (loss, grads) = training_loss(&state.denoiser, &batch)?;
    let lr = cfg.lr_at(state.step + 1);
    let finite = loss.is_finite() && grads.iter().all(|g| g.iter().all(|v| v.is_finite()));
    if !finite {
        return Err(Error::NonFinite {
            step: state.step + 1,
            lr,
            param_norm: state.param_norm(),
        });
    }
    let mut params = state.denoiser.tensors_mut();
    state.opt.step(&mut params, &grads, lr, cfg)?;
    state.step += 1;
    Ok(loss as f64)
}

pub fn train_loop(
    mut state: TrainState,
    data: &[CaptionedImage],
    schedule: &DiffusionSchedule,
    cfg: &TrainConfig,
    n_steps: u64,
    callbacks: &mut [&mut dyn TrainCallback],
) -> Result<TrainState> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Argument("training set is empty".into()));
    }
    for _ in 0..n_steps {
        let lr = cfg.lr_at(state.step + 1);
        let loss = train_step(&mut state, data, schedule, cfg)?;
        for cb in callbacks.iter_mut() {
            cb.on_step(&state, loss, lr)?;
        }
    }
    Ok(state)
}

/// Append-only CSV of `step,loss,lr,wall_clock`.
pub struct MetricLog {
    path: PathBuf,
    out: BufWriter<File>,
    start: Instant,
}

impl MetricLog {
    pub const HEADER: &'static str = "step,loss,lr,wall_clock";

    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        writeln!(out, "{}", Self::HEADER).map_err(|e| Error::io(path, e))?;
        Ok(MetricLog {
            path: path.to_path_buf(),
            out,
            start: Instant::now(),
        })
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

impl TrainCallback for MetricLog {
    fn on_step(&mut self, state: &TrainState, loss: f64, lr: f64) -> Result<()> {
        let secs = self.start.elapsed().as_secs_f64();
        writeln!(self.out, "{},{loss:.8},{lr:.6e},{secs:.3}", state.step)
            .map_err(|e| Error::io(&self.path, e))
    }
}

impl Drop for MetricLog {
    fn drop(&mut self) {
        let _ = self.out.flush();
    }
}

/// Saves `step_<n>.ckpt` every `every` steps.
pub struct PeriodicCheckpoint {
    pub dir: PathBuf,
    pub every: u64,
}

impl TrainCallback for PeriodicCheckpoint {
    fn on_step(&mut self, state: &TrainState, _: f64, _: f64) -> Result<()> {
        if self.every > 0 && state.step % self.every == 0 {
            let path = self.dir.join(format!("step_{}.ckpt", state.step));
            checkpoint::save(&path, &state.denoiser)?;
        }
        Ok(())
    }
}

/// Exponential moving average of a loss sequence, seeded with the first value.
pub fn smoothed(losses: &[f64], decay: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(losses.len());
    let mut acc = None;
    for &l in losses {
        let v = match acc {
            None => l,
            Some(a) => decay * a + (1.0 - decay) * l,
        };
        acc = Some(v);
        out.push(v);
    }
    out
}
