use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

/// Linear beta schedule with cumulative products, indexed by `t = 1..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<DiffusionSchedule> {
    if steps == 0 {
        return Err(Error::Argument("schedule needs at least one step".into()));
    }
    if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
        return Err(Error::Argument(format!(
            "betas must satisfy 0 < start < end < 1, got {beta_start} and {beta_end}"
        )));
    }
    let betas: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let mut alpha_bars = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for b in &betas {
        acc *= 1.0 - b;
        alpha_bars.push(acc);
    }
    Ok(DiffusionSchedule { betas, alpha_bars })
}

impl DiffusionSchedule {
    pub fn from_config(c: &ScheduleConfig) -> Result<Self> {
        make_schedule(c.steps, c.beta_start, c.beta_end)
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Argument(format!(
                "timestep {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.betas[t - 1])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(1.0 - self.beta(t)?)
    }

    /// Cumulative product of alphas, with `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        self.check(t)?;
        Ok(self.alpha_bars[t - 1])
    }

    /// `sqrt(a_bar) x0 + sqrt(1 - a_bar) eps` for a single item.
    pub fn q_sample<F: Real>(&self, x0: &Tensor<F>, t: usize, eps: &Tensor<F>) -> Result<Tensor<F>> {
        if x0.shape() != eps.shape() {
            return Err(Error::dim("q_sample", x0.shape(), eps.shape()));
        }
        self.check(t)?;
        let ab = self.alpha_bar(t)?;
        let (a, b) = (F::from_f64_lossy(ab.sqrt()), F::from_f64_lossy((1.0 - ab).sqrt()));
        let data = x0.data().iter().zip(eps.data()).map(|(&x, &e)| a * x + b * e).collect();
        Tensor::new(x0.shape().to_vec(), data)
    }

    /// Batched [`DiffusionSchedule::q_sample`] with one timestep per leading index.
    pub fn q_sample_batch<F: Real>(
        &self,
        x0: &Tensor<F>,
        t: &[usize],
        eps: &Tensor<F>,
    ) -> Result<Tensor<F>> {
        if x0.shape() != eps.shape() || x0.shape().first() != Some(&t.len()) {
            return Err(Error::dim("q_sample batch", x0.shape(), eps.shape()));
        }
        let per = x0.numel() / t.len().max(1);
        let mut out = Vec::with_capacity(x0.numel());
        for (i, &ti) in t.iter().enumerate() {
            self.check(ti)?;
            let ab = self.alpha_bar(ti)?;
            let (a, b) = (F::from_f64_lossy(ab.sqrt()), F::from_f64_lossy((1.0 - ab).sqrt()));
            let range = i * per..(i + 1) * per;
            out.extend(
                x0.data()[range.clone()]
                    .iter()
                    .zip(&eps.data()[range])
                    .map(|(&x, &e)| a * x + b * e),
            );
        }
        Tensor::new(x0.shape().to_vec(), out)
    }

    /// Score of the noised marginal implied by a noise prediction:
    /// `-eps / sqrt(1 - a_bar)`.
    pub fn score_from_eps<F: Real>(&self, eps_hat: &Tensor<F>, t: usize) -> Result<Tensor<F>> {
        self.check(t)?;
        let s = F::from_f64_lossy(-1.0 / (1.0 - self.alpha_bar(t)?).sqrt());
        Ok(eps_hat.map(|e| e * s))
    }

    pub fn eps_from_score<F: Real>(&self, score: &Tensor<F>, t: usize) -> Result<Tensor<F>> {
        self.check(t)?;
        let s = F::from_f64_lossy(-(1.0 - self.alpha_bar(t)?).sqrt());
        Ok(score.map(|e| e * s))
    }

    /// Visited timesteps of an `n`-step strided sampler: `T, T - k, ...`
    /// with `k = T / n`.
    pub fn strided_timesteps(&self, n: usize) -> Result<Vec<usize>> {
        if n == 0 || n > self.steps() {
            return Err(Error::Argument(format!(
                "sampling steps {n} must be in 1..={}",
                self.steps()
            )));
        }
        let stride = self.steps() / n;
        Ok((0..n).map(|k| self.steps() - k * stride).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default() -> DiffusionSchedule {
        DiffusionSchedule::from_config(&ScheduleConfig::default()).unwrap()
    }

    #[test]
    fn first_alpha_bar() {
        assert!((default().alpha_bar(1).unwrap() - 0.9999).abs() < 1e-15);
        let one = make_schedule(1, 0.3, 0.5).unwrap();
        assert_eq!(one.alpha_bar(1).unwrap(), 0.7);
    }

    #[test]
    fn last_alpha_bar_is_small() {
        let s = default();
        let direct: f64 = (1..=1000).map(|t| 1.0 - s.beta(t).unwrap()).product();
        assert!((s.alpha_bar(1000).unwrap() - direct).abs() < 1e-15);
        assert!(direct < 0.01);
    }

    #[test]
    fn monotone() {
        let s = default();
        for t in 1..1000 {
            assert!(s.beta(t).unwrap() < s.beta(t + 1).unwrap());
            assert!(s.alpha_bar(t).unwrap() > s.alpha_bar(t + 1).unwrap());
        }
        assert_eq!(s.alpha_bar(0).unwrap(), 1.0);
    }

    #[test]
    fn invalid_ranges() {
        assert!(make_schedule(0, 1e-4, 0.02).is_err());
        assert!(make_schedule(10, 0.02, 1e-4).is_err());
        assert!(make_schedule(10, 0.0, 0.5).is_err());
        assert!(make_schedule(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn q_sample_cases() {
        let s = default();
        let x0 = Tensor::<f64>::from_fn(&[4], |i| i as f64 - 1.5);
        let zero = Tensor::zeros(&[4]);
        let xt = s.q_sample(&x0, 300, &zero).unwrap();
        let k = s.alpha_bar(300).unwrap().sqrt();
        for (a, b) in xt.data().iter().zip(x0.data()) {
            assert_eq!(*a, k * b);
        }
        let eps = Tensor::full(&[4], 1.0);
        let x1 = s.q_sample(&x0, 1, &eps).unwrap();
        for (a, b) in x1.data().iter().zip(x0.data()) {
            assert!((a - (0.9999f64.sqrt() * b + 0.01)).abs() < 1e-12);
        }
        assert!(s.q_sample(&x0, 0, &eps).is_err());
        assert!(s.q_sample(&x0, 1001, &eps).is_err());
    }

    #[test]
    fn score_conversion() {
        let s = make_schedule(4, 0.1, 0.2).unwrap();
        let zero = Tensor::<f64>::zeros(&[3]);
        assert!(s.score_from_eps(&zero, 2).unwrap().data().iter().all(|&v| v == 0.0));

        // a_bar = 0.75 exactly at t = 1
        let q = make_schedule(2, 0.25, 0.5).unwrap();
        let one = Tensor::<f64>::full(&[1], 1.0);
        assert!((q.score_from_eps(&one, 1).unwrap().data()[0] + 2.0).abs() < 1e-12);

        let e = Tensor::<f64>::from_fn(&[5], |i| i as f64 * 0.3 - 0.7);
        let back = s.eps_from_score(&s.score_from_eps(&e, 3).unwrap(), 3).unwrap();
        for (a, b) in back.data().iter().zip(e.data()) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn stride() {
        let s = default();
        let ts = s.strided_timesteps(50).unwrap();
        assert_eq!(ts.len(), 50);
        assert_eq!(ts[0], 1000);
        assert_eq!(ts[1], 980);
        assert_eq!(*ts.last().unwrap(), 20);
        assert_eq!(s.strided_timesteps(1000).unwrap().last(), Some(&1));
        assert!(s.strided_timesteps(1001).is_err());
    }
}
