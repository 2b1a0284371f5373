//! Count alignment metrics.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::data::{Color, ShapeKind};
use crate::error::{Error, Result};

/// One evaluated sample: what the caption asked for and what was found.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct CountSample {
    pub shape: ShapeKind,
    pub color: Color,
    pub prompted: usize,
    pub detected: usize,
}

impl CountSample {
    pub fn error(&self) -> usize {
        self.prompted.abs_diff(self.detected)
    }
}

fn nonempty(samples: &[CountSample]) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Argument("no samples to score".into()));
    }
    Ok(())
}

/// Mean absolute difference between prompted and detected counts.
pub fn avg_error(samples: &[CountSample]) -> Result<f64> {
    nonempty(samples)?;
    Ok(samples.iter().map(|s| s.error() as f64).sum::<f64>() / samples.len() as f64)
}

/// Fraction of samples whose detected count equals the prompted count.
pub fn match_ratio(samples: &[CountSample]) -> Result<f64> {
    nonempty(samples)?;
    Ok(samples.iter().filter(|s| s.error() == 0).count() as f64 / samples.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CountGroup {
    pub shape: ShapeKind,
    pub color: Color,
    pub prompted: usize,
    pub n: usize,
    pub mean_detected: f64,
    pub avg_error: f64,
    pub match_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CountResult {
    pub n: usize,
    pub avg_error: f64,
    pub match_ratio: f64,
    /// Sorted by `(shape, color, prompted)`.
    pub groups: Vec<CountGroup>,
}

impl CountResult {
    pub fn from_samples(samples: &[CountSample]) -> Result<Self> {
        let mut by: BTreeMap<(ShapeKind, Color, usize), Vec<CountSample>> = BTreeMap::new();
        for s in samples {
            by.entry((s.shape, s.color, s.prompted)).or_default().push(*s);
        }
        let mut groups = Vec::with_capacity(by.len());
        for ((shape, color, prompted), g) in by {
            groups.push(CountGroup {
                shape,
                color,
                prompted,
                n: g.len(),
                mean_detected: g.iter().map(|s| s.detected as f64).sum::<f64>() / g.len() as f64,
                avg_error: avg_error(&g)?,
                match_ratio: match_ratio(&g)?,
            });
        }
        Ok(CountResult {
            n: samples.len(),
            avg_error: avg_error(samples)?,
            match_ratio: match_ratio(samples)?,
            groups,
        })
    }

    /// Samples restricted to prompted counts in `counts`.
    pub fn restricted(samples: &[CountSample], counts: &[usize]) -> Result<Self> {
        let kept: Vec<CountSample> = samples
            .iter()
            .copied()
            .filter(|s| counts.contains(&s.prompted))
            .collect();
        Self::from_samples(&kept)
    }
}
