use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DataError, RawSpectrum, Spectrum};
use crate::rng::Rng;

/// A uniform sampling grid in cm⁻¹.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub min: f64,
    pub max: f64,
    pub length: usize,
}

impl Default for Grid {
    fn default() -> Self {
        Self { min: 100.0, max: 4000.0, length: 1024 }
    }
}

impl Grid {
    pub fn new(min: f64, max: f64, length: usize) -> Result<Self, DataError> {
        let g = Self { min, max, length };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.length < 2 {
            return Err(DataError::DegenerateGrid(format!("length {} < 2", self.length)));
        }
        if !(self.min.is_finite() && self.max.is_finite() && self.min < self.max) {
            return Err(DataError::DegenerateGrid(format!(
                "bounds [{}, {}] are not increasing",
                self.min, self.max
            )));
        }
        Ok(())
    }

    /// Position of grid point `j`. Synthetic files are written with exactly these
    /// positions so that reading them back is lossless.
    pub fn position(&self, j: usize) -> f64 {
        self.min + (self.max - self.min) * (j as f64) / ((self.length - 1) as f64)
    }

    pub fn positions(&self) -> Vec<f64> {
        (0..self.length).map(|j| self.position(j)).collect()
    }
}

/// Linearly interpolates `raw` onto `grid`. Grid points outside the measured
/// range are set to zero. The result is not normalized.
pub fn resample(raw: &RawSpectrum, grid: &Grid) -> Result<Spectrum, DataError> {
    grid.validate()?;
    let xs = &raw.positions;
    let ys = &raw.intensities;
    let (lo, hi) = (xs[0], xs[xs.len() - 1]);
    let values = (0..grid.length)
        .map(|j| {
            let x = grid.position(j);
            if x < lo || x > hi {
                return 0.0;
            }
            let idx = xs.partition_point(|&p| p <= x);
            if xs[idx - 1] == x {
                return ys[idx - 1];
            }
            let (x0, x1, y0, y1) = (xs[idx - 1], xs[idx], ys[idx - 1], ys[idx]);
            y0 + (y1 - y0) * (x - x0) / (x1 - x0)
        })
        .collect();
    Ok(Spectrum {
        values,
        modality: raw.modality,
        class_id: raw.class_id,
        source_id: raw.source_id.clone(),
    })
}

/// Per-spectrum min-max scaling onto `[0, 1]`; a flat spectrum maps to zeros.
pub fn normalize(s: &Spectrum) -> Spectrum {
    let (min, max) = s
        .values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let values = if max > min {
        let span = max - min;
        s.values.iter().map(|&v| ((v - min) / span).clamp(0.0, 1.0)).collect()
    } else {
        vec![0.0; s.values.len()]
    };
    Spectrum { values, ..s.clone() }
}

/// Label-preserving training augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentPolicy {
    pub enabled: bool,
    /// Maximum integer shift in grid points.
    pub shift_max: usize,
    pub noise_sigma: f64,
    pub intensity_scale_range: (f64, f64),
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self { enabled: true, shift_max: 16, noise_sigma: 0.01, intensity_scale_range: (0.9, 1.1) }
    }
}

impl AugmentPolicy {
    pub fn disabled() -> Self {
        Self { enabled: false, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let (lo, hi) = self.intensity_scale_range;
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(DataError::InvalidPolicy(format!("noise_sigma {}", self.noise_sigma)));
        }
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(DataError::InvalidPolicy(format!("scale range ({lo}, {hi})")));
        }
        Ok(())
    }
}

/// Applies shift, additive noise and intensity scaling, then clips to `[0, 1]`.
pub fn augment(s: &Spectrum, policy: &AugmentPolicy, rng: &mut Rng) -> Spectrum {
    if !policy.enabled {
        return s.clone();
    }
    let n = s.values.len() as isize;
    let shift = if policy.shift_max > 0 {
        let m = policy.shift_max as i64;
        rng.random_range(-m..=m) as isize
    } else {
        0
    };
    let mut values: Vec<f64> = (0..n)
        .map(|j| {
            let src = j - shift;
            if (0..n).contains(&src) {
                s.values[src as usize]
            } else {
                0.0
            }
        })
        .collect();
    if policy.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, policy.noise_sigma).expect("validated sigma");
        for v in &mut values {
            *v += normal.sample(rng);
        }
    }
    let (lo, hi) = policy.intensity_scale_range;
    let scale = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    for v in &mut values {
        *v = (*v * scale).clamp(0.0, 1.0);
    }
    Spectrum { values, ..s.clone() }
}
