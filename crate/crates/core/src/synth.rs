//! Paired-modality synthetic spectra with a controllable modality gap.
//!
//! Each class is a set of Gaussian peaks on the unit interval. Modality `M1`
//! renders the peaks as they are. Modality `M2` renders them through a
//! dataset-wide monotone position warp, per-peak log-normal amplitude
//! multipliers and a smooth baseline, all scaled by `gap_level`.

use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{normalize, Modality, Spectrum};
use crate::rng::{self, Rng};

const MIN_PEAKS: usize = 3;
const MAX_PEAKS: usize = 12;
const MIN_PEAK_SEPARATION: f64 = 0.01;
const WARP_KNOTS: usize = 6;
const WARP_MAX_DISPLACEMENT: f64 = 0.06;
const AMPLITUDE_LOG_VARIANCE: f64 = 0.5;
const BASELINE_HEIGHT: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassTemplate {
    pub class_id: u32,
    /// Fractional grid coordinates in `(0, 1)`.
    pub peak_positions: Vec<f64>,
    pub peak_widths: Vec<f64>,
    pub peak_amplitudes: Vec<f64>,
}

impl ClassTemplate {
    pub fn is_valid(&self) -> bool {
        let n = self.peak_positions.len();
        let mut sorted = self.peak_positions.clone();
        sorted.sort_by(f64::total_cmp);
        n >= MIN_PEAKS
            && self.peak_widths.len() == n
            && self.peak_amplitudes.len() == n
            && self.peak_positions.iter().all(|p| *p > 0.0 && *p < 1.0)
            && sorted.windows(2).all(|w| w[0] < w[1])
            && self.peak_widths.iter().all(|w| *w > 0.0)
            && self.peak_amplitudes.iter().all(|a| *a > 0.0)
    }
}

/// Draws the peak set of `class_id`; deterministic per `(class_id, seed)`.
pub fn gen_class_template(class_id: u32, seed: u64) -> ClassTemplate {
    let mut rng = rng::stream(seed, "template", u64::from(class_id));
    let n = rng.random_range(MIN_PEAKS..=MAX_PEAKS);
    let mut positions: Vec<f64> = Vec::with_capacity(n);
    while positions.len() < n {
        let p = rng.random_range(0.05..0.95);
        if positions.iter().all(|q: &f64| (q - p).abs() >= MIN_PEAK_SEPARATION) {
            positions.push(p);
        }
    }
    let widths = (0..n).map(|_| rng.random_range(0.003..0.015)).collect();
    let amplitudes = (0..n).map(|_| rng.random_range(0.2..1.0)).collect();
    ClassTemplate { class_id, peak_positions: positions, peak_widths: widths, peak_amplitudes: amplitudes }
}

/// The systematic difference between the two renderings of a class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapModel {
    pub gap_level: f64,
    pub noise_sigma: f64,
    /// Knots `(x, y)` of the piecewise-linear position warp, strictly increasing in both.
    pub warp_knots: Vec<(f64, f64)>,
    pub baseline_phase: f64,
    pub baseline_frequency: f64,
    pub seed: u64,
}

impl GapModel {
    pub fn new(gap_level: f64, noise_sigma: f64, seed: u64) -> Self {
        let gap_level = gap_level.clamp(0.0, 1.0);
        let mut rng = rng::stream(seed, "gap", 0);
        let warp_knots = (0..WARP_KNOTS)
            .map(|i| {
                let x = i as f64 / (WARP_KNOTS - 1) as f64;
                let d: f64 = rng.random_range(-WARP_MAX_DISPLACEMENT..WARP_MAX_DISPLACEMENT);
                let interior = i > 0 && i + 1 < WARP_KNOTS;
                (x, if interior { x + gap_level * d } else { x })
            })
            .collect();
        Self {
            gap_level,
            noise_sigma,
            warp_knots,
            baseline_phase: rng.random_range(0.0..1.0),
            baseline_frequency: rng.random_range(0.5..1.5),
            seed,
        }
    }

    pub fn position_warp(&self, p: f64) -> f64 {
        if self.gap_level == 0.0 {
            return p;
        }
        let k = &self.warp_knots;
        let i = k.partition_point(|&(x, _)| x <= p).clamp(1, k.len() - 1);
        let ((x0, y0), (x1, y1)) = (k[i - 1], k[i]);
        y0 + (y1 - y0) * (p - x0) / (x1 - x0)
    }

    /// Per-peak multipliers for one class, `exp(σ z)` with `σ² ∝ gap_level`.
    pub fn amplitude_remap(&self, class_id: u32, n_peaks: usize) -> Vec<f64> {
        if self.gap_level == 0.0 {
            return vec![1.0; n_peaks];
        }
        let sigma = (AMPLITUDE_LOG_VARIANCE * self.gap_level).sqrt();
        let mut rng = rng::stream(self.seed, "amplitude", u64::from(class_id));
        (0..n_peaks)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                (sigma * z).exp()
            })
            .collect()
    }

    /// Smooth nonnegative additive baseline at fractional coordinate `x`.
    pub fn baseline(&self, modality: Modality, x: f64) -> f64 {
        match modality {
            Modality::M1 => 0.0,
            Modality::M2 => {
                let phase = 2.0 * PI * (self.baseline_frequency * x + self.baseline_phase);
                self.gap_level * BASELINE_HEIGHT * 0.5 * (1.0 + phase.sin())
            }
        }
    }
}

/// Renders `template` in `modality`, adds noise from `rng` and normalizes.
/// The returned spectrum has an empty `source_id`.
pub fn render(
    template: &ClassTemplate,
    modality: Modality,
    gap: &GapModel,
    length: usize,
    rng: &mut Rng,
) -> Spectrum {
    let n = template.peak_positions.len();
    let (positions, amplitudes): (Vec<f64>, Vec<f64>) = match modality {
        Modality::M1 => (template.peak_positions.clone(), template.peak_amplitudes.clone()),
        Modality::M2 => {
            let remap = gap.amplitude_remap(template.class_id, n);
            (
                template.peak_positions.iter().map(|&p| gap.position_warp(p)).collect(),
                template.peak_amplitudes.iter().zip(remap).map(|(a, m)| a * m).collect(),
            )
        }
    };
    let denom = (length.max(2) - 1) as f64;
    let mut values: Vec<f64> = (0..length)
        .map(|j| {
            let x = j as f64 / denom;
            let peaks: f64 = (0..n)
                .map(|i| {
                    let d = (x - positions[i]) / template.peak_widths[i];
                    amplitudes[i] * (-0.5 * d * d).exp()
                })
                .sum();
            peaks + gap.baseline(modality, x)
        })
        .collect();
    if gap.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, gap.noise_sigma).expect("finite sigma");
        for v in &mut values {
            *v += normal.sample(rng);
        }
    }
    normalize(&Spectrum { values, modality, class_id: template.class_id, source_id: String::new() })
}

/// Spectra per class for one modality: a fixed count or a randomized count
/// `1 + Poisson(mean - 1)` with the given mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerClass {
    Fixed(usize),
    Mean { mean: f64 },
}

impl PerClass {
    fn draw(&self, rng: &mut Rng) -> usize {
        match *self {
            PerClass::Fixed(n) => n,
            PerClass::Mean { mean } if mean > 1.0 => {
                let extra: f64 = Poisson::new(mean - 1.0).expect("positive rate").sample(rng);
                1 + extra as usize
            }
            PerClass::Mean { .. } => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_classes: usize,
    pub per_class_m1: PerClass,
    pub per_class_m2: PerClass,
    pub gap_level: f64,
    pub noise_sigma: f64,
    pub length: usize,
    pub seed: u64,
}

impl SynthConfig {
    /// Shape of the 360-class Raman/IR corpus: about 3.86 Raman and 1.73 IR spectra per class.
    pub fn cmrruff_like(seed: u64) -> Self {
        Self {
            n_classes: 360,
            per_class_m1: PerClass::Mean { mean: 3.86 },
            per_class_m2: PerClass::Mean { mean: 1.73 },
            gap_level: 0.6,
            noise_sigma: 0.01,
            length: 1024,
            seed,
        }
    }
}

/// Source id of the `i`-th spectrum of `modality` in `class_id`.
pub fn source_id(class_id: u32, modality: Modality, i: usize) -> String {
    format!("c{class_id:04}_{}_{i:02}", modality.to_string().to_lowercase())
}

/// Generates a labeled paired dataset. Classes are `0..n_classes`; every
/// spectrum gets independent noise.
///
/// Panics if `n_classes < 10`.
pub fn gen_dataset(cfg: &SynthConfig) -> Vec<Spectrum> {
    assert!(cfg.n_classes >= 10, "synthetic datasets need at least 10 classes");
    let gap = GapModel::new(cfg.gap_level, cfg.noise_sigma, cfg.seed);
    let mut out = Vec::new();
    for c in 0..cfg.n_classes as u32 {
        let template = gen_class_template(c, cfg.seed);
        let mut rng = rng::stream(cfg.seed, "render", u64::from(c));
        let counts = [cfg.per_class_m1.draw(&mut rng), cfg.per_class_m2.draw(&mut rng)];
        for m in Modality::BOTH {
            for i in 0..counts[m.index()] {
                let mut s = render(&template, m, &gap, cfg.length, &mut rng);
                s.source_id = source_id(c, m, i);
                out.push(s);
            }
        }
    }
    out
}
