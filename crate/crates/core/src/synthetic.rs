//! Seeded generator for a multi-view fixture with known inter-view structure.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{MultiViewDataset, MultivariateSeries, Result, View};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub samples: usize,
    pub channels: usize,
    pub length: usize,
    /// Std of the noise added to the target to form the correlated view.
    pub correlated_noise: f64,
    /// Std of the per-point noise on top of the class signal in the target.
    pub target_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            samples: 120,
            channels: 2,
            length: 32,
            correlated_noise: 0.1,
            target_noise: 1.0,
            seed: 0,
        }
    }
}

/// Three views over the same two-class samples. View 0 is the target: a
/// class-dependent sinusoid (two or three cycles per series, random phase
/// and amplitude) plus Gaussian noise. View 1 is view 0 plus independent
/// noise of std `correlated_noise`. View 2 is standard normal noise carrying
/// no class information.
pub fn correlated_views(spec: &SyntheticSpec) -> Result<MultiViewDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let target_noise = Normal::new(0.0, spec.target_noise).expect("finite std");
    let view_noise = Normal::new(0.0, spec.correlated_noise).expect("finite std");
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let m = spec.length as f64;
    let mut target = Vec::with_capacity(spec.samples);
    let mut correlated = Vec::with_capacity(spec.samples);
    let mut noise = Vec::with_capacity(spec.samples);
    let mut labels = Vec::with_capacity(spec.samples);
    for i in 0..spec.samples {
        let class = i % 2;
        let cycles = 2.0 + class as f64;
        let channels: Vec<Vec<f64>> = (0..spec.channels)
            .map(|_| {
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                let amplitude = rng.random_range(0.8..1.2);
                (0..spec.length)
                    .map(|t| {
                        let arg = std::f64::consts::TAU * cycles * t as f64 / m + phase;
                        amplitude * arg.sin() + target_noise.sample(&mut rng)
                    })
                    .collect()
            })
            .collect();
        let shifted: Vec<Vec<f64>> = channels
            .iter()
            .map(|c| c.iter().map(|v| v + view_noise.sample(&mut rng)).collect())
            .collect();
        let independent: Vec<Vec<f64>> = (0..spec.channels)
            .map(|_| (0..spec.length).map(|_| unit.sample(&mut rng)).collect())
            .collect();
        target.push(MultivariateSeries::new(channels)?);
        correlated.push(MultivariateSeries::new(shifted)?);
        noise.push(MultivariateSeries::new(independent)?);
        labels.push(format!("class_{class}"));
    }
    MultiViewDataset::new(
        vec![View::new(target)?, View::new(correlated)?, View::new(noise)?],
        (0..spec.samples).map(|i| format!("sample_{i:04}")).collect(),
        labels,
        None,
    )
}
