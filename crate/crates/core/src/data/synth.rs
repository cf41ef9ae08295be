use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{DataError, Dataset};
use crate::tensor::Tensor;

/// Side length of the rendered single-channel grids.
pub const GRID: usize = 8;

/// A synthetic task with the latent 2-D points behind its images.
#[derive(Clone, Debug)]
pub struct SynthTask {
    pub dataset: Dataset,
    pub means: Vec<[f64; 2]>,
    pub latents: Vec<[f64; 2]>,
}

/// Renders `(x, y)` as `x * horizontal_ramp + y * vertical_ramp` on a
/// `GRID x GRID` image, ramps running from -1 to 1.
pub fn render_point(p: [f64; 2]) -> Vec<f32> {
    let ramp = |t: usize| (2.0 * t as f64 / (GRID - 1) as f64) - 1.0;
    let mut out = Vec::with_capacity(GRID * GRID);
    for row in 0..GRID {
        for col in 0..GRID {
            out.push((p[0] * ramp(col) + p[1] * ramp(row)) as f32);
        }
    }
    out
}

pub fn synth_tasks<R: Rng + ?Sized>(
    n_tasks: usize,
    n_per_class: usize,
    n_classes: usize,
    spread: f64,
    rng: &mut R,
) -> Result<Vec<Dataset>, DataError> {
    Ok(synth_tasks_detailed(n_tasks, n_per_class, n_classes, spread, rng)?
        .into_iter()
        .map(|t| t.dataset)
        .collect())
}

/// Each task places its class means evenly on the unit circle under a
/// random rotation and draws isotropic Gaussian points around them. Per
/// class, the first quarter of the samples (at least one) form the test
/// split.
pub fn synth_tasks_detailed<R: Rng + ?Sized>(
    n_tasks: usize,
    n_per_class: usize,
    n_classes: usize,
    spread: f64,
    rng: &mut R,
) -> Result<Vec<SynthTask>, DataError> {
    if n_tasks == 0 || n_per_class < 2 || n_classes < 2 {
        return Err(DataError::InvalidArgument(
            "need at least 1 task, 2 classes and 2 samples per class".into(),
        ));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(DataError::InvalidArgument(format!("spread must be non-negative, got {spread}")));
    }
    (0..n_tasks)
        .map(|_| {
            let rot = rng.random::<f64>() * 2.0 * PI;
            let means: Vec<[f64; 2]> = (0..n_classes)
                .map(|c| {
                    let a = rot + 2.0 * PI * c as f64 / n_classes as f64;
                    [a.cos(), a.sin()]
                })
                .collect();
            let n = n_per_class * n_classes;
            let mut latents = Vec::with_capacity(n);
            let mut labels = Vec::with_capacity(n);
            let mut data = Vec::with_capacity(n * GRID * GRID);
            let (mut train, mut test) = (Vec::new(), Vec::new());
            let n_test = (n_per_class / 4).max(1);
            for (c, m) in means.iter().enumerate() {
                for j in 0..n_per_class {
                    let dx: f64 = StandardNormal.sample(rng);
                    let dy: f64 = StandardNormal.sample(rng);
                    let p = [m[0] + spread * dx, m[1] + spread * dy];
                    let idx = labels.len();
                    if j < n_test { &mut test } else { &mut train }.push(idx);
                    data.extend(render_point(p));
                    latents.push(p);
                    labels.push(c);
                }
            }
            train.shuffle(rng);
            let inputs = Tensor::new(vec![n, 1, GRID, GRID], data).expect("sizes agree");
            Ok(SynthTask {
                dataset: Dataset::new(inputs, labels, n_classes, train, test)?,
                means,
                latents,
            })
        })
        .collect()
}

/// Accuracy of the optimal classifier for two equally likely isotropic
/// Gaussians with standard deviation `spread` whose means sit at opposite
/// points of the unit circle: `Φ(1 / spread)`.
pub fn bayes_accuracy_two_class(spread: f64) -> f64 {
    if spread == 0.0 {
        return 1.0;
    }
    normal_cdf(1.0 / spread)
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}
