//! Seeded Gaussian-blob datasets shaped like flow-statistics tables.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dataset::{ClassId, DataMatrix, FEATURE_COUNT};

#[derive(Debug, Clone, PartialEq)]
pub struct BlobSpec {
    pub classes: Vec<ClassId>,
    pub per_class: usize,
    pub n_features: usize,
    /// Standard deviation of each center coordinate.
    pub center_scale: f32,
    /// Within-class standard deviation.
    pub noise: f32,
    pub seed: u64,
}

impl BlobSpec {
    /// Three classes (Normal, mirai_udp, mirai_syn) of 1,250 rows each.
    pub fn three_class(seed: u64) -> Self {
        Self {
            classes: (0..3).map(|i| ClassId::new(i).expect("valid id")).collect(),
            per_class: 1250,
            n_features: FEATURE_COUNT,
            center_scale: 1.0,
            noise: 1.0,
            seed,
        }
    }
}

/// Rows are interleaved by class so that truncation keeps classes balanced.
pub fn gaussian_blobs(spec: &BlobSpec) -> DataMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.n_features;
    let centers: Vec<Vec<f32>> = spec
        .classes
        .iter()
        .map(|_| {
            (0..d)
                .map(|_| {
                    let z: f32 = StandardNormal.sample(&mut rng);
                    spec.center_scale * z
                })
                .collect()
        })
        .collect();
    let mut data = DataMatrix::new(d);
    let mut row = vec![0.0f32; d];
    for _ in 0..spec.per_class {
        for (c, center) in spec.classes.iter().zip(&centers) {
            for (r, &m) in row.iter_mut().zip(center) {
                let z: f32 = StandardNormal.sample(&mut rng);
                *r = m + spec.noise * z;
            }
            data.push(&row, *c);
        }
    }
    data
}
