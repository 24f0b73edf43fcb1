use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{sub_seed, Dataset};
use crate::autodiff::Tensor;
use crate::error::{NdaError, Result};

/// Parameters of an isotropic Gaussian-blob classification problem.
#[derive(Clone, Debug, PartialEq)]
pub struct BlobSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub per_class: usize,
    /// standard deviation of the centroid draw
    pub spread: f64,
    /// within-class standard deviation
    pub sigma: f64,
    pub seed: u64,
}

impl BlobSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 1 || self.dim < 1 || self.per_class < 1 {
            return Err(NdaError::contract(
                "blob spec needs classes, dim and per-class count >= 1",
            ));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(NdaError::contract(format!(
                "sigma must be positive, got {}",
                self.sigma
            )));
        }
        if !(self.spread > 0.0 && self.spread.is_finite()) {
            return Err(NdaError::contract(format!(
                "spread must be positive, got {}",
                self.spread
            )));
        }
        Ok(())
    }

    fn describe(&self) -> String {
        format!(
            "blobs classes={} dim={} per_class={} spread={} sigma={} seed={}",
            self.num_classes, self.dim, self.per_class, self.spread, self.sigma, self.seed
        )
    }
}

/// Class centroids for `spec`, one row per class.
pub fn blob_centroids(spec: &BlobSpec) -> Result<Tensor> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(spec.seed, "centroids"));
    let data = (0..spec.num_classes * spec.dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            spec.spread * z
        })
        .collect::<Vec<f64>>();
    Tensor::matrix(spec.num_classes, spec.dim, data)
}

fn sample_around(
    centroids: &Tensor,
    spec: &BlobSpec,
    stream: &str,
) -> Result<(Tensor, Vec<usize>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(spec.seed, stream));
    let n = spec.num_classes * spec.per_class;
    let mut data = Vec::with_capacity(n * spec.dim);
    let mut labels = Vec::with_capacity(n);
    for class in 0..spec.num_classes {
        for _ in 0..spec.per_class {
            for &c in centroids.row(class) {
                let z: f64 = StandardNormal.sample(&mut rng);
                data.push(c + spec.sigma * z);
            }
            labels.push(class);
        }
    }
    Ok((Tensor::matrix(n, spec.dim, data)?, labels))
}

/// Gaussian samples around seeded centroids, grouped by class.
pub fn gen_blobs(spec: &BlobSpec) -> Result<Dataset> {
    let centroids = blob_centroids(spec)?;
    let (features, labels) = sample_around(&centroids, spec, "samples")?;
    let mut ds = Dataset::new("blobs", features, labels, spec.num_classes)?;
    ds.provenance = spec.describe();
    Ok(ds)
}

/// Same family as [`gen_blobs`] with every centroid displaced by `shift`
/// along one seeded random unit direction. Samples are drawn from an
/// independent stream and the set is flagged out-of-distribution.
pub fn gen_ood_set(spec: &BlobSpec, shift: f64) -> Result<Dataset> {
    if !(shift >= 0.0 && shift.is_finite()) {
        return Err(NdaError::contract(format!(
            "shift must be non-negative, got {shift}"
        )));
    }
    let mut centroids = blob_centroids(spec)?;
    let direction = ood_direction(spec);
    for r in 0..centroids.rows() {
        for (c, u) in centroids.row_mut(r).iter_mut().zip(&direction) {
            *c += shift * u;
        }
    }
    let (features, labels) = sample_around(&centroids, spec, "ood-samples")?;
    let mut ds = Dataset::new("ood", features, labels, spec.num_classes)?;
    ds.in_distribution = false;
    ds.provenance = format!("{} ood_shift={shift}", spec.describe());
    Ok(ds)
}

/// Unit vector along which [`gen_ood_set`] displaces the centroids.
pub fn ood_direction(spec: &BlobSpec) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(spec.seed, "ood-direction"));
    loop {
        let v: Vec<f64> = (0..spec.dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}
