use crate::autodiff::Tensor;
use crate::error::{NdaError, Result};

/// Labelled feature matrix.
///
/// `ids` are stable sample identifiers that survive splitting and
/// subsetting, so provenance of every row stays traceable.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    /// `N × D`
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub ids: Vec<usize>,
    pub num_classes: usize,
    /// `false` for out-of-distribution sets; labels then name the source
    /// class the sample was displaced from.
    pub in_distribution: bool,
    pub provenance: String,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        features: Tensor,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        let n = labels.len();
        let ds = Dataset {
            name: name.into(),
            features,
            labels,
            ids: (0..n).collect(),
            num_classes,
            in_distribution: true,
            provenance: String::new(),
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.shape().len() != 2 || self.features.rows() != self.labels.len() {
            return Err(NdaError::Shape {
                op: "dataset",
                left: self.features.shape().to_vec(),
                right: vec![self.labels.len()],
            });
        }
        if self.ids.len() != self.labels.len() {
            return Err(NdaError::contract(
                "dataset ids and labels differ in length",
            ));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(NdaError::contract(format!(
                "label {bad} outside [0, {})",
                self.num_classes
            )));
        }
        if !self.features.is_finite() {
            return Err(NdaError::contract("dataset contains non-finite features"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Row indices grouped by class.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }

    /// New dataset holding the given rows, in the given order.
    pub fn subset(&self, indices: &[usize], name: impl Into<String>) -> Dataset {
        Dataset {
            name: name.into(),
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ids: indices.iter().map(|&i| self.ids[i]).collect(),
            num_classes: self.num_classes,
            in_distribution: self.in_distribution,
            provenance: self.provenance.clone(),
        }
    }

    /// Concatenates two datasets with the same width and class count.
    pub fn concat(&self, other: &Dataset, name: impl Into<String>) -> Result<Dataset> {
        if self.dim() != other.dim() && !self.is_empty() && !other.is_empty() {
            return Err(NdaError::Shape {
                op: "concat",
                left: self.features.shape().to_vec(),
                right: other.features.shape().to_vec(),
            });
        }
        let dim = if self.is_empty() {
            other.dim()
        } else {
            self.dim()
        };
        let mut data = self.features.data().to_vec();
        data.extend_from_slice(other.features.data());
        let n = self.len() + other.len();
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        let mut ids = self.ids.clone();
        ids.extend_from_slice(&other.ids);
        Ok(Dataset {
            name: name.into(),
            features: Tensor::matrix(n, dim, data)?,
            labels,
            ids,
            num_classes: self.num_classes.max(other.num_classes),
            in_distribution: self.in_distribution && other.in_distribution,
            provenance: self.provenance.clone(),
        })
    }

    /// Consecutive row-index ranges of at most `batch_size` rows.
    pub fn batches(&self, batch_size: usize) -> impl Iterator<Item = std::ops::Range<usize>> + '_ {
        let n = self.len();
        let bs = batch_size.max(1);
        (0..n.div_ceil(bs)).map(move |b| b * bs..((b + 1) * bs).min(n))
    }
}
