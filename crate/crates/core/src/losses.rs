//! Discriminant losses: classification cross-entropy, intra-class mean loss
//! (Euclidean or prototypical), inter-class Siamese loss and their weighted
//! combination, plus class-mean bookkeeping and pair sampling.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autodiff::{Graph, Tensor, Var};
use crate::data::Dataset;
use crate::error::{NdaError, Result};
use crate::model::Model;

/// Probabilities below this are floored before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MeanLossVariant {
    /// mean Euclidean distance to the own-class centroid
    L2,
    /// cross-entropy over a softmax of negative squared centroid distances
    Prototypical,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SiameseVariant {
    /// `(1-y)·D - y·D`, unbounded below for different-class pairs
    Literal,
    /// `(1-y)·D² + y·max(0, margin - D)²`
    Margin,
}

impl fmt::Display for MeanLossVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MeanLossVariant::L2 => "l2",
            MeanLossVariant::Prototypical => "prototypical",
        })
    }
}

impl FromStr for MeanLossVariant {
    type Err = NdaError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l2" => Ok(MeanLossVariant::L2),
            "prototypical" => Ok(MeanLossVariant::Prototypical),
            _ => Err(NdaError::Config(format!(
                "mean loss must be `l2` or `prototypical`, got `{s}`"
            ))),
        }
    }
}

impl fmt::Display for SiameseVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SiameseVariant::Literal => "literal",
            SiameseVariant::Margin => "margin",
        })
    }
}

impl FromStr for SiameseVariant {
    type Err = NdaError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "literal" => Ok(SiameseVariant::Literal),
            "margin" => Ok(SiameseVariant::Margin),
            _ => Err(NdaError::Config(format!(
                "siamese variant must be `literal` or `margin`, got `{s}`"
            ))),
        }
    }
}

/// Loss weights and variant choices.
///
/// The total is `alpha·(class_a + class_b) + beta·(mean_a + mean_b + gamma·siamese)`.
#[derive(Clone, Debug, PartialEq)]
pub struct NdaConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub mean_variant: MeanLossVariant,
    pub siamese_variant: SiameseVariant,
    pub margin: f64,
    /// fraction of sampled pairs forced to share a class
    pub pair_fraction: f64,
}

impl Default for NdaConfig {
    fn default() -> Self {
        NdaConfig {
            alpha: 1.0,
            beta: 1e-3,
            gamma: 1.0,
            mean_variant: MeanLossVariant::L2,
            siamese_variant: SiameseVariant::Margin,
            margin: 1.0,
            pair_fraction: 0.5,
        }
    }
}

impl NdaConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(NdaError::contract(format!(
                    "{name} must be a non-negative weight, got {v}"
                )));
            }
        }
        if self.alpha + self.beta <= 0.0 {
            return Err(NdaError::contract("alpha + beta must be positive"));
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(NdaError::contract(format!(
                "margin must be non-negative, got {}",
                self.margin
            )));
        }
        if !(0.0..=1.0).contains(&self.pair_fraction) {
            return Err(NdaError::contract(format!(
                "pair fraction must lie in [0, 1], got {}",
                self.pair_fraction
            )));
        }
        Ok(())
    }

    /// Scalar form of the weighted total, for recombining logged components.
    pub fn combine(&self, terms: &LossValues) -> f64 {
        self.alpha * (terms.class_a + terms.class_b)
            + self.beta * (terms.mean_a + terms.mean_b + self.gamma * terms.siamese)
    }
}

/// Graph nodes of the five loss components of one paired batch.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub class_a: Var,
    pub class_b: Var,
    pub mean_a: Var,
    pub mean_b: Var,
    pub siamese: Var,
}

/// Plain values of the five components.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValues {
    pub class_a: f64,
    pub class_b: f64,
    pub mean_a: f64,
    pub mean_b: f64,
    pub siamese: f64,
}

impl LossTerms {
    pub fn values(&self, g: &Graph) -> LossValues {
        LossValues {
            class_a: g.value(self.class_a).item(),
            class_b: g.value(self.class_b).item(),
            mean_a: g.value(self.mean_a).item(),
            mean_b: g.value(self.mean_b).item(),
            siamese: g.value(self.siamese).item(),
        }
    }
}

impl LossValues {
    pub fn add_assign(&mut self, other: &LossValues) {
        self.class_a += other.class_a;
        self.class_b += other.class_b;
        self.mean_a += other.mean_a;
        self.mean_b += other.mean_b;
        self.siamese += other.siamese;
    }

    pub fn scaled(&self, c: f64) -> LossValues {
        LossValues {
            class_a: self.class_a * c,
            class_b: self.class_b * c,
            mean_a: self.mean_a * c,
            mean_b: self.mean_b * c,
            siamese: self.siamese * c,
        }
    }

    pub fn is_finite(&self) -> bool {
        [
            self.class_a,
            self.class_b,
            self.mean_a,
            self.mean_b,
            self.siamese,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

impl fmt::Display for LossValues {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "class_a={} class_b={} mean_a={} mean_b={} siamese={}",
            self.class_a, self.class_b, self.mean_a, self.mean_b, self.siamese
        )
    }
}

/// Per-class latent centroids, computed once per epoch with the model frozen.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassMeans {
    /// `K × d`; rows of absent classes are zero and must not be used
    pub means: Tensor,
    pub counts: Vec<usize>,
    pub epoch: usize,
    pub global_mean: Vec<f64>,
}

impl ClassMeans {
    pub fn from_latents(
        latents: &Tensor,
        labels: &[usize],
        num_classes: usize,
        epoch: usize,
    ) -> Result<Self> {
        if latents.rows() != labels.len() {
            return Err(NdaError::Shape {
                op: "class_means",
                left: latents.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        let d = latents.cols();
        let mut sums = vec![0.0; num_classes * d];
        let mut counts = vec![0usize; num_classes];
        for (r, &l) in labels.iter().enumerate() {
            if l >= num_classes {
                return Err(NdaError::contract(format!(
                    "label {l} outside [0, {num_classes})"
                )));
            }
            counts[l] += 1;
            for (s, x) in sums[l * d..(l + 1) * d].iter_mut().zip(latents.row(r)) {
                *s += x;
            }
        }
        Ok(Self::finish(sums, counts, d, epoch))
    }

    fn finish(mut sums: Vec<f64>, counts: Vec<usize>, d: usize, epoch: usize) -> Self {
        let total: usize = counts.iter().sum();
        let mut global_mean = vec![0.0; d];
        for (j, &n) in counts.iter().enumerate() {
            let row = &mut sums[j * d..(j + 1) * d];
            for (g, s) in global_mean.iter_mut().zip(row.iter()) {
                *g += s;
            }
            if n > 0 {
                row.iter_mut().for_each(|x| *x /= n as f64);
            }
        }
        if total > 0 {
            global_mean.iter_mut().for_each(|x| *x /= total as f64);
        }
        ClassMeans {
            means: Tensor::matrix(counts.len(), d, sums).expect("sized"),
            counts,
            epoch,
            global_mean,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn is_present(&self, class: usize) -> bool {
        self.counts.get(class).is_some_and(|&n| n > 0)
    }

    pub fn absent_classes(&self) -> Vec<usize> {
        (0..self.num_classes())
            .filter(|&j| !self.is_present(j))
            .collect()
    }

    pub fn mean(&self, class: usize) -> &[f64] {
        self.means.row(class)
    }
}

/// Latent centroids of every class over `dataset`, evaluated batch by batch
/// without building a gradient graph.
pub fn compute_class_means(
    model: &Model,
    dataset: &Dataset,
    batch_size: usize,
    epoch: usize,
) -> Result<ClassMeans> {
    if dataset.is_empty() {
        return Err(NdaError::contract(
            "cannot compute class means of an empty dataset",
        ));
    }
    let d = model.latent_dim();
    let k = dataset.num_classes;
    let mut sums = vec![0.0; k * d];
    let mut counts = vec![0usize; k];
    for range in dataset.batches(batch_size) {
        let idx: Vec<usize> = range.collect();
        let (latent, _) = model.predict(&dataset.features.select_rows(&idx))?;
        for (r, &i) in idx.iter().enumerate() {
            let l = dataset.labels[i];
            counts[l] += 1;
            for (s, x) in sums[l * d..(l + 1) * d].iter_mut().zip(latent.row(r)) {
                *s += x;
            }
        }
    }
    Ok(ClassMeans::finish(sums, counts, d, epoch))
}

fn onehot(labels: &[usize], k: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(vec![labels.len(), k]);
    for (r, &l) in labels.iter().enumerate() {
        if l >= k {
            return Err(NdaError::contract(format!("label {l} outside [0, {k})")));
        }
        t.set(r, l, 1.0);
    }
    Ok(t)
}

/// Mean over the batch of `-log p(true class)`, with probabilities floored
/// at [`PROB_FLOOR`] (floor hits are counted by the graph).
pub fn classification_loss(g: &mut Graph, probs: Var, labels: &[usize]) -> Result<Var> {
    let shape = g.value(probs).shape().to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(NdaError::Shape {
            op: "classification_loss",
            left: shape,
            right: vec![labels.len()],
        });
    }
    let mask = g.constant(onehot(labels, shape[1])?);
    let picked = g.mul(probs, mask)?;
    let p_true = g.sum_rows(picked)?;
    let floored = g.clamp_min(p_true, PROB_FLOOR)?;
    let logp = g.log(floored)?;
    let avg = g.mean(logp)?;
    g.scale(avg, -1.0)
}

fn gathered_means(means: &ClassMeans, labels: &[usize]) -> Result<Tensor> {
    let mut rows = Vec::with_capacity(labels.len());
    for &l in labels {
        if !means.is_present(l) {
            return Err(NdaError::contract(format!(
                "no class mean available for class {l}"
            )));
        }
        rows.push(means.mean(l));
    }
    Tensor::from_rows(&rows)
}

/// `(1/N) Σ ‖latent_i − μ_{y_i}‖₂`. Means enter as constants.
pub fn mean_loss_l2(
    g: &mut Graph,
    latents: Var,
    labels: &[usize],
    means: &ClassMeans,
) -> Result<Var> {
    let target = gathered_means(means, labels)?;
    if target.shape() != g.value(latents).shape() {
        return Err(NdaError::Shape {
            op: "mean_loss_l2",
            left: g.value(latents).shape().to_vec(),
            right: target.shape().to_vec(),
        });
    }
    let target = g.constant(target);
    let diff = g.sub(latents, target)?;
    let sq = g.square(diff)?;
    let dist2 = g.sum_rows(sq)?;
    let dist = g.sqrt(dist2)?;
    g.mean(dist)
}

/// Cross-entropy over `softmax_j(−‖latent − μ_j‖²)`; every class mean is a
/// prototype, so all of them must be present.
pub fn mean_loss_prototypical(
    g: &mut Graph,
    latents: Var,
    labels: &[usize],
    means: &ClassMeans,
) -> Result<Var> {
    let absent = means.absent_classes();
    if !absent.is_empty() {
        return Err(NdaError::contract(format!(
            "prototypical loss needs every class mean; missing {absent:?}"
        )));
    }
    let k = means.num_classes();
    let (n, d) = (g.value(latents).rows(), g.value(latents).cols());
    if d != means.means.cols() {
        return Err(NdaError::Shape {
            op: "mean_loss_prototypical",
            left: g.value(latents).shape().to_vec(),
            right: means.means.shape().to_vec(),
        });
    }
    // ‖l − μ_j‖² = ‖l‖² − 2 l·μ_j + ‖μ_j‖², assembled as an n × k matrix
    let proto_t = g.constant(means.means.transpose());
    let cross = g.matmul(latents, proto_t)?;
    let cross = g.scale(cross, -2.0)?;
    let proto_sq = g.constant(Tensor::vector(
        (0..k)
            .map(|j| means.mean(j).iter().map(|x| x * x).sum())
            .collect(),
    ));
    let partial = g.add_bias(cross, proto_sq)?;
    let sq = g.square(latents)?;
    let latent_sq = g.sum_rows(sq)?;
    let ones = g.constant(Tensor::full(vec![1, k], 1.0));
    let latent_sq = g.matmul(latent_sq, ones)?;
    let dist2 = g.add(partial, latent_sq)?;
    let logits = g.scale(dist2, -1.0)?;
    debug_assert_eq!(g.value(logits).shape(), &[n, k]);
    let probs = g.softmax_rows(logits)?;
    classification_loss(g, probs, labels)
}

pub fn mean_loss(
    g: &mut Graph,
    latents: Var,
    labels: &[usize],
    means: &ClassMeans,
    variant: MeanLossVariant,
) -> Result<Var> {
    match variant {
        MeanLossVariant::L2 => mean_loss_l2(g, latents, labels, means),
        MeanLossVariant::Prototypical => mean_loss_prototypical(g, latents, labels, means),
    }
}

/// Pairwise loss between the two Siamese branches. `different[i]` is the
/// pair flag: `false` for same-class pairs, `true` otherwise.
pub fn siamese_loss(
    g: &mut Graph,
    latents_a: Var,
    latents_b: Var,
    different: &[bool],
    config: &NdaConfig,
) -> Result<Var> {
    let n = g.value(latents_a).rows();
    if g.value(latents_a).shape() != g.value(latents_b).shape() || different.len() != n {
        return Err(NdaError::Shape {
            op: "siamese_loss",
            left: g.value(latents_a).shape().to_vec(),
            right: vec![g.value(latents_b).rows(), different.len()],
        });
    }
    let diff = g.sub(latents_a, latents_b)?;
    let sq = g.square(diff)?;
    let dist2 = g.sum_rows(sq)?;
    let same_mask: Vec<f64> = different
        .iter()
        .map(|&y| if y { 0.0 } else { 1.0 })
        .collect();
    let diff_mask: Vec<f64> = different
        .iter()
        .map(|&y| if y { 1.0 } else { 0.0 })
        .collect();

    match config.siamese_variant {
        SiameseVariant::Literal => {
            let dist = g.sqrt(dist2)?;
            let sign = g.constant(Tensor::new(
                vec![n, 1],
                same_mask
                    .iter()
                    .zip(&diff_mask)
                    .map(|(s, d)| s - d)
                    .collect(),
            )?);
            let signed = g.mul(dist, sign)?;
            g.mean(signed)
        }
        SiameseVariant::Margin => {
            let same = g.constant(Tensor::new(vec![n, 1], same_mask)?);
            let pull = g.mul(dist2, same)?;
            let dist = g.sqrt(dist2)?;
            let neg = g.scale(dist, -1.0)?;
            let margin = g.constant(Tensor::full(vec![n, 1], config.margin));
            let gap = g.add(neg, margin)?;
            let hinge = g.relu(gap)?;
            let hinge2 = g.square(hinge)?;
            let other = g.constant(Tensor::new(vec![n, 1], diff_mask)?);
            let push = g.mul(hinge2, other)?;
            let total = g.add(pull, push)?;
            g.mean(total)
        }
    }
}

/// `(1/N) Σ_{i<j, y_i = y_j} ‖latent_i − latent_j‖²` over every unordered
/// same-class pair of one batch: the squared-distance, same-class part of
/// the Siamese loss taken over all pairs in the batch.
pub fn same_class_pair_scatter(g: &mut Graph, latents: Var, labels: &[usize]) -> Result<Var> {
    let n = g.value(latents).rows();
    if labels.len() != n {
        return Err(NdaError::Shape {
            op: "same_class_pair_scatter",
            left: g.value(latents).shape().to_vec(),
            right: vec![labels.len()],
        });
    }
    let (mut left, mut right) = (Vec::new(), Vec::new());
    for i in 0..n {
        for j in i + 1..n {
            if labels[i] == labels[j] {
                left.push(i);
                right.push(j);
            }
        }
    }
    if left.is_empty() {
        let zero = g.constant(Tensor::scalar(0.0));
        return g.scale(zero, 1.0);
    }
    let a = g.row_select(latents, &left)?;
    let b = g.row_select(latents, &right)?;
    let diff = g.sub(a, b)?;
    let sq = g.square(diff)?;
    let total = g.sum(sq)?;
    g.scale(total, 1.0 / n as f64)
}

/// `alpha·(class_a + class_b) + beta·(mean_a + mean_b + gamma·siamese)`;
/// gamma scales the Siamese term inside the beta group.
pub fn nda_total_loss(g: &mut Graph, terms: &LossTerms, config: &NdaConfig) -> Result<Var> {
    for (name, v) in [
        ("alpha", config.alpha),
        ("beta", config.beta),
        ("gamma", config.gamma),
    ] {
        if v < 0.0 || !v.is_finite() {
            return Err(NdaError::contract(format!(
                "{name} must be non-negative, got {v}"
            )));
        }
    }
    let class = g.add(terms.class_a, terms.class_b)?;
    let class = g.scale(class, config.alpha)?;
    let means = g.add(terms.mean_a, terms.mean_b)?;
    let siamese = g.scale(terms.siamese, config.gamma)?;
    let inner = g.add(means, siamese)?;
    let inner = g.scale(inner, config.beta)?;
    g.add(class, inner)
}

/// Two aligned input batches for the Siamese branches.
#[derive(Clone, Debug, PartialEq)]
pub struct PairBatch {
    pub indices_a: Vec<usize>,
    pub indices_b: Vec<usize>,
    pub inputs_a: Tensor,
    pub inputs_b: Tensor,
    pub labels_a: Vec<usize>,
    pub labels_b: Vec<usize>,
    /// `true` where the two labels differ
    pub different: Vec<bool>,
    /// same-class pairs that had to fall back to a cross-class partner
    pub fallbacks: usize,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.different.len()
    }

    pub fn is_empty(&self) -> bool {
        self.different.is_empty()
    }
}

/// Draws `batch_size` pairs, `round(pair_fraction · batch_size)` of them
/// same-class, in shuffled order.
pub fn sample_pairs<R: Rng>(
    dataset: &Dataset,
    batch_size: usize,
    pair_fraction: f64,
    rng: &mut R,
) -> Result<PairBatch> {
    if batch_size == 0 || dataset.is_empty() {
        return Err(NdaError::contract(
            "pair sampling needs a non-empty dataset and batch",
        ));
    }
    if !(0.0..=1.0).contains(&pair_fraction) {
        return Err(NdaError::contract(format!(
            "pair fraction must lie in [0, 1], got {pair_fraction}"
        )));
    }
    let by_class = dataset.indices_by_class();
    let populated = by_class.iter().filter(|c| !c.is_empty()).count();
    let n_same = (pair_fraction * batch_size as f64).round() as usize;
    if n_same < batch_size && populated < 2 {
        return Err(NdaError::contract(
            "cross-class pairs need at least two populated classes",
        ));
    }

    let n = dataset.len();
    let cross_partner = |rng: &mut R, anchor: usize| -> usize {
        loop {
            let j = rng.random_range(0..n);
            if dataset.labels[j] != dataset.labels[anchor] {
                return j;
            }
        }
    };

    let mut pairs = Vec::with_capacity(batch_size);
    let mut fallbacks = 0;
    for k in 0..batch_size {
        let anchor = rng.random_range(0..n);
        if k < n_same {
            let members = &by_class[dataset.labels[anchor]];
            if members.len() >= 2 {
                let partner = loop {
                    let j = members[rng.random_range(0..members.len())];
                    if j != anchor {
                        break j;
                    }
                };
                pairs.push((anchor, partner));
            } else if populated >= 2 {
                fallbacks += 1;
                pairs.push((anchor, cross_partner(rng, anchor)));
            } else {
                return Err(NdaError::contract(
                    "no class has two samples and no cross-class partner exists",
                ));
            }
        } else {
            pairs.push((anchor, cross_partner(rng, anchor)));
        }
    }
    pairs.shuffle(rng);

    let indices_a: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let indices_b: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let labels_a: Vec<usize> = indices_a.iter().map(|&i| dataset.labels[i]).collect();
    let labels_b: Vec<usize> = indices_b.iter().map(|&i| dataset.labels[i]).collect();
    let different = labels_a
        .iter()
        .zip(&labels_b)
        .map(|(a, b)| a != b)
        .collect();
    Ok(PairBatch {
        inputs_a: dataset.features.select_rows(&indices_a),
        inputs_b: dataset.features.select_rows(&indices_b),
        indices_a,
        indices_b,
        labels_a,
        labels_b,
        different,
        fallbacks,
    })
}

#[cfg(test)]
mod tests;
