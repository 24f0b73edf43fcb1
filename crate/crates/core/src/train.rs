//! The NDA training loop: class means refreshed at the start of every
//! epoch, paired batches through a shared-weight forward pass, the weighted
//! five-term loss, an SGD step, then validation and latent diagnostics.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Sgd, Tensor};
use crate::data::{sub_seed, Dataset};
use crate::discriminant::{latent_diagnostics, LatentDiagnostics, DEFAULT_RIDGE};
use crate::error::{NdaError, Result};
use crate::losses::{
    classification_loss, compute_class_means, mean_loss, nda_total_loss, sample_pairs,
    siamese_loss, ClassMeans, LossTerms, LossValues, NdaConfig, PairBatch,
};
use crate::model::Model;
use crate::ood::{score_rows, ScoredPrediction};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// multiply the learning rate by `lr_decay_factor` every this many
    /// epochs; 0 disables decay
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    pub seed: u64,
    pub nda: NdaConfig,
    pub validation_fraction: f64,
    pub mean_loss: bool,
    pub siamese: bool,
    /// mean loss on even epochs only, Siamese loss on odd epochs only
    pub alternate: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 32,
            learning_rate: 0.05,
            momentum: 0.9,
            lr_decay_every: 0,
            lr_decay_factor: 0.5,
            seed: 0,
            nda: NdaConfig::default(),
            validation_fraction: 0.2,
            mean_loss: true,
            siamese: true,
            alternate: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(NdaError::Config("epochs must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(NdaError::Config(format!(
                "batch_size must be at least 2, got {}",
                self.batch_size
            )));
        }
        if !(0.0..=0.5).contains(&self.validation_fraction) {
            return Err(NdaError::Config(format!(
                "validation_fraction must lie in [0, 0.5], got {}",
                self.validation_fraction
            )));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(NdaError::Config(format!(
                "lr_decay_factor must lie in (0, 1], got {}",
                self.lr_decay_factor
            )));
        }
        Sgd::new(self.learning_rate, self.momentum).map_err(|e| NdaError::Config(e.to_string()))?;
        self.nda.validate()
    }

    fn mean_active(&self, epoch: usize) -> bool {
        self.mean_loss && self.nda.beta > 0.0 && (!self.alternate || epoch.is_multiple_of(2))
    }

    fn siamese_active(&self, epoch: usize) -> bool {
        self.siamese
            && self.nda.beta > 0.0
            && self.nda.gamma > 0.0
            && (!self.alternate || !epoch.is_multiple_of(2))
    }
}

/// Training, validation and test splits; validation and test may be empty.
#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// batch-averaged loss components; disabled terms are 0
    pub losses: LossValues,
    /// batch-averaged weighted total
    pub total: f64,
    pub val_accuracy: f64,
    pub diagnostics: LatentDiagnostics,
    pub learning_rate: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub records: Vec<EpochRecord>,
    /// `None` when no epoch beat the incumbent model
    pub best_epoch: Option<usize>,
    pub best_val_accuracy: f64,
    pub test_accuracy: Option<f64>,
    /// number of class-mean computations performed
    pub mean_refreshes: usize,
    /// same-class pairs that fell back to a cross-class partner
    pub pair_fallbacks: usize,
    /// class means of the final epoch
    pub final_means: ClassMeans,
}

/// Trains `model` in place and leaves it at the epoch with the best
/// validation accuracy (training accuracy when there is no validation
/// split).
pub fn train(model: &mut Model, splits: &Splits, config: &TrainConfig) -> Result<TrainReport> {
    train_from(model, splits, config, None)
}

/// Like [`train`], but the incoming model competes for selection with the
/// given validation accuracy and is replaced only on strict improvement.
pub fn train_from(
    model: &mut Model,
    splits: &Splits,
    config: &TrainConfig,
    incumbent_accuracy: Option<f64>,
) -> Result<TrainReport> {
    config.validate()?;
    let train = &splits.train;
    if train.is_empty() {
        return Err(NdaError::contract("training split is empty"));
    }
    if train.num_classes != model.num_classes() || train.dim() != model.input_dim() {
        return Err(NdaError::contract(format!(
            "model expects {} inputs and {} classes, data has {} and {}",
            model.input_dim(),
            model.num_classes(),
            train.dim(),
            train.num_classes
        )));
    }
    if let Some(missing) = train.class_counts().iter().position(|&c| c == 0) {
        return Err(NdaError::contract(format!(
            "class {missing} has no training samples"
        )));
    }

    let mut sgd = Sgd::new(config.learning_rate, config.momentum)?;
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(config.seed, "pairing"));
    let selection = if splits.val.is_empty() {
        train
    } else {
        &splits.val
    };
    let batches = train.len().div_ceil(config.batch_size);

    let mut best = incumbent_accuracy.map(|acc| (model.clone(), acc, None));
    let mut records = Vec::with_capacity(config.epochs);
    let mut mean_refreshes = 0;
    let mut pair_fallbacks = 0;
    let mut means = None;

    for epoch in 0..config.epochs {
        if config.lr_decay_every > 0 && epoch > 0 && epoch % config.lr_decay_every == 0 {
            sgd.set_learning_rate(sgd.learning_rate() * config.lr_decay_factor);
        }
        let class_means = compute_class_means(model, train, 256, epoch)?;
        mean_refreshes += 1;

        let use_mean = config.mean_active(epoch);
        let use_siamese = config.siamese_active(epoch);
        let mut sum = LossValues::default();
        let mut total = 0.0;
        let mut last = LossValues::default();
        for batch in 0..batches {
            let pairs = sample_pairs(train, config.batch_size, config.nda.pair_fraction, &mut rng)?;
            pair_fallbacks += pairs.fallbacks;
            let step = batch_step(model, &pairs, &class_means, config, use_mean, use_siamese);
            let (values, loss, grads) = match step {
                Ok(s) => s,
                Err(NdaError::NonFinite { op }) => {
                    return Err(NdaError::Diverged {
                        epoch,
                        batch,
                        components: format!("non-finite {op}; previous batch {last}"),
                    })
                }
                Err(e) => return Err(e),
            };
            if !loss.is_finite() || !values.is_finite() {
                return Err(NdaError::Diverged {
                    epoch,
                    batch,
                    components: values.to_string(),
                });
            }
            total += loss;
            sum.add_assign(&values);
            last = values;
            sgd.step(&mut model.parameters_mut(), &grads)?;
        }
        let losses = sum.scaled(1.0 / batches as f64);
        if !losses.is_finite() {
            return Err(NdaError::Diverged {
                epoch,
                batch: batches - 1,
                components: losses.to_string(),
            });
        }

        let (val_accuracy, _) = evaluate(model, selection)?;
        let (latents, _) = model.predict(&train.features)?;
        let diagnostics = latent_diagnostics(&latents, &train.labels, DEFAULT_RIDGE)?;
        records.push(EpochRecord {
            epoch,
            losses,
            total: total / batches as f64,
            val_accuracy,
            diagnostics,
            learning_rate: sgd.learning_rate(),
        });
        if best.as_ref().is_none_or(|b| val_accuracy > b.1) {
            best = Some((model.clone(), val_accuracy, Some(epoch)));
        }
        means = Some(class_means);
    }

    let (best_model, best_val_accuracy, best_epoch) = best.expect("at least one epoch ran");
    *model = best_model;
    let test_accuracy = if splits.test.is_empty() {
        None
    } else {
        Some(evaluate(model, &splits.test)?.0)
    };
    Ok(TrainReport {
        records,
        best_epoch,
        best_val_accuracy,
        test_accuracy,
        mean_refreshes,
        pair_fallbacks,
        final_means: means.expect("at least one epoch ran"),
    })
}

fn batch_step(
    model: &Model,
    pairs: &PairBatch,
    class_means: &ClassMeans,
    config: &TrainConfig,
    use_mean: bool,
    use_siamese: bool,
) -> Result<(LossValues, f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let (fa, fb, params) = model.forward_siamese(&mut g, &pairs.inputs_a, &pairs.inputs_b)?;
    let class_a = classification_loss(&mut g, fa.probs, &pairs.labels_a)?;
    let class_b = classification_loss(&mut g, fb.probs, &pairs.labels_b)?;
    let (mean_a, mean_b) = if use_mean {
        (
            mean_loss(
                &mut g,
                fa.latent,
                &pairs.labels_a,
                class_means,
                config.nda.mean_variant,
            )?,
            mean_loss(
                &mut g,
                fb.latent,
                &pairs.labels_b,
                class_means,
                config.nda.mean_variant,
            )?,
        )
    } else {
        let z = g.constant(Tensor::scalar(0.0));
        (z, z)
    };
    let siamese = if use_siamese {
        siamese_loss(&mut g, fa.latent, fb.latent, &pairs.different, &config.nda)?
    } else {
        g.constant(Tensor::scalar(0.0))
    };
    let terms = LossTerms {
        class_a,
        class_b,
        mean_a,
        mean_b,
        siamese,
    };
    let loss = nda_total_loss(&mut g, &terms, &config.nda)?;
    let grads = g.backward(loss)?;
    Ok((
        terms.values(&g),
        g.value(loss).item(),
        params.gradients(&grads),
    ))
}

/// Accuracy and per-sample predictions; argmax ties go to the lowest class.
pub fn evaluate(model: &Model, split: &Dataset) -> Result<(f64, Vec<ScoredPrediction>)> {
    if split.is_empty() {
        return Err(NdaError::contract("cannot evaluate on an empty split"));
    }
    let (_, probs) = model.predict(&split.features)?;
    let predictions = score_rows(&probs, split);
    let correct = predictions
        .iter()
        .zip(&split.labels)
        .filter(|(p, &l)| p.predicted == l)
        .count();
    Ok((correct as f64 / split.len() as f64, predictions))
}

/// Stratified, seeded split into train/validation/test by `fractions`.
/// Each class is shuffled independently; every split with a nonzero
/// fraction must receive at least one sample of every class.
pub fn split_dataset(dataset: &Dataset, fractions: [f64; 3], seed: u64) -> Result<Splits> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f))
        || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(NdaError::Config(format!(
            "split fractions must be in [0, 1] and sum to 1, got {fractions:?}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, "split"));
    let mut parts: [Vec<usize>; 3] = Default::default();
    for (class, mut idx) in dataset.indices_by_class().into_iter().enumerate() {
        if idx.is_empty() {
            continue;
        }
        idx.shuffle(&mut rng);
        let n = idx.len();
        let n_train = ((fractions[0] * n as f64).round() as usize).min(n);
        let n_val = ((fractions[1] * n as f64).round() as usize).min(n - n_train);
        let mut sizes = [n_train, n_val, n - n_train - n_val];
        if fractions[2] == 0.0 && sizes[2] > 0 {
            sizes[0] += sizes[2];
            sizes[2] = 0;
        }
        for (s, &f) in sizes.iter().zip(&fractions) {
            if f > 0.0 && *s == 0 {
                return Err(NdaError::Config(format!(
                    "class {class} has {n} samples, too few to stratify over fractions {fractions:?}"
                )));
            }
        }
        let mut rest = idx.as_slice();
        for (part, &s) in parts.iter_mut().zip(&sizes) {
            let (take, tail) = rest.split_at(s);
            part.extend_from_slice(take);
            rest = tail;
        }
    }
    let [train, val, test] = parts;
    Ok(Splits {
        train: dataset.subset(&train, format!("{}-train", dataset.name)),
        val: dataset.subset(&val, format!("{}-val", dataset.name)),
        test: dataset.subset(&test, format!("{}-test", dataset.name)),
    })
}

pub const EPOCHS_HEADER: &str = "epoch,class_a,class_b,mean_a,mean_b,siamese,total,val_accuracy,fisher_score,intra_distance,inter_distance,learning_rate";

pub fn render_epochs_csv(records: &[EpochRecord]) -> String {
    let mut out = format!("{EPOCHS_HEADER}\n");
    for r in records {
        let l = &r.losses;
        let d = &r.diagnostics;
        writeln!(
            out,
            "{},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?}",
            r.epoch,
            l.class_a,
            l.class_b,
            l.mean_a,
            l.mean_b,
            l.siamese,
            r.total,
            r.val_accuracy,
            d.fisher_score,
            d.intra_distance,
            d.inter_distance,
            r.learning_rate
        )
        .unwrap();
    }
    out
}

pub fn parse_epochs_csv(text: &str) -> Result<Vec<EpochRecord>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == EPOCHS_HEADER => {}
        _ => return Err(NdaError::parse(1, "missing epochs header")),
    }
    let mut out = Vec::new();
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let line_no = idx + 1;
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != 12 {
            return Err(NdaError::parse(
                line_no,
                format!("expected 12 cells, found {}", cells.len()),
            ));
        }
        let epoch = cells[0]
            .parse()
            .map_err(|_| NdaError::parse(line_no, format!("bad epoch {:?}", cells[0])))?;
        let mut v = [0.0; 11];
        for (slot, cell) in v.iter_mut().zip(&cells[1..]) {
            *slot = cell
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| NdaError::parse(line_no, format!("bad number {cell:?}")))?;
        }
        out.push(EpochRecord {
            epoch,
            losses: LossValues {
                class_a: v[0],
                class_b: v[1],
                mean_a: v[2],
                mean_b: v[3],
                siamese: v[4],
            },
            total: v[5],
            val_accuracy: v[6],
            diagnostics: LatentDiagnostics {
                fisher_score: v[7],
                intra_distance: v[8],
                inter_distance: v[9],
            },
            learning_rate: v[10],
        });
    }
    Ok(out)
}

pub fn render_means_csv(means: &ClassMeans) -> String {
    let d = means.means.cols();
    let mut out = String::from("class,count");
    for i in 0..d {
        write!(out, ",m{i}").unwrap();
    }
    out.push('\n');
    for j in 0..means.num_classes() {
        write!(out, "{},{}", j, means.counts[j]).unwrap();
        for v in means.mean(j) {
            write!(out, ",{v:?}").unwrap();
        }
        out.push('\n');
    }
    out
}

/// Human-readable summary; contains no paths or timestamps.
pub fn render_report(report: &TrainReport) -> String {
    let mut out = String::new();
    writeln!(out, "epochs = {}", report.records.len()).unwrap();
    match report.best_epoch {
        Some(e) => writeln!(out, "best_epoch = {e}").unwrap(),
        None => writeln!(out, "best_epoch = none").unwrap(),
    }
    writeln!(out, "best_val_accuracy = {:.6}", report.best_val_accuracy).unwrap();
    match report.test_accuracy {
        Some(a) => writeln!(out, "test_accuracy = {a:.6}").unwrap(),
        None => writeln!(out, "test_accuracy = none").unwrap(),
    }
    writeln!(out, "mean_refreshes = {}", report.mean_refreshes).unwrap();
    writeln!(out, "pair_fallbacks = {}", report.pair_fallbacks).unwrap();
    if let Some(last) = report.records.last() {
        writeln!(out, "final_total_loss = {:.6}", last.total).unwrap();
        writeln!(
            out,
            "final_fisher_score = {:.6}",
            last.diagnostics.fisher_score
        )
        .unwrap();
        writeln!(
            out,
            "final_intra_distance = {:.6}",
            last.diagnostics.intra_distance
        )
        .unwrap();
        writeln!(
            out,
            "final_inter_distance = {:.6}",
            last.diagnostics.inter_distance
        )
        .unwrap();
    }
    out
}
