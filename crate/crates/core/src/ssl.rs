//! Two-phase semi-supervised training with a deep ensemble.
//!
//! Phase 1 trains every member on cross-entropy over the labelled set plus
//! a KL consistency term between a weak and a strong perturbation of
//! unlabelled inputs. The ensemble then pseudo-labels the unlabelled pool
//! once, keeping samples whose averaged maximum class probability exceeds
//! the threshold. Phase 2 continues training on labelled ∪ pseudo-labelled
//! data; a member's stored predecessor is replaced only when its validation
//! accuracy strictly improves.

use std::fmt::Write as _;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Graph, Sgd, Tensor, Var};
use crate::data::{sub_seed, Dataset};
use crate::error::{NdaError, Result};
use crate::losses::{classification_loss, PROB_FLOOR};
use crate::model::Model;
use crate::ood::argmax;
use crate::train::{evaluate, split_dataset, train_from, Splits, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct SslConfig {
    /// fraction of the training split whose labels are kept
    pub labeled_fraction: f64,
    pub ensemble_size: usize,
    /// a sample is pseudo-labelled iff its averaged MCP is strictly above
    pub threshold: f64,
    pub phase1_epochs: usize,
    pub phase2_epochs: usize,
    pub noise_scale: f64,
    pub mask_fraction: f64,
    pub consistency_weight: f64,
    /// add the NDA terms of `train.nda` to the phase-2 loss
    pub nda_phase2: bool,
    /// optimisation settings shared by both phases; `epochs` is ignored
    pub train: TrainConfig,
    pub hidden: Vec<usize>,
    pub latent: usize,
}

impl Default for SslConfig {
    fn default() -> Self {
        SslConfig {
            labeled_fraction: 0.1,
            ensemble_size: 3,
            threshold: 0.95,
            phase1_epochs: 60,
            phase2_epochs: 60,
            noise_scale: 0.3,
            mask_fraction: 0.25,
            consistency_weight: 1.0,
            nda_phase2: false,
            train: TrainConfig::default(),
            hidden: vec![32],
            latent: 8,
        }
    }
}

impl SslConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(NdaError::Config(format!(
                "threshold must lie in (0, 1], got {}",
                self.threshold
            )));
        }
        if self.ensemble_size < 1 {
            return Err(NdaError::Config("ensemble_size must be at least 1".into()));
        }
        if !(self.labeled_fraction > 0.0 && self.labeled_fraction < 1.0) {
            return Err(NdaError::Config(format!(
                "labeled_fraction must lie in (0, 1), got {}",
                self.labeled_fraction
            )));
        }
        if self.phase1_epochs < 1 || self.phase2_epochs < 1 {
            return Err(NdaError::Config(
                "both phases need at least one epoch".into(),
            ));
        }
        if !(self.noise_scale >= 0.0) || !(0.0..1.0).contains(&self.mask_fraction) {
            return Err(NdaError::Config(
                "noise_scale must be >= 0 and mask_fraction in [0, 1)".into(),
            ));
        }
        if !(self.consistency_weight >= 0.0) {
            return Err(NdaError::Config("consistency_weight must be >= 0".into()));
        }
        let probe = TrainConfig {
            epochs: 1,
            ..self.train.clone()
        };
        probe.validate()
    }
}

/// Mean over rows of `KL(p_weak ‖ p_strong)` with both floored at 1e-12.
/// Gradients flow into both arguments; callers pass a constant `p_weak` to
/// train only the strong branch.
pub fn consistency_loss(g: &mut Graph, probs_weak: Var, probs_strong: Var) -> Result<Var> {
    let (a, b) = (
        g.value(probs_weak).shape().to_vec(),
        g.value(probs_strong).shape().to_vec(),
    );
    if a != b || a.len() != 2 {
        return Err(NdaError::Shape {
            op: "consistency_loss",
            left: a,
            right: b,
        });
    }
    let p = g.clamp_min(probs_weak, PROB_FLOOR)?;
    let q = g.clamp_min(probs_strong, PROB_FLOOR)?;
    let log_p = g.log(p)?;
    let log_q = g.log(q)?;
    let diff = g.sub(log_p, log_q)?;
    let weighted = g.mul(p, diff)?;
    let rows = g.sum_rows(weighted)?;
    g.mean(rows)
}

/// Scalar version of [`consistency_loss`] on plain tensors.
pub fn kl_rows(probs_weak: &Tensor, probs_strong: &Tensor) -> Result<f64> {
    if probs_weak.shape() != probs_strong.shape() || probs_weak.shape().len() != 2 {
        return Err(NdaError::Shape {
            op: "kl_rows",
            left: probs_weak.shape().to_vec(),
            right: probs_strong.shape().to_vec(),
        });
    }
    let n = probs_weak.rows();
    let total: f64 = (0..n)
        .map(|r| {
            probs_weak
                .row(r)
                .iter()
                .zip(probs_strong.row(r))
                .map(|(&p, &q)| {
                    let (p, q) = (p.max(PROB_FLOOR), q.max(PROB_FLOOR));
                    p * (p.ln() - q.ln())
                })
                .sum::<f64>()
        })
        .sum();
    Ok(total / n as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PerturbKind {
    /// additive Gaussian noise
    Weak,
    /// noise plus zeroing a fixed fraction of coordinates per row
    Strong,
}

pub fn perturb<R: Rng>(
    inputs: &Tensor,
    kind: PerturbKind,
    noise_scale: f64,
    mask_fraction: f64,
    rng: &mut R,
) -> Result<Tensor> {
    if !(noise_scale >= 0.0 && noise_scale.is_finite()) {
        return Err(NdaError::contract(format!(
            "noise scale must be >= 0, got {noise_scale}"
        )));
    }
    if !(0.0..1.0).contains(&mask_fraction) {
        return Err(NdaError::contract(format!(
            "mask fraction must lie in [0, 1), got {mask_fraction}"
        )));
    }
    let mut out = inputs.clone();
    let d = out.cols();
    let masked = (mask_fraction * d as f64).round() as usize;
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        if noise_scale > 0.0 {
            for v in row.iter_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *v += noise_scale * z;
            }
        }
        if kind == PerturbKind::Strong && masked > 0 {
            for c in index::sample(rng, d, masked) {
                row[c] = 0.0;
            }
        }
    }
    Ok(out)
}

/// Per-member outcome of one phase.
#[derive(Clone, Debug, PartialEq)]
pub struct MemberReport {
    pub member: usize,
    /// validation accuracy after each epoch
    pub val_history: Vec<f64>,
    /// accuracy of the stored snapshot when the phase ended
    pub val_accuracy: f64,
    /// epochs at which the stored snapshot was replaced
    pub replacements: Vec<usize>,
}

fn member_seed(seed: u64, member: usize) -> u64 {
    sub_seed(seed, &format!("member-{member}"))
}

/// Builds `size` members with distinct seeded initialisations.
pub fn build_ensemble(
    input: usize,
    hidden: &[usize],
    latent: usize,
    classes: usize,
    seed: u64,
    size: usize,
) -> Result<Vec<Model>> {
    (0..size)
        .map(|m| {
            Model::build(
                input,
                hidden,
                latent,
                classes,
                sub_seed(member_seed(seed, m), "init"),
            )
        })
        .collect()
}

fn train_member_phase1(
    model: &mut Model,
    member: usize,
    labeled: &Dataset,
    unlabeled: &Dataset,
    val: &Dataset,
    config: &SslConfig,
) -> Result<MemberReport> {
    let seed = member_seed(config.train.seed, member);
    let mut order_rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, "order"));
    let mut perturb_rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, "perturbation"));
    let mut sgd = Sgd::new(config.train.learning_rate, config.train.momentum)?;
    let bs = config.train.batch_size;
    let selection = if val.is_empty() { labeled } else { val };

    let mut order: Vec<usize> = (0..labeled.len()).collect();
    let mut best: Option<(Model, f64)> = None;
    let mut report = MemberReport {
        member,
        val_history: Vec::new(),
        val_accuracy: 0.0,
        replacements: Vec::new(),
    };
    for epoch in 0..config.phase1_epochs {
        order.shuffle(&mut order_rng);
        for (batch, chunk) in order.chunks(bs).enumerate() {
            let x = labeled.features.select_rows(chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| labeled.labels[i]).collect();
            let mut g = Graph::new();
            let params = model.register(&mut g);
            let out = model.forward_with(&mut g, &params, &x)?;
            let mut loss = classification_loss(&mut g, out.probs, &y)?;
            if !unlabeled.is_empty() && config.consistency_weight > 0.0 {
                let picks: Vec<usize> = (0..bs)
                    .map(|_| order_rng.random_range(0..unlabeled.len()))
                    .collect();
                let xu = unlabeled.features.select_rows(&picks);
                let weak = perturb(
                    &xu,
                    PerturbKind::Weak,
                    config.noise_scale,
                    0.0,
                    &mut perturb_rng,
                )?;
                let strong = perturb(
                    &xu,
                    PerturbKind::Strong,
                    config.noise_scale,
                    config.mask_fraction,
                    &mut perturb_rng,
                )?;
                // the weak view is the target and receives no gradient
                let (_, p_weak) = model.predict(&weak)?;
                let p_weak = g.constant(p_weak);
                let strong_out = model.forward_with(&mut g, &params, &strong)?;
                let kl = consistency_loss(&mut g, p_weak, strong_out.probs)?;
                let kl = g.scale(kl, config.consistency_weight)?;
                loss = g.add(loss, kl)?;
            }
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(NdaError::Diverged {
                    epoch,
                    batch,
                    components: format!("member {member} phase 1 loss {value}"),
                });
            }
            let grads = g.backward(loss)?;
            sgd.step(&mut model.parameters_mut(), &params.gradients(&grads))?;
        }
        let (acc, _) = evaluate(model, selection)?;
        report.val_history.push(acc);
        if best.as_ref().is_none_or(|b| acc > b.1) {
            best = Some((model.clone(), acc));
            report.replacements.push(epoch);
        }
    }
    let (snapshot, acc) = best.expect("at least one epoch");
    *model = snapshot;
    report.val_accuracy = acc;
    Ok(report)
}

/// Phase 1: each member independently on CE(labelled) plus the weighted
/// weak/strong consistency term on unlabelled data. Members run on separate
/// threads; each leaves with its best-validation snapshot.
pub fn phase1_train(
    models: &mut [Model],
    labeled: &Dataset,
    unlabeled: &Dataset,
    val: &Dataset,
    config: &SslConfig,
) -> Result<Vec<MemberReport>> {
    config.validate()?;
    if labeled.is_empty() {
        return Err(NdaError::contract("labelled set is empty"));
    }
    std::thread::scope(|s| {
        let handles: Vec<_> = models
            .iter_mut()
            .enumerate()
            .map(|(m, model)| {
                s.spawn(move || train_member_phase1(model, m, labeled, unlabeled, val, config))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("ensemble member panicked"))
            .collect()
    })
}

/// Row-wise average of the members' class probabilities.
pub fn ensemble_probs(models: &[Model], inputs: &Tensor) -> Result<Tensor> {
    let first = models
        .first()
        .ok_or_else(|| NdaError::contract("ensemble is empty"))?;
    let (_, mut avg) = first.predict(inputs)?;
    for m in &models[1..] {
        let (_, p) = m.predict(inputs)?;
        avg.data_mut()
            .iter_mut()
            .zip(p.data())
            .for_each(|(a, b)| *a += b);
    }
    let k = models.len() as f64;
    avg.data_mut().iter_mut().for_each(|v| *v /= k);
    Ok(avg)
}

/// Accuracy of the argmax of the averaged probabilities.
pub fn ensemble_accuracy(models: &[Model], split: &Dataset) -> Result<f64> {
    if split.is_empty() {
        return Err(NdaError::contract("cannot evaluate on an empty split"));
    }
    let probs = ensemble_probs(models, &split.features)?;
    let correct = (0..split.len())
        .filter(|&r| argmax(probs.row(r)).0 == split.labels[r])
        .count();
    Ok(correct as f64 / split.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabelSet {
    /// row indices into the unlabelled dataset
    pub rows: Vec<usize>,
    /// stable sample ids
    pub ids: Vec<usize>,
    pub labels: Vec<usize>,
    /// averaged maximum class probability, strictly above the threshold
    pub confidences: Vec<f64>,
    pub threshold: f64,
}

impl PseudoLabelSet {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// The selected unlabelled rows carrying their pseudo labels.
    pub fn to_dataset(&self, unlabeled: &Dataset) -> Dataset {
        let mut ds = unlabeled.subset(&self.rows, "pseudo");
        ds.labels = self.labels.clone();
        ds
    }
}

pub fn pseudo_label(
    models: &[Model],
    unlabeled: &Dataset,
    threshold: f64,
) -> Result<PseudoLabelSet> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(NdaError::contract(format!(
            "threshold must lie in (0, 1], got {threshold}"
        )));
    }
    let mut set = PseudoLabelSet {
        rows: Vec::new(),
        ids: Vec::new(),
        labels: Vec::new(),
        confidences: Vec::new(),
        threshold,
    };
    if unlabeled.is_empty() {
        return Ok(set);
    }
    let probs = ensemble_probs(models, &unlabeled.features)?;
    for r in 0..probs.rows() {
        let (label, conf) = argmax(probs.row(r));
        if conf > threshold {
            set.rows.push(r);
            set.ids.push(unlabeled.ids[r]);
            set.labels.push(label);
            set.confidences.push(conf);
        }
    }
    Ok(set)
}

pub fn render_pseudo_labels(set: &PseudoLabelSet) -> String {
    let mut out = String::from("id,label,confidence\n");
    for ((id, label), conf) in set.ids.iter().zip(&set.labels).zip(&set.confidences) {
        writeln!(out, "{id},{label},{conf:?}").unwrap();
    }
    out
}

/// Phase 2: each member continues on labelled ∪ pseudo-labelled data with a
/// fresh optimizer, competing against its phase-1 snapshot. Returns one
/// report per member plus a warning when the pseudo set is empty.
pub fn phase2_train(
    models: &mut [Model],
    labeled: &Dataset,
    pseudo: &PseudoLabelSet,
    unlabeled: &Dataset,
    val: &Dataset,
    phase1: &[MemberReport],
    config: &SslConfig,
) -> Result<(Vec<MemberReport>, Vec<String>)> {
    config.validate()?;
    let mut warnings = Vec::new();
    let data = if pseudo.is_empty() {
        warnings
            .push("pseudo-label set is empty; phase 2 continues on labelled data only".to_string());
        labeled.clone()
    } else {
        labeled.concat(&pseudo.to_dataset(unlabeled), "labelled+pseudo")?
    };
    let splits = Splits {
        train: data,
        val: val.clone(),
        test: val.subset(&[], "none"),
    };
    let reports = std::thread::scope(|s| {
        let handles: Vec<_> = models
            .iter_mut()
            .zip(phase1)
            .enumerate()
            .map(|(m, (model, prev))| {
                let splits = &splits;
                s.spawn(move || {
                    let mut cfg = TrainConfig {
                        epochs: config.phase2_epochs,
                        seed: sub_seed(member_seed(config.train.seed, m), "phase2"),
                        ..config.train.clone()
                    };
                    if !config.nda_phase2 {
                        cfg.nda.beta = 0.0;
                    }
                    let report = train_from(model, splits, &cfg, Some(prev.val_accuracy))?;
                    let val_history = report
                        .records
                        .iter()
                        .map(|r| r.val_accuracy)
                        .collect::<Vec<_>>();
                    // epochs at which a new best was set, given the incumbent
                    let mut best = prev.val_accuracy;
                    let replacements = val_history
                        .iter()
                        .enumerate()
                        .filter_map(|(e, &a)| {
                            (a > best).then(|| {
                                best = a;
                                e
                            })
                        })
                        .collect();
                    Ok(MemberReport {
                        member: m,
                        val_history,
                        val_accuracy: report.best_val_accuracy,
                        replacements,
                    })
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("ensemble member panicked"))
            .collect::<Result<Vec<_>>>()
    })?;
    Ok((reports, warnings))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SslReport {
    pub labeled: usize,
    pub unlabeled: usize,
    pub phase1: Vec<MemberReport>,
    pub phase1_ensemble_accuracy: f64,
    pub pseudo: PseudoLabelSet,
    /// fraction of pseudo labels matching the withheld true labels
    pub pseudo_label_accuracy: Option<f64>,
    pub phase2: Vec<MemberReport>,
    pub phase2_ensemble_accuracy: f64,
    pub warnings: Vec<String>,
}

/// Full pipeline on `splits`: the training split is divided (stratified)
/// into a labelled part and an unlabelled pool whose labels are withheld
/// from training and used only to audit pseudo labels.
pub fn run_ssl(splits: &Splits, config: &SslConfig) -> Result<(Vec<Model>, SslReport)> {
    config.validate()?;
    if splits.test.is_empty() {
        return Err(NdaError::contract("semi-supervised run needs a test split"));
    }
    let parts = split_dataset(
        &splits.train,
        [config.labeled_fraction, 1.0 - config.labeled_fraction, 0.0],
        sub_seed(config.train.seed, "labelled"),
    )?;
    let (labeled, unlabeled) = (parts.train, parts.val);
    if labeled.len() < labeled.num_classes {
        return Err(NdaError::Config(format!(
            "{} labelled samples cannot cover {} classes",
            labeled.len(),
            labeled.num_classes
        )));
    }
    let mut models = build_ensemble(
        labeled.dim(),
        &config.hidden,
        config.latent,
        labeled.num_classes,
        config.train.seed,
        config.ensemble_size,
    )?;
    let phase1 = phase1_train(&mut models, &labeled, &unlabeled, &splits.val, config)?;
    let phase1_ensemble_accuracy = ensemble_accuracy(&models, &splits.test)?;
    let pseudo = pseudo_label(&models, &unlabeled, config.threshold)?;
    let pseudo_label_accuracy = (!pseudo.is_empty()).then(|| {
        let hits = pseudo
            .rows
            .iter()
            .zip(&pseudo.labels)
            .filter(|(&r, &l)| unlabeled.labels[r] == l)
            .count();
        hits as f64 / pseudo.len() as f64
    });
    let (phase2, warnings) = phase2_train(
        &mut models,
        &labeled,
        &pseudo,
        &unlabeled,
        &splits.val,
        &phase1,
        config,
    )?;
    let phase2_ensemble_accuracy = ensemble_accuracy(&models, &splits.test)?;
    Ok((
        models,
        SslReport {
            labeled: labeled.len(),
            unlabeled: unlabeled.len(),
            phase1,
            phase1_ensemble_accuracy,
            pseudo,
            pseudo_label_accuracy,
            phase2,
            phase2_ensemble_accuracy,
            warnings,
        },
    ))
}

pub fn render_ssl_report(report: &SslReport) -> String {
    let mut out = String::new();
    writeln!(out, "labeled = {}", report.labeled).unwrap();
    writeln!(out, "unlabeled = {}", report.unlabeled).unwrap();
    for m in &report.phase1 {
        writeln!(
            out,
            "phase1_member_{}_val_accuracy = {:.6}",
            m.member, m.val_accuracy
        )
        .unwrap();
    }
    writeln!(
        out,
        "phase1_ensemble_test_accuracy = {:.6}",
        report.phase1_ensemble_accuracy
    )
    .unwrap();
    writeln!(out, "pseudo_threshold = {}", report.pseudo.threshold).unwrap();
    writeln!(out, "pseudo_labeled = {}", report.pseudo.len()).unwrap();
    match report.pseudo_label_accuracy {
        Some(a) => writeln!(out, "pseudo_label_accuracy = {a:.6}").unwrap(),
        None => writeln!(out, "pseudo_label_accuracy = none").unwrap(),
    }
    for m in &report.phase2 {
        writeln!(
            out,
            "phase2_member_{}_val_accuracy = {:.6} (predecessor updates: {})",
            m.member,
            m.val_accuracy,
            m.replacements.len()
        )
        .unwrap();
    }
    writeln!(
        out,
        "phase2_ensemble_test_accuracy = {:.6}",
        report.phase2_ensemble_accuracy
    )
    .unwrap();
    for w in &report.warnings {
        writeln!(out, "warning = {w}").unwrap();
    }
    out
}
