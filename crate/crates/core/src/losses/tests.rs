use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::gradient_check;
use crate::model::{Dense, ParamVars};

fn value_of(build: impl FnOnce(&mut Graph) -> Result<Var>) -> f64 {
    let mut g = Graph::new();
    let v = build(&mut g).unwrap();
    g.value(v).item()
}

fn means_of(rows: &[&[f64]]) -> ClassMeans {
    let latents = Tensor::from_rows(rows).unwrap();
    let labels: Vec<usize> = (0..rows.len()).collect();
    ClassMeans::from_latents(&latents, &labels, rows.len(), 0).unwrap()
}

fn identity_model() -> Model {
    Model::from_layers(vec![
        Dense {
            weight: Tensor::identity(2),
            bias: Tensor::zeros(vec![2]),
            relu: false,
        },
        Dense {
            weight: Tensor::identity(2),
            bias: Tensor::zeros(vec![2]),
            relu: false,
        },
    ])
    .unwrap()
}

#[test]
fn classification_loss_uniform_is_ln2() {
    let v = value_of(|g| {
        let p = g.constant(Tensor::from_rows(&[[0.5, 0.5]]).unwrap());
        classification_loss(g, p, &[1])
    });
    assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
}

#[test]
fn classification_loss_perfect_and_analytic() {
    let v = value_of(|g| {
        let p = g.constant(Tensor::from_rows(&[[0.0, 1.0], [1.0, 0.0]]).unwrap());
        classification_loss(g, p, &[1, 0])
    });
    assert_eq!(v, 0.0);
    let v = value_of(|g| {
        let p = g.constant(Tensor::from_rows(&[[0.25, 0.75]]).unwrap());
        classification_loss(g, p, &[1])
    });
    assert!((v + 0.75f64.ln()).abs() < 1e-15);
}

#[test]
fn classification_loss_floors_zero_probability() {
    let mut g = Graph::new();
    let p = g.constant(Tensor::from_rows(&[[1.0, 0.0]]).unwrap());
    let l = classification_loss(&mut g, p, &[1]).unwrap();
    assert!((g.value(l).item() + PROB_FLOOR.ln()).abs() < 1e-9);
    assert_eq!(g.clamp_events(), 1);
}

#[test]
fn class_means_of_identity_latent() {
    let ds = Dataset::new(
        "t",
        Tensor::from_rows(&[[0.0, 0.0], [5.0, 1.0], [2.0, 2.0]]).unwrap(),
        vec![0, 1, 0],
        3,
    )
    .unwrap();
    let m = compute_class_means(&identity_model(), &ds, 2, 4).unwrap();
    assert_eq!(m.mean(0), &[1.0, 1.0]);
    assert_eq!(m.mean(1), &[5.0, 1.0]);
    assert_eq!(m.counts, vec![2, 1, 0]);
    assert_eq!(m.absent_classes(), vec![2]);
    assert_eq!(m.epoch, 4);
}

#[test]
fn class_means_batched_equals_unbatched() {
    let model = Model::build(3, &[5], 4, 3, 21).unwrap();
    let rows: Vec<[f64; 3]> = (0..17)
        .map(|i| [i as f64 * 0.1, (i as f64).cos(), -0.3 * i as f64])
        .collect();
    let ds = Dataset::new(
        "t",
        Tensor::from_rows(&rows).unwrap(),
        (0..17).map(|i| i % 3).collect(),
        3,
    )
    .unwrap();
    let one = compute_class_means(&model, &ds, 1, 0).unwrap();
    let all = compute_class_means(&model, &ds, 100, 0).unwrap();
    for (a, b) in one.means.data().iter().zip(all.means.data()) {
        assert!((a - b).abs() < 1e-12);
    }
    // global mean is the count-weighted average of class means
    for d in 0..4 {
        let weighted: f64 = (0..3)
            .map(|j| all.counts[j] as f64 * all.mean(j)[d])
            .sum::<f64>()
            / 17.0;
        assert!((weighted - all.global_mean[d]).abs() < 1e-10);
    }
}

#[test]
fn mean_loss_l2_cases() {
    let means = means_of(&[&[0.0, 0.0], &[1.0, 1.0]]);
    let v = value_of(|g| {
        let l = g.constant(Tensor::from_rows(&[[0.0, 0.0], [1.0, 1.0]]).unwrap());
        mean_loss_l2(g, l, &[0, 1], &means)
    });
    assert_eq!(v, 0.0);
    let v = value_of(|g| {
        let l = g.constant(Tensor::from_rows(&[[3.0, 4.0]]).unwrap());
        mean_loss_l2(g, l, &[0], &means)
    });
    assert_eq!(v, 5.0);
    // symmetric points around the mean contribute equally
    let left = value_of(|g| {
        let l = g.constant(Tensor::from_rows(&[[0.0, 1.0]]).unwrap());
        mean_loss_l2(g, l, &[1], &means)
    });
    let right = value_of(|g| {
        let l = g.constant(Tensor::from_rows(&[[2.0, 1.0]]).unwrap());
        mean_loss_l2(g, l, &[1], &means)
    });
    assert_eq!(left, right);
}

#[test]
fn mean_loss_l2_names_missing_class() {
    let means =
        ClassMeans::from_latents(&Tensor::from_rows(&[[1.0]]).unwrap(), &[0], 3, 0).unwrap();
    let mut g = Graph::new();
    let l = g.constant(Tensor::from_rows(&[[1.0]]).unwrap());
    let err = mean_loss_l2(&mut g, l, &[2], &means).unwrap_err();
    assert!(err.to_string().contains("class 2"), "{err}");
}

#[test]
fn class_means_are_constants_in_the_graph() {
    let means = means_of(&[&[0.0, 0.0], &[1.0, 1.0]]);
    let mut g = Graph::new();
    let l = g.param(Tensor::from_rows(&[[3.0, 4.0]]).unwrap());
    let loss = mean_loss_l2(&mut g, l, &[0], &means).unwrap();
    let grads = g.backward(loss).unwrap();
    // gradient of ‖l − μ‖ is the unit vector (l − μ)/‖l − μ‖
    let g = grads.wrt(l);
    assert!((g.data()[0] - 0.6).abs() < 1e-15 && (g.data()[1] - 0.8).abs() < 1e-15);
}

#[test]
fn prototypical_dominant_and_symmetric() {
    let means = means_of(&[&[0.0], &[10.0]]);
    let v = value_of(|g| {
        let l = g.constant(Tensor::from_rows(&[[0.0]]).unwrap());
        mean_loss_prototypical(g, l, &[0], &means)
    });
    assert!(v.abs() < 1e-40);
    let v = value_of(|g| {
        let l = g.constant(Tensor::from_rows(&[[5.0]]).unwrap());
        mean_loss_prototypical(g, l, &[0], &means)
    });
    assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
}

/// Direct scalar evaluation of cross-entropy over softmax(−‖x − μ_j‖²).
fn prototypical_oracle(x: f64, means: &[f64], label: usize) -> f64 {
    let logits: Vec<f64> = means.iter().map(|m| -(x - m) * (x - m)).collect();
    let z: f64 = logits.iter().map(|l| l.exp()).sum();
    -(logits[label].exp() / z).ln()
}

#[test]
fn prototypical_three_class_hand_case() {
    let expected = prototypical_oracle(0.5, &[0.0, 1.0, 2.0], 0);
    // ln(2 + e^-2)
    assert!((expected - 0.7586236757).abs() < 1e-9);
    let means = means_of(&[&[0.0], &[1.0], &[2.0]]);
    let v = value_of(|g| {
        let l = g.constant(Tensor::from_rows(&[[0.5]]).unwrap());
        mean_loss_prototypical(g, l, &[0], &means)
    });
    assert!((v - expected).abs() < 1e-12);
}

#[test]
fn prototypical_requires_every_mean() {
    let means =
        ClassMeans::from_latents(&Tensor::from_rows(&[[1.0]]).unwrap(), &[0], 2, 0).unwrap();
    let mut g = Graph::new();
    let l = g.constant(Tensor::from_rows(&[[1.0]]).unwrap());
    assert!(mean_loss_prototypical(&mut g, l, &[0], &means).is_err());
}

fn siamese_value(
    a: &[[f64; 2]],
    b: &[[f64; 2]],
    different: &[bool],
    variant: SiameseVariant,
) -> f64 {
    let cfg = NdaConfig {
        siamese_variant: variant,
        margin: 1.0,
        ..NdaConfig::default()
    };
    value_of(|g| {
        let la = g.constant(Tensor::from_rows(a).unwrap());
        let lb = g.constant(Tensor::from_rows(b).unwrap());
        siamese_loss(g, la, lb, different, &cfg)
    })
}

#[test]
fn siamese_cases() {
    for v in [SiameseVariant::Literal, SiameseVariant::Margin] {
        assert_eq!(
            siamese_value(&[[1.0, 2.0]], &[[1.0, 2.0]], &[false], v),
            0.0
        );
    }
    assert_eq!(
        siamese_value(
            &[[0.0, 0.0]],
            &[[0.0, 2.0]],
            &[true],
            SiameseVariant::Literal
        ),
        -2.0
    );
    assert_eq!(
        siamese_value(
            &[[0.0, 0.0]],
            &[[0.0, 0.0]],
            &[true],
            SiameseVariant::Margin
        ),
        1.0
    );
    // beyond the margin there is no repulsion
    assert_eq!(
        siamese_value(
            &[[0.0, 0.0]],
            &[[0.0, 3.0]],
            &[true],
            SiameseVariant::Margin
        ),
        0.0
    );
}

#[test]
fn siamese_margin_is_monotone_for_same_class() {
    let mut last = -1.0;
    for step in 0..20 {
        let d = step as f64 * 0.25;
        let v = siamese_value(&[[0.0, 0.0]], &[[d, 0.0]], &[false], SiameseVariant::Margin);
        assert!(v > last);
        last = v;
    }
}

#[test]
fn total_loss_weights() {
    let cfg = NdaConfig {
        alpha: 1.0,
        beta: 1e-3,
        gamma: 1.0,
        ..NdaConfig::default()
    };
    let run = |cfg: &NdaConfig, vals: [f64; 5]| {
        value_of(|g| {
            let v: Vec<Var> = vals
                .iter()
                .map(|&x| g.constant(Tensor::scalar(x)))
                .collect();
            let terms = LossTerms {
                class_a: v[0],
                class_b: v[1],
                mean_a: v[2],
                mean_b: v[3],
                siamese: v[4],
            };
            nda_total_loss(g, &terms, cfg)
        })
    };
    assert!((run(&cfg, [1.0, 1.0, 2.0, 2.0, 3.0]) - 2.007).abs() < 1e-12);
    assert_eq!(run(&cfg, [0.0; 5]), 0.0);
    let no_beta = NdaConfig {
        beta: 0.0,
        ..cfg.clone()
    };
    assert_eq!(run(&no_beta, [1.0, 2.0, 5.0, 6.0, 7.0]), 3.0);
    let gamma = NdaConfig {
        gamma: 2.0,
        beta: 1.0,
        ..cfg.clone()
    };
    // gamma only scales the Siamese term
    assert_eq!(run(&gamma, [0.0, 0.0, 1.0, 1.0, 3.0]), 8.0);
    let negative = NdaConfig { alpha: -1.0, ..cfg };
    let mut g = Graph::new();
    let z = g.constant(Tensor::scalar(0.0));
    let terms = LossTerms {
        class_a: z,
        class_b: z,
        mean_a: z,
        mean_b: z,
        siamese: z,
    };
    assert!(nda_total_loss(&mut g, &terms, &negative).is_err());
}

#[test]
fn config_validation() {
    assert!(NdaConfig::default().validate().is_ok());
    assert!(NdaConfig {
        alpha: 0.0,
        beta: 0.0,
        ..NdaConfig::default()
    }
    .validate()
    .is_err());
    assert!(NdaConfig {
        margin: -1.0,
        ..NdaConfig::default()
    }
    .validate()
    .is_err());
    assert!(NdaConfig {
        pair_fraction: 1.5,
        ..NdaConfig::default()
    }
    .validate()
    .is_err());
    assert_eq!(
        "prototypical".parse::<MeanLossVariant>().unwrap(),
        MeanLossVariant::Prototypical
    );
    assert!("cosine".parse::<SiameseVariant>().is_err());
}

fn toy_dataset() -> Dataset {
    let rows = [
        [0.9, -0.2, 0.4, 1.1],
        [1.2, 0.1, 0.3, 0.8],
        [-0.5, 1.4, -0.2, 0.3],
        [-0.8, 1.1, 0.1, 0.6],
        [0.2, -1.3, 1.5, -0.4],
        [0.4, -0.9, 1.2, -0.7],
        [1.0, 0.3, 0.6, 0.9],
        [-0.6, 0.8, -0.4, 0.2],
    ];
    Dataset::new(
        "toy",
        Tensor::from_rows(&rows).unwrap(),
        vec![0, 0, 1, 1, 2, 2, 0, 1],
        3,
    )
    .unwrap()
}

/// Full weighted loss on a paired toy batch, built from parameter handles.
fn toy_total_loss(
    g: &mut Graph,
    vars: &[Var],
    model: &Model,
    batch: &PairBatch,
    means: &ClassMeans,
    cfg: &NdaConfig,
) -> Result<Var> {
    let pv = ParamVars::from_vars(vars.to_vec());
    let a = model.forward_with(g, &pv, &batch.inputs_a)?;
    let b = model.forward_with(g, &pv, &batch.inputs_b)?;
    let terms = LossTerms {
        class_a: classification_loss(g, a.probs, &batch.labels_a)?,
        class_b: classification_loss(g, b.probs, &batch.labels_b)?,
        mean_a: mean_loss(g, a.latent, &batch.labels_a, means, cfg.mean_variant)?,
        mean_b: mean_loss(g, b.latent, &batch.labels_b, means, cfg.mean_variant)?,
        siamese: siamese_loss(g, a.latent, b.latent, &batch.different, cfg)?,
    };
    nda_total_loss(g, &terms, cfg)
}

#[test]
fn total_loss_passes_gradient_check() {
    let ds = toy_dataset();
    let model = Model::build(4, &[5], 3, 3, 13).unwrap();
    let means = compute_class_means(&model, &ds, 8, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let batch = sample_pairs(&ds, 8, 0.5, &mut rng).unwrap();
    let params: Vec<Tensor> = model.parameters().into_iter().cloned().collect();
    for mean_variant in [MeanLossVariant::L2, MeanLossVariant::Prototypical] {
        for siamese_variant in [SiameseVariant::Literal, SiameseVariant::Margin] {
            let cfg = NdaConfig {
                beta: 0.5,
                margin: 2.0,
                mean_variant,
                siamese_variant,
                ..NdaConfig::default()
            };
            let report = gradient_check(&params, 1e-6, |g, vars| {
                toy_total_loss(g, vars, &model, &batch, &means, &cfg)
            })
            .unwrap();
            assert!(
                report.max_rel_error < 1e-4,
                "{mean_variant} {siamese_variant}: {}",
                report.max_rel_error
            );
            assert!(report.checked > 0);
        }
    }
}

#[test]
fn zero_beta_removes_mean_and_siamese_gradients() {
    let ds = toy_dataset();
    let model = Model::build(4, &[], 3, 3, 13).unwrap();
    let means = compute_class_means(&model, &ds, 8, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let batch = sample_pairs(&ds, 8, 0.5, &mut rng).unwrap();
    let grad_for = |cfg: &NdaConfig| {
        let mut g = Graph::new();
        let pv = model.register(&mut g);
        let loss = toy_total_loss(&mut g, pv.vars(), &model, &batch, &means, cfg).unwrap();
        pv.gradients(&g.backward(loss).unwrap())
    };
    let nda = grad_for(&NdaConfig {
        beta: 0.0,
        ..NdaConfig::default()
    });
    let ce = grad_for(&NdaConfig {
        beta: 0.0,
        gamma: 7.0,
        margin: 3.0,
        ..NdaConfig::default()
    });
    assert_eq!(nda, ce);
}

#[test]
fn pair_sampling_fractions() {
    let ds = toy_dataset();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let all_same = sample_pairs(&ds, 16, 1.0, &mut rng).unwrap();
    assert!(all_same.different.iter().all(|&d| !d));
    let all_diff = sample_pairs(&ds, 16, 0.0, &mut rng).unwrap();
    assert!(all_diff.different.iter().all(|&d| d));
    let half = sample_pairs(&ds, 9, 0.5, &mut rng).unwrap();
    // round(4.5) = 5 same-class pairs
    assert_eq!(half.different.iter().filter(|&&d| !d).count(), 5);
    for i in 0..half.len() {
        assert_eq!(half.different[i], half.labels_a[i] != half.labels_b[i]);
        assert_eq!(half.inputs_a.row(i), ds.features.row(half.indices_a[i]));
    }
}

#[test]
fn pair_sampling_is_deterministic() {
    let ds = toy_dataset();
    let a = sample_pairs(&ds, 8, 0.5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let b = sample_pairs(&ds, 8, 0.5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn pair_sampling_falls_back_for_singleton_classes() {
    let ds = Dataset::new(
        "s",
        Tensor::from_rows(&[[0.0], [1.0], [2.0]]).unwrap(),
        vec![0, 1, 2],
        3,
    )
    .unwrap();
    let batch = sample_pairs(&ds, 6, 1.0, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    assert_eq!(batch.fallbacks, 6);
    assert!(batch.different.iter().all(|&d| d));

    let one_class = Dataset::new(
        "o",
        Tensor::from_rows(&[[0.0], [1.0]]).unwrap(),
        vec![0, 0],
        1,
    )
    .unwrap();
    assert!(sample_pairs(&one_class, 4, 0.0, &mut ChaCha8Rng::seed_from_u64(2)).is_err());
    assert!(sample_pairs(&one_class, 4, 1.0, &mut ChaCha8Rng::seed_from_u64(2)).is_ok());
}

/// Batch-local-mean decomposition `Σ_j (N_j/N) Σ_{i∈j} ‖x_i − μ_j^B‖²`.
fn batch_mean_decomposition(rows: &[Vec<f64>], labels: &[usize]) -> f64 {
    let n = rows.len() as f64;
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut total = 0.0;
    for j in 0..classes {
        let members: Vec<&Vec<f64>> = rows
            .iter()
            .zip(labels)
            .filter(|(_, &l)| l == j)
            .map(|(r, _)| r)
            .collect();
        if members.is_empty() {
            continue;
        }
        let nj = members.len() as f64;
        let dim = members[0].len();
        let mu: Vec<f64> = (0..dim)
            .map(|d| members.iter().map(|r| r[d]).sum::<f64>() / nj)
            .collect();
        let scatter: f64 = members
            .iter()
            .map(|r| {
                r.iter()
                    .zip(&mu)
                    .map(|(x, m)| (x - m) * (x - m))
                    .sum::<f64>()
            })
            .sum();
        total += nj / n * scatter;
    }
    total
}

proptest! {
    #[test]
    fn mean_loss_is_permutation_invariant(seed in 0u64..1000) {
        let ds = toy_dataset();
        let model = Model::build(4, &[3], 2, 3, seed).unwrap();
        let means = compute_class_means(&model, &ds, 8, 0).unwrap();
        let (latent, _) = model.predict(&ds.features).unwrap();
        let perm = [7, 2, 5, 0, 3, 6, 1, 4];
        let base = value_of(|g| { let l = g.constant(latent.clone()); mean_loss_l2(g, l, &ds.labels, &means) });
        let labels: Vec<usize> = perm.iter().map(|&i| ds.labels[i]).collect();
        let permuted = value_of(|g| { let l = g.constant(latent.select_rows(&perm)); mean_loss_l2(g, l, &labels, &means) });
        prop_assert!((base - permuted).abs() < 1e-12);
    }

    #[test]
    fn pair_scatter_matches_batch_mean_decomposition(
        rows in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 3), 2..24),
        label_seed in prop::collection::vec(0usize..4, 24),
    ) {
        let labels: Vec<usize> = label_seed[..rows.len()].to_vec();
        let expected = batch_mean_decomposition(&rows, &labels);
        let got = value_of(|g| {
            let l = g.constant(Tensor::from_rows(&rows).unwrap());
            same_class_pair_scatter(g, l, &labels)
        });
        prop_assert!((got - expected).abs() <= 1e-10 * expected.abs().max(1.0));
    }
}
