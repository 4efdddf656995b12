use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::grad_check;

fn small_config() -> ModelConfig {
    ModelConfig {
        input_dim: 8,
        block_widths: vec![12, 10],
        attention_dim: 6,
        n_classes: 2,
    }
}

fn random_features(m: usize, d: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(m, d, (0..m * d).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

fn bag_of(features: Tensor) -> InstanceBag {
    InstanceBag::new("t", 1, features, None).unwrap()
}

fn set_param(model: &mut MilModel, name: &str, value: f64) {
    let id = model.params().find(name).unwrap();
    let p = model.params_mut().get_mut(id);
    p.value = Tensor::filled(p.value.rows(), p.value.cols(), value);
}

#[test]
fn config_validation() {
    let mut cfg = small_config();
    cfg.block_widths = vec![4];
    assert!(MilModel::new(cfg, 0).is_err());
    let mut cfg = small_config();
    cfg.n_classes = 1;
    assert!(MilModel::new(cfg, 0).is_err());
}

#[test]
fn every_parameter_has_a_known_group() {
    let model = MilModel::new(small_config(), 1).unwrap();
    assert_eq!(
        model.group_names(),
        [
            "encoder.block1",
            "encoder.block2",
            "encoder.norm",
            "attention",
            "bag_classifier",
            "instance_head"
        ]
    );
    for id in model.params().ids() {
        assert!(model.params().get(id).name.starts_with(model.group_of(id)));
    }
    assert!(!model.is_group_trainable(GROUP_NORM));
}

#[test]
fn initialization_is_bounded_and_seeded() {
    let a = MilModel::new(small_config(), 3).unwrap();
    let b = MilModel::new(small_config(), 3).unwrap();
    let c = MilModel::new(small_config(), 4).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    let w = &a.params().get(a.params().find("encoder.block1.weight").unwrap()).value;
    let bound = 1.0 / 8f64.sqrt();
    assert!(w.as_slice().iter().all(|v| v.abs() <= bound));
}

#[test]
fn norm_group_cannot_be_unfrozen() {
    let mut model = MilModel::new(small_config(), 1).unwrap();
    assert!(matches!(
        model.set_group_trainable(GROUP_NORM, true),
        Err(MilError::InvalidConfig(_))
    ));
    assert!(model.set_group_trainable("nope", false).is_err());
    model.set_group_trainable("encoder.block1", false).unwrap();
    model.set_group_trainable("encoder.block2", false).unwrap();
    assert!(model.encoder_frozen());
}

#[test]
fn encode_is_a_per_row_function() {
    let model = MilModel::new(small_config(), 2).unwrap();
    let x = random_features(1, 8, 1);
    assert_eq!(model.encode(&x).unwrap().rows(), 1);

    let x = random_features(5, 8, 2);
    let dup = x.select_rows(&[0, 3, 3, 1]);
    let e = model.encode(&dup).unwrap();
    assert_eq!(e.row(1), e.row(2));

    let perm = [4, 2, 0, 3, 1];
    let full = model.encode(&x).unwrap();
    let permuted = model.encode(&x.select_rows(&perm)).unwrap();
    assert_eq!(permuted, full.select_rows(&perm));
    assert!(matches!(
        model.encode(&random_features(2, 7, 0)),
        Err(MilError::Shape { .. })
    ));
}

#[test]
fn attention_pool_degenerate_bags() {
    let model = MilModel::new(small_config(), 5).unwrap();
    let h = model.encode(&random_features(1, 8, 9)).unwrap();
    let (reps, weights) = model.attention_pool(&h).unwrap();
    assert_eq!(weights.as_slice(), &[1.0, 1.0]);
    for c in 0..2 {
        assert_eq!(reps.row(c), h.row(0));
    }

    let h2 = h.select_rows(&[0, 0]);
    let (reps, weights) = model.attention_pool(&h2).unwrap();
    assert_eq!(weights.as_slice(), &[0.5, 0.5, 0.5, 0.5]);
    for c in 0..2 {
        for (a, b) in reps.row(c).iter().zip(h.row(0)) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}

#[test]
fn bag_logits_zero_and_symmetric_heads() {
    let mut model = MilModel::new(small_config(), 6).unwrap();
    for name in [
        "bag_classifier.0.weight",
        "bag_classifier.1.weight",
        "bag_classifier.0.bias",
        "bag_classifier.1.bias",
    ] {
        set_param(&mut model, name, 0.0);
    }
    let reps = random_features(2, 10, 3);
    assert_eq!(model.bag_logits(&reps).unwrap(), vec![0.0, 0.0]);
    assert_eq!(class_probabilities(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);

    for name in ["bag_classifier.0.weight", "bag_classifier.1.weight"] {
        set_param(&mut model, name, 0.37);
    }
    let same = Tensor::new(2, 10, [reps.row(0), reps.row(0)].concat()).unwrap();
    let logits = model.bag_logits(&same).unwrap();
    assert_eq!(logits[0], logits[1]);
}

#[test]
fn probabilities_are_normalized() {
    let cfg = ModelConfig::new(8);
    let model = MilModel::new(cfg, 7).unwrap();
    let pred = model.predict(&bag_of(random_features(20, 8, 13))).unwrap();
    assert!((pred.class_probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-9);
}

#[test]
fn attention_rows_sum_to_one_for_many_sizes() {
    let model = MilModel::new(ModelConfig::new(8), 11).unwrap();
    for m in [1, 2, 17, 1024] {
        let pred = model.predict(&bag_of(random_features(m, 8, m as u64))).unwrap();
        assert_eq!(pred.attention.shape(), (2, m));
        assert_eq!(pred.instance_logits.shape(), (m, 2));
        for c in 0..2 {
            assert!((pred.attention.row(c).iter().sum::<f64>() - 1.0).abs() < 1e-9, "m={m}");
        }
    }
}

#[test]
fn repeated_instance_gets_uniform_attention() {
    let model = MilModel::new(small_config(), 8).unwrap();
    let x = random_features(1, 8, 4).select_rows(&[0; 7]);
    let pred = model.predict(&bag_of(x)).unwrap();
    for v in pred.attention.as_slice() {
        assert!((v - 1.0 / 7.0).abs() < 1e-15);
    }
}

#[test]
fn empty_bag_prediction_errors() {
    let model = MilModel::new(small_config(), 8).unwrap();
    let empty = InstanceBag {
        bag_id: "e".into(),
        label: 0,
        features: Tensor::zeros(0, 8),
        coords: None,
        original_indices: vec![],
    };
    assert!(matches!(model.predict(&empty), Err(MilError::TooFewInstances(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]
    #[test]
    fn predictions_are_permutation_invariant(seed in any::<u64>(), m in 1usize..40) {
        let model = MilModel::new(small_config(), seed ^ 0x55).unwrap();
        let x = random_features(m, 8, seed);
        let mut perm: Vec<usize> = (0..m).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(1)));
        let a = model.predict(&bag_of(x.clone())).unwrap();
        let b = model.predict(&bag_of(x.select_rows(&perm))).unwrap();
        for (p, q) in a.class_probabilities.iter().zip(&b.class_probabilities) {
            prop_assert!((p - q).abs() < 1e-9);
        }
        for c in 0..2 {
            for (j, &i) in perm.iter().enumerate() {
                prop_assert!((b.attention.get(c, j) - a.attention.get(c, i)).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn pseudo_label_examples() {
    let row = [0.1, 0.9, 0.5, 0.05];
    let pairs = |v: Vec<PseudoLabel>| v.into_iter().map(|p| (p.instance, p.label)).collect::<Vec<_>>();
    assert_eq!(pairs(pseudo_labels(&row, 1).unwrap()), vec![(1, 1), (3, 0)]);
    assert_eq!(
        pairs(pseudo_labels(&row, 2).unwrap()),
        vec![(1, 1), (2, 1), (3, 0), (0, 0)]
    );
    let three = pseudo_labels(&[0.2, 0.3, 0.5], 2).unwrap();
    assert_eq!(pairs(three), vec![(2, 1), (0, 0)]);
    assert!(matches!(pseudo_labels(&[1.0], 8), Err(MilError::TooFewInstances(_))));
}

#[test]
fn pseudo_labels_break_ties_by_index() {
    let row = [0.25; 4];
    let first = pseudo_labels(&row, 2).unwrap();
    assert_eq!(first, pseudo_labels(&row, 2).unwrap());
    let got: Vec<_> = first.iter().map(|p| (p.instance, p.label)).collect();
    assert_eq!(got, vec![(0, 1), (1, 1), (2, 0), (3, 0)]);
}

/// Runs the head with hand-set logits so the loss cases are exact.
fn loss_for(logits: [f64; 2], inst_logits: [f64; 2], label: usize, c_inst: f64, pseudo: &[PseudoLabel]) -> Result<f64> {
    let mut g = Graph::new();
    let l = g.input();
    let il = g.input();
    let probs = g.softmax_rows(l);
    let nodes = ModelNodes {
        embeddings: l,
        logits: l,
        probabilities: probs,
        attention: vec![],
        instance_logits: il,
    };
    let loss = build_total_loss(&mut g, &nodes, label, 2, 2, pseudo, 1.0 - c_inst, c_inst)?;
    let inst = Tensor::new(2, 2, [inst_logits, inst_logits].concat()).unwrap();
    g.forward(&ParamStore::new(), &[Tensor::row_vector(&logits).unwrap(), inst])?;
    Ok(g.value(loss)?.get(0, 0))
}

#[test]
fn total_loss_cases() {
    let pseudo = [
        PseudoLabel { instance: 0, label: 1 },
        PseudoLabel { instance: 1, label: 0 },
    ];
    let bag_only = loss_for([0.3, -1.2], [0.0, 0.0], 1, 0.0, &[]).unwrap();
    let probs = class_probabilities(&[0.3, -1.2]).unwrap();
    assert_eq!(bag_only, bag_cross_entropy(&probs, 1));

    let uniform = loss_for([0.0, 0.0], [0.0, 0.0], 0, 0.3, &pseudo).unwrap();
    assert!((uniform - std::f64::consts::LN_2).abs() < 1e-15);

    // Instance 0 is labelled 1 and instance 1 is labelled 0, so only the bag
    // term can be perfect here; use per-instance logits that match instead.
    let mut g = Graph::new();
    let l = g.input();
    let il = g.input();
    let probs = g.softmax_rows(l);
    let nodes = ModelNodes {
        embeddings: l,
        logits: l,
        probabilities: probs,
        attention: vec![],
        instance_logits: il,
    };
    let loss = build_total_loss(&mut g, &nodes, 1, 2, 2, &pseudo, 0.7, 0.3).unwrap();
    let inst = Tensor::from_rows(&[vec![-40.0, 40.0], vec![40.0, -40.0]]).unwrap();
    g.forward(&ParamStore::new(), &[Tensor::row_vector(&[-40.0, 40.0]).unwrap(), inst])
        .unwrap();
    assert!(g.value(loss).unwrap().get(0, 0) <= 1e-9);

    assert!(matches!(
        loss_for([0.0, 0.0], [0.0, 0.0], 0, 0.3, &[]),
        Err(MilError::InvalidConfig(_))
    ));
    let mut g = Graph::new();
    let l = g.input();
    let nodes = ModelNodes {
        embeddings: l,
        logits: l,
        probabilities: l,
        attention: vec![],
        instance_logits: l,
    };
    assert!(build_total_loss(&mut g, &nodes, 0, 2, 2, &pseudo, 0.6, 0.6).is_err());
}

#[test]
fn full_model_gradients_match_finite_differences() {
    // A step of 1e-6 stays inside one linear piece of every ReLU here;
    // larger steps straddle activation kinks (see the acceptance suite).
    let err = gradient_check(ModelConfig::new(8), 7, 7, 12, 1e-6).unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn all_zero_inputs_give_a_finite_check() {
    let mut model = MilModel::new(small_config(), 7).unwrap();
    let x = Tensor::zeros(4, 8);
    let mut g = Graph::new();
    let (_, nodes) = model.build(&mut g);
    let loss = build_total_loss(&mut g, &nodes, 0, 2, 4, &[], 1.0, 0.0).unwrap();
    let err = grad_check(&mut g, loss, model.params_mut(), &[x], 1e-3).unwrap();
    assert!(err.is_finite());
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let mut model = MilModel::new(small_config(), 3).unwrap();
    model.set_group_trainable("encoder.block1", false).unwrap();
    let ckpt = Checkpoint {
        model,
        epoch: 17,
        validation_loss: 0.25,
        validation_auc: f64::NAN,
        config_fingerprint: 0xdead_beef,
    };
    let bytes = encode_checkpoint(&ckpt).unwrap();
    assert_eq!(&bytes[..4], b"MILC");
    let back = decode_checkpoint(&bytes).unwrap();
    assert_eq!(back.model, ckpt.model);
    assert_eq!(back.epoch, 17);
    assert!(!back.model.is_group_trainable("encoder.block1"));
    assert_eq!(encode_checkpoint(&back).unwrap(), bytes);

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode_checkpoint(&bad), Err(MilError::Format(_))));
    assert!(matches!(
        decode_checkpoint(&bytes[..bytes.len() - 3]),
        Err(MilError::Format(_))
    ));
}

#[test]
fn calibrated_norm_standardizes_embeddings() {
    let mut model = MilModel::new(ModelConfig::new(6), 3).unwrap();
    let a = random_features(40, 6, 4);
    let b = random_features(25, 6, 5);
    model.calibrate_norm(&[&a, &b]).unwrap();
    let ea = model.encode(&a).unwrap();
    let eb = model.encode(&b).unwrap();
    let h = model.config().embedding_dim();
    for j in 0..h {
        let col: Vec<f64> = (0..40)
            .map(|i| ea.get(i, j))
            .chain((0..25).map(|i| eb.get(i, j)))
            .collect();
        let mean = col.iter().sum::<f64>() / 65.0;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 65.0;
        assert!(mean.abs() < 1e-9, "unit {j} mean {mean}");
        assert!(var < 1e-12 || (var - 1.0).abs() < 1e-9, "unit {j} var {var}");
    }
    let again = model.clone();
    model.calibrate_norm(&[&a, &b]).unwrap();
    assert_eq!(model, again);
    assert!(model.calibrate_norm(&[]).is_err());
    assert!(!model.is_group_trainable("encoder.norm"));
}
