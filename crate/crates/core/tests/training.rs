use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use skipplan::corpus::{Corpus, CorpusConfig, GrammarConfig, ObservationConfig, PlanInstance};
use skipplan::model::{subchain_positions, Batch, SkipPlanConfig, SkipPlanModel, Variant};
use skipplan::tensor::{Tape, Tensor};
use skipplan::training::{focal_loss, loss_chain, loss_total, lr_at, mean_loss, train, LossConfig, TrainConfig};
use skipplan::Error;

fn small_corpus(seed: u64) -> Corpus {
    Corpus::generate(&CorpusConfig {
        grammar: GrammarConfig {
            n_tasks: 2,
            n_actions: 10,
            actions_per_task: 6,
            ..GrammarConfig::default()
        },
        n_videos: 24,
        min_video_len: 5,
        max_video_len: 6,
        signal_dim: 6,
        observation: ObservationConfig {
            noise_sigma: 0.1,
            nuisance_dim: 2,
            nuisance_scale: 1.0,
            ramp_gain: 1.0,
        },
        split_ratio: 0.7,
        seed,
    })
    .unwrap()
}

fn small_model(corpus: &Corpus, horizon: usize, variant: Variant, seed: u64) -> SkipPlanModel {
    let config = SkipPlanConfig {
        d_model: 16,
        n_heads: 2,
        memory_size: 4,
        feedforward_dim: 32,
        variant,
        state_dim: corpus.config.signal_dim,
        ..SkipPlanConfig::desk(horizon, corpus.config.grammar.n_actions, corpus.config.feature_dim())
    };
    SkipPlanModel::new(config, seed).unwrap()
}

fn first_instances(corpus: &Corpus, horizon: usize, n: usize) -> Vec<PlanInstance> {
    corpus.instances(horizon).unwrap().into_iter().take(n).collect()
}

fn quick(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        base_lr: 0.05,
        batch_size: 4,
        seed,
        ..TrainConfig::default()
    }
}

/// Softmax of a logit row, computed directly.
fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

fn focal_oracle(p: f64, gamma: f64) -> f64 {
    -(1.0 - p).powf(gamma) * p.ln()
}

#[test]
fn focal_spot_values() {
    let uniform = focal_loss(&[vec![0.25; 4]], &[2], 0.0).unwrap();
    assert!((uniform - 4f64.ln()).abs() < 1e-6);
    assert!((uniform - 1.3863).abs() < 1e-4);
    let confident = focal_loss(&[vec![0.9, 0.1]], &[0], 2.0).unwrap();
    assert!((confident - 0.01 * -(0.9f64.ln())).abs() < 1e-6);
    assert!((confident - 1.054e-3).abs() < 1e-6);
}

#[test]
fn focal_gamma_zero_is_cross_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let rows: Vec<Vec<f64>> = (0..100)
        .map(|_| softmax(&(0..6).map(|_| rng.gen_range(-4.0..4.0)).collect::<Vec<f64>>()))
        .collect();
    let targets: Vec<usize> = (0..100).map(|_| rng.gen_range(0..6)).collect();
    let ce = rows.iter().zip(&targets).map(|(r, &y)| -r[y].ln()).sum::<f64>() / 100.0;
    assert!((focal_loss(&rows, &targets, 0.0).unwrap() - ce).abs() < 1e-12);
    for gamma in [0.5, 1.5, 2.0] {
        assert!(focal_loss(&rows, &targets, gamma).unwrap() <= ce);
    }
}

#[test]
fn fused_tape_loss_matches_direct_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (b, t, c) = (3, 4, 5);
    let data: Vec<f64> = (0..b * t * c).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let targets: Vec<usize> = (0..b * t).map(|_| rng.gen_range(0..c)).collect();
    let positions = [1, 3, 4];
    for gamma in [0.0, 1.5] {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::new(vec![b, t, c], data.clone()).unwrap());
        let v = loss_chain(&mut tape, logits, &targets, &positions, gamma).unwrap();
        let mut expected = 0.0;
        for s in 0..b {
            for &p in &positions {
                let row = s * t + p - 1;
                let probs = softmax(&data[row * c..(row + 1) * c]);
                expected += focal_oracle(probs[targets[row]], gamma);
            }
        }
        expected /= (b * positions.len()) as f64;
        assert!((tape.value(v).item() - expected).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn focal_is_bounded_by_ce_and_monotone(p in 1e-6f64..1.0, q in 1e-6f64..1.0, gamma in 0.0f64..5.0) {
        let row = |x: f64| vec![x, 1.0 - x];
        let fp = focal_loss(&[row(p)], &[0], gamma).unwrap();
        let fq = focal_loss(&[row(q)], &[0], gamma).unwrap();
        prop_assert!(fp <= -p.ln() + 1e-15);
        prop_assert!(fp >= 0.0);
        if p < q {
            prop_assert!(fp >= fq);
        }
    }

    #[test]
    fn lr_schedule_is_bounded_and_non_increasing(epoch in 0usize..2000) {
        let c = TrainConfig::default();
        let now = lr_at(epoch, &c);
        prop_assert!(now <= c.base_lr && now >= c.lr_floor);
        prop_assert!(lr_at(epoch + 1, &c) <= now);
    }
}

#[test]
fn total_loss_is_sum_of_terms() {
    let corpus = small_corpus(1);
    let t = 4;
    let model = small_model(&corpus, t, Variant::SkipPlan, 2);
    let inst = first_instances(&corpus, t, 6);
    let refs: Vec<&PlanInstance> = inst.iter().collect();
    let batch = Batch::from_instances(&refs).unwrap();
    let loss = LossConfig::new(1.5);
    let mut tape = Tape::with_params(&model.params);
    let out = model.forward(&mut tape, &batch).unwrap();
    let terms = loss_total(&mut tape, model.config(), &out, &batch, &loss).unwrap();

    let targets = batch.targets();
    let n_a = model.config().n_actions;
    let chain = |tape: &Tape<'_>, logits, positions: &[usize]| {
        let v: &Tensor = tape.value(logits);
        let mut acc = 0.0;
        for s in 0..batch.len() {
            for &p in positions {
                let row = s * t + p - 1;
                acc += focal_oracle(softmax(&v.data()[row * n_a..(row + 1) * n_a])[targets[row]], 1.5);
            }
        }
        acc / (batch.len() * positions.len()) as f64
    };
    let l_n: f64 = out
        .decoder_logits
        .iter()
        .zip(subchain_positions(t))
        .map(|(&l, pos)| chain(&tape, l, &pos))
        .sum();
    let l_t = chain(&tape, out.final_logits, &[1, 2, 3, 4]);
    assert!((tape.value(terms.l_n.unwrap()).item() - l_n).abs() < 1e-12);
    assert!((tape.value(terms.l_t).item() - l_t).abs() < 1e-12);
    assert!((tape.value(terms.total).item() - (l_n + l_t)).abs() < 1e-12);
}

#[test]
fn subchain_losses_are_separated() {
    let corpus = small_corpus(1);
    let t = 5;
    let model = small_model(&corpus, t, Variant::SkipPlan, 0);
    let inst = first_instances(&corpus, t, 4);
    let refs: Vec<&PlanInstance> = inst.iter().collect();
    let batch = Batch::from_instances(&refs).unwrap();
    for (i, pos) in subchain_positions(t).iter().enumerate() {
        let mut tape = Tape::with_params(&model.params);
        let out = model.forward(&mut tape, &batch).unwrap();
        let l = loss_chain(&mut tape, out.decoder_logits[i], &batch.targets(), pos, 1.5).unwrap();
        let grads = tape.backprop(l).unwrap();
        for j in 1..=t - 2 {
            let norm: f64 = model
                .decoder_param_names(j)
                .iter()
                .map(|n| grads.by_name(n).unwrap().data().iter().map(|g| g * g).sum::<f64>())
                .sum();
            assert_eq!(norm > 0.0, j == i + 1, "loss of decoder {} reached decoder {j}", i + 1);
        }
        let acc: f64 = model
            .params
            .names()
            .filter(|n| n.starts_with("accumulator."))
            .map(|n| grads.by_name(n).unwrap().data().iter().map(|g| g.abs()).sum::<f64>())
            .sum();
        assert_eq!(acc, 0.0);
    }
}

#[test]
fn lr_schedule_values() {
    let c = TrainConfig::default();
    assert_eq!(lr_at(0, &c), 0.02);
    assert_eq!(lr_at(99, &c), 0.02);
    assert!((lr_at(100, &c) - 0.002).abs() < 1e-15);
    assert!((lr_at(149, &c) - 0.002).abs() < 1e-15);
    assert!((lr_at(150, &c) - 0.0002).abs() < 1e-15);
    assert!((lr_at(160, &c) - 0.0002).abs() < 1e-15);
    assert!((lr_at(200, &c) - 0.00002).abs() < 1e-15);
    assert_eq!(lr_at(10_000, &c), c.lr_floor);
    let zero = TrainConfig { base_lr: 0.0, ..c };
    assert_eq!(lr_at(0, &zero), 0.0);
    assert_eq!(lr_at(500, &zero), 0.0);
}

#[test]
fn zero_learning_rate_leaves_parameters_untouched() {
    let corpus = small_corpus(2);
    let mut model = small_model(&corpus, 4, Variant::SkipPlan, 1);
    let before = model.params.clone();
    let config = TrainConfig { base_lr: 0.0, ..quick(2, 0) };
    let log = train(&mut model, &first_instances(&corpus, 4, 8), &config, &LossConfig::new(1.5), None).unwrap();
    assert_eq!(log.epochs.len(), 2);
    for ((_, a), (_, b)) in model.params.iter().zip(before.iter()) {
        assert_eq!(a.value, b.value, "{}", a.name);
    }
}

#[test]
fn training_reduces_loss() {
    let mut ratios = Vec::new();
    for seed in 0..3 {
        let corpus = small_corpus(seed);
        let inst = first_instances(&corpus, 4, 16);
        let mut model = small_model(&corpus, 4, Variant::SkipPlan, seed);
        let loss = LossConfig::new(1.5);
        let before = mean_loss(&model, &inst, &loss, 16, None).unwrap().total;
        train(&mut model, &inst, &quick(50, seed), &loss, None).unwrap();
        let after = mean_loss(&model, &inst, &loss, 16, None).unwrap().total;
        ratios.push(after / before);
    }
    ratios.sort_by(f64::total_cmp);
    assert!(ratios[1] < 1.0, "{ratios:?}");
}

#[test]
fn every_variant_trains() {
    let corpus = small_corpus(4);
    for variant in Variant::ALL {
        let mut model = small_model(&corpus, 4, variant, 0);
        let log = train(
            &mut model,
            &first_instances(&corpus, 4, 8),
            &quick(2, 0),
            &LossConfig::new(1.5),
            Some(&corpus.embeddings),
        )
        .unwrap();
        let e = &log.epochs[1];
        assert!(e.l_total.is_finite());
        if variant == Variant::SkipPlan || variant == Variant::StateSupervised {
            assert!((e.l_total - e.l_n - e.l_t).abs() < 1e-9);
        } else {
            assert_eq!(e.l_n, 0.0);
        }
    }
}

#[test]
fn training_is_deterministic() {
    let corpus = small_corpus(5);
    let inst = first_instances(&corpus, 5, 12);
    let run = || {
        let mut model = small_model(&corpus, 5, Variant::SkipPlan, 3);
        let log = train(&mut model, &inst, &quick(3, 9), &LossConfig::new(1.5), None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        model.save(dir.path()).unwrap();
        (log.deterministic_csv(), std::fs::read(dir.path().join("model.skpl")).unwrap())
    };
    assert_eq!(run(), run());
    let csv = run().0;
    assert!(csv.starts_with("epoch,l_n,l_t,l_total,lr\n"));
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn divergence_is_reported() {
    let corpus = small_corpus(6);
    let mut model = small_model(&corpus, 4, Variant::NoDecouple, 0);
    let config = TrainConfig { base_lr: 1e300, ..quick(3, 0) };
    match train(&mut model, &first_instances(&corpus, 4, 8), &config, &LossConfig::new(0.0), None) {
        Err(Error::Divergence { .. }) => {}
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn invalid_loss_positions_are_rejected() {
    let corpus = small_corpus(7);
    let mut model = small_model(&corpus, 4, Variant::NoDecouple, 0);
    let loss = LossConfig {
        positions: Some(vec![1, 5]),
        ..LossConfig::new(1.5)
    };
    assert!(matches!(
        train(&mut model, &first_instances(&corpus, 4, 4), &quick(1, 0), &loss, None),
        Err(Error::Config(_))
    ));
}
