use std::collections::HashMap;
use std::fs;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use skipplan::corpus::*;
use skipplan::Error;

fn grammar_config(n_tasks: usize, n_actions: usize, per_task: usize, density: f64, zipf: f64) -> GrammarConfig {
    GrammarConfig {
        n_tasks,
        n_actions,
        actions_per_task: per_task,
        edge_density: density,
        zipf_exponent: zipf,
        swap_pairs: 0,
    }
}

/// Every permutation of `items` that respects all `edges`.
fn legal_orders(items: &[usize], edges: &[(usize, usize)]) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, rest: &mut Vec<usize>, edges: &[(usize, usize)], out: &mut Vec<Vec<usize>>) {
        if rest.is_empty() {
            out.push(prefix.clone());
            return;
        }
        for k in 0..rest.len() {
            let cand = rest[k];
            // cand may go next only if none of its predecessors is still pending
            if edges.iter().any(|&(u, v)| v == cand && rest.contains(&u)) {
                continue;
            }
            rest.remove(k);
            prefix.push(cand);
            rec(prefix, rest, edges, out);
            prefix.pop();
            rest.insert(k, cand);
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::new(), &mut items.to_vec(), edges, &mut out);
    out
}

fn is_subsequence(seq: &[usize], of: &[usize]) -> bool {
    let mut it = of.iter();
    seq.iter().all(|a| it.any(|b| b == a))
}

#[test]
fn sampled_videos_match_enumerated_orders() {
    for (seed, density) in [(1u64, 0.0), (2, 0.3), (3, 0.6), (4, 0.9), (5, 1.0)] {
        let cfg = GrammarConfig {
            swap_pairs: 1,
            ..grammar_config(4, 30, 7, density, 1.0)
        };
        let grammars = generate_grammar(&cfg, seed).unwrap();
        let emb = Embeddings::generate(30, 4, 4, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for g in &grammars {
            let orders = legal_orders(&g.actions, &g.edges);
            assert!(!orders.is_empty());
            assert_eq!(g.topological_order_count_bounded(usize::MAX), orders.len());
            for len in [3, 5, 7] {
                for id in 0..20 {
                    let v = sample_video(g, &emb, id, len, &mut rng).unwrap();
                    assert!(orders.iter().any(|o| is_subsequence(&v.actions, o)), "{:?}", v.actions);
                    assert!(g.accepts(&v.actions));
                }
            }
        }
    }
}

#[test]
fn zipf_inclusion_frequency_decreases_with_rank() {
    let cfg = grammar_config(4000, 60, 10, 0.5, 1.0);
    let grammars = generate_grammar(&cfg, 17).unwrap();
    let mut counts = vec![0usize; 60];
    for g in &grammars {
        for &a in &g.actions {
            counts[a] += 1;
        }
    }
    // bins of 6 ranks keep the Monte-Carlo noise well below the gaps
    let bins: Vec<usize> = counts.chunks(6).map(|c| c.iter().sum()).collect();
    for w in bins.windows(2) {
        assert!(w[0] >= w[1], "{bins:?}");
    }
    assert!(counts[0] > 3 * counts[59]);
}

#[test]
fn zero_exponent_gives_uniform_action_frequencies() {
    let cfg = CorpusConfig {
        grammar: grammar_config(1, 12, 12, 0.5, 0.0),
        n_videos: 10_000,
        min_video_len: 3,
        max_video_len: 9,
        signal_dim: 2,
        observation: ObservationConfig {
            noise_sigma: 0.0,
            nuisance_dim: 0,
            nuisance_scale: 0.0,
            ramp_gain: 1.0,
        },
        split_ratio: 0.7,
        seed: 3,
    };
    let corpus = Corpus::generate(&cfg).unwrap();
    let mut counts = vec![0f64; 12];
    for v in &corpus.videos {
        for &a in &v.actions {
            counts[a] += 1.0;
        }
    }
    let mean = counts.iter().sum::<f64>() / 12.0;
    for c in counts {
        assert!((c - mean).abs() <= 0.1 * mean, "count {c} vs mean {mean}");
    }
}

#[test]
fn swap_pair_orders_are_balanced() {
    let g = TaskGrammar {
        task: 0,
        actions: vec![4, 9],
        edges: vec![],
        swap_pairs: vec![(4, 9)],
    };
    let emb = Embeddings::generate(10, 1, 2, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 10_000;
    let forward = (0..n)
        .filter(|&id| sample_video(&g, &emb, id, 2, &mut rng).unwrap().actions == [4, 9])
        .count();
    assert!(forward >= 4000 && n - forward >= 4000, "{forward}");
}

fn single_block(states: [Vec<f64>; 2], sigma: f64, seed: u64) -> (Vec<f32>, Embeddings) {
    let emb = Embeddings::generate(3, 1, states[0].len(), 0);
    let mut v = PlanVideo {
        id: 0,
        task: 0,
        actions: vec![0],
        states: states.to_vec(),
        observations: Vec::new(),
    };
    let cfg = ObservationConfig {
        noise_sigma: sigma,
        nuisance_dim: 0,
        nuisance_scale: 1.0,
        ramp_gain: 1.0,
    };
    synthesize_observations(&mut v, &emb, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    (v.observations[1].clone(), emb)
}

#[test]
fn frame_mean_cannot_tell_ramp_direction() {
    let a = vec![0.3, -1.2, 2.0, 0.5];
    let b = vec![-0.7, 0.4, 1.1, -2.5];
    // the last block of a video carries no next-action hint
    let (fwd, _) = single_block([a.clone(), b.clone()], 0.0, 0);
    let (bwd, _) = single_block([b, a], 0.0, 0);
    let d = 4;
    for c in 0..d {
        let m1 = (fwd[c] + fwd[d + c] + fwd[2 * d + c]) / 3.0;
        let m2 = (bwd[c] + bwd[d + c] + bwd[2 * d + c]) / 3.0;
        assert!((m1 - m2).abs() < 1e-6);
        let r1 = fwd[2 * d + c] - fwd[c];
        let r2 = bwd[2 * d + c] - bwd[c];
        assert!((r1 + r2).abs() < 1e-6 && r1.abs() > 1e-3);
    }
}

#[test]
fn ramp_survives_small_noise() {
    let d = 64;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut total = 0.0;
    let draws = 1000;
    for k in 0..draws {
        let s0: Vec<f64> = (0..d).map(|_| rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng)).collect();
        let s1: Vec<f64> = (0..d).map(|_| rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng)).collect();
        let (noisy, _) = single_block([s0.clone(), s1.clone()], 0.1, k);
        let (clean, _) = single_block([s0, s1], 0.0, k);
        let ramp = |b: &[f32]| -> Vec<f64> { (0..d).map(|c| (b[2 * d + c] - b[c]) as f64).collect() };
        let (x, y) = (ramp(&noisy), ramp(&clean));
        let dot: f64 = x.iter().zip(&y).map(|(a, b)| a * b).sum();
        let nx = x.iter().map(|a| a * a).sum::<f64>().sqrt();
        let ny = y.iter().map(|a| a * a).sum::<f64>().sqrt();
        total += dot / (nx * ny);
    }
    assert!(total / draws as f64 > 0.9);
}

fn small_corpus(seed: u64, n_videos: usize) -> Corpus {
    let cfg = CorpusConfig {
        grammar: GrammarConfig {
            n_tasks: 3,
            n_actions: 20,
            actions_per_task: 8,
            ..GrammarConfig::default()
        },
        n_videos,
        min_video_len: 4,
        max_video_len: 8,
        signal_dim: 6,
        observation: ObservationConfig {
            noise_sigma: 0.5,
            nuisance_dim: 2,
            nuisance_scale: 1.0,
            ramp_gain: 1.0,
        },
        split_ratio: 0.7,
        seed,
    };
    Corpus::generate(&cfg).unwrap()
}

#[test]
fn video_generation_is_order_independent() {
    let c = small_corpus(8, 12);
    let cfg = &c.config;
    // regenerating a prefix reproduces the same videos
    let fewer = Corpus::generate(&CorpusConfig { n_videos: 5, ..cfg.clone() }).unwrap();
    assert_eq!(fewer.videos[..], c.videos[..5]);
    for v in &c.videos {
        assert_eq!(v.observations.len(), v.len() + 1);
        assert!(c.grammars[v.task].accepts(&v.actions));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn window_count_matches_arithmetic(seed in 0u64..1000, horizon in 2usize..10) {
        let c = small_corpus(seed, 3);
        for v in &c.videos {
            let n = window_instances(v, horizon).unwrap().len();
            prop_assert_eq!(n, (v.len() + 1).saturating_sub(horizon));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn split_is_a_partition(n in 1usize..60, ratio in 0.05f64..0.95, seed in any::<u64>()) {
        let c = small_corpus(1, 20);
        let mut instances = c.instances(2).unwrap();
        instances.truncate(n);
        let n = instances.len();
        let s = split_dataset(instances.clone(), ratio, seed).unwrap();
        prop_assert_eq!(s.len(), n);
        prop_assert!((s.train.len() as f64 - ratio * n as f64).abs() <= 1.0);
        let key = |i: &PlanInstance| (i.video, i.offset);
        let mut seen: HashMap<(usize, usize), usize> = HashMap::new();
        for i in s.train.iter().chain(&s.test) {
            *seen.entry(key(i)).or_default() += 1;
        }
        prop_assert_eq!(seen.len(), n);
        prop_assert!(seen.values().all(|&k| k == 1));
        prop_assert!(instances.iter().all(|i| seen.contains_key(&key(i))));
    }
}

#[test]
fn dataset_round_trips_exactly() {
    for seed in 0..3 {
        let c = small_corpus(seed, 15);
        let split = c.split(3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let meta = save_dataset(&split, dir.path(), Some(&c.config)).unwrap();
        let (back, meta2) = load_dataset(dir.path()).unwrap();
        assert_eq!(back, split);
        assert_eq!(meta, meta2);
        assert_eq!(meta.corpus.as_ref(), Some(&c.config));
        // byte-level: re-saving reproduces the payload
        let dir2 = tempfile::tempdir().unwrap();
        save_dataset(&back, dir2.path(), Some(&c.config)).unwrap();
        for f in [io::INSTANCES_FILE, io::META_FILE] {
            assert_eq!(fs::read(dir.path().join(f)).unwrap(), fs::read(dir2.path().join(f)).unwrap());
        }
    }
}

#[test]
fn same_seed_gives_identical_files() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let c = small_corpus(21, 10);
        save_dataset(&c.split(4).unwrap(), d.path(), Some(&c.config)).unwrap();
    }
    for f in [io::INSTANCES_FILE, io::META_FILE] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
    }
}

#[test]
fn truncated_payload_fails_checksum() {
    let c = small_corpus(2, 10);
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&c.split(3).unwrap(), dir.path(), None).unwrap();
    let path = dir.path().join(io::INSTANCES_FILE);
    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(Error::Checksum(_))));
}

#[test]
fn wrong_version_is_rejected() {
    let c = small_corpus(2, 5);
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&c.split(3).unwrap(), dir.path(), None).unwrap();
    let meta_path = dir.path().join(io::META_FILE);
    let text = fs::read_to_string(&meta_path).unwrap().replace("\"format_version\": 1", "\"format_version\": 9");
    fs::write(&meta_path, text).unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(Error::Version { found: 9, .. })));
}

#[test]
fn empty_test_list_round_trips() {
    let c = small_corpus(4, 6);
    let split = DatasetSplit {
        train: c.instances(3).unwrap(),
        test: Vec::new(),
        seed: 0,
        ratio: 0.7,
    };
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&split, dir.path(), None).unwrap();
    assert_eq!(load_dataset(dir.path()).unwrap().0, split);
}
