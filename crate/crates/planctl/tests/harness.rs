use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use planctl::commands::{cmd_ablate, cmd_eval, cmd_generate, cmd_report, cmd_train, horizon_dir};
use planctl::config::{ArmConfig, ExperimentConfig, RunSpec};
use planctl::registry::{self, Scale};
use planctl::runner::{RunRecord, RECORD_FILE, RUN_SPEC_FILE, TRAIN_LOG_FILE};
use proptest::prelude::*;
use skipplan::corpus::{window_instances, Corpus, CorpusConfig};
use skipplan::metrics::Restriction;
use skipplan::model::{SkipPlanModel, TimeLayerKind, Variant};
use skipplan::tensor::Tensor;
use skipplan::Error;

fn tiny() -> ExperimentConfig {
    let mut c = registry::experiment("table4cde-decoupling", Scale::Acceptance).unwrap();
    c.horizons = vec![4];
    c.seeds = vec![0, 1];
    c.restrictions = vec![Restriction::Positions(vec![1, 2, 4])];
    c.corpus.n_videos = 40;
    c.corpus.grammar.n_tasks = 3;
    c.model.d_model = 16;
    c.model.n_heads = 2;
    c.model.memory_size = 4;
    c.model.feedforward_dim = 32;
    c.train.epochs = 2;
    c
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_planctl"))
}

fn read_tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn is_hash(s: &str) -> bool {
    s.len() == 64 && s.bytes().all(|b| b.is_ascii_hexdigit())
}

fn assert_rows_hashed(csv: &str) {
    let mut lines = csv.lines();
    assert!(lines.next().unwrap().ends_with(",config_hash"));
    let mut n = 0;
    for line in lines {
        assert!(is_hash(line.rsplit(',').next().unwrap()), "row without hash: {line}");
        n += 1;
    }
    assert!(n > 0);
}

#[test]
fn default_generate_covers_all_horizons() {
    let config = CorpusConfig::default();
    let corpus = Corpus::generate(&config).unwrap();
    assert_eq!(corpus.grammars.len(), 18);
    let dir = tempfile::tempdir().unwrap();
    let splits = cmd_generate(&config, 7, &[3, 4, 5, 6], dir.path()).unwrap();
    let corpus = Corpus::generate(&CorpusConfig { seed: 7, ..config }).unwrap();
    for g in splits {
        let expected: usize = corpus.videos.iter().map(|v| (v.len() + 1).saturating_sub(g.horizon)).sum();
        assert_eq!(g.train + g.test, expected, "T = {}", g.horizon);
        assert!(g.train > 0 && g.test > 0);
        let ideal = 0.7 * expected as f64;
        assert!((g.train as f64 - ideal).abs() <= 1.0, "ratio not honoured at T = {}", g.horizon);
        assert!(horizon_dir(dir.path(), g.horizon).join("meta.json").exists());
    }
    let v = &corpus.videos[0];
    assert_eq!(window_instances(v, 3).unwrap().len(), v.len() - 2);
}

#[test]
fn generate_is_byte_deterministic() {
    let config = tiny().corpus;
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    cmd_generate(&config, 3, &[3, 4], a.path()).unwrap();
    cmd_generate(&config, 3, &[3, 4], b.path()).unwrap();
    assert_eq!(read_tree(a.path()), read_tree(b.path()));
    let c = tempfile::tempdir().unwrap();
    cmd_generate(&config, 4, &[3, 4], c.path()).unwrap();
    assert_ne!(read_tree(a.path()), read_tree(c.path()));
}

#[test]
fn train_writes_recomputable_record_and_eval_is_stable() {
    let config = tiny();
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    cmd_generate(&config.corpus, 2, &[5], &data).unwrap();
    let arm = ArmConfig::new("skip-plan", Variant::SkipPlan);
    let spec = config.run(5, &arm, 2);
    let run = dir.path().join("run");
    let record = cmd_train(&spec, &data, &run).unwrap();

    let model = SkipPlanModel::load(&run.join("checkpoint")).unwrap();
    assert_eq!(model.decoders().len(), 3);

    let persisted: RunSpec = serde_json::from_slice(&fs::read(run.join(RUN_SPEC_FILE)).unwrap()).unwrap();
    assert_eq!(persisted.hash(), record.config_hash);
    let on_disk: RunRecord = serde_json::from_slice(&fs::read(run.join(RECORD_FILE)).unwrap()).unwrap();
    assert_eq!(on_disk, record);
    assert_eq!(record.train_log.as_deref(), Some(Path::new(TRAIN_LOG_FILE)));
    let log = fs::read_to_string(run.join(TRAIN_LOG_FILE)).unwrap();
    assert_rows_hashed(&log);
    assert_eq!(log.lines().count(), 1 + config.train.epochs);

    let r = Restriction::Positions(vec![1, 3, 5]);
    let e1 = cmd_eval(&run, &data, "test", &r, &dir.path().join("e1")).unwrap();
    let e2 = cmd_eval(&run.join("checkpoint"), &data, "test", &r, &dir.path().join("e2")).unwrap();
    assert_eq!(e1, e2);
    for f in ["metrics.csv", "profile.csv"] {
        let a = fs::read(dir.path().join("e1").join(f)).unwrap();
        assert_eq!(a, fs::read(dir.path().join("e2").join(f)).unwrap());
        assert_rows_hashed(std::str::from_utf8(&a).unwrap());
    }
    assert_eq!(e1.config_hash, record.config_hash);
    assert!(e1.metrics_csv.contains("\"1,3,5\""));
    assert_eq!(e1.profile.positions, [1, 3, 5]);

    let err = cmd_eval(&run, &horizon_dir(&data, 5), "valid", &Restriction::Full, &dir.path().join("e3")).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    cmd_generate(&config.corpus, 2, &[4], &data).unwrap();
    let err = cmd_eval(&run, &horizon_dir(&data, 4), "test", &Restriction::Full, &dir.path().join("e4")).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn zero_accumulator_is_at_most_modal_sequence_chance() {
    let config = tiny();
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    cmd_generate(&config.corpus, 0, &[3], &data).unwrap();
    let spec = config.run(3, &ArmConfig::new("skip-plan", Variant::SkipPlan), 0);
    let mut model = SkipPlanModel::new(spec.model.clone(), 0).unwrap();
    let names: Vec<String> = model.params.names().filter(|n| n.starts_with("accumulator")).map(String::from).collect();
    for name in names {
        let shape = model.params.by_name(&name).unwrap().value.shape().to_vec();
        model.params.set_value(&name, Tensor::zeros(&shape)).unwrap();
    }
    let ckpt = dir.path().join("ckpt");
    model.save(&ckpt).unwrap();
    let out = cmd_eval(&ckpt, &data, "test", &Restriction::Full, &dir.path().join("e")).unwrap();

    let (split, _) = skipplan::corpus::load_dataset(&horizon_dir(&data, 3)).unwrap();
    let mut counts = std::collections::HashMap::new();
    for inst in &split.test {
        *counts.entry(inst.actions.clone()).or_insert(0usize) += 1;
    }
    let modal = *counts.values().max().unwrap() as f64 / split.test.len() as f64;
    let zeros = counts.get(&vec![0, 0, 0]).copied().unwrap_or(0) as f64 / split.test.len() as f64;
    assert_eq!(out.metrics.success_rate, zeros);
    assert!(out.metrics.success_rate <= modal);
}

#[test]
fn ablate_is_deterministic_and_every_row_is_hashed() {
    let config = tiny();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = cmd_ablate(&config, 1, a.path()).unwrap();
    let rb = cmd_ablate(&config, 2, b.path()).unwrap();
    assert_eq!(ra, rb);
    assert_eq!(ra.len(), 4);
    for f in ["results.csv", "profiles.csv", "config.json"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let results = fs::read_to_string(a.path().join("results.csv")).unwrap();
    assert_rows_hashed(&results);
    assert_rows_hashed(&fs::read_to_string(a.path().join("profiles.csv")).unwrap());
    // 4 runs x (full + 1 restriction) + 2 arms x 2 restrictions median rows.
    assert_eq!(results.lines().count(), 1 + 8 + 4);
    let pairs: Vec<&str> = results.lines().filter(|l| l.contains(",0,\"full\"")).collect();
    assert!(pairs[0].contains("no-decouple") && pairs[1].contains("skip-plan"));

    assert_eq!(ExperimentConfig::load(&a.path().join("config.json")).unwrap(), config);
    for r in &ra {
        let spec: RunSpec = serde_json::from_slice(
            &fs::read(a.path().join("runs").join(format!("{}_T{}_s{}", r.arm, r.horizon, r.seed)).join(RUN_SPEC_FILE))
                .unwrap(),
        )
        .unwrap();
        assert_eq!(spec.hash(), r.config_hash);
    }

    let md1 = cmd_report(a.path()).unwrap();
    let plot1 = fs::read(a.path().join("profiles_plot.csv")).unwrap();
    let md2 = cmd_report(a.path()).unwrap();
    assert_eq!(md1, md2);
    assert_eq!(fs::read_to_string(a.path().join("report.md")).unwrap(), md1);
    assert_eq!(fs::read(a.path().join("profiles_plot.csv")).unwrap(), plot1);
    assert_rows_hashed(std::str::from_utf8(&plot1).unwrap());
    // One profile row per timestep per horizon and arm.
    assert_eq!(std::str::from_utf8(&plot1).unwrap().lines().count(), 1 + 2 * 4);
    for line in md1.lines().filter(|l| l.starts_with("| 4 ")) {
        assert!(line.trim_end().ends_with("` |"), "row without hash: {line}");
    }
}

#[test]
fn report_on_empty_directory_fails() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(cmd_report(dir.path()), Err(Error::Empty(_))));
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin().args(["ablate", "table9-nothing"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));

    let mut config = tiny();
    config.seeds = vec![0];
    config.variants.truncate(1);
    config.train.base_lr = 1e300;
    let path = dir.path().join("diverge.json");
    config.save(&path).unwrap();
    let out = bin()
        .args(["ablate", "--config"])
        .arg(&path)
        .arg("--out")
        .arg(dir.path().join("d"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));

    fs::write(&path, "{\"experiment\": 3}").unwrap();
    let out = bin().args(["ablate", "--config"]).arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(2));

    let out = bin().args(["report", "--out"]).arg(dir.path().join("missing")).output().unwrap();
    assert_eq!(out.status.code(), Some(1));

    let out = bin().args(["train", "--data"]).arg(dir.path().join("nodata")).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn cli_generate_train_eval_report() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tiny.json");
    tiny().save(&path).unwrap();
    let run = |args: &[&str]| {
        let out = bin().current_dir(dir.path()).args(args).output().unwrap();
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    };
    let printed = run(&["generate", "--config", "tiny.json", "--seed", "1", "--T", "4", "--out", "data"]);
    assert!(printed.starts_with("T=4: "));
    run(&[
        "train", "--config", "tiny.json", "--T", "4", "--variant", "no-decouple", "--gamma", "0", "--seed", "1",
        "--restriction", "1,2,4", "--out", "runs/nd",
    ]);
    let spec: RunSpec = serde_json::from_slice(&fs::read(dir.path().join("runs/nd/run.json")).unwrap()).unwrap();
    assert_eq!(spec.model.variant, Variant::NoDecouple);
    assert_eq!(spec.loss.gamma, 0.0);
    assert_eq!(spec.restrictions, [Restriction::Positions(vec![1, 2, 4])]);
    let a = run(&["eval", "--checkpoint", "runs/nd", "--restriction", "1,3,4", "--out", "ev"]);
    let b = run(&["eval", "--checkpoint", "runs/nd", "--restriction", "1,3,4", "--out", "ev"]);
    assert_eq!(a, b);
    assert!(a.contains(&spec.hash()));
    let md = run(&["report", "--out", "runs"]);
    assert!(md.contains("## train"));
}

fn arm_strategy() -> impl Strategy<Value = ArmConfig> {
    (
        "[a-z][a-z0-9-]{0,10}",
        prop::sample::select(Variant::ALL.to_vec()),
        prop::option::of(prop::sample::select(TimeLayerKind::ALL.to_vec())),
        prop::option::of(0.0..5.0f64),
        prop::option::of(prop::collection::btree_set(1usize..=6, 1..4)),
        prop::option::of(0.0..3.0f64),
    )
        .prop_map(|(name, variant, time_layer, gamma, positions, zipf)| ArmConfig {
            time_layer,
            gamma,
            loss_positions: positions.map(|p| p.into_iter().collect()),
            zipf_exponent: zipf,
            ..ArmConfig::new(name, variant)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn config_json_round_trip_is_lossless(
        horizons in prop::collection::vec(3usize..=6, 1..4),
        arms in prop::collection::vec(arm_strategy(), 1..4),
        seeds in prop::collection::vec(any::<u64>(), 1..6),
        sigma in prop::num::f64::POSITIVE | prop::num::f64::ZERO,
        lr in prop::num::f64::NORMAL,
        gamma in 0.0..3.0f64,
        ratio in 0.05..0.95f64,
        restrictions in prop::collection::vec(prop::collection::btree_set(1usize..=6, 1..4), 0..3),
        f32_precision: bool,
    ) {
        let mut c = tiny();
        c.horizons = horizons;
        c.variants = arms;
        c.seeds = seeds;
        c.corpus.observation.noise_sigma = sigma;
        c.corpus.split_ratio = ratio;
        c.train.base_lr = lr;
        c.model.gamma = gamma;
        c.restrictions = restrictions.into_iter().map(|s| Restriction::Positions(s.into_iter().collect())).collect();
        if f32_precision {
            c.set_precision(skipplan::tensor::Precision::F32);
        }
        let text = c.to_json();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        prop_assert_eq!(&back, &c);
        prop_assert_eq!(back.to_json(), text);
        prop_assert_eq!(back.hash(), c.hash());
        for spec in c.runs() {
            let back: RunSpec = serde_json::from_str(&serde_json::to_string_pretty(&spec).unwrap()).unwrap();
            prop_assert_eq!(back.hash(), spec.hash());
        }
    }
}
