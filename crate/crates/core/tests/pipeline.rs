use gfnadapt::config::{ExperimentConfig, Method};
use gfnadapt::experiment::{Experiment, ExperimentError};
use gfnadapt::landscape::build_landscape;
use gfnadapt::space::StateKey;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;

fn config(dir: &Path, extra: &[&str]) -> ExperimentConfig {
    let mut all: Vec<String> = extra.iter().map(|s| s.to_string()).collect();
    all.push(format!("run.out_dir={:?}", dir.join("runs").to_string_lossy()));
    all.push(format!("run.cache_dir={:?}", dir.join("cache").to_string_lossy()));
    all.extend(["train.steps=10", "train.hidden=[16]", "train.samples=40", "run.seeds=[1]"].map(String::from));
    ExperimentConfig::from_toml("", &all).unwrap()
}

#[test]
fn truth_stays_near_the_top_under_observation_noise() {
    let dir = tempfile::tempdir().unwrap();
    let exp = Experiment::new(config(dir.path(), &[])).unwrap();
    let scorer = exp.scorer().unwrap();
    let land = build_landscape(&scorer, 100_000).unwrap();
    let truth = exp.config().truth_key(exp.space()).unwrap();
    let rec = scorer.score(&truth).unwrap();
    // 3% multiplicative noise keeps the truth inside the best 5% of every context
    for (c, (&raw, &lo)) in rec.raw.iter().zip(&scorer.quantiles().lo).enumerate() {
        assert!(raw < lo, "context {c}: truth loss {raw} not below the lower quantile {lo}");
    }
    let rank = land.rank_of(exp.space().terminal_index(&truth).unwrap());
    assert!(rank <= 5, "truth rank {rank}");
}

#[test]
fn concurrent_experiments_share_one_cache() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), &[]);
    Experiment::new(cfg.clone()).unwrap().scorer().unwrap();
    let keys: Vec<StateKey> = {
        let space = cfg.build_space().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        (0..200).map(|_| space.key_at(rng.random_range(0..2625))).collect()
    };
    let results: Vec<Vec<f64>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..3)
            .map(|_| {
                let (cfg, keys) = (cfg.clone(), keys.clone());
                s.spawn(move || {
                    let exp = Experiment::new(cfg).unwrap();
                    let scorer = exp.scorer().unwrap();
                    let out: Vec<f64> = keys.iter().map(|k| scorer.score(k).unwrap().aggregate).collect();
                    scorer.flush().unwrap();
                    assert_eq!(exp.simulations(), 0, "enumerable runs are fully cached up front");
                    out
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    assert!(results.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn non_enumerable_runs_use_a_warmup_and_cache_new_keys() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path(), &["space.cycles=2", "run.budget=40", "reward.warmup=64"]);
    cfg.run.method = Method::Random;
    let exp = Experiment::new(cfg.clone()).unwrap();
    exp.cmd_baseline().unwrap();
    // warm-up contexts + 64 keys, then at most 40 new keys
    let first = exp.simulations();
    let contexts = exp.contexts().unwrap().len() as u64;
    assert!(first <= contexts * (1 + 64 + 40), "{first}");
    let again = Experiment::new(cfg).unwrap();
    again.cmd_baseline().unwrap();
    assert_eq!(again.simulations(), 0);
}

#[test]
fn report_refuses_foreign_hashes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), &["run.budget=30", "report.methods=[\"random\"]"]);
    let mut random = cfg.clone();
    random.run.method = Method::Random;
    let exp = Experiment::new(random).unwrap();
    exp.cmd_enumerate().unwrap();
    exp.cmd_baseline().unwrap();
    exp.cmd_report().unwrap();

    let mut other = cfg.clone();
    other.reward.beta = 8.0;
    other.run.method = Method::Random;
    let foreign = Experiment::new(other).unwrap();
    foreign.cmd_baseline().unwrap();
    let theirs = foreign.root().join("baseline-random/1/trace.csv");
    let ours = exp.root().join("baseline-random/1/trace.csv");
    std::fs::copy(theirs, &ours).unwrap();
    match exp.cmd_report() {
        Err(e @ ExperimentError::HashMismatch { .. }) => {
            assert_eq!(e.exit_code(), 2);
            assert!(e.to_string().contains("trace.csv"));
        }
        other => panic!("expected a hash mismatch, got {other:?}"),
    }
}
