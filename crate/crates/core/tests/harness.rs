use proptest::prelude::*;

use sing::harness::{build_problem, run_problem, ExperimentConfig, SingCheck};

fn translation(kind: &str, eta: f64, offset: [f64; 3], gamma: f64, seed: u64, iterations: usize) -> ExperimentConfig {
    ExperimentConfig::from_json(&format!(
        r#"{{"dataset": {{"kind": "translated-latents", "offset": [{}, {}, {}]}},
            "model": {{"kind": "translation"}}, "n_samples": 24, "gamma": {gamma},
            "optimizer": {{"kind": "{kind}", "step_size": {eta}}},
            "iterations": {iterations}, "seed": {seed}}}"#,
        offset[0], offset[1], offset[2]
    ))
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn sing_solves_translation_in_few_steps(
        eta in 0.5f64..1.5,
        offset in prop::array::uniform3(-2.0f64..2.0),
        gamma in prop::sample::select(vec![0.25, 1.0, 4.0]),
        seed in 0u64..1000,
    ) {
        let cfg = translation("sing", eta, offset, gamma, seed, 5);
        let rec = run_problem(&cfg, &build_problem(&cfg).unwrap()).unwrap();
        prop_assert!(rec.error.is_none(), "{:?}", rec.error);
        prop_assert!(rec.final_objective().unwrap() <= 1e-10, "{:?}", rec.rows);
        prop_assert!(rec.sing_checks.iter().all(SingCheck::passed));
        for (t, offset) in rec.final_theta.iter().zip(offset) {
            prop_assert!((t - offset).abs() <= 1e-5);
        }
    }

    #[test]
    fn gd_decreases_translation_objective(
        offset in prop::array::uniform3(-2.0f64..2.0),
        seed in 0u64..1000,
    ) {
        let cfg = translation("gd", 0.1, offset, 1.0, seed, 10);
        let rec = run_problem(&cfg, &build_problem(&cfg).unwrap()).unwrap();
        prop_assert!(rec.error.is_none());
        for w in rec.rows.windows(2) {
            prop_assert!(w[1].objective < w[0].objective || w[1].objective <= 1e-12, "{:?}", rec.rows);
        }
    }

    #[test]
    fn runs_are_reproducible(seed in 0u64..1000) {
        let cfg = translation("adam", 0.05, [0.5, -0.5, 1.0], 1.0, seed, 3);
        let a = run_problem(&cfg, &build_problem(&cfg).unwrap()).unwrap();
        let b = run_problem(&cfg, &build_problem(&cfg).unwrap()).unwrap();
        prop_assert_eq!(a.rows, b.rows);
        prop_assert_eq!(a.final_theta, b.final_theta);
    }
}

#[test]
fn shipped_configs_parse() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut count = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "json") {
            let cfg = ExperimentConfig::from_path(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            build_problem(&cfg).unwrap();
            count += 1;
        }
    }
    assert!(count >= 4);
}
