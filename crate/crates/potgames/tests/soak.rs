//! Opt-in robustness sweep across many sampled instances and seeds:
//! `cargo test -p potgames --release --test soak -- --ignored`.

#[test]
#[ignore = "multi-minute robustness sweep; run with --ignored"]
fn soak_many_seeds() {
    use potgames::games::*;
    use potgames::learner::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    let mut failures = Vec::new();
    for seed in 0..15u64 {
        let spec = {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            CournotSpec::sample(6, &mut rng)
        };
        let form = spec.form();
        let theta_true = form.rationality(spec.theta_true.clone());
        match generate_dataset(&form, &theta_true, spec.context_sampler(), 40, 0.1, seed) {
            Ok(ds) => {
                let config = TrainConfig {
                    iterations: 400,
                    seed,
                    ..TrainConfig::default()
                };
                if let Err(e) = train(&form, &ds, &config) {
                    failures.push(format!("cournot seed {seed}: {e}"));
                }
            }
            Err(e) => failures.push(format!("cournot gen seed {seed}: {e}")),
        }
    }
    for seed in 0..12u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match sample_congestion_spec(7, 0.35, 3, 2, &mut rng) {
            Ok(spec) => {
                let form = congestion_form(&spec).unwrap();
                let theta_true = form.rationality(spec.theta_true.clone());
                let sampler = spec.context_sampler().unwrap();
                match generate_dataset(&form, &theta_true, sampler, 30, 0.1, seed) {
                    Ok(ds) => {
                        for rule in [
                            potgames::rules::RuleKind::Rule1,
                            potgames::rules::RuleKind::Rule2,
                        ] {
                            let config = TrainConfig {
                                iterations: 120,
                                eta0: 0.5,
                                rule,
                                seed,
                                ..TrainConfig::default()
                            };
                            if let Err(e) = train(&form, &ds, &config) {
                                failures.push(format!("congestion seed {seed} {rule:?}: {e}"));
                            }
                        }
                    }
                    Err(e) => failures.push(format!("congestion gen seed {seed}: {e}")),
                }
            }
            Err(e) => failures.push(format!("congestion spec seed {seed}: {e}")),
        }
    }
    assert!(failures.is_empty(), "{failures:#?}");
}
