use limbfit::gradcheck::{check_case, random_case, CaseConfig, FD_STEP};
use limbfit::LossConfig;

#[test]
fn stage2_gradients_on_random_instances() {
    let cfg = LossConfig::stage2();
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        let case = random_case(seed, &CaseConfig::default()).unwrap();
        let r = check_case(&case, &cfg, FD_STEP).unwrap();
        assert!(r.max_error() <= 1e-4, "seed {seed}: {r:?}");
        worst = worst.max(r.max_error());
    }
    println!("worst relative error {worst:.3e}");
}

#[test]
fn supplementary_weights_and_longer_sequences() {
    let cfg = LossConfig::supplementary();
    for seed in 0..5 {
        let case = random_case(100 + seed, &CaseConfig { points: 64, frames: 4, ..Default::default() }).unwrap();
        let r = check_case(&case, &cfg, FD_STEP).unwrap();
        assert!(r.max_error() <= 1e-4, "seed {seed}: {r:?}");
    }
}

#[test]
fn soft_assignments() {
    let cfg = LossConfig::stage2();
    for seed in 0..5 {
        let case = random_case(200 + seed, &CaseConfig { points: 32, soft: true, ..Default::default() }).unwrap();
        let r = check_case(&case, &cfg, FD_STEP).unwrap();
        assert!(r.max_error() <= 1e-4, "seed {seed}: {r:?}");
    }
}
