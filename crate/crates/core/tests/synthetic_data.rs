use maskdiff::data::{class_balance, generate_dataset, DataConfig, Difficulty};

#[test]
fn class_balance_of_a_thousand_samples() {
    let cfg = DataConfig {
        count: 1000,
        size: 64,
        seed: 11,
        ambiguous_frac: 0.25,
    };
    let samples = generate_dataset(&cfg).unwrap();
    let b = class_balance(&samples);
    assert!((0.05..=0.3).contains(&b.mean_tampered_fraction), "{b}");
    assert!(
        b.min_tampered_fraction >= 0.02 && b.max_tampered_fraction <= 0.4,
        "{b}"
    );
    assert_eq!(b.ambiguous, 250);
    assert!(b.splice > 250 && b.copymove > 250 && b.removal > 250, "{b}");
    assert_eq!(
        samples
            .iter()
            .filter(|s| s.difficulty == Difficulty::Easy)
            .count(),
        750
    );
}
