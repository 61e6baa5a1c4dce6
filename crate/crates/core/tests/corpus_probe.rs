mod common;

use common::{nearest_mean_uar, split_by_session};
use gmptl::corpus::{generate_synthetic_corpus, permute_emotions, SyntheticCorpusSpec};

fn probe_uar(separability: f64, permutation_seed: Option<u64>) -> f64 {
    let spec = SyntheticCorpusSpec { separability, frame_range: (20, 40), ..Default::default() };
    let corpus = generate_synthetic_corpus(&spec).unwrap();
    let (train, test) = split_by_session(&corpus, "Session5");
    let train = match permutation_seed {
        Some(s) => permute_emotions(&train, s),
        None => train,
    };
    nearest_mean_uar(&train, &test)
}

#[test]
fn zero_separability_probe_is_indistinguishable_from_permutation_null() {
    let observed = probe_uar(0.0, None);
    let mut null: Vec<f64> = (0..199).map(|s| probe_uar(0.0, Some(s))).collect();
    null.sort_by(f64::total_cmp);
    // two-sided rank test at the 1% level
    let below = null.iter().filter(|&&u| u < observed).count();
    let above = null.iter().filter(|&&u| u > observed).count();
    let p = 2.0 * (below.min(above) + 1) as f64 / (null.len() + 1) as f64;
    assert!(p > 0.01, "observed UAR {observed} is extreme against the null (p = {p})");
}

#[test]
fn separable_probe_is_far_above_null() {
    assert!(probe_uar(6.0, None) > 0.95);
    let null_mean = (0..20).map(|s| probe_uar(6.0, Some(s))).sum::<f64>() / 20.0;
    assert!(null_mean < 0.4, "{null_mean}");
}
