use lpt::assoc::TestKind;
use lpt::simulate::{self, Direction, EffectConfig, ErrorDist, ExperimentConfig, Link, RateRow};
use lpt::transforms::{TransformKind, TransformTag};

fn rate(rows: &[RateRow], test: TestKind, tag: TransformTag) -> &RateRow {
    rows.iter().find(|r| r.test == test && r.transform == tag).unwrap()
}

fn se_diff(a: &RateRow, b: &RateRow) -> f64 {
    (a.std_err.powi(2) + b.std_err.powi(2)).sqrt()
}

#[test]
fn gaussian_burden_level_at_n_5000() {
    let mut cfg = ExperimentConfig::new(ErrorDist::StdNormal, 5000, 20_000, 3);
    cfg.tests = vec![TestKind::Burden];
    cfg.transforms = vec![TransformKind::Uat];
    let rows = simulate::type1_experiment(&cfg, &[0.01]).unwrap();
    let r = &rows[0];
    let se = (0.01f64 * 0.99 / r.replicates as f64).sqrt();
    assert!((r.estimate - 0.01).abs() <= 3.0 * se, "rate {}", r.estimate);
}

#[test]
fn zero_effect_power_is_the_level() {
    let mut cfg = ExperimentConfig::new(ErrorDist::SkewNormal, 500, 3000, 4);
    cfg.transforms = vec![TransformKind::Uat, TransformKind::int()];
    let effect = EffectConfig {
        beta_magnitude: Some(0.0),
        ..EffectConfig::sparse_unidirectional()
    };
    let alpha = 0.05;
    let se = (alpha * (1.0 - alpha) / 3000.0f64).sqrt();
    for r in simulate::power_experiment(&cfg, &effect, alpha).unwrap() {
        assert!((r.estimate - alpha).abs() <= 3.0 * se, "{} {}: {}", r.test, r.transform, r.estimate);
    }
}

#[test]
fn doubling_the_effect_does_not_lose_power() {
    let settings = [
        (ErrorDist::ChiSq5, TestKind::Burden, Direction::Unidirectional, 0.15),
        (ErrorDist::LogNormal, TestKind::Skat, Direction::Bidirectional, 0.03),
        (ErrorDist::StudentT3, TestKind::Ridge, Direction::Unidirectional, 0.1),
    ];
    for (k, (dist, test, direction, magnitude)) in settings.into_iter().enumerate() {
        let mut cfg = ExperimentConfig::new(dist, 600, 300, 50 + k as u64);
        cfg.replicates_per_gene = 30;
        cfg.tests = vec![test];
        let power = |m: f64| {
            let effect = EffectConfig {
                proportion_nonzero: 0.3,
                direction,
                beta_magnitude: Some(m),
                link: Link::Identity,
            };
            simulate::power_experiment(&cfg, &effect, 0.01).unwrap()
        };
        let (single, double) = (power(magnitude), power(2.0 * magnitude));
        for (a, b) in single.iter().zip(&double) {
            assert!(
                b.estimate >= a.estimate - 2.0 * se_diff(a, b),
                "{dist} {test} {}: {} -> {}",
                a.transform,
                a.estimate,
                b.estimate
            );
        }
    }
}

#[test]
fn lognormal_power_ordering() {
    let mut cfg = ExperimentConfig::new(ErrorDist::LogNormal, 2000, 500, 77);
    cfg.replicates_per_gene = 50;
    let rows = simulate::power_experiment(&cfg, &EffectConfig::sparse_unidirectional(), 0.01).unwrap();
    for test in TestKind::ALL {
        let (uat, int, lpt) = (
            rate(&rows, test, TransformTag::Uat),
            rate(&rows, test, TransformTag::Int),
            rate(&rows, test, TransformTag::Lpt),
        );
        assert!(lpt.estimate >= int.estimate - 2.0 * se_diff(lpt, int), "{test}");
        assert!(int.estimate >= uat.estimate - 2.0 * se_diff(int, uat), "{test}");
    }
}

#[test]
fn quadratic_link_power_runs() {
    let mut cfg = ExperimentConfig::new(ErrorDist::BimodalNormal, 400, 100, 9);
    cfg.replicates_per_gene = 50;
    let effect = EffectConfig {
        link: Link::Quadratic,
        ..EffectConfig::sparse_unidirectional()
    };
    let rows = simulate::power_experiment(&cfg, &effect, 0.05).unwrap();
    assert_eq!(rows.len(), 9);
    assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r.estimate) && r.replicates == 100));
}
