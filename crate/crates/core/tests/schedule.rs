mod common;

use common::linear_alpha_bar_oracle;
use proptest::prelude::*;
use sardiff::schedule::{NoiseSchedule, ScheduleConfig, ScheduleKind, COSINE_MAX_BETA};

#[test]
fn linear_alpha_bar_matches_extended_precision_oracle() {
    let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
    let oracle = linear_alpha_bar_oracle(1000);
    // Frozen from a 40-digit evaluation of the same product.
    assert!((oracle - 4.035829765375683e-5).abs() < 1e-18);
    assert!((s.alpha_bar(1000) - oracle).abs() < 1e-8, "{} vs {oracle}", s.alpha_bar(1000));
    for t in [1, 10, 250, 500, 999] {
        assert!((s.alpha_bar(t) - linear_alpha_bar_oracle(t)).abs() < 1e-12, "t={t}");
    }
    assert_eq!(s.alpha_bar(1), 0.9999);
    assert_eq!(s.beta(1), 1e-4);
    assert_eq!(s.beta(1000), 0.02);
}

#[test]
fn cosine_small_table() {
    let s = NoiseSchedule::cosine(4).unwrap();
    let expected = [1.0, 0.847_012_161_326_904_7, 0.493_843_590_440_637_7, 0.144_272_102_385_735_7];
    for (t, e) in expected.iter().enumerate() {
        assert!((s.alpha_bar(t) - e).abs() < 1e-12, "t={t}: {}", s.alpha_bar(t));
    }
    // The last step hits the beta clamp.
    assert_eq!(s.beta(4), COSINE_MAX_BETA);
    assert!((s.alpha_bar(4) - 1.442_721_023_857_357e-4).abs() < 1e-15);
}

#[test]
fn sigmoid_endpoints_and_midpoint() {
    let s = NoiseSchedule::sigmoid(1000, 1e-4, 0.02).unwrap();
    assert!((s.beta(1) - 1.492_052_008_170_32e-4).abs() < 1e-15);
    assert!((s.beta(1000) - 1.995_079_479_918_297e-2).abs() < 1e-15);
    // The ramp is symmetric about the middle of the schedule.
    let mid = (s.beta(500) + s.beta(501)) / 2.0;
    assert!((mid - (1e-4 + 0.02) / 2.0).abs() < 1e-15);
}

#[test]
fn curve_csv_has_header_and_t_plus_one_rows() {
    for kind in ScheduleKind::ALL {
        let s = ScheduleConfig { kind, steps: 50, ..Default::default() }.build().unwrap();
        let mut buf = Vec::new();
        s.write_curve_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "t,alpha_bar");
        assert_eq!(lines[1], "0,1.0");
        assert_eq!(lines.len(), 52);
    }
}

fn any_schedule() -> impl Strategy<Value = NoiseSchedule> {
    (1usize..1200, 1e-5f64..1e-2, 0.0f64..0.05, 0usize..3).prop_map(|(steps, start, extra, kind)| {
        let end = (start + extra).min(0.5);
        match kind {
            0 => NoiseSchedule::linear(steps, start, end).unwrap(),
            1 => NoiseSchedule::cosine(steps).unwrap(),
            _ => NoiseSchedule::sigmoid(steps, start, end).unwrap(),
        }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn recurrence_and_bounds(s in any_schedule()) {
        for t in 1..=s.steps() {
            let b = s.beta(t);
            prop_assert!(b > 0.0 && b < 1.0);
            prop_assert!((s.alpha_bar(t) - s.alpha_bar(t - 1) * (1.0 - b)).abs() <= 1e-12);
            prop_assert!((s.alpha_bar(t) + s.one_minus_alpha_bar(t) - 1.0).abs() <= 1e-12);
            prop_assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            let v = s.posterior_variance(t);
            prop_assert!(v >= 0.0 && v <= b);
        }
        prop_assert_eq!(s.alpha_bar(0), 1.0);
        prop_assert_eq!(s.posterior_variance(1), 0.0);
    }

    #[test]
    fn config_roundtrip(kind in 0usize..3, steps in 1usize..2000) {
        let cfg = ScheduleConfig { kind: ScheduleKind::ALL[kind], steps, ..Default::default() };
        let text = serde_json::to_string(&cfg).unwrap();
        let back: ScheduleConfig = serde_json::from_str(&text).unwrap();
        prop_assert_eq!(back.build().unwrap(), cfg.build().unwrap());
    }
}
