use approx::assert_relative_eq;
use bdgap_core::coeffs::ModelSpec;
use bdgap_core::{CoefficientModel, Error, ModelKind};
use proptest::prelude::*;

fn pt(alpha: f64, mu: f64) -> CoefficientModel {
    CoefficientModel::power_law(alpha, mu, 1.0, 1.0).unwrap()
}

#[test]
fn power_law_at_eight() {
    // 8^(1/3) = 2, 8^(-1/3) = 1/2
    let (a, b) = pt(1.0 / 3.0, 2.0 / 3.0).eval_coefficients(8).unwrap();
    assert_relative_eq!(a, 2.0, max_relative = 1e-14);
    assert_relative_eq!(b, 3.0, max_relative = 1e-14);
}

#[test]
fn detachment_vanishes_for_monomers() {
    let models = [
        pt(0.5, 0.5),
        CoefficientModel::surface_tension(1.0 / 3.0, 0.5, 1.0, 1.0).unwrap(),
        CoefficientModel::surface_tension(0.0, 0.5, 1.0, 1.0).unwrap(),
        CoefficientModel::geometric(),
    ];
    for m in &models {
        assert_eq!(m.eval_coefficients(1).unwrap().1, 0.0);
        assert!(m.eval_coefficients(2).unwrap().1 > 0.0);
    }
}

#[test]
fn table_lookup_and_continuation() {
    let t = CoefficientModel::table(vec![1.0, 3.0], vec![0.0, 2.0, 5.0]).unwrap();
    assert_eq!(t.eval_coefficients(2).unwrap(), (3.0, 2.0));
    assert_eq!(t.eval_coefficients(50).unwrap(), (3.0, 5.0));
    assert_eq!(CoefficientModel::geometric().eval_coefficients(5).unwrap(), (1.0, 2.0));
}

#[test]
fn index_zero_is_rejected() {
    assert!(matches!(pt(0.5, 0.5).eval_coefficients(0), Err(Error::Domain(_))));
}

#[test]
fn geometric_log_q() {
    let lq = CoefficientModel::geometric().log_detailed_balance(4).unwrap();
    let l2 = 2f64.ln();
    for (i, v) in lq.iter().enumerate() {
        assert_relative_eq!(*v, -(i as f64) * l2, epsilon = 1e-15);
    }
}

#[test]
fn balanced_table_has_flat_q() {
    // a_i = b_{i+1} for every i
    let t = CoefficientModel::table(vec![1.5, 0.7, 2.0], vec![0.0, 1.5, 0.7, 2.0]).unwrap();
    for v in t.log_detailed_balance(20).unwrap() {
        assert!(v.abs() < 1e-15);
    }
}

#[test]
fn surface_tension_q_closed_form() {
    // with alpha = 0 the detachment rates telescope: Q_i = zs^{1-i} exp(-sigma (i^mu - 1))
    let m = CoefficientModel::surface_tension(0.0, 0.5, 1.0, 1.0).unwrap();
    let lq = m.log_detailed_balance(3).unwrap();
    assert_eq!(lq[0], 0.0);
    assert_relative_eq!(lq[1], 1.0 - 2f64.sqrt(), max_relative = 1e-14);
    assert_relative_eq!(lq[2], 1.0 - 3f64.sqrt(), max_relative = 1e-14);
    let cf = CoefficientModel::surface_tension(0.0, 0.5, 2.0, 1.5).unwrap();
    let lq = cf.log_detailed_balance(40).unwrap();
    for (i, v) in lq.iter().enumerate() {
        let x = (i + 1) as f64;
        assert_relative_eq!(*v, -(x - 1.0) * 2f64.ln() - 1.5 * (x.sqrt() - 1.0), max_relative = 1e-13);
    }
}

#[test]
fn log_q_is_reproducible() {
    let m = CoefficientModel::surface_tension(0.4, 0.6, 1.3, 0.8).unwrap();
    assert_eq!(m.log_detailed_balance(5000).unwrap(), m.log_detailed_balance(5000).unwrap());
}

#[test]
fn log_q_survives_large_n() {
    let lq = pt(1.0 / 3.0, 2.0 / 3.0).log_detailed_balance(1_000_000).unwrap();
    assert!(lq.iter().all(|v| v.is_finite()));
}

#[test]
fn critical_density() {
    assert_eq!(pt(1.0 / 3.0, 2.0 / 3.0).critical_monomer_density().unwrap(), 1.0);
    let cf = CoefficientModel::surface_tension(0.5, 0.5, 1.7, 1.0).unwrap();
    assert_eq!(cf.critical_monomer_density().unwrap(), 1.7);
    assert_relative_eq!(CoefficientModel::geometric().critical_monomer_density().unwrap(), 2.0);
    let flat = CoefficientModel::table(vec![1.0], vec![0.0, 1.0]).unwrap();
    assert_relative_eq!(flat.critical_monomer_density().unwrap(), 1.0);
}

#[test]
fn oscillating_table_fails_estimation() {
    let a: Vec<f64> = (0..200).map(|i| if i % 2 == 0 { 1.0 } else { 2.0 }).collect();
    let b: Vec<f64> = std::iter::once(0.0).chain((0..200).map(|_| 1.0)).collect();
    let t = CoefficientModel::table(a, b).unwrap();
    assert!(matches!(t.critical_monomer_density(), Err(Error::Estimation { .. })));
}

#[test]
fn critical_mass_values() {
    assert_eq!(CoefficientModel::geometric().critical_mass(1e-12).unwrap(), f64::INFINITY);
    // oracle: direct summation of i exp(-(i-1)^(2/3)) with alpha = 1/3 correction
    let cf = CoefficientModel::surface_tension(1.0 / 3.0, 2.0 / 3.0, 1.0, 1.0).unwrap();
    let got = cf.critical_mass(1e-12).unwrap();
    let mut sum = 0.0;
    let mut ln_q = 0.0f64;
    for i in 1..20_000usize {
        if i > 1 {
            let (a, _) = cf.eval_coefficients(i - 1).unwrap();
            let (_, b) = cf.eval_coefficients(i).unwrap();
            ln_q += a.ln() - b.ln();
        }
        sum += i as f64 * ln_q.exp();
    }
    assert!(got.is_finite() && got > 0.0);
    assert_relative_eq!(got, sum, max_relative = 1e-10);
}

#[test]
fn delta_condition_verdicts() {
    let strong = pt(2.0 / 3.0, 2.0 / 3.0).delta_condition(10, 100_000).unwrap();
    assert!(strong.satisfied);
    for &(_, v) in &strong.samples {
        assert_relative_eq!(v, 1.0, max_relative = 1e-9);
    }
    let weak = pt(1.0 / 3.0, 2.0 / 3.0).delta_condition(10, 100_000).unwrap();
    assert!(!weak.satisfied);
    for &(k, v) in weak.samples.iter().step_by(97) {
        assert_relative_eq!(v, (k as f64).powf(-1.0 / 6.0), max_relative = 1e-9);
    }
    // boundary alpha = 2(1 - mu)
    assert!(pt(0.5, 0.75).delta_condition(10, 100_000).unwrap().satisfied);
}

#[test]
fn surface_tension_matches_power_law_asymptotically() {
    // b_i / a_i - zs - zs sigma mu i^{mu-1} = o(i^{mu-1})
    let (mu, sigma) = (2.0 / 3.0, 1.0);
    let cf = CoefficientModel::surface_tension(1.0 / 3.0, mu, 1.0, sigma).unwrap();
    let mut last = f64::INFINITY;
    for &i in &[1_000usize, 10_000, 100_000] {
        let (a, b) = cf.eval_coefficients(i).unwrap();
        let x = i as f64;
        let resid = ((b / a - 1.0 - sigma * mu * x.powf(mu - 1.0)) / x.powf(mu - 1.0)).abs();
        assert!(resid < last);
        last = resid;
    }
    assert!(last < 1e-2);
}

#[test]
fn spec_round_trip_and_rejections() {
    let json = r#"{"kind":"PowerLawPT","alpha":0.5,"mu":0.5,"zs":1.0,"q":2.0}"#;
    let m: CoefficientModel = serde_json::from_str(json).unwrap();
    assert_eq!(m.kind(), ModelKind::PowerLawPT);
    let back: CoefficientModel = serde_json::from_str(&serde_json::to_string(&m).unwrap()).unwrap();
    assert_eq!(m, back);

    let bad = [
        r#"{"kind":"PowerLawPT","alpha":0.5,"mu":0.5,"zs":1.0,"q":2.0,"colour":1}"#,
        r#"{"kind":"PowerLawPT","alpha":0.5,"mu":0.5,"zs":1.0}"#,
        r#"{"kind":"PowerLawPT","alpha":0.5,"mu":0.5,"zs":1.0,"q":2.0,"sigma":1.0}"#,
        r#"{"kind":"SurfaceTensionCF","alpha":0.5,"mu":1.0,"zs":1.0,"sigma":1.0}"#,
        r#"{"kind":"ExplicitTable","table_a":[1.0,-1.0],"table_b":[0.0,2.0]}"#,
        r#"{"kind":"PowerLawPT","alpha":0.5,"mu":0.5,"zs":-1.0,"q":2.0}"#,
    ];
    for j in bad {
        assert!(serde_json::from_str::<CoefficientModel>(j).is_err(), "accepted {j}");
    }
    let spec: ModelSpec = serde_json::from_str(r#"{"kind":"ExplicitTable","table_a":[1.0],"table_b":[0.0,2.0]}"#).unwrap();
    assert!(CoefficientModel::try_from(spec).is_ok());
}

proptest! {
    #[test]
    fn detailed_balance_holds_at_any_z(alpha in 0.0f64..=1.0, mu in 0.05f64..0.95, zs in 0.2f64..5.0,
                                       q in 0.1f64..5.0, zfrac in 0.01f64..1.0, i in 1usize..2000) {
        // ln Q_i is stored to within one ulp of its size, which caps i for a 1e-12 check
        let m = CoefficientModel::power_law(alpha, mu, zs, q).unwrap();
        let z = zfrac * zs;
        let lq = m.log_detailed_balance(i + 1).unwrap();
        // a_i Qcal_1 Qcal_i / (b_{i+1} Qcal_{i+1}), with the z^i factors cancelled
        let ratio = (m.a(i) * z / m.b(i + 1)) * (lq[i - 1] - lq[i]).exp() / z;
        prop_assert!((ratio - 1.0).abs() < 1e-12);
    }

    #[test]
    fn step_ratio_matches_coefficients(alpha in 0.0f64..=1.0, mu in 0.05f64..0.95, sigma in 0.1f64..3.0,
                                       z in 0.05f64..1.0, k in 1usize..100_000) {
        let m = CoefficientModel::surface_tension(alpha, mu, 1.0, sigma).unwrap();
        let direct = m.a(k) * z / m.b(k + 1);
        prop_assert!((m.ln_step_ratio(k, z).exp() / direct - 1.0).abs() < 1e-11);
    }

    #[test]
    fn table_coefficients_positive(a in prop::collection::vec(0.01f64..10.0, 1..20),
                                   b in prop::collection::vec(0.01f64..10.0, 1..20), i in 1usize..100) {
        let mut bb = vec![0.0];
        bb.extend(b);
        let m = CoefficientModel::table(a, bb).unwrap();
        let (ai, bi) = m.eval_coefficients(i).unwrap();
        prop_assert!(ai > 0.0);
        let ok = if i == 1 { bi == 0.0 } else { bi > 0.0 };
        prop_assert!(ok);
    }
}
