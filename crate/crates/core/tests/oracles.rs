//! Reference values computed independently (50-digit arithmetic for the
//! closed forms, plain pairwise loops for the metrics) and frozen here.

#![allow(clippy::excessive_precision)]

use bce3s::data::MemoryBank;
use bce3s::geometry::{self, construct_etf};
use bce3s::losses::{self, Classifier, Family, LabeledFeature, NegativeMask, Normalization};
use bce3s::rng;
mod common;
use common::*;

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}

macro_rules! assert_close {
    ($a:expr, $b:expr, $tol:expr) => {{
        let (a, b) = ($a, $b);
        assert!(close(a, b, $tol), "{} = {a:e}, expected {b:e}", stringify!($a));
    }};
}

fn rows5() -> Vec<Vec<f64>> {
    vec![
        vec![0.8, -0.3, 0.5],
        vec![-0.2, 0.9, 0.1],
        vec![0.4, 0.4, -0.7],
        vec![-0.6, -0.1, 0.3],
        vec![0.05, -0.5, -0.5],
    ]
}

fn clf5(norm: Normalization) -> Classifier {
    Classifier::from_rows(&rows5(), vec![0.1, -0.2, 0.0, 0.3, -0.05], norm).unwrap()
}

#[test]
fn joint_losses_match_direct_formula() {
    let s = LabeledFeature::new(vec![1.5, -0.7, 2.1], 2);
    let c = clf5(Normalization::ClassifierOnly);
    let all = NegativeMask::all(5);
    assert_close!(losses::ce_joint(&s, &c).unwrap(), 4.0067608687655694032, 1e-13);
    assert_close!(losses::bce_joint(&s, &c, &all).unwrap(), 5.5287253202564442712, 1e-13);
    let masked = NegativeMask::from_keep(vec![true, false, true, true, false]);
    assert_close!(losses::bce_joint(&s, &c, &masked).unwrap(), 4.8769617155345568454, 1e-13);
    let both = clf5(Normalization::Both);
    assert_close!(losses::joint(&s, &both, &all, Family::Ce).unwrap(), 2.2569846299898341079, 1e-13);
    let raw = clf5(Normalization::None);
    assert_close!(losses::joint(&s, &raw, &all, Family::Bce).unwrap(), 5.5509042362659827204, 1e-13);
}

#[test]
fn contrastive_losses_match_direct_formula() {
    let slots: [Option<[f64; 4]>; 6] = [
        Some([1.0, 0.2, -0.3, 0.5]),
        Some([-0.4, 1.0, 0.1, 0.2]),
        Some([0.3, -0.6, 1.0, 0.0]),
        None,
        Some([0.1, 0.1, 0.1, -1.0]),
        Some([-1.0, -1.0, 0.5, 0.5]),
    ];
    let mut bank = MemoryBank::new(6, 4);
    for (k, s) in slots.iter().enumerate() {
        if let Some(z) = s {
            bank.set(k, z).unwrap();
        }
    }
    let z = [0.7, 0.3, -0.2, 0.9];
    let ce = losses::ce_contrastive(&z, 1, &bank, 0.3).unwrap().unwrap();
    let bce = losses::bce_contrastive(&z, 1, &bank, 0.3).unwrap().unwrap();
    assert_close!(ce, 2.680873449782456085, 1e-13);
    assert_close!(bce, 4.4440200851467094187, 1e-13);
    assert_eq!(losses::bce_contrastive(&z, 3, &bank, 0.3).unwrap(), None);
}

#[test]
fn uniform_losses_match_direct_formula() {
    let c = clf5(Normalization::ClassifierOnly);
    assert_close!(losses::bce_uniform(&c, 0, false).unwrap(), 2.2657570247395509242, 1e-13);
    assert_close!(losses::bce_uniform(&c, 3, true).unwrap(), 2.4870467206794943265, 1e-13);
    assert_close!(losses::ce_uniform(&c, 4).unwrap(), 0.81890217911715514521, 1e-13);
    let w = c.effective_weights();
    assert_close!(losses::uniform_mean_rows(&w, Family::Bce, false), 2.394315945669690498, 1e-13);
    assert_close!(losses::uniform_mean_rows(&w, Family::Ce, false), 0.80498667381889743795, 1e-13);
}

#[test]
fn uniform_losses_on_small_etfs() {
    let antipodal = Classifier::unbiased(&[vec![1.0], vec![-1.0]], Normalization::ClassifierOnly).unwrap();
    assert_close!(losses::ce_uniform(&antipodal, 0).unwrap(), 0.12692801104297249644, 1e-14);
    assert_close!(losses::bce_uniform(&antipodal, 1, false).unwrap(), 0.31326168751822283405, 1e-14);
    let h = 3f64.sqrt() / 2.0;
    let planar =
        Classifier::unbiased(&[vec![1.0, 0.0], vec![-0.5, h], vec![-0.5, -h]], Normalization::ClassifierOnly).unwrap();
    for k in 0..3 {
        assert_close!(losses::ce_uniform(&planar, k).unwrap(), 0.36898113540131541434, 1e-14);
        assert_close!(losses::bce_uniform(&planar, k, false).unwrap(), 0.94815396836021336175, 1e-14);
    }
}

#[test]
fn class_balanced_weights() {
    assert_eq!(losses::cb_weight(1, 0.9999), 1.0);
    assert_close!(losses::cb_weight(5, 0.9999), 0.200040004000199996, 1e-12);
    assert_close!(losses::cb_weight(20, 0.9999), 0.05004751662583019415, 1e-12);
    assert_close!(losses::cb_weight(5000, 0.9999), 0.00025413961385537258255, 1e-12);
}

#[test]
fn classifier_separability_matches_direct_formula() {
    let sep = geometry::classifier_separability(&clf5(Normalization::ClassifierOnly)).unwrap();
    let expected = [
        63.052848548872729098,
        62.231848474892232221,
        60.032630255053588187,
        64.636831478002395005,
        62.057768724663317538,
    ];
    for (a, b) in sep.iter().zip(expected) {
        assert_close!(*a, b, 1e-13);
    }
    let m = geometry::separability_matrix(&clf5(Normalization::ClassifierOnly)).unwrap();
    assert_close!(m.get(0, 1), 0.70482586024200860806, 1e-13);
    assert_eq!(m.get(2, 2), 1.0);
}

#[test]
fn etf_separability_constants() {
    for (k, d, expected) in [(4, 3, 200.0 / 3.0), (4, 8, 200.0 / 3.0), (100, 99, 5000.0 / 99.0), (100, 128, 5000.0 / 99.0)] {
        let mut r = rng::stream(7, &[k as u64, d as u64]);
        let w = construct_etf(k, d, &mut r).unwrap();
        let c = Classifier::new(w, vec![0.0; k], Normalization::ClassifierOnly).unwrap();
        for s in geometry::classifier_separability(&c).unwrap() {
            assert_close!(s, expected, 1e-10);
        }
        let m = geometry::separability_matrix(&c).unwrap();
        let off = 0.5 * (1.0 + 1.0 / (k as f64 - 1.0));
        assert_close!(m.get(0, k - 1), off, 1e-10);
        assert!(geometry::etf_deviation(&c).unwrap().max_pairwise_cos_deviation < 1e-10);
    }
}

#[test]
fn metrics_match_pairwise_loops() {
    for (seed, n, k, d) in [(1u64, 60, 3, 2), (2, 400, 10, 16), (3, 2000, 100, 64)] {
        let err = metric_oracle_error(seed, n, k, d).expect("same classes defined");
        assert!(err < 1e-12, "seed {seed}: relative error {err:e}");
    }
}
