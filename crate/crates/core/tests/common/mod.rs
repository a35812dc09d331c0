//! Brute-force pairwise-loop metrics shared by the oracle and acceptance targets.
#![allow(dead_code)]

use bce3s::geometry::{self, SeparabilityMatrix};
use bce3s::losses::{Classifier, LabeledFeature, Normalization};
use bce3s::rng;
use bce3s::vecops::{cosine, Matrix};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn normal<R: Rng>(r: &mut R) -> f64 {
    StandardNormal.sample(r)
}

pub fn gaussian_features<R: Rng>(n: usize, k: usize, d: usize, r: &mut R) -> Vec<LabeledFeature> {
    let means: Vec<Vec<f64>> = (0..k)
        .map(|_| (0..d).map(|_| 2.0 * normal(r)).collect::<Vec<f64>>())
        .collect();
    (0..n)
        .map(|i| {
            // Every class gets at least two samples, the rest are skewed.
            let label = if i < 2 * k { i % k } else { (r.random::<f64>().powi(2) * k as f64) as usize };
            let x = means[label]
                .iter()
                .map(|m| m + normal(r))
                .collect();
            LabeledFeature::new(x, label)
        })
        .collect()
}

pub fn naive_compactness(f: &[LabeledFeature], k: usize) -> Vec<Option<f64>> {
    (0..k)
        .map(|c| {
            let g: Vec<&[f64]> = f.iter().filter(|s| s.label == c).map(|s| s.x.as_slice()).collect();
            let (mut sum, mut pairs) = (0.0, 0usize);
            for i in 0..g.len() {
                for j in 0..g.len() {
                    if i != j {
                        sum += (cosine(g[i], g[j]).unwrap() + 1.0) / 2.0 * 100.0;
                        pairs += 1;
                    }
                }
            }
            (pairs > 0).then(|| sum / pairs as f64)
        })
        .collect()
}

pub fn naive_feature_separability(f: &[LabeledFeature], k: usize) -> Vec<Option<f64>> {
    let d = f[0].x.len();
    let means: Vec<Vec<f64>> = (0..k)
        .map(|c| {
            let g: Vec<&LabeledFeature> = f.iter().filter(|s| s.label == c).collect();
            (0..d).map(|i| g.iter().map(|s| s.x[i]).sum::<f64>() / g.len() as f64).collect()
        })
        .collect();
    (0..k)
        .map(|c| {
            let (mut sum, mut pairs) = (0.0, 0usize);
            for s in f.iter().filter(|s| s.label == c) {
                let centered: Vec<f64> = s.x.iter().zip(&means[c]).map(|(a, b)| a - b).collect();
                for (j, m) in means.iter().enumerate() {
                    if j != c {
                        sum += (1.0 - cosine(&centered, m).unwrap()) / 2.0 * 100.0;
                        pairs += 1;
                    }
                }
            }
            Some(sum / pairs as f64)
        })
        .collect()
}

pub fn naive_classifier_separability(w: &Matrix) -> Vec<f64> {
    let k = w.rows();
    let d = w.cols();
    let mean: Vec<f64> = (0..d).map(|i| w.iter_rows().map(|r| r[i]).sum::<f64>() / k as f64).collect();
    let c: Vec<Vec<f64>> = w.iter_rows().map(|r| r.iter().zip(&mean).map(|(a, b)| a - b).collect()).collect();
    (0..k)
        .map(|a| {
            let s: f64 = (0..k)
                .filter(|&b| b != a)
                .map(|b| (1.0 - cosine(&c[a], &c[b]).unwrap()) / 2.0)
                .sum();
            s / (k - 1) as f64 * 100.0
        })
        .collect()
}

pub fn assert_metric_eq(fast: &[Option<f64>], slow: &[Option<f64>]) {
    assert_eq!(fast.len(), slow.len());
    for (a, b) in fast.iter().zip(slow) {
        match (a, b) {
            (Some(a), Some(b)) => assert!((a - b).abs() < 1e-12 * 100.0, "{a} vs {b}"),
            (None, None) => {}
            _ => panic!("definedness differs: {a:?} vs {b:?}"),
        }
    }
}

pub fn naive_separability_matrix(w: &Matrix) -> Vec<Vec<f64>> {
    let k = w.rows();
    let d = w.cols();
    let mean: Vec<f64> = (0..d).map(|i| w.iter_rows().map(|r| r[i]).sum::<f64>() / k as f64).collect();
    let c: Vec<Vec<f64>> = w.iter_rows().map(|r| r.iter().zip(&mean).map(|(a, b)| a - b).collect()).collect();
    (0..k)
        .map(|a| {
            (0..k)
                .map(|b| if a == b { 1.0 } else { (1.0 - cosine(&c[a], &c[b]).unwrap()) / 2.0 })
                .collect()
        })
        .collect()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

/// Largest relative error between the library metrics and the pairwise
/// loops on one random instance (`None` when definedness differs).
pub fn metric_oracle_error(seed: u64, n: usize, k: usize, d: usize) -> Option<f64> {
    let mut r = rng::stream(seed, &[99]);
    let f = gaussian_features(n, k, d, &mut r);
    let rows: Vec<Vec<f64>> = (0..k).map(|_| (0..d).map(|_| normal(&mut r)).collect()).collect();
    let c = Classifier::unbiased(&rows, Normalization::ClassifierOnly).unwrap();
    let report = geometry::metric_report(&f, &c).unwrap();
    let mut worst: f64 = 0.0;
    for (fast, slow) in [
        (&report.compactness, naive_compactness(&f, k)),
        (&report.feature_separability, naive_feature_separability(&f, k)),
    ] {
        for (a, b) in fast.iter().zip(&slow) {
            match (a, b) {
                (Some(a), Some(b)) => worst = worst.max(rel_err(*a, *b)),
                (None, None) => {}
                _ => return None,
            }
        }
    }
    let w = c.effective_weights();
    for (a, b) in report.classifier_separability.iter().zip(naive_classifier_separability(&w)) {
        worst = worst.max(rel_err(*a, b));
    }
    let m: SeparabilityMatrix = geometry::separability_matrix(&c).unwrap();
    for (j, row) in naive_separability_matrix(&w).iter().enumerate() {
        for (i, b) in row.iter().enumerate() {
            worst = worst.max(rel_err(m.get(j, i), *b));
        }
    }
    Some(worst)
}
