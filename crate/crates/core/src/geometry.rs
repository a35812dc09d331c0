//! Compactness and separability of features and classifier vectors, the
//! classifier separability matrix, and simplex-ETF diagnostics.
//!
//! All metrics are cosine based and rescaled to percentages. Pairs involving
//! a zero vector have no cosine; they are skipped and counted rather than
//! scored.
//!
//! The per-class sums are computed through sums of unit vectors
//! (`Σ_{i≠i'} cos(x_i, x_i') = |Σ u_i|² - Σ |u_i|²`), which is O(n·d)
//! instead of the O(n²·d) pairwise loop.

use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::losses::{Classifier, LabeledFeature};
use crate::vecops::{axpy, dot, norm, Matrix};

/// A per-class metric. `None` marks a class for which the metric is
/// undefined (too few samples or only zero vectors).
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMetric {
    pub values: Vec<Option<f64>>,
    /// Ordered pairs skipped because one side was the zero vector.
    pub skipped_pairs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    /// Population standard deviation across the present classes.
    pub std: f64,
}

impl Summary {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Option<Summary> {
        let v: Vec<f64> = values.into_iter().collect();
        if v.is_empty() {
            return None;
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Some(Summary { mean, std: var.sqrt() })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub compactness: Vec<Option<f64>>,
    pub feature_separability: Vec<Option<f64>>,
    pub classifier_separability: Vec<f64>,
    pub compactness_summary: Option<Summary>,
    pub feature_separability_summary: Option<Summary>,
    pub classifier_separability_summary: Summary,
    pub skipped_pairs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeparabilityMatrix {
    k: usize,
    s: Vec<f64>,
}

impl SeparabilityMatrix {
    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, j: usize, k: usize) -> f64 {
        self.s[j * self.k + k]
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.s[j * self.k..(j + 1) * self.k]
    }

    /// Off-diagonal mean of row `j`, times 100.
    pub fn row_separability(&self, j: usize) -> f64 {
        let off: f64 = self.row(j).iter().enumerate().filter(|&(i, _)| i != j).map(|(_, v)| v).sum();
        off / (self.k - 1) as f64 * 100.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EtfReport {
    /// `-1/(K-1)`
    pub target_cos: f64,
    /// `max_{k≠j} |cos(ŵ_k, ŵ_j) - target_cos|` over centered vectors.
    pub max_pairwise_cos_deviation: f64,
    /// `(max_k |w_k| - min_k |w_k|) / max_k |w_k|`
    pub max_norm_deviation: f64,
    /// Whether `K <= d + 1`, i.e. an exact ETF fits in the dimension.
    pub realizable: bool,
}

fn group_by_class(features: &[LabeledFeature], k: usize) -> Result<Vec<Vec<&[f64]>>> {
    let mut groups: Vec<Vec<&[f64]>> = vec![Vec::new(); k];
    let dim = features.first().map(|f| f.x.len());
    for f in features {
        if f.label >= k {
            return Err(Error::config(format!("label {} out of range for {k} classes", f.label)));
        }
        if Some(f.x.len()) != dim {
            return Err(Error::DimensionMismatch {
                expected: dim.unwrap_or(0),
                got: f.x.len(),
            });
        }
        groups[f.label].push(&f.x);
    }
    Ok(groups)
}

/// Sum of the unit vectors of the nonzero inputs, their squared-norm sum and count.
fn unit_sum<'a>(vs: impl IntoIterator<Item = &'a [f64]>, dim: usize) -> (Vec<f64>, f64, usize) {
    let mut s = vec![0.0; dim];
    let mut sq = 0.0;
    let mut m = 0;
    for v in vs {
        let n = norm(v);
        if n > 0.0 {
            axpy(1.0 / n, v, &mut s);
            let u2: f64 = v.iter().map(|x| (x / n) * (x / n)).sum();
            sq += u2;
            m += 1;
        }
    }
    (s, sq, m)
}

fn class_mean(vs: &[&[f64]], dim: usize) -> Option<Vec<f64>> {
    if vs.is_empty() {
        return None;
    }
    let mut m = vec![0.0; dim];
    for v in vs {
        axpy(1.0, v, &mut m);
    }
    let n = vs.len() as f64;
    m.iter_mut().for_each(|x| *x /= n);
    Some(m)
}

/// Mean over ordered same-class pairs of `(cos + 1)/2 × 100`.
pub fn intra_class_compactness(features: &[LabeledFeature], num_classes: usize) -> Result<ClassMetric> {
    let groups = group_by_class(features, num_classes)?;
    let dim = features.first().map_or(0, |f| f.x.len());
    let mut skipped = 0;
    let values = groups
        .iter()
        .map(|g| {
            let (s, sq, m) = unit_sum(g.iter().copied(), dim);
            let n = g.len();
            skipped += (n * n.saturating_sub(1)) - (m * m.saturating_sub(1));
            if m < 2 {
                return None;
            }
            let pairs = (m * m - m) as f64;
            let cos_sum = dot(&s, &s) - sq;
            Some((cos_sum / pairs + 1.0) / 2.0 * 100.0)
        })
        .collect();
    Ok(ClassMetric {
        values,
        skipped_pairs: skipped,
    })
}

/// Mean over samples `i` of class `k` and classes `j ≠ k` of
/// `(1 - cos(x_i - x̄_k, x̄_j))/2 × 100`. The other-class means are not centered.
pub fn inter_class_feature_separability(features: &[LabeledFeature], num_classes: usize) -> Result<ClassMetric> {
    if num_classes < 2 {
        return Err(Error::config("feature separability needs at least 2 classes"));
    }
    let groups = group_by_class(features, num_classes)?;
    let dim = features.first().map_or(0, |f| f.x.len());
    let means: Vec<Option<Vec<f64>>> = groups.iter().map(|g| class_mean(g, dim)).collect();

    // Unit other-class means; zero or absent means cannot be compared against.
    let unit_means: Vec<Option<Vec<f64>>> = means
        .iter()
        .map(|m| m.as_ref().and_then(|m| crate::vecops::normalized(m)))
        .collect();
    let mut mean_total = vec![0.0; dim];
    let mut valid_means = 0;
    for u in unit_means.iter().flatten() {
        axpy(1.0, u, &mut mean_total);
        valid_means += 1;
    }

    let mut skipped = 0;
    let mut values = Vec::with_capacity(num_classes);
    for (k, g) in groups.iter().enumerate() {
        let Some(mean_k) = &means[k] else {
            values.push(None);
            continue;
        };
        let centered: Vec<Vec<f64>> = g
            .iter()
            .map(|x| x.iter().zip(mean_k).map(|(a, b)| a - b).collect())
            .collect();
        let (s, _, m) = unit_sum(centered.iter().map(Vec::as_slice), dim);
        let mut others = mean_total.clone();
        let mut others_count = valid_means;
        if let Some(u) = &unit_means[k] {
            axpy(-1.0, u, &mut others);
            others_count -= 1;
        }
        let pairs = m * others_count;
        skipped += g.len() * (num_classes - 1) - pairs;
        if pairs == 0 {
            values.push(None);
            continue;
        }
        let mean_cos = dot(&s, &others) / pairs as f64;
        values.push(Some((1.0 - mean_cos) / 2.0 * 100.0));
    }
    Ok(ClassMetric {
        values,
        skipped_pairs: skipped,
    })
}

/// Unit vectors of the centered rows `ŵ_k = w_k - w̄`.
pub fn centered_units(w: &Matrix) -> Result<Matrix> {
    let k = w.rows();
    let dim = w.cols();
    let mut mean = vec![0.0; dim];
    for row in w.iter_rows() {
        axpy(1.0 / k as f64, row, &mut mean);
    }
    let scale = w.iter_rows().map(norm).fold(0.0, f64::max);
    let mut out = Matrix::zeros(k, dim);
    for (i, row) in w.iter_rows().enumerate() {
        let c: Vec<f64> = row.iter().zip(&mean).map(|(a, b)| a - b).collect();
        let n = norm(&c);
        if n <= 1e-12 * scale || n == 0.0 {
            return Err(Error::Domain(format!(
                "centered classifier vector {i} is zero; separability is undefined"
            )));
        }
        out.row_mut(i).iter_mut().zip(&c).for_each(|(o, v)| *o = v / n);
    }
    Ok(out)
}

fn separability_from_units(u: &Matrix) -> Vec<f64> {
    let k = u.rows();
    let mut total = vec![0.0; u.cols()];
    for row in u.iter_rows() {
        axpy(1.0, row, &mut total);
    }
    u.iter_rows()
        .map(|uk| {
            let cos_sum = dot(uk, &total) - dot(uk, uk);
            let mean_cos = cos_sum / (k - 1) as f64;
            (1.0 - mean_cos) / 2.0 * 100.0
        })
        .collect()
}

/// Per-class classifier separability `mean_{j≠k} (1 - cos(ŵ_k, ŵ_j))/2 × 100`
/// over the effective (mode-normalized) weights.
pub fn classifier_separability(clf: &Classifier) -> Result<Vec<f64>> {
    Ok(separability_from_units(&centered_units(&clf.effective_weights())?))
}

/// `s_jk = (1 - cos(ŵ_j, ŵ_k))/2` off the diagonal, 1 on it.
pub fn separability_matrix(clf: &Classifier) -> Result<SeparabilityMatrix> {
    let u = centered_units(&clf.effective_weights())?;
    let k = u.rows();
    let mut s = vec![1.0; k * k];
    for j in 0..k {
        for i in (j + 1)..k {
            let v = ((1.0 - dot(u.row(j), u.row(i))) / 2.0).clamp(0.0, 1.0);
            s[j * k + i] = v;
            s[i * k + j] = v;
        }
    }
    Ok(SeparabilityMatrix { k, s })
}

/// Compares the centered classifier against the simplex ETF conditions.
pub fn etf_deviation(clf: &Classifier) -> Result<EtfReport> {
    let w = clf.effective_weights();
    let k = w.rows();
    let target = -1.0 / (k - 1) as f64;
    let u = centered_units(&w)?;
    let mut max_dev: f64 = 0.0;
    for j in 0..k {
        for i in (j + 1)..k {
            max_dev = max_dev.max((dot(u.row(j), u.row(i)) - target).abs());
        }
    }
    let norms: Vec<f64> = w.iter_rows().map(norm).collect();
    let hi = norms.iter().copied().fold(0.0, f64::max);
    let lo = norms.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(EtfReport {
        target_cos: target,
        max_pairwise_cos_deviation: max_dev,
        max_norm_deviation: if hi > 0.0 { (hi - lo) / hi } else { 0.0 },
        realizable: k <= w.cols() + 1,
    })
}

/// `max_{k≠j} |cos(w_k, w_j) + 1/(K-1)|` on the rows as given (no centering).
pub fn max_pairwise_cos_deviation(w: &Matrix) -> f64 {
    let k = w.rows();
    let target = -1.0 / (k - 1) as f64;
    let mut max_dev: f64 = 0.0;
    for j in 0..k {
        for i in (j + 1)..k {
            let c = crate::vecops::cosine(w.row(j), w.row(i)).unwrap_or(0.0);
            max_dev = max_dev.max((c - target).abs());
        }
    }
    max_dev
}

/// Random orthonormal `cols`-frame in `R^dim`, returned as rows.
fn random_frame<R: rand::Rng + ?Sized>(count: usize, dim: usize, rng: &mut R) -> Matrix {
    let mut q = Matrix::zeros(count, dim);
    let mut i = 0;
    while i < count {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        // Two Gram-Schmidt passes keep the frame orthonormal to machine precision.
        for _ in 0..2 {
            for j in 0..i {
                let c = dot(&v, q.row(j));
                axpy(-c, q.row(j), &mut v);
            }
        }
        let n = norm(&v);
        if n < 1e-8 {
            continue;
        }
        q.row_mut(i).iter_mut().zip(&v).for_each(|(d, s)| *d = s / n);
        i += 1;
    }
    q
}

/// `K` unit vectors in `R^d` with pairwise inner products `-1/(K-1)`, in a
/// random orientation. Needs `d >= K - 1`.
///
/// Vertex `k` has coordinates `sqrt(K/(K-1)) · h_i[k]` in the Helmert basis
/// `h_1..h_{K-1}` of the complement of the all-ones vector, i.e. the rows of
/// the centering matrix `I - J/K` rescaled to unit norm; the coordinates are
/// then mapped through a random orthonormal frame.
pub fn construct_etf<R: rand::Rng + ?Sized>(k: usize, d: usize, rng: &mut R) -> Result<Matrix> {
    if k < 2 {
        return Err(Error::config("an ETF needs at least 2 vectors"));
    }
    if d + 1 < k {
        return Err(Error::Infeasible(format!(
            "a simplex ETF of {k} vectors needs dimension >= {}, got {d}",
            k - 1
        )));
    }
    let frame = random_frame(k - 1, d, rng);
    let s = (k as f64 / (k - 1) as f64).sqrt();
    let mut out = Matrix::zeros(k, d);
    for v in 0..k {
        let row = out.row_mut(v);
        for i in 1..k {
            // h_i = (1, …, 1, -i, 0, …) / sqrt(i(i+1)), with i leading ones.
            let h = if v < i {
                1.0
            } else if v == i {
                -(i as f64)
            } else {
                continue;
            } / ((i * (i + 1)) as f64).sqrt();
            axpy(s * h, frame.row(i - 1), row);
        }
        let n = norm(row);
        row.iter_mut().for_each(|x| *x /= n);
    }
    Ok(out)
}

/// All three per-class metrics plus summaries for one set of features and a classifier.
pub fn metric_report(features: &[LabeledFeature], clf: &Classifier) -> Result<MetricReport> {
    let k = clf.num_classes();
    let comp = intra_class_compactness(features, k)?;
    let sep = inter_class_feature_separability(features, k)?;
    let clf_sep = classifier_separability(clf)?;
    Ok(MetricReport {
        compactness_summary: Summary::of(comp.values.iter().flatten().copied()),
        feature_separability_summary: Summary::of(sep.values.iter().flatten().copied()),
        classifier_separability_summary: Summary::of(clf_sep.iter().copied()).expect("K >= 2"),
        skipped_pairs: comp.skipped_pairs + sep.skipped_pairs,
        compactness: comp.values,
        feature_separability: sep.values,
        classifier_separability: clf_sep,
    })
}
