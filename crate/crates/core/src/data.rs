//! Synthetic long-tailed data, batching, the class-level memory bank and the
//! Many/Medium/Few split.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::geometry::construct_etf;
use crate::losses::{argmax, LabeledFeature};
use crate::rng::{self, tags};
use crate::vecops::{dot, norm, Matrix};

/// Layout of the Gaussian class means.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassGeometry {
    /// Means on a scaled simplex ETF; needs `input_dim >= classes - 1`.
    Simplex,
    /// Means along independent random unit directions.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LongTailSpec {
    pub classes: usize,
    pub head_count: usize,
    pub imbalance_factor: f64,
    pub input_dim: usize,
    pub geometry: ClassGeometry,
    pub noise_sigma: f64,
    /// Norm of every class mean. Ignored when `target_accuracy` is set.
    pub mean_scale: f64,
    /// Calibrate `mean_scale` so the nearest-mean accuracy lands in `[lo, hi]` (fractions).
    pub target_accuracy: Option<[f64; 2]>,
    pub test_per_class: usize,
    pub seed: u64,
}

impl Default for LongTailSpec {
    fn default() -> Self {
        LongTailSpec {
            classes: 10,
            head_count: 500,
            imbalance_factor: 100.0,
            input_dim: 32,
            geometry: ClassGeometry::Simplex,
            noise_sigma: 1.0,
            mean_scale: 3.0,
            target_accuracy: None,
            test_per_class: 100,
            seed: 42,
        }
    }
}

impl LongTailSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config("data.classes must be at least 2"));
        }
        if self.input_dim < 1 {
            return Err(Error::config("data.input_dim must be at least 1"));
        }
        if !(self.noise_sigma > 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("data.noise_sigma must be positive"));
        }
        if !(self.mean_scale >= 0.0 && self.mean_scale.is_finite()) {
            return Err(Error::config("data.mean_scale must be non-negative"));
        }
        if let Some([lo, hi]) = self.target_accuracy {
            if !(0.0 < lo && lo < hi && hi <= 1.0) {
                return Err(Error::config("data.target_accuracy must satisfy 0 < lo < hi <= 1"));
            }
        }
        if self.test_per_class < 1 {
            return Err(Error::config("data.test_per_class must be at least 1"));
        }
        if self.geometry == ClassGeometry::Simplex && self.classes - 1 > self.input_dim {
            return Err(Error::Infeasible(format!(
                "simplex means for {} classes need input_dim >= {}, got {}",
                self.classes,
                self.classes - 1,
                self.input_dim
            )));
        }
        longtail_counts(self.classes, self.head_count, self.imbalance_factor).map(|_| ())
    }
}

/// Exponential-decay class counts `n_k = round(n1 · IF^{-(k-1)/(K-1)})`.
pub fn longtail_counts(classes: usize, head_count: usize, imbalance_factor: f64) -> Result<Vec<usize>> {
    if classes < 2 {
        return Err(Error::config("long-tail profile needs at least 2 classes"));
    }
    if !(imbalance_factor >= 1.0 && imbalance_factor.is_finite()) {
        return Err(Error::config(format!("imbalance factor must be >= 1, got {imbalance_factor}")));
    }
    if (head_count as f64) < imbalance_factor {
        return Err(Error::config(format!(
            "head count {head_count} is below the imbalance factor {imbalance_factor}; the tail class would be empty"
        )));
    }
    let last = (classes - 1) as f64;
    Ok((0..classes)
        .map(|k| {
            let n = (head_count as f64 * imbalance_factor.powf(-(k as f64) / last)).round() as usize;
            n.max(1)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<LabeledFeature>,
    pub test: Vec<LabeledFeature>,
    pub train_counts: Vec<usize>,
    pub means: Matrix,
    pub mean_scale: f64,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.train_counts.len()
    }

    pub fn input_dim(&self) -> usize {
        self.means.cols()
    }
}

fn unit_directions(spec: &LongTailSpec) -> Result<Matrix> {
    let mut rng = rng::stream(spec.seed, &[tags::DATA_MEANS]);
    match spec.geometry {
        ClassGeometry::Simplex => construct_etf(spec.classes, spec.input_dim, &mut rng),
        ClassGeometry::Random => {
            let mut m = Matrix::zeros(spec.classes, spec.input_dim);
            for k in 0..spec.classes {
                loop {
                    let row: Vec<f64> = (0..spec.input_dim).map(|_| rng.sample(StandardNormal)).collect();
                    let n = norm(&row);
                    if n > 1e-12 {
                        m.row_mut(k).iter_mut().zip(&row).for_each(|(d, s)| *d = s / n);
                        break;
                    }
                }
            }
            Ok(m)
        }
    }
}

fn draw_samples<R: rand::Rng + ?Sized>(mean: &[f64], sigma: f64, count: usize, label: usize, rng: &mut R) -> Vec<LabeledFeature> {
    (0..count)
        .map(|_| {
            let x = mean
                .iter()
                .map(|m| m + sigma * rng.sample::<f64, _>(StandardNormal))
                .collect();
            LabeledFeature::new(x, label)
        })
        .collect()
}

/// Accuracy of the nearest-mean rule on fresh samples, for equal-norm means.
fn nearest_mean_accuracy(directions: &Matrix, scale: f64, sigma: f64, seed: u64) -> f64 {
    const PER_CLASS: usize = 200;
    let means = scaled(directions, scale);
    let mut correct = 0usize;
    for k in 0..means.rows() {
        let mut rng = rng::stream(seed, &[tags::DATA_CALIBRATE, k as u64]);
        for s in draw_samples(means.row(k), sigma, PER_CLASS, k, &mut rng) {
            let scores: Vec<f64> = means.iter_rows().map(|m| dot(m, &s.x)).collect();
            if argmax(&scores) == k {
                correct += 1;
            }
        }
    }
    correct as f64 / (PER_CLASS * means.rows()) as f64
}

fn scaled(directions: &Matrix, scale: f64) -> Matrix {
    let mut m = directions.clone();
    m.as_mut_slice().iter_mut().for_each(|v| *v *= scale);
    m
}

fn calibrate_scale(directions: &Matrix, sigma: f64, band: [f64; 2], seed: u64) -> f64 {
    let target = 0.5 * (band[0] + band[1]);
    let (mut lo, mut hi) = (1e-3 * sigma, 1e3 * sigma);
    let mut mid = (lo * hi).sqrt();
    for _ in 0..60 {
        mid = (lo * hi).sqrt();
        let acc = nearest_mean_accuracy(directions, mid, sigma, seed);
        if (band[0]..=band[1]).contains(&acc) {
            break;
        }
        if acc < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    mid
}

/// Draws a long-tailed training set and a balanced test set from an
/// isotropic Gaussian mixture. Fully determined by `spec.seed`.
pub fn generate_dataset(spec: &LongTailSpec) -> Result<Dataset> {
    spec.validate()?;
    let counts = longtail_counts(spec.classes, spec.head_count, spec.imbalance_factor)?;
    let directions = unit_directions(spec)?;
    let scale = match spec.target_accuracy {
        Some(band) => calibrate_scale(&directions, spec.noise_sigma, band, spec.seed),
        None => spec.mean_scale,
    };
    let means = scaled(&directions, scale);

    let mut train = Vec::with_capacity(counts.iter().sum());
    let mut test = Vec::with_capacity(spec.classes * spec.test_per_class);
    for (k, &n) in counts.iter().enumerate() {
        let mut rng = rng::stream(spec.seed, &[tags::DATA_TRAIN, k as u64]);
        train.extend(draw_samples(means.row(k), spec.noise_sigma, n, k, &mut rng));
        let mut rng = rng::stream(spec.seed, &[tags::DATA_TEST, k as u64]);
        test.extend(draw_samples(means.row(k), spec.noise_sigma, spec.test_per_class, k, &mut rng));
    }
    Ok(Dataset {
        train,
        test,
        train_counts: counts,
        means,
        mean_scale: scale,
    })
}

/// Instance-uniform shuffled batches for one epoch. The permutation depends
/// only on `(seed, epoch)`; the last batch may be short.
pub fn batch_iter(num_samples: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch size must be positive");
    let mut order: Vec<usize> = (0..num_samples).collect();
    order.shuffle(&mut rng::stream(seed, &[tags::SHUFFLE, epoch as u64]));
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// One slot per class holding the most recent unit-norm projection seen for
/// that class. Empty slots are never read by the losses.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    dim: usize,
    slots: Vec<Option<Vec<f64>>>,
}

impl MemoryBank {
    pub fn new(num_classes: usize, dim: usize) -> Self {
        MemoryBank {
            dim,
            slots: vec![None; num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.slots.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn slots(&self) -> &[Option<Vec<f64>>] {
        &self.slots
    }

    pub fn get(&self, k: usize) -> Option<&[f64]> {
        self.slots[k].as_deref()
    }

    pub fn is_initialized(&self, k: usize) -> bool {
        self.slots[k].is_some()
    }

    pub fn initialized_count(&self) -> usize {
        self.slots.iter().filter(|s| s.is_some()).count()
    }

    /// Writes one slot directly, normalizing the vector.
    pub fn set(&mut self, k: usize, z: &[f64]) -> Result<bool> {
        check_dim(self.dim, z.len())?;
        if k >= self.slots.len() {
            return Err(Error::config(format!("bank slot {k} out of range")));
        }
        let n = norm(z);
        if !(n > 0.0 && n.is_finite()) {
            return Err(Error::Domain(format!("cannot store a zero or non-finite projection in slot {k}")));
        }
        let renormalized = (n - 1.0).abs() > 1e-12;
        self.slots[k] = Some(z.iter().map(|v| v / n).collect());
        Ok(renormalized)
    }

    /// Applies one batch: every class present takes the projection of its
    /// last occurrence in batch order, absent classes are left alone.
    /// Returns how many stored projections had to be renormalized.
    pub fn update<'a, I>(&mut self, batch: I) -> Result<usize>
    where
        I: IntoIterator<Item = (usize, &'a [f64])>,
    {
        let mut renormalized = 0;
        for (k, z) in batch {
            if self.set(k, z)? {
                renormalized += 1;
            }
        }
        Ok(renormalized)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitThresholds {
    pub many: usize,
    pub few: usize,
}

impl Default for SplitThresholds {
    fn default() -> Self {
        SplitThresholds { many: 100, few: 20 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Subset {
    Many,
    Medium,
    Few,
}

/// Partition of the classes by training count: `> many` is Many,
/// `[few, many]` is Medium, `< few` is Few.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubsetSplit {
    pub many: Vec<usize>,
    pub medium: Vec<usize>,
    pub few: Vec<usize>,
    assignment: Vec<Subset>,
}

impl SubsetSplit {
    pub fn subset_of(&self, class: usize) -> Subset {
        self.assignment[class]
    }

    pub fn num_classes(&self) -> usize {
        self.assignment.len()
    }
}

pub fn subset_split(train_counts: &[usize], thresholds: SplitThresholds) -> Result<SubsetSplit> {
    if !(thresholds.many > thresholds.few && thresholds.few > 0) {
        return Err(Error::config("split thresholds need many > few > 0"));
    }
    let assignment: Vec<Subset> = train_counts
        .iter()
        .map(|&n| {
            if n > thresholds.many {
                Subset::Many
            } else if n >= thresholds.few {
                Subset::Medium
            } else {
                Subset::Few
            }
        })
        .collect();
    let pick = |s: Subset| {
        assignment
            .iter()
            .enumerate()
            .filter(|&(_, &a)| a == s)
            .map(|(k, _)| k)
            .collect()
    };
    Ok(SubsetSplit {
        many: pick(Subset::Many),
        medium: pick(Subset::Medium),
        few: pick(Subset::Few),
        assignment,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cifar10_lt_counts() {
        let c = longtail_counts(10, 5000, 100.0).unwrap();
        assert_eq!(c[0], 5000);
        assert_eq!(c[9], 50);
        assert!(c.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn cifar100_lt_counts() {
        let c = longtail_counts(100, 500, 100.0).unwrap();
        assert_eq!(c[0], 500);
        assert_eq!(c[99], 5);
        // Rounding, not truncation (which would give 10847).
        assert_eq!(c.iter().sum::<usize>(), 10899);
    }

    #[test]
    fn balanced_counts() {
        assert_eq!(longtail_counts(4, 30, 1.0).unwrap(), vec![30; 4]);
    }

    #[test]
    fn head_below_if_rejected() {
        assert!(longtail_counts(10, 50, 100.0).is_err());
    }

    #[test]
    fn split_boundaries_belong_to_medium() {
        let s = subset_split(&[101, 100, 20, 19], SplitThresholds::default()).unwrap();
        assert_eq!(s.many, vec![0]);
        assert_eq!(s.medium, vec![1, 2]);
        assert_eq!(s.few, vec![3]);
    }

    #[test]
    fn cifar10_lt_has_no_few_subset() {
        let c = longtail_counts(10, 5000, 100.0).unwrap();
        let s = subset_split(&c, SplitThresholds::default()).unwrap();
        assert!(s.few.is_empty());
        assert_eq!(s.many.len() + s.medium.len(), 10);
    }

    #[test]
    fn all_above_many_threshold() {
        let s = subset_split(&[101; 5], SplitThresholds::default()).unwrap();
        assert_eq!(s.many.len(), 5);
    }

    #[test]
    fn bank_last_write_wins() {
        let mut bank = MemoryBank::new(5, 2);
        let a = [1.0, 0.0];
        let b = [0.0, 1.0];
        let c = [-1.0, 0.0];
        bank.update([(1, &a[..]), (1, &b[..]), (3, &c[..])]).unwrap();
        assert_eq!(bank.get(1).unwrap(), &b);
        assert_eq!(bank.get(3).unwrap(), &c);
        for k in [0, 2, 4] {
            assert!(!bank.is_initialized(k));
        }
    }

    #[test]
    fn bank_renormalizes_with_diagnostic() {
        let mut bank = MemoryBank::new(2, 2);
        let n = bank.update([(0, &[3.0, 4.0][..])]).unwrap();
        assert_eq!(n, 1);
        assert_eq!(bank.get(0).unwrap(), &[0.6, 0.8]);
        assert!(bank.update([(1, &[0.0, 0.0][..])]).is_err());
    }

    #[test]
    fn simplex_geometry_needs_room() {
        let spec = LongTailSpec {
            classes: 40,
            input_dim: 32,
            geometry: ClassGeometry::Simplex,
            ..LongTailSpec::default()
        };
        assert!(matches!(generate_dataset(&spec), Err(Error::Infeasible(_))));
    }

    #[test]
    fn batches_cover_every_index_once() {
        let batches = batch_iter(103, 10, 1, 0);
        assert_eq!(batches.len(), 11);
        assert_eq!(batches.last().unwrap().len(), 3);
        let mut all: Vec<usize> = batches.concat();
        all.sort_unstable();
        assert_eq!(all, (0..103).collect::<Vec<_>>());
        assert_eq!(batch_iter(103, 10, 1, 0), batches);
        assert_ne!(batch_iter(103, 10, 1, 1), batches);
    }
}
