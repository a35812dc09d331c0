//! Forward evaluation of the joint, contrastive and uniform losses.
//!
//! Every loss comes in two families. The BCE family scores each
//! sample-to-class (or class-to-class) metric with its own sigmoid, so the
//! terms are decoupled; the CE family pushes all metrics through one softmax
//! denominator. All arithmetic is `f64`, and every `log(1 + e^x)` goes
//! through [`softplus`] so that no finite input overflows.

use std::borrow::Cow;

use serde::{Deserialize, Serialize};

use crate::data::MemoryBank;
use crate::error::{check_dim, Error, Result};
use crate::vecops::{dot, norm, Matrix};

/// Tolerance used when checking that a classifier row is unit norm.
pub const UNIT_NORM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Bce,
    Ce,
}

impl Family {
    pub fn as_str(self) -> &'static str {
        match self {
            Family::Bce => "bce",
            Family::Ce => "ce",
        }
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which side of the sample-to-class metric is L2-normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    None,
    FeatureOnly,
    #[default]
    ClassifierOnly,
    Both,
}

impl Normalization {
    pub fn normalizes_features(self) -> bool {
        matches!(self, Normalization::FeatureOnly | Normalization::Both)
    }

    pub fn normalizes_classifier(self) -> bool {
        matches!(self, Normalization::ClassifierOnly | Normalization::Both)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Normalization::None => "none",
            Normalization::FeatureOnly => "feature_only",
            Normalization::ClassifierOnly => "classifier_only",
            Normalization::Both => "both",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "none" => Normalization::None,
            "feature_only" => Normalization::FeatureOnly,
            "classifier_only" => Normalization::ClassifierOnly,
            "both" => Normalization::Both,
            _ => return None,
        })
    }
}

/// Loss hyper-parameters.
///
/// `family` selects the joint loss. The contrastive and uniform terms follow
/// it unless overridden, which is how mixed rows such as CE joint learning
/// with BCE contrastive learning are expressed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub family: Family,
    pub contrastive_family: Option<Family>,
    pub uniform_family: Option<Family>,
    pub lambda_ss: f64,
    pub lambda_cc: f64,
    pub tau: f64,
    pub r: f64,
    pub beta: f64,
    pub include_cc_positive: bool,
    pub normalization: Normalization,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            family: Family::Bce,
            contrastive_family: None,
            uniform_family: None,
            lambda_ss: 0.0,
            lambda_cc: 0.0,
            tau: 0.5,
            r: 1.0,
            beta: 0.9999,
            include_cc_positive: false,
            normalization: Normalization::ClassifierOnly,
        }
    }
}

impl LossConfig {
    pub fn joint_family(&self) -> Family {
        self.family
    }

    pub fn contrastive_family(&self) -> Family {
        self.contrastive_family.unwrap_or(self.family)
    }

    pub fn uniform_family(&self) -> Family {
        self.uniform_family.unwrap_or(self.family)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, v: f64| Err(Error::config(format!("loss.{what} = {v} is out of range")));
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad("tau", self.tau);
        }
        if !(self.r > 0.0 && self.r <= 1.0) {
            return bad("r", self.r);
        }
        if !(self.lambda_ss >= 0.0 && self.lambda_ss.is_finite()) {
            return bad("lambda_ss", self.lambda_ss);
        }
        if !(self.lambda_cc >= 0.0 && self.lambda_cc.is_finite()) {
            return bad("lambda_cc", self.lambda_cc);
        }
        if !(0.0..1.0).contains(&self.beta) {
            return bad("beta", self.beta);
        }
        Ok(())
    }
}

/// A sample feature together with its class label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFeature {
    pub x: Vec<f64>,
    pub label: usize,
}

impl LabeledFeature {
    pub fn new(x: Vec<f64>, label: usize) -> Self {
        LabeledFeature { x, label }
    }
}

/// Linear classifier `{(w_j, b_j)}` with a normalization mode.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    weights: Matrix,
    biases: Vec<f64>,
    normalization: Normalization,
}

impl Classifier {
    pub fn new(weights: Matrix, biases: Vec<f64>, normalization: Normalization) -> Result<Self> {
        if weights.rows() < 2 {
            return Err(Error::config(format!(
                "classifier needs at least 2 classes, got {}",
                weights.rows()
            )));
        }
        if weights.cols() < 1 {
            return Err(Error::config("classifier dimension must be at least 1"));
        }
        check_dim(weights.rows(), biases.len())?;
        if weights.as_slice().iter().chain(&biases).any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite classifier parameter".into()));
        }
        if normalization.normalizes_classifier() && weights.iter_rows().any(|w| norm(w) == 0.0) {
            return Err(Error::Domain("zero classifier row cannot be normalized".into()));
        }
        Ok(Classifier {
            weights,
            biases,
            normalization,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>], biases: Vec<f64>, normalization: Normalization) -> Result<Self> {
        let weights = Matrix::from_rows(rows).ok_or_else(|| Error::config("ragged classifier rows"))?;
        Classifier::new(weights, biases, normalization)
    }

    /// Zero biases.
    pub fn unbiased(rows: &[Vec<f64>], normalization: Normalization) -> Result<Self> {
        Classifier::from_rows(rows, vec![0.0; rows.len()], normalization)
    }

    pub fn num_classes(&self) -> usize {
        self.weights.rows()
    }

    pub fn dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Matrix {
        &mut self.weights
    }

    pub fn biases(&self) -> &[f64] {
        &self.biases
    }

    pub fn biases_mut(&mut self) -> &mut [f64] {
        &mut self.biases
    }

    pub fn normalization(&self) -> Normalization {
        self.normalization
    }

    pub fn set_normalization(&mut self, normalization: Normalization) {
        self.normalization = normalization;
    }

    /// The weight vectors that actually enter the logits.
    pub fn effective_weights(&self) -> Cow<'_, Matrix> {
        if !self.normalization.normalizes_classifier() {
            return Cow::Borrowed(&self.weights);
        }
        let mut w = self.weights.clone();
        for k in 0..w.rows() {
            let row = w.row_mut(k);
            let n = norm(row);
            row.iter_mut().for_each(|v| *v /= n);
        }
        Cow::Owned(w)
    }

    /// Rescales every stored row to unit norm.
    pub fn renormalize(&mut self) {
        for k in 0..self.weights.rows() {
            let row = self.weights.row_mut(k);
            let n = norm(row);
            if n > 0.0 {
                row.iter_mut().for_each(|v| *v /= n);
            }
        }
    }

    /// The feature as seen by the classifier under the normalization mode.
    pub fn effective_feature<'a>(&self, x: &'a [f64]) -> Result<Cow<'a, [f64]>> {
        check_dim(self.dim(), x.len())?;
        if !self.normalization.normalizes_features() {
            return Ok(Cow::Borrowed(x));
        }
        let n = norm(x);
        if n == 0.0 {
            return Err(Error::Domain("zero feature cannot be normalized".into()));
        }
        Ok(Cow::Owned(x.iter().map(|v| v / n).collect()))
    }

    /// `w̃_j · x̃ + b_j` for every class.
    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        let xe = self.effective_feature(x)?;
        Ok(logits_with(&self.effective_weights(), &self.biases, &xe))
    }

    /// `argmax_j logits_j`, ties going to the lowest index.
    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.logits(x)?))
    }

    /// Checks that every effective row is unit norm, as the uniform loss requires.
    pub fn check_unit_rows(&self) -> Result<()> {
        if self.normalization.normalizes_classifier() {
            return Ok(());
        }
        for (k, w) in self.weights.iter_rows().enumerate() {
            let n = norm(w);
            if (n - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::config(format!(
                    "uniform loss needs unit-norm classifier rows; row {k} has norm {n}"
                )));
            }
        }
        Ok(())
    }
}

pub(crate) fn logits_with(w: &Matrix, b: &[f64], x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; w.rows()];
    w.matvec_into(x, &mut out);
    for (o, bj) in out.iter_mut().zip(b) {
        *o += bj;
    }
    out
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// `log(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log Σ e^{v_i}` via the max-shift form.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Softmax probabilities, max-shifted.
pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= s);
    p
}

/// Which negatives enter the BCE joint loss for one sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NegativeMask {
    keep: Vec<bool>,
}

impl NegativeMask {
    /// Every negative kept (the `r = 1` mask).
    pub fn all(num_classes: usize) -> Self {
        NegativeMask {
            keep: vec![true; num_classes],
        }
    }

    /// Every negative dropped except `keep[k_true]`, which is unused.
    pub fn none(num_classes: usize, positive: usize) -> Self {
        let mut keep = vec![false; num_classes];
        keep[positive] = true;
        NegativeMask { keep }
    }

    pub fn from_keep(keep: Vec<bool>) -> Self {
        NegativeMask { keep }
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    #[inline]
    pub fn keeps(&self, j: usize) -> bool {
        self.keep[j]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.keep
    }

    /// Number of kept negatives, excluding the positive class.
    pub fn kept_negatives(&self, positive: usize) -> usize {
        self.keep
            .iter()
            .enumerate()
            .filter(|&(j, &kept)| j != positive && kept)
            .count()
    }
}

/// Draws one Bernoulli(`r`) keep decision per negative class: negative `j`
/// is kept iff `p_j < r` with `p_j ~ U(0,1)`.
pub fn draw_negative_mask<R: rand::Rng + ?Sized>(
    positive: usize,
    num_classes: usize,
    r: f64,
    rng: &mut R,
) -> NegativeMask {
    let keep = (0..num_classes)
        .map(|j| j == positive || rng.random::<f64>() < r)
        .collect();
    NegativeMask { keep }
}

/// CE joint loss given precomputed logits.
pub fn ce_joint_from_logits(logits: &[f64], label: usize) -> f64 {
    log_sum_exp(logits) - logits[label]
}

/// BCE joint loss given precomputed logits.
pub fn bce_joint_from_logits(logits: &[f64], label: usize, mask: &NegativeMask) -> f64 {
    let mut loss = softplus(-logits[label]);
    for (j, &l) in logits.iter().enumerate() {
        if j != label && mask.keeps(j) {
            loss += softplus(l);
        }
    }
    loss
}

fn check_label(label: usize, num_classes: usize) -> Result<()> {
    if label < num_classes {
        Ok(())
    } else {
        Err(Error::config(format!("label {label} out of range for {num_classes} classes")))
    }
}

/// `-log softmax_k(w̃_j·x̃ + b_j)`.
pub fn ce_joint(sample: &LabeledFeature, clf: &Classifier) -> Result<f64> {
    check_label(sample.label, clf.num_classes())?;
    Ok(ce_joint_from_logits(&clf.logits(&sample.x)?, sample.label))
}

/// `softplus(-(w̃_k·x̃ + b_k)) + Σ_{j≠k, kept} softplus(w̃_j·x̃ + b_j)`.
pub fn bce_joint(sample: &LabeledFeature, clf: &Classifier, mask: &NegativeMask) -> Result<f64> {
    check_label(sample.label, clf.num_classes())?;
    check_dim(clf.num_classes(), mask.len())?;
    Ok(bce_joint_from_logits(&clf.logits(&sample.x)?, sample.label, mask))
}

/// Joint loss for either family.
pub fn joint(sample: &LabeledFeature, clf: &Classifier, mask: &NegativeMask, family: Family) -> Result<f64> {
    match family {
        Family::Bce => bce_joint(sample, clf, mask),
        Family::Ce => ce_joint(sample, clf),
    }
}

/// Cosines between `z` and every initialized bank slot (`None` for the rest).
pub(crate) fn bank_cosines(z: &[f64], bank: &MemoryBank) -> Result<Vec<Option<f64>>> {
    check_dim(bank.dim(), z.len())?;
    let nz = norm(z);
    if nz == 0.0 || !nz.is_finite() {
        return Err(Error::Domain("zero-norm projection".into()));
    }
    Ok(bank
        .slots()
        .iter()
        .map(|s| s.as_deref().map(|zs| dot(z, zs) / nz))
        .collect())
}

/// Softmax contrastive loss against the class-level memory bank.
///
/// The denominator runs over the initialized slots. Returns `Ok(None)` when
/// the sample's own slot has not been written yet.
pub fn ce_contrastive(z: &[f64], label: usize, bank: &MemoryBank, tau: f64) -> Result<Option<f64>> {
    check_label(label, bank.num_classes())?;
    let cos = bank_cosines(z, bank)?;
    let Some(own) = cos[label] else {
        return Ok(None);
    };
    let scaled: Vec<f64> = cos.iter().flatten().map(|c| c / tau).collect();
    Ok(Some(log_sum_exp(&scaled) - own / tau))
}

/// Sigmoid contrastive loss against the class-level memory bank.
pub fn bce_contrastive(z: &[f64], label: usize, bank: &MemoryBank, tau: f64) -> Result<Option<f64>> {
    check_label(label, bank.num_classes())?;
    let cos = bank_cosines(z, bank)?;
    let Some(own) = cos[label] else {
        return Ok(None);
    };
    let mut loss = softplus(-own / tau);
    for (j, c) in cos.iter().enumerate() {
        if let (true, Some(c)) = (j != label, c) {
            loss += softplus(c / tau);
        }
    }
    Ok(Some(loss))
}

pub fn contrastive(z: &[f64], label: usize, bank: &MemoryBank, tau: f64, family: Family) -> Result<Option<f64>> {
    match family {
        Family::Bce => bce_contrastive(z, label, bank, tau),
        Family::Ce => ce_contrastive(z, label, bank, tau),
    }
}

/// BCE uniform loss of row `k` over arbitrary rows (no unit-norm check).
pub fn bce_uniform_rows(w: &Matrix, k: usize, include_positive: bool) -> f64 {
    let wk = w.row(k);
    let mut loss = if include_positive {
        softplus(-dot(wk, wk))
    } else {
        0.0
    };
    for (j, wj) in w.iter_rows().enumerate() {
        if j != k {
            loss += softplus(dot(wk, wj));
        }
    }
    loss
}

/// CE uniform loss of row `k` over arbitrary rows (no unit-norm check).
pub fn ce_uniform_rows(w: &Matrix, k: usize) -> f64 {
    let wk = w.row(k);
    let sims: Vec<f64> = w.iter_rows().map(|wj| dot(wk, wj)).collect();
    log_sum_exp(&sims) - sims[k]
}

/// `(1/K) Σ_k L_cc(w_k)` over arbitrary rows.
pub fn uniform_mean_rows(w: &Matrix, family: Family, include_positive: bool) -> f64 {
    let k = w.rows();
    let total: f64 = (0..k)
        .map(|i| match family {
            Family::Bce => bce_uniform_rows(w, i, include_positive),
            Family::Ce => ce_uniform_rows(w, i),
        })
        .sum();
    total / k as f64
}

/// BCE uniform separability loss for class `k`.
pub fn bce_uniform(clf: &Classifier, k: usize, include_positive: bool) -> Result<f64> {
    check_label(k, clf.num_classes())?;
    clf.check_unit_rows()?;
    Ok(bce_uniform_rows(&clf.effective_weights(), k, include_positive))
}

/// CE uniform separability loss for class `k`: `-1 + log Σ_j e^{w_k·w_j}`.
pub fn ce_uniform(clf: &Classifier, k: usize) -> Result<f64> {
    check_label(k, clf.num_classes())?;
    clf.check_unit_rows()?;
    Ok(ce_uniform_rows(&clf.effective_weights(), k))
}

/// Class-balanced weight `(1 - β) / (1 - β^n)`.
pub fn cb_weight(n: usize, beta: f64) -> f64 {
    assert!(n >= 1, "class count must be positive");
    assert!((0.0..1.0).contains(&beta), "beta must lie in [0, 1)");
    if n == 1 || beta == 0.0 {
        return 1.0;
    }
    // 1 - β^n = -expm1(n ln β) keeps precision for β close to 1.
    let denom = -(n as f64 * (beta - 1.0).ln_1p()).exp_m1();
    (1.0 - beta) / denom
}

/// The three weighted components of a tripartite loss.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    /// `(1/B) Σ L_sc`
    pub sc: f64,
    /// `(1/B) Σ L_ss`, unweighted by `λ_ss`.
    pub ss: f64,
    /// `(1/K) Σ L_cc`, unweighted by `λ_cc`.
    pub cc: f64,
    pub total: f64,
}

/// Tripartite synergistic loss over a batch.
///
/// Masks for the BCE joint term are drawn from `rng` in batch order, one
/// Bernoulli(`r`) per negative; with `r = 1` no draws are made. Samples
/// whose own bank slot is empty contribute zero contrastive loss, and the
/// contrastive and uniform terms are skipped entirely when their weight is
/// zero.
pub fn tripartite_loss<R: rand::Rng + ?Sized>(
    batch: &[LabeledFeature],
    projections: &[Vec<f64>],
    clf: &Classifier,
    bank: &MemoryBank,
    cfg: &LossConfig,
    rng: &mut R,
) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    check_dim(batch.len(), projections.len())?;
    cfg.validate()?;
    let k_count = clf.num_classes();
    let b = batch.len() as f64;

    let mut sc = 0.0;
    for sample in batch {
        let mask = if cfg.joint_family() == Family::Bce && cfg.r < 1.0 {
            draw_negative_mask(sample.label, k_count, cfg.r, rng)
        } else {
            NegativeMask::all(k_count)
        };
        sc += joint(sample, clf, &mask, cfg.joint_family())?;
    }
    sc /= b;

    let mut ss = 0.0;
    if cfg.lambda_ss > 0.0 {
        for (sample, z) in batch.iter().zip(projections) {
            ss += contrastive(z, sample.label, bank, cfg.tau, cfg.contrastive_family())?.unwrap_or(0.0);
        }
        ss /= b;
    }

    let mut cc = 0.0;
    if cfg.lambda_cc > 0.0 {
        clf.check_unit_rows()?;
        cc = uniform_mean_rows(&clf.effective_weights(), cfg.uniform_family(), cfg.include_cc_positive);
    }

    Ok(LossBreakdown {
        sc,
        ss,
        cc,
        total: sc + cfg.lambda_ss * ss + cfg.lambda_cc * cc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::LN_2;

    #[test]
    fn softplus_reference_points() {
        assert_eq!(softplus(0.0), LN_2);
        assert_eq!(softplus(1000.0), 1000.0);
        assert!((softplus(-40.0) - (-40.0f64).exp()).abs() < 1e-25);
        assert!(softplus(-1000.0) >= 0.0);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(1e4), 1.0);
        assert_eq!(sigmoid(-1e4), 0.0);
        assert_eq!(sigmoid(0.0), 0.5);
    }

    #[test]
    fn ce_joint_uniform_logits_is_log_k() {
        let rows = vec![vec![0.0, 1.0]; 10];
        let clf = Classifier::unbiased(&rows, Normalization::None).unwrap();
        let s = LabeledFeature::new(vec![0.3, 0.0], 4);
        assert!((ce_joint(&s, &clf).unwrap() - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ce_joint_large_margin_goes_to_zero() {
        let clf = Classifier::unbiased(&[vec![1.0], vec![-1.0], vec![-1.0]], Normalization::None).unwrap();
        let s = LabeledFeature::new(vec![400.0], 0);
        let l = ce_joint(&s, &clf).unwrap();
        assert!((0.0..1e-300).contains(&l));
    }

    #[test]
    fn bce_joint_zero_logits() {
        let clf = Classifier::unbiased(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]], Normalization::None)
            .unwrap();
        let s = LabeledFeature::new(vec![0.0, 0.0], 1);
        let l = bce_joint(&s, &clf, &NegativeMask::all(3)).unwrap();
        assert!((l - 3.0 * LN_2).abs() < 1e-15);
    }

    #[test]
    fn bce_joint_degenerate_mask_keeps_only_positive() {
        let clf = Classifier::from_rows(&[vec![0.6, 0.8], vec![1.0, 0.0]], vec![0.1, -0.3], Normalization::None)
            .unwrap();
        let s = LabeledFeature::new(vec![0.5, -2.0], 0);
        let l = bce_joint(&s, &clf, &NegativeMask::none(2, 0)).unwrap();
        let logit0 = 0.6 * 0.5 + 0.8 * -2.0 + 0.1;
        assert!((l - softplus(-logit0)).abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let clf = Classifier::unbiased(&[vec![1.0, 0.0], vec![0.0, 1.0]], Normalization::None).unwrap();
        let s = LabeledFeature::new(vec![1.0], 0);
        assert!(matches!(ce_joint(&s, &clf), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn classifier_normalization_affects_logits() {
        let clf = Classifier::from_rows(&[vec![3.0, 4.0], vec![0.0, 2.0]], vec![0.5, 0.0], Normalization::ClassifierOnly)
            .unwrap();
        let l = clf.logits(&[1.0, 1.0]).unwrap();
        assert!((l[0] - (0.6 + 0.8 + 0.5)).abs() < 1e-15);
        assert!((l[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn predict_breaks_ties_to_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }

    #[test]
    fn mask_r_one_keeps_everything() {
        let mut rng = crate::rng::stream(9, &[]);
        let m = draw_negative_mask(3, 7, 1.0, &mut rng);
        assert_eq!(m.kept_negatives(3), 6);
    }

    #[test]
    fn mask_draws_are_deterministic() {
        let a = draw_negative_mask(0, 50, 0.3, &mut crate::rng::stream(5, &[1]));
        let b = draw_negative_mask(0, 50, 0.3, &mut crate::rng::stream(5, &[1]));
        assert_eq!(a, b);
    }

    #[test]
    fn bce_uniform_reference_points() {
        let anti = Classifier::unbiased(&[vec![1.0, 0.0], vec![-1.0, 0.0]], Normalization::None).unwrap();
        assert!((bce_uniform(&anti, 0, false).unwrap() - softplus(-1.0)).abs() < 1e-15);
        assert!((softplus(-1.0) - 0.313_261_687_518_222_8).abs() < 1e-15);
        let orth = Classifier::unbiased(&[vec![1.0, 0.0], vec![0.0, 1.0]], Normalization::None).unwrap();
        assert!((bce_uniform(&orth, 1, false).unwrap() - LN_2).abs() < 1e-15);
        let with_pos = bce_uniform(&orth, 1, true).unwrap();
        assert!((with_pos - LN_2 - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-15);
    }

    #[test]
    fn uniform_rejects_non_unit_rows() {
        let clf = Classifier::unbiased(&[vec![2.0, 0.0], vec![0.0, 1.0]], Normalization::None).unwrap();
        assert!(matches!(bce_uniform(&clf, 0, false), Err(Error::Config(_))));
        assert!(matches!(ce_uniform(&clf, 0), Err(Error::Config(_))));
        // Under classifier normalization the effective rows are unit by construction.
        let clf = Classifier::unbiased(&[vec![2.0, 0.0], vec![0.0, 1.0]], Normalization::ClassifierOnly).unwrap();
        assert!((bce_uniform(&clf, 0, false).unwrap() - LN_2).abs() < 1e-15);
    }

    #[test]
    fn ce_uniform_identical_rows_is_log_k() {
        let rows = vec![vec![0.0, 1.0, 0.0]; 5];
        let clf = Classifier::unbiased(&rows, Normalization::None).unwrap();
        assert!((ce_uniform(&clf, 2).unwrap() - 5f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn cb_weight_edges() {
        assert_eq!(cb_weight(1, 0.9999), 1.0);
        assert_eq!(cb_weight(1, 0.3), 1.0);
        assert!((cb_weight(10_000_000, 0.9999) - 1e-4).abs() < 1e-12);
        assert!(cb_weight(5, 0.9) > cb_weight(6, 0.9));
    }

    #[test]
    fn loss_config_validation() {
        let mut cfg = LossConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.r = 0.0;
        assert!(cfg.validate().is_err());
        cfg.r = 0.5;
        cfg.beta = 1.0;
        assert!(cfg.validate().is_err());
        cfg.beta = 0.9;
        cfg.tau = 0.0;
        assert!(cfg.validate().is_err());
    }
}
