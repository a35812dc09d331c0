//! Analytic gradients for every loss component and a central
//! finite-difference checker that arbitrates them.
//!
//! Gradients are taken with respect to the *stored* parameters. When a
//! normalization mode is active, the chain rule runs through `v / |v|`,
//! which at a unit-norm point is exactly the projection onto the tangent
//! space of the sphere. Memory-bank entries are constants.

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::data::MemoryBank;
use crate::error::{check_dim, Error, Result};
use crate::losses::{
    self, draw_negative_mask, sigmoid, softmax, Classifier, Family, LabeledFeature, NegativeMask, Normalization,
};
use crate::rng::{self, tags};
use crate::vecops::{axpy, dot, norm, normalize_backward, project_tangent, Matrix};

/// The activation that turns a metric into a pulling/repelling weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ActivationKind {
    SoftmaxCe,
    SigmoidBce,
}

impl From<Family> for ActivationKind {
    fn from(f: Family) -> Self {
        match f {
            Family::Bce => ActivationKind::SigmoidBce,
            Family::Ce => ActivationKind::SoftmaxCe,
        }
    }
}

impl ActivationKind {
    pub fn family(self) -> Family {
        match self {
            ActivationKind::SigmoidBce => Family::Bce,
            ActivationKind::SoftmaxCe => Family::Ce,
        }
    }
}

/// `∂L_sc/∂logit_j` for one sample. For BCE: `σ(ℓ_k) - 1` on the positive,
/// `σ(ℓ_j)` on kept negatives, 0 on masked ones. For CE: `p_j - δ_jk`.
pub fn joint_logit_grads(logits: &[f64], label: usize, mask: &NegativeMask, kind: ActivationKind) -> Vec<f64> {
    match kind {
        ActivationKind::SigmoidBce => logits
            .iter()
            .enumerate()
            .map(|(j, &l)| {
                if j == label {
                    sigmoid(l) - 1.0
                } else if mask.keeps(j) {
                    sigmoid(l)
                } else {
                    0.0
                }
            })
            .collect(),
        ActivationKind::SoftmaxCe => {
            let mut p = softmax(logits);
            p[label] -= 1.0;
            p
        }
    }
}

/// Gradient of the joint loss with respect to the raw feature `x`:
/// `-(1 - Act(ℓ_k)) w̃_k + Σ_{j≠k, kept} Act(ℓ_j) w̃_j`, pulled back through
/// the feature normalization when the mode has one.
pub fn grad_joint_wrt_feature(
    sample: &LabeledFeature,
    clf: &Classifier,
    mask: &NegativeMask,
    kind: ActivationKind,
) -> Result<Vec<f64>> {
    check_dim(clf.num_classes(), mask.len())?;
    let xe = clf.effective_feature(&sample.x)?;
    let w = clf.effective_weights();
    let logits = losses::logits_with(&w, clf.biases(), &xe);
    let dl = joint_logit_grads(&logits, sample.label, mask, kind);
    let mut g = vec![0.0; clf.dim()];
    w.matvec_t_acc(&dl, &mut g);
    if clf.normalization().normalizes_features() {
        g = normalize_backward(&g, &xe, norm(&sample.x));
    }
    Ok(g)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierGrads {
    pub weights: Matrix,
    pub biases: Vec<f64>,
}

impl ClassifierGrads {
    pub fn zeros(k: usize, d: usize) -> Self {
        ClassifierGrads {
            weights: Matrix::zeros(k, d),
            biases: vec![0.0; k],
        }
    }

    /// Weights followed by biases.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = self.weights.as_slice().to_vec();
        v.extend_from_slice(&self.biases);
        v
    }
}

/// Pulls a gradient with respect to the effective rows back to the stored
/// rows (identity unless the classifier is normalized).
pub(crate) fn classifier_rows_backward(clf: &Classifier, g_eff: &mut Matrix) {
    if !clf.normalization().normalizes_classifier() {
        return;
    }
    for k in 0..clf.num_classes() {
        let w = clf.weights().row(k);
        let n = norm(w);
        let u: Vec<f64> = w.iter().map(|v| v / n).collect();
        let g = normalize_backward(g_eff.row(k), &u, n);
        g_eff.row_mut(k).copy_from_slice(&g);
    }
}

/// Gradient of the batch-mean joint loss `(1/B) Σ_i c_i L_sc(x_i)` with
/// respect to the classifier weights and biases. `sample_weights` are the
/// `c_i` (all 1 when `None`); class-balanced fine-tuning passes
/// [`losses::cb_weight`] values here.
pub fn grad_joint_wrt_classifier_weighted(
    batch: &[LabeledFeature],
    clf: &Classifier,
    masks: &[NegativeMask],
    kind: ActivationKind,
    sample_weights: Option<&[f64]>,
) -> Result<ClassifierGrads> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    check_dim(batch.len(), masks.len())?;
    if let Some(c) = sample_weights {
        check_dim(batch.len(), c.len())?;
    }
    let w = clf.effective_weights();
    let (k, d) = (clf.num_classes(), clf.dim());
    let inv_b = 1.0 / batch.len() as f64;
    let mut out = ClassifierGrads::zeros(k, d);
    for (i, (sample, mask)) in batch.iter().zip(masks).enumerate() {
        check_dim(k, mask.len())?;
        let xe = clf.effective_feature(&sample.x)?;
        let logits = losses::logits_with(&w, clf.biases(), &xe);
        let scale = inv_b * sample_weights.map_or(1.0, |c| c[i]);
        let dl = joint_logit_grads(&logits, sample.label, mask, kind);
        out.weights.rank1_acc(scale, &dl, &xe);
        axpy(scale, &dl, &mut out.biases);
    }
    classifier_rows_backward(clf, &mut out.weights);
    Ok(out)
}

/// Gradient of the batch-mean joint loss with respect to the classifier.
pub fn grad_joint_wrt_classifier(
    batch: &[LabeledFeature],
    clf: &Classifier,
    masks: &[NegativeMask],
    kind: ActivationKind,
) -> Result<ClassifierGrads> {
    grad_joint_wrt_classifier_weighted(batch, clf, masks, kind, None)
}

/// `∂L_ss/∂s_ℓ` for the bank cosines `s_ℓ` (zero for empty slots).
fn contrastive_cos_grads(cos: &[Option<f64>], label: usize, tau: f64, kind: ActivationKind) -> Vec<f64> {
    match kind {
        ActivationKind::SigmoidBce => cos
            .iter()
            .enumerate()
            .map(|(j, c)| match c {
                Some(c) if j == label => (sigmoid(c / tau) - 1.0) / tau,
                Some(c) => sigmoid(c / tau) / tau,
                None => 0.0,
            })
            .collect(),
        ActivationKind::SoftmaxCe => {
            let scaled: Vec<f64> = cos.iter().flatten().map(|c| c / tau).collect();
            let p = softmax(&scaled);
            let mut it = p.into_iter();
            cos.iter()
                .enumerate()
                .map(|(j, c)| match c {
                    Some(_) => {
                        let pj = it.next().expect("one probability per initialized slot");
                        (pj - if j == label { 1.0 } else { 0.0 }) / tau
                    }
                    None => 0.0,
                })
                .collect()
        }
    }
}

/// Exact gradient of the contrastive loss with respect to the raw
/// projection `z`, through the full cosine. The result is always orthogonal
/// to `z`. Returns `Ok(None)` when the sample's own slot is empty.
pub fn grad_contrastive_wrt_projection(
    z: &[f64],
    label: usize,
    bank: &MemoryBank,
    tau: f64,
    kind: ActivationKind,
) -> Result<Option<Vec<f64>>> {
    let cos = losses::bank_cosines(z, bank)?;
    if cos[label].is_none() {
        return Ok(None);
    }
    let ds = contrastive_cos_grads(&cos, label, tau, kind);
    let nz = norm(z);
    let zhat: Vec<f64> = z.iter().map(|v| v / nz).collect();
    let mut g = vec![0.0; z.len()];
    for (j, slot) in bank.slots().iter().enumerate() {
        if let (Some(zs), true) = (slot, ds[j] != 0.0) {
            axpy(ds[j], zs, &mut g);
        }
    }
    Ok(Some(normalize_backward(&g, &zhat, nz)))
}

/// The pulling/repelling form `-(1/τ)(1 - Act(s_k)) z*_k + Σ_{j≠k} (1/τ) Act(s_j) z*_j`
/// with `Act` evaluated at `s/τ`. This ignores the normalization of `z`; the
/// exact gradient equals `(I - ẑẑᵀ)/|z|` applied to it. Kept for comparison only.
pub fn contrastive_pull_repel_form(
    z: &[f64],
    label: usize,
    bank: &MemoryBank,
    tau: f64,
    kind: ActivationKind,
) -> Result<Option<Vec<f64>>> {
    let cos = losses::bank_cosines(z, bank)?;
    if cos[label].is_none() {
        return Ok(None);
    }
    let ds = contrastive_cos_grads(&cos, label, tau, kind);
    let mut g = vec![0.0; z.len()];
    for (j, slot) in bank.slots().iter().enumerate() {
        if let Some(zs) = slot {
            axpy(ds[j], zs, &mut g);
        }
    }
    Ok(Some(g))
}

/// Gradient of `(1/K) Σ_k L_cc(w_k)` with respect to the rows as given.
///
/// Each pair `(k, j)` appears in both `L_cc(w_k)` and `L_cc(w_j)`, so every
/// row collects two contributions per partner.
pub fn grad_uniform_rows(w: &Matrix, kind: ActivationKind, include_positive: bool) -> Matrix {
    let k = w.rows();
    let inv_k = 1.0 / k as f64;
    let mut g = Matrix::zeros(k, w.cols());
    match kind {
        ActivationKind::SigmoidBce => {
            for a in 0..k {
                for b in (a + 1)..k {
                    let s = sigmoid(dot(w.row(a), w.row(b))) * 2.0 * inv_k;
                    axpy(s, w.row(b), g.row_mut(a));
                    axpy(s, w.row(a), g.row_mut(b));
                }
                if include_positive {
                    let s = -2.0 * sigmoid(-dot(w.row(a), w.row(a))) * inv_k;
                    axpy(s, w.row(a), g.row_mut(a));
                }
            }
        }
        ActivationKind::SoftmaxCe => {
            // L_a = -w_a·w_a + log Σ_j exp(w_a·w_j)
            for a in 0..k {
                let wa = w.row(a).to_vec();
                let sims: Vec<f64> = w.iter_rows().map(|wj| dot(&wa, wj)).collect();
                let p = softmax(&sims);
                axpy((p[a] - 2.0) * inv_k, &wa, g.row_mut(a));
                for (j, pj) in p.iter().enumerate() {
                    axpy(pj * inv_k, w.row(j), g.row_mut(a));
                    if j != a {
                        axpy(pj * inv_k, &wa, g.row_mut(j));
                    }
                }
            }
        }
    }
    g
}

/// Gradient of the mean uniform loss with respect to the stored classifier
/// rows. Under classifier normalization this runs through `w / |w|` (and the
/// positive term drops out); otherwise the rows must already be unit norm
/// and the unconstrained gradient is returned.
pub fn grad_uniform_wrt_classifier(clf: &Classifier, kind: ActivationKind, include_positive: bool) -> Result<Matrix> {
    clf.check_unit_rows()?;
    let mut g = grad_uniform_rows(&clf.effective_weights(), kind, include_positive);
    classifier_rows_backward(clf, &mut g);
    Ok(g)
}

/// Removes each row's radial component: `g_k - (g_k·ŵ_k) ŵ_k`.
pub fn project_rows_tangent(w: &Matrix, g: &Matrix) -> Matrix {
    let mut out = g.clone();
    for k in 0..w.rows() {
        if let Some(u) = crate::vecops::normalized(w.row(k)) {
            project_tangent(out.row_mut(k), &u);
        }
    }
    out
}

/// Central differences `(f(θ + h e_i) - f(θ - h e_i)) / 2h`.
///
/// `f` must be deterministic; it is evaluated twice at `theta` first and a
/// mismatch is reported as a contract violation.
pub fn finite_diff<F>(mut f: F, theta: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::config("finite-difference step must be positive"));
    }
    let f0 = f(theta);
    let f1 = f(theta);
    if f0.to_bits() != f1.to_bits() {
        return Err(Error::GradCheck(
            "loss is not deterministic under frozen state; freeze masks and RNG before differencing".into(),
        ));
    }
    let mut t = theta.to_vec();
    let mut out = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let orig = t[i];
        t[i] = orig + step;
        let fp = f(&t);
        t[i] = orig - step;
        let fm = f(&t);
        t[i] = orig;
        out.push((fp - fm) / (2.0 * step));
    }
    Ok(out)
}

/// Floor on the relative-error denominator.
pub const REL_ERR_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub op: String,
    pub seed: Option<u64>,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Coordinate with the largest relative error.
    pub worst_index: usize,
}

impl GradReport {
    /// Per-coordinate `|a - n| / max(|a|, |n|, 1e-8)`, maximized.
    pub fn compare(op: impl Into<String>, seed: Option<u64>, analytic: Vec<f64>, numeric: Vec<f64>) -> Self {
        assert_eq!(analytic.len(), numeric.len(), "gradient lengths differ");
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        let mut worst = 0;
        for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
            let abs = (a - n).abs();
            let rel = abs / a.abs().max(n.abs()).max(REL_ERR_FLOOR);
            max_abs = max_abs.max(abs);
            if rel > max_rel || rel.is_nan() {
                max_rel = if rel.is_nan() { f64::INFINITY } else { rel };
                worst = i;
            }
        }
        GradReport {
            op: op.into(),
            seed,
            analytic,
            numeric,
            max_rel_err: max_rel,
            max_abs_err: max_abs,
            worst_index: worst,
        }
    }

    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Fails with every offending (operation, seed, coordinate) listed.
pub fn suite_verdict(reports: &[GradReport], tol: f64) -> Result<()> {
    let failures: Vec<String> = reports
        .iter()
        .filter(|r| !r.passed(tol))
        .map(|r| {
            format!(
                "{} seed {} coordinate {}: rel err {:.3e} (analytic {:.6e}, numeric {:.6e})",
                r.op,
                r.seed.map_or_else(|| "-".into(), |s| s.to_string()),
                r.worst_index,
                r.max_rel_err,
                r.analytic[r.worst_index],
                r.numeric[r.worst_index],
            )
        })
        .collect();
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Error::GradCheck(failures.join("; ")))
    }
}

/// Settings of the default gradient-check suite.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckSettings {
    pub seeds: Vec<u64>,
    pub tol: f64,
    pub step: f64,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        GradCheckSettings {
            seeds: (0..20).collect(),
            tol: 1e-4,
            step: 1e-6,
        }
    }
}

const MODES: [Normalization; 4] = [
    Normalization::None,
    Normalization::FeatureOnly,
    Normalization::ClassifierOnly,
    Normalization::Both,
];

fn gaussian_vec<R: rand::Rng + ?Sized>(n: usize, scale: f64, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn unit_rows<R: rand::Rng + ?Sized>(k: usize, d: usize, rng: &mut R) -> Matrix {
    let mut m = Matrix::zeros(k, d);
    for i in 0..k {
        let v = gaussian_vec(d, 1.0, rng);
        let n = norm(&v);
        m.row_mut(i).iter_mut().zip(&v).for_each(|(o, x)| *o = x / n);
    }
    m
}

/// A random classifier instance for gradient checks.
pub fn random_classifier<R: rand::Rng + ?Sized>(
    k: usize,
    d: usize,
    normalization: Normalization,
    rng: &mut R,
) -> Classifier {
    let w = Matrix::from_vec(k, d, gaussian_vec(k * d, 1.0, rng));
    let b = gaussian_vec(k, 0.5, rng);
    Classifier::new(w, b, normalization).expect("random classifier is valid")
}

pub fn random_batch<R: rand::Rng + ?Sized>(b: usize, k: usize, d: usize, rng: &mut R) -> Vec<LabeledFeature> {
    (0..b)
        .map(|_| LabeledFeature::new(gaussian_vec(d, 1.0, rng), rng.random_range(0..k)))
        .collect()
}

/// A bank with every slot but `empty` filled with random unit vectors.
pub fn random_bank<R: rand::Rng + ?Sized>(k: usize, d: usize, empty: Option<usize>, rng: &mut R) -> MemoryBank {
    let mut bank = MemoryBank::new(k, d);
    let rows = unit_rows(k, d, rng);
    for j in 0..k {
        if Some(j) != empty {
            bank.set(j, rows.row(j)).expect("unit row");
        }
    }
    bank
}

fn with_params(clf: &Classifier, theta: &[f64]) -> Classifier {
    let (k, d) = (clf.num_classes(), clf.dim());
    let w = Matrix::from_vec(k, d, theta[..k * d].to_vec());
    let mut out = clf.clone();
    *out.weights_mut() = w;
    out.biases_mut().copy_from_slice(&theta[k * d..]);
    out
}

fn check_joint_feature(seed: u64, kind: ActivationKind, step: f64) -> Result<GradReport> {
    let mut rng = rng::stream(seed, &[tags::GRADCHECK, 1, kind as u64]);
    let mode = MODES[(seed % 4) as usize];
    let clf = random_classifier(5, 3, mode, &mut rng);
    let sample = random_batch(1, 5, 3, &mut rng).remove(0);
    let mask = draw_negative_mask(sample.label, 5, 0.7, &mut rng);
    let analytic = grad_joint_wrt_feature(&sample, &clf, &mask, kind)?;
    let numeric = finite_diff(
        |x| {
            let s = LabeledFeature::new(x.to_vec(), sample.label);
            losses::joint(&s, &clf, &mask, kind.family()).expect("valid instance")
        },
        &sample.x,
        step,
    )?;
    Ok(GradReport::compare(
        format!("joint_wrt_feature/{}", kind.family()),
        Some(seed),
        analytic,
        numeric,
    ))
}

fn check_joint_classifier(seed: u64, kind: ActivationKind, balanced: bool, step: f64) -> Result<GradReport> {
    let mut rng = rng::stream(seed, &[tags::GRADCHECK, 2, kind as u64, balanced as u64]);
    let mode = MODES[(seed % 4) as usize];
    let (k, d, b) = (5, 4, 6);
    let clf = random_classifier(k, d, mode, &mut rng);
    let batch = random_batch(b, k, d, &mut rng);
    let masks: Vec<NegativeMask> = batch
        .iter()
        .map(|s| draw_negative_mask(s.label, k, 0.6, &mut rng))
        .collect();
    let weights: Option<Vec<f64>> = balanced.then(|| {
        let counts = [400, 120, 40, 9, 3];
        batch.iter().map(|s| losses::cb_weight(counts[s.label], 0.99)).collect()
    });
    let analytic = grad_joint_wrt_classifier_weighted(&batch, &clf, &masks, kind, weights.as_deref())?.flatten();
    let mut theta = clf.weights().as_slice().to_vec();
    theta.extend_from_slice(clf.biases());
    let numeric = finite_diff(
        |t| {
            let c = with_params(&clf, t);
            let total: f64 = batch
                .iter()
                .zip(&masks)
                .enumerate()
                .map(|(i, (s, m))| {
                    let wi = weights.as_ref().map_or(1.0, |w| w[i]);
                    wi * losses::joint(s, &c, m, kind.family()).expect("valid instance")
                })
                .sum();
            total / b as f64
        },
        &theta,
        step,
    )?;
    let name = if balanced { "joint_cb_wrt_classifier" } else { "joint_wrt_classifier" };
    Ok(GradReport::compare(
        format!("{name}/{}", kind.family()),
        Some(seed),
        analytic,
        numeric,
    ))
}

fn check_contrastive(seed: u64, kind: ActivationKind, step: f64) -> Result<GradReport> {
    let mut rng = rng::stream(seed, &[tags::GRADCHECK, 3, kind as u64]);
    let (k, d) = (6, 4);
    let label = rng.random_range(0..k);
    let empty = (label + 1 + rng.random_range(0..k - 1)) % k;
    let bank = random_bank(k, d, Some(empty), &mut rng);
    let z = gaussian_vec(d, 1.0, &mut rng);
    let tau = 0.3 + 0.7 * rng.random::<f64>();
    let analytic = grad_contrastive_wrt_projection(&z, label, &bank, tau, kind)?.expect("own slot filled");
    let numeric = finite_diff(
        |zz| {
            losses::contrastive(zz, label, &bank, tau, kind.family())
                .expect("valid instance")
                .expect("own slot filled")
        },
        &z,
        step,
    )?;
    Ok(GradReport::compare(
        format!("contrastive_wrt_projection/{}", kind.family()),
        Some(seed),
        analytic,
        numeric,
    ))
}

fn check_uniform(seed: u64, kind: ActivationKind, include_positive: bool, normalized: bool, step: f64) -> Result<GradReport> {
    let mut rng = rng::stream(seed, &[tags::GRADCHECK, 4, kind as u64, include_positive as u64, normalized as u64]);
    let (k, d) = (6, 5);
    let w = unit_rows(k, d, &mut rng);
    let (analytic, theta) = if normalized {
        // Stored rows off the sphere; the loss sees them through w / |w|.
        let mut raw = w.clone();
        for i in 0..k {
            let s = 0.5 + rng.random::<f64>();
            raw.row_mut(i).iter_mut().for_each(|v| *v *= s);
        }
        let clf = Classifier::new(raw.clone(), vec![0.0; k], Normalization::ClassifierOnly)?;
        (grad_uniform_wrt_classifier(&clf, kind, include_positive)?, raw)
    } else {
        (grad_uniform_rows(&w, kind, include_positive), w)
    };
    let numeric = finite_diff(
        |t| {
            let m = Matrix::from_vec(k, d, t.to_vec());
            let m = if normalized {
                Classifier::new(m, vec![0.0; k], Normalization::ClassifierOnly)
                    .expect("nonzero rows")
                    .effective_weights()
                    .into_owned()
            } else {
                m
            };
            losses::uniform_mean_rows(&m, kind.family(), include_positive)
        },
        theta.as_slice(),
        step,
    )?;
    let mut name = format!("uniform_wrt_classifier/{}", kind.family());
    if include_positive {
        name.push_str("+positive");
    }
    if normalized {
        name.push_str("/normalized");
    }
    Ok(GradReport::compare(name, Some(seed), analytic.as_slice().to_vec(), numeric))
}

/// Runs every analytic gradient against [`finite_diff`] on each seed.
/// Returns all reports; use [`suite_verdict`] to turn them into pass/fail.
pub fn gradcheck_suite(settings: &GradCheckSettings) -> Result<Vec<GradReport>> {
    if !(settings.tol > 0.0 && settings.tol.is_finite()) {
        return Err(Error::config("gradcheck tolerance must be positive"));
    }
    let kinds = [ActivationKind::SigmoidBce, ActivationKind::SoftmaxCe];
    let mut reports = Vec::new();
    for &seed in &settings.seeds {
        for kind in kinds {
            reports.push(check_joint_feature(seed, kind, settings.step)?);
            reports.push(check_joint_classifier(seed, kind, false, settings.step)?);
            reports.push(check_joint_classifier(seed, kind, true, settings.step)?);
            reports.push(check_contrastive(seed, kind, settings.step)?);
            reports.push(check_uniform(seed, kind, false, false, settings.step)?);
            reports.push(check_uniform(seed, kind, false, true, settings.step)?);
            if kind == ActivationKind::SigmoidBce {
                reports.push(check_uniform(seed, kind, true, false, settings.step)?);
            }
            reports.push(crate::train::gradcheck_model(seed, kind.family(), settings.step)?);
        }
    }
    Ok(reports)
}

/// Worst report per operation name, in first-seen order.
pub fn worst_per_op(reports: &[GradReport]) -> Vec<&GradReport> {
    let mut out: Vec<&GradReport> = Vec::new();
    for r in reports {
        match out.iter_mut().find(|w| w.op == r.op) {
            Some(w) if r.max_rel_err > w.max_rel_err => *w = r,
            Some(_) => {}
            None => out.push(r),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bce_single_positive_at_zero_logit() {
        // Two classes with the only negative masked behaves like K = 1.
        let clf = Classifier::unbiased(&[vec![0.6, 0.8], vec![1.0, 0.0]], Normalization::None).unwrap();
        let s = LabeledFeature::new(vec![0.8, -0.6], 0);
        let g = grad_joint_wrt_feature(&s, &clf, &NegativeMask::none(2, 0), ActivationKind::SigmoidBce).unwrap();
        assert!((g[0] + 0.3).abs() < 1e-15 && (g[1] + 0.4).abs() < 1e-15);
    }

    #[test]
    fn ce_uniform_logits_gradient() {
        let rows = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0], vec![1.0, 1.0, 0.0]];
        let clf = Classifier::unbiased(&rows, Normalization::None).unwrap();
        let s = LabeledFeature::new(vec![0.0, 0.0, 0.0], 1);
        let g = grad_joint_wrt_feature(&s, &clf, &NegativeMask::all(4), ActivationKind::SoftmaxCe).unwrap();
        // -(1 - 1/4) w_1 + (1/4) Σ_{j≠1} w_j
        let want = [0.25 * 2.0, -0.75 + 0.25, 0.25];
        for (a, b) in g.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn finite_diff_quadratic_and_constant() {
        let g = finite_diff(|t| t.iter().map(|x| x * x).sum(), &[1.0, 2.0], 1e-6).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-9 && (g[1] - 4.0).abs() < 1e-9);
        let z = finite_diff(|_| 3.5, &[1.0, -1.0, 0.0], 1e-6).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn finite_diff_rejects_nondeterminism() {
        let mut n = 0.0;
        let r = finite_diff(
            |_| {
                n += 1.0;
                n
            },
            &[0.0],
            1e-6,
        );
        assert!(matches!(r, Err(Error::GradCheck(_))));
    }

    #[test]
    fn uniform_antipodal_pair() {
        let w = Matrix::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        let g = grad_uniform_rows(&w, ActivationKind::SigmoidBce, false);
        // (2/K) σ(-1) w_2
        let s = sigmoid(-1.0);
        assert!((g.row(0)[0] + s).abs() < 1e-15);
        assert_eq!(g.row(0)[1], 0.0);
    }

    #[test]
    fn injected_fault_is_located() {
        let mut analytic = vec![0.5, -1.25, 2.0, 0.75];
        let numeric = analytic.clone();
        analytic[2] += 1e-2;
        let r = GradReport::compare("fault", Some(7), analytic, numeric);
        assert_eq!(r.worst_index, 2);
        assert!(!r.passed(1e-4));
        let err = suite_verdict(&[r], 1e-4).unwrap_err().to_string();
        assert!(err.contains("fault seed 7 coordinate 2"));
    }
}
