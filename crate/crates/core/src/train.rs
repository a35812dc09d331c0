//! Model, optimizer and the two-stage training pipeline.
//!
//! The model is `input → encoder → feature x → classifier logits`, with a
//! projector `x → z = P(x)/|P(x)|` feeding the contrastive branch. Stage 1
//! trains everything on the tripartite loss; stage 2 freezes encoder and
//! projector and fine-tunes the classifier on the class-balanced joint loss.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{batch_iter, Dataset, MemoryBank, Subset, SubsetSplit};
use crate::error::{check_dim, Error, Result};
use crate::geometry::{self, MetricReport};
use crate::grads::{
    self, classifier_rows_backward, grad_contrastive_wrt_projection, grad_uniform_rows, joint_logit_grads,
    ActivationKind, GradReport,
};
use crate::losses::{
    self, argmax, cb_weight, draw_negative_mask, Classifier, Family, LabeledFeature, LossBreakdown, LossConfig,
    NegativeMask, Normalization,
};
use crate::rng::{self, tags};
use crate::vecops::{axpy, dot, norm, normalize_backward, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Tanh => v.tanh(),
        }
    }

    /// Derivative given the pre-activation value.
    #[inline]
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = pre.tanh();
                1.0 - t * t
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Use the raw input as the feature (`feature_dim` must equal the input dimension).
    pub identity_encoder: bool,
    pub encoder_hidden: Vec<usize>,
    pub feature_dim: usize,
    pub projection_hidden: usize,
    pub projection_dim: usize,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            identity_encoder: false,
            encoder_hidden: vec![64],
            feature_dim: 16,
            projection_hidden: 16,
            projection_dim: 8,
            activation: Activation::Relu,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub lr0: f64,
    pub lr_stage2: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
    /// Compute the full metric report every this many stage-1 epochs (0 disables).
    pub metric_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs_stage1: 200,
            epochs_stage2: 20,
            lr0: 0.05,
            lr_stage2: 0.05,
            momentum: 0.9,
            batch_size: 64,
            weight_decay: 5e-4,
            seed: 42,
            metric_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::config("train.lr0 must be positive"));
        }
        if !(self.lr_stage2 > 0.0 && self.lr_stage2.is_finite()) {
            return Err(Error::config("train.lr_stage2 must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("train.momentum must lie in [0, 1)"));
        }
        if self.batch_size < 1 {
            return Err(Error::config("train.batch_size must be at least 1"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("train.weight_decay must be non-negative"));
        }
        Ok(())
    }
}

/// Checks that a loss configuration can be trained.
pub fn validate_loss_for_training(loss: &LossConfig) -> Result<()> {
    loss.validate()?;
    if loss.lambda_cc > 0.0 && !loss.normalization.normalizes_classifier() {
        return Err(Error::config(
            "uniform learning (lambda_cc > 0) needs a normalized classifier (classifier_only or both)",
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Linear {
    /// Fan-in scaled uniform weights `U(-1/√fan_in, 1/√fan_in)`, zero bias.
    fn init<R: rand::Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let data = (0..inputs * outputs).map(|_| rng.random_range(-bound..bound)).collect();
        Linear {
            weight: Matrix::from_vec(outputs, inputs, data),
            bias: vec![0.0; outputs],
        }
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.bias.clone();
        for (o, row) in out.iter_mut().zip(self.weight.iter_rows()) {
            *o += dot(row, x);
        }
        out
    }
}

/// Stack of linear layers with an activation between consecutive layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

#[derive(Debug, Clone, Default)]
struct MlpCache {
    /// Input to each layer.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation output of each layer.
    pre: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<(Matrix, Vec<f64>)>,
}

impl Mlp {
    fn init<R: rand::Rng + ?Sized>(sizes: &[usize], activation: Activation, rng: &mut R) -> Self {
        let layers = sizes.windows(2).map(|w| Linear::init(w[0], w[1], rng)).collect();
        Mlp { layers, activation }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").weight.rows()
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h);
            if l < last {
                h.iter_mut().for_each(|v| *v = self.activation.apply(*v));
            }
        }
        h
    }

    fn forward_cached(&self, x: &[f64]) -> (Vec<f64>, MlpCache) {
        let mut cache = MlpCache::default();
        let mut h = x.to_vec();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let pre = layer.forward(&h);
            cache.inputs.push(std::mem::take(&mut h));
            h = if l < last {
                pre.iter().map(|&v| self.activation.apply(v)).collect()
            } else {
                pre.clone()
            };
            cache.pre.push(pre);
        }
        (h, cache)
    }

    fn backward(&self, cache: &MlpCache, grad_out: &[f64], grads: &mut MlpGrads) -> Vec<f64> {
        let mut g = grad_out.to_vec();
        let last = self.layers.len() - 1;
        for l in (0..self.layers.len()).rev() {
            if l < last {
                for (gi, &p) in g.iter_mut().zip(&cache.pre[l]) {
                    *gi *= self.activation.derivative(p);
                }
            }
            let (gw, gb) = &mut grads.layers[l];
            gw.rank1_acc(1.0, &g, &cache.inputs[l]);
            axpy(1.0, &g, gb);
            let mut gin = vec![0.0; self.layers[l].weight.cols()];
            self.layers[l].weight.matvec_t_acc(&g, &mut gin);
            g = gin;
        }
        g
    }

    fn zero_grads(&self) -> MlpGrads {
        MlpGrads {
            layers: self
                .layers
                .iter()
                .map(|l| (Matrix::zeros(l.weight.rows(), l.weight.cols()), vec![0.0; l.bias.len()]))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Encoder {
    Identity,
    Mlp(Mlp),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub encoder: Encoder,
    pub classifier: Classifier,
    pub projector: Mlp,
}

/// Output of [`Model::forward`].
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub feature: Vec<f64>,
    pub logits: Vec<f64>,
    pub projection: Vec<f64>,
}

impl Model {
    /// Encoder/projector weights fan-in uniform, classifier rows random unit
    /// vectors, every bias zero.
    pub fn init(
        input_dim: usize,
        num_classes: usize,
        cfg: &ModelConfig,
        normalization: Normalization,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = rng::stream(seed, &[tags::INIT]);
        let encoder = if cfg.identity_encoder {
            if cfg.feature_dim != input_dim {
                return Err(Error::config(format!(
                    "identity encoder needs feature_dim == input_dim ({input_dim}), got {}",
                    cfg.feature_dim
                )));
            }
            Encoder::Identity
        } else {
            let mut sizes = vec![input_dim];
            sizes.extend(&cfg.encoder_hidden);
            sizes.push(cfg.feature_dim);
            Encoder::Mlp(Mlp::init(&sizes, cfg.activation, &mut rng))
        };
        if cfg.feature_dim < 1 || cfg.projection_dim < 1 || cfg.projection_hidden < 1 {
            return Err(Error::config("model dimensions must be positive"));
        }
        let mut w = Matrix::zeros(num_classes, cfg.feature_dim);
        for k in 0..num_classes {
            loop {
                let v: Vec<f64> = (0..cfg.feature_dim)
                    .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
                    .collect();
                let n = norm(&v);
                if n > 1e-12 {
                    w.row_mut(k).iter_mut().zip(&v).for_each(|(o, x)| *o = x / n);
                    break;
                }
            }
        }
        let classifier = Classifier::new(w, vec![0.0; num_classes], normalization)?;
        let projector = Mlp::init(
            &[cfg.feature_dim, cfg.projection_hidden, cfg.projection_dim],
            cfg.activation,
            &mut rng,
        );
        Ok(Model {
            encoder,
            classifier,
            projector,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.num_classes()
    }

    pub fn feature_dim(&self) -> usize {
        self.classifier.dim()
    }

    pub fn projection_dim(&self) -> usize {
        self.projector.output_dim()
    }

    pub fn encode(&self, input: &[f64]) -> Vec<f64> {
        match &self.encoder {
            Encoder::Identity => input.to_vec(),
            Encoder::Mlp(m) => m.forward(input),
        }
    }

    pub fn forward(&self, input: &[f64]) -> Result<ForwardOutput> {
        if let Encoder::Mlp(m) = &self.encoder {
            check_dim(m.input_dim(), input.len())?;
        }
        let feature = self.encode(input);
        let logits = self.classifier.logits(&feature)?;
        let p = self.projector.forward(&feature);
        let n = norm(&p);
        let projection = if n > 0.0 { p.iter().map(|v| v / n).collect() } else { p };
        Ok(ForwardOutput {
            feature,
            logits,
            projection,
        })
    }

    pub fn predict(&self, input: &[f64]) -> Result<usize> {
        Ok(argmax(&self.forward(input)?.logits))
    }

    /// Encoder outputs for a labelled set, as used by the geometry metrics.
    pub fn features(&self, samples: &[LabeledFeature]) -> Vec<LabeledFeature> {
        samples
            .iter()
            .map(|s| LabeledFeature::new(self.encode(&s.x), s.label))
            .collect()
    }

    /// Every parameter in a fixed order: encoder layers, classifier
    /// weights and biases, projector layers.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit_params(|s, _| out.extend_from_slice(s));
        out
    }

    pub fn set_flat_params(&mut self, theta: &[f64]) {
        let mut offset = 0;
        self.visit_params_mut(|s, _| {
            s.copy_from_slice(&theta[offset..offset + s.len()]);
            offset += s.len();
        });
        assert_eq!(offset, theta.len(), "parameter vector length");
    }

    fn visit_params(&self, mut f: impl FnMut(&[f64], ParamKind)) {
        if let Encoder::Mlp(m) = &self.encoder {
            for l in &m.layers {
                f(l.weight.as_slice(), ParamKind::Weight);
                f(&l.bias, ParamKind::Bias);
            }
        }
        f(self.classifier.weights().as_slice(), ParamKind::ClassifierRows);
        f(self.classifier.biases(), ParamKind::Bias);
        for l in &self.projector.layers {
            f(l.weight.as_slice(), ParamKind::Weight);
            f(&l.bias, ParamKind::Bias);
        }
    }

    fn visit_params_mut(&mut self, mut f: impl FnMut(&mut [f64], ParamKind)) {
        if let Encoder::Mlp(m) = &mut self.encoder {
            for l in &mut m.layers {
                f(l.weight.as_mut_slice(), ParamKind::Weight);
                f(&mut l.bias, ParamKind::Bias);
            }
        }
        f(self.classifier.weights_mut().as_mut_slice(), ParamKind::ClassifierRows);
        f(self.classifier.biases_mut(), ParamKind::Bias);
        for l in &mut self.projector.layers {
            f(l.weight.as_mut_slice(), ParamKind::Weight);
            f(&mut l.bias, ParamKind::Bias);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ParamKind {
    Weight,
    Bias,
    ClassifierRows,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub encoder: Option<MlpGrads>,
    pub classifier: grads::ClassifierGrads,
    pub projector: MlpGrads,
}

impl ModelGrads {
    fn zeros(model: &Model) -> Self {
        ModelGrads {
            encoder: match &model.encoder {
                Encoder::Identity => None,
                Encoder::Mlp(m) => Some(m.zero_grads()),
            },
            classifier: grads::ClassifierGrads::zeros(model.num_classes(), model.feature_dim()),
            projector: model.projector.zero_grads(),
        }
    }

    /// Same order as [`Model::flat_params`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit(|s| out.extend_from_slice(s));
        out
    }

    fn visit(&self, mut f: impl FnMut(&[f64])) {
        if let Some(e) = &self.encoder {
            for (w, b) in &e.layers {
                f(w.as_slice());
                f(b);
            }
        }
        f(self.classifier.weights.as_slice());
        f(&self.classifier.biases);
        for (w, b) in &self.projector.layers {
            f(w.as_slice());
            f(b);
        }
    }
}

/// Cosine learning rate `lr0 · (1 + cos(π t / T)) / 2`.
pub fn cosine_lr(t: usize, total: usize, lr0: f64) -> f64 {
    if total == 0 {
        return lr0;
    }
    let t = t.min(total) as f64;
    lr0 * (1.0 + (std::f64::consts::PI * t / total as f64).cos()) / 2.0
}

/// `v ← μ v + g + λ θ; θ ← θ - η v`.
pub fn sgd_momentum_step(
    params: &mut [f64],
    grads: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    debug_assert!(params.len() == grads.len() && grads.len() == velocity.len());
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + g + weight_decay * *p;
        *p -= lr * *v;
    }
}

/// Momentum step for unit-norm rows of width `cols`: the step direction of
/// each row is projected onto the tangent space of the sphere at the current
/// row, the row moves, and is then renormalized.
pub fn sgd_momentum_step_unit_rows(
    params: &mut [f64],
    grads: &[f64],
    velocity: &mut [f64],
    cols: usize,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    for ((p, g), v) in params
        .chunks_exact_mut(cols)
        .zip(grads.chunks_exact(cols))
        .zip(velocity.chunks_exact_mut(cols))
    {
        for ((vi, gi), pi) in v.iter_mut().zip(g).zip(p.iter()) {
            *vi = momentum * *vi + gi + weight_decay * pi;
        }
        let n = norm(p);
        let radial = dot(v, p) / (n * n);
        axpy(-radial, p, v);
        axpy(-lr, v, p);
        let n = norm(p);
        p.iter_mut().for_each(|x| *x /= n);
    }
}

/// Momentum SGD over a whole model. Biases get no weight decay; classifier
/// rows use the projected update when the classifier is normalized.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    /// Applies one step. With `classifier_only`, encoder and projector are left untouched.
    pub fn step(&mut self, model: &mut Model, grads: &ModelGrads, lr: f64, classifier_only: bool) {
        let g = grads.flatten();
        if self.velocity.len() != g.len() {
            self.velocity = vec![0.0; g.len()];
        }
        let unit_rows = model.classifier.normalization().normalizes_classifier();
        let cols = model.feature_dim();
        let (mu, wd) = (self.momentum, self.weight_decay);
        let velocity = &mut self.velocity;
        let mut offset = 0;
        let mut in_classifier = false;
        model.visit_params_mut(|p, kind| {
            let range = offset..offset + p.len();
            offset += p.len();
            if kind == ParamKind::ClassifierRows {
                in_classifier = true;
            } else if kind == ParamKind::Weight {
                in_classifier = false;
            }
            if classifier_only && !in_classifier {
                return;
            }
            let (gs, vs) = (&g[range.clone()], &mut velocity[range]);
            match kind {
                ParamKind::ClassifierRows if unit_rows => sgd_momentum_step_unit_rows(p, gs, vs, cols, lr, mu, wd),
                ParamKind::Bias => sgd_momentum_step(p, gs, vs, lr, mu, 0.0),
                _ => sgd_momentum_step(p, gs, vs, lr, mu, wd),
            }
        });
    }
}

/// Loss, gradients and side outputs of one batch.
#[derive(Debug, Clone)]
pub struct BatchOutput {
    pub loss: LossBreakdown,
    pub grads: ModelGrads,
    /// Unit projections in batch order (empty when the contrastive term is off).
    pub projections: Vec<Vec<f64>>,
    pub predictions: Vec<usize>,
}

/// Tripartite loss of a batch of raw inputs and its gradient with respect
/// to every model parameter. `masks` are the frozen negative masks; the
/// optional `sample_weights` scale each sample's joint loss. A non-finite
/// projection is reported as [`Error::Divergence`] with a zero epoch.
pub fn batch_loss_and_grads(
    model: &Model,
    batch: &[&LabeledFeature],
    bank: &MemoryBank,
    cfg: &LossConfig,
    masks: &[NegativeMask],
    sample_weights: Option<&[f64]>,
) -> Result<BatchOutput> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    check_dim(batch.len(), masks.len())?;
    let clf = &model.classifier;
    let norm_mode = clf.normalization();
    let w = clf.effective_weights();
    let inv_b = 1.0 / batch.len() as f64;
    let joint_kind = ActivationKind::from(cfg.joint_family());
    let contrastive_on = cfg.lambda_ss > 0.0;

    let mut grads = ModelGrads::zeros(model);
    let mut g_weff = Matrix::zeros(clf.num_classes(), clf.dim());
    let mut loss = LossBreakdown::default();
    let mut projections = Vec::with_capacity(if contrastive_on { batch.len() } else { 0 });
    let mut predictions = Vec::with_capacity(batch.len());

    for (i, sample) in batch.iter().enumerate() {
        let (x, enc_cache) = match &model.encoder {
            Encoder::Identity => (sample.x.clone(), None),
            Encoder::Mlp(m) => {
                check_dim(m.input_dim(), sample.x.len())?;
                let (x, c) = m.forward_cached(&sample.x);
                (x, Some(c))
            }
        };
        let xe = clf.effective_feature(&x)?;
        let logits = losses::logits_with(&w, clf.biases(), &xe);
        predictions.push(argmax(&logits));
        let c_i = sample_weights.map_or(1.0, |c| c[i]);
        let sc = match cfg.joint_family() {
            Family::Bce => losses::bce_joint_from_logits(&logits, sample.label, &masks[i]),
            Family::Ce => losses::ce_joint_from_logits(&logits, sample.label),
        };
        loss.sc += c_i * sc * inv_b;

        let mut dl = joint_logit_grads(&logits, sample.label, &masks[i], joint_kind);
        dl.iter_mut().for_each(|v| *v *= c_i * inv_b);
        g_weff.rank1_acc(1.0, &dl, &xe);
        axpy(1.0, &dl, &mut grads.classifier.biases);
        let mut g_x = vec![0.0; clf.dim()];
        w.matvec_t_acc(&dl, &mut g_x);
        if norm_mode.normalizes_features() {
            g_x = normalize_backward(&g_x, &xe, norm(&x));
        }

        if contrastive_on {
            let (p, proj_cache) = model.projector.forward_cached(&x);
            let np = norm(&p);
            if !np.is_finite() {
                // The caller fills in the epoch.
                return Err(Error::Divergence {
                    epoch: 0,
                    last_finite_epoch: None,
                });
            }
            if np == 0.0 {
                return Err(Error::Domain("projector produced a zero output".into()));
            }
            let kind = ActivationKind::from(cfg.contrastive_family());
            if let Some(l) = losses::contrastive(&p, sample.label, bank, cfg.tau, cfg.contrastive_family())? {
                loss.ss += l * inv_b;
                let mut g_p = grad_contrastive_wrt_projection(&p, sample.label, bank, cfg.tau, kind)?
                    .expect("own slot is initialized");
                g_p.iter_mut().for_each(|v| *v *= cfg.lambda_ss * inv_b);
                let g_from_proj = model.projector.backward(&proj_cache, &g_p, &mut grads.projector);
                axpy(1.0, &g_from_proj, &mut g_x);
            }
            projections.push(p.iter().map(|v| v / np).collect());
        }

        if let (Encoder::Mlp(m), Some(cache), Some(eg)) = (&model.encoder, &enc_cache, grads.encoder.as_mut()) {
            m.backward(cache, &g_x, eg);
        }
    }

    if cfg.lambda_cc > 0.0 {
        clf.check_unit_rows()?;
        let kind = ActivationKind::from(cfg.uniform_family());
        loss.cc = losses::uniform_mean_rows(&w, cfg.uniform_family(), cfg.include_cc_positive);
        let gu = grad_uniform_rows(&w, kind, cfg.include_cc_positive);
        axpy(cfg.lambda_cc, gu.as_slice(), g_weff.as_mut_slice());
    }
    classifier_rows_backward(clf, &mut g_weff);
    grads.classifier.weights = g_weff;
    loss.total = loss.sc + cfg.lambda_ss * loss.ss + cfg.lambda_cc * loss.cc;
    Ok(BatchOutput {
        loss,
        grads,
        projections,
        predictions,
    })
}

/// Per-epoch training record; accuracies are percentages on the training
/// samples seen during the epoch, `None` for an empty subset.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_sc: f64,
    pub loss_ss: f64,
    pub loss_cc: f64,
    pub lr: f64,
    pub acc_all: f64,
    pub acc_many: Option<f64>,
    pub acc_medium: Option<f64>,
    pub acc_few: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    /// `(epoch, report)` at the metric cadence, on training features.
    pub metrics: Vec<(usize, MetricReport)>,
}

/// Class-wise correct/total counters.
#[derive(Debug, Clone)]
struct Tally {
    correct: Vec<usize>,
    total: Vec<usize>,
}

impl Tally {
    fn new(k: usize) -> Self {
        Tally {
            correct: vec![0; k],
            total: vec![0; k],
        }
    }

    fn add(&mut self, label: usize, predicted: usize) {
        self.total[label] += 1;
        if label == predicted {
            self.correct[label] += 1;
        }
    }

    fn subset_acc(&self, classes: &[usize]) -> Option<f64> {
        let total: usize = classes.iter().map(|&k| self.total[k]).sum();
        if total == 0 {
            return None;
        }
        let correct: usize = classes.iter().map(|&k| self.correct[k]).sum();
        Some(100.0 * correct as f64 / total as f64)
    }
}

/// Stage 1: batch SGD on the tripartite loss.
pub fn train_stage1(
    model: &mut Model,
    dataset: &Dataset,
    split: &SubsetSplit,
    train_cfg: &TrainConfig,
    loss_cfg: &LossConfig,
) -> Result<History> {
    run_training(model, dataset, split, train_cfg, loss_cfg, Stage::One)
}

/// Stage 2: freeze encoder and projector and fine-tune the classifier on
/// the class-balanced joint loss with every negative kept.
pub fn finetune_stage2(
    model: &mut Model,
    dataset: &Dataset,
    split: &SubsetSplit,
    train_cfg: &TrainConfig,
    loss_cfg: &LossConfig,
) -> Result<History> {
    let cfg = LossConfig {
        lambda_ss: 0.0,
        lambda_cc: 0.0,
        r: 1.0,
        ..loss_cfg.clone()
    };
    run_training(model, dataset, split, train_cfg, &cfg, Stage::Two)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stage {
    One,
    Two,
}

fn run_training(
    model: &mut Model,
    dataset: &Dataset,
    split: &SubsetSplit,
    train_cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    stage: Stage,
) -> Result<History> {
    train_cfg.validate()?;
    validate_loss_for_training(loss_cfg)?;
    if dataset.train.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    check_dim(dataset.num_classes(), model.num_classes())?;
    let k = model.num_classes();
    let (epochs, lr0, stage_tag) = match stage {
        Stage::One => (train_cfg.epochs_stage1, train_cfg.lr0, 1u64),
        Stage::Two => (train_cfg.epochs_stage2, train_cfg.lr_stage2, 2u64),
    };
    let n = dataset.train.len();
    let batches_per_epoch = n.div_ceil(train_cfg.batch_size);
    let total_steps = epochs * batches_per_epoch;

    // Stage 2 never touches the encoder, so its inputs can be encoded once.
    let encoded: Option<Vec<LabeledFeature>> = (stage == Stage::Two).then(|| model.features(&dataset.train));
    let stage2_model_view = |m: &Model| Model {
        encoder: Encoder::Identity,
        classifier: m.classifier.clone(),
        projector: m.projector.clone(),
    };
    let cb: Option<Vec<f64>> =
        (stage == Stage::Two).then(|| dataset.train_counts.iter().map(|&c| cb_weight(c, loss_cfg.beta)).collect());

    let mut bank = MemoryBank::new(k, model.projection_dim());
    let mut opt = Sgd::new(train_cfg.momentum, train_cfg.weight_decay);
    let mut history = History::default();
    let mut last_finite: Option<usize> = None;
    let mut step = 0;

    for epoch in 0..epochs {
        let lr_epoch = cosine_lr(step, total_steps, lr0);
        let mut sums = LossBreakdown::default();
        let mut tally = Tally::new(k);
        let batches = batch_iter(n, train_cfg.batch_size, train_cfg.seed, epoch + (stage_tag as usize) * 1_000_000);
        for (bi, idx) in batches.iter().enumerate() {
            let source = encoded.as_deref().unwrap_or(&dataset.train);
            let batch: Vec<&LabeledFeature> = idx.iter().map(|&i| &source[i]).collect();
            let mut mask_rng = rng::stream(train_cfg.seed, &[tags::MASKS, stage_tag, epoch as u64, bi as u64]);
            let masks: Vec<NegativeMask> = batch
                .iter()
                .map(|s| {
                    if loss_cfg.joint_family() == Family::Bce && loss_cfg.r < 1.0 {
                        draw_negative_mask(s.label, k, loss_cfg.r, &mut mask_rng)
                    } else {
                        NegativeMask::all(k)
                    }
                })
                .collect();
            let weights: Option<Vec<f64>> = cb.as_ref().map(|cb| batch.iter().map(|s| cb[s.label]).collect());
            let lr = cosine_lr(step, total_steps, lr0);
            let out = match stage {
                Stage::One => batch_loss_and_grads(model, &batch, &bank, loss_cfg, &masks, None),
                Stage::Two => {
                    batch_loss_and_grads(&stage2_model_view(model), &batch, &bank, loss_cfg, &masks, weights.as_deref())
                }
            };
            // Overflowed parameters can also surface as domain errors.
            let out = match out {
                Err(e) if matches!(e, Error::Divergence { .. }) || !model.flat_params().iter().all(|v| v.is_finite()) => {
                    return Err(Error::Divergence {
                        epoch,
                        last_finite_epoch: last_finite,
                    })
                }
                r => r?,
            };
            if !out.loss.total.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    last_finite_epoch: last_finite,
                });
            }
            match stage {
                Stage::One => opt.step(model, &out.grads, lr, false),
                Stage::Two => {
                    let mut g = out.grads;
                    g.encoder = match &model.encoder {
                        Encoder::Identity => None,
                        Encoder::Mlp(m) => Some(m.zero_grads()),
                    };
                    opt.step(model, &g, lr, true);
                }
            }
            if !out.projections.is_empty() {
                bank.update(batch.iter().zip(&out.projections).map(|(s, z)| (s.label, z.as_slice())))?;
            }
            let bw = batch.len() as f64;
            sums.sc += out.loss.sc * bw;
            sums.ss += out.loss.ss * bw;
            sums.cc += out.loss.cc * bw;
            sums.total += out.loss.total * bw;
            for (s, &p) in batch.iter().zip(&out.predictions) {
                tally.add(s.label, p);
            }
            step += 1;
        }
        let nf = n as f64;
        let all: Vec<usize> = (0..k).collect();
        let record = EpochRecord {
            epoch,
            loss_total: sums.total / nf,
            loss_sc: sums.sc / nf,
            loss_ss: sums.ss / nf,
            loss_cc: sums.cc / nf,
            lr: lr_epoch,
            acc_all: tally.subset_acc(&all).unwrap_or(0.0),
            acc_many: tally.subset_acc(&split.many),
            acc_medium: tally.subset_acc(&split.medium),
            acc_few: tally.subset_acc(&split.few),
        };
        if !model.flat_params().iter().all(|v| v.is_finite()) {
            return Err(Error::Divergence {
                epoch,
                last_finite_epoch: last_finite,
            });
        }
        last_finite = Some(epoch);
        history.epochs.push(record);
        if stage == Stage::One && train_cfg.metric_every > 0 && ((epoch + 1) % train_cfg.metric_every == 0 || epoch + 1 == epochs) {
            // Degenerate geometry (e.g. identical centered rows) just skips the report.
            if let Ok(report) = geometry::metric_report(&model.features(&dataset.train), &model.classifier) {
                history.metrics.push((epoch, report));
            }
        }
    }
    Ok(history)
}

/// Accuracies (percent) on a test set, overall, per class and per subset.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub acc_all: f64,
    pub acc_many: Option<f64>,
    pub acc_medium: Option<f64>,
    pub acc_few: Option<f64>,
    /// `None` for classes absent from the test set.
    pub per_class_accuracy: Vec<Option<f64>>,
}

pub fn evaluate(model: &Model, test: &[LabeledFeature], split: &SubsetSplit) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::config("test set is empty"));
    }
    let k = model.num_classes();
    check_dim(k, split.num_classes())?;
    let mut tally = Tally::new(k);
    for s in test {
        if s.label >= k {
            return Err(Error::config(format!("test label {} out of range", s.label)));
        }
        tally.add(s.label, model.predict(&s.x)?);
    }
    let all: Vec<usize> = (0..k).collect();
    Ok(EvalReport {
        acc_all: tally.subset_acc(&all).expect("test set is non-empty"),
        acc_many: tally.subset_acc(&split.many),
        acc_medium: tally.subset_acc(&split.medium),
        acc_few: tally.subset_acc(&split.few),
        per_class_accuracy: (0..k).map(|c| tally.subset_acc(&[c])).collect(),
    })
}

impl EvalReport {
    pub fn subset(&self, s: Subset) -> Option<f64> {
        match s {
            Subset::Many => self.acc_many,
            Subset::Medium => self.acc_medium,
            Subset::Few => self.acc_few,
        }
    }
}

/// Outcome of one full run.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub model_stage1: Model,
    pub history_stage1: History,
    pub model_stage2: Option<Model>,
    pub history_stage2: Option<History>,
    pub eval: EvalReport,
}

/// Builds a model, trains stage 1 and, when `epochs_stage2 > 0`, stage 2,
/// then evaluates the final model on the test set.
pub fn run(
    dataset: &Dataset,
    split: &SubsetSplit,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    loss_cfg: &LossConfig,
) -> Result<RunResult> {
    let mut model = Model::init(
        dataset.input_dim(),
        dataset.num_classes(),
        model_cfg,
        loss_cfg.normalization,
        train_cfg.seed,
    )?;
    let history_stage1 = train_stage1(&mut model, dataset, split, train_cfg, loss_cfg)?;
    let model_stage1 = model.clone();
    let (model_stage2, history_stage2) = if train_cfg.epochs_stage2 > 0 {
        let h = finetune_stage2(&mut model, dataset, split, train_cfg, loss_cfg)?;
        (Some(model.clone()), Some(h))
    } else {
        (None, None)
    };
    let eval = evaluate(&model, &dataset.test, split)?;
    Ok(RunResult {
        model_stage1,
        history_stage1,
        model_stage2,
        history_stage2,
        eval,
    })
}

/// Finite-difference check of [`batch_loss_and_grads`] against every model
/// parameter, on a small tanh model with all three loss terms active.
pub fn gradcheck_model(seed: u64, family: Family, step: f64) -> Result<GradReport> {
    let mut rng = rng::stream(seed, &[tags::GRADCHECK, 5, family as u64]);
    let (k, input_dim, b) = (4, 4, 5);
    let model_cfg = ModelConfig {
        identity_encoder: false,
        encoder_hidden: vec![5],
        feature_dim: 3,
        projection_hidden: 4,
        projection_dim: 3,
        activation: Activation::Tanh,
    };
    let normalization = if seed.is_multiple_of(2) {
        Normalization::ClassifierOnly
    } else {
        Normalization::Both
    };
    let mut model = Model::init(input_dim, k, &model_cfg, normalization, rng.random())?;
    // Non-zero biases and off-sphere rows exercise the full chain rule.
    for bias in model.classifier.biases_mut() {
        *bias = rng.random_range(-0.5..0.5);
    }
    for v in model.classifier.weights_mut().as_mut_slice() {
        *v *= rng.random_range(0.7..1.3);
    }
    let batch = grads::random_batch(b, k, input_dim, &mut rng);
    let label = batch[0].label;
    let empty = (label + 1) % k;
    let bank = grads::random_bank(k, model_cfg.projection_dim, Some(empty), &mut rng);
    let cfg = LossConfig {
        family,
        lambda_ss: 0.7,
        lambda_cc: 0.9,
        tau: 0.5,
        r: 0.6,
        normalization,
        ..LossConfig::default()
    };
    let masks: Vec<NegativeMask> = batch
        .iter()
        .map(|s| draw_negative_mask(s.label, k, cfg.r, &mut rng))
        .collect();
    let refs: Vec<&LabeledFeature> = batch.iter().collect();
    let analytic = batch_loss_and_grads(&model, &refs, &bank, &cfg, &masks, None)?.grads.flatten();
    let theta = model.flat_params();
    let mut probe = model.clone();
    let numeric = grads::finite_diff(
        |t| {
            probe.set_flat_params(t);
            batch_loss_and_grads(&probe, &refs, &bank, &cfg, &masks, None)
                .expect("valid instance")
                .loss
                .total
        },
        &theta,
        step,
    )?;
    Ok(GradReport::compare(
        format!("tripartite_wrt_model/{family}"),
        Some(seed),
        analytic,
        numeric,
    ))
}
