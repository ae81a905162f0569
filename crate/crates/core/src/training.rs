//! Training procedures: SimSiam and multi-task pre-training, classifier
//! training (frozen or fine-tuned), the supervised, augmented and transfer
//! baselines, and early stopping.

use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{mtssl_example, sample_positive_pair, Augmentation, Composition, Window};
use crate::data::class_labels;
use crate::error::{Error, Result};
use crate::metrics::{accuracy, collapse_stat, kappa, PredictionSet};
use crate::models::{
    argmax_rows, batch_tensor, build_classifier, build_feature_extractor, build_mtssl, build_simsiam,
    encode_batch, extract_features, mlp_outputs, Classifier, FeatureExtractor, FeatureExtractorSpec, Mlp,
    MlpSpec, Mtssl, NetworkState, SimSiam,
};
use crate::numerics::{cosine_similarity, decayed_lr, AdamConfig, AdamState, Gradients, Graph, NodeId, Tensor};
use crate::rng::{mix, stream, SeededRng};
use crate::scalar::Scalar;

/// Learning procedure a run uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Simsiam,
    Mtssl,
    Supervised,
    Augmented,
    Transfer,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Simsiam => "simsiam",
            Method::Mtssl => "mtssl",
            Method::Supervised => "supervised",
            Method::Augmented => "augmented",
            Method::Transfer => "transfer",
        }
    }

    pub fn is_self_supervised(self) -> bool {
        matches!(self, Method::Simsiam | Method::Mtssl)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub decay_rate: f64,
    /// Steps per decay period; one epoch when absent.
    pub decay_steps: Option<u64>,
    /// L2 factor on the feature-extractor parameters.
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub seed: u64,
    pub finetune_extractor: bool,
    /// SimSiam only: detach the target branch. Off reproduces collapse.
    pub stop_gradient: bool,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            initial_lr: 0.01,
            decay_rate: 0.96,
            decay_steps: None,
            weight_decay: 0.0,
            max_epochs: 30,
            batch_size: 32,
            patience: 5,
            seed: 0,
            finetune_extractor: true,
            stop_gradient: true,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Pre-text defaults: lr 3e-5, lambda 0.01.
    pub fn pretrain(max_epochs: usize) -> Self {
        TrainConfig {
            initial_lr: 3e-5,
            weight_decay: 0.01,
            max_epochs,
            ..Default::default()
        }
    }

    /// Classifier defaults: lr 0.01, up to 30 epochs.
    pub fn classifier() -> Self {
        TrainConfig::default()
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return bad(format!("initial_lr must be positive, got {}", self.initial_lr));
        }
        if !(self.decay_rate > 0.0 && self.decay_rate <= 1.0) {
            return bad(format!("decay_rate must lie in (0, 1], got {}", self.decay_rate));
        }
        if self.decay_steps == Some(0) {
            return bad("decay_steps must be positive".into());
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.max_epochs == 0 || self.batch_size == 0 || self.patience == 0 {
            return bad("max_epochs, batch_size and patience must all be at least 1".into());
        }
        Ok(())
    }
}

/// Per-epoch record of one training run. Epochs are counted from 1.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub loss: Vec<f64>,
    pub val_metric: Vec<Option<f64>>,
    pub collapse: Vec<Option<f64>>,
    pub stopped_epoch: usize,
    pub best_epoch: usize,
}

impl TrainTrace {
    fn push(&mut self, loss: f64, val: Option<f64>, collapse: Option<f64>) {
        self.loss.push(loss);
        self.val_metric.push(val);
        self.collapse.push(collapse);
        self.stopped_epoch = self.loss.len();
    }

    pub fn final_collapse(&self) -> Option<f64> {
        self.collapse.last().copied().flatten()
    }

    /// `epoch,loss,val_metric,collapse_stat`, blanks for missing values.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "epoch,loss,val_metric,collapse_stat")?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for i in 0..self.loss.len() {
            writeln!(
                w,
                "{},{},{},{}",
                i + 1,
                self.loss[i],
                opt(self.val_metric[i]),
                opt(self.collapse[i])
            )?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Patience-based stopping on a higher-is-better metric.
#[derive(Clone, Debug)]
pub struct EarlyStopper {
    patience: usize,
    best: f64,
    best_epoch: usize,
    epoch: usize,
    since_best: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper {
            patience: patience.max(1),
            best: f64::NEG_INFINITY,
            best_epoch: 0,
            epoch: 0,
            since_best: 0,
        }
    }

    pub fn observe(&mut self, metric: f64) -> StopDecision {
        self.epoch += 1;
        if metric > self.best {
            self.best = metric;
            self.best_epoch = self.epoch;
            self.since_best = 0;
            return StopDecision::Improved;
        }
        self.since_best += 1;
        if self.since_best >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

/// Replays `metrics` through the stopping rule: `(stop_epoch, best_epoch)`,
/// where `stop_epoch` is `None` if the run would use every epoch.
pub fn early_stop(metrics: &[f64], patience: usize) -> (Option<usize>, usize) {
    let mut es = EarlyStopper::new(patience);
    for (i, &m) in metrics.iter().enumerate() {
        if es.observe(m) == StopDecision::Stop {
            return (Some(i + 1), es.best_epoch());
        }
    }
    (None, es.best_epoch())
}

// Salts for the independent random streams of a run.
const INIT: u64 = 1;
const SHUFFLE: u64 = 2;
const AUGMENT: u64 = 3;
const HEAD_INIT: u64 = 4;
const DATA_AUGMENT: u64 = 5;

fn rng_for(seed: u64, salt: u64, epoch: usize) -> SeededRng {
    stream(mix(seed, salt), epoch as u64)
}

fn batches(n: usize, batch_size: usize, rng: &mut SeededRng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

struct Optimizer<S> {
    adam: AdamState<S>,
    initial_lr: f64,
    decay_rate: f64,
    decay_steps: u64,
}

impl<S: Scalar> Optimizer<S> {
    fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<S>>, cfg: &TrainConfig, steps_per_epoch: usize) -> Self {
        Optimizer {
            adam: AdamState::new(params, cfg.adam),
            initial_lr: cfg.initial_lr,
            decay_rate: cfg.decay_rate,
            decay_steps: cfg.decay_steps.unwrap_or(steps_per_epoch.max(1) as u64),
        }
    }

    fn step(&mut self, params: &mut [&mut Tensor<S>], grads: &[Tensor<S>]) -> Result<()> {
        let lr = decayed_lr(self.initial_lr, self.adam.step_count(), self.decay_rate, self.decay_steps);
        self.adam.step(params, grads, lr)
    }
}

fn grads_of<S: Scalar>(grads: &Gradients<S>, ids: &[NodeId]) -> Vec<Tensor<S>> {
    ids.iter().map(|&i| grads.get(i)).collect()
}

fn check_loss(op: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            op: format!("{op} loss"),
        })
    }
}

/// `lambda * sum ||theta||^2` over the given parameter nodes.
fn l2_penalty<S: Scalar>(g: &mut Graph<S>, params: &[NodeId], lambda: f64) -> Result<Option<NodeId>> {
    if lambda == 0.0 || params.is_empty() {
        return Ok(None);
    }
    let mut acc = g.sum_squares(params[0])?;
    for &p in &params[1..] {
        let s = g.sum_squares(p)?;
        acc = g.add(acc, s)?;
    }
    Ok(Some(g.scale(acc, S::of(lambda))?))
}

/// Symmetric negative cosine loss for `[B, D]` nodes, averaged over the
/// batch: `-0.5 cos(p_i, sg(z_j)) - 0.5 cos(p_j, sg(z_i))`.
pub fn simsiam_loss_node<S: Scalar>(
    g: &mut Graph<S>,
    p_i: NodeId,
    z_j: NodeId,
    p_j: NodeId,
    z_i: NodeId,
    stop_gradient: bool,
) -> Result<NodeId> {
    let (z_j, z_i) = if stop_gradient {
        (g.stop_gradient(z_j)?, g.stop_gradient(z_i)?)
    } else {
        (z_j, z_i)
    };
    let a = g.cosine_similarity(p_i, z_j)?;
    let b = g.cosine_similarity(p_j, z_i)?;
    let s = g.add(a, b)?;
    let m = g.mean(s)?;
    g.scale(m, S::of(-0.5))
}

/// The loss for single vectors.
pub fn simsiam_loss<S: Scalar>(p_i: &[S], z_j: &[S], p_j: &[S], z_i: &[S]) -> Result<S> {
    let half = S::of(0.5);
    Ok(-half * cosine_similarity(p_i, z_j)? - half * cosine_similarity(p_j, z_i)?)
}

/// Network shapes of the Siamese model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimSiamArch {
    pub fe: FeatureExtractorSpec,
    pub projector: MlpSpec,
    pub predictor: MlpSpec,
}

/// Windows used for the per-epoch collapse statistic.
const COLLAPSE_PROBE: usize = 256;

fn probe_set<S: Scalar>(windows: &[Window<S>]) -> Vec<Window<S>> {
    let step = (windows.len() / COLLAPSE_PROBE).max(1);
    windows.iter().step_by(step).take(COLLAPSE_PROBE).cloned().collect()
}

fn input_shape<S: Scalar>(windows: &[Window<S>], what: &str) -> Result<(usize, usize)> {
    let first = windows
        .first()
        .ok_or_else(|| Error::Data(format!("{what} set is empty")))?;
    let (t, c) = (first.len(), first.channels());
    if let Some(w) = windows.iter().find(|w| w.len() != t || w.channels() != c) {
        return Err(Error::Data(format!(
            "{what} windows differ in shape: {t} x {c} vs {} x {}",
            w.len(),
            w.channels()
        )));
    }
    Ok((t, c))
}

/// Builds a Siamese model from `cfg.seed` and pre-trains it.
pub fn pretrain_simsiam<S: Scalar>(
    unlabelled: &[Window<S>],
    arch: &SimSiamArch,
    augs: &[Augmentation],
    composition: Composition,
    cfg: &TrainConfig,
) -> Result<(SimSiam<S>, TrainTrace)> {
    let (t, c) = input_shape(unlabelled, "unlabelled")?;
    let model = build_simsiam(
        &arch.fe,
        &arch.projector,
        &arch.predictor,
        t,
        c,
        &mut rng_for(cfg.seed, INIT, 0),
    )?;
    fit_simsiam(model, unlabelled, augs, composition, cfg)
}

/// SimSiam pre-training of an existing model. Every step draws two views
/// per window, minimizes the symmetric loss plus the extractor L2 term and
/// updates extractor, projector and predictor together. The lowest-loss
/// epoch's state is returned.
pub fn fit_simsiam<S: Scalar>(
    mut model: SimSiam<S>,
    unlabelled: &[Window<S>],
    augs: &[Augmentation],
    composition: Composition,
    cfg: &TrainConfig,
) -> Result<(SimSiam<S>, TrainTrace)> {
    cfg.validate()?;
    input_shape(unlabelled, "unlabelled")?;
    if augs.is_empty() {
        return Err(Error::Config("SimSiam needs at least one augmentation".into()));
    }
    let probe = probe_set(unlabelled);
    let steps = unlabelled.len().div_ceil(cfg.batch_size);
    let mut opt = {
        let all = model
            .extractor
            .state
            .tensors
            .iter()
            .chain(&model.projector.state.tensors)
            .chain(&model.predictor.state.tensors);
        Optimizer::new(all, cfg, steps)
    };
    let mut trace = TrainTrace::default();
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut best = model.clone();
    for epoch in 0..cfg.max_epochs {
        let mut shuffle = rng_for(cfg.seed, SHUFFLE, epoch);
        let mut aug_rng = rng_for(cfg.seed, AUGMENT, epoch);
        let mut total = 0.0;
        let mut count = 0usize;
        for batch in batches(unlabelled.len(), cfg.batch_size, &mut shuffle) {
            if batch.len() < 2 && model.projector.spec.standardize_hidden {
                continue;
            }
            let mut vi = Vec::with_capacity(batch.len());
            let mut vj = Vec::with_capacity(batch.len());
            for &k in &batch {
                let (a, b) = sample_positive_pair(&unlabelled[k], augs, composition, &mut aug_rng)?;
                vi.push(a);
                vj.push(b);
            }
            let mut g = Graph::new();
            let fe_ids = model.extractor.state.bind(&mut g, true);
            let pj_ids = model.projector.state.bind(&mut g, true);
            let pr_ids = model.predictor.state.bind(&mut g, true);
            let xi = g.constant(batch_tensor(&vi.iter().collect::<Vec<_>>())?);
            let xj = g.constant(batch_tensor(&vj.iter().collect::<Vec<_>>())?);
            let fi = model.extractor.forward(&mut g, &fe_ids, xi)?;
            let fj = model.extractor.forward(&mut g, &fe_ids, xj)?;
            let zi = model.projector.forward(&mut g, &pj_ids, fi)?;
            let zj = model.projector.forward(&mut g, &pj_ids, fj)?;
            let pi = model.predictor.forward(&mut g, &pr_ids, zi)?;
            let pj = model.predictor.forward(&mut g, &pr_ids, zj)?;
            let loss = simsiam_loss_node(&mut g, pi, zj, pj, zi, cfg.stop_gradient)?;
            let lv = g.value(loss).item().as_f64();
            check_loss("simsiam", lv)?;
            let root = match l2_penalty(&mut g, &fe_ids, cfg.weight_decay)? {
                Some(r) => g.add(loss, r)?,
                None => loss,
            };
            let grads = g.backward(root)?;
            let all_ids: Vec<NodeId> = fe_ids.iter().chain(&pj_ids).chain(&pr_ids).copied().collect();
            let gs = grads_of(&grads, &all_ids);
            let mut params: Vec<&mut Tensor<S>> = model
                .extractor
                .state
                .tensors
                .iter_mut()
                .chain(model.projector.state.tensors.iter_mut())
                .chain(model.predictor.state.tensors.iter_mut())
                .collect();
            opt.step(&mut params, &gs)?;
            total += lv * batch.len() as f64;
            count += batch.len();
        }
        let mean_loss = total / count.max(1) as f64;
        let z = encode_batch(&model.extractor, &model.projector, &probe)?;
        let collapse = collapse_stat(&z).ok();
        trace.push(mean_loss, None, collapse);
        match stopper.observe(-mean_loss) {
            StopDecision::Improved => best = model.clone(),
            StopDecision::Continue => {}
            StopDecision::Stop => break,
        }
    }
    trace.best_epoch = stopper.best_epoch();
    Ok((best, trace))
}

/// Builds a multi-task model with one head per augmentation and pre-trains it.
pub fn pretrain_mtssl<S: Scalar>(
    unlabelled: &[Window<S>],
    fe_spec: &FeatureExtractorSpec,
    augs: &[Augmentation],
    cfg: &TrainConfig,
) -> Result<(Mtssl<S>, TrainTrace)> {
    let (t, c) = input_shape(unlabelled, "unlabelled")?;
    if augs.is_empty() {
        return Err(Error::Config("multi-task pre-training needs at least one augmentation".into()));
    }
    let model = build_mtssl(fe_spec, augs.len(), t, c, &mut rng_for(cfg.seed, INIT, 0))?;
    fit_mtssl(model, unlabelled, augs, cfg)
}

/// Each step builds, per head, a batch of windows with its transform
/// applied to a random half; loss is the mean binary cross-entropy over
/// heads plus the extractor L2 term.
pub fn fit_mtssl<S: Scalar>(
    mut model: Mtssl<S>,
    unlabelled: &[Window<S>],
    augs: &[Augmentation],
    cfg: &TrainConfig,
) -> Result<(Mtssl<S>, TrainTrace)> {
    cfg.validate()?;
    input_shape(unlabelled, "unlabelled")?;
    if augs.len() != model.heads.len() {
        return Err(Error::Config(format!(
            "{} augmentations for {} heads",
            augs.len(),
            model.heads.len()
        )));
    }
    let steps = unlabelled.len().div_ceil(cfg.batch_size);
    let mut opt = {
        let mut all: Vec<&Tensor<S>> = model.extractor.state.tensors.iter().collect();
        for h in &model.heads {
            all.extend(&h.state.tensors);
        }
        Optimizer::new(all, cfg, steps)
    };
    let n_heads = model.heads.len();
    let mut trace = TrainTrace::default();
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut best = model.clone();
    for epoch in 0..cfg.max_epochs {
        let mut shuffle = rng_for(cfg.seed, SHUFFLE, epoch);
        let mut aug_rng = rng_for(cfg.seed, AUGMENT, epoch);
        let mut total = 0.0;
        let mut count = 0usize;
        for batch in batches(unlabelled.len(), cfg.batch_size, &mut shuffle) {
            let mut g = Graph::new();
            let fe_ids = model.extractor.state.bind(&mut g, true);
            let head_ids: Vec<Vec<NodeId>> = model.heads.iter().map(|h| h.state.bind(&mut g, true)).collect();
            let mut head_losses = Vec::with_capacity(n_heads);
            for (h, spec) in augs.iter().enumerate() {
                let mut xs = Vec::with_capacity(batch.len());
                let mut ys = Vec::with_capacity(batch.len());
                for &k in &batch {
                    let (x, y) = mtssl_example(&unlabelled[k], spec, &mut aug_rng)?;
                    xs.push(x);
                    ys.push(S::of(y as f64));
                }
                let x = g.constant(batch_tensor(&xs.iter().collect::<Vec<_>>())?);
                let f = model.extractor.forward(&mut g, &fe_ids, x)?;
                let logit = model.heads[h].forward(&mut g, &head_ids[h], f)?;
                head_losses.push(g.bce_with_logits(logit, &ys)?);
            }
            let mut loss = head_losses[0];
            for &l in &head_losses[1..] {
                loss = g.add(loss, l)?;
            }
            let loss = g.scale(loss, S::of(1.0 / n_heads as f64))?;
            let lv = g.value(loss).item().as_f64();
            check_loss("mtssl", lv)?;
            let root = match l2_penalty(&mut g, &fe_ids, cfg.weight_decay)? {
                Some(r) => g.add(loss, r)?,
                None => loss,
            };
            let grads = g.backward(root)?;
            let mut all_ids = fe_ids.clone();
            for ids in &head_ids {
                all_ids.extend(ids);
            }
            let gs = grads_of(&grads, &all_ids);
            let mut params: Vec<&mut Tensor<S>> = model.extractor.state.tensors.iter_mut().collect();
            for h in model.heads.iter_mut() {
                params.extend(h.state.tensors.iter_mut());
            }
            opt.step(&mut params, &gs)?;
            total += lv * batch.len() as f64;
            count += batch.len();
        }
        let mean_loss = total / count.max(1) as f64;
        trace.push(mean_loss, None, None);
        match stopper.observe(-mean_loss) {
            StopDecision::Improved => best = model.clone(),
            StopDecision::Continue => {}
            StopDecision::Stop => break,
        }
    }
    trace.best_epoch = stopper.best_epoch();
    Ok((best, trace))
}

/// Accuracy of each head on freshly drawn apply/not examples.
pub fn mtssl_head_accuracy<S: Scalar>(
    model: &Mtssl<S>,
    windows: &[Window<S>],
    augs: &[Augmentation],
    seed: u64,
) -> Result<Vec<f64>> {
    let mut rng = rng_for(seed, AUGMENT, usize::MAX);
    augs.iter()
        .enumerate()
        .map(|(h, spec)| {
            let mut xs = Vec::with_capacity(windows.len());
            let mut ys = Vec::with_capacity(windows.len());
            for w in windows {
                let (x, y) = mtssl_example(w, spec, &mut rng)?;
                xs.push(x);
                ys.push(y);
            }
            let probs = model.head_probabilities(h, &xs)?;
            let correct = probs
                .iter()
                .zip(&ys)
                .filter(|(p, &y)| (p.as_f64() > 0.5) == (y == 1))
                .count();
            Ok(correct as f64 / windows.len().max(1) as f64)
        })
        .collect()
}

/// Labelled data for one classification task. `classes[i]` is the user id
/// of class `i`.
#[derive(Clone, Copy, Debug)]
pub struct LabelledData<'a, S> {
    pub train: &'a [Window<S>],
    pub validation: &'a [Window<S>],
    pub classes: &'a [u32],
}

impl<'a, S: Scalar> LabelledData<'a, S> {
    fn labels(&self) -> Result<(Vec<usize>, Vec<usize>)> {
        if self.train.is_empty() {
            return Err(Error::Data("labelled training set is empty".into()));
        }
        let train = class_labels(self.train, self.classes)?;
        let mut seen = vec![false; self.classes.len()];
        train.iter().for_each(|&y| seen[y] = true);
        let missing: Vec<u32> = self
            .classes
            .iter()
            .zip(&seen)
            .filter(|(_, &s)| !s)
            .map(|(&c, _)| c)
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingClasses(missing));
        }
        Ok((train, class_labels(self.validation, self.classes)?))
    }
}

/// Accuracy and kappa of a classifier on one set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    /// `None` when undefined (a single class on both sides).
    pub kappa: Option<f64>,
    pub n: usize,
}

impl Evaluation {
    /// Kappa when defined, accuracy otherwise.
    pub fn score(&self) -> f64 {
        self.kappa.unwrap_or(self.accuracy)
    }
}

fn evaluate_predictions(truth: Vec<usize>, predicted: Vec<usize>, n_classes: usize) -> Result<Evaluation> {
    let ps = PredictionSet::new(truth, predicted, n_classes)?;
    Ok(Evaluation {
        accuracy: accuracy(&ps)?,
        kappa: kappa(&ps)?,
        n: ps.len(),
    })
}

pub fn evaluate<S: Scalar>(model: &Classifier<S>, windows: &[Window<S>], classes: &[u32]) -> Result<Evaluation> {
    let truth = class_labels(windows, classes)?;
    let predicted = model.predict_labels(windows)?;
    evaluate_predictions(truth, predicted, model.n_classes())
}

/// Trains a classifier on top of `fe`. With `cfg.finetune_extractor` off
/// the extractor is frozen and left bitwise unchanged. Early stopping
/// watches validation kappa; the best epoch's state is returned.
pub fn train_classifier<S: Scalar>(
    fe: &FeatureExtractor<S>,
    data: &LabelledData<'_, S>,
    cfg: &TrainConfig,
) -> Result<(Classifier<S>, TrainTrace)> {
    cfg.validate()?;
    let model = build_classifier(fe.clone(), data.classes.len(), &mut rng_for(cfg.seed, HEAD_INIT, 0))?;
    fit_classifier(model, data, cfg)
}

pub fn fit_classifier<S: Scalar>(
    model: Classifier<S>,
    data: &LabelledData<'_, S>,
    cfg: &TrainConfig,
) -> Result<(Classifier<S>, TrainTrace)> {
    cfg.validate()?;
    if model.n_classes() != data.classes.len() {
        return Err(Error::shape(
            "train_classifier",
            format!("head has {} outputs for {} classes", model.n_classes(), data.classes.len()),
        ));
    }
    let (train_y, val_y) = data.labels()?;
    if cfg.finetune_extractor {
        fit_end_to_end(model, data, &train_y, &val_y, cfg)
    } else {
        fit_head_only(model, data, &train_y, &val_y, cfg)
    }
}

fn fit_end_to_end<S: Scalar>(
    mut model: Classifier<S>,
    data: &LabelledData<'_, S>,
    train_y: &[usize],
    val_y: &[usize],
    cfg: &TrainConfig,
) -> Result<(Classifier<S>, TrainTrace)> {
    let steps = data.train.len().div_ceil(cfg.batch_size);
    let mut opt = Optimizer::new(
        model.extractor.state.tensors.iter().chain(&model.head.state.tensors),
        cfg,
        steps,
    );
    let n_classes = model.n_classes();
    let mut trace = TrainTrace::default();
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut best = model.clone();
    for epoch in 0..cfg.max_epochs {
        let mut shuffle = rng_for(cfg.seed, SHUFFLE, epoch);
        let mut total = 0.0;
        for batch in batches(data.train.len(), cfg.batch_size, &mut shuffle) {
            let xs: Vec<&Window<S>> = batch.iter().map(|&k| &data.train[k]).collect();
            let ys: Vec<usize> = batch.iter().map(|&k| train_y[k]).collect();
            let mut g = Graph::new();
            let fe_ids = model.extractor.state.bind(&mut g, true);
            let hd_ids = model.head.state.bind(&mut g, true);
            let x = g.constant(batch_tensor(&xs)?);
            let f = model.extractor.forward(&mut g, &fe_ids, x)?;
            let logits = model.head.forward(&mut g, &hd_ids, f)?;
            let loss = g.softmax_cross_entropy(logits, &ys)?;
            let lv = g.value(loss).item().as_f64();
            check_loss("classifier", lv)?;
            let root = match l2_penalty(&mut g, &fe_ids, cfg.weight_decay)? {
                Some(r) => g.add(loss, r)?,
                None => loss,
            };
            let grads = g.backward(root)?;
            let ids: Vec<NodeId> = fe_ids.iter().chain(&hd_ids).copied().collect();
            let gs = grads_of(&grads, &ids);
            let mut params: Vec<&mut Tensor<S>> = model
                .extractor
                .state
                .tensors
                .iter_mut()
                .chain(model.head.state.tensors.iter_mut())
                .collect();
            opt.step(&mut params, &gs)?;
            total += lv * batch.len() as f64;
        }
        let val = if data.validation.is_empty() {
            None
        } else {
            let pred = model.predict_labels(data.validation)?;
            Some(evaluate_predictions(val_y.to_vec(), pred, n_classes)?.score())
        };
        trace.push(total / data.train.len() as f64, val, None);
        let Some(v) = val else {
            best = model.clone();
            continue;
        };
        match stopper.observe(v) {
            StopDecision::Improved => best = model.clone(),
            StopDecision::Continue => {}
            StopDecision::Stop => break,
        }
    }
    trace.best_epoch = if data.validation.is_empty() {
        trace.stopped_epoch
    } else {
        stopper.best_epoch()
    };
    Ok((best, trace))
}

/// Frozen extractor: features are computed once and only the head trains.
fn fit_head_only<S: Scalar>(
    model: Classifier<S>,
    data: &LabelledData<'_, S>,
    train_y: &[usize],
    val_y: &[usize],
    cfg: &TrainConfig,
) -> Result<(Classifier<S>, TrainTrace)> {
    let Classifier { extractor, mut head } = model;
    let train_f = extract_features(&extractor, data.train)?;
    let val_f = if data.validation.is_empty() {
        None
    } else {
        Some(extract_features(&extractor, data.validation)?)
    };
    let d = train_f.shape()[1];
    let steps = data.train.len().div_ceil(cfg.batch_size);
    let mut opt = Optimizer::new(&head.state.tensors, cfg, steps);
    let n_classes = head.output_width();
    let mut trace = TrainTrace::default();
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut best: Mlp<S> = head.clone();
    for epoch in 0..cfg.max_epochs {
        let mut shuffle = rng_for(cfg.seed, SHUFFLE, epoch);
        let mut total = 0.0;
        for batch in batches(data.train.len(), cfg.batch_size, &mut shuffle) {
            let mut rows = Vec::with_capacity(batch.len() * d);
            for &k in &batch {
                rows.extend_from_slice(train_f.row(k));
            }
            let ys: Vec<usize> = batch.iter().map(|&k| train_y[k]).collect();
            let mut g = Graph::new();
            let hd_ids = head.state.bind(&mut g, true);
            let x = g.constant(Tensor::new(vec![batch.len(), d], rows)?);
            let logits = head.forward(&mut g, &hd_ids, x)?;
            let loss = g.softmax_cross_entropy(logits, &ys)?;
            let lv = g.value(loss).item().as_f64();
            check_loss("classifier", lv)?;
            let grads = g.backward(loss)?;
            let gs = grads_of(&grads, &hd_ids);
            let mut params: Vec<&mut Tensor<S>> = head.state.tensors.iter_mut().collect();
            opt.step(&mut params, &gs)?;
            total += lv * batch.len() as f64;
        }
        let val = match &val_f {
            Some(vf) => {
                let pred = argmax_rows(&mlp_outputs(&head, vf)?);
                Some(evaluate_predictions(val_y.to_vec(), pred, n_classes)?.score())
            }
            None => None,
        };
        trace.push(total / data.train.len() as f64, val, None);
        let Some(v) = val else {
            best = head.clone();
            continue;
        };
        match stopper.observe(v) {
            StopDecision::Improved => best = head.clone(),
            StopDecision::Continue => {}
            StopDecision::Stop => break,
        }
    }
    trace.best_epoch = if val_f.is_none() {
        trace.stopped_epoch
    } else {
        stopper.best_epoch()
    };
    Ok((
        Classifier {
            extractor,
            head: best,
        },
        trace,
    ))
}

fn fresh_extractor<S: Scalar>(
    fe_spec: &FeatureExtractorSpec,
    windows: &[Window<S>],
    seed: u64,
) -> Result<FeatureExtractor<S>> {
    let (t, c) = input_shape(windows, "labelled")?;
    build_feature_extractor(fe_spec, t, c, &mut rng_for(seed, INIT, 0))
}

/// Randomly initialized extractor and head trained end to end on labels.
pub fn train_supervised<S: Scalar>(
    data: &LabelledData<'_, S>,
    fe_spec: &FeatureExtractorSpec,
    cfg: &TrainConfig,
) -> Result<(Classifier<S>, TrainTrace)> {
    let fe = fresh_extractor(fe_spec, data.train, cfg.seed)?;
    let cfg = TrainConfig {
        finetune_extractor: true,
        ..cfg.clone()
    };
    train_classifier(&fe, data, &cfg)
}

/// Originals followed by one transformed copy of every original per augmentation.
pub fn augmented_training_set<S: Scalar>(
    train: &[Window<S>],
    augs: &[Augmentation],
    seed: u64,
) -> Result<Vec<Window<S>>> {
    let mut rng = rng_for(seed, DATA_AUGMENT, 0);
    let mut out = train.to_vec();
    for spec in augs {
        for w in train {
            out.push(spec.apply(w, &mut rng)?);
        }
    }
    Ok(out)
}

/// The scaling and noise transforms used to enlarge labelled data.
pub fn default_label_augmentations() -> Vec<Augmentation> {
    vec![Augmentation::scaling_default(), Augmentation::jitter_default()]
}

/// Supervised training on originals plus augmented copies, built once.
pub fn train_augmented<S: Scalar>(
    data: &LabelledData<'_, S>,
    fe_spec: &FeatureExtractorSpec,
    augs: &[Augmentation],
    cfg: &TrainConfig,
) -> Result<(Classifier<S>, TrainTrace)> {
    let enlarged = augmented_training_set(data.train, augs, cfg.seed)?;
    let enlarged_data = LabelledData {
        train: &enlarged,
        ..*data
    };
    train_supervised(&enlarged_data, fe_spec, cfg)
}

/// Stage 1 trains a supervised model on the source users; stage 2 swaps in
/// a fresh head for the target users and fine-tunes everything.
pub fn transfer_learn<S: Scalar>(
    source: &LabelledData<'_, S>,
    target: &LabelledData<'_, S>,
    fe_spec: &FeatureExtractorSpec,
    cfg: &TrainConfig,
) -> Result<(Classifier<S>, TrainTrace)> {
    let (stage1, _) = train_supervised(source, fe_spec, cfg)?;
    let cfg2 = TrainConfig {
        finetune_extractor: true,
        seed: mix(cfg.seed, 0x5747),
        ..cfg.clone()
    };
    train_classifier(&stage1.extractor, target, &cfg2)
}

/// Parameter states whose tensors differ between two extractors, by name.
pub fn changed_parameters<S: Scalar>(a: &NetworkState<S>, b: &NetworkState<S>) -> Vec<String> {
    a.names
        .iter()
        .zip(a.tensors.iter().zip(&b.tensors))
        .filter(|(_, (x, y))| {
            x.data()
                .iter()
                .zip(y.data())
                .any(|(p, q)| p.as_f64().to_bits() != q.as_f64().to_bits())
        })
        .map(|(n, _)| n.clone())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn early_stop_examples() {
        assert_eq!(early_stop(&[0.5, 0.6, 0.6, 0.6], 2), (Some(4), 2));
        assert_eq!(early_stop(&[0.3; 10], 3), (Some(4), 1));
        assert_eq!(early_stop(&[0.1, 0.2, 0.3, 0.4, 0.5], 1), (None, 5));
    }

    #[test]
    fn vector_loss_bounds() {
        let l = simsiam_loss(&[1.0f64, 2.0], &[2.0, 4.0], &[-1.0, 0.5], &[-3.0, 1.5]).unwrap();
        assert!((l + 1.0).abs() < 1e-12);
        let l = simsiam_loss(&[1.0f64, 0.0], &[0.0, 1.0], &[0.0, 2.0], &[3.0, 0.0]).unwrap();
        assert_eq!(l, 0.0);
        assert!(simsiam_loss(&[0.0f64, 0.0], &[1.0, 0.0], &[1.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            initial_lr: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            patience: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert_eq!(TrainConfig::pretrain(30).initial_lr, 3e-5);
        assert_eq!(TrainConfig::pretrain(30).weight_decay, 0.01);
    }

    #[test]
    fn trace_csv() {
        let mut t = TrainTrace::default();
        t.push(0.5, Some(0.25), None);
        t.push(0.25, None, Some(0.75));
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "epoch,loss,val_metric,collapse_stat\n1,0.5,0.25,\n2,0.25,,0.75\n"
        );
    }
}
