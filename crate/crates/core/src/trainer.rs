//! Source pretraining and the conditional adversarial training loop.
//!
//! Both phases run SGD with momentum under the inverse-power learning-rate
//! decay `base_lr * (1 + gamma * iter)^(-power)`. Layers past the feature
//! body (bottleneck, classifier head, discriminator) train at
//! `head_lr_multiplier` times that rate.
//!
//! Adversarial batches hold `labeled_batch / 2` source rows and
//! `labeled_batch / 2` promoted target rows for the classifier, all of them on
//! the source side of the domain classifier, plus `unlabeled_batch` rows from
//! the remaining target pool on the target side.

use std::fmt;

use rand::seq::SliceRandom;
use thiserror::Error;

use crate::data_synth::LabeledDataset;
use crate::network::{
    backprop, AdaptationModel, BatchRow, Condition, DenseLayer, Discriminator, DomainSide, LayerGrad, LossSpec,
    NetworkError,
};
use crate::rng::{self, Rng, Stream};
use crate::selection::{argmax, Provenance, SplitUpdate};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("diverged at iteration {iteration}: non-finite {term}")]
    Diverged {
        iteration: usize,
        term: &'static str,
        /// Parameters from the last iteration that finished finite.
        last_good: Box<AdaptationModel>,
    },
    #[error("source dataset must be labeled")]
    UnlabeledSource,
    #[error(transparent)]
    Network(#[from] NetworkError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub lr_gamma: f64,
    pub lr_power: f64,
    pub momentum: f64,
    pub labeled_batch: usize,
    pub unlabeled_batch: usize,
    pub iterations: usize,
    pub grl_lambda_max: f64,
    pub grl_ramp: f64,
    pub head_lr_multiplier: f64,
    pub weight_decay: f64,
    /// Hold the first extractor layer fixed.
    pub freeze_first_layer: bool,
    /// Off: skip the domain term entirely (self-training on `S ∪ T^p` only).
    pub adversarial: bool,
    pub log_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.001,
            lr_gamma: 0.001,
            lr_power: 0.85,
            momentum: 0.9,
            labeled_batch: 64,
            unlabeled_batch: 64,
            iterations: 2000,
            grl_lambda_max: 1.0,
            grl_ramp: 10.0,
            head_lr_multiplier: 10.0,
            weight_decay: 0.0,
            freeze_first_layer: false,
            adversarial: true,
            log_every: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.labeled_batch == 0 || !self.labeled_batch.is_multiple_of(2) {
            return bad("labeled_batch must be a positive even number");
        }
        if self.unlabeled_batch == 0 {
            return bad("unlabeled_batch must be positive");
        }
        for (name, v) in [("base_lr", self.base_lr), ("lr_gamma", self.lr_gamma), ("head_lr_multiplier", self.head_lr_multiplier)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(&format!("{name} must be positive"));
            }
        }
        if !(self.lr_power > 0.0 && self.lr_power <= 1.0) {
            return bad("lr_power must lie in (0, 1]");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.grl_lambda_max >= 0.0) || !(self.grl_ramp >= 0.0) || !(self.weight_decay >= 0.0) {
            return bad("grl_lambda_max, grl_ramp and weight_decay must be non-negative");
        }
        if self.log_every == 0 {
            return bad("log_every must be positive");
        }
        Ok(())
    }
}

/// `base_lr * (1 + lr_gamma * iter)^(-lr_power)`.
pub fn lr_at(config: &TrainConfig, iter: usize) -> f64 {
    config.base_lr * (1.0 + config.lr_gamma * iter as f64).powf(-config.lr_power)
}

/// `lambda_max * (2 / (1 + exp(-ramp * progress)) - 1)`, progress in [0, 1].
pub fn grl_lambda(config: &TrainConfig, iter: usize) -> f64 {
    let progress = if config.iterations == 0 { 1.0 } else { iter as f64 / config.iterations as f64 };
    config.grl_lambda_max * (2.0 / (1.0 + (-config.grl_ramp * progress).exp()) - 1.0)
}

/// One momentum step: `v <- momentum * v - lr * g; theta <- theta + v`.
pub fn momentum_step(theta: &mut [f64], velocity: &mut [f64], grad: &[f64], lr: f64, momentum: f64) {
    for ((t, v), g) in theta.iter_mut().zip(velocity.iter_mut()).zip(grad) {
        *v = momentum * *v - lr * g;
        *t += *v;
    }
}

fn update_layer(layer: &mut DenseLayer, grad: &LayerGrad, vel: &mut LayerGrad, lr: f64, config: &TrainConfig) {
    let decayed = |params: &[f64], g: &[f64]| -> Vec<f64> {
        g.iter().zip(params).map(|(g, p)| g + config.weight_decay * p).collect()
    };
    if config.weight_decay > 0.0 {
        let gw = decayed(&layer.weights, &grad.weights);
        momentum_step(&mut layer.weights, &mut vel.weights, &gw, lr, config.momentum);
    } else {
        momentum_step(&mut layer.weights, &mut vel.weights, &grad.weights, lr, config.momentum);
    }
    momentum_step(&mut layer.bias, &mut vel.bias, &grad.bias, lr, config.momentum);
}

/// Momentum buffers for a model (and optionally its discriminator).
struct Optimizer {
    extractor: Vec<LayerGrad>,
    head: LayerGrad,
    disc: Vec<LayerGrad>,
}

impl Optimizer {
    fn new(model: &AdaptationModel, disc: Option<&Discriminator>) -> Self {
        Self {
            extractor: model.extractor.iter().map(LayerGrad::zeros_like).collect(),
            head: LayerGrad::zeros_like(&model.head),
            disc: disc.map_or_else(Vec::new, |d| d.layers.iter().map(LayerGrad::zeros_like).collect()),
        }
    }

    fn step_model(&mut self, model: &mut AdaptationModel, grads: &crate::network::ModelGrad, iter: usize, config: &TrainConfig) {
        let lr = lr_at(config, iter);
        let head_lr = lr * config.head_lr_multiplier;
        let bottleneck = model.extractor.len() - 1;
        for (k, ((layer, g), v)) in model.extractor.iter_mut().zip(&grads.extractor).zip(&mut self.extractor).enumerate() {
            if k == 0 && config.freeze_first_layer {
                continue;
            }
            update_layer(layer, g, v, if k == bottleneck { head_lr } else { lr }, config);
        }
        update_layer(&mut model.head, &grads.head, &mut self.head, head_lr, config);
    }

    fn step_disc(&mut self, disc: &mut Discriminator, grads: &crate::network::DiscGrad, iter: usize, config: &TrainConfig) {
        let head_lr = lr_at(config, iter) * config.head_lr_multiplier;
        for ((layer, g), v) in disc.layers.iter_mut().zip(&grads.layers).zip(&mut self.disc) {
            update_layer(layer, g, v, head_lr, config);
        }
    }
}

/// Datasets used only for monitoring; never touched by the updates.
#[derive(Clone, Copy, Debug)]
pub struct Monitor<'a> {
    pub source: &'a LabeledDataset,
    pub target: &'a LabeledDataset,
    pub target_truth: &'a [usize],
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub iteration: usize,
    pub cls_loss: f64,
    pub dom_loss: f64,
    pub src_acc: f64,
    pub tgt_acc: f64,
    pub disc_acc: f64,
    pub lr: f64,
    pub lambda: f64,
}

impl fmt::Display for Metrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "iter={} cls_loss={} dom_loss={} src_acc={} tgt_acc={} disc_acc={} lr={} lambda={}",
            self.iteration, self.cls_loss, self.dom_loss, self.src_acc, self.tgt_acc, self.disc_acc, self.lr, self.lambda
        )
    }
}

/// Epoch-style sampler: walks a shuffled permutation and reshuffles once it
/// is used up, so every element appears once before any repeats.
#[derive(Clone, Debug)]
pub struct ShuffledPool {
    items: Vec<usize>,
    cursor: usize,
}

impl ShuffledPool {
    pub fn new(items: Vec<usize>, rng: &mut Rng) -> Self {
        let mut pool = Self { items, cursor: 0 };
        pool.items.shuffle(rng);
        pool
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn draw(&mut self, n: usize, rng: &mut Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(n);
        if self.items.is_empty() {
            return out;
        }
        while out.len() < n {
            if self.cursor == self.items.len() {
                self.items.shuffle(rng);
                self.cursor = 0;
            }
            out.push(self.items[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComposedBatch {
    pub labeled: Vec<Provenance>,
    /// Target indices from the unlabeled pool.
    pub unlabeled: Vec<usize>,
    /// No promoted targets were available; the labeled half came from source only.
    pub fallback: bool,
}

pub struct BatchComposer {
    source: ShuffledPool,
    promoted: ShuffledPool,
    unlabeled: ShuffledPool,
    labeled_batch: usize,
    unlabeled_batch: usize,
    rng: Rng,
}

impl BatchComposer {
    pub fn new(split: &SplitUpdate, config: &TrainConfig, mut rng: Rng) -> Self {
        let source = ShuffledPool::new((0..split.source().len()).collect(), &mut rng);
        let promoted = ShuffledPool::new(split.promoted().iter().map(|p| p.index).collect(), &mut rng);
        let unlabeled = ShuffledPool::new(split.unlabeled_indices().to_vec(), &mut rng);
        Self {
            source,
            promoted,
            unlabeled,
            labeled_batch: config.labeled_batch,
            unlabeled_batch: config.unlabeled_batch,
            rng,
        }
    }

    pub fn next_batch(&mut self) -> ComposedBatch {
        let fallback = self.promoted.is_empty();
        let labeled = if fallback {
            self.source.draw(self.labeled_batch, &mut self.rng).into_iter().map(Provenance::Source).collect()
        } else {
            let half = self.labeled_batch / 2;
            let src = self.source.draw(half, &mut self.rng).into_iter().map(Provenance::Source);
            let tp = self.promoted.draw(half, &mut self.rng).into_iter().map(Provenance::PromotedTarget);
            src.chain(tp).collect()
        };
        let unlabeled = self.unlabeled.draw(self.unlabeled_batch, &mut self.rng);
        ComposedBatch { labeled, unlabeled, fallback }
    }
}

pub fn compose_batch(composer: &mut BatchComposer) -> ComposedBatch {
    composer.next_batch()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    /// `None` for classes absent from the ground truth.
    pub per_class: Vec<Option<f64>>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

pub fn evaluate_predictions(predicted: &[usize], truth: &[usize], class_count: usize) -> Evaluation {
    let mut confusion = vec![vec![0usize; class_count]; class_count];
    for (&p, &t) in predicted.iter().zip(truth) {
        confusion[t][p] += 1;
    }
    let correct: usize = (0..class_count).map(|c| confusion[c][c]).sum();
    let per_class = confusion
        .iter()
        .enumerate()
        .map(|(c, row)| {
            let n: usize = row.iter().sum();
            (n > 0).then(|| row[c] as f64 / n as f64)
        })
        .collect();
    Evaluation { accuracy: correct as f64 / truth.len().max(1) as f64, per_class, confusion }
}

pub fn predict(model: &AdaptationModel, ds: &LabeledDataset) -> Result<Vec<usize>, NetworkError> {
    ds.rows().map(|x| Ok(argmax(&model.classify(x)?))).collect()
}

pub fn evaluate(model: &AdaptationModel, ds: &LabeledDataset, truth: &[usize]) -> Result<Evaluation, NetworkError> {
    Ok(evaluate_predictions(&predict(model, ds)?, truth, model.classes()))
}

fn accuracy(model: &AdaptationModel, ds: &LabeledDataset, truth: &[usize]) -> Result<f64, NetworkError> {
    Ok(evaluate(model, ds, truth)?.accuracy)
}

fn diverged(err: NetworkError, iteration: usize, last_good: &AdaptationModel) -> TrainError {
    match err {
        NetworkError::NonFiniteLoss { term } => {
            TrainError::Diverged { iteration, term, last_good: Box::new(last_good.clone()) }
        }
        other => TrainError::Network(other),
    }
}

#[derive(Clone, Debug)]
pub struct Pretrained {
    pub model: AdaptationModel,
    pub trace: Vec<Metrics>,
}

/// Minimizes mean cross-entropy on the labeled source set.
pub fn pretrain(
    mut model: AdaptationModel,
    source: &LabeledDataset,
    config: &TrainConfig,
    monitor: Option<Monitor<'_>>,
) -> Result<Pretrained, TrainError> {
    config.validate()?;
    let labels = source.labels().ok_or(TrainError::UnlabeledSource)?;
    let mut rng = rng::stream(config.seed, Stream::PretrainBatches);
    let mut pool = ShuffledPool::new((0..source.len()).collect(), &mut rng);
    let mut opt = Optimizer::new(&model, None);
    let spec = LossSpec::classification_only();
    let mut trace = Vec::new();

    for iter in 0..config.iterations {
        let idx = pool.draw(config.labeled_batch, &mut rng);
        let batch: Vec<BatchRow> =
            idx.iter().map(|&i| BatchRow { x: source.row(i), class: Some(labels[i]), side: None }).collect();
        let (grads, loss) = backprop(&model, None, &batch, &spec, None).map_err(|e| diverged(e, iter, &model))?;
        let last_good = model.clone();
        opt.step_model(&mut model, &grads.model, iter, config);
        if !model.is_finite() {
            return Err(TrainError::Diverged { iteration: iter, term: "parameters", last_good: Box::new(last_good) });
        }
        if (iter + 1) % config.log_every == 0 || iter + 1 == config.iterations {
            let src_acc = accuracy(&model, source, labels)?;
            let tgt_acc = match monitor {
                Some(m) => accuracy(&model, m.target, m.target_truth)?,
                None => f64::NAN,
            };
            trace.push(Metrics {
                iteration: iter + 1,
                cls_loss: loss.classification,
                dom_loss: 0.0,
                src_acc,
                tgt_acc,
                disc_acc: 0.5,
                lr: lr_at(config, iter),
                lambda: 0.0,
            });
        }
    }
    Ok(Pretrained { model, trace })
}

#[derive(Clone, Debug)]
pub struct Adapted {
    pub model: AdaptationModel,
    pub disc: Discriminator,
    pub trace: Vec<Metrics>,
    /// Set when no promoted targets existed and batches fell back to source only.
    pub fallback: bool,
}

/// Classifier cross-entropy on `S ∪ T^p` plus the domain loss, with the
/// generator receiving the reversed domain gradient scaled by the ramped
/// lambda.
pub fn adversarial_train(
    mut model: AdaptationModel,
    mut disc: Discriminator,
    split: &SplitUpdate,
    config: &TrainConfig,
    monitor: Option<Monitor<'_>>,
) -> Result<Adapted, TrainError> {
    config.validate()?;
    let expected = disc.condition.input_width(model.bottleneck_width(), model.classes());
    if disc.input_width() != expected {
        return Err(NetworkError::WidthMismatch { expected, got: disc.input_width() }.into());
    }
    let mut composer = BatchComposer::new(split, config, rng::stream(config.seed, Stream::AdaptBatches));
    let mut dropout_rng = rng::stream(config.seed, Stream::Dropout);
    let mut opt = Optimizer::new(&model, Some(&disc));
    let mut trace = Vec::new();
    let mut fallback = false;

    for iter in 0..config.iterations {
        let batch = composer.next_batch();
        fallback |= batch.fallback;
        let lambda = if config.adversarial { grl_lambda(config, iter) } else { 0.0 };
        let side = |s: DomainSide| config.adversarial.then_some(s);
        let mut rows: Vec<BatchRow> = batch
            .labeled
            .iter()
            .map(|&p| {
                let (x, class) = split.labeled_row(p);
                BatchRow { x, class: Some(class), side: side(p.domain_side()) }
            })
            .collect();
        rows.extend(
            batch.unlabeled.iter().map(|&i| BatchRow { x: split.target().row(i), class: None, side: side(DomainSide::Target) }),
        );
        let spec = if config.adversarial { LossSpec::adversarial(lambda) } else { LossSpec::classification_only() };
        let (grads, loss) = backprop(&model, config.adversarial.then_some(&disc), &rows, &spec, Some(&mut dropout_rng))
            .map_err(|e| diverged(e, iter, &model))?;

        let last_good = model.clone();
        opt.step_model(&mut model, &grads.model, iter, config);
        if let Some(dg) = &grads.disc {
            opt.step_disc(&mut disc, dg, iter, config);
        }
        if !model.is_finite() || !disc.is_finite() {
            return Err(TrainError::Diverged { iteration: iter, term: "parameters", last_good: Box::new(last_good) });
        }

        if (iter + 1) % config.log_every == 0 || iter + 1 == config.iterations {
            let (src_acc, tgt_acc) = match monitor {
                Some(m) => (
                    accuracy(&model, m.source, m.source.labels().ok_or(TrainError::UnlabeledSource)?)?,
                    accuracy(&model, m.target, m.target_truth)?,
                ),
                None => (f64::NAN, f64::NAN),
            };
            trace.push(Metrics {
                iteration: iter + 1,
                cls_loss: loss.classification,
                dom_loss: loss.domain,
                src_acc,
                tgt_acc,
                disc_acc: loss.disc_balanced_accuracy(),
                lr: lr_at(config, iter),
                lambda,
            });
        }
    }
    Ok(Adapted { model, disc, trace, fallback })
}

/// Balanced accuracy (dropout off) of `disc` at calling `source_rows` source
/// and `target_rows` target. A missing side leaves the other side's accuracy;
/// both missing gives 0.5.
pub fn balanced_disc_accuracy<'a>(
    model: &AdaptationModel,
    disc: &Discriminator,
    source_rows: impl Iterator<Item = &'a [f64]>,
    target_rows: impl Iterator<Item = &'a [f64]>,
) -> Result<f64, NetworkError> {
    let side_accuracy = |rows: &mut dyn Iterator<Item = &[f64]>, source_side: bool| -> Result<Option<f64>, NetworkError> {
        let (mut hits, mut n) = (0usize, 0usize);
        for x in rows {
            let (f, p) = model.features_and_probs(x)?;
            let d = disc.discriminate(&disc.condition.apply(&f, &p), None)?;
            hits += ((d > 0.5) == source_side) as usize;
            n += 1;
        }
        Ok((n > 0).then(|| hits as f64 / n as f64))
    };
    let src = side_accuracy(&mut source_rows.into_iter(), true)?;
    let tgt = side_accuracy(&mut target_rows.into_iter(), false)?;
    Ok(match (src, tgt) {
        (Some(a), Some(b)) => 0.5 * (a + b),
        (Some(a), None) | (None, Some(a)) => a,
        (None, None) => 0.5,
    })
}

/// Discriminator accuracy on the training sides: every labeled row
/// (`S ∪ T^p`) as source, every remaining target as target.
pub fn discriminator_accuracy(
    model: &AdaptationModel,
    disc: &Discriminator,
    split: &SplitUpdate,
) -> Result<f64, NetworkError> {
    let provenance = split.provenance();
    balanced_disc_accuracy(
        model,
        disc,
        provenance.iter().map(|&p| split.labeled_row(p).0),
        split.unlabeled_indices().iter().map(|&i| split.target().row(i)),
    )
}

/// Discriminator accuracy on the true domains: all of `S` as source, all of
/// `T` (promoted or not) as target.
pub fn domain_accuracy(
    model: &AdaptationModel,
    disc: &Discriminator,
    source: &LabeledDataset,
    target: &LabeledDataset,
) -> Result<f64, NetworkError> {
    balanced_disc_accuracy(model, disc, source.rows(), target.rows())
}

/// Discriminator for `model` initialized from the run seed.
pub fn init_discriminator(
    model: &AdaptationModel,
    hidden: usize,
    dropout: f64,
    condition: Condition,
    seed: u64,
) -> Result<Discriminator, NetworkError> {
    Discriminator::for_model(model, hidden, dropout, condition, seed, &mut rng::stream(seed, Stream::DiscriminatorInit))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_synth::{generate_pair, DomainTag, ShiftSpec};
    use crate::network::ModelShape;
    use crate::selection::{apply_selection, select_balanced, SelectionReport};

    fn init_model(input: usize, classes: usize, seed: u64) -> AdaptationModel {
        AdaptationModel::new(&ModelShape::desk_default(input, classes), seed, &mut rng::stream(seed, Stream::ModelInit))
            .unwrap()
    }

    #[test]
    fn lr_schedule_examples() {
        let c = TrainConfig::default();
        assert_eq!(lr_at(&c, 0), 0.001);
        // 1 + gamma * iter = 2 at iter = 1000.
        let want = 0.001 * 2f64.powf(-0.85);
        assert!((lr_at(&c, 1000) - want).abs() < 1e-18);
        assert!((lr_at(&c, 1000) - 0.000555).abs() < 5e-7);
        for i in 0..500 {
            assert!(lr_at(&c, i + 1) < lr_at(&c, i));
        }
    }

    #[test]
    fn lambda_ramp_shape() {
        let c = TrainConfig { iterations: 100, ..TrainConfig::default() };
        assert_eq!(grl_lambda(&c, 0), 0.0);
        assert!((grl_lambda(&c, 100) - (2.0 / (1.0 + (-10f64).exp()) - 1.0)).abs() < 1e-15);
        assert!(grl_lambda(&c, 50) > grl_lambda(&c, 10));
    }

    #[test]
    fn momentum_matches_closed_form_on_quadratic() {
        // f(θ) = a θ² / 2, g = a θ, so one step is linear in (θ, v).
        let (a, lr, mu) = (2.0, 0.1, 0.9);
        let (mut theta, mut v) = ([1.0], [0.0]);
        let (mut t_ref, mut v_ref) = (1.0f64, 0.0f64);
        for _ in 0..50 {
            let g = [a * theta[0]];
            momentum_step(&mut theta, &mut v, &g, lr, mu);
            // v' = mu v - lr a t ; t' = t + v' = (1 - lr a) t + mu v
            let v_new = mu * v_ref - lr * a * t_ref;
            let t_new = (1.0 - lr * a) * t_ref + mu * v_ref;
            t_ref = t_new;
            v_ref = v_new;
            assert!((theta[0] - t_ref).abs() < 1e-13);
            assert!((v[0] - v_ref).abs() < 1e-13);
        }
        assert!(theta[0].abs() < 0.2);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { labeled_batch: 63, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { lr_power: 1.5, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { base_lr: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    fn toy_split(n_src: usize, n_tgt: usize, promoted: &[(usize, usize)]) -> SplitUpdate {
        let src = LabeledDataset::uniform(
            (0..n_src).map(|i| i as f64).collect(),
            1,
            Some((0..n_src).map(|i| i % 2).collect()),
            DomainTag::Source,
            2,
        )
        .unwrap();
        let tgt = LabeledDataset::uniform((0..n_tgt).map(|i| i as f64).collect(), 1, None, DomainTag::Target, 2).unwrap();
        let mut report = select_balanced(&vec![0; n_tgt], &vec![1.0; n_tgt], 2, 0.01).unwrap();
        report.promoted = promoted.iter().map(|&(index, pseudo_label)| crate::selection::Promoted { index, pseudo_label }).collect();
        apply_selection(&src, &tgt, &report).unwrap()
    }

    #[test]
    fn batch_is_half_source_half_promoted() {
        let split = toy_split(200, 100, &(0..40).map(|i| (i, i % 2)).collect::<Vec<_>>());
        let mut composer = BatchComposer::new(&split, &TrainConfig::default(), rng::stream(1, Stream::AdaptBatches));
        let b = compose_batch(&mut composer);
        assert_eq!(b.labeled.iter().filter(|p| matches!(p, Provenance::Source(_))).count(), 32);
        assert_eq!(b.labeled.iter().filter(|p| matches!(p, Provenance::PromotedTarget(_))).count(), 32);
        assert_eq!(b.unlabeled.len(), 64);
        assert!(!b.fallback);
        assert!(b.unlabeled.iter().all(|i| *i >= 40));
    }

    #[test]
    fn empty_promoted_pool_falls_back_to_source() {
        let split = toy_split(100, 50, &[]);
        let mut composer = BatchComposer::new(&split, &TrainConfig::default(), rng::stream(1, Stream::AdaptBatches));
        let b = composer.next_batch();
        assert!(b.fallback);
        assert_eq!(b.labeled.len(), 64);
        assert!(b.labeled.iter().all(|p| matches!(p, Provenance::Source(_))));
    }

    #[test]
    fn promoted_samples_cycle_without_replacement() {
        let promoted: Vec<(usize, usize)> = (0..80).map(|i| (i, 0)).collect();
        let split = toy_split(100, 100, &promoted);
        let mut composer = BatchComposer::new(&split, &TrainConfig::default(), rng::stream(3, Stream::AdaptBatches));
        let mut seen = Vec::new();
        while seen.len() < 80 {
            for p in composer.next_batch().labeled {
                if let Provenance::PromotedTarget(i) = p {
                    seen.push(i);
                }
            }
        }
        let mut first_epoch = seen[..80].to_vec();
        first_epoch.sort_unstable();
        assert_eq!(first_epoch, (0..80).collect::<Vec<_>>());
    }

    #[test]
    fn evaluation_reports_confusion() {
        let e = evaluate_predictions(&[0, 1, 2, 0], &[0, 1, 2, 0], 3);
        assert_eq!(e.accuracy, 1.0);
        // Every label cyclically shifted.
        let e = evaluate_predictions(&[1, 2, 0, 1], &[0, 1, 2, 0], 3);
        assert_eq!(e.accuracy, 0.0);
        assert_eq!(e.confusion, vec![vec![0, 2, 0], vec![0, 0, 1], vec![1, 0, 0]]);
        assert_eq!(e.per_class, vec![Some(0.0), Some(0.0), Some(0.0)]);
        let e = evaluate_predictions(&[0, 0], &[0, 0], 3);
        assert_eq!(e.per_class, vec![Some(1.0), None, None]);
    }

    fn separable() -> (LabeledDataset, Vec<usize>) {
        let spec = ShiftSpec { class_count: 2, class_center_radius: 4.0, class_std: 0.5, seed: 2, ..ShiftSpec::default() };
        let pair = generate_pair(&spec).unwrap();
        let labels = pair.source.labels().unwrap().to_vec();
        (pair.source, labels)
    }

    #[test]
    fn initial_loss_is_log_c_and_training_separates() {
        let (src, labels) = separable();
        let model = init_model(2, 2, 0);
        let config = TrainConfig { iterations: 300, log_every: 300, seed: 0, ..TrainConfig::default() };
        let before = evaluate(&model, &src, &labels).unwrap().accuracy;
        let out = pretrain(model, &src, &config, None).unwrap();
        let after = evaluate(&out.model, &src, &labels).unwrap().accuracy;
        assert!(after >= 0.99, "{after}");
        assert!(after >= before);

        let zero = AdaptationModel::from_layers(
            vec![DenseLayer::zeros(2, 4, crate::network::Activation::Identity)],
            DenseLayer::zeros(4, 3, crate::network::Activation::Identity),
            0,
        )
        .unwrap();
        let batch: Vec<BatchRow> = src.rows().take(10).map(|x| BatchRow { x, class: Some(1), side: None }).collect();
        let (_, loss) = backprop(&zero, None, &batch, &LossSpec::classification_only(), None).unwrap();
        assert!((loss.classification - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn pretrain_is_deterministic() {
        let (src, _) = separable();
        let config = TrainConfig { iterations: 50, seed: 9, ..TrainConfig::default() };
        let a = pretrain(init_model(2, 2, 9), &src, &config, None).unwrap();
        let b = pretrain(init_model(2, 2, 9), &src, &config, None).unwrap();
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn divergence_returns_last_good_model() {
        let (src, _) = separable();
        let config = TrainConfig { base_lr: 1e150, iterations: 50, ..TrainConfig::default() };
        match pretrain(init_model(2, 2, 1), &src, &config, None) {
            Err(TrainError::Diverged { last_good, .. }) => assert!(last_good.is_finite()),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    fn small_adapt_setup() -> (AdaptationModel, Discriminator, SplitUpdate) {
        let pair = generate_pair(&ShiftSpec { samples_per_class_source: 30, samples_per_class_target: 30, ..ShiftSpec::default() })
            .unwrap();
        let model = init_model(2, 4, 4);
        let disc = init_discriminator(&model, 8, 0.5, Condition::Product, 4).unwrap();
        let predicted = predict(&model, &pair.target).unwrap();
        let report: SelectionReport = select_balanced(&predicted, &vec![1.0; predicted.len()], 4, 0.25).unwrap();
        let split = apply_selection(&pair.source, &pair.target, &report).unwrap();
        (model, disc, split)
    }

    #[test]
    fn zero_lambda_matches_self_training_only() {
        let (model, disc, split) = small_adapt_setup();
        let base = TrainConfig { iterations: 40, seed: 4, ..TrainConfig::default() };
        let zero = TrainConfig { grl_lambda_max: 0.0, ..base.clone() };
        let plain = TrainConfig { adversarial: false, ..base };
        let a = adversarial_train(model.clone(), disc.clone(), &split, &zero, None).unwrap();
        let b = adversarial_train(model, disc, &split, &plain, None).unwrap();
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn adversarial_training_is_deterministic() {
        let (model, disc, split) = small_adapt_setup();
        let config = TrainConfig { iterations: 30, log_every: 10, seed: 4, ..TrainConfig::default() };
        let a = adversarial_train(model.clone(), disc.clone(), &split, &config, None).unwrap();
        let b = adversarial_train(model, disc, &split, &config, None).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.disc, b.disc);
        assert_eq!(format!("{:?}", a.trace), format!("{:?}", b.trace));
        assert_eq!(a.trace.len(), 3);
    }

    #[test]
    fn metrics_line_format() {
        let m = Metrics { iteration: 5, cls_loss: 0.5, dom_loss: 0.25, src_acc: 1.0, tgt_acc: 0.75, disc_acc: 0.5, lr: 0.001, lambda: 0.1 };
        assert_eq!(
            m.to_string(),
            "iter=5 cls_loss=0.5 dom_loss=0.25 src_acc=1 tgt_acc=0.75 disc_acc=0.5 lr=0.001 lambda=0.1"
        );
    }
}
