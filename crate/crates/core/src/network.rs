//! Small dense networks with hand-written backpropagation.
//!
//! An [`AdaptationModel`] is a feature extractor (rectifier hidden layers
//! ending in a linear bottleneck) followed by a softmax classifier head. The
//! [`Discriminator`] reads the flattened outer product of bottleneck features
//! and class probabilities and is coupled to the extractor through a gradient
//! reversal layer: the forward pass is the identity, the backward pass scales
//! the gradient by `-lambda`.

use std::fmt;
use std::fs;
use std::path::Path;

use rand::Rng as _;
use thiserror::Error;

use crate::rng::Rng;

#[derive(Debug, Error, PartialEq)]
pub enum NetworkError {
    #[error("input width mismatch: expected {expected}, got {got}")]
    WidthMismatch { expected: usize, got: usize },
    #[error("non-finite {term} loss")]
    NonFiniteLoss { term: &'static str },
    #[error("empty batch")]
    EmptyBatch,
    #[error("class index {class} out of range for {classes} classes")]
    ClassOutOfRange { class: usize, classes: usize },
    #[error("domain term requested without a discriminator")]
    MissingDiscriminator,
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Identity => v,
        }
    }

    /// Derivative expressed through the post-activation value.
    fn derivative_at_output(self, out: f64) -> f64 {
        match self {
            Activation::Relu => {
                if out > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }

    fn code(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Identity => 1,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Identity),
            _ => None,
        }
    }
}

/// Fully connected layer. `weights` is `outputs x inputs`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn zeros(inputs: usize, outputs: usize, activation: Activation) -> Self {
        Self { inputs, outputs, weights: vec![0.0; inputs * outputs], bias: vec![0.0; outputs], activation }
    }

    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`, zero bias.
    pub fn glorot(inputs: usize, outputs: usize, activation: Activation, rng: &mut Rng) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        let weights = (0..inputs * outputs).map(|_| rng.random_range(-limit..=limit)).collect();
        Self { inputs, outputs, weights, bias: vec![0.0; outputs], activation }
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.affine(x);
        for v in &mut out {
            *v = self.activation.apply(*v);
        }
        out
    }

    fn affine(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.inputs);
        self.weights
            .chunks_exact(self.inputs)
            .zip(&self.bias)
            .map(|(row, b)| b + row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>())
            .collect()
    }

    /// Accumulates parameter gradients for one example and returns the
    /// gradient with respect to the layer input. `grad_pre` is the gradient
    /// at the pre-activation.
    fn backward(&self, x: &[f64], grad_pre: &[f64], acc: &mut LayerGrad) -> Vec<f64> {
        let mut grad_in = vec![0.0; self.inputs];
        for (o, &g) in grad_pre.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            acc.bias[o] += g;
            let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
            let acc_row = &mut acc.weights[o * self.inputs..(o + 1) * self.inputs];
            for i in 0..self.inputs {
                acc_row[i] += g * x[i];
                grad_in[i] += g * row[i];
            }
        }
        grad_in
    }

    fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.bias).all(|v| v.is_finite())
    }
}

/// Gradient buffer shaped like a [`DenseLayer`].
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerGrad {
    pub fn zeros_like(layer: &DenseLayer) -> Self {
        Self { weights: vec![0.0; layer.weights.len()], bias: vec![0.0; layer.bias.len()] }
    }

    fn flatten_into(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.weights);
        out.extend_from_slice(&self.bias);
    }
}

/// Architecture of an [`AdaptationModel`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelShape {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub bottleneck: usize,
    pub classes: usize,
    /// First extractor layer whose activations enter the MJKD feature stack.
    /// The stack always ends at the bottleneck.
    pub feature_start: usize,
}

impl ModelShape {
    /// `input -> 64 -> 64 -> 16 -> classes`, stack over all three extractor layers.
    pub fn desk_default(input: usize, classes: usize) -> Self {
        Self { input, hidden: vec![64, 64], bottleneck: 16, classes, feature_start: 0 }
    }

    fn validate(&self) -> Result<(), NetworkError> {
        let bad = |m: &str| Err(NetworkError::Architecture(m.to_string()));
        if self.input == 0 || self.bottleneck == 0 || self.hidden.contains(&0) {
            return bad("layer widths must be positive");
        }
        if self.classes == 0 {
            return bad("need at least one class");
        }
        if self.feature_start > self.hidden.len() {
            return bad("feature_start past the bottleneck");
        }
        Ok(())
    }
}

/// Activations of the layers in the MJKD range for one example.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStack {
    layer_ids: Vec<usize>,
    vectors: Vec<Vec<f64>>,
}

impl FeatureStack {
    pub fn new(layer_ids: Vec<usize>, vectors: Vec<Vec<f64>>) -> Result<Self, NetworkError> {
        if layer_ids.len() != vectors.len() || layer_ids.is_empty() {
            return Err(NetworkError::Architecture("feature stack needs one vector per layer id".into()));
        }
        if layer_ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(NetworkError::Architecture("feature stack layer ids must increase".into()));
        }
        Ok(Self { layer_ids, vectors })
    }

    pub fn layer_ids(&self) -> &[usize] {
        &self.layer_ids
    }

    pub fn layer(&self, i: usize) -> &[f64] {
        &self.vectors[i]
    }

    pub fn depth(&self) -> usize {
        self.vectors.len()
    }

    pub fn layers(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.vectors.iter().map(Vec::as_slice)
    }

    /// The bottleneck activation.
    pub fn last(&self) -> &[f64] {
        self.vectors.last().expect("nonempty")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdaptationModel {
    pub extractor: Vec<DenseLayer>,
    pub head: DenseLayer,
    pub feature_start: usize,
    pub seed: u64,
}

struct ModelTrace {
    /// `acts[0]` is the input, `acts[k + 1]` the output of extractor layer k.
    acts: Vec<Vec<f64>>,
    probs: Vec<f64>,
}

impl AdaptationModel {
    pub fn new(shape: &ModelShape, seed: u64, rng: &mut Rng) -> Result<Self, NetworkError> {
        shape.validate()?;
        let mut extractor = Vec::with_capacity(shape.hidden.len() + 1);
        let mut width = shape.input;
        for &h in &shape.hidden {
            extractor.push(DenseLayer::glorot(width, h, Activation::Relu, rng));
            width = h;
        }
        extractor.push(DenseLayer::glorot(width, shape.bottleneck, Activation::Identity, rng));
        let head = DenseLayer::glorot(shape.bottleneck, shape.classes, Activation::Identity, rng);
        Ok(Self { extractor, head, feature_start: shape.feature_start, seed })
    }

    pub fn from_layers(extractor: Vec<DenseLayer>, head: DenseLayer, feature_start: usize) -> Result<Self, NetworkError> {
        if extractor.is_empty() {
            return Err(NetworkError::Architecture("extractor needs at least the bottleneck layer".into()));
        }
        if feature_start >= extractor.len() {
            return Err(NetworkError::Architecture("feature_start past the bottleneck".into()));
        }
        let mut width = extractor[0].inputs;
        for layer in extractor.iter().chain(std::iter::once(&head)) {
            if layer.inputs != width
                || layer.weights.len() != layer.inputs * layer.outputs
                || layer.bias.len() != layer.outputs
            {
                return Err(NetworkError::Architecture("layer widths do not chain".into()));
            }
            width = layer.outputs;
        }
        Ok(Self { extractor, head, feature_start, seed: 0 })
    }

    pub fn input_width(&self) -> usize {
        self.extractor[0].inputs
    }

    pub fn bottleneck_width(&self) -> usize {
        self.head.inputs
    }

    pub fn classes(&self) -> usize {
        self.head.outputs
    }

    pub fn shape(&self) -> ModelShape {
        let (bottleneck, hidden) = self.extractor.split_last().unwrap();
        ModelShape {
            input: self.input_width(),
            hidden: hidden.iter().map(|l| l.outputs).collect(),
            bottleneck: bottleneck.outputs,
            classes: self.classes(),
            feature_start: self.feature_start,
        }
    }

    pub fn layer_widths(&self) -> Vec<usize> {
        std::iter::once(self.input_width()).chain(self.extractor.iter().chain([&self.head]).map(|l| l.outputs)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.extractor.iter().chain([&self.head]).all(DenseLayer::is_finite)
    }

    fn check_width(&self, x: &[f64]) -> Result<(), NetworkError> {
        if x.len() != self.input_width() {
            return Err(NetworkError::WidthMismatch { expected: self.input_width(), got: x.len() });
        }
        Ok(())
    }

    fn trace(&self, x: &[f64]) -> ModelTrace {
        let mut acts = Vec::with_capacity(self.extractor.len() + 1);
        acts.push(x.to_vec());
        for layer in &self.extractor {
            let next = layer.forward(acts.last().unwrap());
            acts.push(next);
        }
        let probs = softmax(&self.head.forward(acts.last().unwrap()));
        ModelTrace { acts, probs }
    }

    pub fn forward_features(&self, x: &[f64]) -> Result<FeatureStack, NetworkError> {
        self.check_width(x)?;
        let mut acts = self.trace(x).acts;
        let ids: Vec<usize> = (self.feature_start..self.extractor.len()).collect();
        let vectors = acts.drain(self.feature_start + 1..).collect();
        FeatureStack::new(ids, vectors)
    }

    pub fn bottleneck(&self, x: &[f64]) -> Result<Vec<f64>, NetworkError> {
        self.check_width(x)?;
        Ok(self.trace(x).acts.pop().unwrap())
    }

    pub fn classify(&self, x: &[f64]) -> Result<Vec<f64>, NetworkError> {
        self.check_width(x)?;
        Ok(self.trace(x).probs)
    }

    /// Bottleneck features and class probabilities in one pass.
    pub fn features_and_probs(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>), NetworkError> {
        self.check_width(x)?;
        let mut t = self.trace(x);
        Ok((t.acts.pop().unwrap(), t.probs))
    }

    pub fn zero_grad(&self) -> ModelGrad {
        ModelGrad {
            extractor: self.extractor.iter().map(LayerGrad::zeros_like).collect(),
            head: LayerGrad::zeros_like(&self.head),
        }
    }

    pub fn param_count(&self) -> usize {
        self.extractor.iter().chain([&self.head]).map(DenseLayer::param_count).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        flatten_layers(self.extractor.iter().chain([&self.head]))
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<(), NetworkError> {
        unflatten_layers(self.extractor.iter_mut().chain([&mut self.head]), flat)
    }

    pub fn save(&self, path: &Path) -> Result<(), NetworkError> {
        let extra = (self.feature_start as u32).to_le_bytes().to_vec();
        let layers: Vec<&DenseLayer> = self.extractor.iter().chain([&self.head]).collect();
        write_checkpoint(path, CheckpointKind::Model, self.seed, &layers, &extra)
    }

    pub fn load(path: &Path) -> Result<Self, NetworkError> {
        let ck = read_checkpoint(path, CheckpointKind::Model)?;
        let feature_start = u32::from_le_bytes(
            ck.extra.as_slice().try_into().map_err(|_| NetworkError::Checkpoint("bad model header".into()))?,
        ) as usize;
        let mut layers = ck.layers;
        let head = layers.pop().ok_or_else(|| NetworkError::Checkpoint("no layers".into()))?;
        let mut model = Self::from_layers(layers, head, feature_start)?;
        model.seed = ck.seed;
        Ok(model)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrad {
    pub extractor: Vec<LayerGrad>,
    pub head: LayerGrad,
}

impl ModelGrad {
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for g in self.extractor.iter().chain([&self.head]) {
            g.flatten_into(&mut out);
        }
        out
    }
}

/// What the discriminator sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Condition {
    /// Flattened `f ⊗ p`.
    #[default]
    Product,
    /// Bottleneck features alone.
    FeaturesOnly,
}

impl Condition {
    pub fn input_width(self, bottleneck: usize, classes: usize) -> usize {
        match self {
            Condition::Product => bottleneck * classes,
            Condition::FeaturesOnly => bottleneck,
        }
    }

    pub fn apply(self, f: &[f64], p: &[f64]) -> Vec<f64> {
        match self {
            Condition::Product => outer_product(f, p),
            Condition::FeaturesOnly => f.to_vec(),
        }
    }

    fn code(self) -> u8 {
        match self {
            Condition::Product => 0,
            Condition::FeaturesOnly => 1,
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Condition::Product => "product",
            Condition::FeaturesOnly => "features_only",
        })
    }
}

impl std::str::FromStr for Condition {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "product" => Ok(Condition::Product),
            "features_only" => Ok(Condition::FeaturesOnly),
            other => Err(format!("unknown condition {other:?}")),
        }
    }
}

/// Three dense layers `in -> h -> h -> 1`, rectifier + dropout on the
/// hidden layers, sigmoid output.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    pub layers: [DenseLayer; 3],
    pub dropout: f64,
    pub condition: Condition,
    pub seed: u64,
}

struct DiscTrace {
    /// Input, then the two hidden activations after dropout.
    acts: [Vec<f64>; 3],
    /// Dropout scale factors (0 or 1/(1-p)) per hidden unit; empty in eval mode.
    masks: [Vec<f64>; 2],
    logit: f64,
}

impl Discriminator {
    pub fn new(
        input: usize,
        hidden: usize,
        dropout: f64,
        condition: Condition,
        seed: u64,
        rng: &mut Rng,
    ) -> Result<Self, NetworkError> {
        if input == 0 || hidden == 0 {
            return Err(NetworkError::Architecture("discriminator widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(NetworkError::Architecture("dropout rate must lie in [0, 1)".into()));
        }
        let layers = [
            DenseLayer::glorot(input, hidden, Activation::Relu, rng),
            DenseLayer::glorot(hidden, hidden, Activation::Relu, rng),
            DenseLayer::glorot(hidden, 1, Activation::Identity, rng),
        ];
        Ok(Self { layers, dropout, condition, seed })
    }

    pub fn for_model(
        model: &AdaptationModel,
        hidden: usize,
        dropout: f64,
        condition: Condition,
        seed: u64,
        rng: &mut Rng,
    ) -> Result<Self, NetworkError> {
        let input = condition.input_width(model.bottleneck_width(), model.classes());
        Self::new(input, hidden, dropout, condition, seed, rng)
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(DenseLayer::is_finite)
    }

    fn trace(&self, v: &[f64], mut dropout: Option<&mut Rng>) -> DiscTrace {
        let mut acts: [Vec<f64>; 3] = [v.to_vec(), Vec::new(), Vec::new()];
        let mut masks: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
        for k in 0..2 {
            let mut h = self.layers[k].forward(&acts[k]);
            if let Some(rng) = dropout.as_deref_mut() {
                let keep = 1.0 / (1.0 - self.dropout);
                let mask: Vec<f64> =
                    (0..h.len()).map(|_| if rng.random::<f64>() < self.dropout { 0.0 } else { keep }).collect();
                h.iter_mut().zip(&mask).for_each(|(a, m)| *a *= m);
                masks[k] = mask;
            }
            acts[k + 1] = h;
        }
        let logit = self.layers[2].forward(&acts[2])[0];
        DiscTrace { acts, masks, logit }
    }

    /// Probability that `v` came from the source side. Passing a generator
    /// turns on dropout (training mode).
    pub fn discriminate(&self, v: &[f64], dropout: Option<&mut Rng>) -> Result<f64, NetworkError> {
        if v.len() != self.input_width() {
            return Err(NetworkError::WidthMismatch { expected: self.input_width(), got: v.len() });
        }
        Ok(sigmoid(self.trace(v, dropout).logit))
    }

    pub fn zero_grad(&self) -> DiscGrad {
        DiscGrad { layers: self.layers.iter().map(LayerGrad::zeros_like).collect() }
    }

    pub fn params(&self) -> Vec<f64> {
        flatten_layers(self.layers.iter())
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<(), NetworkError> {
        unflatten_layers(self.layers.iter_mut(), flat)
    }

    pub fn save(&self, path: &Path) -> Result<(), NetworkError> {
        let mut extra = self.dropout.to_le_bytes().to_vec();
        extra.push(self.condition.code());
        write_checkpoint(path, CheckpointKind::Discriminator, self.seed, &self.layers.iter().collect::<Vec<_>>(), &extra)
    }

    pub fn load(path: &Path) -> Result<Self, NetworkError> {
        let ck = read_checkpoint(path, CheckpointKind::Discriminator)?;
        let bad = || NetworkError::Checkpoint("bad discriminator header".into());
        if ck.extra.len() != 9 {
            return Err(bad());
        }
        let dropout = f64::from_le_bytes(ck.extra[..8].try_into().unwrap());
        let condition = match ck.extra[8] {
            0 => Condition::Product,
            1 => Condition::FeaturesOnly,
            _ => return Err(bad()),
        };
        let layers: [DenseLayer; 3] = ck.layers.try_into().map_err(|_| bad())?;
        if layers[0].outputs != layers[1].inputs || layers[1].outputs != layers[2].inputs || layers[2].outputs != 1 {
            return Err(bad());
        }
        Ok(Self { layers, dropout, condition, seed: ck.seed })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscGrad {
    pub layers: Vec<LayerGrad>,
}

impl DiscGrad {
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.layers.iter().for_each(|g| g.flatten_into(&mut out));
        out
    }
}

pub fn sigmoid(z: f64) -> f64 {
    let s = if z >= 0.0 { 1.0 / (1.0 + (-z).exp()) } else { z.exp() / (1.0 + z.exp()) };
    s.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

/// `log(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Flattened outer product, `out[i * p.len() + j] = f[i] * p[j]`.
pub fn outer_product(f: &[f64], p: &[f64]) -> Vec<f64> {
    f.iter().flat_map(|fi| p.iter().map(move |pj| fi * pj)).collect()
}

/// Backward pass of the gradient reversal layer.
pub fn grl_backward(upstream: &[f64], lambda: f64) -> Vec<f64> {
    upstream.iter().map(|g| -lambda * g).collect()
}

/// Side of the domain classifier a row is labeled with. Source-side rows
/// have target value 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DomainSide {
    Source,
    Target,
}

impl DomainSide {
    fn target_value(self) -> f64 {
        match self {
            DomainSide::Source => 1.0,
            DomainSide::Target => 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BatchRow<'a> {
    pub x: &'a [f64],
    /// Class label for the cross-entropy term.
    pub class: Option<usize>,
    /// Domain label for the adversarial term.
    pub side: Option<DomainSide>,
}

/// How the domain gradient reaches the generator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Coupling {
    /// Gradient reversal with coefficient lambda.
    Reversed(f64),
    /// Plain gradient of the composite loss; only for checking.
    PassThrough,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossSpec {
    pub classification_weight: f64,
    pub domain_weight: f64,
    pub coupling: Coupling,
}

impl LossSpec {
    pub fn classification_only() -> Self {
        Self { classification_weight: 1.0, domain_weight: 0.0, coupling: Coupling::Reversed(0.0) }
    }

    pub fn adversarial(lambda: f64) -> Self {
        Self { classification_weight: 1.0, domain_weight: 1.0, coupling: Coupling::Reversed(lambda) }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub model: ModelGrad,
    pub disc: Option<DiscGrad>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    /// Mean cross-entropy over rows carrying a class label.
    pub classification: f64,
    /// Mean binary cross-entropy of the discriminator over rows carrying a side.
    pub domain: f64,
    pub disc_correct_source: usize,
    pub disc_count_source: usize,
    pub disc_correct_target: usize,
    pub disc_count_target: usize,
}

impl LossBreakdown {
    pub fn total(&self, spec: &LossSpec) -> f64 {
        spec.classification_weight * self.classification + spec.domain_weight * self.domain
    }

    /// Mean of per-side accuracies, so a constant guess scores 0.5.
    pub fn disc_balanced_accuracy(&self) -> f64 {
        let side = |c: usize, n: usize| if n == 0 { 0.5 } else { c as f64 / n as f64 };
        0.5 * (side(self.disc_correct_source, self.disc_count_source)
            + side(self.disc_correct_target, self.disc_count_target))
    }
}

/// Composite loss value without gradients. Dropout is off.
pub fn composite_loss(
    model: &AdaptationModel,
    disc: Option<&Discriminator>,
    batch: &[BatchRow<'_>],
    spec: &LossSpec,
) -> Result<LossBreakdown, NetworkError> {
    let (_, loss) = backprop(model, disc, batch, spec, None)?;
    Ok(loss)
}

/// Exact gradients of
/// `wc * mean CE(classified rows) + wd * mean BCE(D(cond(f, p)), side)`.
///
/// Discriminator parameters get the plain gradient. Generator parameters get
/// the classification gradient plus the domain gradient routed through
/// [`grl_backward`] (or unchanged under [`Coupling::PassThrough`]). Passing a
/// generator enables discriminator dropout.
pub fn backprop(
    model: &AdaptationModel,
    disc: Option<&Discriminator>,
    batch: &[BatchRow<'_>],
    spec: &LossSpec,
    mut dropout: Option<&mut Rng>,
) -> Result<(Gradients, LossBreakdown), NetworkError> {
    if batch.is_empty() {
        return Err(NetworkError::EmptyBatch);
    }
    let classes = model.classes();
    let n_cls = batch.iter().filter(|r| r.class.is_some()).count();
    let n_dom = batch.iter().filter(|r| r.side.is_some()).count();
    let use_domain = n_dom > 0 && spec.domain_weight != 0.0;
    if n_dom > 0 && disc.is_none() {
        return Err(NetworkError::MissingDiscriminator);
    }

    let mut grads = model.zero_grad();
    let mut disc_grads = disc.map(Discriminator::zero_grad);
    let mut loss = LossBreakdown::default();
    let cls_scale = if n_cls > 0 { spec.classification_weight / n_cls as f64 } else { 0.0 };
    let dom_scale = if n_dom > 0 { spec.domain_weight / n_dom as f64 } else { 0.0 };

    for row in batch {
        model.check_width(row.x)?;
        let t = model.trace(row.x);
        let f = t.acts.last().unwrap();
        let p = &t.probs;
        let mut grad_logits = vec![0.0; classes];
        let mut grad_f = vec![0.0; f.len()];

        if let Some(y) = row.class {
            if y >= classes {
                return Err(NetworkError::ClassOutOfRange { class: y, classes });
            }
            loss.classification -= p[y].clamp(f64::MIN_POSITIVE, 1.0).ln();
            for (k, g) in grad_logits.iter_mut().enumerate() {
                let onehot = if k == y { 1.0 } else { 0.0 };
                *g += cls_scale * (p[k] - onehot);
            }
        }

        if let (Some(side), Some(d)) = (row.side, disc) {
            let v = d.condition.apply(f, p);
            if v.len() != d.input_width() {
                return Err(NetworkError::WidthMismatch { expected: d.input_width(), got: v.len() });
            }
            let dt = d.trace(&v, dropout.as_deref_mut());
            let target = side.target_value();
            loss.domain += if side == DomainSide::Source { softplus(-dt.logit) } else { softplus(dt.logit) };
            let predicted_source = dt.logit > 0.0;
            match side {
                DomainSide::Source => {
                    loss.disc_count_source += 1;
                    loss.disc_correct_source += predicted_source as usize;
                }
                DomainSide::Target => {
                    loss.disc_count_target += 1;
                    loss.disc_correct_target += !predicted_source as usize;
                }
            }

            if use_domain {
                let dg = disc_grads.as_mut().unwrap();
                let grad_logit = dom_scale * (sigmoid_unclamped(dt.logit) - target);
                let mut g = d.layers[2].backward(&dt.acts[2], &[grad_logit], &mut dg.layers[2]);
                for k in (0..2).rev() {
                    if !dt.masks[k].is_empty() {
                        g.iter_mut().zip(&dt.masks[k]).for_each(|(gi, m)| *gi *= m);
                    }
                    let layer = &d.layers[k];
                    for (gi, a) in g.iter_mut().zip(&dt.acts[k + 1]) {
                        *gi *= layer.activation.derivative_at_output(*a);
                    }
                    g = layer.backward(&dt.acts[k], &g, &mut dg.layers[k]);
                }
                let g_v = match spec.coupling {
                    Coupling::Reversed(lambda) => grl_backward(&g, lambda),
                    Coupling::PassThrough => g,
                };
                match d.condition {
                    Condition::Product => {
                        let mut grad_p = vec![0.0; classes];
                        for (i, fi) in f.iter().enumerate() {
                            for j in 0..classes {
                                let gij = g_v[i * classes + j];
                                grad_f[i] += gij * p[j];
                                grad_p[j] += gij * fi;
                            }
                        }
                        let dot: f64 = p.iter().zip(&grad_p).map(|(a, b)| a * b).sum();
                        for k in 0..classes {
                            grad_logits[k] += p[k] * (grad_p[k] - dot);
                        }
                    }
                    Condition::FeaturesOnly => grad_f.iter_mut().zip(&g_v).for_each(|(a, b)| *a += b),
                }
            }
        }

        let from_head = model.head.backward(f, &grad_logits, &mut grads.head);
        grad_f.iter_mut().zip(&from_head).for_each(|(a, b)| *a += b);
        let mut g = grad_f;
        for k in (0..model.extractor.len()).rev() {
            let layer = &model.extractor[k];
            for (gi, a) in g.iter_mut().zip(&t.acts[k + 1]) {
                *gi *= layer.activation.derivative_at_output(*a);
            }
            g = layer.backward(&t.acts[k], &g, &mut grads.extractor[k]);
        }
    }

    if n_cls > 0 {
        loss.classification /= n_cls as f64;
    }
    if n_dom > 0 {
        loss.domain /= n_dom as f64;
    }
    if !loss.classification.is_finite() {
        return Err(NetworkError::NonFiniteLoss { term: "classification" });
    }
    if !loss.domain.is_finite() {
        return Err(NetworkError::NonFiniteLoss { term: "domain" });
    }
    Ok((Gradients { model: grads, disc: disc_grads }, loss))
}

fn sigmoid_unclamped(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        z.exp() / (1.0 + z.exp())
    }
}

fn flatten_layers<'a>(layers: impl Iterator<Item = &'a DenseLayer>) -> Vec<f64> {
    let mut out = Vec::new();
    for l in layers {
        out.extend_from_slice(&l.weights);
        out.extend_from_slice(&l.bias);
    }
    out
}

fn unflatten_layers<'a>(layers: impl Iterator<Item = &'a mut DenseLayer>, flat: &[f64]) -> Result<(), NetworkError> {
    let mut rest = flat;
    for l in layers {
        let (w, tail) = split_checked(rest, l.weights.len())?;
        let (b, tail) = split_checked(tail, l.bias.len())?;
        l.weights.copy_from_slice(w);
        l.bias.copy_from_slice(b);
        rest = tail;
    }
    if !rest.is_empty() {
        return Err(NetworkError::Checkpoint(format!("{} trailing parameters", rest.len())));
    }
    Ok(())
}

fn split_checked(s: &[f64], n: usize) -> Result<(&[f64], &[f64]), NetworkError> {
    if s.len() < n {
        return Err(NetworkError::Checkpoint("parameter array too short".into()));
    }
    Ok(s.split_at(n))
}

// Checkpoint layout, all integers little-endian:
//   magic "MJKDNET\0" | version u32 | kind u8 | seed u64 | layer count u32
//   | per layer: inputs u32, outputs u32, activation u8
//   | extra length u32 | extra bytes | param count u64 | params f64...
const MAGIC: &[u8; 8] = b"MJKDNET\0";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum CheckpointKind {
    Model = 0,
    Discriminator = 1,
}

struct Checkpoint {
    seed: u64,
    layers: Vec<DenseLayer>,
    extra: Vec<u8>,
}

fn write_checkpoint(
    path: &Path,
    kind: CheckpointKind,
    seed: u64,
    layers: &[&DenseLayer],
    extra: &[u8],
) -> Result<(), NetworkError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(kind as u8);
    buf.extend_from_slice(&seed.to_le_bytes());
    buf.extend_from_slice(&(layers.len() as u32).to_le_bytes());
    for l in layers {
        buf.extend_from_slice(&(l.inputs as u32).to_le_bytes());
        buf.extend_from_slice(&(l.outputs as u32).to_le_bytes());
        buf.push(l.activation.code());
    }
    buf.extend_from_slice(&(extra.len() as u32).to_le_bytes());
    buf.extend_from_slice(extra);
    let params = flatten_layers(layers.iter().copied());
    buf.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for p in params {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| NetworkError::Checkpoint(format!("{}: {e}", path.display())))
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], NetworkError> {
        if self.bytes.len() < n {
            return Err(NetworkError::Checkpoint("truncated file".into()));
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Ok(head)
    }

    fn u8(&mut self) -> Result<u8, NetworkError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, NetworkError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, NetworkError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, NetworkError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn read_checkpoint(path: &Path, expected: CheckpointKind) -> Result<Checkpoint, NetworkError> {
    let bytes = fs::read(path).map_err(|e| NetworkError::Checkpoint(format!("{}: {e}", path.display())))?;
    let mut r = Reader { bytes: &bytes };
    if r.take(8)? != MAGIC {
        return Err(NetworkError::Checkpoint("not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(NetworkError::Checkpoint(format!("unsupported version {version}")));
    }
    if r.u8()? != expected as u8 {
        return Err(NetworkError::Checkpoint(format!("expected a {expected:?} checkpoint")));
    }
    let seed = r.u64()?;
    let count = r.u32()? as usize;
    let mut layers = Vec::with_capacity(count);
    for _ in 0..count {
        let inputs = r.u32()? as usize;
        let outputs = r.u32()? as usize;
        let activation =
            Activation::from_code(r.u8()?).ok_or_else(|| NetworkError::Checkpoint("unknown activation".into()))?;
        layers.push(DenseLayer::zeros(inputs, outputs, activation));
    }
    let extra_len = r.u32()? as usize;
    let extra = r.take(extra_len)?.to_vec();
    let n = r.u64()? as usize;
    let expected_n: usize = layers.iter().map(DenseLayer::param_count).sum();
    if n != expected_n {
        return Err(NetworkError::Checkpoint(format!("expected {expected_n} parameters, header says {n}")));
    }
    let params = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
    if !r.bytes.is_empty() {
        return Err(NetworkError::Checkpoint("trailing bytes".into()));
    }
    unflatten_layers(layers.iter_mut(), &params)?;
    Ok(Checkpoint { seed, layers, extra })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};
    use proptest::prelude::*;

    fn small_model(seed: u64) -> AdaptationModel {
        let shape = ModelShape { input: 4, hidden: vec![5], bottleneck: 4, classes: 3, feature_start: 0 };
        AdaptationModel::new(&shape, seed, &mut stream(seed, Stream::ModelInit)).unwrap()
    }

    // Plain matrix-product re-implementation used as the forward oracle.
    fn naive_dense(layer: &DenseLayer, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; layer.outputs];
        for o in 0..layer.outputs {
            let mut s = layer.bias[o];
            for i in 0..layer.inputs {
                s += layer.weights[o * layer.inputs + i] * x[i];
            }
            out[o] = if layer.activation == Activation::Relu && s < 0.0 { 0.0 } else { s };
        }
        out
    }

    #[test]
    fn zero_model_gives_zero_stack() {
        let model = AdaptationModel::from_layers(
            vec![DenseLayer::zeros(3, 4, Activation::Relu), DenseLayer::zeros(4, 2, Activation::Identity)],
            DenseLayer::zeros(2, 2, Activation::Identity),
            0,
        )
        .unwrap();
        let stack = model.forward_features(&[1.0, -2.0, 3.0]).unwrap();
        assert_eq!(stack.layer_ids(), &[0, 1]);
        assert!(stack.layers().flatten().all(|v| *v == 0.0));
    }

    #[test]
    fn identity_layer_stack_equals_input() {
        let mut layer = DenseLayer::zeros(3, 3, Activation::Identity);
        for i in 0..3 {
            layer.weights[i * 3 + i] = 1.0;
        }
        let model = AdaptationModel::from_layers(vec![layer], DenseLayer::zeros(3, 2, Activation::Identity), 0).unwrap();
        let x = [0.5, -1.25, 7.0];
        let stack = model.forward_features(&x).unwrap();
        assert_eq!(stack.depth(), 1);
        assert_eq!(stack.last(), &x);
    }

    #[test]
    fn forward_matches_naive_oracle() {
        let model = AdaptationModel::new(&ModelShape::desk_default(3, 4), 11, &mut stream(11, Stream::ModelInit)).unwrap();
        let x = [0.3, -1.7, 2.2];
        let stack = model.forward_features(&x).unwrap();
        let mut a = x.to_vec();
        for (k, layer) in model.extractor.iter().enumerate() {
            a = naive_dense(layer, &a);
            for (got, want) in stack.layer(k).iter().zip(&a) {
                assert!((got - want).abs() <= 1e-12);
            }
        }
        let logits = naive_dense(&model.head, &a);
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        for (p, l) in model.classify(&x).unwrap().iter().zip(&logits) {
            assert!((p - l.exp() / z).abs() <= 1e-12);
        }
    }

    #[test]
    fn feature_start_trims_stack() {
        let shape = ModelShape { feature_start: 1, ..ModelShape::desk_default(2, 3) };
        let model = AdaptationModel::new(&shape, 0, &mut stream(0, Stream::ModelInit)).unwrap();
        let stack = model.forward_features(&[1.0, 1.0]).unwrap();
        assert_eq!(stack.layer_ids(), &[1, 2]);
        assert_eq!(stack.layer(0).len(), 64);
        assert_eq!(stack.last().len(), 16);
    }

    #[test]
    fn width_mismatch_is_reported() {
        let model = small_model(0);
        assert_eq!(model.classify(&[1.0]), Err(NetworkError::WidthMismatch { expected: 4, got: 1 }));
    }

    #[test]
    fn softmax_edge_cases() {
        assert_eq!(softmax(&[0.0, 0.0, 0.0, 0.0]), vec![0.25; 4]);
        assert_eq!(softmax(&[1000.0, 0.0]), vec![1.0, 0.0]);
    }

    #[test]
    fn outer_product_examples() {
        let out = outer_product(&[1.0, 2.0], &[0.3, 0.7]);
        let want = [0.3, 0.7, 0.6, 1.4];
        for (a, b) in out.iter().zip(&want) {
            assert!((a - b).abs() < 1e-15);
        }
        let f = [1.5, -2.0, 4.0];
        let out = outer_product(&f, &[0.0, 1.0]);
        assert_eq!(out, vec![0.0, 1.5, 0.0, -2.0, 0.0, 4.0]);
    }

    #[test]
    fn grl_examples() {
        assert_eq!(grl_backward(&[1.0, -2.0], 0.5), vec![-0.5, 1.0]);
        assert!(grl_backward(&[1.0, -2.0], 0.0).iter().all(|v| *v == 0.0));
        assert_eq!(grl_backward(&[3.0, -0.25], 1.0), vec![-3.0, 0.25]);
    }

    #[test]
    fn zero_discriminator_outputs_half() {
        let d = Discriminator {
            layers: [
                DenseLayer::zeros(6, 4, Activation::Relu),
                DenseLayer::zeros(4, 4, Activation::Relu),
                DenseLayer::zeros(4, 1, Activation::Identity),
            ],
            dropout: 0.5,
            condition: Condition::Product,
            seed: 0,
        };
        assert_eq!(d.discriminate(&[1.0; 6], None).unwrap(), 0.5);
    }

    #[test]
    fn discriminator_dropout_is_reproducible_and_eval_is_deterministic() {
        let mut rng = stream(4, Stream::DiscriminatorInit);
        let d = Discriminator::new(6, 8, 0.5, Condition::Product, 4, &mut rng).unwrap();
        let v = [0.2, -0.4, 1.0, 0.0, 0.3, 0.9];
        let run = || {
            let mut r = stream(4, Stream::Dropout);
            (0..5).map(|_| d.discriminate(&v, Some(&mut r)).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
        assert_eq!(d.discriminate(&v, None).unwrap(), d.discriminate(&v, None).unwrap());
        let out = d.discriminate(&v, None).unwrap();
        assert!(out > 0.0 && out < 1.0);
        assert!(sigmoid(1e4) < 1.0 && sigmoid(-1e4) > 0.0);
    }

    fn fd_check(params: &mut dyn FnMut(Option<&[f64]>) -> (Vec<f64>, f64), analytic: &[f64], scale: f64) {
        let (base, _) = params(None);
        let h = 1e-5;
        for i in 0..base.len() {
            let mut p = base.clone();
            p[i] = base[i] + h;
            let (_, up) = params(Some(&p));
            p[i] = base[i] - h;
            let (_, down) = params(Some(&p));
            let numeric = scale * (up - down) / (2.0 * h);
            let a = analytic[i];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-7);
            assert!(rel < 1e-4 || (a - numeric).abs() < 1e-9, "param {i}: analytic {a} numeric {numeric}");
        }
        params(Some(&base));
    }

    fn rows(xs: &[Vec<f64>]) -> Vec<BatchRow<'_>> {
        xs.iter()
            .enumerate()
            .map(|(i, x)| BatchRow {
                x,
                class: if i % 3 != 2 { Some(i % 3) } else { None },
                side: Some(if i % 2 == 0 { DomainSide::Source } else { DomainSide::Target }),
            })
            .collect()
    }

    #[test]
    fn classification_gradients_match_finite_differences() {
        let model = small_model(1);
        let xs: Vec<Vec<f64>> = (0..6).map(|i| (0..4).map(|j| ((i * 4 + j) as f64 * 0.37).sin()).collect()).collect();
        let batch: Vec<BatchRow> = rows(&xs).into_iter().map(|r| BatchRow { side: None, ..r }).collect();
        let spec = LossSpec::classification_only();
        let (g, _) = backprop(&model, None, &batch, &spec, None).unwrap();
        let mut m = model.clone();
        fd_check(
            &mut |p| {
                if let Some(p) = p {
                    m.set_params(p).unwrap();
                }
                (m.params(), composite_loss(&m, None, &batch, &spec).unwrap().total(&spec))
            },
            &g.model.flatten(),
            1.0,
        );
    }

    #[test]
    fn domain_path_gradients_match_finite_differences() {
        let model = small_model(2);
        let disc = Discriminator::for_model(&model, 6, 0.5, Condition::Product, 2, &mut stream(2, Stream::DiscriminatorInit))
            .unwrap();
        let xs: Vec<Vec<f64>> = (0..6).map(|i| (0..4).map(|j| ((i * 5 + j) as f64 * 0.53).cos()).collect()).collect();
        let batch = rows(&xs);
        let lambda = 0.7;
        let spec = LossSpec { classification_weight: 1.0, domain_weight: 1.0, coupling: Coupling::PassThrough };
        let (plain, _) = backprop(&model, Some(&disc), &batch, &spec, None).unwrap();

        let mut m = model.clone();
        fd_check(
            &mut |p| {
                if let Some(p) = p {
                    m.set_params(p).unwrap();
                }
                (m.params(), composite_loss(&m, Some(&disc), &batch, &spec).unwrap().total(&spec))
            },
            &plain.model.flatten(),
            1.0,
        );
        let mut d = disc.clone();
        fd_check(
            &mut |p| {
                if let Some(p) = p {
                    d.set_params(p).unwrap();
                }
                (d.params(), composite_loss(&model, Some(&d), &batch, &spec).unwrap().total(&spec))
            },
            &plain.disc.as_ref().unwrap().flatten(),
            1.0,
        );

        // Domain-only, reversed: generator gradient is -lambda times the plain one.
        let dom_plain = LossSpec { classification_weight: 0.0, ..spec };
        let dom_rev = LossSpec { coupling: Coupling::Reversed(lambda), ..dom_plain };
        let (a, _) = backprop(&model, Some(&disc), &batch, &dom_plain, None).unwrap();
        let (b, _) = backprop(&model, Some(&disc), &batch, &dom_rev, None).unwrap();
        for (x, y) in a.model.flatten().iter().zip(b.model.flatten()) {
            assert!((y - (-lambda * x)).abs() <= 1e-15 * x.abs().max(1.0), "{y} vs {}", -lambda * x);
        }
        assert_eq!(a.disc, b.disc);
    }

    #[test]
    fn features_only_condition_gradients_match_finite_differences() {
        let model = small_model(3);
        let disc =
            Discriminator::for_model(&model, 5, 0.0, Condition::FeaturesOnly, 3, &mut stream(3, Stream::DiscriminatorInit))
                .unwrap();
        let xs: Vec<Vec<f64>> = (0..4).map(|i| (0..4).map(|j| ((i + 2 * j) as f64 * 0.41).sin()).collect()).collect();
        let batch = rows(&xs);
        let spec = LossSpec { classification_weight: 0.5, domain_weight: 2.0, coupling: Coupling::PassThrough };
        let (g, _) = backprop(&model, Some(&disc), &batch, &spec, None).unwrap();
        let mut m = model.clone();
        fd_check(
            &mut |p| {
                if let Some(p) = p {
                    m.set_params(p).unwrap();
                }
                (m.params(), composite_loss(&m, Some(&disc), &batch, &spec).unwrap().total(&spec))
            },
            &g.model.flatten(),
            1.0,
        );
    }

    #[test]
    fn zero_weights_give_zero_gradients() {
        let model = small_model(5);
        let disc = Discriminator::for_model(&model, 4, 0.5, Condition::Product, 5, &mut stream(5, Stream::DiscriminatorInit))
            .unwrap();
        let xs: Vec<Vec<f64>> = vec![vec![1.0, 2.0, 3.0, 4.0]; 3];
        let spec = LossSpec { classification_weight: 0.0, domain_weight: 0.0, coupling: Coupling::Reversed(1.0) };
        let (g, _) = backprop(&model, Some(&disc), &rows(&xs), &spec, None).unwrap();
        assert!(g.model.flatten().iter().chain(&g.disc.unwrap().flatten()).all(|v| *v == 0.0));
    }

    #[test]
    fn non_finite_loss_names_the_term() {
        let mut model = small_model(6);
        model.head.bias[0] = f64::NAN;
        let x = [0.0; 4];
        let batch = [BatchRow { x: &x, class: Some(0), side: None }];
        let err = backprop(&model, None, &batch, &LossSpec::classification_only(), None).unwrap_err();
        assert_eq!(err, NetworkError::NonFiniteLoss { term: "classification" });
    }

    #[test]
    fn uniform_prediction_loss_is_log_c() {
        let model = AdaptationModel::from_layers(
            vec![DenseLayer::zeros(2, 3, Activation::Identity)],
            DenseLayer::zeros(3, 5, Activation::Identity),
            0,
        )
        .unwrap();
        let x = [1.0, 2.0];
        let batch = [BatchRow { x: &x, class: Some(3), side: None }];
        let loss = composite_loss(&model, None, &batch, &LossSpec::classification_only()).unwrap();
        assert!((loss.classification - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn checkpoints_round_trip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let model = AdaptationModel::new(&ModelShape::desk_default(3, 4), 99, &mut stream(99, Stream::ModelInit)).unwrap();
        let path = dir.path().join("m.ckpt");
        model.save(&path).unwrap();
        assert_eq!(AdaptationModel::load(&path).unwrap(), model);

        let disc = Discriminator::for_model(&model, 32, 0.5, Condition::FeaturesOnly, 99, &mut stream(99, Stream::DiscriminatorInit))
            .unwrap();
        let dpath = dir.path().join("d.ckpt");
        disc.save(&dpath).unwrap();
        assert_eq!(Discriminator::load(&dpath).unwrap(), disc);
        assert!(AdaptationModel::load(&dpath).is_err());

        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        let tail = &bytes[bytes.len() - 8..];
        assert_eq!(f64::from_le_bytes(tail.try_into().unwrap()), *model.head.bias.last().unwrap());
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(AdaptationModel::load(&path).is_err());
    }

    proptest! {
        #[test]
        fn softmax_is_a_distribution(logits in prop::collection::vec(-500.0f64..500.0, 1..10)) {
            let p = softmax(&logits);
            prop_assert!(p.iter().all(|v| *v >= 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }

        #[test]
        fn outer_product_norm_and_bilinearity(
            f in prop::collection::vec(-10.0f64..10.0, 1..6),
            p in prop::collection::vec(-1.0f64..1.0, 4),
            q in prop::collection::vec(-1.0f64..1.0, 4),
            alpha in -3.0f64..3.0,
        ) {
            let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let fp = outer_product(&f, &p);
            prop_assert!((norm(&fp) - norm(&f) * norm(&p)).abs() <= 1e-12 * (1.0 + norm(&fp)));
            let af: Vec<f64> = f.iter().map(|x| alpha * x).collect();
            for (a, b) in outer_product(&af, &p).iter().zip(&fp) {
                prop_assert!((a - alpha * b).abs() <= 1e-12);
            }
            let pq: Vec<f64> = p.iter().zip(&q).map(|(a, b)| a + b).collect();
            let fq = outer_product(&f, &q);
            for ((s, a), b) in outer_product(&f, &pq).iter().zip(&fp).zip(&fq) {
                prop_assert!((s - (a + b)).abs() <= 1e-12);
            }
        }

        #[test]
        fn classify_always_normalized(x in prop::collection::vec(-50.0f64..50.0, 4), seed in 0u64..20) {
            let p = small_model(seed).classify(&x).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            prop_assert!(p.iter().all(|v| *v >= 0.0));
        }
    }
}
