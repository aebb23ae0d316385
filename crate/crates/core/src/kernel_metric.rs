//! Multi-bandwidth Gaussian kernels and the multi-layer joint kernelized
//! distance (MJKD).
//!
//! Each layer's kernel averages Gaussians over a set of bandwidths
//! `gamma0 * multiplier`. The joint kernel of two feature stacks is the
//! product of the per-layer kernels, and MJKD is the squared MMD between a
//! single target stack and the empirical distribution of one source class:
//!
//! ```text
//! d²(t, S_m) = K(t,t) + 1/n² ΣΣ K(s_i, s_k) − 2/n Σ K(t, s_i)
//! ```
//!
//! A [`CategoryBank`] precomputes the class self-similarity term so that
//! ranking a target costs one pass over the source stacks.

use thiserror::Error;

use crate::network::FeatureStack;

#[derive(Debug, Error, PartialEq)]
pub enum KernelError {
    #[error("bandwidth must be positive, got {0}")]
    NonPositiveBandwidth(f64),
    #[error("empty sample set")]
    EmptySet,
    #[error("class {0} has no source samples")]
    EmptyClass(usize),
    #[error("layer range mismatch: {left:?} vs {right:?}")]
    LayerMismatch { left: Vec<usize>, right: Vec<usize> },
    #[error("invalid kernel spec: {0}")]
    InvalidSpec(String),
    #[error("{what}: expected {expected}, got {got}")]
    Length { what: &'static str, expected: usize, got: usize },
}

/// How the per-layer base bandwidth is chosen.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BandwidthRule {
    /// Mean squared distance over all source/target cross pairs at that layer.
    MeanCrossPairSqDist,
    Fixed(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct KernelSpec {
    pub multipliers: Vec<f64>,
    pub base_rule: BandwidthRule,
    /// Guards degenerate bandwidths and the denominators of the relative distance.
    pub epsilon: f64,
}

impl Default for KernelSpec {
    fn default() -> Self {
        Self {
            multipliers: vec![1.0, 2.0, 4.0, 0.5, 0.25],
            base_rule: BandwidthRule::MeanCrossPairSqDist,
            epsilon: 1e-12,
        }
    }
}

impl KernelSpec {
    pub fn validate(&self) -> Result<(), KernelError> {
        if self.multipliers.is_empty() {
            return Err(KernelError::InvalidSpec("multipliers must be nonempty".into()));
        }
        if let Some(m) = self.multipliers.iter().find(|m| !(**m > 0.0 && m.is_finite())) {
            return Err(KernelError::InvalidSpec(format!("multiplier {m} is not positive")));
        }
        if !(self.epsilon > 0.0) {
            return Err(KernelError::InvalidSpec("epsilon must be positive".into()));
        }
        if let BandwidthRule::Fixed(g) = self.base_rule {
            if !(g > 0.0 && g.is_finite()) {
                return Err(KernelError::NonPositiveBandwidth(g));
            }
        }
        Ok(())
    }
}

pub fn squared_distance(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// `exp(-‖x − y‖² / gamma)`.
pub fn gaussian_kernel(x: &[f64], y: &[f64], gamma: f64) -> Result<f64, KernelError> {
    if !(gamma > 0.0) {
        return Err(KernelError::NonPositiveBandwidth(gamma));
    }
    Ok((-squared_distance(x, y) / gamma).exp())
}

/// Mean squared distance over all cross pairs, or `epsilon` if that is zero.
pub fn base_bandwidth<'a, 'b>(
    a: impl IntoIterator<Item = &'a [f64]>,
    b: impl IntoIterator<Item = &'b [f64]> + Clone,
    epsilon: f64,
) -> Result<f64, KernelError> {
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for x in a {
        for y in b.clone() {
            sum += squared_distance(x, y);
            pairs += 1;
        }
    }
    if pairs == 0 {
        return Err(KernelError::EmptySet);
    }
    let mean = sum / pairs as f64;
    Ok(if mean > 0.0 { mean } else { epsilon })
}

/// Average of Gaussians with bandwidths `gamma0 * multiplier`, evaluated
/// from a precomputed squared distance.
pub fn multi_kernel_sq(sq_dist: f64, gamma0: f64, multipliers: &[f64]) -> f64 {
    multipliers.iter().map(|m| (-sq_dist / (gamma0 * m)).exp()).sum::<f64>() / multipliers.len() as f64
}

pub fn multi_kernel(x: &[f64], y: &[f64], gamma0: f64, spec: &KernelSpec) -> f64 {
    multi_kernel_sq(squared_distance(x, y), gamma0, &spec.multipliers)
}

/// Per-layer base bandwidths, indexed by position in the feature stack.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerBandwidths {
    layer_ids: Vec<usize>,
    gamma0: Vec<f64>,
}

impl LayerBandwidths {
    pub fn new(layer_ids: Vec<usize>, gamma0: Vec<f64>) -> Result<Self, KernelError> {
        if layer_ids.len() != gamma0.len() {
            return Err(KernelError::Length { what: "bandwidths", expected: layer_ids.len(), got: gamma0.len() });
        }
        if let Some(g) = gamma0.iter().find(|g| !(**g > 0.0)) {
            return Err(KernelError::NonPositiveBandwidth(*g));
        }
        Ok(Self { layer_ids, gamma0 })
    }

    /// Bandwidths shared across classes: each layer's `gamma0` comes from all
    /// source stacks against all target stacks (or the fixed value).
    pub fn from_domains(
        source: &[FeatureStack],
        target: &[FeatureStack],
        spec: &KernelSpec,
    ) -> Result<Self, KernelError> {
        spec.validate()?;
        let first = source.first().or(target.first()).ok_or(KernelError::EmptySet)?;
        for s in source.iter().chain(target) {
            check_layers(first.layer_ids(), s.layer_ids())?;
        }
        let ids = first.layer_ids().to_vec();
        let gamma0 = match spec.base_rule {
            BandwidthRule::Fixed(g) => vec![g; ids.len()],
            BandwidthRule::MeanCrossPairSqDist => (0..ids.len())
                .map(|l| base_bandwidth(source.iter().map(|s| s.layer(l)), target.iter().map(|t| t.layer(l)), spec.epsilon))
                .collect::<Result<_, _>>()?,
        };
        Self::new(ids, gamma0)
    }

    pub fn layer_ids(&self) -> &[usize] {
        &self.layer_ids
    }

    pub fn values(&self) -> &[f64] {
        &self.gamma0
    }
}

fn check_layers(left: &[usize], right: &[usize]) -> Result<(), KernelError> {
    if left != right {
        return Err(KernelError::LayerMismatch { left: left.to_vec(), right: right.to_vec() });
    }
    Ok(())
}

/// Product over layers of the per-layer multi-bandwidth kernel.
pub fn joint_kernel(
    a: &FeatureStack,
    b: &FeatureStack,
    bandwidths: &LayerBandwidths,
    spec: &KernelSpec,
) -> Result<f64, KernelError> {
    check_layers(a.layer_ids(), b.layer_ids())?;
    check_layers(a.layer_ids(), bandwidths.layer_ids())?;
    Ok(joint_kernel_unchecked(a, b, &bandwidths.gamma0, &spec.multipliers))
}

fn joint_kernel_unchecked(a: &FeatureStack, b: &FeatureStack, gamma0: &[f64], multipliers: &[f64]) -> f64 {
    a.layers()
        .zip(b.layers())
        .zip(gamma0)
        .map(|((x, y), &g)| multi_kernel_sq(squared_distance(x, y), g, multipliers))
        .product()
}

/// Source feature stacks grouped by class, with each class's mean
/// self-similarity `1/n² ΣΣ K(s_i, s_k)` cached.
#[derive(Clone, Debug)]
pub struct CategoryBank {
    classes: Vec<Vec<FeatureStack>>,
    self_terms: Vec<f64>,
    bandwidths: LayerBandwidths,
    spec: KernelSpec,
}

impl CategoryBank {
    pub fn new(
        stacks: Vec<FeatureStack>,
        labels: &[usize],
        class_count: usize,
        bandwidths: LayerBandwidths,
        spec: KernelSpec,
    ) -> Result<Self, KernelError> {
        spec.validate()?;
        if stacks.len() != labels.len() {
            return Err(KernelError::Length { what: "labels", expected: stacks.len(), got: labels.len() });
        }
        let mut classes: Vec<Vec<FeatureStack>> = vec![Vec::new(); class_count];
        for (s, &l) in stacks.into_iter().zip(labels) {
            check_layers(bandwidths.layer_ids(), s.layer_ids())?;
            classes
                .get_mut(l)
                .ok_or(KernelError::Length { what: "class index", expected: class_count, got: l })?
                .push(s);
        }
        if let Some(empty) = classes.iter().position(Vec::is_empty) {
            return Err(KernelError::EmptyClass(empty));
        }
        let self_terms = classes.iter().map(|members| self_similarity(members, &bandwidths.gamma0, &spec.multipliers)).collect();
        Ok(Self { classes, self_terms, bandwidths, spec })
    }

    pub fn class_count(&self) -> usize {
        self.classes.len()
    }

    pub fn class_members(&self, class: usize) -> &[FeatureStack] {
        &self.classes[class]
    }

    pub fn bandwidths(&self) -> &LayerBandwidths {
        &self.bandwidths
    }

    pub fn spec(&self) -> &KernelSpec {
        &self.spec
    }

    /// MJKD before clamping; may be a hair below zero from rounding.
    pub fn mjkd_raw(&self, t: &FeatureStack, class: usize) -> Result<f64, KernelError> {
        let members = self.classes.get(class).ok_or(KernelError::EmptyClass(class))?;
        check_layers(self.bandwidths.layer_ids(), t.layer_ids())?;
        let g = &self.bandwidths.gamma0;
        let m = &self.spec.multipliers;
        let own = joint_kernel_unchecked(t, t, g, m);
        let cross: f64 = members.iter().map(|s| joint_kernel_unchecked(t, s, g, m)).sum();
        Ok(own + self.self_terms[class] - 2.0 * cross / members.len() as f64)
    }

    pub fn mjkd(&self, t: &FeatureStack, class: usize) -> Result<f64, KernelError> {
        Ok(self.mjkd_raw(t, class)?.max(0.0))
    }

    /// MJKD from `t` to every class.
    pub fn distances(&self, t: &FeatureStack) -> Result<Vec<f64>, KernelError> {
        (0..self.classes.len()).map(|m| self.mjkd(t, m)).collect()
    }

    pub fn relative_distance(&self, t: &FeatureStack, predicted: usize) -> Result<f64, KernelError> {
        let d = self.distances(t)?;
        relative_distance(&d, predicted, self.spec.epsilon)
    }
}

fn self_similarity(members: &[FeatureStack], gamma0: &[f64], multipliers: &[f64]) -> f64 {
    let n = members.len();
    // Symmetric: diagonal once, off-diagonal pairs twice.
    let mut sum = 0.0;
    for i in 0..n {
        sum += joint_kernel_unchecked(&members[i], &members[i], gamma0, multipliers);
        for k in i + 1..n {
            sum += 2.0 * joint_kernel_unchecked(&members[i], &members[k], gamma0, multipliers);
        }
    }
    sum / (n * n) as f64
}

/// `Σ_m' d²(t, S_m) / (d²(t, S_m') + eps)` given the distances from one
/// target to every class. Smaller means a more trustworthy pseudo-label.
pub fn relative_distance(distances: &[f64], predicted: usize, epsilon: f64) -> Result<f64, KernelError> {
    let own = *distances
        .get(predicted)
        .ok_or(KernelError::Length { what: "predicted class", expected: distances.len(), got: predicted })?;
    Ok(distances.iter().map(|d| own / (d + epsilon)).sum())
}
