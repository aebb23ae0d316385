//! Numeric checks of the adversarial objective on discrete distributions.
//!
//! For a fixed generator the best discriminator is `gs / (gs + gt)` cell by
//! cell, and at that discriminator the value function equals
//! `-log 4 + 2 * JSD(gs || gt)`. These hold exactly for discrete joints, so
//! they are checked there; [`empirical_theory_check`] bins real network
//! outputs into such a joint and reports how close a fitted discriminator
//! gets. Natural logarithms throughout.

use std::fmt::Write as _;

use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::network::{AdaptationModel, Discriminator, NetworkError};
use crate::rng::{self, Stream};
use crate::selection::{argmax, SplitUpdate};
use crate::trainer::discriminator_accuracy;

#[derive(Debug, Error, PartialEq)]
pub enum DiagnosticsError {
    #[error("grid mismatch: {left:?} vs {right:?}")]
    GridMismatch { left: (usize, usize), right: (usize, usize) },
    #[error("invalid joint: {0}")]
    InvalidJoint(String),
    #[error("log of zero at cell {0} with positive mass")]
    LogOfZero(usize),
    #[error("discriminator has {got} cells, expected {expected}")]
    Length { expected: usize, got: usize },
    #[error("no samples on the {0} side")]
    NoSamples(&'static str),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

/// Probability mass over `bins x classes` cells, row-major by bin.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteJoint {
    mass: Vec<f64>,
    bins: usize,
    classes: usize,
}

impl DiscreteJoint {
    pub fn new(mass: Vec<f64>, bins: usize, classes: usize) -> Result<Self, DiagnosticsError> {
        if bins == 0 || classes == 0 || mass.len() != bins * classes {
            return Err(DiagnosticsError::InvalidJoint(format!(
                "{} masses for {bins} bins x {classes} classes",
                mass.len()
            )));
        }
        if mass.iter().any(|m| !(*m >= 0.0) || !m.is_finite()) {
            return Err(DiagnosticsError::InvalidJoint("masses must be finite and non-negative".into()));
        }
        let total: f64 = mass.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(DiagnosticsError::InvalidJoint(format!("masses sum to {total}")));
        }
        Ok(Self { mass, bins, classes })
    }

    /// Normalizes nonnegative weights (e.g. counts).
    pub fn from_weights(weights: &[f64], bins: usize, classes: usize) -> Result<Self, DiagnosticsError> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(DiagnosticsError::InvalidJoint("weights sum to zero".into()));
        }
        Self::new(weights.iter().map(|w| w / total).collect(), bins, classes)
    }

    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.bins, self.classes)
    }

    pub fn cells(&self) -> usize {
        self.mass.len()
    }
}

fn check_grid(gs: &DiscreteJoint, gt: &DiscreteJoint) -> Result<(), DiagnosticsError> {
    if gs.grid() != gt.grid() {
        return Err(DiagnosticsError::GridMismatch { left: gs.grid(), right: gt.grid() });
    }
    Ok(())
}

/// `gs / (gs + gt)` per cell; 0.5 where both masses vanish.
pub fn optimal_discriminator(gs: &DiscreteJoint, gt: &DiscreteJoint) -> Result<Vec<f64>, DiagnosticsError> {
    check_grid(gs, gt)?;
    Ok(gs
        .mass
        .iter()
        .zip(&gt.mass)
        .map(|(s, t)| if s + t == 0.0 { 0.5 } else { s / (s + t) })
        .collect())
}

/// `Σ gs log d + Σ gt log(1 - d)`, with zero-mass terms contributing 0.
pub fn value_function(gs: &DiscreteJoint, gt: &DiscreteJoint, d: &[f64]) -> Result<f64, DiagnosticsError> {
    check_grid(gs, gt)?;
    if d.len() != gs.cells() {
        return Err(DiagnosticsError::Length { expected: gs.cells(), got: d.len() });
    }
    let mut v = 0.0;
    for (i, ((s, t), di)) in gs.mass.iter().zip(&gt.mass).zip(d).enumerate() {
        if *s > 0.0 {
            if *di <= 0.0 {
                return Err(DiagnosticsError::LogOfZero(i));
            }
            v += s * di.ln();
        }
        if *t > 0.0 {
            if *di >= 1.0 {
                return Err(DiagnosticsError::LogOfZero(i));
            }
            v += t * (1.0 - di).ln();
        }
    }
    Ok(v)
}

/// Jensen-Shannon divergence with `0 log 0 = 0`.
pub fn jsd(gs: &DiscreteJoint, gt: &DiscreteJoint) -> Result<f64, DiagnosticsError> {
    check_grid(gs, gt)?;
    let mut total = 0.0;
    for (s, t) in gs.mass.iter().zip(&gt.mass) {
        let m = 0.5 * (s + t);
        if *s > 0.0 {
            total += 0.5 * s * (s / m).ln();
        }
        if *t > 0.0 {
            total += 0.5 * t * (t / m).ln();
        }
    }
    Ok(total.max(0.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TheoryCheckConfig {
    /// Cells per axis of the 2-D grid over projected outputs.
    pub grid: usize,
    /// Occupied cells with fewer samples than this are flagged unreliable.
    pub min_samples_per_bin: usize,
    /// Maximum samples drawn from each side.
    pub sample_budget: usize,
    pub fit_steps: usize,
    pub fit_rate: f64,
    pub seed: u64,
}

impl Default for TheoryCheckConfig {
    fn default() -> Self {
        Self { grid: 6, min_samples_per_bin: 5, sample_budget: 2000, fit_steps: 5000, fit_rate: 1.0, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TheoryReport {
    pub source_samples: usize,
    pub target_samples: usize,
    pub cells: usize,
    pub occupied_cells: usize,
    pub unreliable_cells: usize,
    pub jsd: f64,
    /// Value function at the closed-form optimal discriminator.
    pub optimal_value: f64,
    /// `-log 4 + 2 * jsd`.
    pub jsd_value: f64,
    /// Value function reached by the fitted tabular discriminator.
    pub fitted_value: f64,
    /// Largest `|fitted - optimal|` over occupied cells.
    pub max_deviation: f64,
    /// Balanced accuracy of the trained network discriminator, if one was given.
    pub network_disc_accuracy: Option<f64>,
}

impl TheoryReport {
    pub fn value_gap(&self) -> f64 {
        self.jsd_value - self.fitted_value
    }

    pub fn identity_residual(&self) -> f64 {
        (self.optimal_value - self.jsd_value).abs()
    }

    pub fn is_finite(&self) -> bool {
        [self.jsd, self.optimal_value, self.jsd_value, self.fitted_value, self.max_deviation]
            .iter()
            .chain(self.network_disc_accuracy.as_ref())
            .all(|v| v.is_finite())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "source_samples={}", self.source_samples).unwrap();
        writeln!(out, "target_samples={}", self.target_samples).unwrap();
        writeln!(out, "cells={}", self.cells).unwrap();
        writeln!(out, "occupied_cells={}", self.occupied_cells).unwrap();
        writeln!(out, "unreliable_cells={}", self.unreliable_cells).unwrap();
        writeln!(out, "jsd={}", self.jsd).unwrap();
        writeln!(out, "optimal_value={}", self.optimal_value).unwrap();
        writeln!(out, "jsd_value={}", self.jsd_value).unwrap();
        writeln!(out, "identity_residual={}", self.identity_residual()).unwrap();
        writeln!(out, "fitted_value={}", self.fitted_value).unwrap();
        writeln!(out, "value_gap={}", self.value_gap()).unwrap();
        writeln!(out, "max_deviation={}", self.max_deviation).unwrap();
        if let Some(a) = self.network_disc_accuracy {
            writeln!(out, "network_disc_accuracy={a}").unwrap();
        }
        out
    }
}

/// A conditioned output vector and the argmax class it came with.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionedSample {
    pub vector: Vec<f64>,
    pub class: usize,
}

/// Bins both sample sets on a shared grid (random 2-D projection, then
/// `grid x grid` cells, crossed with the class) and fits a per-cell logistic
/// discriminator against the binned joints.
pub fn check_samples(
    source: &[ConditionedSample],
    target: &[ConditionedSample],
    classes: usize,
    config: &TheoryCheckConfig,
) -> Result<TheoryReport, DiagnosticsError> {
    if source.is_empty() {
        return Err(DiagnosticsError::NoSamples("source"));
    }
    if target.is_empty() {
        return Err(DiagnosticsError::NoSamples("target"));
    }
    let width = source[0].vector.len();
    let mut rng = rng::stream(config.seed, Stream::Diagnostics);
    let projection: Vec<f64> = (0..2 * width).map(|_| StandardNormal.sample(&mut rng)).collect();
    let project = |v: &[f64]| -> [f64; 2] {
        let (a, b) = projection.split_at(width);
        [a.iter().zip(v).map(|(p, x)| p * x).sum(), b.iter().zip(v).map(|(p, x)| p * x).sum()]
    };
    let src: Vec<([f64; 2], usize)> = source.iter().map(|s| (project(&s.vector), s.class)).collect();
    let tgt: Vec<([f64; 2], usize)> = target.iter().map(|s| (project(&s.vector), s.class)).collect();

    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for (p, _) in src.iter().chain(&tgt) {
        for a in 0..2 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let g = config.grid.max(1);
    let bin = |p: &[f64; 2]| -> usize {
        let axis = |a: usize| {
            let span = hi[a] - lo[a];
            if span > 0.0 {
                (((p[a] - lo[a]) / span * g as f64) as usize).min(g - 1)
            } else {
                0
            }
        };
        axis(0) * g + axis(1)
    };
    let bins = g * g;
    let mut cs = vec![0.0; bins * classes];
    let mut ct = vec![0.0; bins * classes];
    for (p, c) in &src {
        cs[bin(p) * classes + c] += 1.0;
    }
    for (p, c) in &tgt {
        ct[bin(p) * classes + c] += 1.0;
    }
    let occupied = cs.iter().zip(&ct).filter(|(a, b)| **a + **b > 0.0).count();
    let unreliable = cs
        .iter()
        .zip(&ct)
        .filter(|(a, b)| {
            let n = **a + **b;
            n > 0.0 && n < config.min_samples_per_bin as f64
        })
        .count();

    let gs = DiscreteJoint::from_weights(&cs, bins, classes)?;
    let gt = DiscreteJoint::from_weights(&ct, bins, classes)?;
    let optimal = optimal_discriminator(&gs, &gt)?;
    let fitted = fit_tabular_discriminator(&gs, &gt, config.fit_steps, config.fit_rate);
    let j = jsd(&gs, &gt)?;
    let max_deviation = fitted
        .iter()
        .zip(&optimal)
        .zip(gs.mass.iter().zip(&gt.mass))
        .filter(|(_, (s, t))| **s + **t > 0.0)
        .map(|((f, o), _)| (f - o).abs())
        .fold(0.0, f64::max);
    Ok(TheoryReport {
        source_samples: source.len(),
        target_samples: target.len(),
        cells: bins * classes,
        occupied_cells: occupied,
        unreliable_cells: unreliable,
        jsd: j,
        optimal_value: value_function(&gs, &gt, &optimal)?,
        jsd_value: -(4f64.ln()) + 2.0 * j,
        fitted_value: value_function(&gs, &gt, &fitted)?,
        max_deviation,
        network_disc_accuracy: None,
    })
}

/// Per-cell logistic parameters fitted by preconditioned gradient ascent on
/// the value function: `theta += rate * (gs / (gs + gt) - sigmoid(theta))`.
fn fit_tabular_discriminator(gs: &DiscreteJoint, gt: &DiscreteJoint, steps: usize, rate: f64) -> Vec<f64> {
    gs.mass
        .iter()
        .zip(&gt.mass)
        .map(|(s, t)| {
            if s + t == 0.0 {
                return 0.5;
            }
            let target = s / (s + t);
            let mut theta = 0.0f64;
            for _ in 0..steps {
                theta += rate * (target - crate::network::sigmoid(theta));
            }
            crate::network::sigmoid(theta)
        })
        .collect()
}

/// Collects conditioned outputs (`f ⊗ p` or `f`, per the discriminator's
/// mode) for the source side (`S ∪ T^p`) and the remaining targets, bins
/// them and reports the fit.
pub fn empirical_theory_check(
    model: &AdaptationModel,
    disc: &Discriminator,
    split: &SplitUpdate,
    config: &TheoryCheckConfig,
) -> Result<TheoryReport, DiagnosticsError> {
    let sample = |x: &[f64]| -> Result<ConditionedSample, NetworkError> {
        let (f, p) = model.features_and_probs(x)?;
        Ok(ConditionedSample { vector: disc.condition.apply(&f, &p), class: argmax(&p) })
    };
    let source = split
        .provenance()
        .into_iter()
        .take(config.sample_budget)
        .map(|p| sample(split.labeled_row(p).0))
        .collect::<Result<Vec<_>, _>>()?;
    let target = split
        .unlabeled_indices()
        .iter()
        .take(config.sample_budget)
        .map(|&i| sample(split.target().row(i)))
        .collect::<Result<Vec<_>, _>>()?;
    let mut report = check_samples(&source, &target, model.classes(), config)?;
    report.network_disc_accuracy = Some(discriminator_accuracy(model, disc, split)?);
    Ok(report)
}
