//! Pseudo-labeling, MJKD ranking and class-balanced promotion of target
//! samples into the labeled set.

use std::fmt::Write as _;

use thiserror::Error;

use crate::data_synth::{DataError, DomainTag, LabeledDataset};
use crate::kernel_metric::{relative_distance, CategoryBank, KernelError, KernelSpec, LayerBandwidths};
use crate::network::{AdaptationModel, DomainSide, FeatureStack, NetworkError};

#[derive(Debug, Error, PartialEq)]
pub enum SelectionError {
    #[error("proportion must lie in (0, 1], got {0}")]
    Proportion(f64),
    #[error("relative distance for target {0} is not finite")]
    NonFinite(usize),
    #[error("{what}: expected {expected}, got {got}")]
    Length { what: &'static str, expected: usize, got: usize },
    #[error("target index {index} out of range for {len} targets")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("target {0} is not in the unlabeled pool (already promoted?)")]
    AlreadyPromoted(usize),
    #[error("source dataset must be labeled")]
    UnlabeledSource,
    #[error("report table line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabel {
    pub class: usize,
    pub probs: Vec<f64>,
}

/// Index of the largest entry; ties go to the smaller index.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in p.iter().enumerate().skip(1) {
        if *v > p[best] {
            best = i;
        }
    }
    best
}

pub fn pseudo_label(model: &AdaptationModel, target: &LabeledDataset) -> Result<Vec<PseudoLabel>, SelectionError> {
    target
        .rows()
        .map(|x| {
            let probs = model.classify(x)?;
            Ok(PseudoLabel { class: argmax(&probs), probs })
        })
        .collect()
}

pub fn feature_stacks(model: &AdaptationModel, ds: &LabeledDataset) -> Result<Vec<FeatureStack>, SelectionError> {
    ds.rows().map(|x| Ok(model.forward_features(x)?)).collect()
}

/// Per-target MJKD to every source class and the resulting relative distance.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetScores {
    pub distances: Vec<Vec<f64>>,
    pub relative: Vec<f64>,
    pub bandwidths: LayerBandwidths,
}

/// Ranks every target by relative distance under its predicted class.
/// Bandwidths are shared per layer, computed from all source against all
/// target activations.
pub fn score_targets(
    model: &AdaptationModel,
    source: &LabeledDataset,
    target: &LabeledDataset,
    predicted: &[usize],
    spec: &KernelSpec,
) -> Result<TargetScores, SelectionError> {
    let labels = source.labels().ok_or(SelectionError::UnlabeledSource)?;
    if predicted.len() != target.len() {
        return Err(SelectionError::Length { what: "pseudo-labels", expected: target.len(), got: predicted.len() });
    }
    let src = feature_stacks(model, source)?;
    let tgt = feature_stacks(model, target)?;
    let bandwidths = LayerBandwidths::from_domains(&src, &tgt, spec)?;
    let bank = CategoryBank::new(src, labels, source.class_count(), bandwidths.clone(), spec.clone())?;
    let mut distances = Vec::with_capacity(tgt.len());
    let mut relative = Vec::with_capacity(tgt.len());
    for (t, &m) in tgt.iter().zip(predicted) {
        let d = bank.distances(t)?;
        relative.push(relative_distance(&d, m, spec.epsilon)?);
        distances.push(d);
    }
    Ok(TargetScores { distances, relative, bandwidths })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ranked {
    pub index: usize,
    pub relative: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Promoted {
    pub index: usize,
    pub pseudo_label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectionReport {
    pub proportion: f64,
    pub target_count: usize,
    /// Requested per-class count, `floor(proportion * n_t / c)`.
    pub k: usize,
    /// Per predicted class, members sorted by relative distance then index.
    pub ranked: Vec<Vec<Ranked>>,
    /// Class-major, rank order within a class.
    pub promoted: Vec<Promoted>,
    pub selected_counts: Vec<usize>,
}

impl SelectionReport {
    pub fn class_count(&self) -> usize {
        self.ranked.len()
    }

    /// How far each class fell short of `k`.
    pub fn shortfall(&self) -> Vec<usize> {
        self.selected_counts.iter().map(|n| self.k - n).collect()
    }

    /// Fraction of promoted pseudo-labels that match the held ground truth.
    /// `None` when nothing was promoted.
    pub fn precision(&self, truth: &[usize]) -> Option<f64> {
        if self.promoted.is_empty() {
            return None;
        }
        let hits = self.promoted.iter().filter(|p| truth[p.index] == p.pseudo_label).count();
        Some(hits as f64 / self.promoted.len() as f64)
    }

    /// Audit table: header comment, then `class,index,r,selected` per ranked target.
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "# proportion={} k={} classes={} targets={}\nclass,index,r,selected\n",
            self.proportion,
            self.k,
            self.class_count(),
            self.target_count
        );
        for (class, list) in self.ranked.iter().enumerate() {
            for (rank, r) in list.iter().enumerate() {
                let selected = rank < self.selected_counts[class];
                writeln!(out, "{class},{},{},{}", r.index, r.relative, selected as u8).unwrap();
            }
        }
        out
    }

    pub fn from_table(text: &str) -> Result<Self, SelectionError> {
        let mut proportion = None;
        let mut k = None;
        let mut classes = None;
        let mut targets = None;
        let mut ranked: Vec<Vec<Ranked>> = Vec::new();
        let mut selected_counts: Vec<usize> = Vec::new();
        let mut promoted = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let err = |message: String| SelectionError::Parse { line, message };
            let t = raw.trim();
            if t.is_empty() || t == "class,index,r,selected" {
                continue;
            }
            if let Some(header) = t.strip_prefix('#') {
                for field in header.split_whitespace() {
                    let (key, value) = field.split_once('=').ok_or_else(|| err(format!("bad header field {field:?}")))?;
                    match key {
                        "proportion" => proportion = Some(value.parse::<f64>().map_err(|e| err(e.to_string()))?),
                        "k" => k = Some(value.parse::<usize>().map_err(|e| err(e.to_string()))?),
                        "classes" => {
                            let c = value.parse::<usize>().map_err(|e| err(e.to_string()))?;
                            classes = Some(c);
                            ranked = vec![Vec::new(); c];
                            selected_counts = vec![0; c];
                        }
                        "targets" => targets = Some(value.parse::<usize>().map_err(|e| err(e.to_string()))?),
                        _ => return Err(err(format!("unknown header key {key:?}"))),
                    }
                }
                continue;
            }
            let cols: Vec<&str> = t.split(',').collect();
            if cols.len() != 4 {
                return Err(err(format!("expected 4 columns, got {}", cols.len())));
            }
            let class: usize = cols[0].parse().map_err(|e| err(format!("bad class: {e}")))?;
            let index: usize = cols[1].parse().map_err(|e| err(format!("bad index: {e}")))?;
            let relative: f64 = cols[2].parse().map_err(|e| err(format!("bad r: {e}")))?;
            let selected = match cols[3] {
                "1" => true,
                "0" => false,
                other => return Err(err(format!("bad selected flag {other:?}"))),
            };
            let list = ranked.get_mut(class).ok_or_else(|| err(format!("class {class} out of range")))?;
            if selected {
                if list.len() != selected_counts[class] {
                    return Err(err("selected rows must precede unselected ones within a class".into()));
                }
                selected_counts[class] += 1;
                promoted.push((class, Promoted { index, pseudo_label: class }));
            }
            list.push(Ranked { index, relative });
        }
        let missing = |what: &str| SelectionError::Parse { line: 0, message: format!("missing header field {what}") };
        let proportion = proportion.ok_or_else(|| missing("proportion"))?;
        let k = k.ok_or_else(|| missing("k"))?;
        classes.ok_or_else(|| missing("classes"))?;
        let target_count = targets.ok_or_else(|| missing("targets"))?;
        promoted.sort_by_key(|(class, _)| *class);
        Ok(Self {
            proportion,
            target_count,
            k,
            ranked,
            promoted: promoted.into_iter().map(|(_, p)| p).collect(),
            selected_counts,
        })
    }
}

/// Takes the `k = floor(proportion * n_t / c)` lowest-R members of every
/// predicted class. Classes with fewer than `k` members are under-filled,
/// never backfilled from other classes.
pub fn select_balanced(
    predicted: &[usize],
    relative: &[f64],
    class_count: usize,
    proportion: f64,
) -> Result<SelectionReport, SelectionError> {
    if !(proportion > 0.0 && proportion <= 1.0) {
        return Err(SelectionError::Proportion(proportion));
    }
    if predicted.len() != relative.len() {
        return Err(SelectionError::Length { what: "relative distances", expected: predicted.len(), got: relative.len() });
    }
    if let Some(i) = relative.iter().position(|r| !r.is_finite()) {
        return Err(SelectionError::NonFinite(i));
    }
    let n_t = predicted.len();
    let k = (proportion * n_t as f64 / class_count as f64).floor() as usize;

    let mut ranked: Vec<Vec<Ranked>> = vec![Vec::new(); class_count];
    for (index, (&class, &r)) in predicted.iter().zip(relative).enumerate() {
        ranked
            .get_mut(class)
            .ok_or(SelectionError::Length { what: "class index", expected: class_count, got: class })?
            .push(Ranked { index, relative: r });
    }
    for list in &mut ranked {
        list.sort_by(|a, b| a.relative.total_cmp(&b.relative).then(a.index.cmp(&b.index)));
    }
    let selected_counts: Vec<usize> = ranked.iter().map(|l| l.len().min(k)).collect();
    let promoted = ranked
        .iter()
        .enumerate()
        .flat_map(|(class, list)| list[..k.min(list.len())].iter().map(move |r| Promoted { index: r.index, pseudo_label: class }))
        .collect();
    Ok(SelectionReport { proportion, target_count: n_t, k, ranked, promoted, selected_counts })
}

/// Where a labeled row came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Source(usize),
    PromotedTarget(usize),
}

impl Provenance {
    /// Every labeled row, promoted targets included, sits on the source side
    /// of the domain classifier.
    pub fn domain_side(self) -> DomainSide {
        DomainSide::Source
    }
}

/// The labeled set `S ∪ T^p` and the unlabeled pool `T − T^p`.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitUpdate {
    source: LabeledDataset,
    target: LabeledDataset,
    promoted: Vec<Promoted>,
    /// Remaining target indices, ascending.
    unlabeled: Vec<usize>,
}

impl SplitUpdate {
    pub fn initial(source: LabeledDataset, target: &LabeledDataset) -> Result<Self, SelectionError> {
        if source.labels().is_none() {
            return Err(SelectionError::UnlabeledSource);
        }
        if source.dim() != target.dim() {
            return Err(SelectionError::Length { what: "target width", expected: source.dim(), got: target.dim() });
        }
        Ok(Self {
            source,
            target: target.without_labels(),
            promoted: Vec::new(),
            unlabeled: (0..target.len()).collect(),
        })
    }

    /// Moves the report's promoted targets into the labeled set. Fails,
    /// leaving `self` untouched, if any index is no longer unlabeled.
    pub fn promote(&mut self, report: &SelectionReport) -> Result<(), SelectionError> {
        let n = self.target.len();
        let mut remaining = vec![false; n];
        for &i in &self.unlabeled {
            remaining[i] = true;
        }
        for p in &report.promoted {
            if p.index >= n {
                return Err(SelectionError::IndexOutOfRange { index: p.index, len: n });
            }
            if !remaining[p.index] {
                return Err(SelectionError::AlreadyPromoted(p.index));
            }
            if p.pseudo_label >= self.source.class_count() {
                return Err(SelectionError::Length {
                    what: "pseudo-label",
                    expected: self.source.class_count(),
                    got: p.pseudo_label,
                });
            }
            remaining[p.index] = false;
        }
        self.promoted.extend_from_slice(&report.promoted);
        self.unlabeled.retain(|&i| remaining[i]);
        Ok(())
    }

    pub fn source(&self) -> &LabeledDataset {
        &self.source
    }

    pub fn target(&self) -> &LabeledDataset {
        &self.target
    }

    pub fn promoted(&self) -> &[Promoted] {
        &self.promoted
    }

    pub fn unlabeled_indices(&self) -> &[usize] {
        &self.unlabeled
    }

    pub fn labeled_len(&self) -> usize {
        self.source.len() + self.promoted.len()
    }

    pub fn unlabeled_len(&self) -> usize {
        self.unlabeled.len()
    }

    pub fn provenance(&self) -> Vec<Provenance> {
        (0..self.source.len())
            .map(Provenance::Source)
            .chain(self.promoted.iter().map(|p| Provenance::PromotedTarget(p.index)))
            .collect()
    }

    /// Features and label of a labeled row.
    pub fn labeled_row(&self, p: Provenance) -> (&[f64], usize) {
        match p {
            Provenance::Source(i) => (self.source.row(i), self.source.labels().unwrap()[i]),
            Provenance::PromotedTarget(i) => {
                let label = self.promoted.iter().find(|q| q.index == i).expect("promoted index").pseudo_label;
                (self.target.row(i), label)
            }
        }
    }

    /// `S ∪ T^p` as a dataset; promoted rows keep their `target` domain tag
    /// and carry their pseudo-labels.
    pub fn labeled_dataset(&self) -> Result<LabeledDataset, SelectionError> {
        let mut features = self.source.features().to_vec();
        let mut labels = self.source.labels().unwrap().to_vec();
        let mut domains = self.source.domains().to_vec();
        for p in &self.promoted {
            features.extend_from_slice(self.target.row(p.index));
            labels.push(p.pseudo_label);
            domains.push(DomainTag::Target);
        }
        Ok(LabeledDataset::new(features, self.source.dim(), Some(labels), domains, self.source.class_count())?)
    }

    /// `T − T^p`, or `None` if every target was promoted.
    pub fn unlabeled_dataset(&self) -> Result<Option<LabeledDataset>, SelectionError> {
        if self.unlabeled.is_empty() {
            return Ok(None);
        }
        Ok(Some(self.target.select_rows(&self.unlabeled)?))
    }
}

pub fn apply_selection(
    source: &LabeledDataset,
    target: &LabeledDataset,
    report: &SelectionReport,
) -> Result<SplitUpdate, SelectionError> {
    let mut split = SplitUpdate::initial(source.clone(), target)?;
    split.promote(report)?;
    Ok(split)
}
