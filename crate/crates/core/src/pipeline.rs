//! Config file, per-seed stage runner, multi-seed summaries and proportion
//! sweeps.
//!
//! Every stage reads its inputs from and writes its outputs to the seed's run
//! directory (`<output>/seed-<n>/`), so running the stages one by one gives
//! the same files as [`run_all`].
//!
//! Config format: `[section]` headers and `key = value` lines, `#` comments.
//! Unknown sections or keys and duplicate keys are errors; missing keys take
//! their defaults. [`PipelineConfig::to_text`] writes every key, and parsing
//! that text gives back an equal config.

use std::collections::HashSet;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::data_synth::{
    generate_pair, load_dataset, load_labels, save_dataset, save_labels, truth_path, DataError, LabeledDataset,
    ShiftSpec,
};
use crate::diagnostics::{empirical_theory_check, DiagnosticsError, TheoryCheckConfig, TheoryReport};
use crate::kernel_metric::{BandwidthRule, KernelSpec};
use crate::network::{AdaptationModel, Condition, Discriminator, ModelShape, NetworkError};
use crate::rng::{self, Stream};
use crate::selection::{pseudo_label, score_targets, select_balanced, Ranked, SelectionError, SelectionReport, SplitUpdate};
use crate::trainer::{
    adversarial_train, discriminator_accuracy, domain_accuracy, evaluate, init_discriminator, pretrain, Metrics, Monitor, TrainConfig,
    TrainError,
};

/// The six proportions of the sensitivity sweep.
pub const DEFAULT_PROPORTIONS: [f64; 6] = [1.0 / 2.0, 1.0 / 3.0, 1.0 / 4.0, 1.0 / 5.0, 1.0 / 6.0, 1.0 / 20.0];

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },
    #[error("{0} already exists (use --force to overwrite)")]
    Exists(PathBuf),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Diagnostics(#[from] DiagnosticsError),
}

impl PipelineError {
    fn config(message: impl Into<String>) -> Self {
        Self::Config { line: 0, message: message.into() }
    }

    pub fn is_config(&self) -> bool {
        matches!(self, Self::Config { .. } | Self::Exists(_))
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.to_path_buf(), source }
}

/// Process exit status of a multi-seed command.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExitStatus {
    Success = 0,
    ConfigError = 2,
    TrainingFailure = 3,
    PartialFailure = 4,
}

impl ExitStatus {
    pub fn code(self) -> i32 {
        self as i32
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    pub hidden: Vec<usize>,
    pub bottleneck: usize,
    pub feature_start: usize,
    pub disc_hidden: usize,
    pub disc_dropout: f64,
    pub condition: Condition,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        let shape = ModelShape::desk_default(2, 2);
        Self {
            hidden: shape.hidden,
            bottleneck: shape.bottleneck,
            feature_start: shape.feature_start,
            disc_hidden: 32,
            disc_dropout: 0.5,
            condition: Condition::Product,
        }
    }
}

impl NetworkSpec {
    pub fn shape(&self, input: usize, classes: usize) -> ModelShape {
        ModelShape {
            input,
            hidden: self.hidden.clone(),
            bottleneck: self.bottleneck,
            classes,
            feature_start: self.feature_start,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectionSpec {
    pub proportion: f64,
    pub rounds: usize,
}

impl Default for SelectionSpec {
    fn default() -> Self {
        Self { proportion: 0.25, rounds: 1 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    /// `shift.seed` is a base offset; seed `n` generates data from `shift.seed + n`.
    pub shift: ShiftSpec,
    pub kernel: KernelSpec,
    pub network: NetworkSpec,
    pub pretrain: TrainConfig,
    pub adapt: TrainConfig,
    pub selection: SelectionSpec,
    pub seeds: Vec<u64>,
    pub output: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            shift: ShiftSpec::default(),
            kernel: KernelSpec::default(),
            network: NetworkSpec::default(),
            pretrain: TrainConfig { iterations: 1000, ..TrainConfig::default() },
            adapt: TrainConfig::default(),
            selection: SelectionSpec::default(),
            seeds: vec![1, 2, 3, 4, 5],
            output: PathBuf::from("runs"),
        }
    }
}

fn join<T: fmt::Display>(items: &[T]) -> String {
    items.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn write_train(out: &mut String, section: &str, c: &TrainConfig) {
    writeln!(out, "[{section}]").unwrap();
    writeln!(out, "base_lr = {}", c.base_lr).unwrap();
    writeln!(out, "lr_gamma = {}", c.lr_gamma).unwrap();
    writeln!(out, "lr_power = {}", c.lr_power).unwrap();
    writeln!(out, "momentum = {}", c.momentum).unwrap();
    writeln!(out, "labeled_batch = {}", c.labeled_batch).unwrap();
    writeln!(out, "unlabeled_batch = {}", c.unlabeled_batch).unwrap();
    writeln!(out, "iterations = {}", c.iterations).unwrap();
    writeln!(out, "grl_lambda_max = {}", c.grl_lambda_max).unwrap();
    writeln!(out, "grl_ramp = {}", c.grl_ramp).unwrap();
    writeln!(out, "head_lr_multiplier = {}", c.head_lr_multiplier).unwrap();
    writeln!(out, "weight_decay = {}", c.weight_decay).unwrap();
    writeln!(out, "freeze_first_layer = {}", c.freeze_first_layer).unwrap();
    writeln!(out, "adversarial = {}", c.adversarial).unwrap();
    writeln!(out, "log_every = {}", c.log_every).unwrap();
}

fn parse_value<T: FromStr>(value: &str) -> Result<T, String>
where
    T::Err: fmt::Display,
{
    value.parse::<T>().map_err(|e| format!("{value:?}: {e}"))
}

fn parse_list<T: FromStr>(value: &str) -> Result<Vec<T>, String>
where
    T::Err: fmt::Display,
{
    value.split(',').map(|v| parse_value(v.trim())).collect()
}

fn set_train(c: &mut TrainConfig, key: &str, value: &str) -> Result<bool, String> {
    match key {
        "base_lr" => c.base_lr = parse_value(value)?,
        "lr_gamma" => c.lr_gamma = parse_value(value)?,
        "lr_power" => c.lr_power = parse_value(value)?,
        "momentum" => c.momentum = parse_value(value)?,
        "labeled_batch" => c.labeled_batch = parse_value(value)?,
        "unlabeled_batch" => c.unlabeled_batch = parse_value(value)?,
        "iterations" => c.iterations = parse_value(value)?,
        "grl_lambda_max" => c.grl_lambda_max = parse_value(value)?,
        "grl_ramp" => c.grl_ramp = parse_value(value)?,
        "head_lr_multiplier" => c.head_lr_multiplier = parse_value(value)?,
        "weight_decay" => c.weight_decay = parse_value(value)?,
        "freeze_first_layer" => c.freeze_first_layer = parse_value(value)?,
        "adversarial" => c.adversarial = parse_value(value)?,
        "log_every" => c.log_every = parse_value(value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

/// Parses a proportion written as a decimal or as `a/b`.
pub fn parse_proportion(text: &str) -> Result<f64, String> {
    let t = text.trim();
    let p = match t.split_once('/') {
        Some((a, b)) => parse_value::<f64>(a.trim())? / parse_value::<f64>(b.trim())?,
        None => parse_value::<f64>(t)?,
    };
    if !(p > 0.0 && p <= 1.0) {
        return Err(format!("proportion {t} outside (0, 1]"));
    }
    Ok(p)
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self, PipelineError> {
        let mut c = Self::default();
        let mut section = String::new();
        let mut seen = HashSet::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let err = |message: String| PipelineError::Config { line, message };
            let t = raw.trim();
            if t.is_empty() || t.starts_with('#') || t.starts_with(';') {
                continue;
            }
            if let Some(name) = t.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or_else(|| err(format!("bad section header {t:?}")))?;
                section = name.trim().to_string();
                if !["shift", "kernel", "network", "pretrain", "adapt", "selection", "run"].contains(&section.as_str()) {
                    return Err(err(format!("unknown section [{section}]")));
                }
                continue;
            }
            let (key, value) = t.split_once('=').ok_or_else(|| err(format!("expected key = value, got {t:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            if section.is_empty() {
                return Err(err(format!("key {key:?} before any section")));
            }
            if !seen.insert((section.clone(), key.to_string())) {
                return Err(err(format!("duplicate key {key:?} in [{section}]")));
            }
            let known = c.set(&section, key, value).map_err(err)?;
            if !known {
                return Err(err(format!("unknown key {key:?} in [{section}]")));
            }
        }
        c.validate()?;
        Ok(c)
    }

    fn set(&mut self, section: &str, key: &str, value: &str) -> Result<bool, String> {
        let s = &mut self.shift;
        let n = &mut self.network;
        match (section, key) {
            ("shift", "classes") => s.class_count = parse_value(value)?,
            ("shift", "source_per_class") => s.samples_per_class_source = parse_value(value)?,
            ("shift", "target_per_class") => s.samples_per_class_target = parse_value(value)?,
            ("shift", "radius") => s.class_center_radius = parse_value(value)?,
            ("shift", "std") => s.class_std = parse_value(value)?,
            ("shift", "rotation_deg") => s.rotation_deg = parse_value(value)?,
            ("shift", "translation_x") => s.translation[0] = parse_value(value)?,
            ("shift", "translation_y") => s.translation[1] = parse_value(value)?,
            ("shift", "dim") => s.dim = parse_value(value)?,
            ("shift", "seed") => s.seed = parse_value(value)?,
            ("kernel", "multipliers") => self.kernel.multipliers = parse_list(value)?,
            ("kernel", "bandwidth") => {
                self.kernel.base_rule = match value {
                    "mean_cross_pair" => BandwidthRule::MeanCrossPairSqDist,
                    v => BandwidthRule::Fixed(parse_value(v)?),
                }
            }
            ("kernel", "epsilon") => self.kernel.epsilon = parse_value(value)?,
            ("network", "hidden") => n.hidden = parse_list(value)?,
            ("network", "bottleneck") => n.bottleneck = parse_value(value)?,
            ("network", "feature_start") => n.feature_start = parse_value(value)?,
            ("network", "disc_hidden") => n.disc_hidden = parse_value(value)?,
            ("network", "disc_dropout") => n.disc_dropout = parse_value(value)?,
            ("network", "condition") => n.condition = parse_value(value)?,
            ("pretrain", k) => return set_train(&mut self.pretrain, k, value),
            ("adapt", k) => return set_train(&mut self.adapt, k, value),
            ("selection", "proportion") => self.selection.proportion = parse_proportion(value)?,
            ("selection", "rounds") => self.selection.rounds = parse_value(value)?,
            ("run", "seeds") => self.seeds = parse_list(value)?,
            ("run", "output") => self.output = PathBuf::from(value),
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let cfg = |e: &dyn fmt::Display| PipelineError::config(e.to_string());
        self.shift.validate().map_err(|e| cfg(&e))?;
        self.kernel.validate().map_err(|e| cfg(&e))?;
        self.pretrain.validate().map_err(|e| cfg(&e))?;
        self.adapt.validate().map_err(|e| cfg(&e))?;
        let n = &self.network;
        if n.hidden.is_empty() || n.hidden.contains(&0) || n.bottleneck == 0 || n.disc_hidden == 0 {
            return Err(PipelineError::config("layer widths must be positive"));
        }
        if n.feature_start > n.hidden.len() {
            return Err(PipelineError::config(format!(
                "feature_start {} past the bottleneck (layer {})",
                n.feature_start,
                n.hidden.len()
            )));
        }
        if !(0.0..1.0).contains(&n.disc_dropout) {
            return Err(PipelineError::config("disc_dropout must lie in [0, 1)"));
        }
        parse_proportion(&self.selection.proportion.to_string()).map_err(PipelineError::config)?;
        if self.selection.rounds == 0 {
            return Err(PipelineError::config("rounds must be at least 1"));
        }
        if self.seeds.is_empty() {
            return Err(PipelineError::config("seeds must be nonempty"));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        Self::parse(&fs::read_to_string(path).map_err(io_err(path))?)
    }

    pub fn to_text(&self) -> String {
        let s = &self.shift;
        let n = &self.network;
        let mut out = String::new();
        writeln!(out, "[shift]").unwrap();
        writeln!(out, "classes = {}", s.class_count).unwrap();
        writeln!(out, "source_per_class = {}", s.samples_per_class_source).unwrap();
        writeln!(out, "target_per_class = {}", s.samples_per_class_target).unwrap();
        writeln!(out, "radius = {}", s.class_center_radius).unwrap();
        writeln!(out, "std = {}", s.class_std).unwrap();
        writeln!(out, "rotation_deg = {}", s.rotation_deg).unwrap();
        writeln!(out, "translation_x = {}", s.translation[0]).unwrap();
        writeln!(out, "translation_y = {}", s.translation[1]).unwrap();
        writeln!(out, "dim = {}", s.dim).unwrap();
        writeln!(out, "seed = {}", s.seed).unwrap();
        writeln!(out, "\n[kernel]").unwrap();
        writeln!(out, "multipliers = {}", join(&self.kernel.multipliers)).unwrap();
        match self.kernel.base_rule {
            BandwidthRule::MeanCrossPairSqDist => writeln!(out, "bandwidth = mean_cross_pair").unwrap(),
            BandwidthRule::Fixed(g) => writeln!(out, "bandwidth = {g}").unwrap(),
        }
        writeln!(out, "epsilon = {}", self.kernel.epsilon).unwrap();
        writeln!(out, "\n[network]").unwrap();
        writeln!(out, "hidden = {}", join(&n.hidden)).unwrap();
        writeln!(out, "bottleneck = {}", n.bottleneck).unwrap();
        writeln!(out, "feature_start = {}", n.feature_start).unwrap();
        writeln!(out, "disc_hidden = {}", n.disc_hidden).unwrap();
        writeln!(out, "disc_dropout = {}", n.disc_dropout).unwrap();
        writeln!(out, "condition = {}", n.condition).unwrap();
        out.push('\n');
        write_train(&mut out, "pretrain", &self.pretrain);
        out.push('\n');
        write_train(&mut out, "adapt", &self.adapt);
        writeln!(out, "\n[selection]").unwrap();
        writeln!(out, "proportion = {}", self.selection.proportion).unwrap();
        writeln!(out, "rounds = {}", self.selection.rounds).unwrap();
        writeln!(out, "\n[run]").unwrap();
        writeln!(out, "seeds = {}", join(&self.seeds)).unwrap();
        writeln!(out, "output = {}", self.output.display()).unwrap();
        out
    }

    /// The data spec for one run seed.
    pub fn shift_for(&self, seed: u64) -> ShiftSpec {
        ShiftSpec { seed: self.shift.seed.wrapping_add(seed), ..self.shift.clone() }
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.output.join(format!("seed-{seed}"))
    }
}

/// File names inside a seed directory.
pub mod files {
    pub const SOURCE: &str = "source.csv";
    pub const TARGET: &str = "target.csv";
    pub const PRETRAINED: &str = "pretrained.ckpt";
    pub const PRETRAIN_LOG: &str = "pretrain.log";
    pub const ADAPTED: &str = "adapted.ckpt";
    pub const DISCRIMINATOR: &str = "discriminator.ckpt";
    pub const ADAPT_LOG: &str = "adapt.log";
    pub const EMBEDDING: &str = "embedding.csv";
    pub const RESULT: &str = "result.txt";
    pub const THEORY: &str = "theory.txt";
    pub const CONFIG: &str = "config.ini";

    pub fn selection(round: usize) -> String {
        if round == 1 {
            "selection.txt".to_string()
        } else {
            format!("selection-{round}.txt")
        }
    }

    pub fn adapt_log(round: usize) -> String {
        if round == 1 {
            ADAPT_LOG.to_string()
        } else {
            format!("adapt-{round}.log")
        }
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), PipelineError> {
    fs::write(path, contents).map_err(io_err(path))
}

fn read_file(path: &Path) -> Result<String, PipelineError> {
    fs::read_to_string(path).map_err(io_err(path))
}

fn metrics_log(phase: &str, trace: &[Metrics]) -> String {
    trace.iter().map(|m| format!("phase={phase} {m}\n")).collect()
}

/// Source, unlabeled target and held target labels of a seed directory.
pub struct RunData {
    pub source: LabeledDataset,
    pub target: LabeledDataset,
    pub truth: Vec<usize>,
}

impl RunData {
    pub fn load(dir: &Path) -> Result<Self, PipelineError> {
        let source = load_dataset(&dir.join(files::SOURCE))?;
        let target_path = dir.join(files::TARGET);
        let target = load_dataset(&target_path)?;
        let truth = load_labels(&truth_path(&target_path), target.class_count())?;
        Ok(Self { source, target, truth })
    }

    fn monitor(&self) -> Monitor<'_> {
        Monitor { source: &self.source, target: &self.target, target_truth: &self.truth }
    }
}

/// Generates the seed's source/target pair and writes it to `dir`.
pub fn stage_generate(config: &PipelineConfig, seed: u64, dir: &Path) -> Result<RunData, PipelineError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let pair = generate_pair(&config.shift_for(seed))?;
    save_dataset(&pair.source, &dir.join(files::SOURCE))?;
    let target_path = dir.join(files::TARGET);
    save_dataset(&pair.target, &target_path)?;
    save_labels(&pair.target_truth, &truth_path(&target_path))?;
    Ok(RunData { source: pair.source, target: pair.target, truth: pair.target_truth })
}

pub fn stage_pretrain(config: &PipelineConfig, seed: u64, dir: &Path) -> Result<AdaptationModel, PipelineError> {
    let data = RunData::load(dir)?;
    let shape = config.network.shape(data.source.dim(), data.source.class_count());
    let model = AdaptationModel::new(&shape, seed, &mut rng::stream(seed, Stream::ModelInit))?;
    let train = TrainConfig { seed, ..config.pretrain.clone() };
    let out = pretrain(model, &data.source, &train, Some(data.monitor()))?;
    out.model.save(&dir.join(files::PRETRAINED))?;
    write_file(&dir.join(files::PRETRAIN_LOG), &metrics_log("pretrain", &out.trace))?;
    Ok(out.model)
}

/// Split after promoting the targets of selection rounds `1..=rounds`.
pub fn load_split(data: &RunData, dir: &Path, rounds: usize) -> Result<SplitUpdate, PipelineError> {
    let mut split = SplitUpdate::initial(data.source.clone(), &data.target)?;
    for round in 1..=rounds {
        let report = SelectionReport::from_table(&read_file(&dir.join(files::selection(round)))?)?;
        split.promote(&report)?;
    }
    Ok(split)
}

/// Scores the still-unlabeled targets with `model` and selects a balanced
/// subset. Indices in the report refer to the full target set.
pub fn select_from_split(
    model: &AdaptationModel,
    split: &SplitUpdate,
    kernel: &KernelSpec,
    proportion: f64,
) -> Result<SelectionReport, PipelineError> {
    let remaining = split.unlabeled_indices().to_vec();
    let subset = split.target().select_rows(&remaining)?;
    let predicted: Vec<usize> = pseudo_label(model, &subset)?.into_iter().map(|p| p.class).collect();
    let scores = score_targets(model, split.source(), &subset, &predicted, kernel)?;
    let mut report = select_balanced(&predicted, &scores.relative, split.source().class_count(), proportion)?;
    for list in &mut report.ranked {
        for r in list.iter_mut() {
            *r = Ranked { index: remaining[r.index], relative: r.relative };
        }
    }
    for p in &mut report.promoted {
        p.index = remaining[p.index];
    }
    Ok(report)
}

/// Selection round `round`: the first round ranks with the pretrained model,
/// later rounds with the model adapted in the previous round.
pub fn stage_select(
    config: &PipelineConfig,
    dir: &Path,
    round: usize,
    proportion: f64,
) -> Result<SelectionReport, PipelineError> {
    let data = RunData::load(dir)?;
    let model = AdaptationModel::load(&dir.join(if round == 1 { files::PRETRAINED } else { files::ADAPTED }))?;
    let split = load_split(&data, dir, round - 1)?;
    let report = select_from_split(&model, &split, &config.kernel, proportion)?;
    write_file(&dir.join(files::selection(round)), &report.to_table())?;
    Ok(report)
}

/// Adversarial training on the split after `round` selection rounds.
pub fn stage_adapt(config: &PipelineConfig, seed: u64, dir: &Path, round: usize) -> Result<AdaptationModel, PipelineError> {
    let data = RunData::load(dir)?;
    let model = AdaptationModel::load(&dir.join(if round == 1 { files::PRETRAINED } else { files::ADAPTED }))?;
    let split = load_split(&data, dir, round)?;
    let round_seed = seed.wrapping_add(round as u64 - 1);
    let n = &config.network;
    let disc = init_discriminator(&model, n.disc_hidden, n.disc_dropout, n.condition, round_seed)?;
    let train = TrainConfig { seed: round_seed, ..config.adapt.clone() };
    let out = adversarial_train(model, disc, &split, &train, Some(data.monitor()))?;
    out.model.save(&dir.join(files::ADAPTED))?;
    out.disc.save(&dir.join(files::DISCRIMINATOR))?;
    let mut log = metrics_log("adapt", &out.trace);
    if out.fallback {
        log.push_str("fallback=source_only_batches\n");
    }
    write_file(&dir.join(files::adapt_log(round)), &log)?;
    Ok(out.model)
}

/// Per-seed outcome written to `result.txt`.
#[derive(Clone, Debug, PartialEq)]
pub struct SeedResult {
    pub seed: u64,
    /// Target accuracy of the pretrained (source-only) model.
    pub source_only_acc: f64,
    pub target_acc: f64,
    /// Pseudo-label accuracy of the pretrained model over all targets.
    pub pseudo_label_acc: f64,
    /// Precision of all promoted pseudo-labels; NaN when nothing was promoted.
    pub precision: f64,
    pub promoted: usize,
    /// Discriminator accuracy on the training sides, `S ∪ T^p` against `T − T^p`.
    pub disc_acc: f64,
    /// Discriminator accuracy on the true domains, `S` against `T`.
    pub domain_disc_acc: f64,
}

impl SeedResult {
    pub fn to_text(&self) -> String {
        format!(
            "seed={}\nsource_only_acc={}\ntarget_acc={}\npseudo_label_acc={}\nprecision={}\npromoted={}\ndisc_acc={}\ndomain_disc_acc={}\n",
            self.seed,
            self.source_only_acc,
            self.target_acc,
            self.pseudo_label_acc,
            self.precision,
            self.promoted,
            self.disc_acc,
            self.domain_disc_acc
        )
    }

    pub fn parse(text: &str) -> Result<Self, PipelineError> {
        let mut fields = std::collections::HashMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| PipelineError::config(format!("bad result line {line:?}")))?;
            fields.insert(k.trim(), v.trim());
        }
        let get = |k: &str| fields.get(k).copied().ok_or_else(|| PipelineError::config(format!("result missing {k}")));
        let num = |k: &str| -> Result<f64, PipelineError> { parse_value(get(k)?).map_err(PipelineError::config) };
        Ok(Self {
            seed: parse_value(get("seed")?).map_err(PipelineError::config)?,
            source_only_acc: num("source_only_acc")?,
            target_acc: num("target_acc")?,
            pseudo_label_acc: num("pseudo_label_acc")?,
            precision: num("precision")?,
            promoted: parse_value(get("promoted")?).map_err(PipelineError::config)?,
            disc_acc: num("disc_acc")?,
            domain_disc_acc: num("domain_disc_acc")?,
        })
    }
}

/// Evaluates the pretrained and adapted models against the held target
/// labels and dumps bottleneck embeddings of every row.
pub fn stage_evaluate(config: &PipelineConfig, seed: u64, dir: &Path) -> Result<SeedResult, PipelineError> {
    let data = RunData::load(dir)?;
    let pretrained = AdaptationModel::load(&dir.join(files::PRETRAINED))?;
    let adapted = AdaptationModel::load(&dir.join(files::ADAPTED))?;
    let disc = Discriminator::load(&dir.join(files::DISCRIMINATOR))?;
    let split = load_split(&data, dir, config.selection.rounds)?;

    let source_only = evaluate(&pretrained, &data.target, &data.truth)?;
    let result = evaluate(&adapted, &data.target, &data.truth)?;
    let promoted = split.promoted();
    let precision = if promoted.is_empty() {
        f64::NAN
    } else {
        promoted.iter().filter(|p| data.truth[p.index] == p.pseudo_label).count() as f64 / promoted.len() as f64
    };
    let out = SeedResult {
        seed,
        source_only_acc: source_only.accuracy,
        target_acc: result.accuracy,
        pseudo_label_acc: source_only.accuracy,
        precision,
        promoted: promoted.len(),
        disc_acc: discriminator_accuracy(&adapted, &disc, &split)?,
        domain_disc_acc: domain_accuracy(&adapted, &disc, &data.source, &data.target)?,
    };
    write_file(&dir.join(files::RESULT), &out.to_text())?;
    write_file(&dir.join(files::EMBEDDING), &embedding_dump(&adapted, &data, &split)?)?;
    Ok(out)
}

/// `domain,label,role,b0,b1,...` for every source and target row, where
/// role is `source`, `promoted` or `unlabeled` and target labels are the
/// held ground truth.
pub fn embedding_dump(model: &AdaptationModel, data: &RunData, split: &SplitUpdate) -> Result<String, PipelineError> {
    let width = model.bottleneck_width();
    let mut out = String::from("domain,label,role");
    for j in 0..width {
        write!(out, ",b{j}").unwrap();
    }
    out.push('\n');
    let mut row = |domain: &str, label: usize, role: &str, x: &[f64]| -> Result<(), PipelineError> {
        write!(out, "{domain},{label},{role}").unwrap();
        for v in model.bottleneck(x)? {
            write!(out, ",{v}").unwrap();
        }
        out.push('\n');
        Ok(())
    };
    let labels = data.source.labels().ok_or(TrainError::UnlabeledSource)?;
    for (i, x) in data.source.rows().enumerate() {
        row("source", labels[i], "source", x)?;
    }
    let mut promoted = vec![false; data.target.len()];
    for p in split.promoted() {
        promoted[p.index] = true;
    }
    for (i, x) in data.target.rows().enumerate() {
        row("target", data.truth[i], if promoted[i] { "promoted" } else { "unlabeled" }, x)?;
    }
    Ok(out)
}

pub fn stage_theory_check(config: &PipelineConfig, seed: u64, dir: &Path) -> Result<TheoryReport, PipelineError> {
    let data = RunData::load(dir)?;
    let model = AdaptationModel::load(&dir.join(files::ADAPTED))?;
    let disc = Discriminator::load(&dir.join(files::DISCRIMINATOR))?;
    let split = load_split(&data, dir, config.selection.rounds)?;
    let report = empirical_theory_check(&model, &disc, &split, &TheoryCheckConfig { seed, ..TheoryCheckConfig::default() })?;
    write_file(&dir.join(files::THEORY), &report.to_text())?;
    Ok(report)
}

/// All stages for one seed, in order, inside `dir`.
pub fn run_seed(config: &PipelineConfig, seed: u64, dir: &Path) -> Result<SeedResult, PipelineError> {
    stage_generate(config, seed, dir)?;
    write_file(&dir.join(files::CONFIG), &config.to_text())?;
    stage_pretrain(config, seed, dir)?;
    for round in 1..=config.selection.rounds {
        stage_select(config, dir, round, config.selection.proportion)?;
        stage_adapt(config, seed, dir, round)?;
    }
    stage_evaluate(config, seed, dir)
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub results: Vec<SeedResult>,
    pub failures: Vec<(u64, String)>,
}

/// Mean and sample standard deviation (0 for fewer than two values).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl RunSummary {
    pub fn status(&self) -> ExitStatus {
        match (self.results.is_empty(), self.failures.is_empty()) {
            (_, true) => ExitStatus::Success,
            (true, false) => ExitStatus::TrainingFailure,
            (false, false) => ExitStatus::PartialFailure,
        }
    }

    pub fn target_acc(&self) -> (f64, f64) {
        mean_std(&self.results.iter().map(|r| r.target_acc).collect::<Vec<_>>())
    }

    pub fn source_only_acc(&self) -> (f64, f64) {
        mean_std(&self.results.iter().map(|r| r.source_only_acc).collect::<Vec<_>>())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("seed,source_only_acc,target_acc,precision,promoted,disc_acc,domain_disc_acc\n");
        for r in &self.results {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.seed, r.source_only_acc, r.target_acc, r.precision, r.promoted, r.disc_acc, r.domain_disc_acc
            )
            .unwrap();
        }
        for (seed, message) in &self.failures {
            writeln!(out, "# seed {seed} failed: {message}").unwrap();
        }
        let (m, s) = self.target_acc();
        let (bm, bs) = self.source_only_acc();
        writeln!(out, "mean_target_acc={m}").unwrap();
        writeln!(out, "std_target_acc={s}").unwrap();
        writeln!(out, "mean_source_only_acc={bm}").unwrap();
        writeln!(out, "std_source_only_acc={bs}").unwrap();
        writeln!(out, "failed_seeds={}", self.failures.len()).unwrap();
        out
    }
}

/// Refuses a nonempty output directory unless `force`, then creates it.
pub fn prepare_output(dir: &Path, force: bool) -> Result<(), PipelineError> {
    if !force {
        if let Ok(mut entries) = fs::read_dir(dir) {
            if entries.next().is_some() {
                return Err(PipelineError::Exists(dir.to_path_buf()));
            }
        }
    }
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn run_seeds(config: &PipelineConfig) -> RunSummary {
    let mut summary = RunSummary { results: Vec::new(), failures: Vec::new() };
    for &seed in &config.seeds {
        match run_seed(config, seed, &config.seed_dir(seed)) {
            Ok(r) => summary.results.push(r),
            Err(e) => summary.failures.push((seed, e.to_string())),
        }
    }
    summary
}

/// Runs every seed under `config.output` and writes `summary.txt`. A failed
/// seed is recorded and the remaining seeds still run.
pub fn run_all(config: &PipelineConfig, force: bool) -> Result<RunSummary, PipelineError> {
    config.validate()?;
    prepare_output(&config.output, force)?;
    let summary = run_seeds(config);
    write_file(&config.output.join("summary.txt"), &summary.to_text())?;
    Ok(summary)
}

#[derive(Clone, Debug)]
pub struct SweepRow {
    pub proportion: f64,
    pub summary: RunSummary,
}

impl SweepRow {
    pub fn mean_precision(&self) -> f64 {
        mean_std(&self.summary.results.iter().map(|r| r.precision).collect::<Vec<_>>()).0
    }
}

pub fn sweep_table(rows: &[SweepRow]) -> String {
    let mut out = String::from("proportion,mean_target_acc,std_target_acc,mean_precision,seeds_ok,seeds_failed\n");
    for row in rows {
        let (m, s) = row.summary.target_acc();
        writeln!(
            out,
            "{},{},{},{},{},{}",
            row.proportion,
            m,
            s,
            row.mean_precision(),
            row.summary.results.len(),
            row.summary.failures.len()
        )
        .unwrap();
    }
    out
}

/// Runs the full pipeline for every proportion and seed, each cell in
/// `<output>/proportion-<i>/seed-<n>/`, and writes `sweep.txt`.
pub fn sweep_proportion(config: &PipelineConfig, proportions: &[f64], force: bool) -> Result<Vec<SweepRow>, PipelineError> {
    config.validate()?;
    for p in proportions {
        parse_proportion(&p.to_string()).map_err(PipelineError::config)?;
    }
    prepare_output(&config.output, force)?;
    let mut rows = Vec::new();
    for (i, &proportion) in proportions.iter().enumerate() {
        let cell = PipelineConfig {
            selection: SelectionSpec { proportion, ..config.selection.clone() },
            output: config.output.join(format!("proportion-{i}")),
            ..config.clone()
        };
        let summary = run_seeds(&cell);
        write_file(&cell.output.join("summary.txt"), &summary.to_text())?;
        rows.push(SweepRow { proportion, summary });
    }
    write_file(&config.output.join("sweep.txt"), &sweep_table(&rows))?;
    Ok(rows)
}

impl SweepRow {
    pub fn status(rows: &[SweepRow]) -> ExitStatus {
        let ok: usize = rows.iter().map(|r| r.summary.results.len()).sum();
        let failed: usize = rows.iter().map(|r| r.summary.failures.len()).sum();
        match (ok, failed) {
            (_, 0) => ExitStatus::Success,
            (0, _) => ExitStatus::TrainingFailure,
            _ => ExitStatus::PartialFailure,
        }
    }
}
