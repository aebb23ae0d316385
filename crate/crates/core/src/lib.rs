//! Select-and-adapt unsupervised domain adaptation.
//!
//! A classifier is pretrained on labeled source data, the unlabeled target
//! data is pseudo-labeled and ranked by a multi-layer joint kernelized
//! distance (MJKD), a class-balanced subset of the most confident targets is
//! promoted into the labeled set, and a conditional adversarial network then
//! aligns the remaining source and target distributions.
//!
//! Module map:
//!
//! | module | contents |
//! |--------|----------|
//! | [`data_synth`] | synthetic domain-shift benchmarks and the CSV dataset format |
//! | [`network`] | dense networks, manual backprop, gradient reversal, checkpoints |
//! | [`kernel_metric`] | multi-bandwidth Gaussian kernels, joint kernel, MJKD, relative distance |
//! | [`selection`] | pseudo-labeling, class-balanced promotion, split update |
//! | [`trainer`] | source pretraining and the adversarial loop |
//! | [`diagnostics`] | optimal discriminator / JSD identity on discrete joints |
//! | [`pipeline`] | config file, per-seed runs, sweeps |

pub mod data_synth;
pub mod diagnostics;
pub mod kernel_metric;
pub mod network;
pub mod pipeline;
pub mod rng;
pub mod selection;
pub mod trainer;

pub use data_synth::{generate_pair, load_dataset, save_dataset, DomainPair, DomainTag, LabeledDataset, ShiftSpec};
pub use kernel_metric::{CategoryBank, KernelSpec, LayerBandwidths};
pub use network::{AdaptationModel, Condition, Discriminator, FeatureStack};
pub use pipeline::PipelineConfig;
pub use selection::{SelectionReport, SplitUpdate};
pub use trainer::{Metrics, TrainConfig};
