//! Prediction-preserving channel disentanglement for frozen image classifiers.
//!
//! A pretrained network is split into a backbone producing `H × W × D`
//! feature maps and a head `softmax(A · avg_pool(Z) + b)`. This crate learns
//! an invertible `U` applied per pixel (`U ⊛ Z`) and compensates the head
//! with `A U⁻¹`, which leaves every logit unchanged while rotating the
//! channels so that each channel's prototypes are pure.
//!
//! Modules:
//! - [`tensorio`]: EPT binary tensors, manifests, sample streaming
//! - [`headmodel`]: transform, pooling, compensated head, preservation check
//! - [`protobank`]: activations, prototype selection, purity
//! - [`trainer`]: purity maximization with bank refresh and shrinking `m`
//! - [`explainer`]: top-k contributing channels and evidence boxes
//! - [`synthlab`]: planted-mixing fixtures with known ground truth

pub mod error;
pub mod explainer;
pub mod feature;
pub mod headmodel;
pub mod protobank;
pub mod synthlab;
pub mod tensorio;
pub mod trainer;

pub use error::{Error, Result};
pub use explainer::{evidence_box, explain, topk_channels, ExplainOptions, ExplanationReport};
pub use feature::FeatureTensor;
pub use headmodel::{
    adjust_head, apply_transform, forward, pool, verify_preservation, ClassifierHead, DisentanglementTransform,
    PreservationReport, TransformMode,
};
pub use protobank::{
    build_bank, channel_activation, prototypical_pixel, purity, select_prototypes, PrototypeBank, PrototypeRecord, Sign,
};
pub use synthlab::{generate, generate_in_memory, permutation_score, SynthSpec};
pub use tensorio::{read_tensor, write_tensor, EptTensor, FeatureStore, InMemoryStore, Manifest};
pub use trainer::{loss_gradient, m_schedule, purity_loss, train, PurityObjective, TrainConfig, TrainTrace};
