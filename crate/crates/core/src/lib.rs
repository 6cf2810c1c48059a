//! Domain-aware private span rewriting: a contrastive encoder and domain
//! prototypes localize sensitive spans, and a preference-tuned policy rewrites
//! them through a token-level exponential mechanism.
//!
//! Numeric code is generic over [`scalar::Scalar`] (`f32` or `f64`); the
//! aliases below fix the default `f64` instantiation.

pub mod artifact;
pub mod chunker;
pub mod corpus;
pub mod dp_sampler;
pub mod encoder;
pub mod localizer;
pub mod optim;
pub mod pipeline;
pub mod policy;
pub mod preference;
pub mod prototypes;
pub mod rng;
pub mod scalar;

pub type Embedding = encoder::Embedding<f64>;
pub type Encoder = encoder::EncoderParams<f64>;
pub type PrototypeSet = prototypes::PrototypeSet<f64>;
pub type PrototypeMap = prototypes::PrototypeMap<f64>;
pub type Detection = localizer::DetectionResult<f64>;
pub type Policy = policy::PolicyParams<f64>;
pub type PreferencePair = preference::PreferencePair<f64>;
pub type ModelBundle = pipeline::ModelBundle<f64>;

pub use corpus::Corpus;
pub use dp_sampler::{PrivacyBudget, RewriteResult};
pub use pipeline::{PipelineConfig, PipelineError};
