//! Token policy: vocabulary, state featurization and the network.

pub mod features;
pub mod net;
pub mod vocab;

pub use features::{featurize, FeatureConfig, Prepared};
pub use net::{kl_estimate, kl_estimate_dlogp, kl_token, MaskError, MaskOptions, PolicyConfig, PolicyParams, Sampled, TokenPass};
pub use vocab::{arg_head, ArgHead, CodecError, Vocab};
