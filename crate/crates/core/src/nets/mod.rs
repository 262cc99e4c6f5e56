//! Declarative networks: specs, weight bundles, forward/backward evaluation,
//! weight surgery and complexity accounting.

mod forward;
mod spec;
mod transfer;
mod weights;

pub use forward::{Gradients, Mode, NetOutput, Network, Trace};
pub use spec::{
    count_layer_macs, count_macs, count_params, ActivationKind, HeadMode, HeadSpec, LayerSpec,
    NetworkSpec, PoolKind, Shape,
};
pub use transfer::{default_head_mapping, transfer_weights, HeadMapping, HeadSource};
pub use weights::{derive_seed, init_weights, Archive, ParamArray, WeightBundle};

pub(crate) use weights::{ensure_same_keys, strip_prefix};

/// Evaluation-mode forward pass.
pub fn forward(spec: &NetworkSpec, bundle: &WeightBundle, input: &[f64]) -> crate::Result<NetOutput> {
    Network::new(spec, bundle)?.forward(input, Mode::Eval)
}
