//! Spiking recurrent networks built from sparsely connected motif layers,
//! and a hybrid search over their architecture that alternates gradient
//! steps on architecture and weights with intrinsic-plasticity updates of
//! each neuron's resistance and time constant.

// `!(x >= 0.0)` is deliberate: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod grad;
pub mod ip;
pub mod network;
pub mod neuron;
pub mod relax;
pub mod search;
pub mod topology;
pub mod verify;
