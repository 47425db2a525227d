//! Growing neural networks by steepest descent over a gated candidate set.
//!
//! The crate implements a progressive training scheme: start from a small
//! network, and at each growth phase attach a pool of candidate structure
//! changes (neuron splits, brand-new neurons, identity-initialized residual
//! layers), each behind a bounded gate. A short joint optimization over the
//! gates picks directions, an integrated-gradient score ranks candidates, and
//! the top few by budget are materialized into the network. Everything is
//! driven by a small reverse-mode autodiff tape that re-evaluates a recorded
//! graph in place, which keeps the many-iteration experiment loops cheap.
//!
//! Modules:
//!
//! * [`autodiff`]: parameter store, tape recording, gradients, plain SGD.
//! * [`network`]: the growable feed-forward model and its tape emission.
//! * [`augment`]: candidate gates attached to a base network.
//! * [`growth`]: the two-step optimize/score/select/materialize cycle.
//! * [`continual`]: a masked master network for sequential tasks.
//! * [`data`]: synthetic benchmark generators and baseline growers.
//! * [`cli`]: config-driven experiment runner behind the `firefly` binary.

pub mod autodiff;
pub mod augment;
pub mod checkpoint;
pub mod cli;
pub mod continual;
pub mod data;
pub mod error;
pub mod growth;
pub mod jsonfmt;
pub mod logs;
pub mod network;

pub use error::{Error, Result};
