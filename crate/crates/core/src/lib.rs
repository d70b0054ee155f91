//! Identity matching with entropic optimal transport.
//!
//! Samples are grouped by an opaque key (an identity, or any other domain
//! label). One group serves as reference; every other group is matched to it
//! with a Sinkhorn transport plan over cosine costs, and the transport-weighted
//! costs give a per-sample shift statistic used to normalize target features
//! before the regression head sees them.
//!
//! | module | contents |
//! |--------|----------|
//! | [`ot`] | cosine costs, Sinkhorn-Knopp, plan diagnostics |
//! | [`exact`] | transportation simplex and brute-force oracles |
//! | [`matching`] | grouping, Gumbel top-k sampling, relevance weights, shift vectors |
//! | [`learning`] | normalization, projector, losses, gradients, training loop |
//! | [`metrics`] | RMSE, SAGR, PCC, CCC |
//! | [`synthetic`] | identity-shift dataset generator |
//! | [`bench`] | solver/weighting/sampling comparison table |
//! | [`io`] | CSV and JSON formats |

pub mod bench;
pub mod dataset;
pub mod error;
pub mod exact;
pub mod io;
pub mod learning;
pub mod matching;
pub mod metrics;
pub mod ot;
pub mod synthetic;

pub use dataset::Dataset;

pub use error::{Error, Result};
pub use exact::{enumerate_tiny, solve_transport_exact, LpSolution};
pub use ot::{
    cosine_cost, plan_entropy, sinkhorn, transport_cost, CostMatrix, FeatureSet, MarginalWeights,
    SinkhornConfig, TransportPlan,
};
