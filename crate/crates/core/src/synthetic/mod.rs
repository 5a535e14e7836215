//! Synthetic structural causal models with known ground truth.

mod fig2;
mod scm;

pub use fig2::{
    confounders, external, fig2_spec, generate_fig2_scm, in_network, COLLIDER, CONFOUNDERS, EXTERNAL, EXTERNAL_LABEL,
    IN_NETWORK, IN_NETWORK_LABEL, ISOLATED, MEDIATOR,
};
pub use scm::{
    d_separated, generate_random_scm, random_dag_spec, EdgeSpec, Heterogeneity, Mechanism, NodeSpec, Role, ScmSpec,
};

pub use crate::dataset::{write_dataset, SubjectDataset};

#[cfg(test)]
mod tests;
