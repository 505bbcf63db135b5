//! Multivariate normal rectangle probabilities P(∩|T_j| < d).

pub mod bvn;
pub mod cs_exact;
pub mod lattice;
pub mod normal;
pub mod order2;
pub mod qmc;

pub use bvn::{bvn_rectangle, bvn_rectangle_exceedance};
pub use cs_exact::{cs_exceedance_exact, cs_rectangle_exact};
pub use order2::{order2_exceedance, order2_joint};
pub use qmc::{
    mvn_exceedance_qmc, mvn_rectangle_qmc, ConditionedIntegrand, ExceedanceSampler, MvnEstimate, QmcConfig, QmcMethod,
    RectangleSpec,
};
