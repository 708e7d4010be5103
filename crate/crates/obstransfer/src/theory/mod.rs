//! Exact tabular machinery: small MDPs with exact dynamic programming,
//! state-aggregation representations, latent linear models, and
//! brute-force verification of the sufficiency definitions and the
//! approximate-DP error bounds they imply.

mod checks;
mod latent;
mod mdp;
mod rep;

pub use checks::{
    check_avi, check_prop1, check_prop2, check_thm1, check_thm2_transfer, exact_fit_instance,
    linear_insufficiency_example, lumpable_instance, transfer_target, AviReport, Prop1Report,
    Prop2Report, Thm1Report, Thm2Report,
};
pub use latent::{model_sufficiency_eps, TabularLatentModel};
pub use mdp::{
    policy_eval, policy_iteration, random_deterministic_mdp, random_stochastic_mdp,
    value_iteration, Policy, QTable, TabularMDP,
};
pub use rep::{
    api_run, approx_operator, enumerate_encoded_policies, epsilon_sufficiency, ApiRun, RepMap,
    ENUMERATION_CAP,
};

pub const PINV_CUTOFF: f64 = 1e-10;

#[derive(Debug, thiserror::Error)]
pub enum TheoryError {
    #[error("invalid MDP: {0}")]
    BadMdp(String),
    #[error("invalid representation map: {0}")]
    BadRepMap(String),
    #[error("policy enumeration needs {needed} policies, cap is {cap}")]
    EnumerationCap { needed: f64, cap: usize },
    #[error("policy is not constant within representation classes")]
    NotEncoded,
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("representation matrix is rank-deficient")]
    RankDeficient,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(String),
}
