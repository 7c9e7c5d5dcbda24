//! Two-branch SELD network, feature-layer transfer and SED masking.

mod config;
mod net;

pub use config::{SeldConfig, POOL_FACTOR};
pub use net::{
    apply_sed_mask, branch_loss, is_feature_param, joint_loss, sed_mask, transfer_cnn, BranchKind,
    Forward, Predictions, SeldNet, BN_EPS, BN_MOMENTUM,
};
