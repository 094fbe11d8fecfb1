//! Ground-truth box worlds and brute-force oracles.

mod oracle;
mod recovery;
mod world;

pub use oracle::{grid_nearest_point_oracle, grid_tolerance, MAX_GRID_DIM, MIN_GRID_RESOLUTION};
pub use recovery::{box_purity, pairwise_auc, recovery_report, RecoveryReport};
pub use world::{generate_box_world, item_external_id, user_external_id, BoxWorld, WorldSpec};
