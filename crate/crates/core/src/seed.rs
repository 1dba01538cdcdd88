//! Seed derivation.
//!
//! Every random stream in a run hangs off the root seed:
//!
//! | label                        | index        | used for                                |
//! |------------------------------|--------------|-----------------------------------------|
//! | `controller-init`            | 0            | initial controller parameters           |
//! | `task-family`                | 0            | surrogate task family generation        |
//! | `task-schedule`              | 0            | which task each multitask trial targets |
//! | `rollout`                    | dispatch no. | sampling one controller rollout         |
//! | `uniform`                    | dispatch no. | one random-search draw                  |
//! | `transfer-embedding`         | 0            | the task row appended on transfer       |
//! | `eval/<task name>`           | dispatch no. | evaluator noise for one trial           |
//!
//! Streams are independent of each other and of how many workers run, which
//! keeps paired comparisons on common random numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub const CONTROLLER_INIT: &str = "controller-init";
pub const TASK_FAMILY: &str = "task-family";
pub const TASK_SCHEDULE: &str = "task-schedule";
pub const ROLLOUT: &str = "rollout";
pub const UNIFORM: &str = "uniform";
pub const TRANSFER_EMBEDDING: &str = "transfer-embedding";

pub fn derive_seed(root: u64, label: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update((label.len() as u64).to_le_bytes());
    h.update(label.as_bytes());
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

pub fn derive_rng(root: u64, label: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, label, index))
}

/// Seed for evaluating trial `index` on the named task.
pub fn evaluation_seed(root: u64, task_name: &str, index: u64) -> u64 {
    derive_seed(root, &format!("eval/{task_name}"), index)
}
