//! Lifelong prompt tuning with similarity-partitioned knowledge transfer.
//!
//! A frozen toy encoder-decoder backbone is adapted to a sequence of tasks by
//! training one soft prompt per task. Previous tasks' prompts are kept in an
//! append-only pool; an attention-based estimator scores each of them against
//! the current instance and a threshold splits them into similar tasks (whose
//! prompts are mixed into the current prompt) and dissimilar tasks (pushed
//! away via contrastive losses on hidden and feed-forward activation states).

pub mod backbone;
pub mod config;
pub mod error;
pub mod estimator;
pub mod optim;
pub mod evalbench;
pub mod pool;
pub mod report;
pub mod tape;
pub mod task_data;
pub mod trainer;
pub mod transfer;

pub use error::{Error, Result};
