//! Evaluation, diagnostic studies and exact oracles.

pub mod rollout;
pub mod oracle;
pub mod report;
pub mod studies;
