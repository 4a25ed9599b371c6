pub mod backends;
pub mod crop;
pub mod eval;
pub mod gating;
pub mod geometry;
pub mod imaging;
pub mod parsing;
pub mod pipeline;
pub mod serde_util;
