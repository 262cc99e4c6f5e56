//! Three-stage knowledge transfer and distillation toolkit.
//!
//! A large multi-head network is pre-trained on a related multi-label task,
//! its trunk and matching heads are transplanted into a teacher that is
//! fine-tuned on the target classes, and a compact student is then distilled
//! from the teacher with a temperature-softened KL term plus a margin-based
//! classification loss. The student's features also drive a follow-up model
//! that classifies short image sequences as worsening, stable or improving.

pub mod datakit;
pub mod error;
pub mod evalkit;
pub mod losses;
pub mod nets;
pub mod pipeline;
pub mod trajectory;

pub use error::{KtdError, Result};
