//! Language-directed control of a simulated planar character.
//!
//! The crate covers the whole offline pipeline: a small autodiff stack,
//! a synthetic captioned motion corpus, a joint motion/text skill embedding,
//! a 2-D character simulator with three goal-directed tasks, a latent-
//! conditioned adversarial discriminator, PPO training, multiple-choice
//! command routing and evaluation metrics.

pub mod adversary;
pub mod checkpoint;
pub mod embed;
pub mod eval;
pub mod gradsuite;
pub mod motion;
pub mod nn;
pub mod qa;
pub mod rl;
pub mod session;
pub mod sim;
pub mod tasks;
