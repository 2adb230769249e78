//! Mentor-guided off-policy reinforcement learning for a desk-scale driving
//! simulator.
//!
//! The crate couples a kinematic driving environment with a twin-critic
//! actor-critic learner, mentor action-guidance objectives on the critic
//! ([`guidance::vmr_loss`]) and on the actor ([`guidance::awag_loss`]), a
//! contrastive reward shaper ([`shaping`]), and an asynchronous micro-batching
//! inference service ([`infer`]) that keeps slow mentor calls off the rollout
//! path. Mentors are deterministic mocks ([`mentor`]).

pub mod env;
pub mod guidance;
pub mod harness;
pub mod infer;
pub mod learner;
pub mod mentor;
pub mod nn;
pub mod replay;
pub mod shaping;
