//! Upside-down reinforcement learning on a CartPole family: a single
//! command-conditioned recurrent policy trained by supervised learning for
//! online RL, imitation learning, offline RL, goal-conditioned RL and
//! meta-RL.

pub mod agent;
pub mod autodiff;
pub mod envs;
pub mod policy;
pub mod replay;
