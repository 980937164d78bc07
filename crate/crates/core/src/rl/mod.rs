pub mod actor;
pub mod buffer;
pub mod dppo;
pub mod gae;
pub mod optim;
pub mod ppo;
pub mod pretrain;
pub mod rollout;
pub mod train;

pub use actor::{ActSample, Actor, ActorNet, ActorVars};
pub use buffer::{RolloutBuffer, Transition};
pub use dppo::{ChainTransition, DppoAgent, DppoBuffer};
pub use gae::{gae, gae_with_discounts};
pub use optim::{clip_grad_norm, Adam};
pub use ppo::{
    bc_probe, clipped_surrogate, ncdpo_loss, ppo_update, self_imitation_update, PpoConfig,
    PpoStats, SelfImitationConfig,
};
pub use pretrain::{pretrain, PretrainConfig};
pub use rollout::{collect_rollout, evaluate, EvalResult, VecEnv};
pub use train::{bc_probe_pairs, ActorConfig, Algo, TrainConfig, Trainer};

/// Mix a master seed with stream tags into an independent 64-bit seed.
pub fn derive_seed(master: u64, tags: &[u64]) -> u64 {
    let mut h = splitmix(master ^ 0x6a09_e667_f3bc_c908);
    for &t in tags {
        h = splitmix(h ^ splitmix(t.wrapping_add(0x9e37_79b9_7f4a_7c15)));
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
