//! Fixtures shared by the kernel benchmarks in `benches/`.

use introprior_core::trainer::{LearningRates, PriorConfig, PriorKind};
use introprior_core::{Matrix, TrainConfig, TrainState};

/// Network and batch sizes of one benchmark case.
#[derive(Clone, Copy, Debug)]
pub struct Scale {
    pub width: usize,
    pub batch: usize,
    pub t: usize,
    pub modes: usize,
}

impl Scale {
    pub const SMALL: Scale = Scale { width: 64, batch: 128, t: 10, modes: 16 };
    pub const FULL: Scale = Scale { width: 256, batch: 512, t: 100, modes: 64 };

    pub fn label(&self) -> String {
        format!("w{}-b{}-t{}-m{}", self.width, self.batch, self.t, self.modes)
    }
}

/// A state just past the VampPrior-to-MoG transition, with the prior live.
pub fn adversarial_state(scale: Scale) -> TrainState {
    let config = TrainConfig {
        hidden_width: scale.width,
        batch_size: scale.batch,
        t: scale.t,
        prior: PriorConfig {
            kind: PriorKind::VampToMog,
            modes: scale.modes,
            learnable_contributions: true,
            intro_prior: true,
            ..Default::default()
        },
        warmup_epochs: 0,
        adversarial_epochs: 1,
        steps_per_epoch: 1,
        lr: LearningRates::default(),
        ..Default::default()
    };
    let mut state = TrainState::new(config).expect("benchmark config is valid");
    state.transition_to_adversarial().expect("transition");
    state
}

/// A data batch matching `state`'s configuration.
pub fn batch(state: &TrainState, seed: u64) -> Matrix {
    introprior_core::data2d::sample_dataset(&state.config.dataset, state.config.batch_size, seed)
        .expect("known dataset")
}
