mod support;

use introprior_core::objective::StepNoise;
use introprior_core::trainer::{PriorConfig, PriorKind};
use introprior_core::{GameHyper, Matrix, Player, TrainConfig, TrainState};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::{close, reduction_gap, rows, TwoPlayer};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn standard_prior_losses_match_two_player_soft_introvae(
        seed in any::<u64>(),
        n in 1usize..12,
        t in 1usize..6,
        width in 2usize..10,
        latent in 1usize..4,
        closed in any::<bool>(),
    ) {
        let gap = reduction_gap(seed, n, t, width, latent, closed).map_err(TestCaseError::fail)?;
        prop_assert!(gap <= 1e-6, "relative gap {gap}");
    }
}

#[test]
fn trainer_step_with_standard_prior_is_a_two_player_step() {
    let cfg = TrainConfig {
        hidden_width: 8,
        prior: PriorConfig { kind: PriorKind::StandardGaussian, intro_prior: true, ..Default::default() },
        hyper: GameHyper { r_entropy: 0.0, ..GameHyper::default() },
        t: 3,
        warmup_epochs: 0,
        adversarial_epochs: 1,
        steps_per_epoch: 1,
        batch_size: 6,
        seed: 11,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Matrix::from_fn(6, 2, |_, _| rng.random_range(-2.0..2.0));
    let xs = rows(&x);
    let opts = cfg.loss_options();
    let h = cfg.hyper;

    let mut state = TrainState::new(cfg).unwrap();
    state.transition_to_adversarial().unwrap();
    let before = TwoPlayer::new(&state.encoder, &state.decoder);
    let prior_before = state.prior.clone();
    let mut noise_rng = state.noise_rng.clone();
    let mut after_encoder = None;
    let losses = state
        .adversarial_step_observed(&x, |p, s| {
            if p == Player::Encoder {
                after_encoder = Some(TwoPlayer::new(&s.encoder, &s.decoder));
            }
        })
        .unwrap();

    let noise_e = StepNoise::draw(&mut noise_rng, &prior_before, 6, &opts);
    let noise_d = StepNoise::draw(&mut noise_rng, &prior_before, 6, &opts);
    let want_e = before.loss_encoder(&xs, &noise_e, &h, opts.t, false);
    let want_d = after_encoder.unwrap().loss_decoder(&xs, &noise_d, &h, opts.t, false);
    assert!(close(losses.encoder.loss, want_e), "{} vs {want_e}", losses.encoder.loss);
    assert!(close(losses.decoder.loss, want_d), "{} vs {want_d}", losses.decoder.loss);
    assert!(losses.prior.is_none());
    assert_eq!(state.prior, prior_before);
    assert_eq!(state.optimizer_updates, 2);
}
