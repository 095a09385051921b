mod support;

use introprior_core::objective::{prior_step_graph, StepNoise};
use introprior_core::{Models, Player};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use support::{case, fake_energy_violation, stop_gradient_violation};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn only_the_live_player_receives_gradient(
        seed in any::<u64>(),
        m in 1usize..6,
        n in 1usize..8,
        clipped in any::<bool>(),
        recon_as_fake in any::<bool>(),
    ) {
        let v = stop_gradient_violation(seed, m, n, clipped, recon_as_fake);
        prop_assert!(v.is_none(), "{}", v.unwrap());
    }

    #[test]
    fn fake_term_leaves_energies_untouched(seed in any::<u64>(), m in 2usize..6, n in 1usize..8) {
        let v = fake_energy_violation(seed, m, n);
        prop_assert!(v.is_none(), "{}", v.unwrap());
    }

    #[test]
    fn frozen_prior_flags_block_every_prior_gradient(seed in any::<u64>(), m in 1usize..5) {
        let mut c = case(seed, m, 4, true, false);
        c.prior.learnable_params = false;
        let models = Models { encoder: &c.encoder, decoder: &c.decoder, prior: &c.prior };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = StepNoise::draw(&mut rng, &c.prior, 4, &c.opts);
        let g = prior_step_graph(&models, &c.x, &noise, &c.h, &c.opts).unwrap().gradients();
        prop_assert!(g.is_zero(Player::Prior));
        c.prior.learnable_params = true;
        c.prior.learnable_contributions = false;
        let models = Models { encoder: &c.encoder, decoder: &c.decoder, prior: &c.prior };
        let g = prior_step_graph(&models, &c.x, &noise, &c.h, &c.opts).unwrap().gradients();
        prop_assert!(g.prior[2].as_slice().iter().all(|&v| v == 0.0));
    }
}
