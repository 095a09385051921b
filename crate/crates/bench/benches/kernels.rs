use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use introprior_bench::{adversarial_state, batch, Scale};
use introprior_core::autodiff::Graph;
use introprior_core::distributions::{kl_mc, standard_normal, DiagGaussian};
use introprior_core::objective::{encoder_step_graph, prior_step_graph, StepNoise};
use introprior_core::prior::PriorVars;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn kl(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for scale in [Scale::SMALL, Scale::FULL] {
        let state = adversarial_state(scale);
        let density = state.prior.export_density();
        let q = DiagGaussian::new(vec![0.3, -0.2], vec![-1.0, -0.5]).unwrap();
        let noise = standard_normal(&mut rng, scale.t, 2);
        c.bench_function(&format!("kl_mc/{}", scale.label()), |b| {
            b.iter(|| kl_mc(black_box(&q), &density, &noise).unwrap())
        });
    }
}

fn component_scores(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for scale in [Scale::SMALL, Scale::FULL] {
        let state = adversarial_state(scale);
        let z = standard_normal(&mut rng, scale.batch * scale.t, 2);
        c.bench_function(&format!("component_scores_fwd_bwd/{}", scale.label()), |b| {
            b.iter(|| {
                let mut g = Graph::new();
                let pv = PriorVars::bind(&mut g, &state.prior, true);
                let zv = g.constant(z.clone());
                let s = g.component_scores(zv, pv.density.means, pv.density.log_vars, pv.density.log_weights);
                let l = g.logsumexp_rows(s);
                let loss = g.mean_all(l);
                black_box(g.backward(loss));
            })
        });
    }
}

fn player_steps(c: &mut Criterion) {
    let scale = Scale::SMALL;
    let state = adversarial_state(scale);
    let x = batch(&state, 7);
    let opts = state.config.loss_options();
    let h = state.config.hyper;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let noise = StepNoise::draw(&mut rng, &state.prior, x.rows(), &opts);
    c.bench_function(&format!("encoder_step_graph/{}", scale.label()), |b| {
        b.iter(|| encoder_step_graph(&state.models(), &x, &noise, &h, &opts).unwrap().gradients())
    });
    c.bench_function(&format!("prior_step_graph/{}", scale.label()), |b| {
        b.iter(|| prior_step_graph(&state.models(), &x, &noise, &h, &opts).unwrap().gradients())
    });
    c.bench_function(&format!("adversarial_step/{}", scale.label()), |b| {
        b.iter_batched(|| state.clone(), |mut s| s.adversarial_step(&x).unwrap(), BatchSize::LargeInput)
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = kl, component_scores, player_steps
}
criterion_main!(benches);
