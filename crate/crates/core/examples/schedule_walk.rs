//! Walk the pyramid schedule: print the per-step quantities, then run the
//! reverse process with an oracle noise predictor to show it reconstructs a
//! known image.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rawglow::rawproc::downsample;
use rawglow::sampler_eval::enhance_core;
use rawglow::schedule::DiffusionSchedule;
use rawglow::tensor::Tensor;

fn main() {
    let stochastic = DiffusionSchedule::build(200, 0.9999, 0.99, 0.5).unwrap();
    for t in [1, 50, 100, 101, 150, 200] {
        let sigma = if t >= 2 { stochastic.sigma(t) } else { 0.0 };
        println!(
            "t {:3}: alpha {:.6} alpha_bar {:.6} r {} sigma {:.6}",
            t,
            stochastic.alpha(t),
            stochastic.alpha_bar(t),
            stochastic.r(t),
            sigma
        );
    }

    // deterministic variant (eta 0) for the oracle rollout below
    let sched = DiffusionSchedule::build(200, 0.9999, 0.99, 0.0).unwrap();

    // oracle: knows the target image, reports the exact noise in x_t
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let target = Tensor::rand_uniform(vec![4, 32, 32], 0.1, 0.9, &mut rng);
    let out = enhance_core(
        32,
        32,
        &sched,
        &mut rng,
        |x_t, t, r| {
            let x0 = downsample(&target, r)?;
            let ab = sched.alpha_bar(t);
            let num = x_t.sub(&x0.scale(ab.sqrt() as f32))?;
            Ok(num.scale(1.0 / (1.0 - ab).sqrt() as f32))
        },
        |x0, _t| Ok(x0.clone()),
    )
    .unwrap();
    let err = out
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b).abs() as f64)
        .fold(0.0, f64::max);
    println!("oracle rollout max abs error vs target: {err:.2e}");
}
