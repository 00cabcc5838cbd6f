//! A miniature stage-one run: synthetic scenes, five virtual cameras, a few
//! hundred optimizer steps on a small model. Prints the running loss.

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rawglow::color_corrector::ColorCorrector;
use rawglow::denoiser::{DenoiserConfig, DenoiserModel};
use rawglow::noisespace::{partition, NoiseSpace};
use rawglow::scenes::gen_corpus;
use rawglow::schedule::DiffusionSchedule;
use rawglow::trainer::{pretrain_step, Adam, TrainConfig};

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let scenes = gen_corpus(24, 32, &mut rng).unwrap();
    let sched = DiffusionSchedule::build(100, 0.9999, 0.99, 0.0).unwrap();
    let space = NoiseSpace::default_space();
    let cameras = partition(&space, 5).unwrap();

    let cfg = DenoiserConfig { base_width: 8, time_dim: 16, n_cameras: 5 };
    let mut model = DenoiserModel::new_pretrain(cfg, &mut rng);
    let mut cc = ColorCorrector::new(&mut rng);
    let tc = TrainConfig { lr: 1e-3, ..TrainConfig::default() };
    let mut opt = Adam::new(&tc);

    let mut running = 0.0f64;
    for iter in 1..=300 {
        let batch: Vec<_> = scenes.choose_multiple(&mut rng, 2).cloned().collect();
        let stats = pretrain_step(
            &mut model, &mut cc, &batch, &sched, &space, &cameras, tc.lambda_img, &mut opt, &mut rng,
        )
        .unwrap();
        running = if iter == 1 { stats.loss as f64 } else { 0.95 * running + 0.05 * stats.loss as f64 };
        if iter % 50 == 0 {
            println!(
                "iter {iter:4}  loss {:.4} (eps {:.4} img {:.4})  t {}  camera {}",
                running, stats.eps_loss, stats.img_loss, stats.t, stats.camera
            );
        }
    }
}
