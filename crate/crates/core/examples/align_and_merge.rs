//! Stage-two mechanics in isolation: average the per-camera input layers,
//! freeze the backbone, run a few alignment steps on (noisy, clean) pairs,
//! then fold the aligned input transform into the convolution weights and
//! verify the merged model is numerically identical.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rawglow::color_corrector::ColorCorrector;
use rawglow::denoiser::{DenoiserConfig, DenoiserModel};
use rawglow::noisespace::{partition, sample_params, synthesize, NoiseSpace};
use rawglow::scenes::gen_corpus;
use rawglow::schedule::DiffusionSchedule;
use rawglow::tensor::Tensor;
use rawglow::trainer::{align_step, Adam, TrainConfig};

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = DenoiserConfig { base_width: 8, time_dim: 16, n_cameras: 5 };
    let mut model = DenoiserModel::new_pretrain(cfg, &mut rng);
    let mut cc = ColorCorrector::new(&mut rng);

    model.average_cfis().unwrap();
    model.freeze_convs().unwrap();
    println!("mode {:?}, convs frozen: {}", model.mode().as_str(), model.convs_frozen());

    // a handful of real-style pairs from the target "camera"
    let space = NoiseSpace::default_space();
    let cam = &partition(&space, 5).unwrap()[2];
    let scenes = gen_corpus(6, 32, &mut rng).unwrap();
    let pairs: Vec<_> = scenes
        .iter()
        .map(|clean| {
            let params = sample_params(cam, &space, &mut rng);
            (synthesize(clean, &params, &mut rng).unwrap(), clean.clone())
        })
        .collect();

    let sched = DiffusionSchedule::build(100, 0.9999, 0.99, 0.0).unwrap();
    let tc = TrainConfig { lr: 1e-3, ..TrainConfig::default() };
    let mut opt = Adam::new(&tc);
    for iter in 1..=40 {
        let stats =
            align_step(&mut model, &mut cc, &pairs, &sched, tc.lambda_img, &mut opt, &mut rng).unwrap();
        if iter % 10 == 0 {
            println!("align iter {iter:3}  loss {:.4}", stats.loss);
        }
    }

    // merge and compare on a fresh input
    let mut merged = model.clone();
    merged.reparameterize().unwrap();
    let x = Tensor::randn(vec![1, 4, 32, 32], &mut rng);
    let cond = Tensor::randn(vec![1, 10, 32, 32], &mut rng);
    let ya = model.predict(&x, &cond, 17, None).unwrap();
    let ym = merged.predict(&x, &cond, 17, None).unwrap();
    let gap = ya
        .data()
        .iter()
        .zip(ym.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    println!("merged vs aligned max abs gap: {gap:.2e}");
}
